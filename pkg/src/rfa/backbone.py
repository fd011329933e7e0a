"""Split-indexable backbones and the RFA1 checkpoint format.

A :class:`SplitNet` is a stack of blocks; split index ``i`` names the feature
between block ``i-1`` and block ``i``, so ``forward_slice(x, 0, L)`` is the
whole network and ``forward_slice(z, g, L)`` is the tail after split ``g``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from pathlib import Path
from typing import Callable

import numpy as np

from . import numcore as nc
from .numcore import Rng, Tensor

MAGIC = b"RFA1"


class CheckpointError(ValueError):
    pass


def _block_out_shape(block: dict, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    if block["kind"] == "dense":
        return (block["out"],)
    c, h, w = in_shape
    s = block.get("stride", 1)
    return (block["out"], (h + 2 - 3) // s + 1, (w + 2 - 3) // s + 1)


class SplitNet:
    def __init__(self, input_shape, blocks: list[dict], num_classes: int, arch: str = "SplitNet",
                 seed: int = 0, params: dict[str, np.ndarray] | None = None):
        self.input_shape = tuple(int(v) for v in input_shape)
        self.blocks = [dict(b) for b in blocks]
        self.num_classes = int(num_classes)
        self.arch = arch
        self.seed = int(seed)
        self.shapes = [self.input_shape]
        for b in self.blocks:
            self.shapes.append(_block_out_shape(b, self.shapes[-1]))
        if self.shapes[-1] != (self.num_classes,):
            raise ValueError(f"last block emits {self.shapes[-1]}, expected ({self.num_classes},)")
        self.params: dict[str, Tensor] = {}
        init_rng = Rng(seed, f"{arch}/init")
        for i, (b, in_shape) in enumerate(zip(self.blocks, self.shapes)):
            if b["kind"] == "dense":
                fan_in = int(np.prod(in_shape))
                wshape = (b["out"], fan_in)
            else:
                fan_in = in_shape[0] * 9
                wshape = (b["out"], in_shape[0], 3, 3)
            bound = np.sqrt(6.0 / fan_in)
            self.params[f"block{i}.weight"] = Tensor(init_rng.uniform(-bound, bound, wshape), requires_grad=True)
            self.params[f"block{i}.bias"] = Tensor(np.zeros(b["out"]), requires_grad=True)
        if params is not None:
            self.load_params(params)

    # -- structure

    @property
    def num_splits(self) -> int:
        return len(self.blocks)

    def feature_shape(self, split: int) -> tuple[int, ...]:
        return self.shapes[split]

    def feature_dim(self, split: int) -> int:
        return int(np.prod(self.shapes[split]))

    def named_params(self) -> dict[str, Tensor]:
        return self.params

    def param_list(self) -> list[Tensor]:
        return list(self.params.values())

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def load_params(self, values: dict[str, np.ndarray]) -> None:
        if set(values) != set(self.params):
            raise CheckpointError(f"parameter names differ: {sorted(set(values) ^ set(self.params))}")
        for k, v in values.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != self.params[k].shape:
                raise CheckpointError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k] = Tensor(v, requires_grad=True)

    def descriptor(self) -> dict:
        return {"arch": self.arch, "input_shape": list(self.input_shape), "blocks": self.blocks,
                "num_classes": self.num_classes, "num_splits": self.num_splits, "seed": self.seed}

    def clone(self) -> "SplitNet":
        return SplitNet(self.input_shape, self.blocks, self.num_classes, self.arch, self.seed,
                        {k: v.data.copy() for k, v in self.params.items()})

    def checksum(self) -> str:
        return params_checksum(self.params)

    # -- evaluation

    def forward_slice(self, x, start: int, stop: int, track_params: bool = True) -> Tensor:
        """Run blocks ``start .. stop-1`` on a split-``start`` feature."""
        L = self.num_splits
        if not (0 <= start < stop <= L):
            raise IndexError(f"invalid slice [{start}, {stop}) for {L} splits")
        x = nc.as_tensor(x)
        expect = self.shapes[start]
        got = x.shape[1:]
        if got != expect and int(np.prod(got)) != int(np.prod(expect)):
            raise nc.ShapeError(f"split {start} expects feature shape {expect}, got {got}")
        if self.blocks[start]["kind"] == "conv" and got != expect:
            x = nc.reshape(x, (x.shape[0],) + expect)
        for i in range(start, stop):
            b = self.blocks[i]
            w, bias = self.params[f"block{i}.weight"], self.params[f"block{i}.bias"]
            if not track_params:
                w, bias = Tensor(w.data), Tensor(bias.data)
            if b["kind"] == "dense":
                x = nc.affine(nc.flatten(x), w, bias)
            else:
                x = nc.conv2d(x, w, bias, stride=b.get("stride", 1), padding=1)
            if i < L - 1:
                x = nc.relu(x)
        return x

    def __call__(self, x, track_params: bool = True) -> Tensor:
        return self.forward_slice(x, 0, self.num_splits, track_params)

    def tail_copy(self, d: int) -> "SplitNet":
        """Independent copy of blocks [d, L) taking split-``d`` features as input."""
        if not (0 < d < self.num_splits):
            raise IndexError(f"duplicate_tail: d={d} outside (0, {self.num_splits})")
        blocks = self.blocks[d:]
        params = {f"block{i - d}.{k}": self.params[f"block{i}.{k}"].data.copy()
                  for i in range(d, self.num_splits) for k in ("weight", "bias")}
        return SplitNet(self.shapes[d], blocks, self.num_classes, f"{self.arch}-tail{d}", self.seed, params)


def ref_net_d(input_dim: int, num_classes: int, seed: int = 0) -> SplitNet:
    """Dense reference net input->256->128->64->64->classes (5 splits, d=4 by default)."""
    widths = [256, 128, 64, 64, num_classes]
    return SplitNet((input_dim,), [{"kind": "dense", "out": w} for w in widths], num_classes, "RefNetD", seed)


def ref_net_c(input_shape=(1, 28, 28), num_classes: int = 10, seed: int = 0) -> SplitNet:
    """Two stride-2 3x3 conv blocks followed by the RefNetD dense tail."""
    blocks = [{"kind": "conv", "out": 8, "stride": 2}, {"kind": "conv", "out": 16, "stride": 2}]
    blocks += [{"kind": "dense", "out": w} for w in (256, 128, 64, 64, num_classes)]
    return SplitNet(input_shape, blocks, num_classes, "RefNetC", seed)


def forward_slice(net: SplitNet, x, start: int, stop: int, track_params: bool = True) -> Tensor:
    return net.forward_slice(x, start, stop, track_params)


def predict(net: SplitNet, x) -> tuple[np.ndarray, np.ndarray]:
    """(argmax labels, softmax probabilities); ties go to the lower class index."""
    logits = net.forward_slice(x, 0, net.num_splits, track_params=False).data
    probs = nc.softmax_np(logits)
    return np.argmax(logits, axis=1), probs


def duplicate_tail(net: SplitNet, d: int) -> SplitNet:
    return net.tail_copy(d)


def params_checksum(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k].data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- checkpoints

# arch name -> builder(descriptor, params) ; adapter module registers RFA/RFAI
LOADERS: dict[str, Callable[[dict, dict[str, np.ndarray]], object]] = {}


def _load_splitnet(desc: dict, params: dict[str, np.ndarray]) -> SplitNet:
    return SplitNet(desc["input_shape"], desc["blocks"], desc["num_classes"], desc["arch"],
                    desc.get("seed", 0), params)


for _name in ("SplitNet", "RefNetD", "RefNetC"):
    LOADERS[_name] = _load_splitnet


def encode_checkpoint(descriptor: dict, params: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    header = {"descriptor": descriptor, "meta": meta or {}}
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out = [MAGIC, struct.pack("<I", len(text)), text, struct.pack("<I", len(params))]
    for name in params:
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode_checkpoint(raw: bytes) -> tuple[dict, dict, dict[str, np.ndarray]]:
    """Returns (descriptor, meta, params) or raises CheckpointError."""
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError("truncated checkpoint")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    (hlen,) = struct.unpack("<I", take(4))
    try:
        header = json.loads(take(hlen))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt metadata block: {e}") from None
    (count,) = struct.unpack("<I", take(4))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(raw):
        raise CheckpointError("trailing bytes after last tensor")
    return header["descriptor"], header.get("meta", {}), params


def save_checkpoint(model, path, meta: dict | None = None) -> None:
    """Write any model exposing ``descriptor()`` and ``named_params()``."""
    params = {k: v.data for k, v in model.named_params().items()}
    if meta is None:
        meta = getattr(model, "meta", None) or {}
    Path(path).write_bytes(encode_checkpoint(model.descriptor(), params, meta))


def load_checkpoint(path):
    desc, meta, params = decode_checkpoint(Path(path).read_bytes())
    arch = desc.get("arch")
    if arch not in LOADERS:
        # tails of a backbone keep the parent's loader
        base = str(arch).split("-tail")[0]
        if base not in LOADERS or "-tail" not in str(arch):
            raise CheckpointError(f"unknown architecture {arch!r}")
        arch = base
    model = LOADERS[arch](copy.deepcopy(desc), params)
    model.meta = meta
    return model
