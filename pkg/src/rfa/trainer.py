"""Outer-loop minimisation: Adam, adapter-only (fb) and alternating joint
(ub) adapter training, the full-model AT-PGD baseline, run records and
robust-overfitting detection."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import numcore as nc
from .adapter import (LossWeights, RfaModule, distill_logits, erroneous_labels, loss_components, loss_fb,
                      loss_ub, rfa_forward)
from .attacks import AttackSpec, pgd_feature, run_attack
from .backbone import SplitNet
from .datasets import BatchPlan, Dataset, batch_indices
from .numcore import Rng, Tensor

log = logging.getLogger(__name__)

MODES = ("fb", "ub", "at_pgd_baseline", "standard")


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


def adam_init(params: list[Tensor]) -> AdamState:
    return AdamState([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``.

    Parameters whose gradient is ``None`` (not reached by the loss) are left
    untouched, moments included.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state differ in length")
    b1, b2 = betas
    state.t += 1
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        p.data = p.data - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
    return state


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr < 0:
            raise ValueError("learning rate must be >= 0")
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = adam_init(params)

    def step(self, grads: dict[int, np.ndarray]) -> int:
        """Update from a ``backward`` gradient map; returns how many tensors moved."""
        gl = [grads.get(p.node_id) for p in self.params]
        if self.lr == 0:
            return 0
        adam_step(self.params, gl, self.state, self.lr, self.betas, self.eps)
        return sum(g is not None for g in gl)


# ---------------------------------------------------------------- config and records


def default_eval_attack() -> AttackSpec:
    return AttackSpec(family="pgd", space="input", norm="l_inf", epsilon=8 / 255, k=10)


@dataclass
class TrainConfig:
    mode: str = "fb"
    attack: AttackSpec = field(default_factory=lambda: AttackSpec(space="feature", eta=0.035, k=10, g=3))
    eval_attack: AttackSpec = field(default_factory=default_eval_attack)
    g: int = 3
    d: int = 4
    epochs: int = 10
    batch: BatchPlan = field(default_factory=lambda: BatchPlan(64, 0, False))
    learning_rate: float = 0.001
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    ub_backbone_lr: float | None = None  # None -> learning_rate
    sample_latent: bool = True
    eval_max_samples: int | None = None

    def __post_init__(self):
        if self.attack.space == "feature" and self.attack.g != self.g:
            self.attack = replace(self.attack, g=self.g)
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.mode in ("fb", "ub") and self.attack.space == "feature" and not self.attack.g < self.d:
            raise ValueError(f"feature attack split g={self.attack.g} must be < adapter split d={self.d}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


TIMING_FIELDS = ("wall_time",)


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    mode: str
    epochs: list[dict] = field(default_factory=list)
    update_log: list[str] = field(default_factory=list)
    checkpoints: dict[str, str] = field(default_factory=dict)

    def column(self, key: str) -> np.ndarray:
        return np.array([e[key] for e in self.epochs], dtype=float)

    def values(self) -> list[dict]:
        """Epoch rows without timing columns (the reproducible part)."""
        return [{k: v for k, v in e.items() if k not in TIMING_FIELDS} for e in self.epochs]

    def to_csv(self) -> str:
        if not self.epochs:
            return ""
        keys = list(self.epochs[0].keys())
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for e in self.epochs:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in e.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"config_hash": self.config_hash, "seed": self.seed, "mode": self.mode,
                           "epochs": self.epochs, "update_log": self.update_log,
                           "checkpoints": self.checkpoints}, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))


# ---------------------------------------------------------------- evaluation


def _predict_labels(backbone: SplitNet, x, rfa=None) -> np.ndarray:
    if rfa is None:
        return np.argmax(backbone.forward_slice(x, 0, backbone.num_splits, track_params=False).data, axis=1)
    return np.argmax(distill_logits(rfa, backbone, x)[1], axis=1)


def evaluate_errors(backbone: SplitNet, data: Dataset, attack: AttackSpec | None, rfa=None,
                    batch_size: int = 256, seed: int = 0) -> tuple[float, float]:
    """(clean error, gray-box robust error); attacks see the backbone only."""
    wrong_clean = wrong_adv = 0
    rng = Rng(seed, "eval")
    for s in range(0, len(data), batch_size):
        x, y = data.images[s:s + batch_size], data.labels[s:s + batch_size]
        wrong_clean += int(np.sum(_predict_labels(backbone, x, rfa) != y))
        if attack is not None:
            x_adv = run_attack(backbone, x, y, attack, rng.child(str(s)))
            wrong_adv += int(np.sum(_predict_labels(backbone, x_adv, rfa) != y))
    n = len(data)
    return wrong_clean / n, (wrong_adv / n if attack is not None else float("nan"))


def _cap(data: Dataset, n: int | None) -> Dataset:
    return data if n is None or n >= len(data) else data.subset(np.arange(n))


# ---------------------------------------------------------------- training loops


def _feature_pair(backbone: SplitNet, x, y, cfg: TrainConfig, rng: Rng, track: bool):
    """(z_d_plus, z_d_minus, adversarial logits) for one batch."""
    L, d = backbone.num_splits, cfg.d
    atk = cfg.attack
    if atk.space == "feature":
        g = atk.g
        z_g = backbone.forward_slice(x, 0, g, track_params=track)
        z_g_adv = pgd_feature(backbone, z_g.data, y, atk)
        z_plus = backbone.forward_slice(z_g, g, d, track_params=track)
        z_minus = backbone.forward_slice(z_g_adv, g, d, track_params=track)
    else:
        x_adv = run_attack(backbone, x, y, atk, rng)
        z_plus = backbone.forward_slice(x, 0, d, track_params=track)
        z_minus = backbone.forward_slice(x_adv, 0, d, track_params=track)
    adv_logits = backbone.forward_slice(Tensor(z_minus.data), d, L, track_params=False).data
    return z_plus, z_minus, adv_logits


def _epoch_row(epoch: int, sums: dict, n_batches: int, train_wrong_adv: int, n_train: int,
               backbone, train, test, cfg, rfa, t0) -> dict:
    row = {"epoch": epoch}
    train_eval = _cap(train, cfg.eval_max_samples)
    test_eval = _cap(test, cfg.eval_max_samples) if test is not None else None
    row["train_std_err"] = evaluate_errors(backbone, train_eval, None, rfa)[0]
    row["train_robust_err"] = train_wrong_adv / n_train
    if test_eval is not None:
        std, rob = evaluate_errors(backbone, test_eval, cfg.eval_attack, rfa, seed=cfg.seed * 1000 + epoch)
        row["test_std_err"], row["test_robust_err"] = std, rob
    for k, v in sums.items():
        row[f"loss_{k}"] = v / max(n_batches, 1)
    row["wall_time"] = time.perf_counter() - t0
    return row


def train_fb(backbone: SplitNet, rfa: RfaModule, train: Dataset, config: TrainConfig,
             test: Dataset | None = None, on_epoch: Callable | None = None) -> tuple[RfaModule, RunRecord]:
    """Adapter-only training; the backbone parameters are never written."""
    cfg = replace(config, mode="fb")
    _check_splits(backbone, rfa, cfg)
    record = RunRecord(cfg.hash(), cfg.seed, "fb")
    opt_a = Adam(rfa.param_list(), cfg.learning_rate, cfg.betas, cfg.adam_eps)
    before = backbone.checksum()
    for epoch in range(1, cfg.epochs + 1):
        _run_epoch(backbone, rfa, train, test, cfg, record, epoch, opt_a, None, on_epoch)
    if backbone.checksum() != before:
        raise RuntimeError("backbone parameters changed during adapter-only training")
    return rfa, record


def train_ub(backbone: SplitNet, rfa: RfaModule, train: Dataset, config: TrainConfig,
             test: Dataset | None = None, on_epoch: Callable | None = None) -> tuple[SplitNet, RfaModule, RunRecord]:
    """Alternating updates per batch: odd batches L_FB on theta_A, even batches L_UB on theta_A and theta_B."""
    cfg = replace(config, mode="ub")
    _check_splits(backbone, rfa, cfg)
    record = RunRecord(cfg.hash(), cfg.seed, "ub")
    opt_a = Adam(rfa.param_list(), cfg.learning_rate, cfg.betas, cfg.adam_eps)
    lr_b = cfg.learning_rate if cfg.ub_backbone_lr is None else cfg.ub_backbone_lr
    opt_b = Adam(backbone.param_list(), lr_b, cfg.betas, cfg.adam_eps)
    for epoch in range(1, cfg.epochs + 1):
        _run_epoch(backbone, rfa, train, test, cfg, record, epoch, opt_a, opt_b, on_epoch)
    return backbone, rfa, record


def _check_splits(backbone: SplitNet, rfa: RfaModule, cfg: TrainConfig) -> None:
    if rfa.d != cfg.d:
        raise ValueError(f"adapter is at d={rfa.d} but config asks for d={cfg.d}")
    if cfg.attack.space == "feature" and not (0 < cfg.attack.g < cfg.d):
        raise ValueError(f"need 0 < g < d, got g={cfg.attack.g}, d={cfg.d}")
    if rfa.feature_shape != backbone.feature_shape(cfg.d):
        raise ValueError("adapter feature shape does not match the backbone at d")


def rfa_step(backbone: SplitNet, rfa: RfaModule, x, y, cfg: TrainConfig, opt_a: Adam, opt_b: Adam | None,
             rng: Rng) -> tuple[dict[str, float], int]:
    """One adapter update (L_FB), or a joint one (L_UB) when ``opt_b`` is given.

    Returns the loss components and the number of attacked samples C_R gets wrong.
    """
    joint = opt_b is not None
    z_plus, z_minus, adv_logits = _feature_pair(backbone, x, y, cfg, rng.child("attack"), track=joint)
    y_bar = erroneous_labels(adv_logits, y)
    comps = loss_components(rfa, z_plus, z_minus, y, y_bar, cfg.weights,
                            rng.child("latent") if cfg.sample_latent else None, with_cn=not joint)
    if joint:
        ce_b = nc.cross_entropy(backbone.forward_slice(x, 0, backbone.num_splits), y)
        loss = loss_ub(cfg.weights, comps, ce_b)
        comps["b"] = ce_b
    else:
        loss = loss_fb(cfg.weights, comps)
    grads = nc.backward(loss)
    opt_a.step(grads)
    if joint:
        opt_b.step(grads)
    out = {"total": loss.item(), **{k: v.item() for k, v in comps.items()}}
    zr = rfa_forward(rfa, Tensor(z_minus.data), None, track=False)["z_r"]
    pred = np.argmax(rfa.head_r.forward_slice(zr, 0, rfa.head_r.num_splits, track_params=False).data, axis=1)
    return out, int(np.sum(pred != y))


def at_step(backbone: SplitNet, x, y, cfg: TrainConfig, opt: Adam, rng: Rng | None) -> tuple[float, int]:
    """One full-model update on PGD inputs (or clean inputs in standard mode)."""
    if cfg.mode == "at_pgd_baseline":
        x = run_attack(backbone, x, y, cfg.attack, rng)
    logits = backbone.forward_slice(x, 0, backbone.num_splits)
    loss = nc.cross_entropy(logits, y)
    wrong = int(np.sum(np.argmax(logits.data, axis=1) != y))
    opt.step(nc.backward(loss))
    return loss.item(), wrong


def _run_epoch(backbone, rfa, train, test, cfg: TrainConfig, record: RunRecord, epoch: int,
               opt_a: Adam, opt_b: Adam | None, on_epoch) -> None:
    t0 = time.perf_counter()
    rng = Rng(cfg.seed, f"train/{epoch}")
    sums: dict[str, float] = {}
    wrong_adv = 0
    idx_list = batch_indices(len(train), replace(cfg.batch, shuffle_seed=cfg.batch.shuffle_seed + cfg.seed), epoch)
    for b, idx in enumerate(idx_list):
        x, y = train.images[idx], train.labels[idx]
        joint = opt_b is not None and (len(record.update_log) % 2 == 1)
        comps, wrong = rfa_step(backbone, rfa, x, y, cfg, opt_a, opt_b if joint else None, rng.child(str(b)))
        record.update_log.append("A+B" if joint else "A")
        for k, v in comps.items():
            sums[k] = sums.get(k, 0.0) + v
        wrong_adv += wrong
    row = _epoch_row(epoch, sums, len(idx_list), wrong_adv, len(train), backbone, train, test, cfg, rfa, t0)
    record.epochs.append(row)
    log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in row.items() if isinstance(v, float)})
    if on_epoch:
        on_epoch(row)


def train_at_baseline(backbone: SplitNet, train: Dataset, config: TrainConfig, test: Dataset | None = None,
                      on_epoch: Callable | None = None) -> tuple[SplitNet, RunRecord]:
    """Full-model training on adversarial inputs only (mode at_pgd_baseline) or on clean inputs (standard)."""
    cfg = config
    if cfg.mode not in ("at_pgd_baseline", "standard"):
        cfg = replace(cfg, mode="at_pgd_baseline")
    if cfg.mode == "at_pgd_baseline" and cfg.attack.space != "input":
        raise ValueError("the AT baseline needs an input-space attack")
    record = RunRecord(cfg.hash(), cfg.seed, cfg.mode)
    opt = Adam(backbone.param_list(), cfg.learning_rate, cfg.betas, cfg.adam_eps)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        rng = Rng(cfg.seed, f"train/{epoch}")
        sums = {"ce": 0.0}
        wrong_adv = 0
        idx_list = batch_indices(len(train), replace(cfg.batch, shuffle_seed=cfg.batch.shuffle_seed + cfg.seed),
                                 epoch)
        for b, idx in enumerate(idx_list):
            loss, wrong = at_step(backbone, train.images[idx], train.labels[idx], cfg, opt, rng.child(str(b)))
            wrong_adv += wrong
            record.update_log.append("B")
            sums["ce"] += loss
        row = _epoch_row(epoch, sums, len(idx_list), wrong_adv, len(train), backbone, train, test, cfg, None, t0)
        record.epochs.append(row)
        log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in row.items() if isinstance(v, float)})
        if on_epoch:
            on_epoch(row)
    return backbone, record


def train_standard(backbone: SplitNet, train: Dataset, config: TrainConfig, test: Dataset | None = None,
                   on_epoch: Callable | None = None) -> tuple[SplitNet, RunRecord]:
    return train_at_baseline(backbone, train, replace(config, mode="standard"), test, on_epoch)


# ---------------------------------------------------------------- robust overfitting


def moving_average(values, window: int = 5) -> np.ndarray:
    """Trailing mean over up to ``window`` most recent values."""
    v = np.asarray(values, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def detect_ro(record_or_curve, window: int = 5, threshold: float = 0.02) -> dict:
    """Flag robust overfitting: final smoothed test robust error above its minimum by > threshold."""
    curve = record_or_curve.column("test_robust_err") if isinstance(record_or_curve, RunRecord) \
        else np.asarray(record_or_curve, dtype=float)
    if curve.size < 10:
        raise ValueError(f"need >= 10 epochs of test_robust_err, got {curve.size}")
    smooth = moving_average(curve, window)
    best = int(np.argmin(smooth))
    gap = float(smooth[-1] - smooth[best])
    return {"ro_detected": gap > threshold, "best_epoch": best + 1, "final_gap": gap,
            "smoothed": smooth.tolist()}


def convergence_epoch(record_or_curve, key: str = "loss_total", tol: float = 0.05) -> int:
    """First epoch (1-based) whose value has covered all but ``tol`` of the
    drop from the first epoch to the best one."""
    curve = record_or_curve.column(key) if isinstance(record_or_curve, RunRecord) \
        else np.asarray(record_or_curve, dtype=float)
    if curve.size == 0:
        raise ValueError("empty curve")
    lo = curve.min()
    cut = lo + tol * (curve[0] - lo)
    return int(np.nonzero(curve <= cut)[0][0]) + 1
