"""Robustness feature adapter: two VAEs that split a split-d feature into a
robust and a non-robust component, the classifier heads that drive them,
the training losses, and the stripped inference module."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numcore as nc
from .backbone import LOADERS, SplitNet, duplicate_tail, params_checksum
from .numcore import Rng, Tensor

LOGVAR_INIT = -4.0


@dataclass(frozen=True)
class LossWeights:
    lambda_cn: float = 0.4
    lambda_tp: float = 0.4
    lambda_b: float = 0.6
    tau: float = 0.5
    lambda_kl: float = 0.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be >= 0")


class VAE:
    """Dense encoder (hidden -> mu, logvar) and dense decoder back to feature_dim."""

    def __init__(self, feature_dim: int, latent_dim: int = 16, hidden: int = 64, rng: Rng | None = None,
                 params: dict[str, np.ndarray] | None = None):
        self.feature_dim, self.latent_dim, self.hidden = int(feature_dim), int(latent_dim), int(hidden)
        rng = rng or Rng(0, "vae")
        shapes = {"enc.weight": (hidden, feature_dim), "enc.bias": (hidden,),
                  "mu.weight": (latent_dim, hidden), "mu.bias": (latent_dim,),
                  "logvar.weight": (latent_dim, hidden), "logvar.bias": (latent_dim,),
                  "dec.weight": (hidden, latent_dim), "dec.bias": (hidden,),
                  "out.weight": (feature_dim, hidden), "out.bias": (feature_dim,)}
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            if name.endswith("bias"):
                val = np.full(shape, LOGVAR_INIT) if name == "logvar.bias" else np.zeros(shape)
            elif name == "logvar.weight":
                val = np.zeros(shape)
            else:
                bound = np.sqrt(6.0 / shape[1])
                val = rng.child(name).uniform(-bound, bound, shape)
            self.params[name] = Tensor(val, requires_grad=True)
        if params is not None:
            for k, v in params.items():
                if k not in self.params or self.params[k].shape != np.shape(v):
                    raise ValueError(f"VAE parameter {k} does not fit")
                self.params[k] = Tensor(v, requires_grad=True)

    @classmethod
    def identity(cls, feature_dim: int) -> "VAE":
        """Pass-through VAE for non-negative inputs (decoder(mu(z)) == z)."""
        eye = np.eye(feature_dim)
        zeros = np.zeros(feature_dim)
        return cls(feature_dim, feature_dim, feature_dim, params={
            "enc.weight": eye, "enc.bias": zeros, "mu.weight": eye, "mu.bias": zeros,
            "logvar.weight": np.zeros((feature_dim, feature_dim)), "logvar.bias": np.full(feature_dim, -40.0),
            "dec.weight": eye, "dec.bias": zeros, "out.weight": eye, "out.bias": zeros})

    def _p(self, name: str, track: bool) -> Tensor:
        p = self.params[name]
        return p if track else Tensor(p.data)

    def encode(self, z, track: bool = True) -> tuple[Tensor, Tensor]:
        h = nc.relu(nc.affine(nc.flatten(nc.as_tensor(z)), self._p("enc.weight", track), self._p("enc.bias", track)))
        mu = nc.affine(h, self._p("mu.weight", track), self._p("mu.bias", track))
        logvar = nc.affine(h, self._p("logvar.weight", track), self._p("logvar.bias", track))
        return mu, logvar

    def decode(self, s: Tensor, track: bool = True) -> Tensor:
        h = nc.relu(nc.affine(s, self._p("dec.weight", track), self._p("dec.bias", track)))
        return nc.affine(h, self._p("out.weight", track), self._p("out.bias", track))

    def __call__(self, z, rng: Rng | None = None, track: bool = True):
        """(reconstruction, mu, logvar); ``rng=None`` decodes mu deterministically."""
        z = nc.as_tensor(z)
        if z.data.reshape(z.shape[0], -1).shape[1] != self.feature_dim:
            raise nc.ShapeError(f"VAE expects feature dim {self.feature_dim}, got {z.shape[1:]}")
        mu, logvar = self.encode(z, track)
        out = self.decode(nc.reparameterize(mu, logvar, rng), track)
        if out.shape != z.shape:
            out = nc.reshape(out, z.shape)
        return out, mu, logvar

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def descriptor(self) -> dict:
        return {"feature_dim": self.feature_dim, "latent_dim": self.latent_dim, "hidden": self.hidden}


class RfaModule:
    def __init__(self, backbone: SplitNet, d: int = 4, latent_dim: int = 16, hidden: int = 64, seed: int = 0,
                 identity_init: bool = False):
        if not (0 < d < backbone.num_splits):
            raise IndexError(f"adapter site d={d} outside (0, {backbone.num_splits})")
        self.d = d
        self.feature_shape = backbone.feature_shape(d)
        self.feature_dim = backbone.feature_dim(d)
        rng = Rng(seed, "rfa")
        if identity_init:
            self.vae_r, self.vae_n = VAE.identity(self.feature_dim), VAE.identity(self.feature_dim)
        else:
            self.vae_r = VAE(self.feature_dim, latent_dim, hidden, rng.child("vae_r"))
            self.vae_n = VAE(self.feature_dim, latent_dim, hidden, rng.child("vae_n"))
        self.head_r = duplicate_tail(backbone, d)
        self.head_n = duplicate_tail(backbone, d)
        self.seed = seed
        self.meta: dict = {}

    @property
    def latent_dim(self) -> int:
        return self.vae_r.latent_dim

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for prefix, mod in (("vae_r", self.vae_r), ("vae_n", self.vae_n), ("head_r", self.head_r),
                            ("head_n", self.head_n)):
            for k, v in mod.params.items():
                out[f"{prefix}.{k}"] = v
        return out

    def param_list(self) -> list[Tensor]:
        return list(self.named_params().values())

    def num_params(self) -> int:
        return sum(p.data.size for p in self.param_list())

    def checksum(self) -> str:
        return params_checksum(self.named_params())

    def descriptor(self) -> dict:
        return {"arch": "RFA", "d": self.d, "feature_shape": list(self.feature_shape),
                "vae": self.vae_r.descriptor(), "head": self.head_r.descriptor(), "seed": self.seed}


class RfaInference:
    """VAE_R alone, applied in series at split d of a frozen backbone."""

    def __init__(self, d: int, vae_r: VAE, feature_shape):
        self.d = d
        self.vae_r = vae_r
        self.feature_shape = tuple(feature_shape)
        self.meta: dict = {}

    def named_params(self) -> dict[str, Tensor]:
        return {f"vae_r.{k}": v for k, v in self.vae_r.params.items()}

    def num_params(self) -> int:
        return self.vae_r.num_params()

    def descriptor(self) -> dict:
        return {"arch": "RFAI", "d": self.d, "feature_shape": list(self.feature_shape),
                "vae": self.vae_r.descriptor()}


def _split_prefix(params: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def _load_rfa(desc: dict, params: dict[str, np.ndarray]) -> RfaModule:
    head_desc = desc["head"]
    rfa = RfaModule.__new__(RfaModule)
    rfa.d = desc["d"]
    rfa.feature_shape = tuple(desc["feature_shape"])
    rfa.feature_dim = int(np.prod(rfa.feature_shape))
    rfa.seed = desc.get("seed", 0)
    v = desc["vae"]
    rfa.vae_r = VAE(v["feature_dim"], v["latent_dim"], v["hidden"], params=_split_prefix(params, "vae_r"))
    rfa.vae_n = VAE(v["feature_dim"], v["latent_dim"], v["hidden"], params=_split_prefix(params, "vae_n"))
    for name in ("head_r", "head_n"):
        setattr(rfa, name, SplitNet(head_desc["input_shape"], head_desc["blocks"], head_desc["num_classes"],
                                    head_desc["arch"], head_desc.get("seed", 0), _split_prefix(params, name)))
    rfa.meta = {}
    return rfa


def _load_rfai(desc: dict, params: dict[str, np.ndarray]) -> RfaInference:
    v = desc["vae"]
    vae = VAE(v["feature_dim"], v["latent_dim"], v["hidden"], params=_split_prefix(params, "vae_r"))
    return RfaInference(desc["d"], vae, desc["feature_shape"])


LOADERS["RFA"] = _load_rfa
LOADERS["RFAI"] = _load_rfai


# ---------------------------------------------------------------- forward + losses


def rfa_forward(rfa: RfaModule, z_d, rng: Rng | None = None, track: bool = True) -> dict[str, Tensor]:
    """Robust / non-robust components of ``z_d``; ``rng=None`` uses the mean path."""
    z_d = nc.as_tensor(z_d)
    if int(np.prod(z_d.shape[1:])) != rfa.feature_dim:
        raise nc.ShapeError(f"adapter at d={rfa.d} expects feature dim {rfa.feature_dim}, got {z_d.shape[1:]}")
    z_r, mu_r, lv_r = rfa.vae_r(z_d, rng.child("r") if rng else None, track)
    z_n, mu_n, lv_n = rfa.vae_n(z_d, rng.child("n") if rng else None, track)
    return {"z_r": z_r, "z_n": z_n, "mu_r": mu_r, "logvar_r": lv_r, "mu_n": mu_n, "logvar_n": lv_n}


def erroneous_labels(adv_logits: np.ndarray, y) -> np.ndarray:
    """Backbone argmax on the adversarial path; runner-up class where the attack failed."""
    y = np.asarray(y)
    order = np.argsort(-adv_logits, axis=1, kind="stable")
    top, second = order[:, 0], order[:, 1]
    return np.where(top == y, second, top)


def _head(head: SplitNet, z: Tensor, track: bool) -> Tensor:
    return head.forward_slice(z, 0, head.num_splits, track_params=track)


def loss_cr(rfa: RfaModule, out_plus: dict, out_minus: dict, y, track: bool = True) -> Tensor:
    return nc.add(nc.cross_entropy(_head(rfa.head_r, out_plus["z_r"], track), y),
                  nc.cross_entropy(_head(rfa.head_r, out_minus["z_r"], track), y))


def loss_cn(rfa: RfaModule, out_plus: dict, out_minus: dict, y, y_bar, track: bool = True) -> Tensor:
    return nc.add(nc.cross_entropy(_head(rfa.head_n, out_plus["z_n"], track), y),
                  nc.cross_entropy(_head(rfa.head_n, out_minus["z_n"], track), y_bar))


def triplet(a, p, n, tau: float) -> Tensor:
    """mean over the batch of max(d(a,p) - d(a,n) + tau, 0), d = squared L2 / dim."""
    a, p, n = nc.as_tensor(a), nc.as_tensor(p), nc.as_tensor(n)
    if not (a.shape == p.shape == n.shape):
        raise nc.ShapeError(f"triplet: shapes {a.shape}, {p.shape}, {n.shape}")
    if a.ndim == 1:
        a, p, n = (nc.reshape(t, (-1, 1)) for t in (a, p, n))
    dim = float(np.prod(a.shape[1:]))
    gap = nc.sub(nc.sq_dist(a, p), nc.sq_dist(a, n))
    return nc.mean(nc.relu(nc.add(nc.mul(gap, 1.0 / dim), tau)))


def loss_tp(out_plus: dict, out_minus: dict, tau: float) -> Tensor:
    anchor, pos = out_plus["z_r"], out_minus["z_r"]
    return nc.add(triplet(anchor, pos, out_plus["z_n"], tau), triplet(anchor, pos, out_minus["z_n"], tau))


def kl_term(outs: list[dict]) -> Tensor:
    total = None
    for o in outs:
        for key in ("r", "n"):
            mu, lv = o[f"mu_{key}"], o[f"logvar_{key}"]
            inner = nc.sub(nc.sub(nc.add(lv, 1.0), nc.square(mu)), nc.exp(lv))
            term = nc.mul(nc.mean(nc.sum(inner, axis=1)), -0.5)
            total = term if total is None else nc.add(total, term)
    return total


def _val(x):
    return x if isinstance(x, Tensor) else Tensor(float(x))


def loss_fb(weights: LossWeights, components: dict) -> Tensor:
    """L_CR + lambda_cn * L_CN + lambda_tp * L_Tp (+ lambda_kl * KL if present)."""
    out = nc.add(_val(components["cr"]), nc.add(nc.mul(_val(components["cn"]), weights.lambda_cn),
                                                nc.mul(_val(components["tp"]), weights.lambda_tp)))
    if weights.lambda_kl and "kl" in components:
        out = nc.add(out, nc.mul(_val(components["kl"]), weights.lambda_kl))
    return out


def loss_ub(weights: LossWeights, components: dict, backbone_ce) -> Tensor:
    """L_CR + lambda_tp * L_Tp + lambda_b * L_B; L_CN is not part of this objective."""
    out = nc.add(_val(components["cr"]), nc.add(nc.mul(_val(components["tp"]), weights.lambda_tp),
                                                nc.mul(_val(backbone_ce), weights.lambda_b)))
    if weights.lambda_kl and "kl" in components:
        out = nc.add(out, nc.mul(_val(components["kl"]), weights.lambda_kl))
    return out


def loss_components(rfa: RfaModule, z_plus, z_minus, y, y_bar, weights: LossWeights,
                    rng: Rng | None = None, with_cn: bool = True) -> dict[str, Tensor]:
    out_p = rfa_forward(rfa, z_plus, rng.child("plus") if rng else None)
    out_m = rfa_forward(rfa, z_minus, rng.child("minus") if rng else None)
    comps = {"cr": loss_cr(rfa, out_p, out_m, y), "tp": loss_tp(out_p, out_m, weights.tau)}
    if with_cn:
        comps["cn"] = loss_cn(rfa, out_p, out_m, y, y_bar)
    if weights.lambda_kl:
        comps["kl"] = kl_term([out_p, out_m])
    return comps


# ---------------------------------------------------------------- inference plug-in


def strip_to_inference(rfa: RfaModule) -> RfaInference:
    vae = VAE(rfa.vae_r.feature_dim, rfa.vae_r.latent_dim, rfa.vae_r.hidden,
              params={k: v.data.copy() for k, v in rfa.vae_r.params.items()})
    return RfaInference(rfa.d, vae, rfa.feature_shape)


def distill_logits(rfa, backbone: SplitNet, x) -> tuple[np.ndarray, np.ndarray]:
    """(backbone logits, logits of the backbone tail applied to VAE_R(z_d))."""
    if rfa.d >= backbone.num_splits or tuple(rfa.feature_shape) != backbone.feature_shape(rfa.d):
        raise ValueError(f"adapter split d={rfa.d} does not match the backbone")
    L = backbone.num_splits
    z_d = backbone.forward_slice(x, 0, rfa.d, track_params=False)
    logits = backbone.forward_slice(z_d, rfa.d, L, track_params=False).data
    z_r, _, _ = rfa.vae_r(z_d, None, track=False)
    logits_r = backbone.forward_slice(z_r, rfa.d, L, track_params=False).data
    return logits, logits_r


def distill_infer(rfa, backbone: SplitNet, x) -> dict[str, np.ndarray]:
    logits, logits_r = distill_logits(rfa, backbone, x)
    return {"y_hat": nc.softmax_np(logits), "y_hat_R": nc.softmax_np(logits_r)}
