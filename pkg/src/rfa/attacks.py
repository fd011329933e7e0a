"""Inner-loop maximisation: input FGSM/PGD, feature-space PGD and the
loss-variation measurements built on them."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numcore as nc
from .backbone import SplitNet
from .numcore import Rng, Tensor


@dataclass(frozen=True)
class AttackSpec:
    family: str = "pgd"          # fgsm | pgd
    space: str = "input"         # input | feature
    norm: str = "l_inf"          # l_inf | l_2
    epsilon: float = 8 / 255
    k: int = 10
    eta: float = 0.035
    g: int = 3
    rand_init: bool | None = None  # None -> on for input PGD, off for feature PGD
    step_size: float | None = None  # input PGD only; None -> 2.5 * epsilon / k
    seed: int = 0

    def __post_init__(self):
        if self.family not in ("fgsm", "pgd"):
            raise ValueError(f"unknown attack family {self.family!r}")
        if self.space not in ("input", "feature"):
            raise ValueError(f"unknown attack space {self.space!r}")
        if self.norm not in ("l_inf", "l_2"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.space == "input" and self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.space == "feature":
            if self.eta < 0:
                raise ValueError("eta must be >= 0")
            if self.g < 1:
                raise ValueError("feature attacks need g >= 1")

    @property
    def use_rand_init(self) -> bool:
        if self.rand_init is None:
            return self.space == "input" and self.family == "pgd"
        return self.rand_init

    def to_dict(self) -> dict:
        return asdict(self)

    def validate_for(self, net: SplitNet) -> None:
        if self.space == "feature" and not (0 < self.g < net.num_splits):
            raise IndexError(f"feature attack split g={self.g} outside (0, {net.num_splits})")


@dataclass(frozen=True)
class DeltaLSample:
    g: int
    value: float


def _input_grad(net: SplitNet, x: np.ndarray, y: np.ndarray, start: int = 0) -> np.ndarray:
    xt = Tensor(x, requires_grad=True)
    loss = nc.cross_entropy(net.forward_slice(xt, start, net.num_splits, track_params=False), y, "none")
    return nc.backward(nc.sum(loss))[xt.node_id]


def input_gradient(net: SplitNet, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d/dx of the per-sample cross-entropy (summed over the batch)."""
    return _input_grad(net, np.asarray(x, dtype=np.float64), np.asarray(y))


def _tighten(out: np.ndarray, ref: np.ndarray, radius) -> np.ndarray:
    # rounding in ref +- radius can overshoot by an ulp; walk those entries back
    for _ in range(4):
        bad = np.abs(out - ref) > radius
        if not bad.any():
            break
        out = np.where(bad, np.nextafter(out, ref), out)
    return out


def project_linf(x_new: np.ndarray, x0: np.ndarray, eps, lo=0.0, hi=1.0) -> np.ndarray:
    out = np.clip(x_new, x0 - eps, x0 + eps)
    if lo is not None or hi is not None:
        out = np.clip(out, lo, hi)
    return _tighten(out, x0, eps)


def project_l2(x_new: np.ndarray, x0: np.ndarray, eps: float, lo=0.0, hi=1.0) -> np.ndarray:
    n = x0.shape[0]
    delta = (x_new - x0).reshape(n, -1)
    norms = np.linalg.norm(delta, axis=1, keepdims=True)
    scale = np.minimum(1.0, eps / np.maximum(norms, 1e-300))
    out = x0 + (delta * scale).reshape(x0.shape)
    out = np.clip(out, lo, hi)
    # guard against rounding pushing the norm just past eps
    d = (out - x0).reshape(n, -1)
    over = np.linalg.norm(d, axis=1) > eps
    if over.any():
        d[over] *= (1 - 1e-12)
        out = x0 + d.reshape(x0.shape)
    return out


def fgsm(net: SplitNet, x, y, epsilon: float) -> np.ndarray:
    """x + epsilon * sign(grad CE), clipped to [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if epsilon == 0:
        return x.copy()
    g = _input_grad(net, x, np.asarray(y))
    return project_linf(x + epsilon * np.sign(g), x, epsilon)


def pgd_input(net: SplitNet, x, y, epsilon: float, k: int = 10, norm: str = "l_inf",
              rand_init: bool = True, step_size: float | None = None, rng: Rng | None = None) -> np.ndarray:
    """k-step PGD in input space under an l_inf or l_2 budget."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if k < 1:
        raise ValueError("k must be >= 1")
    if epsilon == 0:
        return x.copy()
    step = 2.5 * epsilon / k if step_size is None else step_size
    if rand_init:
        rng = rng or Rng(0, "pgd-init")
        if norm == "l_inf":
            cur = project_linf(x + rng.uniform(-epsilon, epsilon, x.shape), x, epsilon)
        else:
            d = rng.normal(x.shape).reshape(x.shape[0], -1)
            d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
            d *= epsilon * rng.uniform(0, 1, (x.shape[0], 1))
            cur = project_l2(x + d.reshape(x.shape), x, epsilon)
    else:
        cur = x.copy()
    for _ in range(k):
        g = _input_grad(net, cur, y)
        if norm == "l_inf":
            cur = project_linf(cur + step * np.sign(g), x, epsilon)
        elif norm == "l_2":
            gf = g.reshape(g.shape[0], -1)
            gn = np.linalg.norm(gf, axis=1, keepdims=True)
            unit = np.where(gn > 0, gf / np.maximum(gn, 1e-300), 0.0).reshape(g.shape)
            cur = project_l2(cur + step * unit, x, epsilon)
        else:
            raise ValueError(f"unknown norm {norm!r}")
    return cur


def feature_step_size(z_g: np.ndarray, eta: float) -> float:
    """alpha_g = eta * mean |z_g| over the whole mini-batch."""
    if z_g.shape[0] == 0:
        raise ValueError("empty batch: mean |z_g| undefined")
    return float(eta * np.mean(np.abs(z_g)))


def pgd_feature(net: SplitNet, z_g, y, spec: AttackSpec, return_alpha: bool = False):
    """Sign-gradient PGD on a split-g feature inside the l_inf ball of radius k*alpha_g.

    No random start and no clipping to a value range: features are unbounded.
    """
    spec.validate_for(net)
    z0 = np.asarray(z_g.data if isinstance(z_g, Tensor) else z_g, dtype=np.float64)
    y = np.asarray(y)
    alpha = feature_step_size(z0, spec.eta)
    radius = spec.k * alpha
    cur = z0.copy()
    if alpha > 0:
        if spec.use_rand_init:
            cur = z0 + Rng(spec.seed, "feature-init").uniform(-radius, radius, z0.shape)
        for _ in range(spec.k):
            g = _input_grad(net, cur, y, start=spec.g)
            cur = project_linf(cur + alpha * np.sign(g), z0, radius, lo=None, hi=None)
    return (cur, alpha) if return_alpha else cur


def run_attack(net: SplitNet, x, y, spec: AttackSpec, rng: Rng | None = None) -> np.ndarray:
    """Input-space attack per ``spec`` (fgsm or pgd)."""
    if spec.space != "input":
        raise ValueError("run_attack handles input-space specs; use pgd_feature for features")
    if spec.family == "fgsm":
        if spec.norm != "l_inf":
            raise ValueError("fgsm is defined for l_inf only")
        return fgsm(net, x, y, spec.epsilon)
    return pgd_input(net, x, y, spec.epsilon, spec.k, spec.norm, spec.use_rand_init, spec.step_size,
                     rng or Rng(spec.seed, "pgd-init"))


def calibrate_eta(net: SplitNet, data, g: int, epsilon: float, k: int = 10, n_batches: int | None = None,
                  batch_size: int = 100, seed: int = 0) -> dict:
    """Match a feature budget k*alpha_g to the displacement an input PGD causes at split g.

    Runs input PGD(epsilon, k) over the batches, takes the largest per-sample
    l_inf displacement of the split-g feature as k*alpha_g and divides by
    k * mean|z_g| of the clean features.
    """
    if not (1 <= g < net.num_splits):
        raise IndexError(f"g={g} outside [1, {net.num_splits})")
    images, labels = data.images, data.labels
    starts = list(range(0, len(labels), batch_size))
    if n_batches is not None:
        starts = starts[:n_batches]
    abs_sum, count, max_disp, n_samples = 0.0, 0, 0.0, 0
    rng = Rng(seed, "calibrate")
    for s in starts:
        x, y = images[s:s + batch_size], labels[s:s + batch_size]
        x_adv = pgd_input(net, x, y, epsilon, k, "l_inf", True, None, rng.child(str(s)))
        z = net.forward_slice(x, 0, g, track_params=False).data
        z_adv = net.forward_slice(x_adv, 0, g, track_params=False).data
        disp = np.abs(z_adv - z).reshape(len(y), -1).max(axis=1)
        max_disp = max(max_disp, float(disp.max()))
        abs_sum += float(np.abs(z).sum())
        count += z.size
        n_samples += len(y)
    mu = abs_sum / count if count else 0.0
    if mu <= 0:
        raise ValueError("degenerate network: mean |z_g| is zero")
    return {"g": g, "eta": max_disp / (k * mu), "mu_abs": mu, "max_delta_linf": max_disp,
            "k": k, "epsilon": epsilon, "batches": len(starts), "samples": n_samples}


def per_sample_ce(net: SplitNet, z, y, start: int) -> np.ndarray:
    logits = net.forward_slice(z, start, net.num_splits, track_params=False).data
    return -nc.log_softmax_np(logits)[np.arange(len(y)), np.asarray(y)]


def delta_loss_values(net: SplitNet, g: int, eta: float, k: int, x, y) -> np.ndarray:
    """|CE(tail(z_g + delta)) - CE(tail(z_g))| per sample, delta from feature PGD."""
    z = net.forward_slice(x, 0, g, track_params=False).data
    spec = AttackSpec(family="pgd", space="feature", eta=eta, k=k, g=g)
    z_adv = pgd_feature(net, z, y, spec)
    return np.abs(per_sample_ce(net, z_adv, y, g) - per_sample_ce(net, z, y, g))


def delta_loss_batch(net: SplitNet, g: int, eta: float, k: int, batch) -> list[DeltaLSample]:
    x, y = batch
    return [DeltaLSample(g, float(v)) for v in delta_loss_values(net, g, eta, k, x, y)]


def first_order_fidelity(net: SplitNet, g: int, eta: float, k: int, x, y) -> tuple[np.ndarray, np.ndarray]:
    """(actual loss change, |<delta, grad_z L>|) per sample for a feature PGD perturbation."""
    z = net.forward_slice(x, 0, g, track_params=False).data
    spec = AttackSpec(family="pgd", space="feature", eta=eta, k=k, g=g)
    z_adv = pgd_feature(net, z, y, spec)
    grad = _input_grad(net, z, np.asarray(y), start=g)
    n = len(y)
    linear = np.abs(np.sum((z_adv - z).reshape(n, -1) * grad.reshape(n, -1), axis=1))
    actual = np.abs(per_sample_ce(net, z_adv, y, g) - per_sample_ce(net, z, y, g))
    return actual, linear
