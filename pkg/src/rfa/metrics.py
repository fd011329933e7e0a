"""Measurement apparatus: FOSC, MIC, Gaussian KDE, ROC, the output-space
adversarial detector, gray-box robust accuracy and prediction correlations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import numcore as nc
from .adapter import RfaModule, distill_logits, rfa_forward
from .attacks import AttackSpec, input_gradient, run_attack
from .backbone import SplitNet
from .datasets import Dataset
from .numcore import Rng, Tensor
from .trainer import Adam


# ---------------------------------------------------------------- FOSC


def fosc(net: SplitNet, x0, xk, y, epsilon: float) -> np.ndarray:
    """Per-sample ``eps * |grad|_1 - <xk - x0, grad>`` with grad = d CE / dx at xk.

    Zero at a converged l_inf maximiser; larger means a less converged attack.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    xk = np.asarray(xk, dtype=np.float64)
    if xk.shape != x0.shape:
        raise nc.ShapeError(f"fosc: {x0.shape} vs {xk.shape}")
    n = x0.shape[0]
    g = input_gradient(net, xk, y).reshape(n, -1)
    return epsilon * np.abs(g).sum(axis=1) - np.sum((xk - x0).reshape(n, -1) * g, axis=1)


# ---------------------------------------------------------------- MIC


def _equal_freq_bins(v: np.ndarray, nbins: int) -> np.ndarray:
    # tied values share a bin
    r = rankdata(v, method="min") - 1
    return np.minimum((r * nbins) // v.size, nbins - 1).astype(np.int64)


def _mutual_info_bits(bx: np.ndarray, by: np.ndarray, a: int, b: int) -> float:
    joint = np.zeros((a, b))
    np.add.at(joint, (bx, by), 1.0)
    joint /= joint.sum()
    px = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log2(joint[nz] / (px @ py)[nz])))


def mic(xs, ys, alpha: float = 0.6) -> float:
    """Maximal information coefficient over equal-frequency grids with a*b <= n**alpha."""
    x = np.asarray(xs, dtype=np.float64).ravel()
    y = np.asarray(ys, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError("mic: sequences differ in length")
    n = x.size
    if n < 25:
        raise ValueError("mic needs at least 25 points")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    limit = n ** alpha
    best = 0.0
    cache_x: dict[int, np.ndarray] = {}
    cache_y: dict[int, np.ndarray] = {}
    for a in range(2, int(limit // 2) + 1):
        bx = cache_x.setdefault(a, _equal_freq_bins(x, a))
        for b in range(2, int(limit // a) + 1):
            by = cache_y.setdefault(b, _equal_freq_bins(y, b))
            score = _mutual_info_bits(bx, by, a, b) / np.log2(min(a, b))
            best = max(best, score)
    return float(min(max(best, 0.0), 1.0))


def mic_features(zr, zn, max_pairs: int = 16, seed: int = 0) -> float:
    """Mean MIC over matched feature dimensions (zr[:, i], zn[:, i])."""
    zr = np.asarray(zr.data if isinstance(zr, Tensor) else zr, dtype=np.float64)
    zn = np.asarray(zn.data if isinstance(zn, Tensor) else zn, dtype=np.float64)
    zr, zn = zr.reshape(zr.shape[0], -1), zn.reshape(zn.shape[0], -1)
    if zr.shape != zn.shape:
        raise ValueError(f"mic_features: {zr.shape} vs {zn.shape}")
    dims = np.arange(zr.shape[1])
    if dims.size > max_pairs:
        dims = np.sort(Rng(seed, "mic-dims").choice(dims.size, max_pairs))
    return float(np.mean([mic(zr[:, i], zn[:, i]) for i in dims]))


# ---------------------------------------------------------------- KDE


def silverman_bandwidth(samples) -> float:
    s = np.asarray(samples, dtype=np.float64).ravel()
    if s.size < 2:
        raise ValueError("kde needs at least 2 samples")
    sd = s.std(ddof=1)
    if sd == 0:
        raise ValueError("degenerate sample: zero variance")
    return 1.06 * sd * s.size ** (-0.2)


def kde(samples, grid_points, bandwidth: float | None = None) -> np.ndarray:
    """Gaussian kernel density of ``samples`` evaluated at ``grid_points``."""
    s = np.asarray(samples, dtype=np.float64).ravel()
    h = silverman_bandwidth(s) if bandwidth is None else bandwidth
    grid = np.asarray(grid_points, dtype=np.float64)
    u = (grid.ravel()[:, None] - s[None, :]) / h
    dens = np.exp(-0.5 * u * u).sum(axis=1) / (s.size * h * np.sqrt(2 * np.pi))
    return dens.reshape(grid.shape)


def kde_grid(samples, num: int = 512, pad_bandwidths: float = 4.0) -> np.ndarray:
    s = np.asarray(samples, dtype=np.float64).ravel()
    h = silverman_bandwidth(s)
    return np.linspace(s.min() - pad_bandwidths * h, s.max() + pad_bandwidths * h, num)


# ---------------------------------------------------------------- ROC


@dataclass
class RocCurve:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float
    tnr_at_95_tpr: float

    def rows(self) -> list[dict]:
        return [{"threshold": float(t), "tpr": float(a), "fpr": float(b)}
                for t, a, b in zip(self.thresholds, self.tpr, self.fpr)]


def roc(scores, labels) -> RocCurve:
    """Threshold sweep (predict positive when score >= threshold) over unique scores."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(int)
    if s.size != y.size:
        raise ValueError("scores and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary")
    pos, neg = int(y.sum()), int((1 - y).sum())
    if pos == 0 or neg == 0:
        raise ValueError("roc needs both classes present")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    last_of_run = np.r_[np.nonzero(np.diff(s_sorted))[0], s.size - 1]
    tp = np.cumsum(y_sorted)[last_of_run]
    fp = np.cumsum(1 - y_sorted)[last_of_run]
    tpr = np.r_[0.0, tp / pos]
    fpr = np.r_[0.0, fp / neg]
    thresholds = np.r_[np.inf, s_sorted[last_of_run]]
    auc = float(np.trapezoid(tpr, fpr))
    hit = np.nonzero(tpr >= 0.95)[0][0]
    return RocCurve(thresholds, tpr, fpr, auc, float(1.0 - fpr[hit]))


# ---------------------------------------------------------------- detector


@dataclass
class Detector:
    """One affine layer plus sigmoid over (y_hat, y_hat_R).

    With ``interaction`` the layer also sees y_hat * y_hat_R. A purely linear
    score over the concatenation cannot express "the two predictions
    disagree" (that needs w[y] < w[y'] for every ordered class pair), so the
    product term is what lets one layer compare them.
    """
    weight: np.ndarray          # [2C] or [3C] with interaction
    bias: float
    threshold: float = 0.5
    history: list[float] = field(default_factory=list)
    interaction: bool = True

    def design(self, y_hat: np.ndarray, y_hat_r: np.ndarray) -> np.ndarray:
        return detector_design(y_hat, y_hat_r, self.interaction)

    def score(self, y_hat: np.ndarray, y_hat_r: np.ndarray) -> np.ndarray:
        return nc.sigmoid(Tensor(self.design(y_hat, y_hat_r) @ self.weight + self.bias)).data

    def predict(self, y_hat, y_hat_r) -> np.ndarray:
        return (self.score(y_hat, y_hat_r) >= self.threshold).astype(int)


def detector_design(y_hat: np.ndarray, y_hat_r: np.ndarray, interaction: bool = True) -> np.ndarray:
    parts = [y_hat, y_hat_r] + ([y_hat * y_hat_r] if interaction else [])
    return np.concatenate(parts, axis=1)


def _halves(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    k = feats.shape[1] // 2
    return feats[:, :k], feats[:, k:]


def detection_features(backbone: SplitNet, rfa, x) -> np.ndarray:
    logits, logits_r = distill_logits(rfa, backbone, x)
    return np.concatenate([nc.softmax_np(logits), nc.softmax_np(logits_r)], axis=1)


def detection_dataset(backbone: SplitNet, rfa, data: Dataset, attack: AttackSpec | None,
                      seed: int = 0, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Features of every clean sample (label 0) and of its attacked copy (label 1)."""
    rng = Rng(seed, "detect")
    clean, adv = [], []
    for s in range(0, len(data), batch_size):
        x, y = data.images[s:s + batch_size], data.labels[s:s + batch_size]
        clean.append(detection_features(backbone, rfa, x))
        x_adv = x if attack is None else run_attack(backbone, x, y, attack, rng.child(str(s)))
        adv.append(detection_features(backbone, rfa, x_adv))
    feats = np.concatenate(clean + adv)
    labels = np.r_[np.zeros(len(data), int), np.ones(len(data), int)]
    return feats, labels


def train_detector(backbone: SplitNet, rfa, data: Dataset, attack: AttackSpec | None, seed: int = 0,
                   epochs: int = 200, lr: float = 0.05, holdout: float = 0.25,
                   interaction: bool = True) -> Detector:
    """Logistic regression on (y_hat, y_hat_R) with balanced clean/attacked classes.

    The decision threshold maximises balanced accuracy on a held-out slice.
    """
    n = len(data)
    if n < 4:
        raise ValueError("degenerate data: need at least 4 samples")
    perm = Rng(seed, "detector-split").permutation(n)
    n_hold = max(1, int(round(n * holdout)))
    fit_set, hold_set = data.subset(perm[n_hold:]), data.subset(perm[:n_hold])
    feats, labels = detection_dataset(backbone, rfa, fit_set, attack, seed)
    feats = detector_design(*_halves(feats), interaction)
    w = Tensor(np.zeros(feats.shape[1]), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    opt = Adam([w, b], lr)
    history = []
    f, yl = Tensor(feats), labels.astype(float)
    for _ in range(epochs):
        logit = nc.add(nc.reshape(nc.matmul(f, nc.reshape(w, (-1, 1))), (-1,)), b)
        p = nc.sigmoid(logit)
        # binary cross-entropy written with clamped probabilities
        pc = nc.clamp(p, 1e-12, 1 - 1e-12)
        loss = nc.mul(nc.mean(nc.add(nc.mul(nc.log(pc), yl), nc.mul(nc.log(nc.sub(1.0, pc)), 1 - yl))), -1.0)
        history.append(loss.item())
        opt.step(nc.backward(loss))
    det = Detector(w.data.copy(), float(b.data[0]), 0.5, history, interaction)
    hf, hl = detection_dataset(backbone, rfa, hold_set, attack, seed + 1)
    det.threshold = _balanced_threshold(det.score(*_halves(hf)), hl)
    return det


def _balanced_threshold(scores: np.ndarray, labels: np.ndarray) -> float:
    best_t, best_acc = 0.5, -1.0
    for t in np.unique(scores):
        pred = scores >= t
        tpr = pred[labels == 1].mean()
        tnr = (~pred[labels == 0]).mean()
        acc = 0.5 * (tpr + tnr)
        if acc > best_acc:
            best_t, best_acc = float(t), acc
    return best_t


def detection_report(det: Detector, backbone: SplitNet, rfa, data: Dataset, attack: AttackSpec | None,
                     seed: int = 0) -> dict:
    feats, labels = detection_dataset(backbone, rfa, data, attack, seed)
    scores = det.score(*_halves(feats))
    curve = roc(scores, labels)
    acc = float(np.mean((scores >= det.threshold) == labels))
    return {"auc": curve.auc, "tnr_at_95_tpr": curve.tnr_at_95_tpr, "accuracy_at_threshold": acc,
            "threshold": det.threshold, "scores": scores, "labels": labels, "curve": curve}


# ---------------------------------------------------------------- accuracy and correlations


def robust_accuracy(backbone: SplitNet, attack: AttackSpec | None, data: Dataset, rfa=None,
                    seed: int = 0, batch_size: int = 256) -> float:
    """Accuracy on attacked inputs; attacks are built on the backbone alone (gray-box)."""
    rng = Rng(seed, "robust-acc")
    correct = 0
    for s in range(0, len(data), batch_size):
        x, y = data.images[s:s + batch_size], data.labels[s:s + batch_size]
        if attack is not None:
            x = run_attack(backbone, x, y, attack, rng.child(str(s)))
        if rfa is None:
            logits = backbone.forward_slice(x, 0, backbone.num_splits, track_params=False).data
        else:
            logits = distill_logits(rfa, backbone, x)[1]
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
    return correct / len(data)


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    num = np.sum(a * b, axis=1)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    return num / np.maximum(den, 1e-300)


def adapter_outputs(backbone: SplitNet, rfa: RfaModule, x, rng: Rng | None = None) -> dict[str, np.ndarray]:
    """Probability vectors of C_D, C_R, C_N and the adapter components for inputs x."""
    L, d = backbone.num_splits, rfa.d
    z_d = backbone.forward_slice(x, 0, d, track_params=False)
    out = rfa_forward(rfa, z_d, rng, track=False)
    return {
        "p_d": nc.softmax_np(backbone.forward_slice(z_d, d, L, track_params=False).data),
        "p_r": nc.softmax_np(rfa.head_r.forward_slice(out["z_r"], 0, rfa.head_r.num_splits, False).data),
        "p_n": nc.softmax_np(rfa.head_n.forward_slice(out["z_n"], 0, rfa.head_n.num_splits, False).data),
        "z_r": out["z_r"].data, "z_n": out["z_n"].data,
    }


def prediction_correlations(backbone: SplitNet, rfa: RfaModule, data: Dataset, attack: AttackSpec,
                            seed: int = 0) -> dict[str, float]:
    """Mean cosine similarities between C_D, C_R and C_N outputs on clean (+) and attacked (-) inputs."""
    x, y = data.images, data.labels
    x_adv = run_attack(backbone, x, y, attack, Rng(seed, "corr"))
    clean = adapter_outputs(backbone, rfa, x)
    adv = adapter_outputs(backbone, rfa, x_adv)
    return {
        "cos(y_N-, y_D-)": float(cosine_rows(adv["p_n"], adv["p_d"]).mean()),
        "cos(y_R-, y_D+)": float(cosine_rows(adv["p_r"], clean["p_d"]).mean()),
        "cos(y_R-, y_N-)": float(cosine_rows(adv["p_r"], adv["p_n"]).mean()),
    }


def disentanglement_mic(backbone: SplitNet, rfa: RfaModule, data: Dataset, attack: AttackSpec,
                        seed: int = 0, max_pairs: int = 16) -> dict[str, float]:
    """MIC(z_R-, z_N-) on attacked inputs next to MIC between two sampled draws of z_R-."""
    x_adv = run_attack(backbone, data.images, data.labels, attack, Rng(seed, "mic-attack"))
    z_d = backbone.forward_slice(x_adv, 0, rfa.d, track_params=False)
    mean_path = rfa_forward(rfa, z_d, None, track=False)
    draw1 = rfa_forward(rfa, z_d, Rng(seed, "draw1"), track=False)["z_r"].data
    draw2 = rfa_forward(rfa, z_d, Rng(seed, "draw2"), track=False)["z_r"].data
    return {"mic_rn": mic_features(mean_path["z_r"].data, mean_path["z_n"].data, max_pairs, seed),
            "mic_rr": mic_features(draw1, draw2, max_pairs, seed)}
