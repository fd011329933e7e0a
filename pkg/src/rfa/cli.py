"""Command-line entry point: ``rfa {pretrain,train,eval,prop1,detect,calibrate}``.

Every experiment is described by one JSON config. Flags are limited to
--config, --seed and --out; everything else lives in the file so the file
is the provenance record. Outputs are stamped with the config hash.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.stats import mannwhitneyu
from threadpoolctl import threadpool_limits

from .adapter import LossWeights, RfaModule, strip_to_inference
from .attacks import AttackSpec, calibrate_eta, delta_loss_values
from .backbone import CheckpointError, SplitNet, load_checkpoint, ref_net_c, ref_net_d, save_checkpoint
from .datasets import BatchPlan, Dataset, DatasetError, load_idx, synth_blobs
from .metrics import detection_report, kde, kde_grid, robust_accuracy, train_detector
from .numcore import NumericalError
from .trainer import TrainConfig, config_hash, detect_ro, train_at_baseline, train_fb, train_standard, train_ub

log = logging.getLogger("rfa")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config schema


@dataclass
class DatasetSection:
    kind: str = "blobs"                 # blobs | idx
    n_per_class: int = 400
    num_classes: int = 3
    dim: int = 16
    spread: float = 0.05
    separation: float = 0.4
    layout: str = "radial"              # radial | split
    robust_dims: int = 16
    robust_sep: float = 0.3
    weak_sep: float = 0.03
    label_noise: float = 0.0
    train_size: int | None = None       # blobs: first n samples train, rest test; None -> 75%
    test_size: int | None = None
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None


@dataclass
class BackboneSection:
    arch: str = "ref_net_d"             # ref_net_d | ref_net_c
    checkpoint: str | None = None       # None -> <output_dir>/backbone.rfa


@dataclass
class AttackSection:
    family: str = "pgd"
    space: str = "feature"
    norm: str = "l_inf"
    epsilon: float = 8 / 255
    k: int = 10
    eta: float = 0.035
    g: int = 3
    rand_init: bool | None = None
    step_size: float | None = None

    def spec(self, seed: int) -> AttackSpec:
        return AttackSpec(**asdict(self), seed=seed)


@dataclass
class AdapterSection:
    d: int = 4
    latent_dim: int = 16
    hidden: int = 64
    identity_init: bool = False
    checkpoint: str | None = None       # None -> <output_dir>/adapter.rfa
    lambda_cn: float = 0.4
    lambda_tp: float = 0.4
    lambda_b: float = 0.6
    tau: float = 0.5
    lambda_kl: float = 0.0

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_cn, self.lambda_tp, self.lambda_b, self.tau, self.lambda_kl)


@dataclass
class TrainSection:
    mode: str = "fb"                    # fb | ub | at_pgd_baseline
    epochs: int = 10
    pretrain_epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.001
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    adam_eps: float = 1e-8
    ub_backbone_lr: float | None = None
    sample_latent: bool = True
    eval_max_samples: int | None = None
    at_from_checkpoint: bool = False    # at_pgd_baseline: start from the pretrained backbone
    eval_attack: dict = field(default_factory=lambda: {"space": "input", "epsilon": 8 / 255, "k": 10})


@dataclass
class MetricsSection:
    attacks: list = field(default_factory=lambda: [
        {"name": "pgd_linf", "family": "pgd", "norm": "l_inf", "epsilon": 8 / 255, "k": 10},
        {"name": "pgd_l2", "family": "pgd", "norm": "l_2", "epsilon": 0.5, "k": 10},
        {"name": "fgsm", "family": "fgsm", "norm": "l_inf", "epsilon": 8 / 255},
    ])
    use_adapter: bool = True
    prop1_g: list = field(default_factory=lambda: [1, 3])
    prop1_k: int = 10
    prop1_k_eta: float = 1.0
    prop1_eta: dict | None = None       # per-g calibrated eta, e.g. {"1": 0.02}; overrides k_eta
    prop1_samples: int = 300
    calibrate_g: list = field(default_factory=lambda: [1, 2, 3])
    calibrate_epsilon: float = 8 / 255
    calibrate_k: int = 10
    calibrate_batches: int | None = None
    detector_epochs: int = 200
    detector_lr: float = 0.05
    control: bool = True
    max_samples: int | None = None


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    attack: AttackSection = field(default_factory=AttackSection)
    adapter: AdapterSection = field(default_factory=AdapterSection)
    train: TrainSection = field(default_factory=TrainSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    output_dir: str = "runs/default"
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        # where results land is not part of the experiment
        doc = self.to_dict()
        doc.pop("output_dir")
        return config_hash(doc)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def backbone_path(self) -> Path:
        return Path(self.backbone.checkpoint) if self.backbone.checkpoint else self.out / "backbone.rfa"

    def adapter_path(self) -> Path:
        return Path(self.adapter.checkpoint) if self.adapter.checkpoint else self.out / "adapter.rfa"


SECTIONS = {"dataset": DatasetSection, "backbone": BackboneSection, "attack": AttackSection,
            "adapter": AdapterSection, "train": TrainSection, "metrics": MetricsSection}


def _fill(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in raw:
            continue
        v = raw[f.name]
        if f.name in SECTIONS and cls is ExperimentConfig:
            v = _fill(SECTIONS[f.name], v, f.name)
        kwargs[f.name] = v
    return cls(**kwargs)


def parse_config(raw: dict) -> ExperimentConfig:
    cfg = _fill(ExperimentConfig, raw, "config")
    _validate(cfg)
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return parse_config({})
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from e
    return parse_config(raw)


_ATTACK_KEYS = {f.name for f in fields(AttackSpec)} - {"seed"}


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.dataset.kind not in ("blobs", "idx"):
        raise ConfigError(f"dataset.kind must be blobs or idx, got {cfg.dataset.kind!r}")
    if cfg.backbone.arch not in ("ref_net_d", "ref_net_c"):
        raise ConfigError(f"backbone.arch must be ref_net_d or ref_net_c, got {cfg.backbone.arch!r}")
    if cfg.train.mode not in ("fb", "ub", "at_pgd_baseline"):
        raise ConfigError(f"train.mode must be fb, ub or at_pgd_baseline, got {cfg.train.mode!r}")
    if cfg.train.mode in ("fb", "ub") and cfg.attack.space == "feature" and not cfg.attack.g < cfg.adapter.d:
        raise ConfigError(f"split-index violation: need g < d, got g={cfg.attack.g}, d={cfg.adapter.d}")
    try:
        cfg.attack.spec(cfg.seed)
        _attack_from(cfg.train.eval_attack, cfg.seed)
        for a in cfg.metrics.attacks:
            _attack_from(a, cfg.seed)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"attack: {e}") from e


def _attack_from(entry: dict, seed: int) -> AttackSpec:
    if not isinstance(entry, dict):
        raise ConfigError("attack entries must be objects")
    body = {k: v for k, v in entry.items() if k != "name"}
    unknown = sorted(set(body) - _ATTACK_KEYS)
    if unknown:
        raise ConfigError(f"attack entry: unknown key(s) {', '.join(unknown)}")
    body.setdefault("space", "input")
    return AttackSpec(**body, seed=seed)


def _attack_name(entry: dict) -> str:
    if "name" in entry:
        return str(entry["name"])
    return f"{entry.get('family', 'pgd')}_{entry.get('norm', 'l_inf')}_eps{entry.get('epsilon', 8 / 255):.4g}"


# ---------------------------------------------------------------- shared plumbing


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    ds = cfg.dataset
    if ds.kind == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            p = getattr(ds, key)
            if not p:
                raise ConfigError(f"dataset.{key} is required for kind=idx")
            if not Path(p).is_file():
                raise ConfigError(f"dataset file not found: {p}")
        train = load_idx(ds.train_images, ds.train_labels, ds.num_classes)
        test = load_idx(ds.test_images, ds.test_labels, ds.num_classes)
        if ds.train_size is not None:
            train = train.subset(np.arange(min(ds.train_size, len(train))))
    else:
        full = synth_blobs(cfg.seed, ds.n_per_class, ds.num_classes, ds.dim, ds.spread, ds.separation,
                           ds.layout, ds.robust_dims, ds.robust_sep, ds.weak_sep, 0.0)
        n_train = ds.train_size if ds.train_size is not None else int(0.75 * len(full))
        if not 0 < n_train < len(full):
            raise ConfigError(f"dataset.train_size must be in (0, {len(full)})")
        train, test = full.split(n_train)
        if ds.label_noise > 0:
            noisy = synth_blobs(cfg.seed, ds.n_per_class, ds.num_classes, ds.dim, ds.spread, ds.separation,
                                ds.layout, ds.robust_dims, ds.robust_sep, ds.weak_sep, ds.label_noise)
            train = Dataset(train.images, noisy.labels[:n_train], train.num_classes, train.name)
    if ds.test_size is not None:
        test = test.subset(np.arange(min(ds.test_size, len(test))))
    return train, test


def build_backbone(cfg: ExperimentConfig, data: Dataset) -> SplitNet:
    if cfg.backbone.arch == "ref_net_c":
        return ref_net_c(data.input_shape, data.num_classes, seed=cfg.seed)
    return ref_net_d(data.input_dim, data.num_classes, seed=cfg.seed)


def _load(path: Path, what: str):
    if not path.is_file():
        raise ConfigError(f"{what} checkpoint not found: {path}")
    return load_checkpoint(path)


def train_config(cfg: ExperimentConfig, mode: str) -> TrainConfig:
    t = cfg.train
    attack = cfg.attack.spec(cfg.seed)
    if mode == "at_pgd_baseline" and attack.space != "input":
        attack = replace(attack, space="input")
    return TrainConfig(mode=mode, attack=attack, eval_attack=_attack_from(t.eval_attack, cfg.seed),
                       g=cfg.attack.g, d=cfg.adapter.d, epochs=t.epochs if mode != "standard" else t.pretrain_epochs,
                       batch=BatchPlan(t.batch_size, cfg.seed), learning_rate=t.learning_rate,
                       betas=tuple(t.betas), adam_eps=t.adam_eps, weights=cfg.adapter.weights(), seed=cfg.seed,
                       ub_backbone_lr=t.ub_backbone_lr, sample_latent=t.sample_latent,
                       eval_max_samples=t.eval_max_samples)


def _stamp(cfg: ExperimentConfig, payload: dict) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed, **payload}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_record(cfg: ExperimentConfig, record, stem: str) -> None:
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.csv").write_text(record.to_csv())
    doc = json.loads(record.to_json())
    doc["experiment_config_hash"] = cfg.hash()
    (out / f"{stem}.json").write_text(json.dumps(doc, sort_keys=True, indent=1))


def _meta(cfg: ExperimentConfig, **extra) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed, **extra}


# ---------------------------------------------------------------- commands


def cmd_pretrain(cfg: ExperimentConfig) -> dict:
    train, test = load_data(cfg)
    net = build_backbone(cfg, train)
    tc = train_config(cfg, "standard")
    net, record = train_standard(net, train, tc, test)
    path = cfg.backbone_path()
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, path, _meta(cfg, stage="pretrain"))
    _write_record(cfg, record, "pretrain_record")
    report = _stamp(cfg, {"checkpoint": str(path), "epochs": tc.epochs,
                          "clean_test_accuracy": robust_accuracy(net, None, test),
                          "train_size": len(train), "test_size": len(test),
                          "outputs": ["pretrain_record.csv", "pretrain_record.json"]})
    _write_json(cfg.out / "pretrain_report.json", report)
    return report


def cmd_train(cfg: ExperimentConfig) -> dict:
    train, test = load_data(cfg)
    mode = cfg.train.mode
    tc = train_config(cfg, mode)
    if tc.attack.space == "feature" and not tc.attack.g < tc.d:
        raise ConfigError(f"split-index violation: need g < d, got g={tc.attack.g}, d={tc.d}")
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    artifacts = {}
    if mode == "at_pgd_baseline":
        if cfg.train.at_from_checkpoint:
            net = _load(cfg.backbone_path(), "backbone")
        else:
            net = build_backbone(cfg, train)
        net, record = train_at_baseline(net, train, tc, test)
        artifacts["backbone"] = str(out / "backbone_at.rfa")
        save_checkpoint(net, artifacts["backbone"], _meta(cfg, stage="at_pgd_baseline"))
    else:
        net = _load(cfg.backbone_path(), "backbone")
        rfa = RfaModule(net, cfg.adapter.d, cfg.adapter.latent_dim, cfg.adapter.hidden, cfg.seed,
                        cfg.adapter.identity_init)
        if mode == "fb":
            rfa, record = train_fb(net, rfa, train, tc, test)
        else:
            net, rfa, record = train_ub(net, rfa, train, tc, test)
            artifacts["backbone"] = str(out / "backbone_ub.rfa")
            save_checkpoint(net, artifacts["backbone"], _meta(cfg, stage="ub"))
        artifacts["adapter"] = str(cfg.adapter_path())
        save_checkpoint(rfa, cfg.adapter_path(), _meta(cfg, stage=mode))
        artifacts["adapter_inference"] = str(out / "adapter_inference.rfa")
        save_checkpoint(strip_to_inference(rfa), artifacts["adapter_inference"], _meta(cfg, stage=mode))
    _write_record(cfg, record, f"{mode}_record")
    ro = detect_ro(record) if len(record.epochs) >= 10 and "test_robust_err" in record.epochs[0] else None
    report = _stamp(cfg, {"mode": mode, "epochs": len(record.epochs), "artifacts": artifacts,
                          "outputs": [f"{mode}_record.csv", f"{mode}_record.json"],
                          "final": {k: v for k, v in record.epochs[-1].items() if k != "wall_time"},
                          "robust_overfitting": None if ro is None else
                          {k: v for k, v in ro.items() if k != "smoothed"}})
    _write_json(out / f"{mode}_report.json", report)
    return report


def _models_for_eval(cfg: ExperimentConfig):
    mode = cfg.train.mode
    if mode == "ub" and (cfg.out / "backbone_ub.rfa").is_file():
        net = load_checkpoint(cfg.out / "backbone_ub.rfa")
    elif mode == "at_pgd_baseline" and (cfg.out / "backbone_at.rfa").is_file():
        net = load_checkpoint(cfg.out / "backbone_at.rfa")
    else:
        net = _load(cfg.backbone_path(), "backbone")
    rfa = None
    if cfg.metrics.use_adapter and mode != "at_pgd_baseline":
        rfa = _load(cfg.adapter_path(), "adapter")
    return net, rfa


def _eval_subset(cfg: ExperimentConfig, data: Dataset) -> Dataset:
    n = cfg.metrics.max_samples
    return data if n is None or n >= len(data) else data.subset(np.arange(n))


def cmd_eval(cfg: ExperimentConfig) -> dict:
    _, test = load_data(cfg)
    test = _eval_subset(cfg, test)
    net, rfa = _models_for_eval(cfg)
    robust = {}
    for i, entry in enumerate(cfg.metrics.attacks):
        spec = _attack_from(entry, cfg.seed)
        robust[_attack_name(entry)] = robust_accuracy(net, spec, test, rfa, seed=cfg.seed + i)
    report = _stamp(cfg, {"samples": len(test), "adapter": rfa is not None,
                          "clean_accuracy": robust_accuracy(net, None, test, rfa), "robust_accuracy": robust})
    _write_json(cfg.out / "eval_report.json", report)
    return report


def cmd_prop1(cfg: ExperimentConfig) -> dict:
    _, test = load_data(cfg)
    m = cfg.metrics
    test = test.subset(np.arange(min(m.prop1_samples, len(test))))
    net = _load(cfg.backbone_path(), "backbone")
    for g in m.prop1_g:
        if not 1 <= g < net.num_splits:
            raise ConfigError(f"prop1 g={g} outside [1, {net.num_splits})")
    samples, rows, kde_rows, summary = {}, [], [], {}
    for g in m.prop1_g:
        eta = float(m.prop1_eta[str(g)]) if m.prop1_eta else m.prop1_k_eta / m.prop1_k
        vals = delta_loss_values(net, g, eta, m.prop1_k, test.images, test.labels)
        samples[g] = vals
        rows += [[g, i, repr(float(v))] for i, v in enumerate(vals)]
        entry = {"eta": eta, "k": m.prop1_k, "median": float(np.median(vals)), "mean": float(np.mean(vals)),
                 "n": int(vals.size), "kde": "ok"}
        if np.ptp(vals) == 0:
            warnings.warn(f"g={g}: all delta-L samples equal; KDE is degenerate and skipped")
            entry["kde"] = "degenerate"
        else:
            grid = kde_grid(vals, 256)
            kde_rows += [[g, repr(float(x)), repr(float(p))] for x, p in zip(grid, kde(vals, grid))]
        summary[str(g)] = entry
    tests = []
    for a, b in zip(m.prop1_g, m.prop1_g[1:]):
        if np.ptp(np.r_[samples[a], samples[b]]) == 0:
            p = 1.0
        else:
            p = float(mannwhitneyu(samples[a], samples[b], alternative="greater").pvalue)
        tests.append({"g_low": a, "g_high": b, "p_value": p,
                      "median_low_greater": bool(np.median(samples[a]) > np.median(samples[b]))})
    _write_csv(cfg.out / "prop1_samples.csv", ["g", "sample_index", "delta_l"], rows)
    _write_csv(cfg.out / "prop1_kde.csv", ["g", "x", "density"], kde_rows)
    report = _stamp(cfg, {"per_g": summary, "mann_whitney": tests,
                          "outputs": ["prop1_samples.csv", "prop1_kde.csv"]})
    _write_json(cfg.out / "prop1_report.json", report)
    return report


def cmd_detect(cfg: ExperimentConfig) -> dict:
    train, test = load_data(cfg)
    test = _eval_subset(cfg, test)
    net = _load(cfg.backbone_path() if cfg.train.mode != "ub" else cfg.out / "backbone_ub.rfa", "backbone")
    rfa = _load(cfg.adapter_path(), "adapter")
    m = cfg.metrics
    entries = [(_attack_name(e), _attack_from(e, cfg.seed)) for e in m.attacks]
    if m.control:
        entries.append(("control", None))
    results = {}
    for i, (name, spec) in enumerate(entries):
        det = train_detector(net, rfa, train, spec, seed=cfg.seed + i, epochs=m.detector_epochs, lr=m.detector_lr)
        rep = detection_report(det, net, rfa, test, spec, seed=cfg.seed + 100 + i)
        n = len(test)
        rows = [[j % n, "clean" if lab == 0 else "attacked", int(lab), repr(float(s))]
                for j, (s, lab) in enumerate(zip(rep["scores"], rep["labels"]))]
        _write_csv(cfg.out / f"detect_scores_{name}.csv", ["sample_index", "variant", "label", "score"], rows)
        results[name] = {"auc": rep["auc"], "tnr_at_95_tpr": rep["tnr_at_95_tpr"],
                         "accuracy_at_threshold": rep["accuracy_at_threshold"], "threshold": rep["threshold"],
                         "control": spec is None}
    report = _stamp(cfg, {"samples": len(test), "detection": results,
                          "outputs": [f"detect_scores_{name}.csv" for name, _ in entries]})
    _write_json(cfg.out / "detect_report.json", report)
    return report


def cmd_calibrate(cfg: ExperimentConfig) -> dict:
    train, _ = load_data(cfg)
    net = _load(cfg.backbone_path(), "backbone")
    m = cfg.metrics
    table = {}
    for g in m.calibrate_g:
        if m.calibrate_epsilon == 0:
            table[str(g)] = {"g": g, "eta": 0.0, "mu_abs": None, "max_delta_linf": 0.0, "k": m.calibrate_k,
                             "epsilon": 0.0, "batches": 0, "samples": 0}
            continue
        table[str(g)] = calibrate_eta(net, train, g, m.calibrate_epsilon, m.calibrate_k, m.calibrate_batches,
                                      seed=cfg.seed)
    report = _stamp(cfg, {"eta": table})
    _write_json(cfg.out / "calibrate_report.json", report)
    return report


COMMANDS = {"pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval, "prop1": cmd_prop1,
            "detect": cmd_detect, "calibrate": cmd_calibrate}


# ---------------------------------------------------------------- entry point


def _threads() -> int:
    raw = os.environ.get("RFA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"RFA_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ConfigError("RFA_THREADS must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rfa", description="Robustness feature adapter experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON experiment config (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="override output_dir")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.output_dir = args.out
        threads = _threads()
        with threadpool_limits(limits=threads):
            report = COMMANDS[args.command](cfg)
    except (ConfigError, DatasetError, CheckpointError) as e:
        print(f"rfa {args.command}: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, ValueError, IndexError, RuntimeError, OSError) as e:
        print(f"rfa {args.command}: runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(_summary(report), sort_keys=True, default=_jsonable))
    return EXIT_OK


def _summary(report: dict) -> dict:
    return {k: v for k, v in report.items() if not isinstance(v, (list, np.ndarray))}


if __name__ == "__main__":
    sys.exit(main())
