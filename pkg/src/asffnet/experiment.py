"""Experiment configuration and the prepare / train / evaluate / compare /
explain workflows behind the command line.

Layout under an experiment directory ``OUT``::

    OUT/data/manifest.csv          path,label,split rows
    OUT/data/dataset.ini           resolved dataset section
    OUT/data/images/...            synthetic images (when generated)
    OUT/runs/<arch>-s<seed>-<hash>/ config.ini, checkpoint.npz, history.csv
    OUT/runs/<...>/eval/           metrics, curves, plots
    OUT/runs/<...>/explain/        Grad-CAM heatmaps, overlays, records
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import logging
import os
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from asffnet import data as D
from asffnet.backbones import BackboneSpec, build_backbone, predict
from asffnet.checkpoint import load_checkpoint, save_checkpoint
from asffnet.errors import ConfigurationError, ValidationError
from asffnet.evaluation import (
    Curve, confusion, metrics, pr_curve, roc_curve, write_curve_csv, write_metrics_csv,
)
from asffnet.fusion import WeightGeneratorSpec
from asffnet.gradcam import gradcam, overlay, save_heatmap_png, save_overlay_png, write_record
from asffnet.training import PUBLISHED_DEFAULTS, TrainConfig, default_config, train

log = logging.getLogger(__name__)

# Desk runs get ~1/65 of the published optimizer steps (20 short epochs
# instead of 500), so the published learning rates are scaled up to match.
PROFILES = {
    "desk": {"input_size": 64, "width_multiplier": 0.25, "epochs": 20, "lr_scale": 10.0},
    "paper": {"input_size": 224, "width_multiplier": 1.0, "epochs": 500, "lr_scale": 1.0},
}
DEFAULT_PROFILE = "desk"
DEFAULT_ARCH = "asff_resnet50"

# Published test-set results (percent for the rates; AUCs as fractions).
REFERENCE_RESULTS = {
    "lenet5": {"accuracy": 85.455, "precision": 85.336, "recall": 85.583, "specificity": 78.333, "f1": 85.395},
    "vgg16": {"accuracy": 89.091, "precision": 88.961, "recall": 89.111, "specificity": 81.667, "f1": 89.023},
    "resnet34": {"accuracy": 90.606, "precision": 90.687, "recall": 90.361, "specificity": 83.056, "f1": 90.493},
    "resnet50": {"accuracy": 91.212, "precision": 91.088, "recall": 91.333, "specificity": 83.611, "f1": 91.169},
    "resnet101": {"accuracy": 91.364, "precision": 91.286, "recall": 91.611, "specificity": 83.750, "f1": 91.336},
    "asff_resnet50": {
        "accuracy": 93.182, "precision": 93.098, "recall": 93.161, "specificity": 85.417, "f1": 93.131,
        "pr_auc": 0.9670, "roc_auc": 0.9717,
    },
}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class DatasetSection:
    root: str = ""
    synthetic: bool = True
    n_per_class: int = 100
    image_size: int = 64
    cue_mode: str = "multi_scale"
    seed: int = 7
    train_fraction: float = 0.8
    stratified: bool = True


@dataclass
class ModelSection:
    arch: str = DEFAULT_ARCH
    input_size: int = 64
    width_multiplier: float = 0.25
    num_classes: int = 2
    reduction_units: int = 0  # 0: automatic width

    def backbone_spec(self) -> BackboneSpec:
        return BackboneSpec(self.arch, self.input_size, self.width_multiplier, self.num_classes)

    def generator_spec(self) -> WeightGeneratorSpec:
        return WeightGeneratorSpec(self.reduction_units or None)


@dataclass
class EvalSection:
    threshold: float = 0.5
    output_dir: str = "eval"


@dataclass
class GradcamSection:
    layer: str = ""
    sample_count: int = 4
    blend_alpha: float = 0.4


@dataclass
class ExperimentConfig:
    profile: str = DEFAULT_PROFILE
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-3))
    eval: EvalSection = field(default_factory=EvalSection)
    gradcam: GradcamSection = field(default_factory=GradcamSection)

    SECTIONS = ("dataset", "model", "train", "eval", "gradcam")

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["experiment"] = {"profile": self.profile}
        for name in self.SECTIONS:
            section = getattr(self, name)
            cp[name] = {f.name: _format(getattr(section, f.name)) for f in fields(section)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.read_string(text)
        cfg = cls()
        if cp.has_option("experiment", "profile"):
            cfg.profile = cp.get("experiment", "profile")
        for name in cls.SECTIONS:
            if cp.has_section(name):
                setattr(cfg, name, _parse_section(getattr(cfg, name), cp[name]))
        return cfg

    def write(self, path) -> None:
        Path(path).write_text(self.to_ini())

    @classmethod
    def read(cls, path) -> "ExperimentConfig":
        return cls.from_ini(Path(path).read_text())

    def run_key(self, data_digest: str = "") -> str:
        """``<arch>-s<seed>-<hash>`` of everything that affects training."""
        payload = json.dumps(
            {"data": data_digest, "model": self.model.__dict__, "train": self.train.to_dict()},
            sort_keys=True,
        )
        digest = hashlib.sha256(payload.encode()).hexdigest()[:10]
        return f"{self.model.arch}-s{self.train.seed}-{digest}"


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_section(current, section):
    hints = typing.get_type_hints(type(current))
    values = {}
    for f in fields(current):
        if f.name not in section:
            continue
        raw = section[f.name]
        kind = hints[f.name]
        if kind is bool:
            values[f.name] = section.getboolean(f.name)
        elif kind is int:
            values[f.name] = int(raw)
        elif kind is float:
            values[f.name] = float(raw)
        else:
            values[f.name] = raw
    unknown = set(section) - {f.name for f in fields(current)}
    if unknown:
        raise ConfigurationError(f"unknown keys in [{section.name}]: {sorted(unknown)}")
    return replace(current, **values)


def profile_defaults(arch: str, profile: str) -> tuple[ModelSection, TrainConfig]:
    if profile not in PROFILES:
        raise ConfigurationError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    p = PROFILES[profile]
    base = default_config(arch)
    model = ModelSection(arch=arch, input_size=p["input_size"], width_multiplier=p["width_multiplier"])
    tcfg = replace(base, epochs=p["epochs"], learning_rate=base.learning_rate * p["lr_scale"])
    return model, tcfg


def resolve_config(
    config_path=None,
    *,
    profile: str | None = None,
    arch: str | None = None,
    seed: int | None = None,
    dataset: dict | None = None,
    model: dict | None = None,
    train_overrides: dict | None = None,
) -> ExperimentConfig:
    """Published defaults < profile preset < config file < explicit overrides.

    When ``arch`` differs from the file's architecture, the file's ``[train]``
    section is ignored in favour of the new architecture's defaults.
    """
    file_cfg = ExperimentConfig.read(config_path) if config_path else None
    profile = profile or (file_cfg.profile if file_cfg else DEFAULT_PROFILE)
    arch = arch or (file_cfg.model.arch if file_cfg else DEFAULT_ARCH)
    if arch not in PUBLISHED_DEFAULTS:
        raise ConfigurationError(f"unknown arch {arch!r}; expected one of {sorted(PUBLISHED_DEFAULTS)}")

    model_sec, tcfg = profile_defaults(arch, profile)
    cfg = ExperimentConfig(profile=profile, model=model_sec, train=tcfg)
    if file_cfg is not None:
        cfg.dataset, cfg.eval, cfg.gradcam = file_cfg.dataset, file_cfg.eval, file_cfg.gradcam
        if file_cfg.model.arch == arch:
            cfg.model, cfg.train = file_cfg.model, file_cfg.train
    if seed is not None:
        cfg.train = replace(cfg.train, seed=seed)
    drop_none = lambda d: {k: v for k, v in (d or {}).items() if v is not None}
    cfg.dataset = replace(cfg.dataset, **drop_none(dataset))
    cfg.model = replace(cfg.model, **drop_none(model))
    cfg.train = replace(cfg.train, **drop_none(train_overrides))
    cfg.model.backbone_spec()  # validate early
    return cfg


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------


def data_dir(out) -> Path:
    return Path(out) / "data"


def cmd_prepare(cfg: ExperimentConfig, out) -> Path:
    """Generate or index the dataset and write the split manifest; returns its path."""
    ds = cfg.dataset
    ddir = data_dir(out)
    ddir.mkdir(parents=True, exist_ok=True)
    if ds.root:
        manifest = D.load_manifest(ds.root)
    elif ds.synthetic:
        spec = D.SyntheticSpec(ds.n_per_class, ds.image_size, ds.seed, ds.cue_mode)
        manifest = D.synthesize_dataset(spec, ddir / "images")
    else:
        raise ConfigurationError("dataset section needs either a root directory or synthetic = true")
    train_m, test_m = D.split(manifest, D.SplitConfig(ds.train_fraction, ds.seed, ds.stratified))
    path = ddir / "manifest.csv"
    D.write_manifest_csv(path, train_m, test_m)
    cp = configparser.ConfigParser(interpolation=None)
    cp["dataset"] = {f.name: _format(getattr(ds, f.name)) for f in fields(ds)}
    with open(ddir / "dataset.ini", "w") as fh:
        cp.write(fh)
    log.info("manifest: %d train / %d test -> %s", len(train_m), len(test_m), path)
    for w in manifest.warnings:
        log.warning(w)
    return path


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _datasets(manifest_path, input_size: int, augment: bool, stats=None):
    train_m, test_m = D.read_manifest_csv(manifest_path)
    if len(train_m) == 0:
        raise ConfigurationError(f"{manifest_path} has no training rows")
    if stats is None:
        raw, _ = D.load_arrays(train_m, input_size)
        stats = D.channel_stats(raw)
    pp = D.PreprocessConfig(input_size, stats[0], stats[1], augment, augment)
    return D.ArrayDataset.from_manifest(train_m, pp), D.ArrayDataset.from_manifest(test_m, pp), pp


def cmd_train(cfg: ExperimentConfig, out, manifest_path=None, *, dry_run: bool = False) -> Path:
    """Train one model; returns the run directory.

    The resolved config is snapshotted before training starts. ``dry_run``
    only resolves the run directory name and writes nothing.
    """
    manifest_path = Path(manifest_path or data_dir(out) / "manifest.csv")
    if not manifest_path.exists():
        raise ConfigurationError(f"no dataset manifest at {manifest_path}; run 'prepare' first")
    run_dir = Path(out) / "runs" / cfg.run_key(file_digest(manifest_path))
    if dry_run:
        return run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.write(run_dir / "config.ini")

    train_set, test_set, pp = _datasets(manifest_path, cfg.model.input_size, cfg.train.augment)
    torch.manual_seed(cfg.train.seed)
    model = build_backbone(cfg.model.backbone_spec(), cfg.model.generator_spec())
    model, history = train(model, train_set, test_set, cfg.train)

    ref = {
        "manifest": os.path.relpath(manifest_path.resolve(), run_dir.resolve()),
        "manifest_sha256": file_digest(manifest_path),
    }
    (run_dir / "dataset.json").write_text(json.dumps(ref, indent=2, sort_keys=True) + "\n")
    history.write_csv(run_dir / "history.csv")
    (run_dir / "timing.json").write_text(
        json.dumps({"seconds_per_epoch": [r.seconds for r in history.records]}) + "\n"
    )
    final = history.final
    save_checkpoint(
        model, cfg.train, final.epoch, run_dir / "checkpoint.npz",
        metrics={"test_acc": final.test_acc, "test_loss": final.test_loss},
        optimizer_state=history.optimizer_state, preprocess=pp, history=history,
    )
    log.info("run directory %s (final test accuracy %.4f)", run_dir, final.test_acc)
    return run_dir


# ---------------------------------------------------------------------------
# evaluate / compare
# ---------------------------------------------------------------------------


@dataclass
class RunArtifacts:
    run_dir: Path
    config: ExperimentConfig
    manifest_path: Path
    manifest_sha256: str


def open_run(run_dir) -> RunArtifacts:
    run_dir = Path(run_dir)
    for name in ("config.ini", "checkpoint.npz", "history.csv", "dataset.json"):
        if not (run_dir / name).exists():
            raise ConfigurationError(f"{run_dir} is not a valid run directory: missing {name}")
    ref = json.loads((run_dir / "dataset.json").read_text())
    return RunArtifacts(
        run_dir, ExperimentConfig.read(run_dir / "config.ini"),
        (run_dir / ref["manifest"]).resolve(), ref["manifest_sha256"],
    )


def score_test_set(run: RunArtifacts):
    """Positive-class probabilities for the run's test split."""
    ckpt = load_checkpoint(run.run_dir / "checkpoint.npz")
    _, test_m = D.read_manifest_csv(run.manifest_path)
    test = D.ArrayDataset.from_manifest(test_m, ckpt.preprocess)
    batch = ckpt.config.eval_batch_size if ckpt.config else 128
    probs = torch.cat([predict(ckpt.model, x) for x, _ in D.iter_batches(test, batch)])
    return test_m, probs[:, 1].double().numpy(), test.labels.numpy()


def cmd_evaluate(run_dir, threshold: float | None = None) -> Path:
    from asffnet.plots import plot_confusion, plot_curves

    run = open_run(run_dir)
    threshold = run.config.eval.threshold if threshold is None else threshold
    out = run.run_dir / run.config.eval.output_dir
    out.mkdir(parents=True, exist_ok=True)
    entries, scores, labels = score_test_set(run)

    cm = confusion(scores, labels, threshold)
    report = metrics(cm)
    arch = run.config.model.arch
    write_metrics_csv(out / "metrics.csv", arch, cm, report, threshold)
    curves = {"roc": roc_curve(scores, labels), "pr": pr_curve(scores, labels)}
    for kind, curve in curves.items():
        write_curve_csv(out / f"{kind}.csv", curve)
        plot_curves(out / f"{kind}.png", {arch: curve}, kind)
    plot_confusion(out / "confusion.png", cm, arch)
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "score"])
        for s, y, p in zip(entries.entries, labels, scores):
            w.writerow([os.path.relpath(s.path.resolve(), run.manifest_path.parent), int(y), repr(float(p))])
    summary = {
        "threshold": threshold,
        "roc_auc": curves["roc"].auc, "roc_auc_rule": curves["roc"].auc_rule,
        "pr_auc": curves["pr"].auc, "pr_auc_rule": curves["pr"].auc_rule,
        "positive_class": 1, "tie_rule": "score >= threshold is positive",
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return out


COMPARISON_COLUMNS = (
    "model", "run", "accuracy", "precision", "recall", "specificity", "f1", "pr_auc", "roc_auc",
    "macro_precision", "macro_recall", "macro_specificity", "macro_f1",
)


@dataclass
class ComparisonReport:
    rows: list[dict]  # sorted by accuracy, best first
    roc: dict[str, Curve]
    pr: dict[str, Curve]
    out_dir: Path


def cmd_compare(run_dirs, out) -> ComparisonReport:
    """Table of metrics across runs (sorted by accuracy) plus overlaid curves."""
    from asffnet.plots import plot_curves

    if len(run_dirs) < 2:
        raise ConfigurationError("compare needs at least two run directories")
    runs = [open_run(r) for r in run_dirs]
    digests = {r.manifest_sha256 for r in runs}
    if len(digests) != 1:
        raise ValidationError("runs were trained on different datasets; comparison is invalid")

    rows, roc, pr = [], {}, {}
    for run in runs:
        _, scores, labels = score_test_set(run)
        threshold = run.config.eval.threshold
        report = metrics(confusion(scores, labels, threshold))
        rc, pc = roc_curve(scores, labels), pr_curve(scores, labels)
        label = f"{run.config.model.arch} ({run.run_dir.name})"
        roc[label], pr[label] = rc, pc
        rows.append({
            "model": run.config.model.arch, "run": run.run_dir.name,
            **report.positive_row(), "pr_auc": pc.auc, "roc_auc": rc.auc,
            **{f"macro_{k}": getattr(report.macro, k) for k in ("precision", "recall", "specificity", "f1")},
        })
    rows.sort(key=lambda r: (-r["accuracy"], r["run"]))

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, COMPARISON_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    with open(out / "reference.csv", "w", newline="") as fh:
        cols = ("model", "accuracy", "precision", "recall", "specificity", "f1", "pr_auc", "roc_auc")
        w = csv.DictWriter(fh, cols, lineterminator="\n", restval="")
        w.writeheader()
        for arch, vals in REFERENCE_RESULTS.items():
            w.writerow({"model": arch, **vals})
    plot_curves(out / "roc.png", roc, "roc")
    plot_curves(out / "pr.png", pr, "pr")
    return ComparisonReport(rows, roc, pr, out)


# ---------------------------------------------------------------------------
# explain
# ---------------------------------------------------------------------------


def cmd_explain(
    run_dir, images, *, class_index: int | None = None, layer: str | None = None,
    out=None, blend_alpha: float | None = None,
) -> tuple[Path, int]:
    """Grad-CAM artifacts per image; returns (output dir, number of failures)."""
    run = open_run(run_dir)
    ckpt = load_checkpoint(run.run_dir / "checkpoint.npz")
    model, pp = ckpt.model, ckpt.preprocess
    n_classes = model.spec.num_classes
    if class_index is not None and not 0 <= class_index < n_classes:
        raise ValidationError(f"class_index {class_index} out of range for {n_classes} classes")
    layer = layer or run.config.gradcam.layer or None
    if layer is not None:
        model.tap(layer)
    alpha = blend_alpha if blend_alpha is not None else run.config.gradcam.blend_alpha
    out = Path(out) if out else run.run_dir / "explain"
    out.mkdir(parents=True, exist_ok=True)

    failures = 0
    for path in map(Path, images):
        try:
            arr = D.decode_image(path, pp.resize_to)
        except Exception as exc:  # undecodable input is reported, not fatal
            log.warning("cannot decode %s: %s", path, exc)
            failures += 1
            continue
        x = D.normalize(torch.from_numpy(arr)[None], pp.mean, pp.std)
        probs = predict(model, x)[0]
        predicted = int(probs.argmax())
        if n_classes == 2:
            predicted = int(probs[1] >= 0.5)
        target = predicted if class_index is None else class_index
        hm = gradcam(model, x[0], target, layer)
        base = np.rint(arr.transpose(1, 2, 0) * 255).astype(np.uint8)
        ov = overlay(base, hm, alpha)
        save_heatmap_png(out / f"{path.stem}_heatmap.png", hm)
        save_overlay_png(out / f"{path.stem}_overlay.png", ov)
        write_record(out / f"{path.stem}.json", {
            "image": path.name,
            "predicted_class": predicted,
            "confidence": float(probs[predicted]),
            "probabilities": [float(p) for p in probs],
            "blend_alpha": alpha,
            **hm.record(),
        })
    return out, failures
