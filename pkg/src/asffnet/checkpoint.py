"""Checkpoint files.

A checkpoint is a ``.npz`` archive: model tensors under ``model/<name>``,
optimizer tensors under ``optim/<param index>/<key>`` and a JSON manifest
under ``__manifest__``. Archive members carry a fixed timestamp, so saving
identical state twice yields identical bytes. Writes go through a temporary
file and an atomic rename.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from asffnet.backbones import BackboneSpec, Classifier, build_backbone
from asffnet.data import PreprocessConfig
from asffnet.errors import CheckpointError
from asffnet.fusion import WeightGeneratorSpec
from asffnet.training import TrainConfig, TrainHistory

FORMAT_VERSION = 1
MANIFEST_KEY = "__manifest__"
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    model: Classifier
    config: TrainConfig | None
    epoch: int
    metrics: dict = field(default_factory=dict)
    optimizer_state: dict | None = None
    preprocess: PreprocessConfig | None = None
    history: TrainHistory | None = None
    manifest: dict = field(default_factory=dict)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.asarray(arr, order="C"), allow_pickle=False)
    return buf.getvalue()


def write_npz(path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=_ZIP_EPOCH), _npy_bytes(arr))
    os.replace(tmp, path)


def _optimizer_arrays(state: dict) -> tuple[dict, dict]:
    arrays, meta = {}, {"param_groups": state["param_groups"], "state": {}}
    for idx, entry in state["state"].items():
        keys = {}
        for key, value in entry.items():
            if isinstance(value, torch.Tensor):
                arrays[f"optim/{idx}/{key}"] = value.detach().numpy()
                keys[key] = "tensor"
            else:
                keys[key] = value
        meta["state"][str(idx)] = keys
    return arrays, meta


def _optimizer_state(meta: dict, archive) -> dict:
    state = {}
    for idx, keys in meta["state"].items():
        entry = {}
        for key, value in keys.items():
            entry[key] = torch.from_numpy(archive[f"optim/{idx}/{key}"]) if value == "tensor" else value
        state[int(idx)] = entry
    return {"state": state, "param_groups": meta["param_groups"]}


def save_checkpoint(
    model: Classifier,
    cfg: TrainConfig | None,
    epoch: int,
    path,
    *,
    metrics: dict | None = None,
    optimizer_state: dict | None = None,
    preprocess: PreprocessConfig | None = None,
    history: TrainHistory | None = None,
    extra: dict | None = None,
) -> None:
    state = model.state_dict()
    arrays = {f"model/{k}": v.detach().numpy() for k, v in state.items()}
    manifest = {
        "format_version": FORMAT_VERSION,
        "arch": model.spec.arch,
        "spec": model.spec.to_dict(),
        "gate_units": getattr(getattr(model, "gate", None), "units", None),
        "train_config": cfg.to_dict() if cfg else None,
        "epoch": epoch,
        "metrics": metrics or {},
        "parameters": [
            {"name": k, "shape": list(v.shape), "dtype": str(v.dtype).replace("torch.", "")}
            for k, v in state.items()
        ],
        "preprocess": preprocess.__dict__ if preprocess else None,
        # wall-clock seconds would make otherwise identical checkpoints differ
        "history": [
            {k: v for k, v in r.items() if k != "seconds"} for r in history.to_list()
        ] if history else None,
        "extra": extra or {},
    }
    if optimizer_state is not None:
        opt_arrays, manifest["optimizer"] = _optimizer_arrays(optimizer_state)
        arrays.update(opt_arrays)
    arrays[MANIFEST_KEY] = np.array(json.dumps(manifest, sort_keys=True))
    write_npz(path, arrays)


def read_manifest(path) -> dict:
    try:
        with np.load(path, allow_pickle=False) as archive:
            return json.loads(str(archive[MANIFEST_KEY]))
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path} is not a readable checkpoint: {exc}") from exc


def load_checkpoint(path, arch: str | None = None) -> Checkpoint:
    """Rebuild the model described by the manifest and load its tensors.

    ``arch``, when given, must match the stored architecture.
    """
    manifest = read_manifest(path)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if arch is not None and manifest["arch"] != arch:
        raise CheckpointError(f"{path}: expected arch {arch!r}, found {manifest['arch']!r}")

    spec = BackboneSpec(**manifest["spec"])
    gen = WeightGeneratorSpec(manifest.get("gate_units"))
    model = build_backbone(spec, gen)
    expected = model.state_dict()
    with np.load(path, allow_pickle=False) as archive:
        stored = {k[len("model/"):]: archive[k] for k in archive.files if k.startswith("model/")}
        problems = []
        for name in sorted(set(expected) | set(stored)):
            if name not in stored:
                problems.append(f"{name}: missing")
            elif name not in expected:
                problems.append(f"{name}: unexpected")
            elif tuple(expected[name].shape) != stored[name].shape:
                problems.append(
                    f"{name}: stored {stored[name].shape}, model {tuple(expected[name].shape)}"
                )
        if problems:
            raise CheckpointError(f"{path}: parameter mismatch: " + "; ".join(problems))
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in stored.items()})
        opt_state = _optimizer_state(manifest["optimizer"], archive) if "optimizer" in manifest else None
    model.eval()

    pp = manifest.get("preprocess")
    hist = manifest.get("history")
    cfg = manifest.get("train_config")
    return Checkpoint(
        model=model,
        config=TrainConfig.from_dict(cfg) if cfg else None,
        epoch=manifest["epoch"],
        metrics=manifest.get("metrics", {}),
        optimizer_state=opt_state,
        preprocess=PreprocessConfig(
            pp["resize_to"], tuple(pp["mean"]), tuple(pp["std"]),
            pp["horizontal_flip"], pp["rotate90"],
        ) if pp else None,
        history=TrainHistory.from_list(hist) if hist else None,
        manifest=manifest,
    )
