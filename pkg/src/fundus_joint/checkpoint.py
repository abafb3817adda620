"""Checkpoint archive: a zip holding a text manifest, metadata and raw float32 arrays.

Layout::

    manifest.txt   one line per array: "<name>\\t<dtype>\\t<comma-separated shape>"
    meta.json      architecture metadata and a source tag
    arrays/<name>  little-endian float32 bytes, C order

Any tool that writes this layout (for example an export of a vessel
segmentation encoder) can be loaded here.
"""

from __future__ import annotations

import json
import logging
import os
import zipfile
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

SOURCES = ("vessel-pretrained", "scratch", "trained")
COMPAT_KEYS = ("embed_dim", "depths", "window_size")


class CheckpointError(Exception):
    pass


@dataclass
class ModelCheckpoint:
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def source(self) -> str:
        return self.meta.get("source", "trained")


def from_module(module: nn.Module, meta: dict, prefix: str = "") -> ModelCheckpoint:
    params = {
        prefix + k: v.detach().cpu().to(torch.float32).numpy().copy()
        for k, v in module.state_dict().items()
    }
    return ModelCheckpoint(params, dict(meta))


def save(ckpt: ModelCheckpoint, path: str | os.PathLike) -> None:
    if ckpt.source not in SOURCES:
        raise ValueError(f"unknown checkpoint source {ckpt.source!r}")
    lines = []
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in ckpt.params.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            lines.append(f"{name}\tfloat32\t{','.join(str(d) for d in arr.shape)}")
            zf.writestr(f"arrays/{name}", arr.tobytes(order="C"))
        zf.writestr("manifest.txt", "\n".join(lines) + "\n")
        zf.writestr("meta.json", json.dumps(ckpt.meta, indent=2, sort_keys=True))


def load(path: str | os.PathLike) -> ModelCheckpoint:
    params = {}
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json").decode("utf-8"))
        for line in zf.read("manifest.txt").decode("utf-8").splitlines():
            if not line.strip():
                continue
            name, dtype, shape = line.split("\t")
            if dtype != "float32":
                raise CheckpointError(f"{name}: unsupported dtype {dtype}")
            dims = tuple(int(d) for d in shape.split(",")) if shape else ()
            raw = zf.read(f"arrays/{name}")
            params[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    return ModelCheckpoint(params, meta)


@dataclass
class LoadReport:
    loaded: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)  # under the prefix in the checkpoint, not used
    missing: list[str] = field(default_factory=list)  # in the model, not in the checkpoint
    warnings: list[str] = field(default_factory=list)


def _check_meta(ckpt_meta: dict, model_meta: dict) -> list[str]:
    issues = []
    for key in COMPAT_KEYS:
        if key in ckpt_meta and key in model_meta and ckpt_meta[key] != model_meta[key]:
            issues.append(f"{key}: checkpoint {ckpt_meta[key]} vs model {model_meta[key]}")
    return issues


def load_into(module: nn.Module, ckpt: ModelCheckpoint, prefix: str = "", strict: bool = True,
              model_meta: Optional[dict] = None) -> LoadReport:
    """Copy checkpoint arrays named ``prefix + key`` into ``module``'s state.

    Strict mode raises ``CheckpointError`` on incompatible metadata, shape
    mismatches or missing keys; lenient mode loads what fits and reports the rest.
    """
    rep = LoadReport()
    issues = _check_meta(ckpt.meta, model_meta or {})
    if issues:
        if strict:
            raise CheckpointError("incompatible architecture: " + "; ".join(issues))
        rep.warnings += issues
    state = module.state_dict()
    wanted = {k[len(prefix):]: k for k in ckpt.params if k.startswith(prefix)}
    new_state = {}
    for key, tensor in state.items():
        if key not in wanted:
            rep.missing.append(key)
            continue
        arr = ckpt.params[wanted[key]]
        if tuple(arr.shape) != tuple(tensor.shape):
            msg = f"{key}: checkpoint shape {tuple(arr.shape)} vs model {tuple(tensor.shape)}"
            if strict:
                raise CheckpointError(msg)
            rep.warnings.append(msg)
            rep.skipped.append(wanted[key])
            continue
        new_state[key] = torch.from_numpy(arr.copy()).to(tensor.dtype)
        rep.loaded.append(key)
    used = {wanted[k] for k in rep.loaded}
    rep.skipped += [k for k in wanted.values() if k not in used and k not in rep.skipped]
    if rep.missing:
        if strict:
            raise CheckpointError(f"missing keys: {rep.missing[:5]}{'...' if len(rep.missing) > 5 else ''}")
        rep.warnings += [f"missing {k}" for k in rep.missing]
    module.load_state_dict(new_state, strict=False)
    for w in rep.warnings:
        log.warning(w)
    return rep


def load_vessel_encoder(ckpt: ModelCheckpoint, model: nn.Module, strict: bool = True) -> LoadReport:
    """Overwrite ``model.encoder`` from the ``encoder.*`` arrays of ``ckpt``; decoders are untouched."""
    meta = model.cfg.metadata() if hasattr(model, "cfg") else {}
    return load_into(model.encoder, ckpt, prefix="encoder.", strict=strict, model_meta=meta)
