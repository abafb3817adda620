"""Training loops for the coarse model and the two fine modules, plus cross-validation."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt_io
from .backbone import SwinUNet
from .coarse import JointSegDetNet, label_to_channels
from .config import TrainConfig
from .data import AugmentConfig, FundusSample, augment, kfold_indices
from .fine import FineLocNet, FineSegNet
from .imaging import normalize_channels
from .losses import detection_loss, flm_loss, seg_loss, soft_dice
from .metrics import MetricRecord
from .pipeline import (Models, flm_input, flm_target, fovea_roi, fsm_input, fsm_target, guide_from_output,
                       guide_from_truth, od_roi, prepare_for, run_coarse, evaluate)

log = logging.getLogger(__name__)

LOSS_COLUMNS = {
    # additive columns first: they sum to ``total``
    "coarse": ("det_term", "dice_term", "star_term", "L_D", "L_S", "star"),
    "fsm": ("dice_term", "star_term", "L_S", "star"),
    "flm": ("coord_term", "heat_term"),
}
ADDITIVE = {"coarse": 3, "fsm": 2, "flm": 2}


def lr_at(it: int, L0: float, max_iter: int) -> float:
    """Polynomial decay ``L0 * (1 - it / max_iter) ** 0.9``; zero from ``max_iter`` on."""
    if max_iter <= 0:
        raise ValueError("max_iter must be positive")
    if it < 0:
        raise ValueError("iteration must be non-negative")
    if it >= max_iter:
        return 0.0
    return L0 * (1.0 - it / max_iter) ** 0.9


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RunArtifacts:
    config: TrainConfig
    model: nn.Module
    losses: list[dict] = field(default_factory=list)
    max_iterations: int = 0
    evals: list[dict] = field(default_factory=list)
    checkpoints: dict[str, str] = field(default_factory=dict)
    run_dir: Optional[Path] = None
    seconds: float = 0.0


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def init_output_priors(model: nn.Module, prior: float) -> None:
    """Start every sigmoid output map near ``prior`` (background channels near ``1 - prior``).

    With tiny foreground structures this keeps the first updates from being
    spent on undoing a 0.5 everywhere prediction.
    """
    if not 0 < prior < 1:
        return
    b = math.log(prior / (1 - prior))
    heads = []
    if isinstance(model, JointSegDetNet):
        if model.heat_decoder is not None:
            heads.append((model.heat_decoder.head, [b, b]))
        if model.seg_decoder is not None:
            heads.append((model.seg_decoder.head, [b, b, -b]))
    elif isinstance(model, FineSegNet):
        heads.append((model.decoder.head, [b, b, -b]))
    elif isinstance(model, FineLocNet):
        heads.append((model.decoder.head, [b]))
    with torch.no_grad():
        for head, values in heads:
            head.bias.copy_(torch.tensor(values, dtype=head.bias.dtype))


def build_model(cfg: TrainConfig, stage: Optional[str] = None) -> nn.Module:
    stage = stage or cfg.stage
    bcfg = cfg.backbone()
    if stage == "coarse":
        model = JointSegDetNet(bcfg, heat_branch=cfg.heat_branch, seg_branch=cfg.seg_branch)
    elif stage == "fsm":
        model = FineSegNet(bcfg)
    elif stage == "flm":
        model = FineLocNet(bcfg)
    else:
        raise ValueError(f"unknown stage {stage!r}")
    init_output_priors(model, cfg.head_prior)
    return model


def model_meta(cfg: TrainConfig, stage: str, source: str = "trained") -> dict:
    meta = cfg.backbone().metadata()
    meta.update(stage=stage, source=source, heat_branch=cfg.heat_branch, seg_branch=cfg.seg_branch)
    return meta


# ---------------------------------------------------------------------------
# stage data


@dataclass
class StageData:
    ids: list[str]
    x: torch.Tensor  # [N, C, s, s] float32
    targets: dict[str, torch.Tensor]

    def __len__(self) -> int:
        return len(self.ids)

    def batch(self, idx: np.ndarray) -> tuple[list[str], torch.Tensor, dict[str, torch.Tensor]]:
        t = torch.from_numpy(idx)
        return [self.ids[i] for i in idx], self.x[t], {k: v[t] for k, v in self.targets.items()}


def coarse_data(samples: list[FundusSample], cfg: TrainConfig) -> StageData:
    xs, heats, segs, valid, ids = [], [], [], [], []
    for s in samples:
        p = prepare_for(s, cfg)
        xs.append(normalize_channels(p.image))
        heats.append(p.heatmaps(cfg.sigma(cfg.input_size)))
        mask = p.mask if p.mask is not None else np.zeros(p.size, np.uint8)
        segs.append(label_to_channels(mask))
        valid.append([not s.oc_absent and s.mask is not None, s.mask is not None, s.mask is not None])
        ids.append(s.id)
    return StageData(ids, torch.from_numpy(np.stack(xs)), {
        "heat": torch.from_numpy(np.stack(heats)).to(torch.float64),
        "seg": torch.from_numpy(np.stack(segs)).to(torch.float64),
        "valid": torch.tensor(valid),
    })


def _guides(samples, cfg, coarse_model):
    for s in samples:
        prepared = prepare_for(s, cfg)
        if coarse_model is None:
            yield s, guide_from_truth(prepared, cfg)
        else:
            out = run_coarse(coarse_model, prepared, cfg)
            yield s, guide_from_output(out, prepared.frame)


def fsm_data(samples: list[FundusSample], cfg: TrainConfig, coarse_model=None) -> StageData:
    teacher = coarse_model is None
    xs, segs, valid, ids = [], [], [], []
    for s, guide in _guides(samples, cfg, coarse_model):
        if s.mask is None:
            continue
        roi = od_roi(s, guide, cfg, teacher=teacher)
        xs.append(fsm_input(normalize_channels(s.image), guide, roi, cfg).x)
        segs.append(fsm_target(s, roi))
        valid.append([not s.oc_absent, True, True])
        ids.append(s.id)
    if not ids:
        raise ValueError("no samples with masks for fine segmentation")
    return StageData(ids, torch.from_numpy(np.stack(xs)), {
        "seg": torch.from_numpy(np.stack(segs)).to(torch.float64),
        "valid": torch.tensor(valid),
    })


def flm_data(samples: list[FundusSample], cfg: TrainConfig, coarse_model=None) -> StageData:
    teacher = coarse_model is None
    xs, coords, heats, ids = [], [], [], []
    for s, guide in _guides(samples, cfg, coarse_model):
        roi = fovea_roi(s, guide, cfg, teacher=teacher)
        if roi is None:
            continue
        tgt = flm_target(s, roi, cfg)
        if tgt is None:
            continue
        xs.append(flm_input(normalize_channels(s.image), guide, roi).x)
        coords.append(tgt[0])
        heats.append(tgt[1])
        ids.append(s.id)
    if not ids:
        raise ValueError("no samples with a fovea inside its crop")
    return StageData(ids, torch.from_numpy(np.stack(xs)), {
        "coord": torch.tensor(coords, dtype=torch.float64),
        "heat": torch.from_numpy(np.stack(heats)).to(torch.float64),
    })


def stage_data(samples: list[FundusSample], cfg: TrainConfig, coarse_model=None) -> StageData:
    if cfg.stage == "coarse":
        return coarse_data(samples, cfg)
    if not cfg.teacher_forcing and coarse_model is None:
        raise ValueError("coarse-driven fine training needs a coarse model (or teacher_forcing=true)")
    guide_model = None if cfg.teacher_forcing else coarse_model
    if cfg.stage == "fsm":
        return fsm_data(samples, cfg, guide_model)
    return flm_data(samples, cfg, guide_model)


# ---------------------------------------------------------------------------
# losses


def _f(t) -> float:
    return float(t.detach()) if torch.is_tensor(t) else float(t)


def stage_loss(cfg: TrainConfig, model: nn.Module, x: torch.Tensor, tg: dict[str, torch.Tensor]):
    """Total loss (float64) and its logged decomposition."""
    w = cfg.loss_weights()
    star_cfg = cfg.star_config()
    use_star = cfg.star_loss and w.nu > 0
    terms: dict[str, Optional[float]] = {}
    if cfg.stage == "coarse":
        heat, seg = model(x)
        # a switched-off branch is left out of the objective even if the model has its decoder
        heat = heat if cfg.heat_branch else None
        seg = seg if cfg.seg_branch else None
        total = x.new_zeros((), dtype=torch.float64)
        det = None
        if heat is not None:
            det = detection_loss(tg["heat"], heat.double())
            total = total + w.lambda0 * det
        parts: dict = {}
        seg_l = None
        if seg is not None:
            seg_l = seg_loss(seg.double(), tg["seg"], w, star_cfg, star=use_star, parts=parts, valid=tg["valid"])
            total = total + w.lambda1 * seg_l
        terms["det_term"] = _f(w.lambda0 * det) if det is not None else 0.0
        terms["dice_term"] = _f(w.lambda1 * w.mu * parts["dice"]) if seg is not None else 0.0
        terms["star_term"] = _f(w.lambda1 * w.nu * parts["star"]) if seg is not None and use_star else 0.0
        terms["L_D"] = _f(det) if det is not None else None
        terms["L_S"] = _f(seg_l) if seg_l is not None else None
        terms["star"] = _f(parts["star"]) if seg is not None and use_star else None
    elif cfg.stage == "fsm":
        parts = {}
        probs = model(x).double()
        total = seg_loss(probs, tg["seg"], w, star_cfg, star=use_star, parts=parts, valid=tg["valid"])
        terms["dice_term"] = _f(w.mu * parts["dice"])
        terms["star_term"] = _f(w.nu * parts["star"]) if use_star else 0.0
        terms["L_S"] = _f(total)
        terms["star"] = _f(parts["star"]) if use_star else None
    else:
        coords, heat = model(x)
        parts = {}
        total = flm_loss(coords.double(), tg["coord"], heat.double(), tg["heat"], float(cfg.input_size), parts)
        terms["coord_term"] = _f(parts["coord"])
        terms["heat_term"] = _f(parts["heat"])
    return total, terms


# ---------------------------------------------------------------------------
# training loop


def _epoch_order(rng: np.random.Generator, n: int, batch: int) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i : i + batch] for i in range(0, n, batch)]


def _augmented(data: StageData, samples, cfg, rng) -> StageData:
    # only the coarse stage re-renders augmented samples; fine crops are static
    aug = [augment(s, AugmentConfig(), rng) for s in samples]
    return coarse_data(aug, cfg)


def train_stage(
    cfg: TrainConfig,
    samples: list[FundusSample],
    coarse_model: Optional[nn.Module] = None,
    run_dir: Optional[str | os.PathLike] = None,
    model: Optional[nn.Module] = None,
    eval_every: int = 0,
    on_eval: Optional[Callable[[int, nn.Module], dict]] = None,
    data: Optional[StageData] = None,
) -> RunArtifacts:
    """SGD with momentum and the polynomial schedule; one loss row per iteration.

    ``on_eval(iteration, model)`` is called every ``eval_every`` iterations
    (and after the last one); returning ``{"stop": True}`` ends training early.
    A non-finite loss raises :class:`TrainingDiverged` naming the batch.
    """
    seed_everything(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = build_model(cfg)
        if cfg.stage == "coarse" and cfg.vessel_pretrain:
            _load_vessel(model, cfg)
    if cfg.stage == "coarse" and cfg.freeze_encoder:
        model.freeze_encoder(True)
    data = data if data is not None else stage_data(samples, cfg, coarse_model)
    n = len(data)
    if n == 0:
        raise ValueError("no training samples")
    max_iter = cfg.iterations_for(n)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=cfg.L0, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    arts = RunArtifacts(cfg, model, max_iterations=max_iter)
    out_dir = Path(run_dir) if run_dir is not None else None
    if out_dir is not None:
        (out_dir / "ckpt").mkdir(parents=True, exist_ok=True)
        snap = cfg.to_text() + f"# derived: max_iterations_effective = {max_iter}, n_samples = {n}\n"
        (out_dir / "config.snapshot").write_text(snap)
        arts.run_dir = out_dir
    best = math.inf
    epoch_losses: list[float] = []
    it = 0
    t0 = time.perf_counter()
    model.train()
    stop = False
    while it < max_iter and not stop:
        if cfg.augment and cfg.stage == "coarse" and samples:
            data = _augmented(data, samples, cfg, rng)
        for idx in _epoch_order(rng, n, cfg.batch_size):
            if it >= max_iter:
                break
            lr = lr_at(it, cfg.L0, max_iter)
            for g in opt.param_groups:
                g["lr"] = lr
            ids, x, tg = data.batch(idx)
            total, terms = stage_loss(cfg, model, x, tg)
            if not torch.isfinite(total):
                _dump_divergence(out_dir, it, ids, terms)
                raise TrainingDiverged(f"non-finite loss at iteration {it}; batch ids {ids}; terms {terms}")
            opt.zero_grad(set_to_none=True)
            total.backward()
            if cfg.grad_clip > 0:
                nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            row = {"iter": it, "lr": lr, "total": float(total.detach())}
            row.update(terms)
            arts.losses.append(row)
            epoch_losses.append(row["total"])
            it += 1
            if on_eval is not None and eval_every and (it % eval_every == 0 or it == max_iter):
                model.eval()
                res = dict(on_eval(it, model) or {})
                model.train()
                res["iter"] = it
                arts.evals.append(res)
                if res.get("stop"):
                    stop = True
                    break
        if epoch_losses:
            mean = float(np.mean(epoch_losses))
            epoch_losses = []
            if out_dir is not None and mean < best:
                best = mean
                _save(model, cfg, out_dir / "ckpt" / "best.ckpt")
                arts.checkpoints["best"] = str(out_dir / "ckpt" / "best.ckpt")
    model.eval()
    arts.seconds = time.perf_counter() - t0
    if out_dir is not None:
        _save(model, cfg, out_dir / "ckpt" / "final.ckpt")
        arts.checkpoints["final"] = str(out_dir / "ckpt" / "final.ckpt")
        write_losses(out_dir / "losses.csv", arts.losses, cfg.stage)
    return arts


def _save(model: nn.Module, cfg: TrainConfig, path: Path) -> None:
    ckpt_io.save(ckpt_io.from_module(model, model_meta(cfg, cfg.stage)), path)


def _dump_divergence(out_dir: Optional[Path], it: int, ids: list[str], terms: dict) -> None:
    if out_dir is None:
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "divergence.json").write_text(json.dumps({"iteration": it, "batch_ids": ids, "terms": terms},
                                                        indent=2))


def write_losses(path: Path, rows: list[dict], stage: str) -> None:
    cols = ["iter", "lr", "total", *LOSS_COLUMNS[stage]]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in cols])


def read_losses(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (float(v) if v != "" else None) for k, v in row.items()} for row in csv.DictReader(fh)]


def load_model(path: str | os.PathLike, cfg: TrainConfig, stage: str) -> nn.Module:
    ck = ckpt_io.load(path)
    flags = dict(heat_branch=ck.meta.get("heat_branch", True), seg_branch=ck.meta.get("seg_branch", True))
    model = build_model(cfg.replace(stage=stage, **flags), stage)
    ckpt_io.load_into(model, ck, strict=True, model_meta=cfg.backbone().metadata())
    model.eval()
    return model


# ---------------------------------------------------------------------------
# vessel pretraining (toy substitute for an external vessel-segmentation encoder)


def _load_vessel(model: nn.Module, cfg: TrainConfig) -> None:
    if not cfg.vessel_ckpt:
        raise ValueError("vessel_pretrain is on but vessel_ckpt is empty")
    rep = ckpt_io.load_vessel_encoder(ckpt_io.load(cfg.vessel_ckpt), model, strict=True)
    log.info("vessel encoder: %d tensors loaded", len(rep.loaded))


def pretrain_vessel_encoder(samples: list[FundusSample], cfg: TrainConfig, iterations: int = 200,
                            path: Optional[str | os.PathLike] = None) -> ckpt_io.ModelCheckpoint:
    """Train a single-decoder network on vessel masks (``sample.meta['vessels']``) and export it.

    The checkpoint keeps the ``encoder.*`` names so it loads into the coarse
    model with :func:`checkpoint.load_vessel_encoder`.
    """
    seed_everything(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    xs, ys = [], []
    for s in samples:
        if "vessels" not in s.meta:
            raise ValueError(f"{s.id} has no vessel mask")
        vs = FundusSample(s.image, s.meta["vessels"].astype(np.uint8), None, None, s.id)
        p = prepare_for(vs, cfg)
        xs.append(normalize_channels(p.image))
        ys.append(p.mask.astype(np.float64)[None])
    x = torch.from_numpy(np.stack(xs))
    y = torch.from_numpy(np.stack(ys))
    model = SwinUNet(cfg.backbone(), in_ch=3, out_ch=1)
    b = math.log(cfg.head_prior / (1 - cfg.head_prior))
    with torch.no_grad():
        model.decoder.head.bias.fill_(b)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.L0, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    model.train()
    n = len(xs)
    it = 0
    while it < iterations:
        for idx in _epoch_order(rng, n, cfg.batch_size):
            if it >= iterations:
                break
            for g in opt.param_groups:
                g["lr"] = lr_at(it, cfg.L0, iterations)
            t = torch.from_numpy(idx)
            pred = torch.sigmoid(model(x[t])).double()
            loss = soft_dice(pred, y[t]) + torch.nn.functional.mse_loss(pred, y[t])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip > 0:
                nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            it += 1
    model.eval()
    meta = cfg.backbone().metadata()
    meta.update(source="vessel-pretrained", stage="vessel")
    ck = ckpt_io.from_module(model, meta)
    if path is not None:
        ckpt_io.save(ck, path)
    return ck


# ---------------------------------------------------------------------------
# full model training and cross-validation


def train_all(cfg: TrainConfig, samples: list[FundusSample], run_dir: Optional[Path] = None,
              fine: bool = True) -> Models:
    """Coarse model, then (optionally) FSM and FLM driven by it or by ground truth."""
    sub = (lambda name: None if run_dir is None else Path(run_dir) / name)
    coarse = train_stage(cfg.replace(stage="coarse"), samples, run_dir=sub("coarse")).model
    models = Models(coarse)
    if fine:
        driver = None if cfg.teacher_forcing else coarse
        if cfg.seg_branch or cfg.teacher_forcing:
            models.fsm = train_stage(cfg.replace(stage="fsm"), samples, coarse_model=driver,
                                     run_dir=sub("fsm")).model
        if cfg.heat_branch or cfg.teacher_forcing:
            try:
                models.flm = train_stage(cfg.replace(stage="flm"), samples, coarse_model=driver,
                                         run_dir=sub("flm")).model
            except ValueError as exc:  # no usable fovea crops
                log.warning("fine localisation skipped: %s", exc)
    return models.eval()


@dataclass
class CrossvalResult:
    coarse: list[MetricRecord]
    fine: list[MetricRecord]
    folds: list[tuple[list[str], list[str]]]


def crossval(cfg: TrainConfig, samples: list[FundusSample], k: int = 5, run_dir: Optional[Path] = None,
             fine: bool = True) -> CrossvalResult:
    """Seeded ``k``-fold split; train on each complement, pool the held-out records."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if len(samples) < k:
        raise ValueError(f"{len(samples)} samples cannot fill {k} folds")
    res = CrossvalResult([], [], [])
    for f, (tr, te) in enumerate(kfold_indices(len(samples), k, cfg.seed)):
        if len(tr) == 0 or len(te) == 0:
            raise ValueError(f"fold {f} is empty")
        train_s = [samples[i] for i in tr]
        test_s = [samples[i] for i in te]
        fold_dir = None if run_dir is None else Path(run_dir) / f"fold{f}"
        models = train_all(cfg, train_s, fold_dir, fine=fine)
        c, fn = evaluate(models, test_s, cfg)
        res.coarse += c
        res.fine += fn
        res.folds.append(([s.id for s in train_s], [s.id for s in test_s]))
    return res


def cross_dataset(cfg: TrainConfig, train_samples: list[FundusSample], test_samples: list[FundusSample],
                  run_dir: Optional[Path] = None, fine: bool = True) -> CrossvalResult:
    """Train on one dataset, evaluate on another."""
    if not train_samples or not test_samples:
        raise ValueError("both datasets must be non-empty")
    models = train_all(cfg, train_samples, run_dir, fine=fine)
    c, fn = evaluate(models, test_samples, cfg)
    return CrossvalResult(c, fn, [([s.id for s in train_samples], [s.id for s in test_samples])])
