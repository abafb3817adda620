"""Command-line entry point: data synthesis, training, inference, evaluation and reports."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional

from . import metrics as M
from .config import STAGES, TABLE4_ROWS, TrainConfig, desk_preset, parse_kv, table4_config
from .data import LoadReport, load_dataset, read_image, write_manifest, write_mask
from .pipeline import Models, evaluate, infer_pipeline
from .synth import synth_fundus
from .train import cross_dataset, crossval, load_model, pretrain_vessel_encoder, train_all, train_stage

log = logging.getLogger("fundus_joint")

STAGE_FIELD = "stage"


# ---------------------------------------------------------------------------
# configuration from flags


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config", "override any configuration field")
    g.add_argument("--config", type=Path, help="key = value text file")
    g.add_argument("--desk", action="store_true", help="start from the CPU-sized preset")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="extra override")
    for f in fields(TrainConfig):
        if f.name in ("stage", "seed"):
            continue
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, default=None, metavar="V")


def build_config(args: argparse.Namespace, base: Optional[TrainConfig] = None, **fixed) -> TrainConfig:
    """``base`` (defaults, or the desk preset) <- config file <- flags <- ``fixed``."""
    cfg = desk_preset() if getattr(args, "desk", False) else (base or TrainConfig())
    if getattr(args, "config", None):
        cfg = cfg.updated(parse_kv(Path(args.config).read_text()))
    values = {}
    for f in fields(TrainConfig):
        v = getattr(args, "cfg_" + f.name, None)
        if v is not None:
            values[f.name] = v
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    cfg = cfg.updated(values)
    return cfg.replace(**fixed) if fixed else cfg


# ---------------------------------------------------------------------------
# run-directory files


def write_metrics(path: Path, sections: dict[str, list[M.MetricRecord]]) -> None:
    """One row per (stage, sample) with the per-sample metric columns."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([STAGE_FIELD] + M.CSV_HEADER)
        for stage, recs in sections.items():
            for r in recs:
                w.writerow([stage, r.id] + ["" if getattr(r, k) is None else repr(getattr(r, k))
                                            for k in M.CSV_HEADER[1:]])


def read_metrics(path: Path) -> dict[str, list[M.MetricRecord]]:
    out: dict[str, list[M.MetricRecord]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            vals = {k: (float(row[k]) if row[k] != "" else None) for k in M.CSV_HEADER[1:]}
            out.setdefault(row[STAGE_FIELD], []).append(M.MetricRecord(row["id"], **vals))
    return out


def _layout_for(samples_oc_absent: bool, layout: Optional[str]) -> str:
    if layout:
        return layout
    return "table3" if samples_oc_absent else "table1"


def _write_report(run_dir: Path, sections, layout: str, title: str) -> Path:
    text = M.report(sections, layout=layout, title=title)
    path = run_dir / "report.md"
    path.write_text(text)
    return path


def _load(data: str, layout: str):
    rep = LoadReport()
    samples = load_dataset(data, layout, report=rep)
    if not samples:
        raise SystemExit(f"no usable samples under {data}")
    log.info("loaded %d samples (%d problems)", len(samples), len(rep.problems))
    return samples


def _run_config(args, run_dir: Path) -> TrainConfig:
    """Configuration a run was trained with, with command-line overrides on top."""
    snap = run_dir / "coarse" / "config.snapshot"
    base = TrainConfig.from_text(snap.read_text()) if snap.exists() else None
    return build_config(args, base)


def _models_from(run_dir: Path, cfg: TrainConfig) -> Models:
    def ck(stage):
        p = run_dir / stage / "ckpt" / "final.ckpt"
        return load_model(p, cfg, stage) if p.exists() else None

    coarse = ck("coarse")
    if coarse is None:
        raise SystemExit(f"no coarse checkpoint under {run_dir}")
    return Models(coarse, fsm=ck("fsm"), flm=ck("flm")).eval()


def _ensure_vessel(cfg: TrainConfig, run_dir: Path, n: int, iterations: int) -> TrainConfig:
    """Pretrain the toy vessel encoder on synthetic images when none is given."""
    if not cfg.vessel_pretrain or cfg.vessel_ckpt:
        return cfg
    path = run_dir / "vessel.ckpt"
    run_dir.mkdir(parents=True, exist_ok=True)
    pretrain_vessel_encoder(synth_fundus(cfg.seed + 1000, n, cfg.input_size), cfg, iterations, path)
    return cfg.replace(vessel_ckpt=str(path))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args) -> int:
    samples = synth_fundus(args.seed, args.n, args.size)
    path = write_manifest(samples, args.out)
    print(f"wrote {len(samples)} samples to {path}")
    return 0


def cmd_train(args) -> int:
    cfg = build_config(args, stage=args.stage, seed=args.seed)
    run_dir = Path(args.run_dir)
    samples = _load(args.data, args.layout)
    cfg = _ensure_vessel(cfg, run_dir, args.vessel_samples, args.vessel_iterations)
    coarse = None
    if args.stage != "coarse" and not cfg.teacher_forcing:
        if not args.coarse_ckpt:
            raise SystemExit("--coarse-ckpt is required when teacher_forcing is off")
        coarse = load_model(args.coarse_ckpt, cfg, "coarse")
    arts = train_stage(cfg, samples, coarse_model=coarse, run_dir=run_dir / args.stage)
    last = arts.losses[-1]
    print(f"{args.stage}: {len(arts.losses)} iterations, final loss {last['total']:.6f}, "
          f"{arts.seconds:.1f}s -> {run_dir / args.stage}")
    return 0


def cmd_infer(args) -> int:
    run_dir = Path(args.run_dir)
    cfg = _run_config(args, run_dir)
    models = _models_from(run_dir, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in args.images:
        img = read_image(Path(path))
        res = infer_pipeline(img, models, cfg, Path(path).stem)
        stem = Path(path).stem
        write_mask(out / f"{stem}_mask.png", res.labels)
        info = dict(fovea=None if res.fovea is None else list(res.fovea),
                    od_center=None if res.od_center is None else list(res.od_center),
                    degraded=res.degraded, vcdr=M.vcdr(res.labels))
        (out / f"{stem}.json").write_text(json.dumps(info, indent=2))
        print(stem, json.dumps(info))
    return 0


def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    cfg = _run_config(args, run_dir)
    samples = _load(args.data, args.layout)
    models = _models_from(run_dir, cfg)
    coarse, fine = evaluate(models, samples, cfg, teacher=args.teacher)
    sections = {"Coarse": coarse, "Fine": fine}
    write_metrics(run_dir / "metrics.csv", sections)
    layout = _layout_for(any(s.oc_absent for s in samples), args.report_layout)
    print(_write_report(run_dir, sections, layout, args.title).read_text())
    return 0


def cmd_crossval(args) -> int:
    cfg = build_config(args, seed=args.seed)
    run_dir = Path(args.run_dir)
    samples = _load(args.data, args.layout)
    cfg = _ensure_vessel(cfg, run_dir, args.vessel_samples, args.vessel_iterations)
    if args.test_data:
        test = _load(args.test_data, args.test_layout)
        res = cross_dataset(cfg, samples, test, run_dir, fine=not args.coarse_only)
        sections = {"": res.coarse}
        layout = "table5"
    else:
        res = crossval(cfg, samples, args.k, run_dir, fine=not args.coarse_only)
        sections = {"Coarse": res.coarse, "Fine": res.fine}
        layout = _layout_for(any(s.oc_absent for s in samples), args.report_layout)
    write_metrics(run_dir / "metrics.csv", sections)
    (run_dir / "folds.json").write_text(json.dumps(res.folds, indent=1))
    print(_write_report(run_dir, sections, layout, args.title).read_text())
    return 0


def cmd_ablate(args) -> int:
    cfg = table4_config(args.table4_row, build_config(args, seed=args.seed, stage="coarse"))
    run_dir = Path(args.run_dir)
    samples = _load(args.data, args.layout)
    cfg = _ensure_vessel(cfg, run_dir, args.vessel_samples, args.vessel_iterations)
    if args.test_data:
        train_s, test_s = samples, _load(args.test_data, args.test_layout)
    else:
        train_s = test_s = samples
    models = train_all(cfg, train_s, run_dir, fine=False)
    coarse, _ = evaluate(models, test_s, cfg)
    sections = {"Coarse": coarse}
    write_metrics(run_dir / "metrics.csv", sections)
    layout = _layout_for(any(s.oc_absent for s in test_s), args.report_layout)
    print(_write_report(run_dir, sections, layout, f"row {args.table4_row}").read_text())
    return 0


def cmd_report(args) -> int:
    rows = []
    for d in args.run_dirs:
        sections = read_metrics(Path(d) / "metrics.csv")
        rows.append((Path(d), sections))
    for d, sections in rows:
        layout = args.report_layout or ("table5" if "" in sections else "table1")
        text = M.report(sections, layout=layout, method=args.method or d.name, title=args.title)
        (d / "report.md").write_text(text)
        print(text)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fundus-joint", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="write a synthetic fundus dataset with a manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth_data)

    def data_flags(q, test=False):
        q.add_argument("--data", required=True, help="dataset root")
        q.add_argument("--layout", default="manifest", choices=["manifest", "gamma", "refuge", "palm"])
        if test:
            q.add_argument("--test-data", help="evaluate on this dataset instead (cross-dataset mode)")
            q.add_argument("--test-layout", default="manifest",
                           choices=["manifest", "gamma", "refuge", "palm"])

    def vessel_flags(q):
        q.add_argument("--vessel-samples", type=int, default=32,
                       help="synthetic images for vessel pretraining when no vessel_ckpt is set")
        q.add_argument("--vessel-iterations", type=int, default=600)

    def report_flags(q):
        q.add_argument("--report-layout", choices=sorted(M.LAYOUTS))
        q.add_argument("--title", default="")

    s = sub.add_parser("train", help="train one stage")
    s.add_argument("--stage", required=True, choices=STAGES)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--run-dir", required=True)
    s.add_argument("--coarse-ckpt", help="coarse model driving fine crops (teacher_forcing off)")
    data_flags(s)
    vessel_flags(s)
    _add_config_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="run the full pipeline on images")
    s.add_argument("images", nargs="+")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--out", required=True)
    _add_config_flags(s)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="evaluate trained checkpoints on a dataset")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--teacher", action="store_true", help="place fine crops from ground truth")
    data_flags(s)
    report_flags(s)
    _add_config_flags(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("crossval", help="k-fold cross-validation or cross-dataset evaluation")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--run-dir", required=True)
    s.add_argument("--coarse-only", action="store_true")
    data_flags(s, test=True)
    vessel_flags(s)
    report_flags(s)
    _add_config_flags(s)
    s.set_defaults(func=cmd_crossval)

    s = sub.add_parser("ablate", help="train and evaluate one coarse ablation row")
    s.add_argument("--table4-row", required=True, choices=list(TABLE4_ROWS))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--run-dir", required=True)
    data_flags(s, test=True)
    vessel_flags(s)
    report_flags(s)
    _add_config_flags(s)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("report", help="re-render report.md from metrics.csv")
    s.add_argument("run_dirs", nargs="+")
    s.add_argument("--method", default="")
    report_flags(s)
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
