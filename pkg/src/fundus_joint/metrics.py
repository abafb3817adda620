"""Evaluation metrics (AED, Dice %, vCDR MAE %) and table-shaped reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .coarse import OC, OD

CSV_HEADER = ["id", "fovea_aed", "od_aed", "od_dice", "oc_dice", "vcdr_pred", "vcdr_gt"]


def aed(p, q) -> Optional[float]:
    """Euclidean distance in pixels; ``None`` if either point is absent."""
    if p is None or q is None:
        return None
    return float(math.hypot(p[0] - q[0], p[1] - q[1]))


def region(labels: np.ndarray, cls: str) -> np.ndarray:
    labels = np.asarray(labels)
    if cls == "OD":
        return labels >= OD
    if cls == "OC":
        return labels == OC
    raise ValueError(f"unknown class {cls!r}")


def dice_pct(pred: np.ndarray, gt: np.ndarray, cls: str = "OD") -> float:
    """Dice in percent of the ``cls`` region (OD includes the cup); both empty gives 100."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    a, b = region(pred, cls), region(gt, cls)
    denom = a.sum() + b.sum()
    if denom == 0:
        return 100.0
    return float(100.0 * 2.0 * np.logical_and(a, b).sum() / denom)


def vertical_extent(mask: np.ndarray) -> int:
    rows = np.flatnonzero(np.asarray(mask).any(axis=1))
    return 0 if rows.size == 0 else int(rows[-1] - rows[0] + 1)


def vcdr(labels: np.ndarray) -> Optional[float]:
    """Vertical cup extent over vertical disc extent (inclusive rows); ``None`` without a disc."""
    od = vertical_extent(region(labels, "OD"))
    if od == 0:
        return None
    return vertical_extent(region(labels, "OC")) / od


def vcdr_mae(pred: Sequence[Optional[float]], gt: Sequence[Optional[float]]) -> tuple[Optional[float], int]:
    """Mean absolute vCDR error in percent over pairs where both exist, and the excluded count."""
    diffs = [abs(p - g) for p, g in zip(pred, gt) if p is not None and g is not None]
    excluded = len(list(zip(pred, gt))) - len(diffs)
    if not diffs:
        return None, excluded
    return 100.0 * float(np.mean(diffs)), excluded


@dataclass
class MetricRecord:
    id: str
    fovea_aed: Optional[float] = None
    od_aed: Optional[float] = None
    od_dice: Optional[float] = None
    oc_dice: Optional[float] = None
    vcdr_pred: Optional[float] = None
    vcdr_gt: Optional[float] = None

    @property
    def vcdr_err(self) -> Optional[float]:
        if self.vcdr_pred is None or self.vcdr_gt is None:
            return None
        return 100.0 * abs(self.vcdr_pred - self.vcdr_gt)


def evaluate_sample(sample_id: str, pred_labels=None, gt_labels=None, pred_fovea=None, gt_fovea=None,
                    pred_od=None, gt_od=None, oc_absent: bool = False) -> MetricRecord:
    """Per-sample metrics in whatever common frame the inputs are given (normally the original image)."""
    rec = MetricRecord(sample_id, fovea_aed=aed(pred_fovea, gt_fovea), od_aed=aed(pred_od, gt_od))
    if pred_labels is not None and gt_labels is not None:
        rec.od_dice = dice_pct(pred_labels, gt_labels, "OD")
        if not oc_absent:
            rec.oc_dice = dice_pct(pred_labels, gt_labels, "OC")
            rec.vcdr_pred = vcdr(pred_labels)
            rec.vcdr_gt = vcdr(gt_labels)
    return rec


@dataclass
class Summary:
    mean: Optional[float]
    std: Optional[float]
    n: int
    excluded: int

    def render(self, digits: int = 2) -> str:
        if self.mean is None:
            return "-"
        return f"{self.mean:.{digits}f}±{self.std:.{digits}f}"


def summarize(values: Iterable[Optional[float]]) -> Summary:
    vals = list(values)
    present = np.array([v for v in vals if v is not None], dtype=np.float64)
    if present.size == 0:
        return Summary(None, None, 0, len(vals))
    return Summary(float(present.mean()), float(present.std()), int(present.size), len(vals) - present.size)


def aggregate(records: Sequence[MetricRecord]) -> dict[str, Summary]:
    return {
        "fovea_aed": summarize(r.fovea_aed for r in records),
        "od_aed": summarize(r.od_aed for r in records),
        "od_dice": summarize(r.od_dice for r in records),
        "oc_dice": summarize(r.oc_dice for r in records),
        "vcdr": summarize(r.vcdr_err for r in records),
    }


def records_to_csv(records: Sequence[MetricRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in records:
        writer.writerow([r.id] + ["" if getattr(r, k) is None else repr(getattr(r, k)) for k in CSV_HEADER[1:]])
    return buf.getvalue()


def records_from_csv(text: str) -> list[MetricRecord]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != CSV_HEADER:
        raise ValueError(f"unexpected metrics header {reader.fieldnames}")
    out = []
    for row in reader:
        vals = {k: (float(row[k]) if row[k] != "" else None) for k in CSV_HEADER[1:]}
        out.append(MetricRecord(row["id"], **vals))
    return out


# Column layouts of the published comparison tables.
COARSE_FULL = [("Fovea AED", "fovea_aed"), ("OD AED", "od_aed"), ("OD Dice (%)", "od_dice"),
               ("OC Dice (%)", "oc_dice"), ("vCDR (%)", "vcdr")]
FINE_FULL = [("Fovea AED", "fovea_aed"), ("OD Dice (%)", "od_dice"), ("OC Dice (%)", "oc_dice"),
             ("vCDR (%)", "vcdr")]
COARSE_NO_CUP = [("Fovea AED", "fovea_aed"), ("OD AED", "od_aed"), ("OD Dice (%)", "od_dice")]
FINE_NO_CUP = [("Fovea AED", "fovea_aed"), ("OD Dice (%)", "od_dice")]
LAYOUTS = {
    # within-dataset, with cup annotation (GAMMA, REFUGE)
    "table1": [("Coarse", COARSE_FULL), ("Fine", FINE_FULL)],
    # within-dataset, disc only (PALM)
    "table3": [("Coarse", COARSE_NO_CUP), ("Fine", FINE_NO_CUP)],
    # cross-dataset, single section
    "table5": [("", COARSE_FULL)],
}


def _row_cells(stats: Optional[dict[str, Summary]], columns) -> list[str]:
    if stats is None:
        return ["-"] * len(columns)
    return [stats[key].render(3 if key == "vcdr" else 2) for _, key in columns]


def report(
    sections: dict[str, Sequence[MetricRecord]],
    layout: str = "table1",
    method: str = "ours",
    title: str = "",
    fmt: str = "table",
    reference_rows: Optional[dict[str, dict[str, Sequence[str]]]] = None,
) -> str:
    """Render a Markdown table (``fmt='table'``) or per-sample CSV (``fmt='csv'``).

    ``sections`` maps a section name of the layout ("Coarse", "Fine", or ""
    for the single-section cross-dataset layout) to its records. Metrics
    without any value render as "-". ``reference_rows`` adds pre-formatted
    rows ``{method: {section: cells}}`` above ours.
    """
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}")
    spec = LAYOUTS[layout]
    if fmt == "csv":
        parts = []
        for name, _ in spec:
            if name in sections:
                parts.append(f"# {name or 'all'}\n" + records_to_csv(sections[name]))
        return "\n".join(parts)
    if fmt != "table":
        raise ValueError(f"unknown format {fmt!r}")
    header = ["Method"]
    for name, cols in spec:
        header += [f"{name} {label}".strip() for label, _ in cols]
    lines = []
    if title:
        lines += [f"### {title}", ""]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "|".join(["---"] * len(header)) + "|")
    for ref_name, ref in (reference_rows or {}).items():
        cells = [ref_name]
        for name, cols in spec:
            cells += list(ref.get(name, ["-"] * len(cols)))
        lines.append("| " + " | ".join(cells) + " |")
    cells = [method]
    excluded = []
    for name, cols in spec:
        stats = aggregate(sections[name]) if sections.get(name) else None
        cells += _row_cells(stats, cols)
        if stats is not None:
            for label, key in cols:
                if stats[key].excluded and stats[key].mean is not None:
                    excluded.append(f"{name} {label}".strip() + f": {stats[key].excluded} excluded")
    lines.append("| " + " | ".join(cells) + " |")
    n = max((len(v) for v in sections.values()), default=0)
    lines += ["", f"n = {n} samples; values are mean±std."]
    if excluded:
        lines.append("Absent landmarks/regions: " + "; ".join(excluded) + ".")
    return "\n".join(lines) + "\n"
