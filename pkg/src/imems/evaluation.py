"""Pixel-level metrics, comparison tables and overlay rendering."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .embedding import LabelRangeError, ShapeError
from .training import METHODS

# normal, tumorous, connective, lymphoid, non-tissue
DEFAULT_PALETTE = ["#00c800", "#e60000", "#ffff00", "#0050ff", "#ff78c8"]


class EmptyMatrixError(ValueError):
    pass


class TableError(ValueError):
    pass


def new_confusion(num_labels: int) -> np.ndarray:
    return np.zeros((num_labels, num_labels), dtype=np.int64)


def accumulate(gt: np.ndarray, pred: np.ndarray, cm: np.ndarray) -> np.ndarray:
    """Add one image to a confusion matrix (rows = ground truth, cols = prediction)."""
    gt, pred = np.asarray(gt), np.asarray(pred)
    if gt.shape != pred.shape:
        raise ShapeError(f"ground truth {gt.shape} and prediction {pred.shape} differ")
    k = cm.shape[0]
    for name, arr in (("ground truth", gt), ("prediction", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise LabelRangeError(f"{name} labels must lie in [0, {k})")
    counts = np.bincount(gt.ravel().astype(np.int64) * k + pred.ravel().astype(np.int64), minlength=k * k)
    return cm + counts.reshape(k, k)


@dataclass
class MetricsReport:
    accuracy: float
    per_class_f: list[float]
    average_f: float
    absent: list[bool] = field(default_factory=list)


def compute_metrics(cm: np.ndarray) -> MetricsReport:
    """Accuracy and one-vs-rest F-scores from a pooled confusion matrix.

    A class with no ground-truth and no predicted pixels scores F = 1 and
    is flagged in ``absent``.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise EmptyMatrixError("confusion matrix is empty")
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    absent = denom == 0
    f = np.where(absent, 1.0, 2 * tp / np.where(absent, 1, denom))
    return MetricsReport(
        accuracy=float(tp.sum() / total),
        per_class_f=[float(v) for v in f],
        average_f=float(f.mean()),
        absent=[bool(a) for a in absent],
    )


def evaluate_maps(gts: Sequence[np.ndarray], preds: Sequence[np.ndarray], num_labels: int) -> MetricsReport:
    cm = new_confusion(num_labels)
    for g, p in zip(gts, preds):
        cm = accumulate(g, p, cm)
    return compute_metrics(cm)


def mean_report(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Equal-weight mean over folds."""
    if not reports:
        raise TableError("no reports to average")
    ks = {len(r.per_class_f) for r in reports}
    if len(ks) != 1:
        raise TableError(f"reports disagree on the number of labels: {sorted(ks)}")
    per_class = np.mean([r.per_class_f for r in reports], axis=0)
    return MetricsReport(
        accuracy=float(np.mean([r.accuracy for r in reports])),
        per_class_f=[float(v) for v in per_class],
        average_f=float(np.mean([r.average_f for r in reports])),
        absent=[any(r.absent[i] for r in reports) for i in range(len(per_class))],
    )


# -- tables -------------------------------------------------------------------------


def table_header(label_names: Sequence[str]) -> list[str]:
    return ["method"] + [f"f_{n}" for n in label_names] + ["avg_f", "accuracy"]


def report_row(method: str, report: MetricsReport) -> list:
    return [method] + list(report.per_class_f) + [report.average_f, report.accuracy]


def build_table(
    reports: Mapping[str, MetricsReport | Sequence[MetricsReport]],
    label_names: Sequence[str] | None = None,
) -> list[list]:
    """Rows in canonical method order; a list of fold reports is averaged.

    The first row is the header.
    """
    if not reports:
        raise TableError("need at least one report")
    flat = {m: (r if isinstance(r, MetricsReport) else mean_report(r)) for m, r in reports.items()}
    ks = {len(r.per_class_f) for r in flat.values()}
    if len(ks) != 1:
        raise TableError(f"inconsistent number of labels across methods: {sorted(ks)}")
    k = ks.pop()
    if label_names is None:
        label_names = [str(i) for i in range(k)]
    if len(label_names) != k:
        raise TableError(f"{len(label_names)} label names for K={k}")
    order = {m: i for i, m in enumerate(METHODS)}
    methods = sorted(flat, key=lambda m: (order.get(m, len(order)), m))
    return [table_header(label_names)] + [report_row(m, flat[m]) for m in methods]


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def write_csv(path: str | Path, rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


# -- overlays -------------------------------------------------------------------


def parse_palette(colors: Sequence[str]) -> np.ndarray:
    out = []
    for c in colors:
        c = c.lstrip("#")
        if len(c) != 6:
            raise ValueError(f"palette entry '#{c}' is not a #rrggbb colour")
        out.append([int(c[i : i + 2], 16) for i in (0, 2, 4)])
    return np.asarray(out, dtype=np.float64)


def load_palette(path: str | Path) -> list[str]:
    colors = json.loads(Path(path).read_text())
    if not isinstance(colors, list) or not all(isinstance(c, str) for c in colors):
        raise ValueError(f"{path}: palette must be a JSON array of hex strings")
    return colors


def default_palette(num_labels: int) -> list[str]:
    if num_labels == 2:
        # two-class sets: foreground red, background green
        return [DEFAULT_PALETTE[1], DEFAULT_PALETTE[0]]
    if num_labels <= len(DEFAULT_PALETTE):
        return DEFAULT_PALETTE[:num_labels]
    from matplotlib import colormaps
    from matplotlib.colors import to_hex

    extra = [to_hex(c) for c in colormaps["tab20"].colors]
    extra = [c for c in extra if c not in DEFAULT_PALETTE]
    if num_labels > len(DEFAULT_PALETTE) + len(extra):
        raise ValueError(f"no default palette for K={num_labels}; supply one")
    return DEFAULT_PALETTE + extra[: num_labels - len(DEFAULT_PALETTE)]


def render_overlay(
    image: np.ndarray,
    pred: np.ndarray,
    palette: Sequence[str] | None = None,
    alpha: float = 0.5,
    num_labels: int | None = None,
) -> np.ndarray:
    """Alpha-blend each pixel's label colour over the image."""
    image = np.asarray(image)
    pred = np.asarray(pred)
    if image.shape[:2] != pred.shape:
        raise ShapeError(f"image {image.shape[:2]} and label map {pred.shape} differ")
    if num_labels is None:
        num_labels = len(palette) if palette is not None else max(int(pred.max()) + 1 if pred.size else 1, 2)
    if palette is None:
        palette = default_palette(num_labels)
    if len(palette) != num_labels:
        raise ValueError(f"palette has {len(palette)} colours for K={num_labels}")
    if pred.size and pred.max() >= num_labels:
        raise LabelRangeError(f"labels reach {int(pred.max())} but K={num_labels}")
    colors = parse_palette(palette)
    blended = (1 - alpha) * image.astype(np.float64) + alpha * colors[pred]
    return np.clip(np.rint(blended), 0, 255).astype(np.uint8)
