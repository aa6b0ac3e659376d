"""DIBCO-style binarisation metrics.

Binary images hold 0 for text (the positive class) and 1 for background.

Pinned conventions:

* PSNR uses a peak of 1; identical images return ``math.inf``.
* Precision with no predicted text is 1 when the ground truth has no text
  either and 0 otherwise; recall with no ground-truth text mirrors this.
* Pseudo-recall weights are the ground-truth skeleton (skimage, 8-connected).
  Pseudo-precision weights are 1 except on the one-pixel ring that a 3x3
  dilation adds around ground-truth text, where they are 0.5.
* DRD uses the 5x5 reciprocal-Euclidean-distance matrix (centre 0, normalised
  to sum 1). Neighbours outside the image are ignored. NUBN counts 8x8 ground
  truth blocks (including partial edge blocks) that are not uniform. With
  NUBN = 0, DRD is 0 without flipped pixels and ``math.inf`` otherwise.
"""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.ndimage import binary_dilation
from skimage.morphology import skeletonize

TEXT = 0
DRD_SIZE = 5
NUBN_BLOCK = 8
BORDER_WEIGHT = 0.5


def _check(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    for name, a in (("prediction", pred), ("ground truth", gt)):
        if not np.isin(a, (0, 1)).all():
            raise ValueError(f"{name} must be binary (0 = text, 1 = background)")
    return pred, gt


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    pred, gt = _check(pred, gt)
    pt, gtt = pred == TEXT, gt == TEXT
    tp = int(np.count_nonzero(pt & gtt))
    fp = int(np.count_nonzero(pt & ~gtt))
    fn = int(np.count_nonzero(~pt & gtt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = _check(pred, gt)
    mse = np.count_nonzero(pred != gt) / pred.size
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def _ratio(num: float, den: float, other_empty: bool) -> float:
    if den > 0:
        return num / den
    return 1.0 if other_empty else 0.0


def _harmonic(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 100.0 * 2.0 * p * r / (p + r)


def f_measure(pred: np.ndarray, gt: np.ndarray) -> float:
    c = confusion(pred, gt)
    precision = _ratio(c.tp, c.tp + c.fp, other_empty=c.tp + c.fn == 0)
    recall = _ratio(c.tp, c.tp + c.fn, other_empty=c.tp + c.fp == 0)
    return _harmonic(precision, recall)


@dataclass
class PseudoWeights:
    recall: np.ndarray
    precision: np.ndarray


def pseudo_weights(gt: np.ndarray) -> PseudoWeights:
    text = np.asarray(gt) == TEXT
    skel = skeletonize(text).astype(np.float64)
    ring = binary_dilation(text, structure=np.ones((3, 3), dtype=bool)) & ~text
    precision = np.where(ring, BORDER_WEIGHT, 1.0)
    return PseudoWeights(skel, precision)


def pseudo_f_measure(pred: np.ndarray, gt: np.ndarray, gt_weights: Optional[PseudoWeights] = None) -> float:
    pred, gt = _check(pred, gt)
    w = pseudo_weights(gt) if gt_weights is None else gt_weights
    if w.recall.shape != gt.shape or w.precision.shape != gt.shape:
        raise ValueError("pseudo-F weights must match the image shape")
    pt, gtt = pred == TEXT, gt == TEXT
    r_den = float(w.recall[gtt].sum())
    p_den = float(w.precision[pt].sum())
    recall = _ratio(float(w.recall[pt & gtt].sum()), r_den, other_empty=not pt.any())
    precision = _ratio(float(w.precision[pt & gtt].sum()), p_den, other_empty=not gtt.any())
    return _harmonic(precision, recall)


def drd_weights(size: int = DRD_SIZE) -> np.ndarray:
    c = size // 2
    yy, xx = np.mgrid[0:size, 0:size] - c
    dist = np.hypot(yy, xx)
    w = np.divide(1.0, dist, out=np.zeros_like(dist), where=dist > 0)
    return w / w.sum()


def nubn(gt: np.ndarray, block: int = NUBN_BLOCK) -> int:
    gt = np.asarray(gt)
    count = 0
    for y in range(0, gt.shape[0], block):
        for x in range(0, gt.shape[1], block):
            b = gt[y : y + block, x : x + block]
            if b.min() != b.max():
                count += 1
    return count


def drd(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = _check(pred, gt)
    flipped = pred != gt
    n = nubn(gt)
    if not flipped.any():
        return 0.0
    if n == 0:
        return math.inf
    w = drd_weights()
    r = DRD_SIZE // 2
    padded = np.pad(gt.astype(np.int8), r, constant_values=-1)
    ys, xs = np.nonzero(flipped)
    values = pred[ys, xs].astype(np.int8)
    total = 0.0
    for dy in range(DRD_SIZE):
        for dx in range(DRD_SIZE):
            if w[dy, dx] == 0:
                continue
            neigh = padded[ys + dy, xs + dx]
            inside = neigh >= 0
            total += w[dy, dx] * float(np.count_nonzero(inside & (neigh != values)))
    return total / n


@dataclass(frozen=True)
class MetricsReport:
    psnr: float
    fm: float
    fps: float
    drd: float

    FIELDS = ("psnr", "fm", "fps", "drd")

    def as_row(self) -> list[str]:
        return [_fmt(v) for v in astuple(self)]


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.4f}"


def evaluate_pair(pred: np.ndarray, gt: np.ndarray) -> MetricsReport:
    return MetricsReport(psnr(pred, gt), f_measure(pred, gt), pseudo_f_measure(pred, gt), drd(pred, gt))


def mean_report(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Unweighted per-image mean; an infinite PSNR or DRD propagates."""
    if not reports:
        raise ValueError("cannot average an empty set of reports")
    cols = zip(*(astuple(r) for r in reports))
    return MetricsReport(*(math.fsum(c) / len(reports) if not any(map(math.isinf, c)) else math.inf
                           for c in map(tuple, cols)))


def csv_lines(report: MetricsReport) -> list[str]:
    return [",".join(f.name for f in fields(report)), ",".join(report.as_row())]


TABLE_HEADER = ("Method", "Model", "PSNR", "FM", "Fps", "DRD")


def comparison_rows(rows: Iterable[tuple[str, str, MetricsReport]]) -> list[tuple[str, ...]]:
    return [(method, model, *r.as_row()) for method, model, r in rows]


def format_table(rows: Iterable[tuple[str, str, MetricsReport]], fmt: str = "md") -> str:
    body = comparison_rows(rows)
    if fmt == "csv":
        return "\n".join(",".join(r) for r in [TABLE_HEADER, *body]) + "\n"
    if fmt != "md":
        raise ValueError(f"unknown table format {fmt!r}")
    table = [TABLE_HEADER, *body]
    widths = [max(len(r[i]) for r in table) for i in range(len(TABLE_HEADER))]

    def line(r):
        cells = [c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))]
        return "| " + " | ".join(cells) + " |"

    sep = "|" + "|".join("-" * (w + 1) + (":" if i >= 2 else "-") for i, w in enumerate(widths)) + "|"
    return "\n".join([line(TABLE_HEADER), sep, *map(line, body)]) + "\n"
