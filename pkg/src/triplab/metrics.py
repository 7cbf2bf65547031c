"""Average precision at instrument, pair and triplet granularity."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from triplab.vocab import ClassIndex, Dataset, ValidityMask, Vocabulary

REPORT_SCHEMA_VERSION = 1
GRANULARITIES = ("I", "IV", "IT", "IVT")
UNDEFINED = float("nan")


@dataclass(frozen=True)
class PrCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    def __iter__(self):
        return iter(zip(self.thresholds, self.precision, self.recall))


def pr_curve(scores, labels) -> PrCurve:
    """Precision/recall at every distinct score, highest threshold first.

    Frames sharing a score enter the ranking together, so the curve (and any
    AP derived from it) does not depend on input order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and of equal length")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order].astype(np.float64)
    tp = np.cumsum(y)
    fp = np.cumsum(1.0 - y)
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1] if len(s) else np.array([], dtype=int)
    npos = y.sum()
    tp, fp = tp[ends], fp[ends]
    precision = tp / np.maximum(tp + fp, 1)
    recall = tp / npos if npos > 0 else np.zeros_like(tp)
    return PrCurve(s[ends], precision, recall)


def average_precision(scores, labels) -> float:
    """Step-integrated area under the PR curve; NaN when there is no positive."""
    labels = np.asarray(labels)
    scores = np.asarray(scores)
    if labels.shape != scores.shape:
        raise ValueError(f"length mismatch: {scores.shape} vs {labels.shape}")
    if not np.any(labels == 1):
        return UNDEFINED
    curve = pr_curve(scores, labels)
    dr = np.diff(np.r_[0.0, curve.recall])
    return float(np.sum(dr * curve.precision))


def component_scores(volume: np.ndarray, granularity: str) -> np.ndarray:
    """Collapse a probability volume (``... x m x n x p``) by max projection.

    ``I`` -> ``... x m``, ``IV`` -> ``... x m x n``, ``IT`` -> ``... x m x p``,
    ``IVT`` -> unchanged.
    """
    volume = np.asarray(volume)
    if granularity == "IVT":
        return volume
    axes = {"I": (-2, -1), "IV": (-1,), "IT": (-2,)}[granularity]
    return volume.max(axis=axes)


def scatter_to_volume(class_scores: np.ndarray, classes: ClassIndex) -> np.ndarray:
    """Place N x C per-class scores into N x m x n x p (zeros off the class list)."""
    class_scores = np.asarray(class_scores)
    n = class_scores.shape[0]
    flat = np.zeros((n, int(np.prod(classes.vocab.shape))), dtype=class_scores.dtype)
    flat[:, classes.flat_indices()] = class_scores
    return flat.reshape(n, *classes.vocab.shape)


def _label_names(vocab: Vocabulary, granularity: str) -> list[str]:
    I, V, T = vocab.axes
    if granularity == "I":
        return list(I)
    if granularity == "IV":
        return [f"{i}|{v}" for i in I for v in V]
    if granularity == "IT":
        return [f"{i}|{t}" for i in I for t in T]
    return [f"{i}|{v}|{t}" for i in I for v in V for t in T]


@dataclass
class ApReport:
    ap_i: list[float]
    mean_ap_i: float
    ap_iv: float
    ap_it: float
    ap_ivt: float
    per_class: dict[str, dict[str, float]]
    n_frames: int
    instruments: list[str]
    metadata: dict = field(default_factory=dict)

    def summary(self) -> dict[str, float]:
        return {"AP_I": self.mean_ap_i, "AP_IV": self.ap_iv, "AP_IT": self.ap_it, "AP_IVT": self.ap_ivt}

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "n_frames": self.n_frames,
            "instruments": self.instruments,
            "ap_i": [_json_num(x) for x in self.ap_i],
            "mean_ap_i": _json_num(self.mean_ap_i),
            "ap_iv": _json_num(self.ap_iv),
            "ap_it": _json_num(self.ap_it),
            "ap_ivt": _json_num(self.ap_ivt),
            "per_class": {g: {k: _json_num(v) for k, v in table.items()} for g, table in self.per_class.items()},
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_csv(self, label: str = "model") -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["Model", *self.instruments, "Mean AP_I", "AP_IV", "AP_IT", "AP_IVT", "Mean"])
        trip = [self.ap_iv, self.ap_it, self.ap_ivt]
        writer.writerow([label, *(_fmt(x) for x in self.ap_i), _fmt(self.mean_ap_i),
                         *(_fmt(x) for x in trip), _fmt(_nanmean(trip))])
        return buf.getvalue()


def _json_num(x):
    return None if x is None or math.isnan(x) else float(x)


def _fmt(x) -> str:
    return "" if math.isnan(x) else f"{100 * x:.2f}"


def _nanmean(xs) -> float:
    xs = [x for x in xs if not math.isnan(x)]
    return float(np.mean(xs)) if xs else UNDEFINED


def per_class_ap(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """AP for each column of N x K arrays (NaN where a column has no positive)."""
    return np.array([average_precision(scores[:, k], labels[:, k]) for k in range(scores.shape[1])])


def evaluate(predictions: np.ndarray, truth: Dataset, classes: ClassIndex | None = None,
             instrument_scores: np.ndarray | None = None) -> ApReport:
    """Score per-frame predictions against ground truth.

    ``predictions`` is either an N x m x n x p probability volume or an
    N x C class-score matrix (then ``classes`` maps columns to cells). When
    ``instrument_scores`` (N x m) is given, AP_I uses it instead of the
    volume projection. Classes with no positive frame are left out of the
    means.
    """
    preds = np.asarray(predictions, dtype=np.float64)
    vocab = truth.vocab
    if preds.ndim == 2:
        if classes is None:
            raise ValueError("class-score predictions need a ClassIndex")
        preds = scatter_to_volume(preds, classes)
    if preds.shape[0] != len(truth):
        raise ValueError(f"{preds.shape[0]} prediction frames for {len(truth)} annotated frames")
    if preds.shape[1:] != vocab.shape:
        raise ValueError(f"prediction volume {preds.shape[1:]} does not match vocabulary {vocab.shape}")
    label_vol = truth.multi_hot()["volume"]
    n = len(truth)
    results: dict[str, np.ndarray] = {}
    per_class: dict[str, dict[str, float]] = {}
    for g in GRANULARITIES:
        if g == "I" and instrument_scores is not None:
            s = np.asarray(instrument_scores, dtype=np.float64)
        else:
            s = component_scores(preds, g).reshape(n, -1)
        y = component_scores(label_vol, g).reshape(n, -1)
        aps = per_class_ap(s, y) if n else np.full(y.shape[1], UNDEFINED)
        results[g] = aps
        names = _label_names(vocab, g)
        per_class[g] = {name: float(a) for name, a in zip(names, aps) if not math.isnan(a)}
    return ApReport(
        ap_i=[float(a) for a in results["I"]],
        mean_ap_i=_nanmean(results["I"]),
        ap_iv=_nanmean(results["IV"]),
        ap_it=_nanmean(results["IT"]),
        ap_ivt=_nanmean(results["IVT"]),
        per_class=per_class,
        n_frames=n,
        instruments=list(vocab.instruments),
        metadata={
            "ties": "grouped: frames with equal scores enter the PR curve together",
            "zero_positive_classes": "excluded from means",
            "projection": "max over collapsed axes",
            "instrument_source": "branch" if instrument_scores is not None else "volume",
        },
    )


def decode_triplets(volume: np.ndarray, threshold: float = 0.5,
                    mask: ValidityMask | np.ndarray | None = None) -> set[tuple[int, int, int]]:
    """Cells with probability above ``threshold`` (and inside the mask)."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    vol = np.asarray(volume)
    hit = vol > threshold
    if mask is not None:
        hit &= mask.grid if isinstance(mask, ValidityMask) else np.asarray(mask, dtype=bool)
    return {tuple(int(k) for k in idx) for idx in np.argwhere(hit)}


def box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def match_boxes(pred, gt, iou_thresh: float = 0.5) -> int:
    """Greedy one-to-one matching; returns the number of matched ground truths.

    ``pred`` holds ``(instrument, box, score)``, ``gt`` holds
    ``(instrument, box)``. Predictions are visited by descending score and
    take the unmatched same-instrument ground truth with the highest IoU.
    """
    used = [False] * len(gt)
    hits = 0
    for inst, box, _ in sorted(pred, key=lambda r: -r[2]):
        best, best_iou = -1, iou_thresh
        for k, (g_inst, g_box) in enumerate(gt):
            if used[k] or g_inst != inst:
                continue
            iou = box_iou(box, g_box)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = k, iou
        if best >= 0:
            used[best] = True
            hits += 1
    return hits


def localization_score(pred, gt, iou_thresh: float = 0.5) -> float:
    """Fraction of one frame's ground-truth instances matched at ``iou_thresh``.

    NaN when the frame has no ground-truth box.
    """
    if not gt:
        return UNDEFINED
    return match_boxes(pred, gt, iou_thresh) / len(gt)


def dataset_localization_score(preds, gts, iou_thresh: float = 0.5) -> float:
    """Pooled matched fraction over aligned per-frame box lists."""
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth frame counts differ")
    total = sum(len(g) for g in gts)
    if total == 0:
        return UNDEFINED
    return sum(match_boxes(p, g, iou_thresh) for p, g in zip(preds, gts)) / total
