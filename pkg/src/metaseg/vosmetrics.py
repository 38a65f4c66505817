"""Region similarity J, boundary accuracy F, their decay/mean statistics and FPS.

Frame 0 of every object (its given annotation) is never scored. All
reported percentages use the 0-100 scale.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import EvalError, SizeError


def _pair(a, b) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise SizeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def iou(a, b) -> float:
    """Jaccard index; two empty masks score 1."""
    a, b = _pair(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def j_stats(per_frame: Sequence[float]) -> Tuple[float, float]:
    """Mean and decay (first quarter mean minus last quarter mean)."""
    vals = np.asarray(per_frame, dtype=np.float64)
    if vals.size == 0:
        raise ValueError("j_stats needs at least one frame")
    if vals.size < 4:
        return float(vals.mean()), float(vals[0] - vals[-1])
    bins = np.array_split(vals, 4)
    return float(vals.mean()), float(bins[0].mean() - bins[-1].mean())


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-connected background neighbour (frame edge counts)."""
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(2, 1),
                                    border_value=0)
    return mask & ~eroded


def default_radius(shape) -> int:
    return int(math.ceil(0.008 * math.hypot(*shape)))


def _disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius * radius


def f_boundary(pred, gt, radius: Optional[int] = None) -> float:
    """Boundary F-measure with tolerance ``radius`` (default ceil(0.008 * diagonal))."""
    pred, gt = _pair(pred, gt)
    radius = default_radius(pred.shape) if radius is None else int(radius)
    bp, bg = boundary(pred), boundary(gt)
    n_p, n_g = np.count_nonzero(bp), np.count_nonzero(bg)
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    disk = _disk(radius)
    gt_zone = ndimage.binary_dilation(bg, structure=disk)
    pred_zone = ndimage.binary_dilation(bp, structure=disk)
    precision = np.count_nonzero(bp & gt_zone) / n_p
    recall = np.count_nonzero(bg & pred_zone) / n_g
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class ObjectScore:
    sequence: str
    object: int
    j_frames: List[float]
    f_frames: List[float]
    j_mean: float
    j_decay: float
    f_mean: float

    @property
    def jf(self) -> float:
        return (self.j_mean + self.f_mean) / 2.0


@dataclass
class EvalReport:
    objects: List[ObjectScore]
    fps: float = float("nan")            # frames per second including fine-tuning
    fps_forward: float = float("nan")    # frames per second of per-frame prediction only

    @property
    def j_mean(self) -> float:
        return float(np.mean([o.j_mean for o in self.objects]))

    @property
    def j_decay(self) -> float:
        return float(np.mean([o.j_decay for o in self.objects]))

    @property
    def f_mean(self) -> float:
        return float(np.mean([o.f_mean for o in self.objects]))

    @property
    def jf(self) -> float:
        return (self.j_mean + self.f_mean) / 2.0

    def sequence_means(self) -> Dict[str, float]:
        out: Dict[str, List[float]] = {}
        for o in self.objects:
            out.setdefault(o.sequence, []).append(o.jf)
        return {k: float(np.mean(v)) for k, v in out.items()}


@dataclass
class PredictionSet:
    """Predicted label maps per sequence plus timing, as consumed by ``evaluate``."""

    labels: Dict[str, List[Optional[np.ndarray]]]
    seconds: Dict[str, float] = field(default_factory=dict)           # all model time
    forward_seconds: Dict[str, float] = field(default_factory=dict)   # per-frame prediction only


def _gather(preds) -> PredictionSet:
    if isinstance(preds, PredictionSet):
        return preds
    results = list(preds)
    return PredictionSet({r.seq_id: r.labels for r in results},
                         {r.seq_id: r.seconds for r in results},
                         {r.seq_id: r.forward_seconds for r in results})


def evaluate(preds, gt) -> EvalReport:
    """Score predicted label maps against a TaskSet's sequences.

    ``preds`` is a PredictionSet or an iterable of sequence results with
    ``seq_id``, ``labels``, ``seconds`` and ``forward_seconds``. Each object
    is scored on the frames after the one where its annotation is given.
    """
    ps = _gather(preds)
    scores = []
    n_frames = 0
    for seq in gt.sequences:
        if seq.id not in ps.labels:
            raise EvalError(f"missing predictions for sequence {seq.id}")
        pred_labels = ps.labels[seq.id]
        n_frames += len(seq.frames)
        for k in seq.object_ids:
            first = next(i for i, lab in enumerate(seq.labels) if lab is not None and (lab == k).any())
            js, fs = [], []
            for i in range(first + 1, len(seq.frames)):
                if seq.labels[i] is None:
                    continue
                if i >= len(pred_labels) or pred_labels[i] is None:
                    raise EvalError(f"missing prediction: sequence {seq.id}, frame {i}, object {k}")
                p, g = pred_labels[i] == k, seq.labels[i] == k
                js.append(iou(p, g))
                fs.append(f_boundary(p, g))
            if not js:
                continue
            jm, jd = j_stats(js)
            scores.append(ObjectScore(seq.id, k, [100 * v for v in js], [100 * v for v in fs],
                                      100 * jm, 100 * jd, 100 * float(np.mean(fs))))
    total = sum(ps.seconds.get(s.id, 0.0) for s in gt.sequences)
    fwd = sum(ps.forward_seconds.get(s.id, 0.0) for s in gt.sequences)
    fps = n_frames / total if total > 0 else float("nan")
    fps_fwd = n_frames / fwd if fwd > 0 else float("nan")
    return EvalReport(scores, fps, fps_fwd)


CSV_COLUMNS = ("sequence", "object", "J_mean", "J_decay", "F_mean", "JF", "FPS", "FPS_forward")


def _fmt(v: float) -> str:
    return "nan" if not math.isfinite(v) else f"{v:.6f}"


def report_rows(report: EvalReport) -> List[List[str]]:
    rows = [[o.sequence, str(o.object), _fmt(o.j_mean), _fmt(o.j_decay), _fmt(o.f_mean),
             _fmt(o.jf), "", ""] for o in report.objects]
    if report.objects:
        rows.append(["ALL", "", _fmt(report.j_mean), _fmt(report.j_decay), _fmt(report.f_mean),
                     _fmt(report.jf), _fmt(report.fps), _fmt(report.fps_forward)])
    return rows


def write_report_csv(report: EvalReport, path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        w.writerows(report_rows(report))
