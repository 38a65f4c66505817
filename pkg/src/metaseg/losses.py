"""Segmentation and detection losses.

The mask term is the binary Lovász-Softmax (a convex surrogate of the
Jaccard loss), with binary cross-entropy kept as an ablation alternative.
The box term is a unit-threshold smooth-L1 on frame-normalised
``(cx, cy, log w, log h)`` coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Union

import numpy as np

from . import diffcore as dc
from .boxes import Box
from .diffcore import Tensor
from .errors import BoxError, ConfigError, SizeError

PROB_EPS = 1e-7


@dataclass
class LossValue:
    value: Tensor
    components: Dict[str, float] = field(default_factory=dict)

    def __float__(self):
        return float(self.value.data)


def lovasz_grad(sorted_gt) -> np.ndarray:
    """Lovász extension weights for ground truth sorted by decreasing error.

    The prefix sums of the returned weights are the Jaccard losses of the
    growing mispredicted sets.
    """
    gts = np.asarray(sorted_gt, dtype=np.float64)
    if gts.size == 0:
        return np.zeros(0)
    p = gts.sum()
    intersection = p - np.cumsum(gts)
    union = p + np.cumsum(1.0 - gts)
    jaccard = 1.0 - intersection / union
    weights = jaccard.copy()
    weights[1:] = jaccard[1:] - jaccard[:-1]
    return weights


def _lovasz_batch(p: np.ndarray, labels: np.ndarray, classes: str):
    """Per-image losses and their derivative w.r.t. ``p[N, 2, ...]``.

    Sort permutations are held fixed at the evaluation point. Each class
    term reads its own probability channel.
    """
    n = p.shape[0]
    fg = labels.reshape(n, -1).astype(bool)
    probs = p.reshape(n, 2, -1).astype(np.float64)
    target = np.stack([~fg, fg], axis=1)                     # [N, 2, P]
    errors = np.abs(target - probs)
    perm = np.argsort(-errors, axis=2, kind="stable")
    gts = np.take_along_axis(target, perm, axis=2).astype(np.float64)
    tot = gts.sum(axis=2, keepdims=True)
    intersection = tot - np.cumsum(gts, axis=2)
    union = tot + np.cumsum(1.0 - gts, axis=2)
    jaccard = 1.0 - intersection / union
    w = np.diff(jaccard, axis=2, prepend=0.0)
    per_class = (np.take_along_axis(errors, perm, axis=2) * w).sum(axis=2)   # [N, 2]
    if classes == "present":
        use = target.any(axis=2)
    elif classes == "foreground":
        use = np.tile(np.array([False, True]), (n, 1))
    else:
        use = np.ones((n, 2), dtype=bool)
    counted = use.sum(axis=1)
    scale = np.where(use, 1.0 / np.maximum(counted, 1)[:, None], 0.0)        # [N, 2]
    losses = (per_class * scale).sum(axis=1)
    d_err = np.empty_like(w)
    np.put_along_axis(d_err, perm, w, axis=2)
    # error = 1 - p on target pixels and p elsewhere
    d = np.where(target, -d_err, d_err) * scale[:, :, None]
    return losses, d.reshape(p.shape)


def lovasz_softmax(probs: Tensor, gt, classes: str = "present") -> LossValue:
    """Binary Lovász-Softmax averaged over images.

    ``probs`` is ``[2, H, W]`` or a batch ``[N, 2, H, W]`` of per-pixel class
    probabilities (channel 1 = foreground); ``gt`` is the matching binary mask.
    ``classes`` selects which class terms are averaged: ``present`` (classes
    that occur in the mask), ``all`` or ``foreground``.
    """
    if classes not in ("present", "all", "foreground"):
        raise ConfigError(f"unknown Lovász class selection {classes!r}")
    gt = np.asarray(gt)
    single = probs.ndim == 3
    p = probs.data[None] if single else probs.data
    labels = gt[None] if single else gt
    if p.ndim != 4 or p.shape[1] != 2 or labels.shape != (p.shape[0],) + p.shape[2:]:
        raise SizeError(f"lovasz_softmax: probs {probs.shape} vs gt {gt.shape}")
    n = p.shape[0]
    losses, d = _lovasz_batch(p, labels, classes)
    d /= n

    def vjp(g):
        gp = (g * d).astype(probs.dtype)
        return (gp[0] if single else gp,)
    out = dc.make_op(np.asarray(losses.mean(), dtype=probs.dtype), (probs,), vjp, "lovasz_softmax")
    return LossValue(out, {"mask": float(out.data)})


def lovasz_value(probs: np.ndarray, gt, classes: str = "present") -> float:
    """Plain-number Lovász-Softmax for ``probs[2, ...]`` (no graph)."""
    probs = np.asarray(probs, dtype=np.float64)
    return float(lovasz_values(probs.reshape(1, 2, -1), np.asarray(gt).reshape(1, -1), classes)[0])


def lovasz_values(probs: np.ndarray, gt, classes: str = "present") -> np.ndarray:
    """Per-image Lovász-Softmax values for a batch ``probs[N, 2, ...]`` (no graph)."""
    probs = np.asarray(probs, dtype=np.float64)
    gt = np.asarray(gt)
    if probs.ndim < 2 or probs.shape[1] != 2 or gt.shape != (probs.shape[0],) + probs.shape[2:]:
        raise SizeError(f"lovasz_values: probs {probs.shape} vs gt {gt.shape}")
    return _lovasz_batch(probs, gt, classes)[0]


def jaccard_extension_oracle(errors, gt, c: int, step: float = 1e-4) -> float:
    """Midpoint-rule integral of the Jaccard set loss over error thresholds.

    Integrates ``Delta_J({i : errors_i >= t})`` for ``t`` on the midpoints of a
    uniform grid of ``step`` over ``[0, 1]``. The set loss is evaluated
    directly on sets; grid points sharing the same level set are counted in
    one go, which gives exactly the brute-force grid sum.
    """
    e = np.asarray(errors, dtype=np.float64)
    target = np.asarray(gt) == c
    if e.size == 0:
        return 0.0
    n_grid = int(round(1.0 / step))
    levels = np.unique(e)[::-1]

    def grid_points_below(v):
        # number of midpoints (j + 0.5) * step that are <= v
        return int(np.clip(np.floor(v / step - 0.5) + 1, 0, n_grid))

    total = 0.0
    for k, v in enumerate(levels):
        upper = grid_points_below(v)
        lower = grid_points_below(levels[k + 1]) if k + 1 < len(levels) else 0
        count = upper - lower
        if count <= 0:
            continue
        mispredicted = e >= v
        union = np.count_nonzero(target | mispredicted)
        kept = np.count_nonzero(target & ~mispredicted)
        total += count * (1.0 - kept / union if union else 0.0)
    return total * step


def jaccard_extension_bruteforce(errors, gt, c: int, step: float = 1e-4) -> float:
    """Same integral evaluated point by point on the grid (slow; for cross-checks)."""
    e = np.asarray(errors, dtype=np.float64)
    target = np.asarray(gt) == c
    t = (np.arange(int(round(1.0 / step))) + 0.5) * step
    mis = e[None, :] >= t[:, None]
    union = (target[None] | mis).sum(axis=1)
    kept = (target[None] & ~mis).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        delta = np.where(union > 0, 1.0 - kept / np.maximum(union, 1), 0.0)
    return float(delta.sum() * step)


def bce(probs: Tensor, gt) -> LossValue:
    """Mean binary cross-entropy of foreground probabilities against a binary mask."""
    y = np.asarray(gt, dtype=probs.dtype)
    if y.shape != probs.shape:
        raise SizeError(f"bce: probs {probs.shape} vs gt {y.shape}")
    p = dc.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    ll = dc.add(dc.mul(dc.log(p), y), dc.mul(dc.log(dc.sub(1.0, p)), 1.0 - y))
    out = dc.neg(dc.mean(ll))
    return LossValue(out, {"mask": float(out.data)})


def box_loss(pred: Union[Tensor, Box], gt, frame_size=None) -> LossValue:
    """Smooth-L1 summed over the four normalised box coordinates.

    ``pred`` is a Tensor of normalised parameters with shape ``[4]`` or
    ``[R, 4]`` (rows are averaged), or a Box together with ``frame_size``.
    ``gt`` is a Box (needs ``frame_size``) or an array of normalised params.
    """
    if isinstance(gt, Box):
        if frame_size is None:
            raise BoxError("box_loss needs frame_size to normalise a Box")
        if gt.w < 1.0 or gt.h < 1.0:
            raise BoxError(f"degenerate ground-truth box {gt.as_tuple()}")
        gt = gt.normalized(*frame_size)
    if isinstance(pred, Box):
        pred = Tensor(pred.normalized(*frame_size))
    target = np.asarray(gt, dtype=pred.dtype)
    if pred.shape[-1] != 4 or np.broadcast_shapes(pred.shape, target.shape) != pred.shape:
        raise SizeError(f"box_loss: pred {pred.shape} vs gt {target.shape}")
    per_box = dc.sum(dc.smooth_l1(dc.sub(pred, target)), axis=-1)
    out = per_box if pred.ndim == 1 else dc.mean(per_box)
    return LossValue(out, {"box": float(out.data)})


@dataclass
class SegPrediction:
    """Graph-attached model outputs needed by ``seg_loss``."""

    mask_probs: Tensor                  # [N, 2, win, win]
    box_params: Optional[Tensor] = None  # [R, 4] normalised refined boxes


@dataclass
class SegTarget:
    mask_crops: np.ndarray               # [N, win, win] binary
    box_params: Optional[np.ndarray] = None  # [R, 4]


def mask_loss(probs: Tensor, gt, kind: str = "lovasz", classes: str = "present") -> LossValue:
    if kind == "lovasz":
        return lovasz_softmax(probs, gt, classes)
    if kind == "bce":
        return bce(_take_channel(probs, 1), gt)
    raise ConfigError(f"unknown mask loss {kind!r}")


def _take_channel(probs: Tensor, ch: int) -> Tensor:
    axis = 1 if probs.ndim == 4 else 0
    data = np.take(probs.data, ch, axis=axis)

    def vjp(g):
        out = np.zeros_like(probs.data)
        if axis == 1:
            out[:, ch] = g
        else:
            out[ch] = g
        return (out,)
    return dc.make_op(data, (probs,), vjp, "take_channel")


def seg_loss(prediction: SegPrediction, target: SegTarget, mask_kind: str = "lovasz",
             classes: str = "present") -> LossValue:
    """``L_box + L_mask``; the box term is omitted when no box rows are given."""
    lm = mask_loss(prediction.mask_probs, target.mask_crops, mask_kind, classes)
    if prediction.box_params is None or target.box_params is None or prediction.box_params.shape[0] == 0:
        return LossValue(lm.value, {"mask": lm.components["mask"], "box": 0.0})
    lb = box_loss(prediction.box_params, target.box_params)
    total = dc.add(lb.value, lm.value)
    return LossValue(total, {"box": lb.components["box"], "mask": lm.components["mask"]})
