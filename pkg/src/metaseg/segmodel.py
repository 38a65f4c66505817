"""Compact detect-then-segment network.

A shared convolutional backbone (conv, group norm, relu, 2x2 max pool per
block) feeds two heads:

* the box head crops pooled features around each box prior, flattens them
  and regresses deltas relative to the prior through two fully-connected
  layers;
* the mask head crops a ``mask_window``-sized grid inside the chosen box
  from the image and the early backbone levels, runs three 3x3 conv blocks
  and a 1x1 conv to two class logits, and applies a softmax.

Parameters are grouped into neurons: one output channel (or fc row, or
norm channel) owns one weight block and one bias scalar.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import diffcore as dc
from .boxes import Box, jitter_boxes
from .diffcore import Tensor
from .errors import BoxError, ConfigError, StructureError
from .losses import LossValue, SegPrediction, SegTarget, seg_loss

LAYER_KINDS = ("conv", "fc", "norm")


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 3
    backbone: Tuple[int, ...] = (16, 32, 32, 64)
    groups: int = 8
    gn_eps: float = 1e-5
    box_levels: Tuple[int, ...] = (2, 3)
    box_window: int = 4
    box_context: float = 1.5
    box_hidden: int = 64
    box_out_std: float = 1e-3       # regressor starts near the identity refinement
    mask_window: int = 28
    mask_levels: Tuple[int, ...] = (0, 1)
    mask_use_image: bool = True
    mask_channels: Tuple[int, ...] = (32, 32, 32)
    max_log_scale: float = 3.0
    # jittered copies of the gt box used as priors when computing the loss
    train_priors: int = 4
    train_prior_shift: float = 0.15
    train_prior_scale: float = 0.1
    dtype: str = "float32"

    def validate(self) -> "ArchConfig":
        if not self.backbone or any(c < 1 for c in self.backbone):
            raise ConfigError(f"invalid backbone widths {self.backbone}")
        for c in tuple(self.backbone) + tuple(self.mask_channels):
            if c % self.groups:
                raise ConfigError(f"{c} channels not divisible into {self.groups} groups")
        levels = tuple(self.box_levels) + tuple(self.mask_levels)
        if any(l < 0 or l >= len(self.backbone) for l in levels):
            raise ConfigError(f"feature level out of range in {levels}")
        if not self.box_levels:
            raise ConfigError("box head needs at least one feature level")
        if not self.mask_levels and not self.mask_use_image:
            raise ConfigError("mask head needs an input")
        if not self.mask_channels:
            raise ConfigError("mask head needs at least one conv block")
        if self.mask_window < 2 or self.box_window < 1 or self.box_hidden < 1:
            raise ConfigError("window sizes and hidden width must be positive")
        if self.box_context <= 0 or self.max_log_scale <= 0:
            raise ConfigError("box_context and max_log_scale must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype}")
        return self


@dataclass
class Layer:
    name: str
    kind: str
    weight: np.ndarray   # leading axis indexes neurons
    bias: np.ndarray     # one scalar per neuron

    @property
    def n_neurons(self) -> int:
        return self.weight.shape[0]


@dataclass
class ModelParams:
    layers: List[Layer]
    _index: Dict[str, int] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self._index = {layer.name: i for i, layer in enumerate(self.layers)}
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise StructureError(f"unknown layer kind {layer.kind!r}")
            if layer.bias.shape != (layer.n_neurons,):
                raise StructureError(f"{layer.name}: bias shape {layer.bias.shape} "
                                     f"does not match {layer.n_neurons} neurons")

    def __getitem__(self, name: str) -> Layer:
        return self.layers[self._index[name]]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    @property
    def n_neurons(self) -> int:
        return sum(layer.n_neurons for layer in self.layers)

    @property
    def n_scalars(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    def arrays(self) -> List[np.ndarray]:
        """Flat list ``[w0, b0, w1, b1, ...]`` in layer order."""
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "ModelParams":
        if len(arrays) != 2 * len(self.layers):
            raise StructureError(f"expected {2 * len(self.layers)} arrays, got {len(arrays)}")
        layers = []
        for i, layer in enumerate(self.layers):
            w, b = arrays[2 * i], arrays[2 * i + 1]
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise StructureError(f"{layer.name}: shape mismatch")
            layers.append(Layer(layer.name, layer.kind, w, b))
        return ModelParams(layers)

    def copy(self) -> "ModelParams":
        return ModelParams([Layer(l.name, l.kind, l.weight.copy(), l.bias.copy())
                            for l in self.layers])

    def astype(self, dtype) -> "ModelParams":
        return self.with_arrays([a.astype(dtype) for a in self.arrays()])

    def structure(self):
        return [(l.name, l.kind, l.weight.shape) for l in self.layers]

    def equal(self, other: "ModelParams") -> bool:
        return self.structure() == other.structure() and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))

    def __deepcopy__(self, memo):
        return self.copy()


@dataclass
class Prediction:
    box: Box
    mask_local: np.ndarray   # [2, win, win] class probabilities
    mask_full: np.ndarray    # [H, W] foreground probability in frame coordinates
    fallback: bool = False
    candidates: List[Box] = field(default_factory=list)


# ----------------------------------------------------------------------------
# construction


def _layer_specs(arch: ArchConfig):
    specs = []
    c_in = arch.in_channels
    for i, c in enumerate(arch.backbone):
        specs.append((f"conv{i}", "conv", (c, c_in, 3, 3)))
        specs.append((f"gn{i}", "norm", (c,)))
        c_in = c
    box_in = sum(arch.backbone[l] for l in arch.box_levels) * arch.box_window ** 2
    specs.append(("box_fc1", "fc", (arch.box_hidden, box_in)))
    specs.append(("box_fc2", "fc", (4, arch.box_hidden)))
    c_in = (arch.in_channels if arch.mask_use_image else 0) + sum(arch.backbone[l] for l in arch.mask_levels)
    for j, c in enumerate(arch.mask_channels):
        specs.append((f"mask_conv{j}", "conv", (c, c_in, 3, 3)))
        specs.append((f"mask_gn{j}", "norm", (c,)))
        c_in = c
    specs.append(("mask_logits", "conv", (2, c_in, 1, 1)))
    return specs


def init_model(arch: Optional[ArchConfig] = None, seed: int = 0) -> ModelParams:
    """He-initialised weights, zero biases, unit norm scales.

    The last box layer is drawn with the small ``box_out_std`` instead, so an
    untrained box head returns its priors almost unchanged.
    """
    arch = (arch or ArchConfig()).validate()
    rng = np.random.default_rng(seed)
    dtype = np.dtype(arch.dtype)
    layers = []
    for name, kind, shape in _layer_specs(arch):
        if kind == "norm":
            w = np.ones(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = arch.box_out_std if name == "box_fc2" else np.sqrt(2.0 / fan_in)
            w = (rng.standard_normal(shape) * std).astype(dtype)
        layers.append(Layer(name, kind, w, np.zeros(shape[0], dtype=dtype)))
    return ModelParams(layers)


def check_params(params: ModelParams, arch: ArchConfig) -> None:
    expected = [(n, k, s) for n, k, s in _layer_specs(arch)]
    if params.structure() != expected:
        raise StructureError("parameters do not match the architecture")


# ----------------------------------------------------------------------------
# forward pieces


def _bind(params: ModelParams, requires_grad: bool) -> Dict[str, Tuple[Tensor, Tensor]]:
    return {l.name: (Tensor(l.weight, requires_grad), Tensor(l.bias, requires_grad))
            for l in params.layers}


def _backbone(p, arch: ArchConfig, x: Tensor) -> List[Tensor]:
    feats = []
    h = x
    for i in range(len(arch.backbone)):
        w, b = p[f"conv{i}"]
        h = dc.conv2d(h, w, b, stride=1, pad=1)
        gamma, beta = p[f"gn{i}"]
        h = dc.relu(dc.group_norm(h, arch.groups, gamma, beta, arch.gn_eps))
        h = dc.max_pool2d(h)
        feats.append(h)
    return feats


def _box_deltas(p, arch: ArchConfig, frame_hw, feats, idx, priors: Sequence[Box]) -> Tensor:
    crops = []
    rois = [b.scaled(arch.box_context) for b in priors]
    for l in arch.box_levels:
        f = feats[l]
        crops.append(dc.roi_crop_batch(f, idx, rois, arch.box_window, f.shape[3] / frame_hw[1]))
    z = dc.concat(crops, axis=1) if len(crops) > 1 else crops[0]
    z = dc.reshape(z, (len(priors), -1))
    w1, b1 = p["box_fc1"]
    w2, b2 = p["box_fc2"]
    return dc.linear(dc.relu(dc.linear(z, w1, b1)), w2, b2)


def _refined_params(deltas: Tensor, priors: Sequence[Box], frame_hw) -> Tensor:
    """Normalised (cx, cy, log w, log h) of each prior moved by its deltas."""
    h, w = frame_hw
    scale = np.array([[b.w / w, b.h / h, 1.0, 1.0] for b in priors], dtype=deltas.dtype)
    offset = np.array([b.normalized(h, w) for b in priors], dtype=deltas.dtype)
    return dc.add(dc.mul(deltas, scale), offset)


def _mask_probs(p, arch: ArchConfig, x: Tensor, feats, idx, boxes: Sequence[Box]) -> Tensor:
    frame_w = x.shape[3]
    crops = []
    if arch.mask_use_image:
        crops.append(dc.roi_crop_batch(x, idx, boxes, arch.mask_window, 1.0))
    for l in arch.mask_levels:
        f = feats[l]
        crops.append(dc.roi_crop_batch(f, idx, boxes, arch.mask_window, f.shape[3] / frame_w))
    h = dc.concat(crops, axis=1) if len(crops) > 1 else crops[0]
    for j in range(len(arch.mask_channels)):
        w, b = p[f"mask_conv{j}"]
        gamma, beta = p[f"mask_gn{j}"]
        h = dc.relu(dc.group_norm(dc.conv2d(h, w, b, stride=1, pad=1), arch.groups, gamma, beta, arch.gn_eps))
    w, b = p["mask_logits"]
    return dc.softmax(dc.conv2d(h, w, b), axis=1)


def crop_mask(mask: np.ndarray, box: Box, window: int) -> np.ndarray:
    """Binary ground-truth crop on the same sampling grid as the mask head."""
    crop = dc.roi_crop(Tensor(np.asarray(mask, dtype=np.float64)[None]), box, window).data[0]
    return crop >= 0.5


# ----------------------------------------------------------------------------
# training objective


@dataclass
class Objective:
    loss: LossValue
    grads: Optional[List[np.ndarray]]   # aligned with ModelParams.arrays()
    crop_iou: float                     # mean IoU of thresholded mask crops


def training_priors(gt_box: Box, frame_hw, arch: ArchConfig, rng: np.random.Generator) -> List[Box]:
    """Full-frame prior plus jittered copies of the gt box."""
    full = Box.full_frame(*frame_hw)
    return [full] + jitter_boxes(gt_box, arch.train_priors, arch.train_prior_shift,
                                 arch.train_prior_scale, rng, frame_hw)


def seg_objective(params: ModelParams, arch: ArchConfig, frames: np.ndarray, masks: np.ndarray,
                  boxes: Sequence[Optional[Box]], priors: Sequence[Sequence[Box]],
                  mask_kind: str = "lovasz", classes: str = "present",
                  with_grad: bool = True) -> Objective:
    """``L_box + L_mask`` over a batch of frames, and its parameter gradient.

    Masks are supervised on crops at the ground-truth box; every prior of a
    sample is refined by the box head and regressed onto that box. Samples
    without a ground-truth box (object absent) are skipped.
    """
    keep = [i for i, b in enumerate(boxes) if b is not None]
    if not keep:
        zero = Tensor(np.zeros((), dtype=np.dtype(arch.dtype)))
        grads = [np.zeros_like(a) for a in params.arrays()] if with_grad else None
        return Objective(LossValue(zero, {"box": 0.0, "mask": 0.0}), grads, 1.0)
    frames = np.asarray(frames)[keep]
    masks = np.asarray(masks)[keep]
    boxes = [boxes[i] for i in keep]
    priors = [priors[i] for i in keep]
    frame_hw = frames.shape[2:]

    bound = _bind(params, with_grad)
    x = Tensor(frames)
    feats = _backbone(bound, arch, x)

    prior_idx = [i for i, ps in enumerate(priors) for _ in ps]
    flat_priors = [b for ps in priors for b in ps]
    deltas = _box_deltas(bound, arch, frame_hw, feats, prior_idx, flat_priors)
    box_pred = _refined_params(deltas, flat_priors, frame_hw)
    box_target = np.array([boxes[i].normalized(*frame_hw) for i in prior_idx])

    probs = _mask_probs(bound, arch, x, feats, list(range(len(boxes))), boxes)
    crops = np.stack([crop_mask(m, b, arch.mask_window) for m, b in zip(masks, boxes)])
    loss = seg_loss(SegPrediction(probs, box_pred), SegTarget(crops, box_target), mask_kind, classes)

    pred_fg = probs.data[:, 1] >= 0.5
    inter = (pred_fg & crops).sum(axis=(1, 2))
    union = (pred_fg | crops).sum(axis=(1, 2))
    crop_iou = float(np.mean(np.where(union > 0, inter / np.maximum(union, 1), 1.0)))

    grads = None
    if with_grad:
        leaves = [t for name in (l.name for l in params.layers) for t in bound[name]]
        grads = dc.grad(loss.value, leaves)
    return Objective(loss, grads, crop_iou)


# ----------------------------------------------------------------------------
# inference


def assemble_full_mask(mask_local: np.ndarray, box: Box, frame_size) -> np.ndarray:
    """Paste the foreground channel, bilinearly resized to the box, into a zero canvas.

    A frame pixel receives a value when its centre lies inside the clipped
    box; the value is the local mask sampled at the matching position.
    """
    height, width = frame_size
    fg = np.asarray(mask_local)
    fg = fg[1] if fg.ndim == 3 else fg
    win_h, win_w = fg.shape
    box = box.clip(height, width)
    x0, y0, x1, y1 = box.corners
    ys = np.arange(height) + 0.5
    xs = np.arange(width) + 0.5
    rows = np.flatnonzero((ys >= y0) & (ys < y1))
    cols = np.flatnonzero((xs >= x0) & (xs < x1))
    canvas = np.zeros((height, width), dtype=fg.dtype)
    if rows.size == 0 or cols.size == 0:
        return canvas
    my = dc.interp_at((ys[rows] - y0) / box.h * win_h, win_h, fg.dtype)
    mx = dc.interp_at((xs[cols] - x0) / box.w * win_w, win_w, fg.dtype)
    canvas[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1] = my @ fg @ mx.T
    return canvas


def _consensus_scores(boxes: Sequence[Box]) -> np.ndarray:
    if len(boxes) == 1:
        return np.ones(1)
    ious = np.array([[a.iou(b) for b in boxes] for a in boxes])
    return (ious.sum(axis=1) - 1.0) / (len(boxes) - 1)


def forward(params: ModelParams, frame: np.ndarray, box_prior: Optional[Sequence[Box]] = None,
            arch: Optional[ArchConfig] = None) -> Prediction:
    """Predict the object box and mask in one frame.

    Every prior is refined by the box head; the refinement that agrees best
    with the others (mean pairwise IoU) is chosen. Without priors the full
    frame is the only prior.
    """
    arch = arch or ArchConfig()
    frame = np.asarray(frame.data if isinstance(frame, Tensor) else frame, dtype=np.dtype(arch.dtype))
    height, width = frame.shape[1:]
    full = Box.full_frame(height, width)
    priors = [b.clip(height, width) for b in box_prior] if box_prior else [full]

    bound = _bind(params, False)
    x = Tensor(frame[None])
    feats = _backbone(bound, arch, x)
    deltas = _box_deltas(bound, arch, (height, width), feats, [0] * len(priors), priors).data
    deltas = deltas.astype(np.float64)
    deltas[:, 2:] = np.clip(deltas[:, 2:], -arch.max_log_scale, arch.max_log_scale)
    refined = []
    for d, prior in zip(deltas, priors):
        cand = Box(prior.cx + d[0] * prior.w, prior.cy + d[1] * prior.h,
                   prior.w * np.exp(d[2]), prior.h * np.exp(d[3]))
        try:
            cand = cand.clip(height, width)
            if cand.w < 1.0 or cand.h < 1.0:
                raise BoxError("degenerate")
            refined.append(cand)
        except BoxError:
            refined.append(None)
    valid = [b for b in refined if b is not None]
    fallback = not valid
    if fallback:
        chosen = full.with_score(0.0)
    else:
        scores = _consensus_scores(valid)
        k = int(np.argmax(scores))
        chosen = valid[k].with_score(float(scores[k]))
    probs = _mask_probs(bound, arch, x, feats, [0], [chosen]).data[0]
    mask_full = assemble_full_mask(probs, chosen, (height, width))
    return Prediction(chosen, probs, mask_full, fallback, valid)
