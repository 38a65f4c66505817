"""Test-time pipeline for one sequence.

Each object gets its own copy of the model, fine-tuned on the frame where
its annotation is given. Later frames are predicted one by one; the box
found in the previous frame (plus jittered copies) is fed back as box
priors, and optionally the model is periodically re-fine-tuned from the
post-fine-tune state on the annotated frame and the latest prediction.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence as Seq

import numpy as np

from .boxes import Box, jitter_boxes
from .errors import ConfigError, NumericError
from .metaopt import MetaParams, SegTaskObjective, fine_tune
from .segmodel import ArchConfig, ModelParams, forward
from .taskset import AugConfig, Sample, Sequence, TaskSet, write_label_png

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class JitterSpec:
    n_priors: int = 8
    shift: float = 0.05      # centre shift sigma, fraction of box size
    scale: float = 0.05      # log-scale sigma
    include_prev: bool = True


@dataclass(frozen=True)
class InferenceConfig:
    T: int = 5
    use_ona: bool = False
    ona_interval: int = 5
    ona_iters: int = 10
    ona_window: int = 1               # how many recent predictions join the online set
    box_propagation: bool = True
    jitter: JitterSpec = field(default_factory=JitterSpec)
    merge_threshold: float = 0.5
    spatial_aug: bool = True
    mask_kind: str = "lovasz"
    classes: str = "present"
    workers: int = 1
    arch: ArchConfig = field(default_factory=ArchConfig)

    def validate(self) -> "InferenceConfig":
        if self.T < 1 or self.ona_interval < 1 or self.ona_iters < 0 or self.ona_window < 1:
            raise ConfigError("need T >= 1, ona_interval >= 1, ona_iters >= 0, ona_window >= 1")
        if self.jitter.n_priors < 0 or self.jitter.shift < 0 or self.jitter.scale < 0:
            raise ConfigError("jitter parameters must be non-negative")
        if not 0.0 <= self.merge_threshold <= 1.0:
            raise ConfigError("merge_threshold must lie in [0, 1]")
        self.arch.validate()
        return self

    def objective(self) -> SegTaskObjective:
        return SegTaskObjective(self.arch, self.mask_kind, self.classes)


def _key(seed, *extra) -> List[int]:
    """Flat integer seed list for ``numpy.random.default_rng``."""
    return [int(v) for v in np.ravel(seed)] + [int(v) for v in extra]


def propagate_box(prev: Box, jitter: JitterSpec, seed, frame_size=None) -> List[Box]:
    """``prev`` (if included) followed by ``n_priors`` jittered copies, clipped to the frame."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    base = prev.clip(*frame_size) if frame_size is not None else prev
    out = [base] if jitter.include_prev else []
    out += jitter_boxes(base, jitter.n_priors, jitter.shift, jitter.scale, rng, frame_size)
    return out


def online_adapt(theta_T: ModelParams, d0: Sample, preds: Seq[Sample], T_ona: int, meta: MetaParams,
                 objective=None, seed=0) -> ModelParams:
    """Fine-tune a fresh copy of ``theta_T`` on the annotated frame plus recent predictions.

    Predictions with an empty mask are dropped; if none remain the model is
    returned unchanged. No augmentation is applied.
    """
    preds = [p for p in preds if p.mask is not None and p.mask.any()]
    if T_ona == 0 or not preds:
        return theta_T
    try:
        traj = fine_tune(meta, [d0] + list(preds), T_ona, seed=seed, objective=objective,
                         start=theta_T)
    except NumericError as exc:
        log.warning("online adaptation skipped: %s", exc)
        return theta_T
    return traj.thetaT


@dataclass
class ObjectResult:
    obj_id: int
    first: int                       # frame where the annotation is given
    probs: List[np.ndarray]          # per frame foreground probability (zeros before ``first``)
    boxes: List[Optional[Box]]
    ona_rounds: List[int] = field(default_factory=list)
    finetune_seconds: float = 0.0
    forward_seconds: float = 0.0
    adapt_seconds: float = 0.0
    iterations: int = 0
    valid: bool = True

    @property
    def seconds(self) -> float:
        return self.finetune_seconds + self.forward_seconds + self.adapt_seconds


def run_object(meta: MetaParams, seq: Sequence, k: int, cfg: InferenceConfig, seed=0,
               clock: Callable[[], float] = time.perf_counter) -> ObjectResult:
    cfg.validate()
    hw = tuple(seq.frame_size)
    first = next((i for i, lab in enumerate(seq.labels) if lab is not None and (lab == k).any()), None)
    if first is None:
        raise ConfigError(f"object {k} has no annotation in sequence {seq.id}")
    objective = cfg.objective()
    d0 = Sample.make(seq.frames[first], seq.object_mask(first, k), first)
    res = ObjectResult(k, first, [np.zeros(hw, np.float32)] * first, [None] * first)

    t0 = clock()
    try:
        aug = AugConfig.spatial() if cfg.spatial_aug else None
        theta_T = fine_tune(meta, [d0], cfg.T, aug=aug, seed=_key(seed, k), objective=objective).thetaT
    except NumericError as exc:
        log.warning("%s/%d: fine-tuning diverged (%s)", seq.id, k, exc)
        res.finetune_seconds = clock() - t0
        res.valid = False
        res.probs += [np.zeros(hw, np.float32)] * (len(seq.frames) - first)
        res.boxes += [None] * (len(seq.frames) - first)
        return res
    res.finetune_seconds = clock() - t0
    res.iterations = cfg.T

    theta = theta_T
    t0 = clock()
    pred = forward(theta, d0.frame, [d0.box], cfg.arch)
    res.forward_seconds += clock() - t0
    res.probs.append(pred.mask_full.astype(np.float32))
    res.boxes.append(pred.box)
    prev_box = d0.box
    recent: List[Sample] = []
    for i in range(first + 1, len(seq.frames)):
        full = Box.full_frame(*hw)
        priors = [full]
        if cfg.box_propagation:
            priors += propagate_box(prev_box, cfg.jitter, np.random.default_rng(_key(seed, k, i)), hw)
        t0 = clock()
        pred = forward(theta, seq.frames[i], priors, cfg.arch)
        res.forward_seconds += clock() - t0
        res.probs.append(pred.mask_full.astype(np.float32))
        res.boxes.append(pred.box)
        mask = pred.mask_full >= 0.5
        if mask.any():
            prev_box = pred.box.with_score(None)
        if cfg.use_ona:
            recent = (recent + [Sample.make(seq.frames[i], mask, i)])[-cfg.ona_window:]
            if i % cfg.ona_interval == 0:
                t0 = clock()
                theta = online_adapt(theta_T, d0, recent, cfg.ona_iters, meta, objective,
                                     seed=_key(seed, k, i, 1))
                res.adapt_seconds += clock() - t0
                res.ona_rounds.append(i)
                res.iterations += cfg.ona_iters
    return res


def merge_objects(prob_maps: Mapping[int, np.ndarray], threshold: float = 0.5) -> np.ndarray:
    """Per pixel: the most probable object id, or 0 where no object reaches ``threshold``.

    Ties go to the smallest id.
    """
    if not prob_maps:
        raise ConfigError("merge_objects needs at least one probability map")
    ids = sorted(prob_maps)
    stack = np.stack([np.asarray(prob_maps[k]) for k in ids])
    best = stack.argmax(axis=0)
    labels = np.asarray(ids, dtype=np.uint8)[best]
    labels[stack.max(axis=0) < threshold] = 0
    return labels


@dataclass
class SequenceResult:
    seq_id: str
    objects: Dict[int, ObjectResult]
    labels: List[np.ndarray]

    @property
    def seconds(self) -> float:
        return sum(o.seconds for o in self.objects.values())

    @property
    def forward_seconds(self) -> float:
        return sum(o.forward_seconds for o in self.objects.values())

    @property
    def valid(self) -> bool:
        return all(o.valid for o in self.objects.values())


def _run_object_packed(args):
    return run_object(*args)


def run_sequence(meta: MetaParams, seq: Sequence, cfg: InferenceConfig, seed=0,
                 clock: Callable[[], float] = time.perf_counter) -> SequenceResult:
    ids = seq.object_ids
    jobs = [(meta, seq, k, cfg, seed) for k in ids]
    if cfg.workers > 1 and len(ids) > 1:
        with ProcessPoolExecutor(min(cfg.workers, len(ids))) as pool:
            results = list(pool.map(_run_object_packed, jobs))
    else:
        results = [run_object(*job, clock=clock) for job in jobs]
    objects = {r.obj_id: r for r in results}
    hw = tuple(seq.frame_size)
    labels = []
    for i in range(len(seq.frames)):
        maps = {k: objects[k].probs[i] for k in ids}
        labels.append(merge_objects(maps, cfg.merge_threshold) if maps else np.zeros(hw, np.uint8))
    return SequenceResult(seq.id, objects, labels)


def run_taskset(meta: MetaParams, ts: TaskSet, cfg: InferenceConfig, seed=0) -> List[SequenceResult]:
    return [run_sequence(meta, seq, cfg, seed=_key(seed, j)) for j, seq in enumerate(ts.sequences)]


def write_predictions(results: Seq[SequenceResult], root: str) -> None:
    """Label maps as ``Annotations/<seq>/%05d.png`` under ``root``."""
    for r in results:
        d = os.path.join(root, "Annotations", r.seq_id)
        os.makedirs(d, exist_ok=True)
        for i, lab in enumerate(r.labels):
            write_label_png(lab, os.path.join(d, f"{i:05d}.png"))
