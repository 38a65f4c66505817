"""Sequences, per-object tasks, the synthetic video generator and DAVIS-layout IO.

A task is one object of one sequence: the first frame in which the object
is visible is the training sample, every later frame is a test sample.
"""

from __future__ import annotations

import colorsys
import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .boxes import Box
from .errors import ConfigError, SequenceError, SizeError


@dataclass
class Sample:
    frame: np.ndarray            # [3, H, W] float32 in [0, 1]
    mask: Optional[np.ndarray]   # [H, W] bool, None when not annotated
    box: Optional[Box]           # tight box of ``mask``; None if the mask is empty
    index: int                   # frame index in the source sequence

    @classmethod
    def make(cls, frame, mask, index) -> "Sample":
        if mask is None:
            return cls(frame, None, None, index)
        mask = np.asarray(mask, dtype=bool)
        return cls(frame, mask, Box.from_mask(mask), index)


@dataclass
class Sequence:
    id: str
    frames: List[np.ndarray]                 # [3, H, W] float32
    labels: List[Optional[np.ndarray]]       # [H, W] uint8 object-id maps
    fps: float = 24.0

    @property
    def frame_size(self) -> Tuple[int, int]:
        return self.frames[0].shape[1:]

    @property
    def object_ids(self) -> List[int]:
        ids = set()
        for lab in self.labels:
            if lab is not None:
                ids.update(int(v) for v in np.unique(lab) if v != 0)
        return sorted(ids)

    def object_mask(self, i: int, k: int) -> Optional[np.ndarray]:
        lab = self.labels[i]
        return None if lab is None else lab == k

    def gt_masks(self, i: int) -> Dict[int, np.ndarray]:
        return {k: self.object_mask(i, k) for k in self.object_ids}


@dataclass
class Task:
    seq_id: str
    obj_id: int
    d_train: List[Sample]
    d_test: List[Sample]

    @property
    def first_index(self) -> int:
        return self.d_train[0].index


@dataclass
class TaskSet:
    tasks: List[Task]
    split: str = "train"
    sequences: List[Sequence] = field(default_factory=list)

    def __len__(self):
        return len(self.tasks)

    def sequence(self, seq_id: str) -> Sequence:
        for s in self.sequences:
            if s.id == seq_id:
                return s
        raise KeyError(seq_id)

    def equal(self, other: "TaskSet") -> bool:
        if len(self.tasks) != len(other.tasks):
            return False
        for a, b in zip(self.tasks, other.tasks):
            if (a.seq_id, a.obj_id) != (b.seq_id, b.obj_id):
                return False
            sa, sb = a.d_train + a.d_test, b.d_train + b.d_test
            if len(sa) != len(sb) or len(a.d_train) != len(b.d_train):
                return False
            for x, y in zip(sa, sb):
                if x.index != y.index or x.box != y.box or not np.array_equal(x.frame, y.frame):
                    return False
                if (x.mask is None) != (y.mask is None):
                    return False
                if x.mask is not None and not np.array_equal(x.mask, y.mask):
                    return False
        return True


def tasks_from_sequence(seq: Sequence) -> List[Task]:
    """One task per object, starting at the first frame where the object is visible."""
    tasks = []
    for k in seq.object_ids:
        first = next(i for i, lab in enumerate(seq.labels) if lab is not None and (lab == k).any())
        train = [Sample.make(seq.frames[first], seq.object_mask(first, k), first)]
        test = [Sample.make(seq.frames[i], seq.object_mask(i, k), i)
                for i in range(first + 1, len(seq.frames))]
        tasks.append(Task(seq.id, k, train, test))
    return tasks


def taskset_from_sequences(sequences: List[Sequence], split: str) -> TaskSet:
    tasks = [t for s in sequences for t in tasks_from_sequence(s)]
    return TaskSet(tasks, split, list(sequences))


# ----------------------------------------------------------------------------
# synthetic videos


SHAPES = ("ellipse", "rectangle", "pentagon")


@dataclass(frozen=True)
class SynthConfig:
    height: int = 96
    width: int = 96
    n_frames: int = 12
    n_sequences: int = 10
    n_tasks: Optional[int] = None    # if set, generate exactly this many tasks
    min_objects: int = 1
    max_objects: int = 3
    shapes: Tuple[str, ...] = SHAPES
    size_range: Tuple[float, float] = (12.0, 20.0)   # circumradius in pixels
    max_translation: float = 6.0     # pixels per frame
    max_rotation: float = 8.0        # degrees per frame
    max_scale_drift: float = 0.03    # relative size change per frame
    max_distractors: int = 2
    hue_drift: float = 0.004         # hue-circle fraction per frame
    occlusion_prob: float = 0.3
    texture_strength: float = 0.25
    noise: float = 0.02
    enter_prob: float = 0.0          # chance that a target appears after frame 0
    fps: float = 24.0
    split: str = "train"

    def validate(self) -> "SynthConfig":
        if self.height < 16 or self.width < 16 or self.n_frames < 1:
            raise ConfigError("frames must be at least 16x16 and sequences non-empty")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 1 <= min_objects <= max_objects")
        if any(s not in SHAPES for s in self.shapes) or not self.shapes:
            raise ConfigError(f"shapes must be drawn from {SHAPES}")
        lo, hi = self.size_range
        if not 0 < lo <= hi:
            raise ConfigError("bad size_range")
        if min(self.max_translation, self.max_rotation, self.max_scale_drift, self.noise) < 0:
            raise ConfigError("motion and noise magnitudes must be non-negative")
        return self

    @classmethod
    def drift(cls, **overrides) -> "SynthConfig":
        """Strong appearance and scale drift, used to probe online adaptation."""
        base = dict(hue_drift=0.02, max_scale_drift=0.03, min_objects=1, max_objects=2)
        base.update(overrides)
        return cls(**base)


def _shape_mask(kind: str, cx: float, cy: float, radius: float, aspect: float,
                angle: float, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    ca, sa = math.cos(angle), math.sin(angle)
    dx, dy = xs - cx, ys - cy
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    if kind == "ellipse":
        return (u / radius) ** 2 + (v / (radius * aspect)) ** 2 <= 1.0
    if kind == "rectangle":
        return (np.abs(u) <= radius * 0.8) & (np.abs(v) <= radius * 0.8 * aspect)
    apothem = radius * math.cos(math.pi / 5)
    inside = np.ones(xs.shape, dtype=bool)
    for i in range(5):
        phi = 2 * math.pi * i / 5 + math.pi / 5 - math.pi / 2
        inside &= u * math.cos(phi) + v * math.sin(phi) <= apothem
    return inside


@dataclass
class _Mover:
    kind: str
    cx: float
    cy: float
    radius: float
    aspect: float
    angle: float
    vx: float
    vy: float
    spin: float
    growth: float
    hue: float
    sat: float
    val: float
    stripe_freq: float
    stripe_phase: float
    obj_id: int        # 0 for distractors
    start: int = 0

    def step(self, cfg: SynthConfig, rng: np.random.Generator, base_radius: float):
        jitter = rng.normal(scale=0.5, size=2)
        self.vx += jitter[0]
        self.vy += jitter[1]
        # thin objects move slower so consecutive masks keep overlapping
        cap = min(cfg.max_translation, 0.3 * self.radius * self.aspect)
        speed = math.hypot(self.vx, self.vy)
        if speed > cap:
            self.vx *= cap / speed
            self.vy *= cap / speed
        self.cx += self.vx
        self.cy += self.vy
        margin = self.radius * 0.5
        if not margin <= self.cx <= cfg.width - margin:
            self.vx = -self.vx
            self.cx = float(np.clip(self.cx, margin, cfg.width - margin))
        if not margin <= self.cy <= cfg.height - margin:
            self.vy = -self.vy
            self.cy = float(np.clip(self.cy, margin, cfg.height - margin))
        self.angle += self.spin
        self.radius = float(np.clip(self.radius * (1.0 + self.growth), 0.6 * base_radius, 1.6 * base_radius))
        self.hue = (self.hue + cfg.hue_drift) % 1.0


def _background(cfg: SynthConfig, rng: np.random.Generator, xs, ys) -> np.ndarray:
    img = np.empty((3, cfg.height, cfg.width))
    base = rng.uniform(0.25, 0.65, size=3)
    for c in range(3):
        layer = np.full(xs.shape, base[c])
        for _ in range(3):
            fx, fy = rng.uniform(-0.25, 0.25, size=2)
            layer += cfg.texture_strength / 3 * np.sin(fx * xs + fy * ys + rng.uniform(0, 2 * np.pi))
        img[c] = layer
    return img


def _render(movers: List[_Mover], bg: np.ndarray, cfg: SynthConfig, rng, xs, ys, t: int):
    img = bg.copy()
    label = np.zeros((cfg.height, cfg.width), dtype=np.uint8)
    for m in movers:
        if t < m.start:
            continue
        shape = _shape_mask(m.kind, m.cx, m.cy, m.radius, m.aspect, m.angle, xs, ys)
        rgb = np.array(colorsys.hsv_to_rgb(m.hue, m.sat, m.val))
        # stripes move with the object so the texture is part of its appearance
        u = math.cos(m.angle) * (xs - m.cx) + math.sin(m.angle) * (ys - m.cy)
        shade = 1.0 + 0.12 * np.sin(m.stripe_freq * u + m.stripe_phase)
        for c in range(3):
            img[c][shape] = (rgb[c] * shade)[shape]
        label[shape] = m.obj_id
    img += rng.normal(scale=cfg.noise, size=img.shape)
    frame = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return frame.astype(np.float32), label


def _new_mover(cfg: SynthConfig, rng, obj_id: int, hue: Optional[float] = None,
               near: Optional[_Mover] = None) -> _Mover:
    radius = rng.uniform(*cfg.size_range)
    if near is None:
        cx = rng.uniform(radius, cfg.width - radius)
        cy = rng.uniform(radius, cfg.height - radius)
        heading = rng.uniform(0, 2 * np.pi)
    else:
        # start away from ``near`` and head towards it so that they cross later
        heading = rng.uniform(0, 2 * np.pi)
        dist = near.radius + radius + rng.uniform(12, 24)
        cx = float(np.clip(near.cx + dist * math.cos(heading), radius * 0.5, cfg.width - radius * 0.5))
        cy = float(np.clip(near.cy + dist * math.sin(heading), radius * 0.5, cfg.height - radius * 0.5))
        heading = math.atan2(near.cy - cy, near.cx - cx)
    top = cfg.max_translation * 0.7
    speed = rng.uniform(min(0.5, top), top)
    return _Mover(
        kind=str(rng.choice(cfg.shapes)), cx=cx, cy=cy, radius=radius,
        aspect=rng.uniform(0.7, 1.0), angle=rng.uniform(0, 2 * np.pi),
        vx=speed * math.cos(heading), vy=speed * math.sin(heading),
        spin=math.radians(rng.uniform(-cfg.max_rotation, cfg.max_rotation)),
        growth=rng.uniform(-cfg.max_scale_drift, cfg.max_scale_drift),
        hue=rng.uniform(0, 1) if hue is None else hue,
        sat=rng.uniform(0.6, 1.0), val=rng.uniform(0.6, 1.0),
        stripe_freq=rng.uniform(0.3, 0.8), stripe_phase=rng.uniform(0, 2 * np.pi),
        obj_id=obj_id)


def generate_sequence(cfg: SynthConfig, rng: np.random.Generator, seq_id: str,
                      n_objects: Optional[int] = None) -> Sequence:
    """Render one sequence; retries until every target is clearly visible at its start."""
    cfg.validate()
    ys, xs = np.mgrid[0:cfg.height, 0:cfg.width] + 0.5
    n_obj = n_objects or int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    for _ in range(50):
        bg = _background(cfg, rng, xs, ys)
        targets = []
        for k in range(1, n_obj + 1):
            for _ in range(30):
                m = _new_mover(cfg, rng, k)
                if all(math.hypot(m.cx - o.cx, m.cy - o.cy) > m.radius + o.radius for o in targets):
                    break
            if k > 1 and rng.random() < cfg.enter_prob:
                m.start = int(rng.integers(1, max(2, cfg.n_frames // 2)))
            targets.append(m)
        distractors = []
        for _ in range(int(rng.integers(0, cfg.max_distractors + 1))):
            ref = targets[int(rng.integers(len(targets)))]
            near = ref if rng.random() < cfg.occlusion_prob else None
            d = _new_mover(cfg, rng, 0, hue=ref.hue, near=near)
            d.hue = ref.hue
            distractors.append(d)
        # z-order: occluding distractors go on top, the rest below the targets
        below = [d for d in distractors if rng.random() < 0.5]
        above = [d for d in distractors if d not in below]
        movers = below + targets + above
        base = {id(m): m.radius for m in movers}
        frames, labels = [], []
        for t in range(cfg.n_frames):
            f, lab = _render(movers, bg, cfg, rng, xs, ys, t)
            frames.append(f)
            labels.append(lab)
            for m in movers:
                if t >= m.start:
                    m.step(cfg, rng, base[id(m)])
        if all(_clear_start(labels, m, cfg) for m in targets):
            break
    return Sequence(seq_id, frames, labels, cfg.fps)


def _clear_start(labels, m: _Mover, cfg: SynthConfig) -> bool:
    """Target is well visible when it appears and not occluded on the next frame."""
    first = labels[m.start] == m.obj_id
    if np.count_nonzero(first) < 0.5 * math.pi * (cfg.size_range[0] * 0.6) ** 2:
        return False
    if m.start + 1 >= len(labels):
        return True
    nxt = labels[m.start + 1] == m.obj_id
    return np.count_nonzero(first & nxt) >= 0.5 * np.count_nonzero(first | nxt)


def gen_synthetic(cfg: Optional[SynthConfig] = None, seed: int = 0) -> TaskSet:
    """Deterministic synthetic TaskSet.

    With ``cfg.n_tasks`` set, sequences are generated until exactly that
    many tasks exist (the last sequence gets fewer objects if needed);
    otherwise ``cfg.n_sequences`` sequences are generated.
    """
    cfg = (cfg or SynthConfig()).validate()
    sequences = []
    n_tasks = 0
    i = 0
    while True:
        if cfg.n_tasks is None and i >= cfg.n_sequences:
            break
        if cfg.n_tasks is not None and n_tasks >= cfg.n_tasks:
            break
        rng = np.random.default_rng([seed, i])
        n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        if cfg.n_tasks is not None:
            n_obj = min(n_obj, cfg.n_tasks - n_tasks)
        seq = generate_sequence(cfg, rng, f"seq{seed:03d}_{i:04d}", n_obj)
        sequences.append(seq)
        n_tasks += len(seq.object_ids)
        i += 1
    return taskset_from_sequences(sequences, cfg.split)


# ----------------------------------------------------------------------------
# DAVIS-style directory layout


def write_davis_layout(data, root: str) -> None:
    """Write sequences as ``Frames/<seq>/%05d.png`` and ``Annotations/<seq>/%05d.png``."""
    sequences = data.sequences if isinstance(data, TaskSet) else list(data)
    meta = {"sequences": {}}
    for seq in sequences:
        fdir = os.path.join(root, "Frames", seq.id)
        adir = os.path.join(root, "Annotations", seq.id)
        os.makedirs(fdir, exist_ok=True)
        os.makedirs(adir, exist_ok=True)
        for i, frame in enumerate(seq.frames):
            rgb = np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
            Image.fromarray(rgb, mode="RGB").save(os.path.join(fdir, f"{i:05d}.png"))
        for i, lab in enumerate(seq.labels):
            if lab is not None:
                write_label_png(lab, os.path.join(adir, f"{i:05d}.png"))
        meta["sequences"][seq.id] = {"fps": seq.fps, "n_frames": len(seq.frames)}
    with open(os.path.join(root, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def write_label_png(label: np.ndarray, path: str) -> None:
    Image.fromarray(np.asarray(label, dtype=np.uint8), mode="L").save(path)


def read_label_png(path: str) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            im = im.convert("L")
        return np.array(im, dtype=np.uint8)


def _read_frame(path: str) -> np.ndarray:
    with Image.open(path) as im:
        rgb = np.array(im.convert("RGB"), dtype=np.float32)
    return (rgb / 255.0).transpose(2, 0, 1).astype(np.float32)


def load_sequences(root: str) -> List[Sequence]:
    frames_root = os.path.join(root, "Frames")
    if not os.path.isdir(frames_root):
        return []
    fps = {}
    meta_path = os.path.join(root, "meta.json")
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            fps = {k: v.get("fps", 24.0) for k, v in json.load(fh).get("sequences", {}).items()}
    sequences = []
    for seq_id in sorted(os.listdir(frames_root)):
        fdir = os.path.join(frames_root, seq_id)
        if not os.path.isdir(fdir):
            continue
        names = sorted(n for n in os.listdir(fdir) if n.endswith(".png"))
        if not names:
            continue
        adir = os.path.join(root, "Annotations", seq_id)
        if not os.path.exists(os.path.join(adir, names[0])):
            raise SequenceError(f"{seq_id}: no annotation for the first frame {names[0]}")
        frames, labels = [], []
        for name in names:
            frame = _read_frame(os.path.join(fdir, name))
            apath = os.path.join(adir, name)
            lab = read_label_png(apath) if os.path.exists(apath) else None
            if lab is not None and lab.shape != frame.shape[1:]:
                raise SizeError(f"{seq_id}/{name}: mask {lab.shape} vs frame {frame.shape[1:]}")
            if frames and frame.shape != frames[0].shape:
                raise SizeError(f"{seq_id}/{name}: frame size changes within the sequence")
            frames.append(frame)
            labels.append(lab)
        sequences.append(Sequence(seq_id, frames, labels, float(fps.get(seq_id, 24.0))))
    return sequences


def load_davis_layout(root: str, split: str = "test") -> TaskSet:
    """One task per (sequence, object id) found in the annotations."""
    return taskset_from_sequences(load_sequences(root), split)


# ----------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugConfig:
    flip_p: float = 0.5
    scale: Tuple[float, float] = (0.8, 1.2)
    rotation: float = 15.0          # degrees, symmetric range
    translation: float = 0.1        # fraction of the frame size
    brightness: float = 0.2
    saturation: float = 0.2
    spatial_only: bool = False
    max_tries: int = 10

    @classmethod
    def identity(cls) -> "AugConfig":
        return cls(flip_p=0.0, scale=(1.0, 1.0), rotation=0.0, translation=0.0,
                   brightness=0.0, saturation=0.0)

    @classmethod
    def spatial(cls) -> "AugConfig":
        return cls(spatial_only=True)

    def is_identity(self) -> bool:
        return (self.flip_p == 0 and self.scale == (1.0, 1.0) and self.rotation == 0
                and self.translation == 0 and (self.spatial_only or
                                               (self.brightness == 0 and self.saturation == 0)))


def _draw_transform(cfg: AugConfig, rng: np.random.Generator, height: int, width: int):
    flip = rng.random() < cfg.flip_p
    scale = rng.uniform(*cfg.scale)
    angle = math.radians(rng.uniform(-cfg.rotation, cfg.rotation))
    tx, ty = rng.uniform(-cfg.translation, cfg.translation, size=2) * (width, height)
    bright = 1.0 + rng.uniform(-cfg.brightness, cfg.brightness)
    sat = 1.0 + rng.uniform(-cfg.saturation, cfg.saturation)
    return flip, scale, angle, tx, ty, bright, sat


def _warp(frame: np.ndarray, mask: Optional[np.ndarray], flip, scale, angle, tx, ty):
    _, height, width = frame.shape
    c = np.array([height / 2.0, width / 2.0])
    # forward map in (row, col): R(angle) * S(scale) * F(flip)
    ca, sa = math.cos(angle), math.sin(angle)
    rot = np.array([[ca, sa], [-sa, ca]])
    fwd = rot @ np.diag([scale, -scale if flip else scale])
    inv = np.linalg.inv(fwd)
    shift = np.array([ty, tx])
    offset = inv @ (0.5 - c - shift) + c - 0.5
    out = np.stack([ndimage.affine_transform(ch, inv, offset=offset, order=1, mode="nearest")
                    for ch in frame]).astype(np.float32)
    out_mask = None
    if mask is not None:
        out_mask = ndimage.affine_transform(mask.astype(np.uint8), inv, offset=offset,
                                            order=0, mode="constant", cval=0).astype(bool)
    return out, out_mask


def _color(frame: np.ndarray, bright: float, sat: float) -> np.ndarray:
    gray = frame.mean(axis=0, keepdims=True)
    out = (gray + sat * (frame - gray)) * bright
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment(frame: np.ndarray, mask: Optional[np.ndarray], cfg: AugConfig, seed) -> Tuple[np.ndarray, np.ndarray]:
    """Random flip/scale/rotation/translation (shared by frame and mask) plus colour jitter.

    ``seed`` may be an int or a numpy Generator. If every draw pushes the
    object out of the frame, the untouched pair is returned.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if cfg.is_identity():
        return frame, mask
    _, height, width = frame.shape
    for _ in range(cfg.max_tries):
        flip, scale, angle, tx, ty, bright, sat = _draw_transform(cfg, rng, height, width)
        out, out_mask = _warp(frame, mask, flip, scale, angle, tx, ty)
        if mask is not None and mask.any() and not out_mask.any():
            continue
        if not cfg.spatial_only:
            out = _color(out, bright, sat)
        return out, out_mask
    return frame, mask


def augment_sample(s: Sample, cfg: AugConfig, rng) -> Sample:
    frame, mask = augment(s.frame, s.mask, cfg, rng)
    return Sample.make(frame, mask, s.index)


def make_meta_task(task: Task, cfg: AugConfig, seed, k: int = 3) -> Task:
    """Meta-training task built from one randomly chosen annotated frame.

    The training sample is one augmentation of that frame; the test set holds
    ``k`` further independent augmentations.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pool = [s for s in task.d_train + task.d_test if s.mask is not None and s.box is not None]
    if not pool:
        raise SequenceError(f"{task.seq_id}/{task.obj_id}: no annotated frame with the object")
    src = pool[int(rng.integers(len(pool)))]
    train = [augment_sample(src, cfg, rng)]
    test = [augment_sample(src, cfg, rng) for _ in range(k)]
    return Task(task.seq_id, task.obj_id, train, test)


def sample_batch(ts: TaskSet, b: int, seed) -> List[Task]:
    if b < 1 or b > len(ts.tasks):
        raise ConfigError(f"cannot draw {b} tasks from a set of {len(ts.tasks)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return [ts.tasks[i] for i in rng.choice(len(ts.tasks), size=b, replace=False)]
