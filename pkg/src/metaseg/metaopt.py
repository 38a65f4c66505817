"""Meta-learning of the fine-tuning optimizer.

The inner loop is plain SGD where every neuron owns a pair of learning
rates (one for its weights, one for its bias). The outer loop learns the
initialization and those rates from first-order hypergradients: inner
gradients are treated as constants, so the initialization receives the
test gradient unchanged and a learning rate receives the test gradient
dotted with the negated sum of its neuron's inner gradients.
"""

from __future__ import annotations

import logging
import math
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, FormatError, NumericError, StructureError
from .segmodel import ArchConfig, Layer, ModelParams, init_model, seg_objective, training_priors
from .taskset import AugConfig, Sample, Task, TaskSet, augment_sample, make_meta_task, sample_batch

log = logging.getLogger(__name__)


@dataclass
class Eval:
    loss: float
    grads: Optional[List[np.ndarray]]   # aligned with ModelParams.arrays()
    iou: float = float("nan")


# An objective maps (params, samples, rng, with_grad) to an Eval.
ObjectiveFn = Callable[[ModelParams, Sequence[Sample], np.random.Generator, bool], Eval]


@dataclass
class SegTaskObjective:
    """``L_box + L_mask`` of the segmentation model on a list of samples."""

    arch: ArchConfig = field(default_factory=ArchConfig)
    mask_kind: str = "lovasz"
    classes: str = "present"

    def __call__(self, params, samples, rng, with_grad=True) -> Eval:
        frames = np.stack([s.frame for s in samples])
        masks = np.stack([s.mask if s.mask is not None else np.zeros(s.frame.shape[1:], bool)
                          for s in samples])
        boxes = [s.box for s in samples]
        hw = frames.shape[2:]
        priors = [training_priors(b, hw, self.arch, rng) if b is not None else [] for b in boxes]
        obj = seg_objective(params, self.arch, frames, masks, boxes, priors,
                            self.mask_kind, self.classes, with_grad)
        return Eval(float(obj.loss.value.data), obj.grads, obj.crop_iou)


# ----------------------------------------------------------------------------
# meta parameters


@dataclass
class MetaParams:
    theta0: ModelParams
    lam_w: List[np.ndarray]   # per layer, one rate per neuron
    lam_b: List[np.ndarray]

    def __post_init__(self):
        counts = [l.n_neurons for l in self.theta0.layers]
        if ([a.shape for a in self.lam_w] != [(n,) for n in counts]
                or [a.shape for a in self.lam_b] != [(n,) for n in counts]):
            raise StructureError("learning-rate pairs do not mirror the neurons of theta0")

    @classmethod
    def init(cls, theta0: ModelParams, lambda_init: float = 1e-3) -> "MetaParams":
        dt = theta0.layers[0].weight.dtype
        lw = [np.full(l.n_neurons, lambda_init, dtype=dt) for l in theta0.layers]
        lb = [np.full(l.n_neurons, lambda_init, dtype=dt) for l in theta0.layers]
        return cls(theta0, lw, lb)

    @property
    def n_neurons(self) -> int:
        return self.theta0.n_neurons

    @property
    def n_scalars(self) -> int:
        return self.theta0.n_scalars + 2 * self.n_neurons

    def arrays(self) -> List[np.ndarray]:
        return self.theta0.arrays() + list(self.lam_w) + list(self.lam_b)

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MetaParams":
        n = len(self.theta0.layers)
        if len(arrays) != 4 * n:
            raise StructureError(f"expected {4 * n} arrays, got {len(arrays)}")
        return MetaParams(self.theta0.with_arrays(arrays[:2 * n]),
                          list(arrays[2 * n:3 * n]), list(arrays[3 * n:]))

    def copy(self) -> "MetaParams":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def equal(self, other: "MetaParams") -> bool:
        return self.theta0.equal(other.theta0) and all(
            np.array_equal(a, b) for a, b in zip(self.lam_w + self.lam_b, other.lam_w + other.lam_b))


def _check_like(params: ModelParams, arrays: Sequence[np.ndarray], what: str) -> None:
    ref = params.arrays()
    if len(arrays) != len(ref) or any(a.shape != r.shape for a, r in zip(arrays, ref)):
        raise StructureError(f"{what} do not match the parameter structure")


def _neuron_scale(lam: np.ndarray, ndim: int) -> np.ndarray:
    return lam.reshape((-1,) + (1,) * (ndim - 1))


def sgd_step(params: ModelParams, grads: Sequence[np.ndarray], lam_w, lam_b) -> ModelParams:
    """One SGD step with per-neuron weight and bias rates; returns new params."""
    _check_like(params, grads, "gradients")
    if len(lam_w) != len(params.layers) or len(lam_b) != len(params.layers):
        raise StructureError("learning rates do not match the layers")
    out = []
    for i, layer in enumerate(params.layers):
        gw, gb = grads[2 * i], grads[2 * i + 1]
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise NumericError(f"non-finite gradient in layer {layer.name}")
        if lam_w[i].shape != (layer.n_neurons,) or lam_b[i].shape != (layer.n_neurons,):
            raise StructureError(f"{layer.name}: learning-rate shape mismatch")
        w = layer.weight - (_neuron_scale(lam_w[i], gw.ndim) * gw).astype(layer.weight.dtype)
        b = layer.bias - (lam_b[i] * gb).astype(layer.bias.dtype)
        out.append(Layer(layer.name, layer.kind, w, b))
    return ModelParams(out)


# ----------------------------------------------------------------------------
# inner loop


@dataclass
class Trajectory:
    theta0: ModelParams
    grads: List[List[np.ndarray]]   # g^t for t = 0..T-1, detached copies
    thetaT: ModelParams
    losses: List[float]             # training loss at theta^t
    ious: List[float] = field(default_factory=list)

    def __len__(self):
        return len(self.grads)

    def replay(self, lam_w, lam_b) -> ModelParams:
        theta = self.theta0
        for g in self.grads:
            theta = sgd_step(theta, g, lam_w, lam_b)
        return theta


def fine_tune(meta: MetaParams, d_train: Sequence[Sample], T: int, aug: Optional[AugConfig] = None,
              seed=0, objective: Optional[ObjectiveFn] = None, start: Optional[ModelParams] = None,
              allow_zero: bool = False) -> Trajectory:
    """``T`` full-batch SGD steps from ``meta.theta0`` (or ``start``) on ``d_train``.

    With ``aug`` the training samples are re-augmented at every step.
    """
    if T < (0 if allow_zero else 1):
        raise ConfigError(f"T must be at least 1, got {T}")
    objective = objective or SegTaskObjective()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    theta = start if start is not None else meta.theta0
    theta_start = theta
    grads, losses, ious = [], [], []
    for t in range(T):
        data = [augment_sample(s, aug, rng) for s in d_train] if aug is not None else d_train
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                ev = objective(theta, data, rng, True)
        except NumericError as exc:
            raise NumericError(f"inner step {t}: {exc}", step=t) from exc
        if not math.isfinite(ev.loss) or not all(np.isfinite(g).all() for g in ev.grads):
            raise NumericError(f"training loss became non-finite at inner step {t}", step=t)
        snapshot = [np.array(g, copy=True) for g in ev.grads]
        grads.append(snapshot)
        losses.append(ev.loss)
        ious.append(ev.iou)
        theta = sgd_step(theta, snapshot, meta.lam_w, meta.lam_b)
    return Trajectory(theta_start, grads, theta, losses, ious)


@dataclass
class MetaGrad:
    d_theta0: List[np.ndarray]
    d_lam_w: List[np.ndarray]
    d_lam_b: List[np.ndarray]

    def arrays(self) -> List[np.ndarray]:
        return self.d_theta0 + self.d_lam_w + self.d_lam_b

    @classmethod
    def from_arrays(cls, arrays, n_layers: int) -> "MetaGrad":
        return cls(list(arrays[:2 * n_layers]), list(arrays[2 * n_layers:3 * n_layers]),
                   list(arrays[3 * n_layers:]))


def meta_gradients(traj: Trajectory, test_grads: Sequence[np.ndarray]) -> MetaGrad:
    """First-order hypergradients of the test loss at ``theta^T``."""
    _check_like(traj.thetaT, test_grads, "test gradients")
    n = len(traj.thetaT.layers)
    d_theta0 = [np.array(g, copy=True) for g in test_grads]
    d_lw, d_lb = [], []
    for i in range(n):
        gw, gb = test_grads[2 * i], test_grads[2 * i + 1]
        sw = np.zeros(gw.shape, dtype=np.float64)
        sb = np.zeros(gb.shape, dtype=np.float64)
        for g in traj.grads:
            sw += g[2 * i]
            sb += g[2 * i + 1]
        axes = tuple(range(1, gw.ndim))
        d_lw.append(-(gw * sw).sum(axis=axes).astype(gw.dtype))
        d_lb.append(-(gb * sb).astype(gb.dtype))
    return MetaGrad(d_theta0, d_lw, d_lb)


def fd_hypergrad(meta: MetaParams, task: Task, T: int, eps: float = 1e-5,
                 objective: Optional[ObjectiveFn] = None,
                 test_objective: Optional[ObjectiveFn] = None, seed=0) -> MetaGrad:
    """Central finite differences of ``L_test(theta^T(theta0, lambda))``.

    Only sensible for tiny float64 models; every coordinate costs two full
    inner loops.
    """
    objective = objective or SegTaskObjective()
    test_objective = test_objective or objective

    def value(m: MetaParams) -> float:
        traj = fine_tune(m, task.d_train, T, seed=seed, objective=objective)
        return test_objective(traj.thetaT, task.d_test, np.random.default_rng(seed), False).loss

    base = [a.astype(np.float64) for a in meta.arrays()]
    out = []
    for k, arr in enumerate(base):
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            vals = []
            for sign in (1.0, -1.0):
                arrays = [a.copy() for a in base]
                arrays[k][idx] += sign * eps
                vals.append(value(meta.with_arrays(arrays)))
            g[idx] = (vals[0] - vals[1]) / (2 * eps)
        out.append(g)
    return MetaGrad.from_arrays(out, len(meta.theta0.layers))


# ----------------------------------------------------------------------------
# outer optimizer


@dataclass
class OuterState:
    step: int = 0
    m: Optional[List[np.ndarray]] = None
    v: Optional[List[np.ndarray]] = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def outer_step(state: OuterState, meta: MetaParams, grads: MetaGrad, beta: float,
               beta_lambda: Optional[float] = None) -> Tuple[OuterState, MetaParams]:
    """Rectified Adam step on every meta coordinate, then clamp rates at zero.

    While the rectification term is undefined (early steps) the update falls
    back to momentum SGD with the bias-corrected first moment.
    """
    g = grads.arrays()
    params = meta.arrays()
    if len(g) != len(params) or any(a.shape != b.shape for a, b in zip(g, params)):
        raise StructureError("meta gradients do not match the meta parameters")
    if not all(np.isfinite(a).all() for a in g):
        raise NumericError("non-finite meta gradient")
    b1, b2 = state.beta1, state.beta2
    m = state.m or [np.zeros(a.shape) for a in params]
    v = state.v or [np.zeros(a.shape) for a in params]
    t = state.step + 1
    m = [b1 * mi + (1 - b1) * gi for mi, gi in zip(m, g)]
    v = [b2 * vi + (1 - b2) * np.square(gi, dtype=np.float64) for vi, gi in zip(v, g)]
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    rho_t = rho_inf - 2.0 * t * b2 ** t / (1.0 - b2 ** t)
    n_theta = 2 * len(meta.theta0.layers)
    lrs = [beta if k < n_theta or beta_lambda is None else beta_lambda for k in range(len(params))]
    new = []
    for k, (p, mi, vi) in enumerate(zip(params, m, v)):
        m_hat = mi / (1.0 - b1 ** t)
        if rho_t > 4.0:
            r = math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
            v_hat = np.sqrt(vi / (1.0 - b2 ** t))
            upd = r * m_hat / (v_hat + state.eps)
        else:
            upd = m_hat
        new.append((p - lrs[k] * upd).astype(p.dtype))
    for k in range(n_theta, len(new)):
        np.maximum(new[k], 0, out=new[k])
    return replace(state, step=t, m=m, v=v), meta.with_arrays(new)


# ----------------------------------------------------------------------------
# meta training


@dataclass(frozen=True)
class TrainerConfig:
    T: int = 5
    b: int = 4
    beta: float = 1e-4
    beta_lambda: Optional[float] = None   # separate outer rate for lambda; None uses beta
    steps: int = 300
    lambda_init: float = 1e-3
    seed: int = 0
    aug: AugConfig = field(default_factory=AugConfig)
    k_test: int = 3
    lr_mode: str = "neuron"       # neuron | global (one shared rate)
    reduce: str = "sum"           # sum | mean over the task batch
    freeze_lambda: bool = False
    learn_theta0: bool = True
    mask_kind: str = "lovasz"
    classes: str = "present"
    workers: int = 1
    skip_budget: float = 0.01
    arch: ArchConfig = field(default_factory=ArchConfig)

    def validate(self) -> "TrainerConfig":
        if self.T < 0 or self.b < 1 or not self.beta > 0:
            raise ConfigError("need T >= 0, b >= 1 and beta > 0")
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.lr_mode not in ("neuron", "global"):
            raise ConfigError(f"unknown lr_mode {self.lr_mode!r}")
        if self.reduce not in ("sum", "mean"):
            raise ConfigError(f"unknown reduce {self.reduce!r}")
        if self.mask_kind not in ("lovasz", "bce"):
            raise ConfigError(f"unknown mask loss {self.mask_kind!r}")
        if self.lambda_init < 0:
            raise ConfigError("lambda_init must be non-negative")
        self.arch.validate()
        return self

    def objective(self) -> SegTaskObjective:
        return SegTaskObjective(self.arch, self.mask_kind, self.classes)


@dataclass
class TaskResult:
    grad: Optional[MetaGrad]
    loss: float
    iou: float
    error: Optional[str] = None


def _run_task(meta: MetaParams, task: Task, cfg: TrainerConfig, seed_seq) -> TaskResult:
    rng = np.random.default_rng(seed_seq)
    objective = cfg.objective()
    try:
        mt = make_meta_task(task, cfg.aug, rng, k=cfg.k_test)
        traj = fine_tune(meta, mt.d_train, cfg.T, seed=rng, objective=objective, allow_zero=True)
        ev = objective(traj.thetaT, mt.d_test, rng, True)
        if not math.isfinite(ev.loss):
            raise NumericError("test loss is non-finite")
        return TaskResult(meta_gradients(traj, ev.grads), ev.loss, ev.iou)
    except NumericError as exc:
        return TaskResult(None, float("nan"), float("nan"), str(exc))


def _run_task_packed(args):
    return _run_task(*args)


def _tie_global(g: MetaGrad) -> MetaGrad:
    total = sum(float(a.sum()) for a in g.d_lam_w + g.d_lam_b)
    return MetaGrad(g.d_theta0, [np.full_like(a, total) for a in g.d_lam_w],
                    [np.full_like(a, total) for a in g.d_lam_b])


def initial_meta(cfg: TrainerConfig, theta0: Optional[ModelParams] = None) -> MetaParams:
    theta0 = theta0 if theta0 is not None else init_model(cfg.arch, cfg.seed)
    return MetaParams.init(theta0, cfg.lambda_init)


def meta_train(ts: TaskSet, cfg: TrainerConfig, init: Optional[MetaParams] = None,
               history: Optional[List[Dict]] = None,
               callback: Optional[Callable[[int, MetaParams], None]] = None) -> MetaParams:
    """Outer loop: sample a batch, fine-tune on meta tasks, step on the summed hypergradients.

    ``history`` (if given) receives one dict per outer step. A task whose
    inner loop diverges is skipped; more than ``skip_budget`` of the
    planned tasks diverging aborts the run with NumericError.
    """
    cfg.validate()
    if len(ts) == 0:
        raise ConfigError("meta_train needs a non-empty task set")
    meta = init.copy() if init is not None else initial_meta(cfg)
    state = OuterState()
    budget = int(cfg.skip_budget * cfg.steps * cfg.b)
    skipped = 0
    pool = ProcessPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for step in range(cfg.steps):
            batch = sample_batch(ts, cfg.b, np.random.default_rng([cfg.seed, step]))
            jobs = [(meta, task, cfg, [cfg.seed, step, j]) for j, task in enumerate(batch)]
            results = list(pool.map(_run_task_packed, jobs)) if pool else [_run_task(*j) for j in jobs]
            good = [r for r in results if r.grad is not None]
            for r in results:
                if r.error:
                    skipped += 1
                    log.warning("step %d: skipped task (%s)", step, r.error)
            if skipped > budget:
                raise NumericError(f"{skipped} diverging tasks exceed the skip budget of {budget}",
                                   step=step)
            if not good:
                continue
            total = [np.zeros(a.shape, dtype=np.float64) for a in meta.arrays()]
            for r in good:  # fixed task order
                for acc, a in zip(total, r.grad.arrays()):
                    acc += a
            if cfg.reduce == "mean":
                total = [a / len(good) for a in total]
            grad = MetaGrad.from_arrays(total, len(meta.theta0.layers))
            if cfg.lr_mode == "global":
                grad = _tie_global(grad)
            if cfg.freeze_lambda:
                grad = MetaGrad(grad.d_theta0, [np.zeros_like(a) for a in grad.d_lam_w],
                                [np.zeros_like(a) for a in grad.d_lam_b])
            if not cfg.learn_theta0:
                grad = MetaGrad([np.zeros_like(a) for a in grad.d_theta0], grad.d_lam_w, grad.d_lam_b)
            state, meta = outer_step(state, meta, grad, cfg.beta, cfg.beta_lambda)
            if history is not None:
                lam = np.concatenate(meta.lam_w + meta.lam_b)
                history.append({
                    "step": step,
                    "loss": float(np.mean([r.loss for r in good])),
                    "iou": float(np.mean([r.iou for r in good])),
                    "lambda_mean": float(lam.mean()),
                    "lambda_min": float(lam.min()),
                    "lambda_max": float(lam.max()),
                    "lambda_zero_frac": float(np.mean(lam == 0)),
                    "skipped": skipped,
                })
            log.info("step %d loss %.4f iou %.3f", step, np.mean([r.loss for r in good]),
                     np.mean([r.iou for r in good]))
            if callback is not None:
                callback(step, meta)
    finally:
        if pool is not None:
            pool.shutdown()
    return meta


def pretrain(ts: TaskSet, cfg: TrainerConfig, init: Optional[ModelParams] = None) -> ModelParams:
    """Conventional training of the model on augmented frames of the pooled tasks.

    This is the outer loop with zero inner steps and frozen rates, so the
    update direction is the plain training gradient.
    """
    pcfg = replace(cfg, T=0, freeze_lambda=True, lr_mode="neuron")
    meta = MetaParams.init(init if init is not None else init_model(cfg.arch, cfg.seed), 0.0)
    return meta_train(ts, pcfg, init=meta).theta0


def evaluate_tasks(meta: MetaParams, tasks: Sequence[Task], T: int, objective: Optional[ObjectiveFn] = None,
                   aug: Optional[AugConfig] = None, seed: int = 0) -> Dict[str, float]:
    """Fine-tune on each task's training frame and score its test frames.

    Scores are the segmentation loss and the mask-crop IoU at the
    ground-truth box, averaged over tasks.
    """
    objective = objective or SegTaskObjective()
    losses, ious = [], []
    for j, task in enumerate(tasks):
        rng = np.random.default_rng([seed, j])
        traj = fine_tune(meta, task.d_train, T, aug=aug, seed=rng, objective=objective, allow_zero=True)
        test = [s for s in task.d_test if s.mask is not None]
        ev = objective(traj.thetaT, test, rng, False)
        losses.append(ev.loss)
        ious.append(ev.iou)
    return {"loss": float(np.mean(losses)), "iou": float(np.mean(ious))}


# ----------------------------------------------------------------------------
# checkpoints

MAGIC = b"EOSM"
VERSION = 1
_KIND_TAGS = {"conv": 0, "fc": 1, "norm": 2}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}


def save_meta(meta: MetaParams, path: str) -> None:
    """Binary checkpoint; all arrays are stored as little-endian float32."""
    parts = [MAGIC, struct.pack("<II", VERSION, meta.n_neurons), struct.pack("<I", len(meta.theta0.layers))]
    for i, layer in enumerate(meta.theta0.layers):
        name = layer.name.encode("utf-8")
        shape = layer.weight.shape
        parts.append(struct.pack("<BH", _KIND_TAGS[layer.kind], len(name)) + name)
        parts.append(struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape))
        for arr in (layer.weight, layer.bias, meta.lam_w[i], meta.lam_b[i]):
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(payload + struct.pack("<I", zlib.crc32(payload)))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_meta(path: str) -> MetaParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise FormatError("checkpoint is truncated")
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}; not a meta checkpoint")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    payload, crc = data[:-4], data[-4:]
    if len(data) < 16 or struct.unpack("<I", crc)[0] != zlib.crc32(payload):
        raise FormatError("checkpoint checksum mismatch (truncated or corrupt)")
    r = _Reader(payload)
    r.take(8)
    (n_neurons,) = r.unpack("<I")
    (n_layers,) = r.unpack("<I")
    layers, lam_w, lam_b = [], [], []
    for _ in range(n_layers):
        tag, name_len = r.unpack("<BH")
        if tag not in _TAG_KINDS:
            raise FormatError(f"unknown layer kind tag {tag}")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        n = shape[0]
        arrays = []
        for count in (int(np.prod(shape)), n, n, n):
            arrays.append(np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32))
        layers.append(Layer(name, _TAG_KINDS[tag], arrays[0].reshape(shape), arrays[1]))
        lam_w.append(arrays[2])
        lam_b.append(arrays[3])
    if r.pos != len(payload):
        raise FormatError("trailing bytes in checkpoint")
    meta = MetaParams(ModelParams(layers), lam_w, lam_b)
    if meta.n_neurons != n_neurons:
        raise FormatError(f"header announces {n_neurons} neurons, found {meta.n_neurons}")
    return meta
