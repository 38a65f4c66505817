"""Benchmark construction, the single-rate baseline and the additive ablation matrix."""

from __future__ import annotations

import csv
import logging
import math
import os
import re
import time
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .config import RunConfig
from .errors import ConfigError
from .inference import InferenceConfig, SequenceResult, run_taskset
from .metaopt import MetaParams, TrainerConfig, meta_train, pretrain, save_meta
from .segmodel import ModelParams
from .taskset import SynthConfig, TaskSet, gen_synthetic, load_davis_layout, taskset_from_sequences
from .vosmetrics import EvalReport, evaluate

log = logging.getLogger(__name__)


def load_split(source: str, synth: SynthConfig, n_tasks: int, seed: int, split: str) -> TaskSet:
    """``"synthetic"`` generates ``n_tasks`` tasks; anything else is a DAVIS-layout root."""
    if source == "synthetic":
        return gen_synthetic(replace(synth, n_tasks=n_tasks, split=split), seed)
    if not os.path.isdir(source):
        raise ConfigError(f"[data] {split}: no such dataset directory {source!r}")
    ts = load_davis_layout(source, split)
    if not ts.tasks:
        raise ConfigError(f"[data] {split}: no annotated sequences under {source!r}")
    return ts


def benchmark(cfg: RunConfig) -> Tuple[TaskSet, TaskSet]:
    d = cfg.data
    return (load_split(d.train, cfg.synth, d.train_tasks, d.train_seed, "train"),
            load_split(d.test, cfg.synth, d.test_tasks, d.test_seed, "test"))


def distractor_config(base: Optional[SynthConfig] = None) -> SynthConfig:
    """Sequences crowded with look-alike distractors, for probing box propagation."""
    return replace(base or SynthConfig(), max_distractors=4, min_objects=1, max_objects=2)


def validation_split(cfg: RunConfig, train: TaskSet) -> TaskSet:
    """Tasks for picking the baseline rate: a fresh synthetic split, or the head of real training data."""
    ab = cfg.ablate
    if cfg.data.train == "synthetic":
        return load_split("synthetic", cfg.synth, ab.grid_tasks, ab.grid_seed, "test")
    return head(train, ab.grid_tasks)


def head(ts: TaskSet, n_tasks: int) -> TaskSet:
    """Leading sequences of ``ts`` holding at least ``n_tasks`` tasks."""
    picked, count = [], 0
    for seq in ts.sequences:
        if count >= n_tasks:
            break
        picked.append(seq)
        count += len(seq.object_ids)
    return taskset_from_sequences(picked, ts.split)


def run_and_score(meta: MetaParams, ts: TaskSet, icfg: InferenceConfig,
                  seed: int = 0) -> Tuple[EvalReport, List[SequenceResult]]:
    results = run_taskset(meta, ts, icfg, seed=seed)
    return evaluate(results, ts), results


# ----------------------------------------------------------------------------
# handcrafted baseline


@dataclass
class GridResult:
    best_lambda: float
    scores: Dict[float, float]     # J&F (0-100) on the selection set per rate

    @property
    def best_score(self) -> float:
        return self.scores[self.best_lambda]


def grid_search(theta: ModelParams, val: TaskSet, grid: Sequence[float], icfg: InferenceConfig,
                seed: int = 0) -> GridResult:
    """Score one shared learning rate per grid point; the first of equal maxima wins."""
    if not grid:
        raise ConfigError("grid search needs at least one learning rate")
    scores = {}
    for lam in grid:
        meta = MetaParams.init(theta, float(lam))
        scores[float(lam)] = run_and_score(meta, val, icfg, seed)[0].jf
        log.info("grid lambda %.3g: J&F %.2f", lam, scores[float(lam)])
    best = max(scores, key=lambda k: (scores[k], -list(scores).index(k)))
    return GridResult(best, scores)


# ----------------------------------------------------------------------------
# ablation matrix

ROW_DESCRIPTIONS = {
    "grid_search": "fine-tuning with one grid-searched learning rate",
    "learn_init_global": "+ learned initialization and one global learned rate",
    "neuron_lr": "+ neuron-level learned rates",
    "lovasz": "+ Lovasz-Softmax mask loss instead of BCE",
    "box_propagation": "+ bounding box propagation",
    "online_adaptation": "+ online adaptation",
}
_ITERS = re.compile(r"iters_(\d+)$")


def row_description(name: str) -> str:
    m = _ITERS.match(name)
    if m:
        return f"full model with {m.group(1)} fine-tuning iterations"
    if name not in ROW_DESCRIPTIONS:
        raise ConfigError(f"[ablate] rows: unknown row {name!r}")
    return ROW_DESCRIPTIONS[name]


@dataclass
class AblationRow:
    name: str
    description: str
    T: int
    jf: float
    j: float
    f: float
    fps: float
    learning_rate: Optional[float] = None    # the grid-search pick, baseline rows only


@dataclass
class _State:
    lr_mode: Optional[str] = None      # None: pretrained model with the grid-searched rate
    mask_kind: str = "bce"
    propagation: bool = False
    ona: bool = False
    T: Optional[int] = None


class Ablation:
    """Runs rows in order, each toggling one component on top of the previous row.

    Meta-trained models and the pretrained baseline are computed once and
    shared between rows; checkpoints land in ``out_dir`` when given. The
    baseline rate is picked on ``val`` (by default ``validation_split``).
    """

    def __init__(self, cfg: RunConfig, train: TaskSet, test: TaskSet, out_dir: Optional[str] = None,
                 progress: Optional[Callable[[str], None]] = None, val: Optional[TaskSet] = None):
        self.cfg = cfg
        self.train, self.test = train, test
        self.val = val if val is not None else validation_split(cfg, train)
        self.out_dir = out_dir
        self.progress = progress or (lambda msg: log.info(msg))
        self._metas: Dict[Tuple[str, str], MetaParams] = {}
        self._baseline: Dict[str, Tuple[ModelParams, GridResult]] = {}
        self.histories: Dict[Tuple[str, str], List[Dict]] = {}

    def trainer(self, **changes) -> TrainerConfig:
        return replace(self.cfg.trainer, **changes)

    def meta(self, lr_mode: str, mask_kind: str) -> MetaParams:
        key = (lr_mode, mask_kind)
        if key not in self._metas:
            self.progress(f"meta-training lr_mode={lr_mode} loss={mask_kind}")
            hist: List[Dict] = []
            meta = meta_train(self.train, self.trainer(lr_mode=lr_mode, mask_kind=mask_kind), history=hist)
            self._metas[key], self.histories[key] = meta, hist
            if self.out_dir:
                save_meta(meta, os.path.join(self.out_dir, f"meta_{lr_mode}_{mask_kind}.eosm"))
        return self._metas[key]

    def baseline(self, mask_kind: str) -> Tuple[ModelParams, GridResult]:
        if mask_kind not in self._baseline:
            self.progress(f"pretraining baseline loss={mask_kind}")
            theta = pretrain(self.train, self.trainer(mask_kind=mask_kind))
            ab = self.cfg.ablate
            icfg = replace(self.cfg.inference, T=ab.baseline_iters, mask_kind=mask_kind,
                           box_propagation=False, use_ona=False)
            grid = grid_search(theta, self.val, ab.grid, icfg, self.cfg.run.seed)
            self._baseline[mask_kind] = (theta, grid)
            if self.out_dir:
                save_meta(MetaParams.init(theta, grid.best_lambda),
                          os.path.join(self.out_dir, f"baseline_{mask_kind}.eosm"))
        return self._baseline[mask_kind]

    def _score(self, name: str, meta: MetaParams, icfg: InferenceConfig, lam=None) -> AblationRow:
        t0 = time.perf_counter()
        report, _ = run_and_score(meta, self.test, icfg, self.cfg.run.seed)
        self.progress(f"{name}: J&F {report.jf:.2f} ({time.perf_counter() - t0:.0f}s)")
        return AblationRow(name, row_description(name), icfg.T, report.jf, report.j_mean, report.f_mean,
                           report.fps, lam)

    def run(self, rows: Optional[Sequence[str]] = None) -> List[AblationRow]:
        rows = list(rows if rows is not None else self.cfg.ablate.rows)
        for name in rows:
            row_description(name)
        state = _State()
        out = []
        for name in rows:
            m = _ITERS.match(name)
            if m:
                state.T = int(m.group(1))
            elif name == "learn_init_global":
                state.lr_mode = "global"
            elif name == "neuron_lr":
                state.lr_mode = "neuron"
            elif name == "lovasz":
                state.mask_kind = "lovasz"
            elif name == "box_propagation":
                state.propagation = True
            elif name == "online_adaptation":
                state.ona = True
            base = replace(self.cfg.inference, mask_kind=state.mask_kind,
                           box_propagation=state.propagation, use_ona=state.ona)
            if name == "grid_search" or state.lr_mode is None:
                theta, grid = self.baseline(state.mask_kind)
                T = state.T if state.T is not None and name != "grid_search" else self.cfg.ablate.baseline_iters
                out.append(self._score(name, MetaParams.init(theta, grid.best_lambda), replace(base, T=T),
                                       grid.best_lambda))
            else:
                meta = self.meta(state.lr_mode, state.mask_kind)
                T = state.T if state.T is not None else self.cfg.inference.T
                out.append(self._score(name, meta, replace(base, T=T)))
        return out


ABLATION_COLUMNS = ("row", "description", "iterations", "JF", "J_mean", "F_mean", "FPS", "learning_rate")


def _num(v) -> str:
    return "nan" if not math.isfinite(v) else f"{v:.6f}"


def write_ablation_csv(rows: Sequence[AblationRow], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([r.name, r.description, r.T, _num(r.jf), _num(r.j), _num(r.f), _num(r.fps),
                        "" if r.learning_rate is None else f"{r.learning_rate:.6g}"])

