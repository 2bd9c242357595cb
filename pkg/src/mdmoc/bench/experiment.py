"""Desk-scale continual merging benchmark.

Each run builds ``tasks`` synthetic classification tasks, a shared base
network, and one fine-tuned model per task.  Three strategies then learn
the tasks in order:

``mdm-oc``
    integrate each new delta into an orthogonal basis, then re-optimize the
    merge coefficients on the validation splits seen so far;
``raw-average``
    equal-weight average of the raw deltas seen so far;
``sequential``
    plain sequential fine-tuning of one network.

The accuracy matrices feed ACC/BWT/FWT, and removing a model from the final
merge gives UAD for the two merging strategies.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields

import numpy as np

from ..errors import ValidationError
from ..merge_engine import MergeState, integrate, merge, set_alphas
from ..optimizer import (
    CmaConfig,
    FitnessSpec,
    FitnessTask,
    GradConfig,
    cma_minimize,
    adam_minimize,
)
from ..orthogonalizer import OrthogonalBasis
from ..parameter_store import ParameterVector, extract_delta
from ..stability import (
    StabilizedObjective,
    estimate_fisher_diag,
    generate_replay,
)
from . import mlp
from .metrics import MetricReport, compute_metrics, compute_uad
from .mlp import MlpSpec
from .tasks import TaskBundle, adam_epochs, evaluate, make_task, train_task

METHODS = ("mdm-oc", "raw-average", "sequential")


@dataclass(frozen=True)
class BenchConfig:
    tasks: int = 5
    dims: int = 16
    classes: int = 4
    separation: float = 3.0
    hidden: tuple[int, ...] = (32, 32)
    seed: int = 0
    epochs: int = 10
    lr: float = 3e-3
    warmup_epochs: int = 2
    method: str = "cmaes"
    population: int = 50
    sigma0: float = 0.3
    max_iters: int = 300
    ewc_lambda: float = 0.0
    fisher_samples: int = 200
    replay_count: int = 0
    replay_sigma: float = 0.1
    loss_kind: str = "cross-entropy"
    balancing: str = "none"

    def __post_init__(self):
        if self.tasks < 2:
            raise ValidationError("the benchmark needs at least two tasks")
        if self.method not in ("cmaes", "grad"):
            raise ValidationError(f"unknown optimizer method {self.method!r}")

    @property
    def mlp_spec(self) -> MlpSpec:
        return MlpSpec(self.dims, tuple(self.hidden), self.classes, heads=self.tasks)

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "BenchConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ValidationError(f"unknown benchmark setting {key!r}")
            default = getattr(cls(), key)
            if isinstance(default, tuple):
                kwargs[key] = tuple(int(v) for v in str(raw).split(",") if v)
            elif isinstance(default, bool):
                kwargs[key] = str(raw).lower() in ("1", "true", "yes")
            else:
                kwargs[key] = type(default)(raw)
        return cls(**kwargs)


@dataclass
class BenchWorld:
    """Everything a strategy needs: tasks, base network, fine-tuned models."""

    config: BenchConfig
    spec: MlpSpec
    tasks: list[TaskBundle]
    base: ParameterVector
    solo: list[ParameterVector]

    @property
    def ids(self) -> list[str]:
        return [t.task_id for t in self.tasks]

    def task(self, task_id: str) -> TaskBundle:
        return self.tasks[self.ids.index(task_id)]

    def accuracy(self, theta: np.ndarray, task_id: str, split: str = "test") -> float:
        return evaluate(theta, self.spec, self.task(task_id), split)[1]


def warm_up(base: ParameterVector, spec: MlpSpec, tasks: list[TaskBundle], epochs: int, lr: float, seed: int) -> ParameterVector:
    """Short joint training on all tasks so deltas share a meaningful origin."""
    if epochs == 0:
        return base
    xs = np.vstack([t.train_x for t in tasks])
    ys = np.concatenate([t.train_y for t in tasks])
    heads = np.concatenate([np.full(len(t.train_y), t.head) for t in tasks])

    def loss_grad(theta, idx):
        total, grad = 0.0, np.zeros_like(theta)
        for h in np.unique(heads[idx]):
            sel = idx[heads[idx] == h]
            loss, g = mlp.loss_and_grad(spec, theta, xs[sel], ys[sel], int(h))
            total += loss * len(sel) / len(idx)
            grad += g * len(sel) / len(idx)
        return total, grad

    return base.with_values(adam_epochs(base.values, loss_grad, len(ys), epochs, lr, seed))


def build_world(cfg: BenchConfig) -> BenchWorld:
    spec = cfg.mlp_spec
    tasks = [
        make_task(cfg.seed * 1000 + t + 1, cfg.classes, cfg.dims, cfg.separation, task_id=f"task{t}", head=t)
        for t in range(cfg.tasks)
    ]
    base = mlp.init_params(spec, cfg.seed)
    base = warm_up(base, spec, tasks, cfg.warmup_epochs, cfg.lr * 0.1, cfg.seed + 17)
    solo = [train_task(base, spec, t, cfg.epochs, cfg.lr, cfg.seed + 31 * (i + 1)) for i, t in enumerate(tasks)]
    return BenchWorld(cfg, spec, tasks, base, solo)


def fitness_spec(world: BenchWorld, task_ids, split: str = "val") -> FitnessSpec:
    kind = world.config.loss_kind
    out = []
    for tid in task_ids:
        task = world.task(tid)
        x, y = task.split(split)

        def loss(theta, x=x, y=y, head=task.head):
            return float(mlp.loss_from_logits(mlp.forward(world.spec, theta, x, head), y, kind))

        def batch_loss(thetas, x=x, y=y, head=task.head):
            return mlp.loss_from_logits(mlp.forward_population(world.spec, thetas, x, head), y, kind)

        def value_and_grad(theta, x=x, y=y, head=task.head):
            return mlp.loss_and_grad(world.spec, theta, x, y, head, kind)

        out.append(FitnessTask(tid, loss, 1.0, value_and_grad, batch_loss))
    return FitnessSpec(tuple(out), kind, world.config.balancing)


def optimize_alphas(world: BenchWorld, state: MergeState, task_ids, fisher=None, replays=()) -> np.ndarray:
    cfg = world.config
    spec = fitness_spec(world, task_ids)
    objective = StabilizedObjective(spec, state, fisher, replays, cfg.ewc_lambda, world.spec)
    x0 = np.ones(len(state.basis))
    if cfg.method == "cmaes":
        cma = CmaConfig(cfg.population, cfg.sigma0, cfg.max_iters, cfg.seed, 1e-9)
        return cma_minimize(objective.population, x0, cma).alphas

    def value_and_grad(alphas):
        total, grad, _ = objective.task.value_and_grad(alphas)
        return total + objective._extra(objective.task.theta(alphas)), grad

    if fisher is not None or replays:
        raise ValidationError("the gradient optimizer does not support EWC or replay terms")
    return adam_minimize(value_and_grad, x0, GradConfig()).alphas


@dataclass
class StrategyRun:
    name: str
    matrix: np.ndarray
    final: np.ndarray
    losses: np.ndarray
    uad: float = float("nan")
    recovery_seconds: float = float("nan")


def _matrix_row(world: BenchWorld, theta: np.ndarray, stage: int) -> np.ndarray:
    t = len(world.tasks)
    row = np.full(t, np.nan)
    for j in range(min(stage + 2, t)):
        row[j] = world.accuracy(theta, world.ids[j])
    return row


def run_mdm_oc(world: BenchWorld) -> tuple[StrategyRun, MergeState]:
    cfg = world.config
    t = len(world.tasks)
    fisher = None
    if cfg.ewc_lambda > 0:
        pooled_x = np.vstack([tk.val_x for tk in world.tasks])
        pooled_y = np.concatenate([tk.val_y for tk in world.tasks])
        fisher = estimate_fisher_diag(world.base, world.spec, pooled_x, pooled_y, cfg.fisher_samples, cfg.seed)
    state = merge(world.base, OrthogonalBasis(), {}, operator="bench", clock=lambda: "")
    matrix = np.full((t, t), np.nan)
    for i, tid in enumerate(world.ids):
        delta = extract_delta(world.solo[i], world.base, tid)
        state = integrate(state, delta, 1.0)
        seen = [k for k in world.ids[: i + 1] if k in state.basis]
        replays = []
        if cfg.replay_count:
            replays = [
                generate_replay(world.base, world.spec, world.task(k).val_x, cfg.replay_count, cfg.replay_sigma, cfg.seed, world.task(k).head)
                for k in seen
            ]
        alphas = optimize_alphas(world, state, seen, fisher, replays)
        state = set_alphas(state, dict(zip(state.ids, alphas)))
        matrix[i] = _matrix_row(world, state.merged.values, i)
    run = StrategyRun("mdm-oc", matrix, state.merged.values, _losses(world, state.merged.values))
    return run, state


def run_raw_average(world: BenchWorld) -> tuple[StrategyRun, list[np.ndarray]]:
    t = len(world.tasks)
    deltas = [s.values - world.base.values for s in world.solo]
    matrix = np.full((t, t), np.nan)
    theta = world.base.values
    for i in range(t):
        theta = world.base.values + np.mean(deltas[: i + 1], axis=0)
        matrix[i] = _matrix_row(world, theta, i)
    return StrategyRun("raw-average", matrix, theta, _losses(world, theta)), deltas


def run_sequential(world: BenchWorld) -> StrategyRun:
    cfg = world.config
    t = len(world.tasks)
    matrix = np.full((t, t), np.nan)
    theta = world.base
    for i, task in enumerate(world.tasks):
        theta = train_task(theta, world.spec, task, cfg.epochs, cfg.lr, cfg.seed + 31 * (i + 1))
        matrix[i] = _matrix_row(world, theta.values, i)
    return StrategyRun("sequential", matrix, theta.values, _losses(world, theta.values))


def _losses(world: BenchWorld, theta: np.ndarray) -> np.ndarray:
    return np.array([evaluate(theta, world.spec, tk, "test")[0] for tk in world.tasks])


def raw_uad(world: BenchWorld, deltas: list[np.ndarray], removed: int) -> float:
    t = len(deltas)
    before = world.base.values + np.mean(deltas, axis=0)
    after = before - deltas[removed] / t
    rest = [tid for j, tid in enumerate(world.ids) if j != removed]
    return float(np.mean([world.accuracy(before, k) - world.accuracy(after, k) for k in rest]))


@dataclass
class BenchResult:
    config: BenchConfig
    runs: dict[str, StrategyRun]
    reports: dict[str, MetricReport]
    solo_accuracy: np.ndarray
    solo_loss: np.ndarray
    removed: str

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "stage", "task", "accuracy", "loss", "epsilon", "acc", "bwt", "fwt", "uad"])
        for name, run in self.runs.items():
            m = run.matrix
            for i in range(m.shape[0]):
                for j in range(m.shape[1]):
                    if not np.isnan(m[i, j]):
                        w.writerow([name, i, f"task{j}", _fmt(m[i, j]), "", "", "", "", "", ""])
            for j, loss in enumerate(run.losses):
                eps = loss - self.solo_loss[j]
                w.writerow([name, "final", f"task{j}", _fmt(m[-1, j]), _fmt(loss), _fmt(eps), "", "", "", ""])
            r = self.reports[name]
            w.writerow([name, "summary", "", "", "", "", _fmt(r.acc), _fmt(r.bwt), _fmt(r.fwt), _fmt(r.uad)])
        return buf.getvalue()


def _fmt(x: float) -> str:
    return "nan" if x != x else f"{x:.6f}"


def run_bench(cfg: BenchConfig, removed: int | None = None) -> BenchResult:
    """Run all three strategies on one seed.  ``removed`` defaults to the last task."""
    world = build_world(cfg)
    t = len(world.tasks)
    removed = t - 1 if removed is None else removed
    chance = 1.0 / cfg.classes

    mdm, state = run_mdm_oc(world)
    uad, seconds, _ = compute_uad(state, world.ids[removed], world.accuracy)
    mdm.uad, mdm.recovery_seconds = uad, seconds

    raw, deltas = run_raw_average(world)
    raw.uad = raw_uad(world, deltas, removed)
    seq = run_sequential(world)

    runs = {r.name: r for r in (mdm, raw, seq)}
    reports = {name: compute_metrics(r.matrix, chance, r.uad) for name, r in runs.items()}
    solo = np.array([world.accuracy(s.values, tid) for s, tid in zip(world.solo, world.ids)])
    solo_loss = np.array([evaluate(s.values, world.spec, tk, "test")[0] for s, tk in zip(world.solo, world.tasks)])
    return BenchResult(cfg, runs, reports, solo, solo_loss, world.ids[removed])
