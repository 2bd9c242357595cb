"""Search for merge coefficients.

Two optimizers share one objective, the weighted sum of per-task validation
losses of ``base + sum_j alpha_j * member_j``:

* :func:`optimize_cmaes` -- (mu/mu_w, lambda)-CMA-ES with rank-one and
  rank-mu covariance updates, started at alpha = 1;
* :func:`optimize_gradient` -- Adam on the exact alpha-gradient
  ``dL/dalpha_j = <grad_theta L, member_j>`` with global-norm clipping and
  early stopping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError, ValidationError
from .merge_engine import MergeState

BALANCE_EPS = 1e-12


@dataclass(frozen=True)
class FitnessTask:
    """One term of the objective.

    ``loss`` maps a parameter vector to a scalar.  ``value_and_grad`` (for
    the gradient optimizer) returns the loss and its gradient with respect
    to the parameters.  ``batch_loss`` evaluates a stack of parameter
    vectors at once and is used by CMA-ES when present.
    """

    task_id: str
    loss: Callable[[np.ndarray], float]
    weight: float = 1.0
    value_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]] | None = None
    batch_loss: Callable[[np.ndarray], np.ndarray] | None = None


@dataclass(frozen=True)
class FitnessSpec:
    tasks: tuple[FitnessTask, ...]
    loss_kind: str = "cross-entropy"
    balancing: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if not self.tasks:
            raise ValidationError("fitness needs at least one task")
        for t in self.tasks:
            if not t.weight > 0:
                raise ValidationError(f"task {t.task_id!r}: importance weight must be > 0")
        if self.balancing not in ("none", "adaptive"):
            raise ValidationError(f"unknown balancing mode {self.balancing!r}")
        if self.loss_kind not in ("cross-entropy", "squared-error"):
            raise ValidationError(f"unknown loss kind {self.loss_kind!r}")

    def weights(self) -> np.ndarray:
        return np.array([t.weight for t in self.tasks], dtype=np.float64)


def adaptive_balance(per_task_losses: Sequence[float], eps: float = BALANCE_EPS) -> np.ndarray:
    """Weights inversely proportional to the initial losses, summing to the task count."""
    losses = np.asarray(per_task_losses, dtype=np.float64)
    if losses.size == 0 or not np.all(np.isfinite(losses)):
        raise ValidationError("need at least one finite loss")
    inv = 1.0 / np.maximum(losses, eps)
    return inv * (losses.size / inv.sum())


class MergeObjective:
    """Fitness of merge coefficients for a fixed state.

    With adaptive balancing the balance factors are computed once, at
    ``alpha0``, and frozen.
    """

    def __init__(self, spec: FitnessSpec, state: MergeState, alpha0=None):
        if len(state.basis) == 0:
            raise ValidationError("merge state has an empty basis")
        self.spec = spec
        self.ids = state.ids
        self.base = np.asarray(state.base.values)
        self.members = state.basis.matrix()
        self.n = len(self.ids)
        self.weights = spec.weights()
        if spec.balancing == "adaptive":
            a0 = np.ones(self.n) if alpha0 is None else np.asarray(alpha0, dtype=np.float64)
            self.weights = self.weights * adaptive_balance(self._raw_losses(self.theta(a0)))

    def theta(self, alphas) -> np.ndarray:
        alphas = np.asarray(alphas, dtype=np.float64)
        if alphas.shape[-1] != self.n:
            raise ValidationError(f"expected {self.n} coefficients, got {alphas.shape[-1]}")
        return self.base + alphas @ self.members

    def _raw_losses(self, theta) -> np.ndarray:
        out = np.empty(len(self.spec.tasks))
        for i, t in enumerate(self.spec.tasks):
            try:
                out[i] = t.loss(theta)
            except Exception as exc:
                raise NumericalError(f"evaluation of task {t.task_id!r} failed: {exc}") from exc
        return out

    def __call__(self, alphas) -> tuple[float, np.ndarray]:
        per_task = self._raw_losses(self.theta(alphas))
        return float(self.weights @ per_task), per_task

    def population(self, alpha_matrix) -> np.ndarray:
        """Total fitness of every row of ``alpha_matrix``."""
        alpha_matrix = np.atleast_2d(np.asarray(alpha_matrix, dtype=np.float64))
        thetas = self.theta(alpha_matrix)
        totals = np.zeros(alpha_matrix.shape[0])
        for w, t in zip(self.weights, self.spec.tasks):
            try:
                if t.batch_loss is not None:
                    losses = np.asarray(t.batch_loss(thetas), dtype=np.float64)
                else:
                    losses = np.array([t.loss(th) for th in thetas])
            except Exception as exc:
                raise NumericalError(f"evaluation of task {t.task_id!r} failed: {exc}") from exc
            totals += w * losses
        return totals

    def value_and_grad(self, alphas) -> tuple[float, np.ndarray, np.ndarray]:
        theta = self.theta(alphas)
        per_task = np.empty(len(self.spec.tasks))
        g_theta = np.zeros_like(theta)
        for i, (w, t) in enumerate(zip(self.weights, self.spec.tasks)):
            if t.value_and_grad is None:
                raise ValidationError(f"task {t.task_id!r} provides no gradient")
            per_task[i], g = t.value_and_grad(theta)
            g_theta += w * np.asarray(g)
        # theta is affine in alpha: dtheta/dalpha_j = member_j
        return float(self.weights @ per_task), self.members @ g_theta, per_task


def evaluate_fitness(alphas, spec: FitnessSpec, state: MergeState) -> tuple[float, np.ndarray]:
    return MergeObjective(spec, state, alphas)(alphas)


# ---------------------------------------------------------------------------
# CMA-ES


@dataclass(frozen=True)
class CmaConfig:
    population: int = 50
    sigma0: float = 0.3
    max_iters: int = 300
    seed: int = 0
    tol_fitness: float = 1e-14

    def __post_init__(self):
        if self.population < 4:
            raise ValidationError("CMA-ES population must be at least 4")
        if not self.sigma0 > 0:
            raise ValidationError("sigma0 must be positive")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be positive")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    best: float
    mean: float
    sigma: float


@dataclass
class OptimizeResult:
    alphas: np.ndarray
    best: float
    history: list[float] = field(default_factory=list)
    trace: list[IterationRecord] = field(default_factory=list)

    def __iter__(self):
        return iter((self.alphas, self.history))


def cma_minimize(fun_population: Callable[[np.ndarray], np.ndarray], x0, cfg: CmaConfig) -> OptimizeResult:
    """Minimize ``fun_population`` (rows of candidates -> fitness values).

    Non-finite fitness values rank last; a generation with no finite value
    raises :class:`NumericalError`.
    """
    xmean = np.array(x0, dtype=np.float64).reshape(-1)
    n = xmean.size
    lam = cfg.population
    mu = lam // 2
    w = np.log(lam / 2 + 0.5) - np.log(np.arange(1, mu + 1))
    w /= w.sum()
    mueff = 1.0 / np.sum(w**2)

    cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
    cs = (mueff + 2) / (n + mueff + 5)
    c1 = 2 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
    damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + cs
    chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n**2))

    rng = np.random.default_rng(cfg.seed)
    sigma = cfg.sigma0
    pc = np.zeros(n)
    ps = np.zeros(n)
    B = np.eye(n)
    D = np.ones(n)
    C = np.eye(n)

    best_x, best_f = xmean.copy(), math.inf
    history: list[float] = []
    trace: list[IterationRecord] = []
    for it in range(1, cfg.max_iters + 1):
        z = rng.standard_normal((lam, n))
        y = (z * D) @ B.T
        x = xmean + sigma * y
        f = np.asarray(fun_population(x), dtype=np.float64).reshape(-1)
        finite = np.isfinite(f)
        if not finite.any():
            raise NumericalError(f"CMA-ES iteration {it}: every candidate has non-finite fitness")
        ranked = np.where(finite, f, np.inf)
        order = np.argsort(ranked, kind="stable")
        if ranked[order[0]] < best_f:
            best_f, best_x = float(ranked[order[0]]), x[order[0]].copy()

        xold = xmean
        ysel = y[order[:mu]]
        yw = w @ ysel
        xmean = xold + sigma * yw

        inv_sqrt_c = B @ np.diag(1.0 / D) @ B.T
        ps = (1 - cs) * ps + math.sqrt(cs * (2 - cs) * mueff) * (inv_sqrt_c @ yw)
        ps_norm = float(np.linalg.norm(ps))
        hsig = ps_norm / math.sqrt(1 - (1 - cs) ** (2 * it)) / chi_n < 1.4 + 2 / (n + 1)
        pc = (1 - cc) * pc + hsig * math.sqrt(cc * (2 - cc) * mueff) * yw
        rank_mu = (ysel * w[:, None]).T @ ysel
        C = (
            (1 - c1 - cmu) * C
            + c1 * (np.outer(pc, pc) + (not hsig) * cc * (2 - cc) * C)
            + cmu * rank_mu
        )
        sigma *= math.exp((cs / damps) * (ps_norm / chi_n - 1))

        C = np.triu(C) + np.triu(C, 1).T
        evals, B = np.linalg.eigh(C)
        D = np.sqrt(np.maximum(evals, 1e-300))

        history.append(best_f)
        trace.append(IterationRecord(it, best_f, float(f[finite].mean()), sigma))

        window = 10 + int(30 * n / lam)
        if it > window and history[-window - 1] - best_f <= cfg.tol_fitness:
            spread = ranked[order[-1]] - ranked[order[0]] if finite.all() else math.inf
            if spread <= cfg.tol_fitness:
                break
        if sigma * D.max() < 1e-15 * max(1.0, float(np.abs(xmean).max())):
            break
    return OptimizeResult(best_x, best_f, history, trace)


def optimize_cmaes(spec: FitnessSpec, state: MergeState, cfg: CmaConfig = CmaConfig()) -> OptimizeResult:
    """CMA-ES over the coefficients, starting from alpha = 1 for every member."""
    x0 = np.ones(len(state.basis))
    objective = MergeObjective(spec, state, x0)
    return cma_minimize(objective.population, x0, cfg)


# ---------------------------------------------------------------------------
# gradient path


@dataclass(frozen=True)
class GradConfig:
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 10.0
    patience: int = 50
    max_epochs: int = 2000

    def __post_init__(self):
        if self.lr < 0:
            raise ValidationError("lr must be non-negative")
        if not self.clip_norm > 0:
            raise ValidationError("clip_norm must be positive")


def adam_minimize(value_and_grad: Callable, x0, cfg: GradConfig) -> OptimizeResult:
    """Full-batch Adam with global-norm clipping; returns the best iterate seen."""
    x = np.array(x0, dtype=np.float64).reshape(-1)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    best_x, best_f = x.copy(), math.inf
    history: list[float] = []
    trace: list[IterationRecord] = []
    stall = 0
    for epoch in range(1, cfg.max_epochs + 1):
        f, g = value_and_grad(x)
        g = np.asarray(g, dtype=np.float64)
        if not math.isfinite(f) or not np.all(np.isfinite(g)):
            raise NumericalError(
                f"non-finite objective or gradient at epoch {epoch}: f={f}, |g|={np.linalg.norm(g)}, alphas={x}"
            )
        if f < best_f:
            best_f, best_x, stall = f, x.copy(), 0
        else:
            stall += 1
        history.append(best_f)
        trace.append(IterationRecord(epoch, best_f, f, cfg.lr))
        if stall >= cfg.patience:
            break
        gnorm = float(np.linalg.norm(g))
        if gnorm > cfg.clip_norm:
            g = g * (cfg.clip_norm / gnorm)
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1**epoch)
        vhat = v / (1 - cfg.beta2**epoch)
        x = x - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
    return OptimizeResult(best_x, best_f, history, trace)


def optimize_gradient(spec: FitnessSpec, state: MergeState, cfg: GradConfig = GradConfig()) -> OptimizeResult:
    x0 = np.ones(len(state.basis))
    objective = MergeObjective(spec, state, x0)

    def value_and_grad(alphas):
        total, grad, _ = objective.value_and_grad(alphas)
        return total, grad

    return adam_minimize(value_and_grad, x0, cfg)
