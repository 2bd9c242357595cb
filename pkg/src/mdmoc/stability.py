"""EWC penalty with a diagonal Fisher, and synthetic replay of base-model outputs."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .bench import mlp
from .bench.mlp import MlpSpec
from .errors import NumericalError, ShapeError, ValidationError
from .merge_engine import MergeState
from .optimizer import FitnessSpec, MergeObjective
from .parameter_store import (
    Checkpoint,
    ParameterVector,
    atomic_write_bytes,
    flatten,
    unflatten,
)

EWC_LAMBDA = 1000.0
REPLAY_COUNT = 100
REPLAY_SIGMA = 0.1
FISHER_LAYER = "fisher_diag"


@dataclass(frozen=True, eq=False)
class FisherDiag:
    values: np.ndarray
    reference: ParameterVector
    sample_count: int

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        if v.shape[0] != len(self.reference):
            raise ShapeError("Fisher diagonal and reference vector lengths differ")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValidationError("Fisher entries must be finite and non-negative")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def to_checkpoint(self) -> Checkpoint:
        ckpt = unflatten(self.reference, {"kind": "fisher", "sample_count": str(self.sample_count)})
        ckpt.tensors = {f"reference/{k}": v for k, v in ckpt.tensors.items()}
        ckpt.tensors[FISHER_LAYER] = self.values.copy()
        return ckpt

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "FisherDiag":
        if ckpt.metadata.get("kind") != "fisher":
            raise ValidationError("checkpoint does not hold a Fisher diagonal")
        ref = {k[len("reference/") :]: v for k, v in ckpt.tensors.items() if k.startswith("reference/")}
        reference = flatten(Checkpoint(ref))
        return cls(ckpt.tensors[FISHER_LAYER], reference, int(ckpt.metadata["sample_count"]))


def estimate_fisher_diag(
    model: ParameterVector,
    spec: MlpSpec,
    x: np.ndarray,
    y: np.ndarray,
    samples: int,
    seed: int = 0,
    head: int = 0,
) -> FisherDiag:
    """Mean squared per-example gradient of the log-likelihood of the true label.

    ``samples`` examples are drawn without replacement (with replacement if
    more are requested than exist).  The examples are processed in sampled
    order and reduced sequentially so the estimate is reproducible.
    """
    if samples < 1:
        raise ValidationError("samples must be at least 1")
    n = len(y)
    rng = np.random.default_rng(seed)
    idx = rng.permutation(n)[:samples] if samples <= n else rng.integers(0, n, samples)
    acc = np.zeros(len(model))
    for i in idx:
        _, g = mlp.loss_and_grad(spec, model.values, x[i : i + 1], y[i : i + 1], head)
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for example {i}")
        acc += g * g
    return FisherDiag(acc / samples, model, samples)


def _check(theta, fisher: FisherDiag) -> np.ndarray:
    values = theta.values if isinstance(theta, ParameterVector) else np.asarray(theta, dtype=np.float64)
    if values.shape != fisher.values.shape:
        raise ShapeError(f"parameter length {values.shape} does not match Fisher length {fisher.values.shape}")
    return values


def ewc_penalty(theta, fisher: FisherDiag, lam: float = EWC_LAMBDA) -> float:
    diff = _check(theta, fisher) - fisher.reference.values
    return float(lam * np.sum(fisher.values * diff * diff))


def ewc_gradient(theta, fisher: FisherDiag, lam: float = EWC_LAMBDA) -> np.ndarray:
    diff = _check(theta, fisher) - fisher.reference.values
    return 2.0 * lam * fisher.values * diff


# ---------------------------------------------------------------------------
# replay


@dataclass(frozen=True, eq=False)
class ReplaySet:
    inputs: np.ndarray  # count x input_dim
    targets: np.ndarray  # count x classes, base-model probabilities
    noise_sigma: float = REPLAY_SIGMA
    per_task_count: int = REPLAY_COUNT
    seed: int = 0
    head: int = 0

    def __post_init__(self):
        if not np.all(np.isfinite(self.inputs)):
            raise ValidationError("replay inputs must be finite")
        if len(self.inputs) != len(self.targets):
            raise ShapeError("replay inputs and targets differ in length")


def generate_replay(
    base_model: ParameterVector,
    spec: MlpSpec,
    task_inputs: np.ndarray,
    count: int = REPLAY_COUNT,
    sigma: float = REPLAY_SIGMA,
    seed: int = 0,
    head: int = 0,
) -> ReplaySet:
    """Noisy copies of the mean task input, labelled with the base model's soft outputs."""
    if count < 1:
        raise ValidationError("count must be at least 1")
    if sigma < 0:
        raise ValidationError("sigma must be non-negative")
    center = np.asarray(task_inputs, dtype=np.float64).mean(axis=0)
    rng = np.random.default_rng(seed)
    inputs = center + rng.normal(0.0, 1.0, (count, center.size)) * sigma
    targets = mlp.softmax(mlp.forward(spec, base_model.values, inputs, head))
    return ReplaySet(inputs, targets, sigma, count, seed, head)


def replay_kl(theta, spec: MlpSpec, replay: ReplaySet) -> float:
    """Mean KL(model outputs || replay targets) over the replay inputs."""
    values = theta.values if isinstance(theta, ParameterVector) else np.asarray(theta)
    logp = mlp.log_softmax(mlp.forward(spec, values, replay.inputs, replay.head))
    logq = np.log(np.clip(replay.targets, 1e-300, None))
    return float(np.mean(np.sum(np.exp(logp) * (logp - logq), axis=1)))


def save_replay(replay: ReplaySet, path) -> None:
    """Header ``MDMR``, u32 count, u32 input dim, u32 classes, f64 sigma, u64 seed, u32 head; then f64 data."""
    header = b"MDMR" + struct.pack(
        "<IIIdQI", len(replay.inputs), replay.inputs.shape[1], replay.targets.shape[1],
        replay.noise_sigma, replay.seed, replay.head,
    )
    body = replay.inputs.astype("<f8").tobytes() + replay.targets.astype("<f8").tobytes()
    atomic_write_bytes(path, header + body)


def load_replay(path) -> ReplaySet:
    data = Path(path).read_bytes()
    if data[:4] != b"MDMR":
        raise ValidationError("not a replay file")
    fmt = "<IIIdQI"
    hsize = 4 + struct.calcsize(fmt)
    count, dim, classes, sigma, seed, head = struct.unpack(fmt, data[4:hsize])
    need = hsize + 8 * count * (dim + classes)
    if len(data) != need:
        raise ValidationError(f"replay file has {len(data)} bytes, expected {need}")
    arr = np.frombuffer(data[hsize:], dtype="<f8")
    inputs = arr[: count * dim].reshape(count, dim).copy()
    targets = arr[count * dim :].reshape(count, classes).copy()
    return ReplaySet(inputs, targets, sigma, count, seed, head)


def stabilized_fitness(
    alphas,
    spec: FitnessSpec,
    state: MergeState,
    fisher: FisherDiag | None = None,
    replays: Sequence[ReplaySet] = (),
    lam: float = EWC_LAMBDA,
    mlp_spec: MlpSpec | None = None,
) -> float:
    """Task fitness plus the EWC penalty plus the mean replay KL of the candidate merge."""
    return StabilizedObjective(spec, state, fisher, replays, lam, mlp_spec)(alphas)


class StabilizedObjective:
    def __init__(self, spec, state, fisher=None, replays=(), lam=EWC_LAMBDA, mlp_spec=None):
        if replays and mlp_spec is None:
            raise ValidationError("replay terms need the MLP spec")
        self.task = MergeObjective(spec, state)
        self.fisher = fisher
        self.replays = tuple(replays)
        self.lam = lam
        self.mlp_spec = mlp_spec

    def _extra(self, theta) -> float:
        out = 0.0
        if self.fisher is not None and self.lam:
            out += ewc_penalty(theta, self.fisher, self.lam)
        if self.replays:
            out += float(np.mean([replay_kl(theta, self.mlp_spec, r) for r in self.replays]))
        return out

    def __call__(self, alphas) -> float:
        total, _ = self.task(alphas)
        return total + self._extra(self.task.theta(alphas))

    def population(self, alpha_matrix) -> np.ndarray:
        alpha_matrix = np.atleast_2d(alpha_matrix)
        base = self.task.population(alpha_matrix)
        thetas = self.task.theta(alpha_matrix)
        return base + np.array([self._extra(t) for t in thetas])
