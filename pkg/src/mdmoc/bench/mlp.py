"""A small tanh MLP with one softmax head per task and hand-written backprop.

Parameters live in a flat float64 vector (see :mod:`mdmoc.parameter_store`)
so that deltas, merges and gradients all share one coordinate system.
Layer ``h{i}`` maps hidden widths; ``head{t}`` is the classifier of task t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError
from ..parameter_store import LayerLayout, ParameterVector

LOSS_KINDS = ("cross-entropy", "squared-error")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int = 16
    hidden: tuple[int, ...] = (32, 32)
    classes: int = 4
    heads: int = 1

    def __post_init__(self):
        if len(self.hidden) < 1:
            raise ValidationError("an MLP needs at least one hidden layer")
        if min((self.input_dim, self.classes, self.heads) + tuple(self.hidden)) < 1:
            raise ValidationError("all widths must be positive")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        fan_in = self.input_dim
        for i, width in enumerate(self.hidden):
            shapes[f"h{i}.weight"] = (width, fan_in)
            shapes[f"h{i}.bias"] = (width,)
            fan_in = width
        for t in range(self.heads):
            shapes[f"head{t}.weight"] = (self.classes, fan_in)
            shapes[f"head{t}.bias"] = (self.classes,)
        return shapes

    def layout(self) -> LayerLayout:
        return LayerLayout.from_shapes(self.shapes())

    @property
    def size(self) -> int:
        return self.layout().total


def init_params(spec: MlpSpec, seed: int) -> ParameterVector:
    rng = np.random.default_rng(seed)
    layout = spec.layout()
    values = np.zeros(layout.total)
    for e in layout:
        if e.name.endswith(".weight"):
            fan_in = e.shape[1]
            values[e.offset : e.offset + e.length] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), e.length)
    return ParameterVector(values, layout)


def _views(spec: MlpSpec, values: np.ndarray, layout: LayerLayout | None = None) -> dict[str, np.ndarray]:
    """Reshaped views of a flat vector (..., d) -> per-layer (..., *shape)."""
    layout = layout or spec.layout()
    lead = values.shape[:-1]
    return {e.name: values[..., e.offset : e.offset + e.length].reshape(lead + e.shape) for e in layout}


def _trunk(spec: MlpSpec, p: dict, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    for i in range(len(spec.hidden)):
        acts.append(np.tanh(acts[-1] @ p[f"h{i}.weight"].T + p[f"h{i}.bias"]))
    return acts


def forward(spec: MlpSpec, values, x, head: int = 0) -> np.ndarray:
    """Logits of ``head`` for inputs ``x`` (n x input_dim)."""
    p = _views(spec, np.asarray(values, dtype=np.float64))
    h = _trunk(spec, p, np.asarray(x, dtype=np.float64))[-1]
    return h @ p[f"head{head}.weight"].T + p[f"head{head}.bias"]


def forward_population(spec: MlpSpec, values: np.ndarray, x, head: int = 0) -> np.ndarray:
    """Logits for a stack of parameter vectors (P x d) -> (P x n x classes)."""
    p = _views(spec, np.asarray(values, dtype=np.float64))
    h = np.asarray(x, dtype=np.float64)
    for i in range(len(spec.hidden)):
        w = p[f"h{i}.weight"]
        pre = np.einsum("ni,poi->pno" if h.ndim == 2 else "pni,poi->pno", h, w)
        h = np.tanh(pre + p[f"h{i}.bias"][:, None, :])
    return np.einsum("pni,poi->pno", h, p[f"head{head}.weight"]) + p[f"head{head}.bias"][:, None, :]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def loss_from_logits(logits: np.ndarray, y: np.ndarray, kind: str = "cross-entropy") -> np.ndarray:
    """Mean loss over the example axis (second to last); works on batched logits."""
    y = np.asarray(y, dtype=np.int64)
    if kind == "cross-entropy":
        logp = log_softmax(logits)
        picked = np.take_along_axis(logp, np.broadcast_to(y[:, None], logp.shape[:-1] + (1,)), axis=-1)
        return -picked[..., 0].mean(axis=-1)
    if kind == "squared-error":
        onehot = np.eye(logits.shape[-1])[y]
        return ((softmax(logits) - onehot) ** 2).sum(axis=-1).mean(axis=-1)
    raise ValidationError(f"unknown loss kind {kind!r}")


def loss_and_grad(spec: MlpSpec, values, x, y, head: int = 0, kind: str = "cross-entropy") -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its exact gradient w.r.t. the flat parameters."""
    values = np.asarray(values, dtype=np.float64)
    layout = spec.layout()
    p = _views(spec, values, layout)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    acts = _trunk(spec, p, x)
    logits = acts[-1] @ p[f"head{head}.weight"].T + p[f"head{head}.bias"]
    probs = softmax(logits)
    onehot = np.eye(spec.classes)[y]
    if kind == "cross-entropy":
        loss = float(-log_softmax(logits)[np.arange(n), y].mean())
        dlogits = (probs - onehot) / n
    elif kind == "squared-error":
        diff = probs - onehot
        loss = float((diff**2).sum(axis=1).mean())
        g = 2.0 * diff / n
        # softmax Jacobian-vector product
        dlogits = probs * (g - (g * probs).sum(axis=1, keepdims=True))
    else:
        raise ValidationError(f"unknown loss kind {kind!r}")

    grad = np.zeros_like(values)
    g = _views(spec, grad, layout)
    g[f"head{head}.weight"][...] = dlogits.T @ acts[-1]
    g[f"head{head}.bias"][...] = dlogits.sum(axis=0)
    delta = dlogits @ p[f"head{head}.weight"]
    for i in reversed(range(len(spec.hidden))):
        delta = delta * (1.0 - acts[i + 1] ** 2)
        g[f"h{i}.weight"][...] = delta.T @ acts[i]
        g[f"h{i}.bias"][...] = delta.sum(axis=0)
        delta = delta @ p[f"h{i}.weight"]
    return loss, grad


def per_example_grads(spec: MlpSpec, values, x, y, head: int = 0) -> np.ndarray:
    """Gradient of each example's negative log-likelihood (n x d)."""
    return np.vstack([loss_and_grad(spec, values, x[i : i + 1], y[i : i + 1], head)[1] for i in range(len(y))])


def accuracy_from_logits(logits: np.ndarray, y) -> np.ndarray:
    return (np.argmax(logits, axis=-1) == np.asarray(y)).mean(axis=-1)
