"""Principal directions of a delta collection via the N x N Gram matrix.

With N deltas of dimension d (N << d) the left singular vectors of the
N x d delta matrix D are ``D^T v_j / sigma_j`` where ``(sigma_j^2, v_j)``
are eigenpairs of ``D D^T``.  Nothing of size d x d is ever formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError, ValidationError
from .orthogonalizer import DEGENERATE, EPS_DROP, EPS_REG, OrthogonalBasis
from .parameter_store import Checkpoint, DeltaRecord, norm

# eigenvalues below this fraction of the largest count as numerically zero
RANK_TOL = 1e-20


def jacobi_eigh(a, tol: float = 1e-15, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` sorted by decreasing eigenvalue,
    eigenvectors in the columns.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ShapeError("matrix must be square")
    v = np.eye(n)
    scale = np.sqrt(np.sum(a * a)) or 1.0
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.triu(a, 1) ** 2) * 2.0)
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 1.0 / (2.0 * theta)  # theta^2 would overflow
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                # A <- J^T A J with J the (p, q) rotation
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


@dataclass(frozen=True, eq=False)
class ReducedSubspace:
    basis_vectors: np.ndarray  # k x d, rows are the u_j
    singular_values: np.ndarray
    energy_fraction: float

    @property
    def k(self) -> int:
        return self.basis_vectors.shape[0]

    @property
    def d(self) -> int:
        return self.basis_vectors.shape[1]

    def to_checkpoint(self) -> Checkpoint:
        tensors = {f"u_{j + 1:04d}": self.basis_vectors[j].copy() for j in range(self.k)}
        meta = {
            "kind": "subspace",
            "singular_values": ",".join(repr(float(s)) for s in self.singular_values),
            "energy_fraction": repr(float(self.energy_fraction)),
        }
        return Checkpoint(tensors, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "ReducedSubspace":
        if ckpt.metadata.get("kind") != "subspace":
            raise ValidationError("checkpoint does not hold a subspace")
        names = sorted(ckpt.tensors)
        u = np.vstack([np.asarray(ckpt.tensors[n], dtype=np.float64) for n in names])
        sv = np.array([float(s) for s in ckpt.metadata["singular_values"].split(",")])
        return cls(u, sv, float(ckpt.metadata["energy_fraction"]))


def _delta_matrix(deltas: Sequence[DeltaRecord]) -> np.ndarray:
    if not deltas:
        raise ValidationError("need at least one delta")
    layouts = {d.layout for d in deltas}
    if len(layouts) != 1:
        raise ValidationError("deltas have different layouts")
    return np.vstack([d.values for d in deltas])


def fit_basis(deltas: Sequence[DeltaRecord], k: int) -> ReducedSubspace:
    D = _delta_matrix(deltas)
    n, d = D.shape
    if not 1 <= k <= min(n, d):
        raise ValidationError(f"k={k} must lie in [1, {min(n, d)}]")
    gram = D @ D.T
    gram = 0.5 * (gram + gram.T)
    evals, evecs = jacobi_eigh(gram)
    evals = np.clip(evals, 0.0, None)
    total = float(np.sum(evals))
    if total <= 0.0:
        raise ValidationError("all deltas are zero")
    if evals[k - 1] <= RANK_TOL * evals[0]:
        raise ValidationError(f"k={k} exceeds the numerical rank of the delta set")
    sigma = np.sqrt(evals[:k])
    u = (evecs[:, :k].T @ D) / sigma[:, None]
    # one MGS clean-up pass: D^T v / sigma loses orthonormality as sigma shrinks
    for j in range(k):
        for i in range(j):
            u[j] -= (u[j] @ u[i]) * u[i]
        u[j] /= norm(u[j])
        if u[j][np.argmax(np.abs(u[j]))] < 0:
            u[j] = -u[j]
    return ReducedSubspace(u, sigma, float(np.sum(evals[:k]) / total))


def encode(delta: DeltaRecord | np.ndarray, sub: ReducedSubspace) -> np.ndarray:
    values = delta.values if isinstance(delta, DeltaRecord) else np.asarray(delta, dtype=np.float64)
    if values.shape != (sub.d,):
        raise ShapeError(f"delta dimension {values.shape} does not match subspace dimension {sub.d}")
    return sub.basis_vectors @ values


def decode(beta, sub: ReducedSubspace) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (sub.k,):
        raise ShapeError(f"coefficient vector has shape {beta.shape}, expected ({sub.k},)")
    return beta @ sub.basis_vectors


def reduced_orthogonalize(
    deltas: Sequence[DeltaRecord], k: int, eps_drop: float = EPS_DROP, eps_reg: float = EPS_REG
) -> OrthogonalBasis:
    """Gram-Schmidt on k-dimensional coordinates, lifted back to parameter space.

    The lift is an isometry on the subspace, so orthogonality in coordinates
    carries over to the decoded members.
    """
    sub = fit_basis(deltas, k)
    basis = OrthogonalBasis(eps_drop=eps_drop)
    coords: list[np.ndarray] = []
    for d in deltas:
        if d.orthogonalized:
            raise ValidationError(f"delta {d.model_id!r} is already orthogonalized")
        if d.model_id in basis.known_ids():
            raise ValidationError(f"duplicate model id {d.model_id!r}")
        r = encode(d, sub)
        for c in coords:
            r = r - (float(r @ c) / max(float(c @ c), eps_reg)) * c
        if norm(r) <= eps_drop * norm(d.values):
            basis = basis.with_drop(d.model_id, DEGENERATE)
            continue
        coords.append(r)
        basis = basis.appended(d.replace(values=decode(r, sub), orthogonalized=True))
    return basis
