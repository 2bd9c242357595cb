"""Sequential modified Gram-Schmidt over task deltas.

Members are never normalized: a member keeps the magnitude of its residual
so that ``base + sum(alpha_i * member_i)`` with all alphas at 1 reproduces
the summed raw deltas when they are already orthogonal.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DuplicateIdError, LayoutMismatchError, UnknownIdError, ValidationError
from .parameter_store import DeltaRecord, inner_product, norm

EPS_DROP = 1e-10
EPS_REG = 1e-30
TOL_ORTH = 1e-8
# a residual that lost more than this fraction of its norm to cancellation
# gets a second projection sweep ("twice is enough")
_REPROJECT_RATIO = 1e-3

DEGENERATE = "degenerate residual"


def project(v, u, eps_drop: float = EPS_DROP, eps_reg: float = EPS_REG) -> np.ndarray:
    """Component of ``v`` along ``u``."""
    v = np.asarray(v, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    uu = inner_product(u, u)
    if np.sqrt(uu) <= eps_drop:
        raise ValidationError("cannot project onto a near-zero vector; drop it instead")
    return (inner_product(v, u) / max(uu, eps_reg)) * u


def _mgs_residual(v: np.ndarray, members: Sequence[np.ndarray], eps_reg: float) -> np.ndarray:
    r = np.array(v, dtype=np.float64, copy=True)
    start = np.sqrt(inner_product(r, r))
    for _sweep in range(2):
        for u in members:
            uu = inner_product(u, u)
            r -= (inner_product(r, u) / max(uu, eps_reg)) * u
        if not members or np.sqrt(inner_product(r, r)) > _REPROJECT_RATIO * start:
            break
    return r


@dataclass(frozen=True)
class OrthogonalBasis:
    members: tuple[DeltaRecord, ...] = ()
    dropped: tuple[tuple[str, str], ...] = ()
    eps_drop: float = EPS_DROP
    order_log: tuple[str, ...] = ()

    def __post_init__(self):
        ids = [m.model_id for m in self.members] + [mid for mid, _ in self.dropped]
        if len(set(ids)) != len(ids):
            raise DuplicateIdError("model ids must be unique across members and dropped entries")
        layouts = {m.layout for m in self.members}
        if len(layouts) > 1:
            raise LayoutMismatchError("basis members have different layouts")

    def __len__(self):
        return len(self.members)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(m.model_id for m in self.members)

    @property
    def layout(self):
        return self.members[0].layout if self.members else None

    def member(self, model_id: str) -> DeltaRecord:
        for m in self.members:
            if m.model_id == model_id:
                return m
        raise UnknownIdError(f"model {model_id!r} is not a basis member")

    def __contains__(self, model_id) -> bool:
        return any(m.model_id == model_id for m in self.members)

    def known_ids(self) -> set[str]:
        return {m.model_id for m in self.members} | {mid for mid, _ in self.dropped}

    def matrix(self) -> np.ndarray:
        """Members stacked as rows (N x d)."""
        if not self.members:
            return np.zeros((0, 0))
        return np.vstack([m.values for m in self.members])

    def appended(self, member: DeltaRecord) -> "OrthogonalBasis":
        return OrthogonalBasis(
            self.members + (member,), self.dropped, self.eps_drop, self.order_log + (member.model_id,)
        )

    def with_drop(self, model_id: str, reason: str) -> "OrthogonalBasis":
        return OrthogonalBasis(
            self.members, self.dropped + ((model_id, reason),), self.eps_drop, self.order_log + (model_id,)
        )

    def without(self, model_id: str) -> "OrthogonalBasis":
        self.member(model_id)
        return OrthogonalBasis(
            tuple(m for m in self.members if m.model_id != model_id),
            self.dropped,
            self.eps_drop,
            tuple(i for i in self.order_log if i != model_id),
        )


def _check_new(delta: DeltaRecord, basis: OrthogonalBasis) -> None:
    if delta.model_id in basis.known_ids():
        raise DuplicateIdError(f"model id {delta.model_id!r} already present in the basis")
    if basis.layout is not None and delta.layout != basis.layout:
        raise LayoutMismatchError(f"delta {delta.model_id!r} layout does not match the basis")


def project_onto_null_space(
    new_delta: DeltaRecord, basis: OrthogonalBasis, eps_reg: float = EPS_REG
) -> tuple[DeltaRecord, bool]:
    """Remove from ``new_delta`` its components along every basis member.

    Returns the orthogonalized record and a flag that is true when the
    residual is degenerate (the delta lies in the span of the basis).
    """
    _check_new(new_delta, basis)
    r = _mgs_residual(new_delta.values, [m.values for m in basis.members], eps_reg)
    degenerate = norm(r) <= basis.eps_drop * norm(new_delta.values)
    return new_delta.replace(values=r, orthogonalized=True), degenerate


def orthogonalize_sequence(
    deltas: Sequence[DeltaRecord], eps_drop: float = EPS_DROP, eps_reg: float = EPS_REG
) -> OrthogonalBasis:
    """Orthogonalize ``deltas`` in the given order.

    Order matters: the first delta is kept verbatim and every later one
    loses its components along the earlier members.
    """
    basis = OrthogonalBasis(eps_drop=eps_drop)
    for d in deltas:
        if d.orthogonalized:
            raise ValidationError(f"delta {d.model_id!r} is already orthogonalized")
        residual, degenerate = project_onto_null_space(d, basis, eps_reg)
        basis = basis.with_drop(d.model_id, DEGENERATE) if degenerate else basis.appended(residual)
    return basis


def reorthogonalize(basis: OrthogonalBasis, eps_reg: float = EPS_REG) -> OrthogonalBasis:
    """Run one more MGS pass over the members in insertion order."""
    rank = {mid: i for i, mid in enumerate(basis.order_log)}
    ordered = sorted(basis.members, key=lambda m: rank.get(m.model_id, len(rank)))
    out = OrthogonalBasis(dropped=basis.dropped, eps_drop=basis.eps_drop)
    kept: list[np.ndarray] = []
    for m in ordered:
        r = _mgs_residual(m.values, kept, eps_reg)
        if norm(r) <= basis.eps_drop * norm(m.values) or norm(r) <= basis.eps_drop:
            out = out.with_drop(m.model_id, DEGENERATE)
            continue
        kept.append(r)
        out = out.appended(m.replace(values=r))
    order = tuple(i for i in basis.order_log if i in out.known_ids())
    return OrthogonalBasis(out.members, out.dropped, out.eps_drop, order)


def orthogonality_check(basis: OrthogonalBasis) -> tuple[float, tuple[str, str] | None]:
    """Largest |cosine| over all member pairs, and the pair attaining it."""
    worst, pair = 0.0, None
    norms = [norm(m.values) for m in basis.members]
    for (i, a), (j, b) in itertools.combinations(enumerate(basis.members), 2):
        denom = norms[i] * norms[j]
        c = abs(inner_product(a.values, b.values)) / denom if denom > 0 else 0.0
        if c > worst or pair is None:
            worst, pair = max(worst, c), (a.model_id, b.model_id)
    return worst, pair
