"""Merged-model state: assembly, continual integration, reversible removal.

A :class:`MergeState` is immutable; every operation returns a new state
whose ledger has one more record.  The merged vector is maintained
incrementally (one ``add_scaled`` per change) and can always be re-derived
with :func:`assemble`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .errors import IntegrityError, UnknownIdError, ValidationError
from .ledger import LedgerEntry, decode_record, encode_record, read_ledger, utc_now, write_ledger
from .orthogonalizer import (
    OrthogonalBasis,
    project_onto_null_space,
    reorthogonalize,
)
from .parameter_store import (
    DeltaRecord,
    ParameterVector,
    add_scaled,
    atomic_write_bytes,
    check_layouts,
    content_hash,
    flatten,
    inner_product,
    load_checkpoint,
    load_delta,
    norm,
    save_checkpoint,
    save_delta,
    unflatten,
)

REORTH_EVERY = 16
DEFAULT_ALPHA = 1.0
VERIFY_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class MergeState:
    base: ParameterVector
    basis: OrthogonalBasis
    alphas: Mapping[str, float]
    merged: ParameterVector
    ledger: tuple[LedgerEntry, ...] = ()
    archive: Mapping[str, DeltaRecord] = field(default_factory=dict)
    since_reorth: int = 0
    reorth_every: int = REORTH_EVERY
    operator: str = "mdm"
    clock: Callable[[], str] = utc_now

    def __post_init__(self):
        if set(self.alphas) != set(self.basis.ids):
            raise ValidationError("alpha keys must match basis member ids exactly")

    @property
    def base_hash(self) -> str:
        return content_hash(self.base.values)

    @property
    def ids(self) -> tuple[str, ...]:
        return self.basis.ids

    def alpha_vector(self) -> np.ndarray:
        return np.array([self.alphas[i] for i in self.basis.ids], dtype=np.float64)

    def _evolve(self, entries=(), **changes) -> "MergeState":
        seq = self.ledger[-1].seq if self.ledger else 0
        ledger = list(self.ledger)
        for action, kwargs in entries:
            seq += 1
            ledger.append(LedgerEntry(seq, action, timestamp=self.clock(), operator=self.operator, **kwargs))
        return replace(self, ledger=tuple(ledger), **changes)


def assemble(base: ParameterVector, basis: OrthogonalBasis, alphas: Mapping[str, float]) -> np.ndarray:
    """From-scratch ``base + sum_i alpha_i * member_i``."""
    out = np.array(base.values, copy=True)
    for m in basis.members:
        out = add_scaled(out, m.values, alphas[m.model_id])
    return out


def merge(
    base: ParameterVector,
    basis: OrthogonalBasis,
    alphas: Mapping[str, float],
    operator: str = "mdm",
    clock: Callable[[], str] = utc_now,
    reorth_every: int = REORTH_EVERY,
) -> MergeState:
    missing = set(basis.ids) - set(alphas)
    extra = set(alphas) - set(basis.ids)
    if missing or extra:
        raise ValidationError(f"alphas missing for {sorted(missing)}, unexpected for {sorted(extra)}")
    if basis.layout is not None:
        check_layouts(basis.layout, base.layout, "basis and base layouts")
    for m in basis.members:
        if m.normalized:
            raise ValidationError(f"member {m.model_id!r} is normalized; denormalize before merging")
    alphas = {i: float(alphas[i]) for i in basis.ids}
    state = MergeState(
        base, basis, alphas, base.with_values(assemble(base, basis, alphas)),
        operator=operator, clock=clock, reorth_every=reorth_every,
    )
    entries = [
        ("merge", dict(model_id=m.model_id, alpha=alphas[m.model_id], delta_hash=m.delta_hash))
        for m in basis.members
    ]
    return state._evolve(entries)


def integrate(state: MergeState, new_delta: DeltaRecord, alpha_new: float = DEFAULT_ALPHA) -> MergeState:
    """Project ``new_delta`` onto the null space of the basis and add it."""
    if new_delta.orthogonalized:
        raise ValidationError(f"delta {new_delta.model_id!r} must be raw, not orthogonalized")
    if new_delta.normalized:
        raise ValidationError(f"delta {new_delta.model_id!r} is normalized; denormalize before merging")
    check_layouts(new_delta.layout, state.base.layout, "delta and base layouts")
    member, degenerate = project_onto_null_space(new_delta, state.basis)
    if degenerate:
        return state._evolve(
            [("reject", dict(model_id=new_delta.model_id, delta_hash=new_delta.delta_hash))]
        )
    alpha_new = float(alpha_new)
    merged = state.merged.with_values(add_scaled(state.merged.values, member.values, alpha_new))
    alphas = dict(state.alphas)
    alphas[member.model_id] = alpha_new
    archive = {k: v for k, v in state.archive.items() if k != member.model_id}
    new = state._evolve(
        [("integrate", dict(model_id=member.model_id, alpha=alpha_new, delta_hash=member.delta_hash))],
        basis=state.basis.appended(member),
        alphas=alphas,
        merged=merged,
        archive=archive,
        since_reorth=state.since_reorth + 1,
    )
    if new.reorth_every and new.since_reorth >= new.reorth_every:
        new = reorthogonalize_state(new)
    return new


def unmerge(state: MergeState, model_id: str) -> MergeState:
    """Subtract ``alpha_k * member_k``; the removed member is archived."""
    if model_id not in state.basis:
        raise UnknownIdError(f"model {model_id!r} is not part of the merge")
    member = state.basis.member(model_id)
    alpha = state.alphas[model_id]
    merged = state.merged.with_values(add_scaled(state.merged.values, member.values, -alpha))
    alphas = {k: v for k, v in state.alphas.items() if k != model_id}
    archive = dict(state.archive)
    archive[model_id] = member
    return state._evolve(
        [("unmerge", dict(model_id=model_id, alpha=alpha, delta_hash=member.delta_hash))],
        basis=state.basis.without(model_id),
        alphas=alphas,
        merged=merged,
        archive=archive,
    )


def reweight(state: MergeState, model_id: str, new_alpha: float) -> MergeState:
    if model_id not in state.basis:
        raise UnknownIdError(f"model {model_id!r} is not part of the merge")
    new_alpha = float(new_alpha)
    old = state.alphas[model_id]
    if new_alpha == old:
        return state
    member = state.basis.member(model_id)
    merged = state.merged.with_values(add_scaled(state.merged.values, member.values, new_alpha - old))
    alphas = dict(state.alphas)
    alphas[model_id] = new_alpha
    return state._evolve(
        [("reweight", dict(model_id=model_id, alpha=new_alpha, delta_hash=member.delta_hash))],
        alphas=alphas,
        merged=merged,
    )


def set_alphas(state: MergeState, alphas: Mapping[str, float]) -> MergeState:
    for model_id, a in alphas.items():
        state = reweight(state, model_id, a)
    return state


def recompute(state: MergeState) -> MergeState:
    """Rebuild the merged vector from scratch to shed accumulated rounding drift."""
    return replace(state, merged=state.base.with_values(assemble(state.base, state.basis, state.alphas)))


def reorthogonalize_state(state: MergeState) -> MergeState:
    basis = reorthogonalize(state.basis)
    gone = [i for i in state.basis.ids if i not in basis]
    alphas = {i: state.alphas[i] for i in basis.ids}
    archive = dict(state.archive)
    for i in gone:
        archive[i] = state.basis.member(i)
    entries = [("reorthogonalize", {})]
    entries += [
        ("reject", dict(model_id=i, alpha=state.alphas[i], delta_hash=state.basis.member(i).delta_hash))
        for i in gone
    ]
    new = state._evolve(
        entries,
        basis=basis,
        alphas=alphas,
        archive=archive,
        since_reorth=0,
    )
    return recompute(new)


def purge(state: MergeState, model_id: str | None = None) -> MergeState:
    """Delete archived copies of removed deltas; later verification becomes impossible."""
    ids = [model_id] if model_id is not None else sorted(state.archive)
    for i in ids:
        if i not in state.archive:
            raise UnknownIdError(f"no archived delta for {i!r}")
    archive = {k: v for k, v in state.archive.items() if k not in ids}
    return state._evolve([("purge", dict(model_id=i)) for i in ids], archive=archive)


def replay_ledger(state: MergeState) -> np.ndarray:
    """Fold the ledger from the base vector and return the resulting merged vector."""

    def vector(model_id):
        if model_id in state.basis:
            return state.basis.member(model_id).values
        if model_id in state.archive:
            return state.archive[model_id].values
        raise IntegrityError(f"ledger references {model_id!r} but no delta is available for replay")

    merged = np.array(state.base.values, copy=True)
    live: dict[str, float] = {}
    for e in state.ledger:
        if e.action in ("merge", "integrate"):
            merged = add_scaled(merged, vector(e.model_id), e.alpha)
            live[e.model_id] = e.alpha
        elif e.action == "unmerge":
            merged = add_scaled(merged, vector(e.model_id), -live.pop(e.model_id))
        elif e.action == "reweight":
            merged = add_scaled(merged, vector(e.model_id), e.alpha - live[e.model_id])
            live[e.model_id] = e.alpha
        elif e.action == "reject" and e.model_id in live:
            # member dropped by a re-orthogonalization pass
            merged = add_scaled(merged, vector(e.model_id), -live.pop(e.model_id))
        elif e.action == "reorthogonalize":
            merged = np.array(state.base.values, copy=True)
            for k, a in live.items():
                merged = add_scaled(merged, vector(k), a)
    if live != dict(state.alphas):
        raise IntegrityError("ledger replay does not reproduce the current alphas")
    return merged


@dataclass(frozen=True)
class RemovalReport:
    model_id: str
    verified: bool
    reasons: tuple[str, ...] = ()
    cosine: float = 0.0

    def __bool__(self):
        return self.verified


def verify_removal(state: MergeState, model_id: str, original_delta_hash: str, tol: float = VERIFY_TOL) -> RemovalReport:
    """Check that ``model_id`` was integrated, removed, and leaves no trace in the merged vector."""
    unmerges = [i for i, e in enumerate(state.ledger) if e.action == "unmerge" and e.model_id == model_id]
    if not unmerges:
        raise UnknownIdError(f"ledger has no unmerge record for {model_id!r}")
    if model_id not in state.archive:
        raise UnknownIdError(f"no archived delta for {model_id!r} (purged or never removed)")
    last = unmerges[-1]
    removal = state.ledger[last]
    adds = [
        i for i, e in enumerate(state.ledger[:last])
        if e.action in ("merge", "integrate") and e.model_id == model_id
    ]
    reasons = []
    if not adds:
        reasons.append("no merge/integrate record precedes the removal")
    else:
        # a re-orthogonalization pass in between legitimately rewrites the member
        reorth = any(e.action == "reorthogonalize" for e in state.ledger[adds[-1] : last])
        if not reorth and state.ledger[adds[-1]].delta_hash != removal.delta_hash:
            reasons.append("integrated and removed delta hashes differ")
    if removal.delta_hash != original_delta_hash:
        reasons.append("ledger hash of removed delta does not match the supplied hash")
    archived = state.archive[model_id]
    if archived.delta_hash != original_delta_hash:
        reasons.append("archived delta does not match the supplied hash (archive corrupted)")
    if model_id in state.basis:
        reasons.append("model is currently merged again")
    diff = state.merged.values - state.base.values
    denom = norm(archived.values) * norm(diff)
    cos = abs(inner_product(diff, archived.values)) / denom if denom > 0 else 0.0
    if cos > tol:
        reasons.append(f"merged model retains a component along the removed delta (|cos|={cos:.3e})")
    return RemovalReport(model_id, not reasons, tuple(reasons), cos)


# ---------------------------------------------------------------------------
# persistence


def _safe(model_id: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in model_id)


def save_state(state: MergeState, directory) -> None:
    d = Path(directory)
    (d / "members").mkdir(parents=True, exist_ok=True)
    (d / "archive").mkdir(parents=True, exist_ok=True)
    save_checkpoint(unflatten(state.base, {"kind": "base"}), d / "base.mdmc")
    save_checkpoint(unflatten(state.merged, {"kind": "merged", "base_hash": state.base_hash}), d / "merged.mdmc")
    lines = [
        encode_record(
            [
                ("kind", "state"),
                ("base_hash", state.base_hash),
                ("eps_drop", repr(state.basis.eps_drop)),
                ("reorth_every", str(state.reorth_every)),
                ("since_reorth", str(state.since_reorth)),
                ("operator", state.operator),
                ("order_log", ",".join(_q(i) for i in state.basis.order_log)),
            ]
        )
    ]
    written = set()
    for n, m in enumerate(state.basis.members):
        fname = f"members/{n:04d}_{_safe(m.model_id)}.mdmc"
        written.add(fname)
        save_delta(m, d / fname)
        lines.append(
            encode_record(
                [("kind", "member"), ("model_id", m.model_id), ("alpha", repr(state.alphas[m.model_id])), ("file", fname)]
            )
        )
    for mid, reason in state.basis.dropped:
        lines.append(encode_record([("kind", "dropped"), ("model_id", mid), ("reason", reason)]))
    for n, (mid, rec) in enumerate(sorted(state.archive.items())):
        fname = f"archive/{n:04d}_{_safe(mid)}.mdmc"
        written.add(fname)
        save_delta(rec, d / fname)
        lines.append(encode_record([("kind", "archive"), ("model_id", mid), ("file", fname)]))
    write_ledger(state.ledger, d / "ledger.log")
    atomic_write_bytes(d / "manifest.txt", ("\n".join(lines) + "\n").encode("utf-8"))
    for sub in ("members", "archive"):
        for p in (d / sub).glob("*.mdmc"):
            if f"{sub}/{p.name}" not in written:
                p.unlink()


def _q(s: str) -> str:
    return s.replace("%", "%25").replace(",", "%2C")


def _uq(s: str) -> str:
    return s.replace("%2C", ",").replace("%25", "%")


def load_state(directory, recompute_merged: bool = False, clock: Callable[[], str] = utc_now) -> MergeState:
    d = Path(directory)
    if not (d / "manifest.txt").exists():
        raise ValidationError(f"{d} is not a merge state directory (manifest.txt missing)")
    records = [
        decode_record(line, i)
        for i, line in enumerate((d / "manifest.txt").read_text(encoding="utf-8").splitlines(), 1)
        if line
    ]
    head = next(r for r in records if r["kind"] == "state")
    base = flatten(load_checkpoint(d / "base.mdmc"))
    if content_hash(base.values) != head["base_hash"]:
        raise IntegrityError("base checkpoint does not match the recorded base hash")
    members, alphas, dropped, archive = [], {}, [], {}
    for r in records:
        if r["kind"] == "member":
            m = load_delta(d / r["file"])
            members.append(m)
            alphas[m.model_id] = float(r["alpha"])
        elif r["kind"] == "dropped":
            dropped.append((r["model_id"], r["reason"]))
        elif r["kind"] == "archive":
            archive[r["model_id"]] = load_delta(d / r["file"])
    order = tuple(_uq(i) for i in head["order_log"].split(",") if i)
    basis = OrthogonalBasis(tuple(members), tuple(dropped), float(head["eps_drop"]), order)
    if recompute_merged:
        merged = base.with_values(assemble(base, basis, alphas))
    else:
        merged = flatten(load_checkpoint(d / "merged.mdmc"))
        check_layouts(merged.layout, base.layout, "merged and base layouts")
    return MergeState(
        base, basis, alphas, merged, tuple(read_ledger(d / "ledger.log")), archive,
        int(head["since_reorth"]), int(head["reorth_every"]), head["operator"], clock,
    )


def relative_error(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    return norm(a - b) / max(norm(b), 1e-300)
