import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdmoc.errors import DuplicateIdError, LayoutMismatchError, ValidationError
from mdmoc.orthogonalizer import (
    DEGENERATE,
    OrthogonalBasis,
    orthogonality_check,
    orthogonalize_sequence,
    project,
    project_onto_null_space,
    reorthogonalize,
)
from mdmoc.parameter_store import DeltaRecord, LayerLayout


def deltas(rows, prefix="m"):
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    layout = LayerLayout.from_shapes({"w": (rows.shape[1],)})
    return [DeltaRecord(f"{prefix}{i}", r, layout) for i, r in enumerate(rows)]


def test_project_examples():
    np.testing.assert_array_equal(project([1, 1], [1, 0]), [1, 0])
    np.testing.assert_array_equal(project([0, 2], [3, 0]), [0, 0])
    with pytest.raises(ValidationError):
        project([1, 1], [0, 0])


def test_two_vector_gram_schmidt():
    basis = orthogonalize_sequence(deltas([[1, 0], [1, 1]]))
    np.testing.assert_array_equal(basis.matrix(), [[1, 0], [0, 1]])
    assert all(m.orthogonalized for m in basis.members)
    assert basis.order_log == ("m0", "m1")


def test_identical_deltas_drop_second():
    basis = orthogonalize_sequence(deltas([[1, 2, 3], [1, 2, 3]]))
    assert basis.ids == ("m0",)
    assert basis.dropped == (("m1", DEGENERATE),)


def test_zero_delta_is_dropped_not_kept():
    basis = orthogonalize_sequence(deltas([[0, 0, 0], [1, 0, 0]]))
    assert basis.ids == ("m1",)
    assert basis.dropped[0][0] == "m0"


def _reconstruction_error(originals, basis):
    # least-squares fit of each original onto the span of the members
    M = basis.matrix().T
    worst = 0.0
    for d in originals:
        coef, *_ = np.linalg.lstsq(M, d.values, rcond=None)
        worst = max(worst, np.linalg.norm(M @ coef - d.values) / np.linalg.norm(d.values))
    return worst


def test_ten_random_deltas_in_fifty_dims():
    ds = deltas(np.random.default_rng(3).normal(size=(10, 50)))
    basis = orthogonalize_sequence(ds)
    assert len(basis) == 10
    cos, _ = orthogonality_check(basis)
    assert cos <= 1e-8
    assert _reconstruction_error(ds, basis) <= 1e-8


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(2, 40))
def test_sequence_is_orthogonal_and_decomposes_originals(seed, n, d):
    rng = np.random.default_rng(seed)
    # mix of independent and dependent rows, with widely varying scales
    rows = rng.normal(size=(n, d)) * 10.0 ** rng.uniform(-3, 3, size=(n, 1))
    if n > 2:
        rows[-1] = rows[0] - 2 * rows[1]
    ds = deltas(rows)
    basis = orthogonalize_sequence(ds)
    assert orthogonality_check(basis)[0] <= 1e-8
    assert len(basis) + len(basis.dropped) == n
    assert len(basis) <= min(n, d)
    assert all(np.linalg.norm(m.values) > basis.eps_drop for m in basis.members)
    # every original = projections onto earlier members + its own member
    members = basis.matrix()
    for dr in ds:
        if dr.model_id not in basis:
            continue
        own = basis.member(dr.model_id).values
        earlier = members[: basis.ids.index(dr.model_id)]
        proj = sum(((dr.values @ u) / (u @ u)) * u for u in earlier) if len(earlier) else 0.0
        err = np.linalg.norm(proj + own - dr.values) / np.linalg.norm(dr.values)
        assert err <= 1e-8


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permuted_order_stays_orthogonal(seed):
    rng = np.random.default_rng(seed)
    ds = deltas(rng.normal(size=(6, 20)))
    order = rng.permutation(6)
    basis = orthogonalize_sequence([ds[i] for i in order])
    assert orthogonality_check(basis)[0] <= 1e-8
    assert basis.order_log == tuple(f"m{i}" for i in order)


def test_null_space_projection_of_orthogonal_delta_is_unchanged():
    basis = orthogonalize_sequence(deltas([[1, 0, 0], [0, 1, 0]]))
    new = deltas([[0, 0, 2.5]], prefix="n")[0]
    out, degenerate = project_onto_null_space(new, basis)
    assert not degenerate and out.orthogonalized
    np.testing.assert_allclose(out.values, new.values, atol=1e-12)


def test_null_space_projection_of_span_member_is_degenerate():
    basis = orthogonalize_sequence(deltas([[1, 0, 0], [0, 1, 0]]))
    _, degenerate = project_onto_null_space(deltas([[3, -4, 0]], prefix="n")[0], basis)
    assert degenerate


def test_null_space_projection_rejects_duplicates_and_layouts():
    basis = orthogonalize_sequence(deltas([[1, 0, 0]]))
    with pytest.raises(DuplicateIdError):
        project_onto_null_space(deltas([[0, 1, 0]])[0], basis)
    other = DeltaRecord("x", [0.0, 1.0, 0.0], LayerLayout.from_shapes({"v": (3,)}))
    with pytest.raises(LayoutMismatchError):
        project_onto_null_space(other, basis)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_incremental_matches_batch(seed, n):
    rng = np.random.default_rng(seed)
    ds = deltas(rng.normal(size=(n + 1, 30)))
    batch = orthogonalize_sequence(ds)
    incremental, degenerate = project_onto_null_space(ds[-1], orthogonalize_sequence(ds[:-1]))
    assert not degenerate
    np.testing.assert_allclose(incremental.values, batch.members[-1].values, atol=1e-10)


def test_reorthogonalize_is_identity_on_orthogonal_basis():
    basis = orthogonalize_sequence(deltas(np.random.default_rng(1).normal(size=(5, 12))))
    again = reorthogonalize(basis)
    assert again.ids == basis.ids
    np.testing.assert_allclose(again.matrix(), basis.matrix(), atol=1e-12)


def test_reorthogonalize_repairs_drift():
    basis = orthogonalize_sequence(deltas(np.random.default_rng(2).normal(size=(4, 10))))
    m0, m1 = basis.members[0], basis.members[1]
    drifted = m1.replace(values=m1.values + 1e-6 * m0.values)
    bad = OrthogonalBasis((m0, drifted) + basis.members[2:], basis.dropped, basis.eps_drop, basis.order_log)
    assert orthogonality_check(bad)[0] > 1e-8
    fixed = reorthogonalize(bad)
    assert fixed.ids == basis.ids
    assert orthogonality_check(fixed)[0] <= 1e-8


def test_orthogonality_check_examples():
    assert orthogonality_check(OrthogonalBasis())[0] == 0.0
    assert orthogonality_check(orthogonalize_sequence(deltas([[1, 2]])))[0] == 0.0
    layout = LayerLayout.from_shapes({"w": (2,)})
    pair = OrthogonalBasis((DeltaRecord("a", [1.0, 0.0], layout), DeltaRecord("b", [1.0, 1.0], layout)))
    cos, worst = orthogonality_check(pair)
    assert cos == pytest.approx(math.sqrt(2) / 2, abs=1e-12)
    assert worst == ("a", "b")


def test_already_orthogonalized_input_is_refused():
    d = deltas([[1, 0]])[0].replace(orthogonalized=True)
    with pytest.raises(ValidationError):
        orthogonalize_sequence([d])
