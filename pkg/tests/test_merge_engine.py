import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdmoc import merge_engine as me
from mdmoc.errors import IntegrityError, UnknownIdError, ValidationError
from mdmoc.ledger import LedgerEntry, append_ledger, read_ledger, write_ledger
from mdmoc.orthogonalizer import OrthogonalBasis, orthogonality_check, orthogonalize_sequence
from mdmoc.parameter_store import DeltaRecord, LayerLayout, ParameterVector

CLOCK = lambda: "2026-01-01T00:00:00.000000Z"  # noqa: E731
D = 24


def make_base(seed=0, d=D):
    rng = np.random.default_rng(seed)
    layout = LayerLayout.from_shapes({"a.weight": (d // 2,), "b.bias": (d - d // 2,)})
    return ParameterVector(rng.normal(size=d), layout)


def raw_deltas(base, n, seed=1, prefix="m"):
    rng = np.random.default_rng(seed)
    return [DeltaRecord(f"{prefix}{i}", rng.normal(size=len(base)) * 0.1, base.layout) for i in range(n)]


def merged_state(n=3, seed=0, alphas=None):
    base = make_base(seed)
    basis = orthogonalize_sequence(raw_deltas(base, n, seed + 1))
    alphas = alphas or {i: 1.0 for i in basis.ids}
    return me.merge(base, basis, alphas, clock=CLOCK)


def rel(a, b):
    return me.relative_error(a, b)


def test_zero_alphas_reproduce_base():
    s = merged_state(alphas={"m0": 0.0, "m1": 0.0, "m2": 0.0})
    np.testing.assert_array_equal(s.merged.values, s.base.values)


def test_single_member_unit_alpha():
    base = make_base()
    basis = orthogonalize_sequence(raw_deltas(base, 1))
    s = me.merge(base, basis, {"m0": 1.0})
    np.testing.assert_array_equal(s.merged.values, base.values + basis.members[0].values)


def test_merge_matches_independent_accumulation():
    rng = np.random.default_rng(7)
    alphas = {f"m{i}": float(rng.normal()) for i in range(3)}
    s = merged_state(alphas=alphas)
    # accumulate in reverse member order, per coordinate, with math.fsum
    import math

    cols = [s.basis.member(i).values * alphas[i] for i in reversed(s.ids)]
    oracle = np.array([math.fsum([s.base.values[j]] + [c[j] for c in cols]) for j in range(D)])
    np.testing.assert_allclose(s.merged.values, oracle, rtol=0, atol=1e-12)


def test_merge_preconditions():
    base = make_base()
    basis = orthogonalize_sequence(raw_deltas(base, 2))
    with pytest.raises(ValidationError):
        me.merge(base, basis, {"m0": 1.0})
    with pytest.raises(ValidationError):
        me.merge(base, basis, {"m0": 1.0, "m1": 1.0, "zz": 1.0})
    normalized = OrthogonalBasis(tuple(m.replace(scale_factors=(1.0, 2.0)) for m in basis.members))
    with pytest.raises(ValidationError):
        me.merge(base, normalized, {"m0": 1.0, "m1": 1.0})


def test_merge_ledger_entries():
    s = merged_state()
    assert [(e.seq, e.action, e.model_id) for e in s.ledger] == [
        (1, "merge", "m0"), (2, "merge", "m1"), (3, "merge", "m2"),
    ]
    assert all(e.delta_hash == s.basis.member(e.model_id).delta_hash for e in s.ledger)


def test_integrate_then_unmerge_restores():
    s = merged_state()
    new = raw_deltas(s.base, 1, seed=99, prefix="n")[0]
    s2 = me.integrate(s, new, 0.7)
    assert s2.ids[-1] == "n0" and s2.alphas["n0"] == 0.7
    assert orthogonality_check(s2.basis)[0] <= 1e-8
    s3 = me.unmerge(s2, "n0")
    assert rel(s3.merged.values, s.merged.values) <= 1e-10


def test_integrate_defaults_to_unit_alpha():
    s = me.integrate(merged_state(), raw_deltas(make_base(), 1, 5, "n")[0])
    assert s.alphas["n0"] == 1.0


def test_integrate_span_member_is_rejected():
    s = merged_state()
    combo = s.basis.member("m0").values * 2 - s.basis.member("m2").values
    s2 = me.integrate(s, DeltaRecord("dup", combo, s.base.layout))
    assert s2.ledger[-1].action == "reject" and s2.ledger[-1].model_id == "dup"
    np.testing.assert_array_equal(s2.merged.values, s.merged.values)
    assert s2.ids == s.ids


def test_integrate_rejects_orthogonalized_input():
    s = merged_state()
    with pytest.raises(ValidationError):
        me.integrate(s, raw_deltas(s.base, 1, 3, "n")[0].replace(orthogonalized=True))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 10))
def test_incremental_matches_batch_merge(seed, n):
    base = make_base(seed)
    ds = raw_deltas(base, n, seed + 1)
    alphas = {d.model_id: a for d, a in zip(ds, np.random.default_rng(seed).uniform(-1, 2, n))}
    batch = me.merge(base, orthogonalize_sequence(ds), alphas)
    inc = me.merge(base, OrthogonalBasis(), {})
    for d in ds:
        inc = me.integrate(inc, d, alphas[d.model_id])
    assert rel(inc.merged.values, batch.merged.values) <= 1e-9


def test_unmerge_matches_smaller_merge_exactly():
    base = make_base()
    ds = raw_deltas(base, 2)
    basis = orthogonalize_sequence(ds)
    both = me.merge(base, basis, {"m0": 0.8, "m1": 1.3})
    only = me.merge(base, orthogonalize_sequence(ds[:1]), {"m0": 0.8})
    after = me.unmerge(both, "m1")
    np.testing.assert_array_equal(after.basis.member("m0").values, only.basis.member("m0").values)
    np.testing.assert_allclose(after.merged.values, only.merged.values, rtol=0, atol=4e-16 * np.abs(base.values).max())


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.permutations(range(5)))
def test_unmerge_all_in_any_order_returns_base(seed, order):
    rng = np.random.default_rng(seed)
    s = merged_state(5, seed % 1000, {f"m{i}": float(rng.uniform(-2, 2)) for i in range(5)})
    for i in order:
        s = me.unmerge(s, f"m{i}")
    assert rel(s.merged.values, s.base.values) <= 1e-10
    assert s.ids == () and set(s.archive) == {f"m{i}" for i in range(5)}


def test_removal_commutes():
    s = merged_state(4)
    a = me.unmerge(me.unmerge(s, "m1"), "m3")
    b = me.unmerge(me.unmerge(s, "m3"), "m1")
    assert rel(a.merged.values, b.merged.values) <= 1e-15


def test_unmerge_then_reintegrate_same_raw_delta():
    base = make_base()
    ds = raw_deltas(base, 3)
    s = me.merge(base, OrthogonalBasis(), {})
    for d in ds:
        s = me.integrate(s, d)
    s2 = me.integrate(me.unmerge(s, "m2"), ds[2])
    assert rel(s2.merged.values, s.merged.values) <= 1e-9


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_no_interference_witness(seed):
    rng = np.random.default_rng(seed)
    s = merged_state(4, seed % 100, {f"m{i}": float(rng.uniform(0.1, 2)) for i in range(4)})
    removed = f"m{rng.integers(4)}"
    after = me.unmerge(s, removed)
    for state in (s, after):
        diff = state.merged.values - state.base.values
        for j in state.ids:
            u = state.basis.member(j).values
            expect = state.alphas[j] * (u @ u)
            assert diff @ u == pytest.approx(expect, rel=1e-8)


def test_unmerge_unknown_id():
    with pytest.raises(UnknownIdError) as exc:
        me.unmerge(merged_state(), "ghost")
    assert "ghost" in str(exc.value)


def test_reweight_examples():
    s = merged_state()
    assert me.reweight(s, "m1", 1.0) is s
    rng = np.random.default_rng(11)
    for _ in range(25):
        s = me.reweight(s, f"m{rng.integers(3)}", float(rng.normal()))
    fresh = me.assemble(s.base, s.basis, s.alphas)
    assert rel(s.merged.values, fresh) <= 1e-10
    with pytest.raises(UnknownIdError):
        me.reweight(s, "nope", 2.0)


def test_ledger_replay_reproduces_merged():
    s = merged_state()
    s = me.integrate(s, raw_deltas(s.base, 1, 50, "n")[0], 0.5)
    s = me.reweight(s, "m0", -0.3)
    s = me.unmerge(s, "m1")
    s = me.reorthogonalize_state(s)
    s = me.integrate(s, raw_deltas(s.base, 1, 51, "p")[0], 2.0)
    assert rel(me.replay_ledger(s), s.merged.values) <= 1e-10
    assert [e.seq for e in s.ledger] == list(range(1, len(s.ledger) + 1))


def test_periodic_reorthogonalization():
    base = make_base(d=40)
    s = me.merge(base, OrthogonalBasis(), {}, reorth_every=4)
    for d in raw_deltas(base, 9, 3):
        s = me.integrate(s, d)
    assert sum(e.action == "reorthogonalize" for e in s.ledger) == 2
    assert s.since_reorth == 1
    assert orthogonality_check(s.basis)[0] <= 1e-8
    assert rel(me.replay_ledger(s), s.merged.values) <= 1e-10


def test_verify_removal_after_real_unmerge():
    s = merged_state()
    h = s.basis.member("m1").delta_hash
    s = me.unmerge(s, "m1")
    report = me.verify_removal(s, "m1", h)
    assert report.verified and bool(report) and report.reasons == ()


def test_verify_removal_never_integrated_is_error():
    s = merged_state()
    with pytest.raises(UnknownIdError):
        me.verify_removal(s, "m1", "0" * 64)
    with pytest.raises(UnknownIdError):
        me.verify_removal(s, "ghost", "0" * 64)


def test_verify_removal_detects_tampered_archive():
    s = merged_state()
    h = s.basis.member("m1").delta_hash
    s = me.unmerge(s, "m1")
    bad = s.archive["m1"].values.copy()
    bad[0] += 1e-3
    tampered = me.MergeState(
        s.base, s.basis, s.alphas, s.merged, s.ledger, {"m1": s.archive["m1"].replace(values=bad)},
    )
    report = me.verify_removal(tampered, "m1", h)
    assert not report.verified
    assert any("archive" in r for r in report.reasons)


def test_verify_removal_detects_residual_component():
    s = merged_state()
    h = s.basis.member("m1").delta_hash
    s = me.unmerge(s, "m1")
    leaked = s.merged.with_values(s.merged.values + 0.5 * s.archive["m1"].values)
    report = me.verify_removal(me.MergeState(s.base, s.basis, s.alphas, leaked, s.ledger, s.archive), "m1", h)
    assert not report.verified and report.cosine > 1e-8


def test_purge_disables_verification():
    s = me.unmerge(merged_state(), "m2")
    s = me.purge(s, "m2")
    assert s.ledger[-1].action == "purge"
    with pytest.raises(UnknownIdError):
        me.verify_removal(s, "m2", "x")
    with pytest.raises(UnknownIdError):
        me.purge(s, "m2")


def test_state_directory_round_trip(tmp_path):
    s = merged_state(3)
    s = me.integrate(s, raw_deltas(s.base, 1, 8, "odd id,with%chars")[0], 0.25)
    s = me.unmerge(s, "m0")
    me.save_state(s, tmp_path)
    back = me.load_state(tmp_path, clock=CLOCK)
    assert back.ids == s.ids and back.alphas == s.alphas
    np.testing.assert_array_equal(back.merged.values, s.merged.values)
    assert back.ledger == s.ledger
    assert set(back.archive) == {"m0"}
    assert back.basis.order_log == s.basis.order_log
    recomputed = me.load_state(tmp_path, recompute_merged=True)
    assert rel(recomputed.merged.values, s.merged.values) <= 1e-12
    # a later save with fewer members removes stale files
    me.save_state(me.unmerge(back, "m1"), tmp_path)
    assert len(list((tmp_path / "members").glob("*.mdmc"))) == 2


def test_ledger_line_format_and_tamper_detection(tmp_path):
    e = LedgerEntry(1, "integrate", "model a", 0.5, "ab" * 32, "2026-01-01T00:00:00.000000Z", "op")
    line = e.to_line()
    assert line.startswith("seq=1 action=integrate model_id=model%20a alpha=0.5 ")
    assert "timestamp=2026-01-01T00:00:00.000000Z" in line
    assert LedgerEntry.from_line(line) == e
    with pytest.raises(IntegrityError):
        LedgerEntry.from_line(line.replace("alpha=0.5", "alpha=0.6"))
    path = tmp_path / "ledger.log"
    write_ledger([e], path)
    append_ledger([LedgerEntry(2, "unmerge", "model a", 0.5, "ab" * 32, "t", "op")], path)
    assert [x.seq for x in read_ledger(path)] == [1, 2]
    append_ledger([LedgerEntry(2, "reweight", "model a", 1.0, None, "t", "op")], path)
    with pytest.raises(IntegrityError):
        read_ledger(path)
    with pytest.raises(ValidationError):
        LedgerEntry(3, "explode")


def test_ledger_actions_cover_every_state_change():
    s = merged_state()
    actions = set()
    for step in (
        lambda x: me.integrate(x, raw_deltas(x.base, 1, 77, "n")[0]),
        lambda x: me.reweight(x, "n0", 3.0),
        lambda x: me.unmerge(x, "n0"),
        me.reorthogonalize_state,
        lambda x: me.purge(x, "n0"),
    ):
        before = len(s.ledger)
        s = step(s)
        assert len(s.ledger) == before + 1
        actions.add(s.ledger[-1].action)
    assert actions == {"integrate", "reweight", "unmerge", "reorthogonalize", "purge"}


def test_alpha_keys_must_match_basis():
    s = merged_state()
    with pytest.raises(ValidationError):
        me.MergeState(s.base, s.basis, {"m0": 1.0}, s.merged)


def test_merged_cache_matches_definition_through_history():
    s = merged_state(2)
    for op in itertools.islice(itertools.cycle(["int", "rw"]), 10):
        if op == "int":
            s = me.integrate(s, raw_deltas(s.base, 1, len(s.ledger), f"x{len(s.ledger)}_")[0], 0.9)
        else:
            s = me.reweight(s, s.ids[0], s.alphas[s.ids[0]] + 0.1)
    assert rel(s.merged.values, me.assemble(s.base, s.basis, s.alphas)) <= 1e-10
