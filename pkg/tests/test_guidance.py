from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from flipsim import guidance as gd
from flipsim.engine import Batch, build_layout, build_model
from flipsim.errors import ConfigurationError, ParseError
from oracles import brute_force_dead_units


def flat_layout(n, prunable=None):
    """A stand-in layout exposing only the prunable flags."""
    flags = np.ones(n, dtype=bool) if prunable is None else np.asarray(prunable, dtype=bool)
    return SimpleNamespace(prunable=flags)


# ---------------------------------------------------------------- golden vectors


def test_deviation_identity_and_values():
    w = np.array([0.3, -2.0, 5.0])
    assert np.all(gd.deviation_scores(w, w) == 0)
    np.testing.assert_allclose(gd.deviation_scores([2.0, -1.0], [0.5, 0.0]), [2.25, 1.0], atol=1e-12)


def test_deviation_even_in_sign():
    w0 = np.array([1.0, 1.0])
    np.testing.assert_allclose(gd.deviation_scores(w0 + [0.4, -0.7], w0), gd.deviation_scores(w0 - [0.4, -0.7], w0),
                               rtol=1e-12)


def test_deviation_length_mismatch():
    with pytest.raises(ConfigurationError):
        gd.deviation_scores([1.0, 2.0], [1.0])


def test_init_guidance_minmax():
    G = gd.init_guidance([[0.0, 2.0, 4.0]], flat_layout(3)).G
    np.testing.assert_allclose(G, [0.0, 0.5, 1.0], atol=1e-12)


def test_init_guidance_degenerate_all_ones():
    assert np.all(gd.init_guidance([[3.0, 3.0, 3.0]], flat_layout(3)).G == 1.0)


def test_init_guidance_two_explorers():
    state = gd.init_guidance([[1.0, 3.0], [3.0, 5.0]], flat_layout(2))
    np.testing.assert_allclose(state.G, [0.0, 1.0], atol=1e-12)
    assert state.round == 0


def test_init_guidance_ignores_non_prunable():
    state = gd.init_guidance([[100.0, 0.0, 1.0, -50.0]], flat_layout(4, [False, True, True, False]))
    np.testing.assert_allclose(state.G, [1.0, 0.0, 1.0, 1.0], atol=1e-12)


def test_init_guidance_empty():
    with pytest.raises(ConfigurationError):
        gd.init_guidance([], flat_layout(3))


def test_agreement_unanimous():
    A, V = gd.agreement(np.tile([0.2, -0.5, 3.0], (4, 1)))
    np.testing.assert_allclose(A, 1.0, atol=1e-12)
    assert np.all(V == 0)


def test_agreement_perfect_disagreement():
    A, _ = gd.agreement([[0.7], [-0.7]])
    assert A[0] == 0.0


def test_agreement_population_variance():
    A, V = gd.agreement([[1.0], [3.0]])
    assert V[0] == pytest.approx(1.0, abs=1e-12)
    assert A[0] == pytest.approx(0.5, abs=1e-12)


def test_agreement_sign_zero_counts_as_abstention():
    A, V = gd.agreement([[0.0], [0.0], [2.0], [2.0]])
    # |mean sign| = 0.5, population variance = 1
    assert A[0] == pytest.approx(0.5 / 2.0, abs=1e-12)


def test_agreement_needs_clients():
    with pytest.raises(ConfigurationError):
        gd.agreement(np.zeros((0, 3)))


def test_importance_zero_agreement():
    dh, I = gd.importance([1.0, -4.0, 2.0], np.zeros(3), flat_layout(3))
    assert np.array_equal(I, dh)


def test_importance_max_is_two():
    _, I = gd.importance([0.1, -3.0, 1.0], np.ones(3), flat_layout(3))
    assert I[1] == 2.0


def test_importance_golden():
    dh, I = gd.importance([1.0, 2.0, 3.0], [0.0, 0.5, 1.0], flat_layout(3))
    np.testing.assert_allclose(dh, [0.0, 0.375, 1.0], atol=1e-12)
    np.testing.assert_allclose(I, [0.0, 0.5625, 2.0], atol=1e-12)


def test_round_scores_uses_mean_update():
    updates = np.array([[1.0, 0.0, 4.0], [3.0, 2.0, 2.0]])
    s = gd.round_scores(updates, flat_layout(3))
    expected_dh, _ = gd.importance(updates.mean(axis=0), s.A, flat_layout(3))
    np.testing.assert_allclose(s.delta_hat, expected_dh)


def test_ema_zero_agreement_keeps_guidance():
    G = np.array([0.0, 0.25, 1.0, 0.6])
    for bound in ("clamp", "renormalize"):
        out = gd.ema_refine(gd.GuidanceState(G.copy(), 3), np.full(4, 2.0), np.zeros(4), flat_layout(4), bound)
        np.testing.assert_allclose(out.G, G, atol=1e-12)
        assert out.round == 4


def test_ema_full_trust_takes_importance():
    G = np.array([0.5, 0.0, 1.0])
    A = np.array([1.0, 0.0, 0.0])
    I = np.array([0.8, 2.0, 2.0])
    out = gd.ema_refine(gd.GuidanceState(G), I, A, flat_layout(3), bound="none")
    assert out.G[0] == pytest.approx(0.8, abs=1e-12)


def test_ema_golden_raw_value():
    out = gd.ema_refine(gd.GuidanceState(np.array([0.5])), np.array([1.0]), np.array([0.5]), flat_layout(1), "none")
    assert out.G[0] == pytest.approx(0.75, abs=1e-12)


def test_ema_renormalize_and_clamp_bounds():
    G = np.array([0.0, 0.5, 1.0])
    A = np.array([0.0, 1.0, 1.0])
    I = np.array([0.0, 2.0, 1.0])
    ren = gd.ema_refine(gd.GuidanceState(G), I, A, flat_layout(3), "renormalize").G
    cla = gd.ema_refine(gd.GuidanceState(G), I, A, flat_layout(3), "clamp").G
    np.testing.assert_allclose(ren, [0.0, 1.0, 0.5], atol=1e-12)
    np.testing.assert_allclose(cla, [0.0, 1.0, 1.0], atol=1e-12)
    with pytest.raises(ConfigurationError):
        gd.ema_refine(gd.GuidanceState(G), I, A, flat_layout(3), "wrap")


def test_ema_non_prunable_stays_one():
    lay = flat_layout(3, [True, False, True])
    out = gd.ema_refine(gd.GuidanceState(np.array([0.2, 1.0, 0.9])), np.zeros(3), np.ones(3), lay)
    assert out.G[1] == 1.0


# ---------------------------------------------------------------- masks


def test_binarize_threshold_inclusive():
    layout = build_layout([("dense", 1)], (3,))  # 3 weights + 1 bias
    state = gd.GuidanceState(np.array([0.1, 0.3, 0.9, 1.0]))
    assert gd.binarize(state, 0.3, layout).keep.tolist() == [False, True, True, True]
    assert gd.binarize(state, 0.0, layout).keep.all()


def test_binarize_rejects_bad_threshold():
    layout = build_layout([("dense", 1)], (3,))
    with pytest.raises(ConfigurationError):
        gd.binarize(gd.GuidanceState(np.ones(4)), 1.5, layout)


def test_non_prunable_always_kept():
    layout, _ = build_model("tiny_mlp", 10, (64,), seed=0)
    mask = gd.binarize(gd.GuidanceState(np.where(layout.prunable, 0.0, 1.0)), 0.5, layout)
    assert np.all(mask.keep[~layout.prunable])
    # every unit lost all its weights
    assert mask.deactivated_units == frozenset(layout.units())


def test_apply_mask_contracts():
    layout, params = build_model("tiny_mlp", 10, (64,), seed=0)
    params = params + 0.1
    assert np.array_equal(gd.apply_mask(params, gd.PruningMask.all_keep(len(params))), params)
    prune_all = gd.mask_from_keep(np.zeros(len(params), dtype=bool), layout)
    out = gd.apply_mask(params, prune_all)
    assert np.all(out[layout.prunable] == 0)
    assert np.array_equal(out[~layout.prunable], params[~layout.prunable])
    mixed = gd.mask_from_keep(np.random.default_rng(0).random(len(params)) < 0.5, layout)
    once = gd.apply_mask(params, mixed)
    assert np.array_equal(gd.apply_mask(once, mixed), once)
    with pytest.raises(ConfigurationError):
        gd.apply_mask(params[:-1], mixed)


@settings(max_examples=200, deadline=None)
@given(G=arrays(np.float64, 30, elements=st.floats(0, 1)), t1=st.floats(0, 1), t2=st.floats(0, 1))
def test_mask_monotone_in_threshold(G, t1, t2):
    layout = build_layout([("dense", 5)], (5,))
    lo, hi = sorted((t1, t2))
    state = gd.GuidanceState(G)
    keep_lo, keep_hi = gd.binarize(state, lo, layout).keep, gd.binarize(state, hi, layout).keep
    assert np.all(keep_hi <= keep_lo)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), density=st.floats(0, 1))
def test_collapse_matches_brute_force(seed, density):
    rng = np.random.default_rng(seed)
    layout = build_layout([("conv2d", 3, 2), ("relu",), ("flatten",), ("dense", 4), ("relu",), ("dense", 2)], (1, 4, 4))
    keep = rng.random(layout.total_params) < density
    mask = gd.mask_from_keep(keep, layout)
    assert set(mask.deactivated_units) == brute_force_dead_units(mask.keep, layout)


def test_single_unit_collapse():
    layout, _ = build_model("tiny_cnn", 10, (1, 8, 8), seed=0)
    keep = np.ones(layout.total_params, dtype=bool)
    keep[layout.unit_params(0, 2)] = False
    mask = gd.mask_from_keep(keep, layout)
    assert mask.deactivated_units == {(0, 2)}
    keep[layout.unit_params(0, 1)[0]] = False
    assert gd.mask_from_keep(keep, layout).deactivated_units == {(0, 2)}


# ---------------------------------------------------------------- properties


@settings(max_examples=300, deadline=None)
@given(K=st.integers(1, 6), P=st.integers(2, 20), seed=st.integers(0, 2**31), steps=st.integers(1, 4),
       bound=st.sampled_from(["clamp", "renormalize"]))
def test_range_invariants(K, P, seed, steps, bound):
    rng = np.random.default_rng(seed)
    lay = flat_layout(P, rng.random(P) < 0.8)
    state = gd.init_guidance(rng.exponential(size=(2, P)), lay)
    for _ in range(steps):
        updates = rng.normal(size=(K, P)) * rng.choice([0.0, 1e-3, 1.0, 50.0], size=(K, P))
        s = gd.round_scores(updates, lay)
        assert np.all((s.A >= 0) & (s.A <= 1)) and np.all(s.V >= 0)
        assert np.all((s.delta_hat >= 0) & (s.delta_hat <= 1))
        assert np.all((s.I >= 0) & (s.I <= 2))
        state = gd.ema_refine(state, s.I, s.A, lay, bound)
        assert np.all((state.G >= 0) & (state.G <= 1))
        assert np.all(state.G[~lay.prunable] == 1)


@settings(max_examples=100, deadline=None)
@given(K=st.integers(1, 5), seed=st.integers(0, 2**31))
def test_agreement_extremes(K, seed):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(K, 6))
    u[:, 0] = 1.5  # identical, nonzero
    u[:, 1] = 0.0  # nobody moved
    A, _ = gd.agreement(u)
    assert A[0] == 1.0
    assert A[1] == 0.0
    for m in range(2, 6):
        same = np.all(u[:, m] == u[0, m]) and u[0, m] != 0
        assert (A[m] == 1.0) == same


def test_permutation_equivariance():
    rng = np.random.default_rng(3)
    P, K = 40, 5
    prunable = rng.random(P) < 0.7
    perm = rng.permutation(P)
    lay, lay_p = flat_layout(P, prunable), flat_layout(P, prunable[perm])
    G0 = rng.exponential(size=(3, P))
    updates = rng.normal(size=(K, P))
    s = gd.round_scores(updates, lay)
    sp = gd.round_scores(updates[:, perm], lay_p)
    for a, b in [(s.A, sp.A), (s.V, sp.V), (s.delta_hat, sp.delta_hat), (s.I, sp.I)]:
        np.testing.assert_array_equal(a[perm], b)
    g = gd.ema_refine(gd.init_guidance(G0, lay), s.I, s.A, lay)
    gp = gd.ema_refine(gd.init_guidance(G0[:, perm], lay_p), sp.I, sp.A, lay_p)
    np.testing.assert_array_equal(g.G[perm], gp.G)
    np.testing.assert_array_equal((g.G >= 0.4)[perm], gp.G >= 0.4)


# ---------------------------------------------------------------- serialization


def test_guidance_file_roundtrip(tmp_path):
    state = gd.GuidanceState(np.random.default_rng(0).random(101), round=7)
    path = tmp_path / "g.afg"
    gd.save_guidance(state, path)
    blob = path.read_bytes()
    assert blob[:4] == b"AFG1" and len(blob) == 16 + 8 * 101
    back = gd.load_guidance(path)
    assert back.round == 7 and back.G.tobytes() == state.G.tobytes()


@pytest.mark.parametrize("blob", [b"XXXX" + bytes(12), b"AFG1" + bytes(4), b"AFG1" + (0).to_bytes(4, "little") +
                                  (2).to_bytes(8, "little") + bytes(8)])
def test_guidance_file_rejects_corruption(tmp_path, blob):
    path = tmp_path / "bad.afg"
    path.write_bytes(blob)
    with pytest.raises(ParseError):
        gd.load_guidance(path)


# ---------------------------------------------------------------- Taylor saliency


def test_taylor_exact_on_quadratic():
    rng = np.random.default_rng(0)
    h = rng.uniform(0.1, 3.0, 20)
    w = rng.normal(size=20)
    # w sits at the minimum, so the gradient term vanishes
    rep = gd.taylor_saliency(lambda x: 0.5 * np.sum(h * (x - w) ** 2), w, np.arange(20))
    np.testing.assert_allclose(rep.predicted, rep.measured, atol=1e-10, rtol=0)
    np.testing.assert_allclose(rep.curvature, h, rtol=1e-6)


def test_taylor_zero_weight_has_no_effect():
    layout, params = build_model("tiny_mlp", 3, (4,), seed=0)
    params[5] = 0.0
    rng = np.random.default_rng(0)
    batch = Batch(rng.normal(size=(6, 4)), rng.integers(0, 3, 6))
    rep = gd.taylor_saliency_check(layout, params, batch, [5, 6])
    assert rep.measured[0] == 0.0 and rep.predicted[0] == 0.0
