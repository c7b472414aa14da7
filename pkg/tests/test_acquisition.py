import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rank_surfaces import acquisition as acq
from rank_surfaces import ranking
from rank_surfaces.gp import KernelSpec, KrigingModel, ObservationSet


def min_mean_two(m1, v1, m2, v2):
    """Independent evaluation of E[min] for two Gaussians."""
    d = math.sqrt(v1 + v2)
    a = (m1 - m2) / d
    phi = math.exp(-a * a / 2) / math.sqrt(2 * math.pi)
    Phi = lambda z: 0.5 * (1 + math.erf(z / math.sqrt(2)))
    return m1 * Phi(-a) + m2 * Phi(a) - d * phi


def random_post(rng, D, L):
    return rng.normal(size=(D, L)), rng.uniform(0.0, 1.0, (D, L)), rng.uniform(0.01, 0.5, (D, L))


# -- spec validation and schedule --------------------------------------------------


def test_spec_validation():
    with pytest.raises(ValueError):
        acq.AcquisitionSpec("nope")
    with pytest.raises(ValueError):
        acq.AcquisitionSpec("gap_ucb", ucb_scale=-1)
    with pytest.raises(ValueError):
        acq.AcquisitionSpec("gap_ucb", epsilon=1.5)
    with pytest.raises(ValueError):
        acq.AcquisitionSpec("conc_gamma", gamma_variant="map")
    with pytest.raises(ValueError):
        acq.AcquisitionSpec("lhs", allocation=(1.0, 0.0))
    assert acq.AcquisitionSpec("gap_ucb", ucb_scale=[1, 2]).ucb_scale == (1.0, 2.0)


def test_gamma_schedule_examples():
    assert acq.gamma_schedule(acq.AcquisitionSpec("gap_ucb", 0.0), 50) == 0.0
    assert acq.gamma_schedule(acq.AcquisitionSpec("gap_ucb", 1.0), math.e**2) == pytest.approx(math.sqrt(2))
    assert acq.gamma_schedule(acq.AcquisitionSpec("gap_ucb", 4.0), 100) == pytest.approx(8.584, abs=1e-3)
    one = acq.AcquisitionSpec("gap_ucb", 1.0)
    assert acq.gamma_schedule(one, 0) == acq.gamma_schedule(one, 2) > 0
    per = acq.gamma_schedule(acq.AcquisitionSpec("gap_ucb", (1.0, 2.0)), 10)
    assert per == pytest.approx([math.sqrt(math.log(10)), 2 * math.sqrt(math.log(10))])


# -- scores ------------------------------------------------------------------------


def test_gap_ucb_examples():
    s = acq.gap_ucb_score(np.array([[0.4, 0.4]]), np.array([[0.3, 0.2]]), 0.0)
    assert s.tolist() == [[0.0, 0.0]]
    s = acq.gap_ucb_score(np.array([[0.0, 0.2]]), np.array([[0.01, 0.01]]), 1.0)
    assert np.allclose(s, -0.1, rtol=0, atol=1e-15)


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0, 2), st.floats(0.01, 2), st.floats(0.01, 5))
def test_gap_ucb_monotone_in_sd(a, b, v, dv, gamma):
    m = np.array([[a, b]])
    lo = acq.gap_ucb_score(m, np.array([[v, v]]), gamma)
    hi = acq.gap_ucb_score(m, np.array([[v + dv, v + dv]]), gamma)
    assert np.all(hi > lo)


def test_gap_alc_examples():
    m = np.array([[0.0, 0.3]])
    v = np.array([[0.04, 0.09]])
    spec = acq.AcquisitionSpec("gap_alc", ucb_scale=1.0)
    k = math.e  # gamma = 1
    s = acq.score_pairs(spec, m, v, k, noise_vars=np.zeros_like(v))
    gamma = acq.gamma_schedule(spec, k)
    assert gamma == pytest.approx(1.0)
    assert np.allclose(s, -0.3 + gamma * np.sqrt(v), rtol=1e-12)  # zero noise: full decline
    s = acq.score_pairs(spec, m, np.zeros_like(v), k, noise_vars=np.ones_like(v))
    assert np.allclose(s, -0.3, rtol=1e-12)
    s = acq.score_pairs(spec, m, v, k, noise_vars=v)
    assert np.allclose(s, -0.3 + gamma * np.sqrt(v) * (1 - 1 / math.sqrt(2)), rtol=1e-12)


def test_gap_sur_two_point_value():
    m, v, nv = np.array([[0.0, 0.0]]), np.array([[1.0, 1.0]]), np.array([[1.0, 1.0]])
    s = acq.gap_sur_score(m, v, nv)
    now = 0.0 - min_mean_two(0, 1, 0, 1)
    after = 0.0 - min_mean_two(0, 0.5, 0, 1)
    assert now == pytest.approx(math.sqrt(2) / math.sqrt(2 * math.pi))
    assert s[0, 0] == pytest.approx(now - after, abs=1e-12)
    assert s[0, 1] == pytest.approx(now - after, abs=1e-12)


def test_gap_sur_zero_cases():
    s = acq.gap_sur_score(np.array([[0.0, 0.1]]), np.array([[0.0, 0.5]]), np.array([[0.1, 0.1]]))
    assert s[0, 0] == 0.0 and s[0, 1] > 0
    s = acq.gap_sur_score(np.array([[0.0, 50.0]]), np.array([[0.2, 0.2]]), np.array([[0.1, 0.1]]))
    assert np.all(s < 1e-8)
    s = acq.gap_sur_score(np.array([[0.0, 0.0]]), np.array([[0.2, 0.3]]), np.array([[np.inf, np.inf]]))
    assert np.all(np.abs(s) <= 1e-10)


@settings(max_examples=80)
@given(st.integers(1, 20), st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_gap_sur_nonnegative(D, L, seed):
    rng = np.random.default_rng(seed)
    m, v, nv = random_post(rng, D, L)
    assert np.all(acq.gap_sur_score(m, v, nv) >= 0)


@settings(max_examples=40)
@given(st.integers(2, 4), st.integers(0, 2**31 - 1))
def test_scores_label_equivariant(L, seed):
    rng = np.random.default_rng(seed)
    m, v, nv = random_post(rng, 15, L)
    m = np.round(m, 3)  # keep distinct values distinct
    perm = rng.permutation(L)
    inv = np.argsort(perm)
    methods = ["gap_ucb", "gap_alc", "gamma_ent_ucb", "gamma_best_ucb", "gamma_bvsb_ucb"]
    variants = ["ent", "bvsb", "best"]
    if L == 2:  # the minimum fold is exact, hence order free, only for two surfaces
        methods.append("gap_sur")
        variants.append("mgap")
    for method in methods:
        spec = acq.AcquisitionSpec(method, ucb_scale=0.7)
        a = acq.score_pairs(spec, m, v, 9, noise_vars=nv)
        b = acq.score_pairs(spec, m[:, perm], v[:, perm], 9, noise_vars=nv[:, perm])[:, inv]
        assert np.allclose(a, b, rtol=1e-9, atol=1e-12), method
    for variant in variants:
        a = acq.gamma_score(m, v, variant)
        b = acq.gamma_score(m[:, perm], v[:, perm], variant)
        assert np.allclose(a, b, rtol=1e-9, atol=1e-9), variant


@settings(max_examples=40)
@given(st.integers(3, 5), st.integers(0, 2**31 - 1))
def test_m_gap_fold_order_sensitivity_is_small(L, seed):
    # for three or more surfaces the minimum is folded in index order, so
    # relabelling changes the moment-matched value slightly
    rng = np.random.default_rng(seed)
    m, v, nv = random_post(rng, 15, L)
    perm = rng.permutation(L)
    sd = np.sqrt(v.max(axis=1))
    a = ranking.m_gap(m, v)
    b = ranking.m_gap(m[:, perm], v[:, perm])
    assert np.all(np.abs(a - b) <= 0.05 * sd + 1e-12)
    sa = acq.gap_sur_score(m, v, nv)
    sb = acq.gap_sur_score(m[:, perm], v[:, perm], nv[:, perm])[:, np.argsort(perm)]
    assert np.all(np.abs(sa - sb) <= 0.1 * sd[:, None] + 1e-12)


@settings(max_examples=60)
@given(st.integers(2, 30), st.integers(0, 2**31 - 1))
def test_best_and_bvsb_agree_for_two_surfaces(D, seed):
    rng = np.random.default_rng(seed)
    m, v, _ = random_post(rng, D, 2)
    v = v + 0.01
    best = acq.gamma_score(m, v, "best")
    bvsb = acq.gamma_score(m, v, "bvsb")
    assert np.allclose(bvsb, 1 + 2 * best, atol=1e-12)
    i, j = int(np.argmax(best)), int(np.argmax(bvsb))
    assert i == j or abs(best[i] - best[j]) < 1e-12


def test_concurrent_score_adds_all_surfaces():
    m, v = np.array([[0.0, 0.1], [0.0, 2.0]]), np.array([[0.04, 0.09], [0.01, 0.01]])
    s = acq.concurrent_score(m, v, "mgap", 2.0)
    assert s == pytest.approx(ranking.m_gap(m, v) + 2.0 * np.sqrt(v).sum(axis=1))


# -- selection ---------------------------------------------------------------------


def test_uniform_selection_frequencies():
    D, L, n = 5, 2, 10_000
    m, v = np.zeros((D, L)), np.ones((D, L))
    rng = np.random.default_rng(0)
    spec = acq.AcquisitionSpec("gap_ucb", ucb_scale=1.0, epsilon=1.0)
    counts = np.zeros((D, L))
    for _ in range(n):
        s = acq.select(spec, m, v, 10, rng)
        counts[s.index, s.surface] += 1
    p = 1 / (D * L)
    assert np.all(np.abs(counts / n - p) < 3 * math.sqrt(p * (1 - p) / n))


def test_two_step_picks_larger_variance():
    s = acq.select(acq.AcquisitionSpec("two_step"), np.array([[0.0, 0.1]]), np.array([[0.09, 0.01]]), 5,
                   np.random.default_rng(0))
    assert s == (0, 0)


def test_two_step_picks_smallest_gap():
    m = np.array([[0.0, 1.0], [0.0, 0.05], [0.0, 0.5]])
    v = np.array([[0.1, 0.2], [0.3, 0.1], [0.1, 0.1]])
    assert acq.select(acq.AcquisitionSpec("two_step"), m, v, 5, np.random.default_rng(0)) == (1, 0)


def test_pure_mgap_selection():
    m = np.array([[0.0, 1.0], [0.0, 0.05]])
    v = np.array([[0.1, 0.2], [0.01, 0.04]])
    assert acq.select(acq.AcquisitionSpec("pure_mgap"), m, v, 5, np.random.default_rng(0)) == (1, 1)


def test_ties_break_lexicographically():
    m, v = np.zeros((3, 2)), np.ones((3, 2))
    s = acq.select(acq.AcquisitionSpec("gap_ucb", 1.0), m, v, 5, np.random.default_rng(0))
    assert s == (0, 0)


def test_concurrent_returns_all_surfaces():
    m = np.array([[0.0, 1.0], [0.0, 0.05]])
    v = np.full((2, 2), 0.04)
    s = acq.select(acq.AcquisitionSpec("conc_gamma", gamma_variant="mgap"), m, v, 5, np.random.default_rng(0))
    assert s == (1, None)


def test_known_gap_needs_truth_and_gap_sur_needs_noise():
    m, v = np.zeros((2, 2)), np.ones((2, 2))
    with pytest.raises(ValueError):
        acq.select(acq.AcquisitionSpec("known_gap_ucb", 4.0), m, v, 5, np.random.default_rng(0))
    with pytest.raises(ValueError):
        acq.select(acq.AcquisitionSpec("gap_sur"), m, v, 5, np.random.default_rng(0))
    with pytest.raises(ValueError):
        acq.select(acq.AcquisitionSpec("lhs"), m, v, 5, np.random.default_rng(0))


def test_known_gap_uses_true_gaps():
    m = np.zeros((2, 2))
    truth = np.array([[0.0, 1.0], [0.0, 0.1]])
    s = acq.select(acq.AcquisitionSpec("known_gap_ucb", 0.0), m, np.ones((2, 2)), 5, np.random.default_rng(0),
                   true_means=truth)
    assert s == (1, 0)


def test_empty_candidates_rejected():
    with pytest.raises(ValueError):
        acq.select(acq.AcquisitionSpec("gap_ucb"), np.zeros((0, 2)), np.zeros((0, 2)), 5, np.random.default_rng(0))
    model = KrigingModel(KernelSpec(1.0, (1.0,)))
    with pytest.raises(ValueError):
        acq.select_pair(acq.AcquisitionSpec("gap_ucb"), [model, model], np.zeros((0, 1)), 5,
                        np.random.default_rng(0))


def test_select_pair_deterministic_given_seed():
    rng = np.random.default_rng(1)
    X = rng.uniform(0, 1, (8, 1))
    spec = KernelSpec.from_lengthscales(0.1, [0.2], 0.5)
    models = [KrigingModel(spec, ObservationSet(X, rng.normal(size=8), np.full(8, 0.01))) for _ in range(2)]
    cand = rng.uniform(0, 1, (50, 1))
    a_spec = acq.AcquisitionSpec("gap_sur", epsilon=0.3)
    picks = []
    for _ in range(2):
        r = np.random.default_rng(42)
        picks.append([acq.select_pair(a_spec, models, cand, k, r, noise_vars=0.01) for k in range(10, 20)])
    assert all(np.array_equal(p[0], q[0]) and p[1] == q[1] for p, q in zip(*picks))


def test_tied_means_do_not_depend_on_labels():
    m = np.array([[1.313, -0.596, -0.668, -0.596]])
    v = np.array([[0.90, 0.81, 0.38, 0.80]])
    for variant in ("bvsb", "best"):
        a = acq.gamma_score(m, v, variant)
        b = acq.gamma_score(m[:, ::-1], v[:, ::-1], variant)
        assert a == pytest.approx(b, abs=1e-15)
