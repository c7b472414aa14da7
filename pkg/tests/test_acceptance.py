"""End-to-end acceptance checks; each test prints one PASS/FAIL line."""

import csv
import dataclasses
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from rank_surfaces import acquisition as acq
from rank_surfaces import cli
from rank_surfaces import config as cf
from rank_surfaces import designer as dz
from rank_surfaces import problems as pr
from rank_surfaces import ranking
from rank_surfaces.gp import KernelSpec, KrigingModel, ObservationSet

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def bench_subset(tmp_path, source, names, designer=None, count=None):
    """Run the CLI bench on a subset of a shipped benchmark config."""
    cfg = json.loads((CONFIGS / source).read_text())
    cfg["methods"] = [m for m in cfg["methods"] if m["name"] in names]
    assert [m["name"] for m in cfg["methods"]] == list(names)
    cfg["designer"].update(designer or {})
    if count is not None:
        cfg["replication"]["count"] = count
    cfg.pop("output", None)
    path = tmp_path / source
    path.write_text(json.dumps(cfg, indent=2))
    out = tmp_path / (source + ".out")
    assert cli.main(["bench", "--config", str(path), "--out", str(out)]) == 0
    rows = read_csv(out / "bench.csv")
    assert all(r["failed"] == "0" for r in rows), [r["error"] for r in rows if r["failed"] != "0"]
    return rows, {r["method"]: r for r in read_csv(out / "bench_summary.csv")}


def column(rows, method, key):
    return np.array([float(r[key]) for r in rows if r["method"] == method])


# -- 1: kriging equivalence ----------------------------------------------------------


def test_criterion_1_kriging_equivalence(verdict):
    t0 = time.perf_counter()
    worst_update = worst_interp = worst_rise = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        d, n = 1 + seed % 2, int(rng.integers(1, 31))
        spec = KernelSpec.from_lengthscales(rng.uniform(0.5, 2.0), rng.uniform(0.2, 1.0, d), rng.normal())
        X = rng.uniform(0, 1, (n, d))
        y = rng.normal(size=n)
        noise = rng.choice([0.0, 0.01, 0.1], n)
        Q = rng.uniform(0, 1, (20, d))
        m = KrigingModel(spec)
        prev = m.posterior(Q).variance
        for i in range(n):
            m = m.update(X[i], y[i], noise[i])
            var = m.posterior(Q).variance
            worst_rise = max(worst_rise, float(np.max(var - prev)))
            prev = var
        ref = KrigingModel(spec, ObservationSet(X, y, noise))
        a, b = m.posterior(Q), ref.posterior(Q)
        for u, v in ((a.mean, b.mean), (a.variance, b.variance)):
            worst_update = max(worst_update, float(np.max(np.abs(u - v)) / max(1.0, np.max(np.abs(v)))))
        exact = KrigingModel(spec, ObservationSet(X, y, np.zeros(n)))
        fit = exact.posterior(X).mean
        worst_interp = max(worst_interp, float(np.max(np.abs(fit - y)) / max(1.0, np.max(np.abs(y)))))
    elapsed = time.perf_counter() - t0
    ok = worst_update <= 1e-8 and worst_interp <= 1e-8 and worst_rise <= 0.0 and elapsed < 10
    verdict(1, ok, f"update-vs-refit {worst_update:.2e}, interpolation {worst_interp:.2e}, "
                   f"max variance rise {worst_rise:.1e}, {elapsed:.1f}s")


# -- 2: moments of the minimum of two Gaussians -------------------------------------


def mc_min_moments(m1, s1, m2, s2, rng, n=10**7, chunk=2 * 10**6):
    sums = np.zeros(4)  # sum min, sum min^2, sum min^3, sum min^4
    for start in range(0, n, chunk):
        k = min(chunk, n - start)
        z = np.minimum(m1 + s1 * rng.standard_normal(k), m2 + s2 * rng.standard_normal(k))
        z2 = z * z
        sums += (z.sum(), z2.sum(), (z2 * z).sum(), (z2 * z2).sum())
    e1, e2, e3, e4 = sums / n
    se1 = math.sqrt((e2 - e1 * e1) / n)
    se2 = math.sqrt((e4 - e2 * e2) / n)
    return e1, e2, se1, se2


def test_criterion_2_min_of_two_moments(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(20240602)
    worst = 0.0
    for _ in range(20):
        m1, m2 = rng.uniform(-2, 2, 2)
        s1, s2 = rng.uniform(0.05, 2.0, 2)
        e1, e2, se1, se2 = mc_min_moments(m1, s1, m2, s2, rng)
        mean, second = ranking.min_moments_two(m1, s1**2, m2, s2**2)
        worst = max(worst, abs(float(mean) - e1) / se1, abs(float(second) - e2) / se2)
    spot, _ = ranking.min_moments_two(0.0, 1.0, 0.0, 1.0)
    spot_err = abs(float(spot) + 1 / math.sqrt(math.pi))
    elapsed = time.perf_counter() - t0
    ok = worst < 3 and spot_err <= 1e-9 and elapsed < 30
    verdict(2, ok, f"max |analytic - MC| = {worst:.2f} SE over 20 draws, spot error {spot_err:.1e}, {elapsed:.1f}s")


# -- 3: minimum probabilities --------------------------------------------------------


def test_criterion_3_min_probabilities(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    m = rng.normal(size=(100, 2))
    v = rng.uniform(0.01, 2.0, (100, 2))
    closed = np.array([0.5 * (1 + math.erf((b - a) / math.sqrt(2 * (va + vb)))) for (a, b), (va, vb) in zip(m, v)])
    two = float(np.max(np.abs(ranking.min_prob(m, v)[:, 0] - closed)))
    sym = float(np.max(np.abs(ranking.min_prob([0.0, 0.0, 0.0], [0.5, 0.5, 0.5]) - 1 / 3)))
    cases = [(np.array([0.0, 0.5, 1.0]), np.array([0.3, 0.3, 0.3]))]
    cases += [(rng.normal(size=3) * 0.5, rng.uniform(0.1, 1.0, 3)) for _ in range(4)]
    worst_quad = worst_prod = 0.0
    for mu, sd in cases:
        counts = np.zeros(3)
        for _ in range(5):
            z = mu + sd * rng.standard_normal((2 * 10**6, 3))
            counts += np.bincount(z.argmin(axis=1), minlength=3)
        freq = counts / 10**7
        worst_quad = max(worst_quad, float(np.max(np.abs(ranking.min_prob(mu, sd**2) - freq))))
        worst_prod = max(worst_prod, float(np.max(np.abs(ranking.min_prob_product(mu, sd**2) - freq))))
    elapsed = time.perf_counter() - t0
    ok = two <= 1e-12 and sym <= 1e-9 and worst_quad < 0.03 and elapsed < 60
    verdict(3, ok, f"L=2 {two:.1e}, symmetric L=3 {sym:.1e}, L=3 vs MC {worst_quad:.1e} "
                   f"(printed product form {worst_prod:.3f}), {elapsed:.1f}s")


# -- 4: one-dimensional benchmark ----------------------------------------------------


def test_criterion_4_toy_benchmark(tmp_path, verdict):
    t0 = time.perf_counter()
    rows, summary = bench_subset(tmp_path, "toy1d_bench.json", ["Uniform", "Gap-SUR"])
    sur, uni = summary["Gap-SUR"], summary["Uniform"]
    el_sur, el_uni = float(sur["empirical_loss_mean"]), float(uni["empirical_loss_mean"])
    frac = float(sur["D_1_mean"]) / 200
    ep_sur, ep_uni = float(sur["error_prob_mean"]), float(uni["error_prob_mean"])
    ok = (sur["n_ok"] == "100" and el_sur <= 0.6 * el_uni and 0.5e-3 <= el_sur <= 2.0e-3
          and 0.60 <= frac <= 0.85 and ep_sur < ep_uni)
    verdict(4, ok, f"EL Gap-SUR {el_sur:.3e} vs Uniform {el_uni:.3e} (ratio {el_sur / el_uni:.2f}), "
                   f"D_1 fraction {frac:.3f}, ErrProb {ep_sur:.2%} vs {ep_uni:.2%}, "
                   f"{time.perf_counter() - t0:.0f}s")


# -- 5: loss keeps falling with budget -----------------------------------------------


def test_criterion_5_consistency(tmp_path, verdict):
    t0 = time.perf_counter()
    els = {}
    for K in (100, 400):
        (tmp_path / f"k{K}").mkdir()
        _, summary = bench_subset(tmp_path / f"k{K}", "toy1d_bench.json", ["Gap-SUR"], {"budget": K}, count=30)
        els[K] = float(summary["Gap-SUR"]["empirical_loss_mean"])
    ratio = els[400] / els[100]
    verdict(5, ratio < 0.7, f"EL(K=400) {els[400]:.3e} / EL(K=100) {els[100]:.3e} = {ratio:.3f}, "
                            f"{time.perf_counter() - t0:.0f}s")


# -- 6: two-dimensional benchmark ----------------------------------------------------


def test_criterion_6_synthetic_2d(tmp_path, verdict):
    t0 = time.perf_counter()
    rows, summary = bench_subset(tmp_path, "synth2d_bench.json", ["Non-adaptive LHS", "Gap-SUR"])
    tl_sur = float(summary["Gap-SUR"]["true_loss_mean"])
    tl_lhs = float(summary["Non-adaptive LHS"]["true_loss_mean"])
    D = np.column_stack([column(rows, "Gap-SUR", f"D_{j}") for j in range(1, 6)])
    means = D.mean(axis=0)
    d4_smallest = float(np.mean(D.argmin(axis=1) == 3))
    ok = (tl_sur < tl_lhs and np.all((means >= 40) & (means <= 180)) and d4_smallest >= 0.6
          and len(D) == 20)
    verdict(6, ok, f"TL Gap-SUR {tl_sur:.3e} vs LHS {tl_lhs:.3e}, mean D {np.round(means, 1).tolist()}, "
                   f"D_4 smallest in {d4_smallest:.0%}, {time.perf_counter() - t0:.0f}s")


# -- 7: epidemic point estimates -----------------------------------------------------


def test_criterion_7_sir_point_estimates(verdict):
    t0 = time.perf_counter()
    params = pr.SirParams()
    no, act = pr.sir_cost_sampler(params, "no_action"), pr.sir_cost_sampler(params, "action")
    rng = np.random.default_rng(11)
    a = float(no.sample([1800, 10], rng, 2000).mean())
    b = float(act.sample([1800, 10], rng, 2000).mean())
    c = float(no.sample([1400, 50], rng, 2000).mean())
    ok = abs(a - 800) <= 80 and abs(b - 510) <= 25.5 and abs(c - 385) <= 38.5
    verdict(7, ok, f"(1800,10) no-action {a:.1f}, action {b:.1f}; (1400,50) no-action {c:.1f}, "
                   f"{time.perf_counter() - t0:.1f}s")


# -- 8: epidemic classifier ----------------------------------------------------------


@pytest.fixture(scope="module")
def sir_output(tmp_path_factory):
    out = tmp_path_factory.mktemp("sir")
    t0 = time.perf_counter()
    code = cli.main(["sir", "--config", str(CONFIGS / "sir.json"), "--out", str(out)])
    return code, out, time.perf_counter() - t0


def test_criterion_8_sir_boundary(sir_output, verdict):
    code, out, elapsed = sir_output
    rows = read_csv(out / "classifier.csv")
    label = {(float(r["x1"]), float(r["x2"])): r["surface"] for r in rows}
    low = [lab for (s, i), lab in label.items() if s < 1300]
    act = [s for (s, i), lab in label.items() if lab == "action"]
    ok = (code == 0 and label[(1800.0, 10.0)] == "action" and label[(1400.0, 50.0)] == "no_action"
          and all(lab == "no_action" for lab in low))
    verdict(8, ok, f"(1800,10) {label[(1800.0, 10.0)]}, (1400,50) {label[(1400.0, 50.0)]}, "
                   f"{sum(lab != 'no_action' for lab in low)} action points with s<1300, "
                   f"smallest s with action {min(act) if act else None}, {elapsed:.0f}s")


def test_sir_zero_infected_row_and_noise_surfaces(sir_output):
    code, out, _ = sir_output
    rows = read_csv(out / "classifier.csv")
    assert all(r["surface"] == "no_action" for r in rows if float(r["x2"]) == 0.0)
    noise = read_csv(out / "noise_surfaces.csv")
    assert len(noise) == len(rows)
    s0 = np.mean([float(r["sigma_no_action"]) for r in noise])
    sa = np.mean([float(r["sigma_action"]) for r in noise])
    assert s0 > sa


# -- 9: invariants -------------------------------------------------------------------


def test_criterion_9_invariants(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    failures = []
    for _ in range(200):
        L = int(rng.integers(2, 6))
        m = rng.normal(scale=rng.uniform(0.01, 5), size=(30, L))
        v = rng.uniform(0, 2, (30, L)) * (rng.random((30, L)) < 0.85)
        nv = rng.uniform(0.001, 1, (30, L))
        if np.any(ranking.m_gap(m, v) < 0):
            failures.append("m_gap < 0")
        if np.any(acq.gap_sur_score(m, v, nv) < 0):
            failures.append("gap_sur < 0")
        perm = rng.permutation(L)
        inv = np.argsort(perm)
        methods = ["gap_ucb", "gap_alc", "gamma_ent_ucb", "gamma_bvsb_ucb", "gamma_best_ucb"]
        if L == 2:
            methods.append("gap_sur")
        for method in methods:
            spec = acq.AcquisitionSpec(method, ucb_scale=0.5)
            a = acq.score_pairs(spec, m, v, 25, noise_vars=nv)
            b = acq.score_pairs(spec, m[:, perm], v[:, perm], 25, noise_vars=nv[:, perm])[:, inv]
            if not np.allclose(a, b, rtol=1e-9, atol=1e-12):
                failures.append(f"{method} not label equivariant")
    toy = pr.make_problem("toy1d")
    kernels = [KernelSpec.from_lengthscales(v, [l], t, form="standard") for l, v, t in pr.TOY1D_KERNELS]
    cfg = dz.DesignerConfig(10, 60, acquisition=acq.AcquisitionSpec("gap_sur", epsilon=0.2), trace_every=5, seed=3)
    r1, r2 = dz.run(cfg, toy, kernels), dz.run(cfg, toy, kernels)
    if r1.design.records != r2.design.records or r1.trace != r2.trace:
        failures.append("toy1d run not reproducible")
    sir_cfg = cf.loads((CONFIGS / "sir.json").read_text())
    _, methods = cf.run_specs(sir_cfg)
    spec = methods[0][1][0]
    short = dataclasses.replace(spec.designer, budget=56)
    s1 = dz.run(short, pr.make_problem("sir"), spec.kernels)
    s2 = dz.run(short, pr.make_problem("sir"), spec.kernels)
    if s1.design.records != s2.design.records or not np.array_equal(s1.means, s2.means):
        failures.append("sir run not reproducible")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 120
    verdict(9, ok, f"{len(set(failures))} invariant violation(s) {sorted(set(failures))}, {elapsed:.1f}s")
