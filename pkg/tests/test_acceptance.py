"""Acceptance suite: ten end-to-end criteria, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v``; the report lines go straight
to the terminal even when output is captured.
"""
import math
import sys
import time

import numpy as np
import pytest
import scipy.linalg

from conftest import random_hermitian, random_matrix, random_state
from lindqoc.cli import benchmark_split
from lindqoc.estimator import first_order_queries, grid_size
from lindqoc.interaction import per_slice_errors, simulate_interaction
from lindqoc.model import (SIGMA_MINUS, SIGMA_X, SIGMA_Z, ControlField, LindbladModel,
                           TimeRescaling, trace_distance)
from lindqoc.objective import NoiseModel, derivative_bound_check
from lindqoc.pagd import (check_second_order, derive_params, energy_inequality_violations,
                          improve_or_localize_violations, nce_drop_violations, run, uniform_ball)
from lindqoc.propagator import (RescaledGenerator, dyson_propagator, log_ratio_order,
                                oracle_evolve, simulate)
from lindqoc.scenario import BUNDLED, bundled_path, load_scenario, run_scenario, scenario_params, \
    trace_rows

pytestmark = pytest.mark.slow

ARTIFACTS = ("trace.csv", "summary.json", "controls.json", "rho_final.json")


@pytest.fixture
def report(pytestconfig):
    capman = pytestconfig.pluginmanager.getplugin("capturemanager")

    def emit(n, ok, detail):
        with capman.global_and_fixture_disabled():
            sys.stdout.write(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}: {detail}\n")
        return ok

    return emit


@pytest.fixture(scope="module")
def scenario_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("scenarios")
    out = {}
    for name in BUNDLED:
        cfg = load_scenario(bundled_path(name))
        summary = run_scenario(cfg, root / name)
        out[name] = (cfg, root / name, summary)
    return out


# ---------------------------------------------------------------------------

@pytest.mark.parametrize("gT", [0.1, 0.5, 1.0])
def test_c1_amplitude_damping_analytic(report, gT):
    gamma, T = 1.0, gT
    model = LindbladModel(np.zeros((2, 2)), [], [math.sqrt(gamma) * SIGMA_MINUS])
    excited = np.diag([0.0, 1.0]).astype(complex)
    t0 = time.perf_counter()
    res = simulate(model, ControlField.zeros(0, 1, T), excited, T, eps=1e-4)
    elapsed = time.perf_counter() - t0
    err = abs(res.rho[1, 1].real - math.exp(-gamma * T))
    ok = err <= 5e-4 and elapsed < 10
    report(1, ok, f"gamma*T={gT}: |rho11 - e^-gT| = {err:.2e} (<= 5e-4), {elapsed:.2f}s (< 10s)")
    assert ok


def test_c2_oracle_equivalence(report):
    worst = worst_defect_ratio = worst_herm = 0.0
    min_eig = 1.0
    failures = []
    for i in range(20):
        rng = np.random.default_rng(100 + i)
        d = 2 if i % 2 == 0 else 4
        n_c, m = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        model = LindbladModel(random_hermitian(rng, d), [random_hermitian(rng, d) for _ in range(n_c)],
                              [random_matrix(rng, d, rng.uniform(0.2, 1)) for _ in range(m)])
        T = rng.uniform(0.5, 2.0)
        N = int(rng.integers(2, 9))
        u = ControlField(T, rng.uniform(-1, 1, (N + 1, n_c)))
        rho = random_state(rng, d)
        ref = oracle_evolve(model, u, rho, steps=100000)
        res = simulate(model, u, rho, eps=1e-4)
        dist = trace_distance(res.rho, ref)
        herm = float(np.max(np.abs(res.rho - res.rho.conj().T)))
        lam = float(np.linalg.eigvalsh(0.5 * (res.rho + res.rho.conj().T))[0])
        worst = max(worst, dist)
        worst_herm = max(worst_herm, herm)
        min_eig = min(min_eig, lam)
        worst_defect_ratio = max(worst_defect_ratio, res.trace_defect / res.plan.bound)
        if dist > 1e-3 or res.trace_defect > res.plan.bound or herm > 1e-10 or lam < -1e-6:
            failures.append(i)
    ok = not failures
    report(2, ok, f"20 models: max trace distance {worst:.2e} (<= 1e-3), max defect/bound "
                  f"{worst_defect_ratio:.2e}, max |rho - rho^H| {worst_herm:.1e}, "
                  f"min eigenvalue {min_eig:.1e}; failing models {failures}")
    assert ok


def test_c3_error_bound_shape(report):
    model = LindbladModel(0.5 * SIGMA_Z, [SIGMA_X], [0.5 * SIGMA_MINUS])
    u = ControlField(3.0, [[0.4], [-0.6], [0.8], [0.2]])
    gen = RescaledGenerator(model, u, TimeRescaling(model, u, 3.0))
    # reference V(0, 1) in the rescaled variable: midpoint exponential product
    n = 20000
    V = np.eye(2, dtype=complex)
    for J in gen.J((np.arange(n) + 0.5) / n):
        V = scipy.linalg.expm(J / n) @ V
    errs = [float(np.linalg.norm(dyson_propagator(model, u, 0.0, 1.0, Kp, 2 ** 16, generator=gen) - V, 2))
            for Kp in range(1, 7)]
    bounds = [32 * math.e ** 5 / math.factorial(Kp + 1) for Kp in range(1, 7)]
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    under = all(e <= b for e, b in zip(errs, bounds))
    superlinear = all(r > 1 for r in ratios) and all(b > a for a, b in zip(ratios, ratios[1:]))
    ok = under and superlinear
    report(3, ok, "K'=1..6 errors " + ", ".join(f"{e:.1e}" for e in errs)
           + "; successive ratios " + ", ".join(f"{r:.1f}" for r in ratios))
    assert ok


def test_c4_interaction_picture(report):
    split, u = benchmark_split(10.0)
    rho0 = np.diag([0.0, 1.0]).astype(complex)
    n_steps = 8
    ref = oracle_evolve(split.full(), u, rho0, u.T, steps=100000)
    res = simulate_interaction(split, u, rho0, u.T, eps=1e-4, n_steps=n_steps)
    final = trace_distance(res.rho, ref)
    slices = per_slice_errors(split, u, rho0, u.T, 1e-4, n_steps, oracle_steps_per_slice=20000)
    ok = final <= 1e-3 and final <= n_steps * float(slices.max())
    report(4, ok, f"final error {final:.2e} (<= 1e-3), n_steps x max slice error "
                  f"{n_steps * slices.max():.2e}")
    assert ok


@pytest.mark.parametrize("name", BUNDLED)
def test_c5_derivative_bounds(report, name):
    cfg = load_scenario(bundled_path(name))
    assert cfg.objective.normalized
    res = [derivative_bound_check(cfg.objective, k, points=20, seed=0) for k in (1, 2)]
    ok = all(r["passed"] for r in res)
    report(5, ok, f"{name}: max |d J1| / bound = {res[0]['max_ratio']:.3f}, "
                  f"max |d2 J1| / bound = {res[1]['max_ratio']:.3f}")
    assert ok


@pytest.mark.parametrize("name", BUNDLED)
def test_c6_hamiltonian_inequality(report, scenario_runs, name):
    cfg, out, summary = scenario_runs[name]
    params = scenario_params(cfg)
    rows = trace_rows(out)
    checked = sum(r["event"] == "agd" for r in rows)
    bad = energy_inequality_violations(rows, params, cfg.eps_g)
    ok = checked > 0 and not bad
    report(6, ok, f"{name}: {checked} AGD steps checked, {len(bad)} violations "
                  f"({summary['iterations']} iterations, certified={summary['certified']})")
    assert ok


@pytest.mark.parametrize("name", BUNDLED)
def test_scenario_localization_audit(scenario_runs, name):
    cfg, out, _ = scenario_runs[name]
    assert improve_or_localize_violations(trace_rows(out), scenario_params(cfg)) == []


@pytest.mark.xfail(strict=True, reason="with noisy gradients the NCE test can fire without "
                                       "certified curvature, so the drop is not guaranteed")
def test_scenario_nce_drop_under_noise(scenario_runs):
    bad = []
    for name, (cfg, out, _) in scenario_runs.items():
        bad += nce_drop_violations(trace_rows(out), scenario_params(cfg), cfg.eps_g)
    assert bad == []


def _saddle_problem(d=10, ell=1.0, rho=1.0, eps=0.01):
    # quadratic saddle; a quartic term on the escape direction keeps f bounded below
    lam = 2 * math.sqrt(rho * eps)
    a = rho ** 2 / (81 * lam)
    diag = np.full(d, ell)
    diag[-1] = -lam

    def f(x):
        return float(0.5 * np.sum(diag * x * x) + a * x[-1] ** 4 / 4)

    def g(x):
        out = diag * x
        out[-1] += a * x[-1] ** 3
        return out

    params = derive_params(eps, ell, rho, delta=0.05, Delta_f=lam ** 2 / (4 * a), dim=d)
    return f, g, params


def test_c7_saddle_escape(report):
    f, g, p = _saddle_problem()
    limit = math.floor(3 * p.T_steps)
    ok_count = 0
    for seed in range(100):
        x0 = uniform_ball(np.random.default_rng(1000 + seed), p.dim, p.r)
        noise = NoiseModel(p.eps_g_second, "spherical", seed)
        res = run(f, lambda x, k: noise.apply(g(x), *k), x0, p, seed=seed, max_iter=limit,
                  terminate="none")
        rep = check_second_order(f, res.state.x, p, grad=g)
        ok_count += rep["first_order"] and rep["second_order"]
    ok = ok_count >= 95
    report(7, ok, f"{ok_count}/100 seeds second-order stationary within 3T = {limit} iterations")
    assert ok


def _cosine_problem(d=20, confine=0.1):
    def f(x):
        c = np.cos(x)
        return float(np.sum(c * np.roll(c, -1)) + 0.5 * confine * x @ x)

    def g(x):
        c, s = np.cos(x), np.sin(x)
        return -s * (np.roll(c, -1) + np.roll(c, 1)) + confine * x

    def hess(x):
        c, s = np.cos(x), np.sin(x)
        H = np.diag(-c * (np.roll(c, -1) + np.roll(c, 1)) + confine)
        i = np.arange(d)
        j = (i + 1) % d
        H[i, j] += s * s[j]
        H[j, i] += s * s[j]
        return H

    # constants measured on random points, with a 10% margin
    rng = np.random.default_rng(0)
    ell = rho = 0.0
    for _ in range(2000):
        x = rng.uniform(-4, 4, d)
        y = x + 1e-3 * rng.normal(size=d)
        ell = max(ell, np.linalg.norm(hess(x), 2))
        rho = max(rho, np.linalg.norm(hess(x) - hess(y), 2) / np.linalg.norm(x - y))
    return f, g, derive_params(0.01, 1.1 * ell, 1.1 * rho, delta=0.1, Delta_f=2 * d, dim=d)


def test_c8_noise_threshold(report):
    f, g, p = _cosine_problem()
    counts = {}
    for label, eps_g in (("eps_g_first", p.eps_g_first), ("0", 0.0)):
        hits = 0
        for seed in range(100):
            x0 = np.random.default_rng(5000 + seed).uniform(-math.pi, math.pi, p.dim)
            noise = NoiseModel(eps_g, "spherical", seed)
            res = run(f, lambda x, k: noise.apply(g(x), *k), x0, p, seed=seed,
                      max_iter=min(p.k_max, 20000), eps_g=eps_g)
            hits += np.linalg.norm(g(res.best_x)) <= p.eps
        counts[label] = hits
    ok = counts["eps_g_first"] >= 90 and counts["0"] == 100
    report(8, ok, f"eps_g = eps_g_first ({p.eps_g_first:.1e}): {counts['eps_g_first']}/100 "
                  f"(>= 90); eps_g = 0: {counts['0']}/100")
    assert ok


def test_c9_determinism(report, scenario_runs, tmp_path):
    cfg, first, _ = scenario_runs["amplitude_damping"]
    run_scenario(load_scenario(bundled_path("amplitude_damping")), tmp_path / "again")
    same = {a: (first / a).read_bytes() == (tmp_path / "again" / a).read_bytes() for a in ARTIFACTS}
    ok = all(same.values())
    report(9, ok, "amplitude_damping rerun byte-identical: "
                  + ", ".join(f"{a}={s}" for a, s in same.items()))
    assert ok


def test_c10_estimator(report):
    K = log_ratio_order(1e-3)
    N = grid_size(4.0, 0.01)
    growth = first_order_queries(1, 1.0, 1.0, 0.005, 1.0) / first_order_queries(1, 1.0, 1.0, 0.01, 1.0)
    ok = K == 4 and N == 80 and growth == pytest.approx(2 ** (23 / 8), rel=1e-14)
    report(10, ok, f"K(1e-3) = {K}, N(T=4, eps=0.01) = {N}, halving growth {growth:.6f} "
                   f"vs 2^(23/8) = {2 ** (23 / 8):.6f}")
    assert ok
