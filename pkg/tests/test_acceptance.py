"""Acceptance criteria, one test (and one printed PASS/FAIL line) per criterion.

These run the full-size ensembles and scans and take several minutes; run
them alone with ``pytest tests/test_acceptance.py -v``.
"""
import math
import time

import numpy as np
import pytest

from mtbohm.cli import _generic_points
from mtbohm.ensemble import (
    check_no_crossing,
    convergence_order,
    default_surface,
    hsz_scenario,
    quantile_oracle_check,
    run_ensemble,
    sample_initial_arrays,
    scenario_contrast,
    verify_frame_invariance,
)
from mtbohm.experiments import (
    SPLIT_R_PHASE,
    SPLIT_T,
    EprGeometry,
    HszGeometry,
    build_epr,
    build_hsz,
    epr_experiment,
    hsz_experiment,
)
from mtbohm.ensemble import CoordinationSurface
from mtbohm.guidance import FrameEqualTime, InvariantProperTime, integrate_many
from mtbohm.plotdata import density_grid
from mtbohm.wavefunction import branch_weights_many

pytestmark = pytest.mark.slow

N = 10_000
SE3 = 3 * math.sqrt(0.25 / N)  # three worst-case binomial standard errors, ~0.015
RUN_RULE = InvariantProperTime(2e-2)
DELTAS = {"0": 0.0, "pi/4": math.pi / 4, "pi/2": math.pi / 2, "pi": math.pi}
RUNTIME_TARGET = 60.0


@pytest.fixture(scope="module")
def hsz_reports():
    out = {}
    for name, delta in DELTAS.items():
        exp = hsz_experiment(HszGeometry(chi=delta))
        start = time.perf_counter()
        rep = run_ensemble(exp, hsz_scenario(exp.geometry, 1), RUN_RULE, N, seed=2024)
        out[name] = (rep, time.perf_counter() - start)
    return out


def test_1_joint_probabilities(hsz_reports, acceptance):
    parts, ok = [], True
    for name, (rep, secs) in hsz_reports.items():
        worst = max(abs(rep.probabilities[k] - rep.expected[k]) for k in rep.probabilities)
        excl = rep.n_excluded / rep.n
        good = worst <= SE3 and excl < 1e-3
        ok &= good
        parts.append(f"D={name}: max|dP|={worst:.4f} excl={excl:.2%} {secs:.0f}s")
    slow = [name for name, (_, secs) in hsz_reports.items() if secs > RUNTIME_TARGET]
    detail = f"tol {SE3:.4f}; " + "; ".join(parts)
    if slow:
        detail += f"; runtime target {RUNTIME_TARGET:.0f}s missed for {slow}"
    assert acceptance("1", ok, detail)


def test_2_no_single_particle_interference(hsz_reports, acceptance):
    worst = max(abs(m - 0.5) for rep, _ in hsz_reports.values() for m in rep.marginals.values())
    assert acceptance("2", worst <= SE3, f"max |marginal - 0.5| = {worst:.4f} (tol {SE3:.4f}) over all D")


def test_3_epr_anticorrelation(acceptance):
    exp = epr_experiment()
    g: EprGeometry = exp.geometry
    t_after = max(g.interaction_times) + g.window_length
    spin_bad = {"before": 0, "after": 0}

    def check_tables(_, tables):
        for tab in tables:
            before = np.all(tab.t < g.t_i, axis=1)
            if np.any(np.abs(tab.spin[before]) > 1e-9):
                spin_bad["before"] += 1
            after = np.all(tab.t > t_after, axis=1)
            sz = tab.spin[after][:, :, 2]
            signs = np.sign(tab.z[-1])
            want = np.broadcast_to(signs, sz.shape)
            xy = tab.spin[after][:, :, :2]
            if not after.any() or np.any(np.abs(sz - want) > 1e-6) or np.any(np.abs(xy) > 1e-6):
                spin_bad["after"] += 1

    rep = run_ensemble(exp, default_surface(exp), RUN_RULE, N, seed=2025, table_hook=check_tables)
    signed = {"1+": rep.marginals["1+"], "2+": rep.marginals["2+"]}
    worst = max(abs(v - 0.5) for v in signed.values())
    excl = rep.n_excluded / rep.n
    ok = rep.anticorrelation == 1.0 and worst <= SE3 and excl < 1e-3 and not any(spin_bad.values())
    detail = (
        f"anticorrelation {rep.anticorrelation:.4f}; P(1+)={signed['1+']:.4f} P(2+)={signed['2+']:.4f}; "
        f"excl={excl:.2%}; spin rows wrong before/after t_i: {spin_bad['before']}/{spin_bad['after']} tables"
    )
    assert acceptance("3", ok, detail)


def test_4_lorentz_invariance(acceptance):
    exp = hsz_experiment(HszGeometry(chi=math.pi / 4))
    t0, z0 = _generic_points(exp, 50, seed=7)
    betas = [0.3, -0.3, 0.6, -0.6]
    dtaus = [4e-3, 2e-3, 1e-3]
    flips, devs = 0, []
    for dtau in dtaus:
        rep = verify_frame_invariance(exp, t0, z0, betas, InvariantProperTime(dtau))
        flips += len(rep.flips)
        devs.append(rep.max_deviation)
    order = convergence_order(dtaus, devs)
    # Step control works on rapidity changes, which are boost invariant, so the
    # boosted integration retraces the boosted table up to round-off and the
    # deviation has no discretisation component left to converge.
    tiny = max(devs) <= 1e-6
    ok = flips == 0 and (order >= 1.8 or tiny)
    detail = (
        f"{len(betas) * 50 * len(dtaus)} cases, {flips} outcome flips; max deviation "
        + ", ".join(f"{d:.1e}" for d in devs)
        + f" for dtau {dtaus}; measured order {order:.2f}"
        + (" (deviation at round-off level, order not applicable)" if tiny and order < 1.8 else "")
    )
    assert acceptance("4", ok, detail)


def test_5a_frame_dependent_rule_flips(acceptance):
    # Start on the common surface t1 = t2 = 0: both particles then reach their
    # splitters together in the build frame, and the boosted simultaneity
    # surface shifts their relative timing inside the splitter windows.
    exp = hsz_experiment(HszGeometry(chi=math.pi / 2))
    t0, z0 = sample_initial_arrays(exp.wf, CoordinationSurface((0.0, 0.0)), 100, seed=11)
    rep = verify_frame_invariance(exp, t0, z0, [0.5], FrameEqualTime(2e-2))
    n = len(rep.flips)
    assert acceptance("5 (scan)", n >= 1, f"{n} of 100 points change outcome between beta=0 and beta=0.5")


def test_5b_scenario_contrast_paper_case(acceptance):
    # front of a (q1 = 0.8), rear of c (q2 = 0.2); the rearranged-form phase
    # conventions make this the contradicting pair at chi - phi = pi
    c = scenario_contrast(HszGeometry(chi=math.pi), 0.8, 0.2, dtau=2e-3)
    ok = c.scenario1.fate1 == "transmitted" and c.scenario2.fate1 == "reflected"
    detail = (
        f"D=pi, q1=0.8, q2=0.2: particle 1 {c.scenario1.fate1} in Scenario 1, "
        f"{c.scenario2.fate1} in Scenario 2 (particle 2 {c.scenario2.fate2})"
    )
    assert acceptance("5 (paper case)", ok, detail)


@pytest.mark.parametrize("scenario", [1, 2])
def test_6_non_crossing(scenario, acceptance):
    exp = hsz_experiment(HszGeometry(chi=math.pi / 4))
    t0, z0 = sample_initial_arrays(exp.wf, hsz_scenario(exp.geometry, scenario), 1000, seed=30 + scenario)
    res = integrate_many(exp.wf, t0, z0, RUN_RULE, exp.horizon, record=True, experiment=exp.kind)
    rep = check_no_crossing(res.tables)
    detail = f"scenario {scenario}: {rep.n_distinct} trajectories, {len(rep.crossings)} crossings, min separation {rep.min_distance:.2e}"
    assert acceptance(f"6 (scenario {scenario})", rep.ok, detail)


def test_7_quantile_oracle(acceptance):
    rep = quantile_oracle_check(n=1000, dtau=1e-3)
    detail = f"agreement {rep.agreement:.1%}, {len(rep.disagreements)} disagreements, max |q-0.5| {rep.max_offset:.4f}"
    assert acceptance("7", rep.ok(0.99, 0.02), detail)


def test_8_conservation(acceptance):
    g = HszGeometry(chi=0.9)
    hsz = build_hsz(g)
    hsz_times = [(-5.0, -5.0), (g.t_lambda, g.t_lambda), (g.t_mu, g.t_lambda), (g.t_lambda, g.t_mu),
                 (g.t_mu, g.t_mu), (g.t_mu + 6, g.t_mu - 3), (g.t_nu, g.t_nu)]
    e = EprGeometry()
    epr = build_epr(e)
    epr_times = [(0.0, 0.0), (e.t_i, e.t_i), (e.t_i + 8, e.t_i + 3), (e.t_end, e.t_end)]
    norms = [density_grid(hsz, CoordinationSurface(t)).integral for t in hsz_times]
    norms += [density_grid(epr, CoordinationSurface(t)).integral for t in epr_times]
    norm_err = max(abs(x - 1) for x in norms)

    m = np.array([[SPLIT_T, SPLIT_T * np.exp(1j * SPLIT_R_PHASE)], [SPLIT_T * np.exp(1j * SPLIT_R_PHASE), SPLIT_T]])
    unit_err = float(np.max(np.abs(m.conj().T @ m - np.eye(2))))

    rng = np.random.default_rng(8)
    t = rng.uniform(g.emission.t, g.t_nu, (5000, 2))
    z = rng.uniform(-8, 8, (5000, 2))
    w = branch_weights_many(hsz, t, z)
    w = w[np.all(np.isfinite(w), axis=1)]
    weight_err = float(np.max(np.abs(w.sum(axis=1) - 1)))
    ok = norm_err <= 1e-6 and unit_err <= 1e-12 and weight_err <= 1e-12
    detail = (
        f"normalisation error {norm_err:.1e} on {len(norms)} surfaces; splitter unitarity {unit_err:.1e}; "
        f"branch-weight sum error {weight_err:.1e}"
    )
    assert acceptance("8", ok, detail)


def test_9_determinism(acceptance):
    exp = hsz_experiment(HszGeometry(chi=math.pi / 3))
    surf = hsz_scenario(exp.geometry, 2)
    a = run_ensemble(exp, surf, RUN_RULE, 1000, seed=99).to_json()
    b = run_ensemble(exp, surf, RUN_RULE, 1000, seed=99).to_json()
    c = run_ensemble(exp, surf, RUN_RULE, 1000, seed=99, workers=2, chunk=300).to_json()
    ok = a == b == c
    assert acceptance("9", ok, "repeated and multi-worker runs with seed 99 give byte-identical reports" if ok else "reports differ")
