"""Initial-point sampling, Monte Carlo statistics and the verification suites.

Random numbers come from numpy's Philox counter-based generator
(``Generator(Philox(seed))``), so a seed reproduces a run on any platform.
Samples are processed in fixed-size chunks whose layout does not depend on
the number of workers; chunk results are reduced in sample order.
"""
from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .experiments import (
    JOINT_OUTCOMES,
    Experiment,
    HszGeometry,
    Outcome,
    SplitterGeometry,
    hsz_experiment,
    quantile_position,
    splitter_experiment,
)
from .guidance import (
    MAX_DEPTH,
    CoordinationRule,
    FrameEqualTime,
    InvariantProperTime,
    TrajectoryTable,
    boost_table,
    integrate_many,
)
from .spacetime import Boost, ConfigPoint, boost_coords
from .wavefunction import MultiTimeWaveFunction, _coeffs, _factors, _spinors, boost_wavefunction

log = logging.getLogger(__name__)

CHUNK = 4096
MIN_EFFICIENCY = 1e-4


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


# ---------------------------------------------------------------------------
# surfaces and sampling


@dataclass(frozen=True)
class CoordinationSurface:
    """Per-particle initial times in the build frame."""

    times: tuple[float, ...]
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))
        if not all(math.isfinite(t) for t in self.times):
            raise ValueError("surface times must be finite")


def hsz_scenario(g: HszGeometry, scenario: int) -> CoordinationSurface:
    """Scenario 1: particle 1 at its splitter while particle 2 is at its mirror.

    Scenario 2 swaps the roles.
    """
    if scenario == 1:
        return CoordinationSurface((g.t_mu, g.t_lambda), "scenario-1")
    if scenario == 2:
        return CoordinationSurface((g.t_lambda, g.t_mu), "scenario-2")
    raise ValueError(f"unknown scenario {scenario!r} (expected 1 or 2)")


def default_surface(exp: Experiment) -> CoordinationSurface:
    if exp.kind == "hsz":
        return hsz_scenario(exp.geometry, 1)
    t = exp.geometry.emission.t
    return CoordinationSurface((t, t), "emission")


def _proposal_terms(wf: MultiTimeWaveFunction, times):
    """Incoherent product terms valid on the surface: (weights, centers, sigmas).

    Weights are unnormalised: |branch coefficient|^2 times segment amplitudes^2.
    """
    weights, centers, sigmas = [], [], []
    for br in wf.branches:
        per = []
        for k, h in enumerate(br.packets):
            segs = [s for s in h.segments if np.any(s.valid(times[k], s.center(times[k])))]
            per.append(segs)
        for combo in np.ndindex(*[len(p) for p in per]):
            segs = [per[k][i] for k, i in enumerate(combo)]
            w = abs(br.coeff) ** 2 * np.prod([s.amp**2 for s in segs])
            if w == 0:
                continue
            weights.append(w)
            centers.append([float(s.center(times[k])) for k, s in enumerate(segs)])
            sigmas.append([s.sigma for s in segs])
    return np.array(weights), np.array(centers), np.array(sigmas)


def _incoherent_density(weights, centers, sigmas, z):
    """sum_j w_j prod_k N(z_k; center_jk, sigma_jk) at points z (m, n)."""
    x = (z[:, None, :] - centers[None]) / sigmas[None]
    dens = np.exp(-0.5 * x**2) / (math.sqrt(2 * math.pi) * sigmas[None])
    return np.prod(dens, axis=2) @ weights


def sample_initial(
    wf: MultiTimeWaveFunction, surf: CoordinationSurface, n: int, seed: int
) -> list[ConfigPoint]:
    """Draw ``n`` configuration points on ``surf`` distributed as |Psi|^2."""
    t, z = sample_initial_arrays(wf, surf, n, seed)
    return [ConfigPoint.from_arrays(a, b) for a, b in zip(t, z)]


def sample_initial_arrays(wf, surf: CoordinationSurface, n: int, seed: int):
    """Array form of :func:`sample_initial`: ``(t, z)`` of shape (n, n_particles).

    Proposal: the incoherent mixture of branch x segment product Gaussians.
    With J terms, |Psi|^2 <= J * incoherent, so accepting with probability
    |Psi|^2 / (J * incoherent) is exact rejection sampling.
    """
    if n < 1:
        raise ValueError("need n >= 1 samples")
    times = np.asarray(surf.times, dtype=float)
    if times.shape != (wf.n_particles,):
        raise ValueError("surface needs one time per particle")
    rng = make_rng(seed)
    w, centers, sigmas = _proposal_terms(wf, times)
    J = len(w)
    p = w / w.sum()
    spin = _spinors(wf)
    coeff = _coeffs(wf)
    out = []
    got = tried = 0
    while got < n:
        m = max(CHUNK, 2 * J * (n - got))
        term = rng.choice(J, size=m, p=p)
        zs = centers[term] + sigmas[term] * rng.standard_normal((m, len(times)))
        ts = np.broadcast_to(times, zs.shape)
        incoh = _incoherent_density(w, centers, sigmas, zs)
        f = _factors(wf, ts, zs)
        amp = np.prod(f.h, axis=1) * coeff[:, None]  # (B, m)
        psi = np.einsum("bm,bs->ms", amp, spin)
        rho = np.sum(np.abs(psi) ** 2, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            acc = rho / (J * incoh)
        keep = rng.random(m) < np.nan_to_num(acc)
        out.append(zs[keep])
        got += int(keep.sum())
        tried += m
        if tried >= 1e5 and got / tried < MIN_EFFICIENCY:
            raise RuntimeError(
                f"rejection efficiency {got / tried:.2e} below {MIN_EFFICIENCY}; surface mis-specified?"
            )
    z = np.concatenate(out)[:n]
    return np.broadcast_to(times, z.shape).copy(), z


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class EnsembleReport:
    experiment: str
    n: int
    seed: int
    rule: dict
    surface: dict
    counts: dict[str, int]
    excluded: dict[str, int]
    probabilities: dict[str, float]
    stderr: dict[str, float]
    expected: dict[str, float]
    marginals: dict[str, float]
    deviation_se: dict[str, float]
    anticorrelation: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def n_classified(self) -> int:
        return sum(self.counts.values())

    @property
    def n_excluded(self) -> int:
        return sum(self.excluded.values())

    def within(self, k: float = 3.0, tol: float | None = None) -> bool:
        """All estimates within ``tol`` (default ``k`` worst-case standard errors)."""
        tol = k * math.sqrt(0.25 / max(self.n_classified, 1)) if tol is None else tol
        return all(abs(self.probabilities[o] - self.expected[o]) <= tol for o in self.probabilities)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


@dataclass
class _ChunkResult:
    start: int
    signs: np.ndarray
    status: list[str]


def _run_chunk(args) -> _ChunkResult:
    exp, rule, t0, z0, start, record, hook = args
    res = integrate_many(exp.wf, t0, z0, rule, exp.horizon, record=record, experiment=exp.kind)
    _, zb = res.build_frame_coords()
    cls = exp.classify(zb)
    if hook is not None and res.tables is not None:
        hook(start, res.tables)
    return _ChunkResult(start, cls.signs, res.status)


def run_ensemble(
    exp: Experiment,
    surf: CoordinationSurface,
    rule: CoordinationRule,
    n: int,
    seed: int,
    *,
    workers: int = 1,
    chunk: int = CHUNK,
    table_hook: Callable[[int, list[TrajectoryTable]], None] | None = None,
) -> EnsembleReport:
    """Sample, integrate, classify and aggregate ``n`` trajectories.

    ``table_hook(first_index, tables)`` is called with the look-up tables of
    each chunk (only with ``workers == 1``); tables are not kept otherwise.
    """
    t0, z0 = sample_initial_arrays(exp.wf, surf, n, seed)
    record = table_hook is not None
    if record and workers != 1:
        raise ValueError("table_hook requires workers == 1")
    jobs = [
        (exp, rule, t0[i : i + chunk], z0[i : i + chunk], i, record, table_hook)
        for i in range(0, n, chunk)
    ]
    if workers == 1:
        results = [_run_chunk(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_chunk, jobs))
    results.sort(key=lambda r: r.start)
    signs = np.concatenate([r.signs for r in results])
    status = [s for r in results for s in r.status]
    return _aggregate(exp, surf, rule, n, seed, signs, status)


def _aggregate(exp, surf, rule, n, seed, signs, status) -> EnsembleReport:
    counts = {o.value: 0 for o in JOINT_OUTCOMES}
    excluded: dict[str, int] = {}
    for (s1, s2), st in zip(signs, status):
        if st != "ok":
            excluded[st] = excluded.get(st, 0) + 1
        elif s1 == 0 or s2 == 0:
            excluded[Outcome.AMBIGUOUS.value] = excluded.get(Outcome.AMBIGUOUS.value, 0) + 1
        else:
            counts[Outcome.from_signs(s1, s2).value] += 1
    m = max(sum(counts.values()), 1)
    probs = {k: c / m for k, c in counts.items()}
    se = {k: math.sqrt(p * (1 - p) / m) for k, p in probs.items()}
    expected = exp.expected()
    floor = math.sqrt(0.25 / m)
    dev = {k: abs(probs[k] - expected[k]) / max(se[k], floor) for k in probs}
    marg = {
        "1+": probs["++"] + probs["+-"],
        "2+": probs["++"] + probs["-+"],
    }
    anti = None
    if exp.kind == "epr":
        anti = probs["+-"] + probs["-+"]
    return EnsembleReport(
        experiment=exp.kind,
        n=n,
        seed=seed,
        rule=rule.describe(),
        surface={"times": list(surf.times), "label": surf.label},
        counts=counts,
        excluded=excluded,
        probabilities=probs,
        stderr=se,
        expected=expected,
        marginals=marg,
        deviation_se=dev,
        anticorrelation=anti,
    )


# ---------------------------------------------------------------------------
# non-crossing


@dataclass
class CrossingReport:
    n_tables: int
    n_distinct: int
    crossings: list[tuple[int, int]]
    min_distance: float
    tol: float

    @property
    def ok(self) -> bool:
        return not self.crossings


def _table_key(tab: TrajectoryTable):
    return (
        json.dumps(tab.meta.get("rule"), sort_keys=True),
        tab.meta.get("experiment"),
        json.dumps(tab.meta.get("surface"), sort_keys=True),
        tab.frame,
    )


def _min_foreign_distance(pts: np.ndarray, owner: np.ndarray) -> float:
    """Exact smallest distance between rows of different trajectories.

    Trajectories are split in two by each bit of their index and one half is
    queried against a tree of the other; any two distinct trajectories differ
    in at least one bit, so the minimum over all splits is exact.
    """
    best = math.inf
    for bit in range(max(int(owner.max()).bit_length(), 1)):
        side = (owner >> bit) & 1 == 1
        if side.all() or not side.any():
            continue
        d, _ = cKDTree(pts[side]).query(pts[~side], k=1)
        best = min(best, float(d.min()))
    return best


def check_no_crossing(tables: Sequence[TrajectoryTable], tol: float = 1e-6) -> CrossingReport:
    """Look for rows of different trajectories that coincide in configuration space-time.

    Tables with identical initial points are the same trajectory and are
    compared only once.  ``min_distance`` is the smallest distance between
    rows of distinct trajectories (inf with fewer than two).
    """
    if not tables:
        return CrossingReport(0, 0, [], math.inf, tol)
    keys = {_table_key(t) for t in tables}
    if len(keys) > 1:
        raise ValueError("tables must share experiment, coordination rule, surface and frame")
    seen: dict[bytes, int] = {}
    distinct = []
    for tab in tables:
        k = np.concatenate([tab.t[0], tab.z[0]]).tobytes()
        if k not in seen:
            seen[k] = len(distinct)
            distinct.append(tab)
    pts = np.concatenate([np.concatenate([t.t, t.z], axis=1) for t in distinct])
    owner = np.concatenate([np.full(t.n_rows, i) for i, t in enumerate(distinct)])
    tree = cKDTree(pts)
    crossings = sorted(
        {
            (int(min(owner[i], owner[j])), int(max(owner[i], owner[j])))
            for i, j in tree.query_pairs(tol, output_type="ndarray")
            if owner[i] != owner[j]
        }
    )
    return CrossingReport(len(tables), len(distinct), crossings, _min_foreign_distance(pts, owner), tol)


# ---------------------------------------------------------------------------
# quantile oracle


def quantile_fate_oracle(q: float) -> str:
    """Fate at a 50/50 splitter of the particle at quantile ``q`` of its packet.

    ``q`` is counted toward the direction of motion: the forward half is
    transmitted, the trailing half reflected.
    """
    if not 0 < q < 1:
        raise ValueError("quantile must lie in (0, 1)")
    return "transmitted" if q > 0.5 else "reflected"


@dataclass
class OracleReport:
    n: int
    agreement: float
    disagreements: list[float]
    max_offset: float  # largest |q - 0.5| among disagreements
    status: dict[str, int]

    def ok(self, rate: float = 0.99, band: float = 0.02) -> bool:
        return self.agreement >= rate and self.max_offset < band


def quantile_oracle_check(
    g: SplitterGeometry | None = None, n: int = 1000, dtau: float = 1e-3
) -> OracleReport:
    """Integrate ``n`` single-splitter trajectories and compare with the oracle."""
    exp = splitter_experiment(g)
    g = exp.geometry
    q = (np.arange(n) + 0.5) / n
    w = g.window_halfwidth
    t_start = g.event.t - w
    center = g.event.z + g.v * w
    z1 = quantile_position(center, g.sigma, -g.v, q)
    t0 = np.full((n, 2), t_start)
    z0 = np.stack([z1, np.zeros(n)], axis=1)
    res = integrate_many(exp.wf, t0, z0, InvariantProperTime(dtau), exp.horizon, record=False)
    fate = np.where(res.z[:, 0] < g.event.z, "transmitted", "reflected")
    pred = np.array([quantile_fate_oracle(x) for x in q])
    bad = q[(fate != pred)]
    st: dict[str, int] = {}
    for s in res.status:
        st[s] = st.get(s, 0) + 1
    return OracleReport(
        n,
        1 - len(bad) / n,
        bad.tolist(),
        float(np.max(np.abs(bad - 0.5))) if len(bad) else 0.0,
        st,
    )


# ---------------------------------------------------------------------------
# frame invariance


@dataclass
class InvarianceCase:
    point: int
    beta: float
    outcome_ref: str
    outcome_boosted: str
    deviation: float


@dataclass
class InvarianceReport:
    rule: dict
    cases: list[InvarianceCase]

    @property
    def flips(self) -> list[InvarianceCase]:
        return [c for c in self.cases if c.outcome_ref != c.outcome_boosted]

    @property
    def max_deviation(self) -> float:
        return max((c.deviation for c in self.cases), default=0.0)

    @property
    def invariant(self) -> bool:
        return not self.flips


def _outcomes(exp: Experiment, res) -> list[str]:
    _, zb = res.build_frame_coords()
    cls = exp.classify(zb)
    return [
        o.value if st == "ok" else st for o, st in zip(cls.outcomes, res.status)
    ]


def verify_frame_invariance(
    exp: Experiment,
    t0,
    z0,
    betas: Sequence[float],
    rule: CoordinationRule,
) -> InvarianceReport:
    """Compare each trajectory's analysis in boosted frames with the original.

    Under :class:`InvariantProperTime` the boosted-frame integration from the
    boosted start is compared row by row with the boosted original table.
    Under :class:`FrameEqualTime` the rule frame itself is moved to ``beta``
    (the preferred-frame analysis) and only outcomes are compared.
    """
    t0 = np.atleast_2d(np.asarray(t0, dtype=float))
    z0 = np.atleast_2d(np.asarray(z0, dtype=float))
    cases = []
    if isinstance(rule, FrameEqualTime):
        ref = integrate_many(exp.wf, t0, z0, FrameEqualTime(rule.dt, 0.0), exp.horizon, record=False)
        out_ref = _outcomes(exp, ref)
        for beta in betas:
            res = integrate_many(exp.wf, t0, z0, FrameEqualTime(rule.dt, beta), exp.horizon, record=False)
            for i, o in enumerate(_outcomes(exp, res)):
                cases.append(InvarianceCase(i, beta, out_ref[i], o, math.nan))
        return InvarianceReport(rule.describe(), cases)

    ref = integrate_many(exp.wf, t0, z0, rule, exp.horizon, record=True)
    out_ref = _outcomes(exp, ref)
    for beta in betas:
        b = Boost(beta)
        wfb = boost_wavefunction(exp.wf, b)
        tb, zb = boost_coords(t0, z0, beta)
        res = integrate_many(wfb, tb, zb, rule, exp.horizon, record=True)
        outs = _outcomes(exp, res)
        for i, tab in enumerate(res.tables):
            dev = table_deviation(boost_table(ref.tables[i], b), tab, rule.step)
            cases.append(InvarianceCase(i, beta, out_ref[i], outs[i], dev))
    return InvarianceReport(rule.describe(), cases)


def _tau_keys(tab: TrajectoryTable, step: float) -> np.ndarray:
    """Cumulative rule parameter of each row in exact units of step / 2**MAX_DEPTH."""
    units = np.rint(tab.h / step * 2**MAX_DEPTH).astype(np.int64)
    return np.cumsum(units)


def table_deviation(a: TrajectoryTable, b: TrajectoryTable, step: float) -> float:
    """Max event deviation between rows of ``a`` and ``b`` at equal rule parameter.

    Subdivision can differ between two integrations of the same trajectory,
    so rows are matched by their cumulative step rather than by index; rows
    present in only one table are skipped.  Returns inf if the tables share
    no row beyond the first or end at different parameters.
    """
    ka, kb = _tau_keys(a, step), _tau_keys(b, step)
    common, ia, ib = np.intersect1d(ka, kb, assume_unique=True, return_indices=True)
    if len(common) < 2 or ka[-1] != kb[-1]:
        return math.inf
    return float(max(np.max(np.abs(a.t[ia] - b.t[ib])), np.max(np.abs(a.z[ia] - b.z[ib]))))


def convergence_order(dtaus: Sequence[float], deviations: Sequence[float]) -> float:
    """Least-squares slope of log(deviation) against log(dtau)."""
    x, y = np.log(np.asarray(dtaus)), np.log(np.asarray(deviations))
    return float(np.polyfit(x, y, 1)[0])


# ---------------------------------------------------------------------------
# scenario contrast


@dataclass
class ScenarioFates:
    scenario: int
    start: list[list[float]]
    fate1: str
    fate2: str
    outcome: str


@dataclass
class ScenarioContrast:
    q1: float
    q2: float
    delta: float
    scenario1: ScenarioFates
    scenario2: ScenarioFates

    @property
    def contradiction(self) -> bool:
        return self.scenario1.fate1 != self.scenario2.fate1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["contradiction"] = self.contradiction
        return d


def matched_start(g: HszGeometry, scenario: int, q1: float, q2: float):
    """Initial point with particle 1 at quantile q1 of a and particle 2 at q2 of c.

    Quantiles are counted toward each packet's direction of motion on its way
    into the splitter (after the mirror).
    """
    surf = hsz_scenario(g, scenario)
    t1, t2 = surf.times
    e = g.emission

    def pos(name, t, q):
        out = g.paths(1 if name == "a" else 2)[name] * g.v  # initial velocity
        if t <= g.t_lambda:
            center = e.z + out * (t - e.t)
        else:
            center = e.z + out * (g.t_lambda - e.t) - out * (t - g.t_lambda)
        return quantile_position(center, g.sigma, -out, q)

    return np.array([t1, t2]), np.array([pos("a", t1, q1), pos("c", t2, q2)])


def scenario_contrast(
    g: HszGeometry, q1: float, q2: float, dtau: float = 1e-3
) -> ScenarioContrast:
    """Fates of the same matched quantile pair under Scenario 1 and Scenario 2.

    Particle 1 in ``a`` reaches its splitter moving -v: transmitted means it
    leaves through the negative exit.  Particle 2 in ``c`` arrives moving +v:
    transmitted means the positive exit.
    """
    if not (0 < q1 < 1 and 0 < q2 < 1):
        raise ValueError("quantiles must lie in (0, 1)")
    exp = hsz_experiment(g)
    rows = []
    for sc in (1, 2):
        t0, z0 = matched_start(g, sc, q1, q2)
        res = integrate_many(exp.wf, t0[None], z0[None], InvariantProperTime(dtau), exp.horizon, record=False)
        cls = exp.classify(res.z)
        s1, s2 = cls.signs[0]
        fate1 = "transmitted" if s1 < 0 else "reflected" if s1 > 0 else "ambiguous"
        fate2 = "transmitted" if s2 > 0 else "reflected" if s2 < 0 else "ambiguous"
        rows.append(
            ScenarioFates(sc, [[float(t0[k]), float(z0[k])] for k in range(2)], fate1, fate2, cls.outcomes[0].value)
        )
    return ScenarioContrast(q1, q2, g.chi - g.phi, rows[0], rows[1])
