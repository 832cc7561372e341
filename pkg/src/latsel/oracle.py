"""Round-trip self-tests against simulated ground truth.

Each suite draws random models, computes the quantity of interest both from
the model directly and through the library's estimators, and reports the
largest disagreement.  The CLI ``oracle`` command and the acceptance tests
both run these.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from . import graphs
from .exceptions import NotIdentifiableError
from .gaussian import (Interval, LabeledCov, Selected, beta, cochran_residual,
                       concentration_update_residual, conditional_cov, residual_var, selected_cov)
from .graph import Dag, ZeroPattern, d_separated, factor_identifiable, components
from .identification import (Roles, Sign, estimate_latent, estimate_selected,
                             latent_selection_pipeline, peel_factors, solve_single_factor)
from .sem import (LinearSem, cov_standard_errors, implied_cov, marginal_cov, random_dag,
                  random_sem, sample_selected, true_total_effect)
from .graph import zero_pattern

WINDOWS = (Interval(0.0), Interval(-1.0, 1.0), Interval(-0.5, 2.0))


@dataclass
class SuiteResult:
    name: str
    passed: bool
    count: int
    max_error: float
    tolerance: float
    seconds: float = 0.0
    details: dict = field(default_factory=dict, repr=False)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: n={self.count} max_error={self.max_error:.3e} "
                f"(tol {self.tolerance:g}) {self.seconds:.2f}s")

    def to_json(self) -> dict:
        return {"suite": self.name, "passed": self.passed, "count": self.count,
                "max_error": self.max_error, "tolerance": self.tolerance,
                "seconds": self.seconds, **self.details}


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_timed
def latent_round_trip(count: int = 1000, seed: int = 0, tol: float = 1e-9) -> SuiteResult:
    """Ratio estimate on the latent-marginalised covariance vs the true effect."""
    g = graphs.confounded_indicators()
    roles = Roles("X", "Y", "Z", "W")
    seeds = np.random.SeedSequence(seed).spawn(count)
    worst = 0.0
    for ss in seeds:
        m = random_sem(g, ss)
        c = marginal_cov(implied_cov(m), "U")
        worst = max(worst, abs(estimate_latent(c, roles) - true_total_effect(m, "X", "Y")))
    return SuiteResult("t1", worst < tol, count, worst, tol)


@_timed
def selection_round_trip(count: int = 1000, seed: int = 1, tol: float = 1e-9,
                         windows=WINDOWS) -> SuiteResult:
    """Selected-population ratio estimate for several windows vs the true effect."""
    g = graphs.selection_collider()
    roles = Roles("X", "Y", "Z", "W")
    worst = spread = 0.0
    for ss in np.random.SeedSequence(seed).spawn(count):
        m = random_sem(g, ss)
        c = implied_cov(m)
        tau = true_total_effect(m, "X", "Y")
        ests = [estimate_selected(selected_cov(c, "S", iv), roles) for iv in windows]
        worst = max(worst, max(abs(e - tau) for e in ests))
        spread = max(spread, max(ests) - min(ests))
    ok = worst < tol and spread < tol
    return SuiteResult("t3", ok, count, max(worst, spread), tol,
                       details={"max_abs_error": worst, "max_window_spread": spread})


@_timed
def pipeline_round_trip(count: int = 100, seed: int = 2, tol: float = 1e-6) -> SuiteResult:
    """Two-factor peeling vs exact conditioning, and the full latent+selection pipeline."""
    g2 = graphs.two_factor()
    obs = list(g2.observed)
    stages = [zero_pattern(g2, obs, {"U1"}), zero_pattern(g2, obs, {"U1", "U2"})]
    g = graphs.latent_and_selection()
    peel_err = pipe_err = 0.0
    failures = 0
    spawned = np.random.SeedSequence(seed).spawn(2 * count)
    for k in range(count):
        m = random_sem(g2, spawned[2 * k])
        full = implied_cov(m)
        rec = peel_factors(full.sub(obs), stages)
        truth = conditional_cov(full, obs, ["U1", "U2"])
        peel_err = max(peel_err, float(np.abs(rec.matrix - truth.matrix).max()))

        m = random_sem(g, spawned[2 * k + 1])
        iv = WINDOWS[k % len(WINDOWS)]
        sel = selected_cov(implied_cov(m), "S", iv)
        sel = marginal_cov(sel, "U")
        cert = latent_selection_pipeline(g, sel, "X", "Y")
        if cert.estimate is None:
            failures += 1
            continue
        pipe_err = max(pipe_err, abs(cert.estimate - true_total_effect(m, "X", "Y")))
    worst = max(peel_err, pipe_err)
    return SuiteResult("pipeline", worst < tol and failures == 0, count, worst, tol,
                       details={"peel_max_error": peel_err, "pipeline_max_error": pipe_err,
                                "pipeline_failures": failures})


def partial_correlation(cov: np.ndarray, a: int, b: int, given) -> float:
    idx = [a, b, *given]
    p = np.linalg.inv(cov[np.ix_(idx, idx)])
    return float(-p[0, 1] / np.sqrt(p[0, 0] * p[1, 1]))


@_timed
def dsep_agreement(count: int = 200, seed: int = 3, max_vertices: int = 8,
                   max_given: int = 3, threshold: float = 1e-8,
                   margin: float = 1e-5, redraws: int = 50) -> SuiteResult:
    """d-separation vs vanishing partial correlation on random DAGs.

    A model whose d-connected pairs show a partial correlation below
    ``margin`` is treated as a coincidental cancellation and redrawn.
    """
    rng = np.random.default_rng(seed)
    queries = mismatches = redrawn = 0
    worst_sep = 0.0
    for k in range(count):
        n = int(rng.integers(3, max_vertices + 1))
        g = random_dag(n, rng.integers(2**32), edge_prob=float(rng.uniform(0.2, 0.7)))
        names = g.names
        plan = []
        for a, b in itertools.permutations(range(n), 2):
            rest = [v for v in range(n) if v not in (a, b)]
            for size in range(min(max_given, len(rest)) + 1):
                for given in itertools.combinations(rest, size):
                    sep = d_separated(g, {names[a]}, {names[b]}, {names[v] for v in given})
                    plan.append((a, b, given, sep))
        for attempt in range(redraws):
            m = random_sem(g, rng.integers(2**32))
            cov = implied_cov(m).matrix
            pc = [abs(partial_correlation(cov, a, b, given)) for a, b, given, _ in plan]
            if all(v >= margin for v, (*_, sep) in zip(pc, plan) if not sep):
                break
            redrawn += 1
        for v, (*_, sep) in zip(pc, plan):
            queries += 1
            if sep:
                worst_sep = max(worst_sep, v)
            if (v < threshold) != sep:
                mismatches += 1
    return SuiteResult("dsep", mismatches == 0, count, worst_sep, threshold,
                       details={"queries": queries, "mismatches": mismatches,
                                "redraws": redrawn})


def random_factor_model(rng: np.random.Generator, sign: Sign, n_range=(3, 8),
                        absent_prob: float = 0.6):
    """Random covariance with one rank-one term over an identifiable, connected pattern."""
    while True:
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        labels = [f"V{i}" for i in range(n)]
        absent = {frozenset((labels[i], labels[j]))
                  for i, j in itertools.combinations(range(n), 2) if rng.random() < absent_prob}
        p = ZeroPattern(labels, absent)
        if factor_identifiable(p) and len(components(p.complement_adjacency())) == 1:
            break
    r = np.zeros((n, n))
    for i, j in itertools.combinations(range(n), 2):
        if frozenset((labels[i], labels[j])) not in absent:
            r[i, j] = r[j, i] = rng.uniform(0.1, 0.4) * rng.choice([-1, 1])
    r += np.diag(1.0 + np.abs(r).sum(axis=1))
    omega = rng.uniform(0.3, 1.0, n) * rng.choice([-1, 1], n)
    if sign is Sign.SUBTRACT:
        c = r + np.outer(omega, omega)
    else:
        # keep r − ωω' positive definite: ω' r⁻¹ ω = 1/2
        omega *= np.sqrt(0.5 / (omega @ np.linalg.solve(r, omega)))
        c = r - np.outer(omega, omega)
    return LabeledCov(labels, c), p, r, omega


def random_bipartite_pattern(rng: np.random.Generator, n_range=(3, 8)):
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    labels = [f"V{i}" for i in range(n)]
    side = rng.integers(0, 2, n)
    absent = {frozenset((labels[i], labels[j])) for i, j in itertools.combinations(range(n), 2)
              if side[i] != side[j] and rng.random() < 0.7}
    a = rng.standard_normal((n, n))
    return LabeledCov(labels, a @ a.T / n + np.eye(n)), ZeroPattern(labels, absent)


@_timed
def factor_solver(count: int = 200, seed: int = 4, tol_loading: float = 1e-6,
                  tol_zero: float = 1e-9, tol_rank_one: float = 1e-9) -> SuiteResult:
    """Single-factor solver recovery, bipartite rejection, and the concentration rank-one form."""
    rng = np.random.default_rng(seed)
    load_err = zero_err = 0.0
    for k in range(count):
        sign = Sign.SUBTRACT if k % 2 == 0 else Sign.ADD
        c, p, r, omega = random_factor_model(rng, sign)
        res, est = solve_single_factor(c, p, sign)
        flip = 1.0 if np.dot(est, omega) >= 0 else -1.0
        load_err = max(load_err, float(np.abs(flip * est - omega).max()))
        idx = {v: i for i, v in enumerate(res.labels)}
        zeros = [abs(res.matrix[idx[a], idx[b]]) for a, b in map(tuple, p.absent)]
        zero_err = max(zero_err, max(zeros), float(np.abs(res.matrix - r).max()))
    rejected = 0
    for _ in range(count):
        c, p = random_bipartite_pattern(rng)
        try:
            solve_single_factor(c, p)
        except NotIdentifiableError:
            rejected += 1
    rank_err = 0.0
    for _ in range(count):
        n = 5
        names = [f"V{i}" for i in range(n)]
        base = random_dag(n, rng.integers(2**32), edge_prob=0.5)
        parents = [v for v in names if rng.random() < 0.6] or [names[-1]]
        g = Dag(list(base.vertices) + [("S", "selection")],
                set(base.edges) | {(v, "S") for v in parents})
        m = random_sem(g, rng.integers(2**32))
        lo = float(rng.uniform(-1.5, 0.5))
        iv = Interval(lo, lo + float(rng.uniform(0.5, 3.0)))
        rank_err = max(rank_err, concentration_update_residual(implied_cov(m), "S", iv))
    ok = (load_err < tol_loading and zero_err < tol_zero and rejected == count
          and rank_err < tol_rank_one)
    return SuiteResult("factor", ok, count, load_err, tol_loading,
                       details={"max_loading_error": load_err, "max_residual_error": zero_err,
                                "bipartite_rejected": rejected, "max_rank_one_residual": rank_err})


def random_pd(rng: np.random.Generator, n: int) -> np.ndarray:
    a = rng.standard_normal((n, n))
    return a @ a.T / n + 0.5 * np.eye(n)


@_timed
def identities(count: int = 1000, seed: int = 5, tol: float = 1e-10) -> SuiteResult:
    """Cochran's decomposition, the residual-variance recursion, and coefficient invariance."""
    rng = np.random.default_rng(seed)
    labels = ["Y", "X", "S1", "S2", "T1", "T2"]
    cochran = resvar = 0.0
    for _ in range(count):
        c = LabeledCov(labels, random_pd(rng, len(labels)))
        ns, nt = int(rng.integers(0, 3)), int(rng.integers(1, 3))
        s, t = labels[2:2 + ns], labels[4:4 + nt]
        cochran = max(cochran, abs(cochran_residual(c, "Y", "X", s, t)))
        direct = conditional_cov(c, ["Y"], ["X"] + s).matrix[0, 0]
        resvar = max(resvar, float(abs(residual_var(c, "Y", "X", s) - direct)))
    invariance, cases = _invariance_cases(rng, count)
    worst = max(cochran, resvar, invariance)
    return SuiteResult("identities", worst < tol and cases > 0, count, worst, tol,
                       details={"cochran": cochran, "residual_var": resvar,
                                "invariance": invariance, "invariance_cases": cases})


def _invariance_cases(rng: np.random.Generator, count: int):
    """Coefficient/variance invariance on d-separation-selected role tuples."""
    worst = 0.0
    cases = 0
    for _ in range(max(1, count // 50)):
        g = random_dag(6, rng.integers(2**32), edge_prob=0.4)
        c = implied_cov(random_sem(g, rng.integers(2**32)))
        names = g.names
        for y, x in itertools.permutations(names, 2):
            rest = [v for v in names if v not in (x, y)]
            for k in range(0, 2):
                for s in itertools.combinations(rest, k):
                    for t in itertools.combinations([v for v in rest if v not in s], 1):
                        s_, t_ = set(s), set(t)
                        if (d_separated(g, t_, {x}, s_)
                                or d_separated(g, {y}, t_, s_ | {x})):
                            cases += 1
                            worst = max(worst, abs(beta(c, y, x, list(s) + list(t))
                                                   - beta(c, y, x, list(s))))
                        if d_separated(g, t_, {y}, s_ | {x}):
                            cases += 1
                            worst = max(worst, abs(residual_var(c, y, x, list(s) + list(t))
                                                   - residual_var(c, y, x, list(s))))
    return worst, cases


@_timed
def monte_carlo_bridge(count: int = 20, seed: int = 6, n: int = 1_000_000,
                       window: Interval = Interval(0.0), batches: int = 20,
                       cov_se: float = 3.0, est_se: float = 5.0) -> SuiteResult:
    """Rejection sampling vs the analytic selected covariance, and the sampled estimate.

    The estimate's Monte Carlo standard error comes from ``batches``
    equal-size batch estimates.
    """
    g = graphs.selection_collider()
    roles = Roles("X", "Y", "Z", "W")
    obs = list(g.observed)
    col = [g.names.index(v) for v in obs]
    worst_cov = worst_est = 0.0
    cov_fail = est_fail = 0
    signed: list[float] = []
    for ss in np.random.SeedSequence(seed).spawn(count):
        m_seed, s_seed = ss.spawn(2)
        m = random_sem(g, m_seed)
        draws = sample_selected(m, "S", window, n, s_seed)[:, col]
        sample = LabeledCov(obs, np.cov(draws, rowvar=False), Selected("S", window))
        exact = selected_cov(implied_cov(m), "S", window).sub(obs)
        zs = (sample.matrix - exact.matrix) / cov_standard_errors(draws)
        signed.extend(zs[np.triu_indices(len(obs))].tolist())
        z = np.abs(zs)
        worst_cov = max(worst_cov, float(z.max()))
        cov_fail += int((z > cov_se).any())
        est = estimate_selected(sample, roles)
        per = [estimate_selected(LabeledCov(obs, np.cov(b, rowvar=False), sample.population), roles)
               for b in np.array_split(draws, batches)]
        se = np.std(per, ddof=1) / np.sqrt(batches)
        zt = abs(est - true_total_effect(m, "X", "Y")) / se
        worst_est = max(worst_est, zt)
        est_fail += int(zt > est_se)
    return SuiteResult("montecarlo", cov_fail == 0 and est_fail == 0, count,
                       max(worst_cov, worst_est), cov_se,
                       details={"max_cov_z": worst_cov, "max_estimate_z": worst_est,
                                "cov_failures": cov_fail, "estimate_failures": est_fail,
                                "cov_z": signed})


SUITES = {
    "t1": latent_round_trip,
    "t3": selection_round_trip,
    "pipeline": pipeline_round_trip,
    "dsep": dsep_agreement,
    "factor": factor_solver,
    "identities": identities,
    "montecarlo": monte_carlo_bridge,
}
DEFAULT_SUITES = ("t1", "t3", "pipeline", "dsep", "factor", "identities")
