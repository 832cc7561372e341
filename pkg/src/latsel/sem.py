"""Linear structural equation models used as ground truth.

Each vertex is a linear function of its parents plus Gaussian error.  The
model gives exact population covariances, true total effects, and Monte
Carlo draws (with or without interval selection) for stochastic
cross-checks.  Random numbers come from NumPy's PCG64 generator
(``numpy.random.default_rng``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import linalg

from .exceptions import DegenerateError, ModelError
from .gaussian import Interval, LabeledCov, Selected
from .graph import Dag, Kind

#: default coefficient magnitude band; keeps near-cancellations rare
DEFAULT_COEF_RANGE = (0.3, 1.0)
MIN_ACCEPTANCE = 1e-4


@dataclass(frozen=True, eq=False)
class LinearSem:
    """Path diagram with path coefficients and an error covariance.

    ``coefficients`` maps ``(parent, child)`` to the nonzero path
    coefficient.  ``error_cov`` is indexed in ``graph.names`` order and
    defaults to the identity.
    """

    graph: Dag
    coefficients: Mapping[tuple[str, str], float]
    error_cov: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        coefs = {(str(a), str(b)): float(v) for (a, b), v in dict(self.coefficients).items()}
        if set(coefs) != set(self.graph.edges):
            raise ModelError("coefficient keys must match the graph edges exactly")
        if any(v == 0 for v in coefs.values()):
            raise ModelError("path coefficients must be nonzero")
        n = len(self.graph.names)
        omega = np.eye(n) if self.error_cov is None else np.array(self.error_cov, dtype=float)
        if omega.shape != (n, n) or not np.allclose(omega, omega.T, atol=1e-12):
            raise ModelError("error covariance must be a symmetric matrix over all vertices")
        if np.linalg.eigvalsh(omega)[0] <= 0:
            raise ModelError("error covariance must be positive definite")
        omega.setflags(write=False)
        object.__setattr__(self, "coefficients", coefs)
        object.__setattr__(self, "error_cov", omega)

    def coefficient_matrix(self) -> np.ndarray:
        """``A`` with ``A[child, parent] = α``, rows/cols in ``graph.names`` order."""
        pos = {v: i for i, v in enumerate(self.graph.names)}
        a = np.zeros((len(pos), len(pos)))
        for (p, c), v in self.coefficients.items():
            a[pos[c], pos[p]] = v
        return a

    def reduced_form(self) -> np.ndarray:
        """``(I − A)⁻¹`` by forward substitution in topological order."""
        names = self.graph.names
        order = [names.index(v) for v in self.graph.topological_order]
        a = self.coefficient_matrix()[np.ix_(order, order)]
        n = len(order)
        inv_t = linalg.solve_triangular(np.eye(n) - a, np.eye(n), lower=True, unit_diagonal=True)
        out = np.empty_like(inv_t)
        out[np.ix_(order, order)] = inv_t
        return out

    def to_json(self) -> dict:
        doc = self.graph.to_json()
        doc["coefficients"] = {f"{p}->{c}": v for (p, c), v in sorted(self.coefficients.items())}
        if not np.array_equal(self.error_cov, np.eye(len(self.graph.names))):
            doc["error_cov"] = self.error_cov.tolist()
        return doc

    @classmethod
    def from_json(cls, doc: Mapping) -> "LinearSem":
        g = Dag.from_json(doc)
        coefs = {}
        for key, v in doc.get("coefficients", {}).items():
            try:
                p, c = (s.strip() for s in key.split("->"))
            except ValueError:
                raise ModelError(f"bad coefficient key {key!r}, expected 'P->C'") from None
            coefs[(p, c)] = v
        err = doc.get("error_cov")
        if isinstance(err, Mapping):
            err = np.diag([float(err.get(v, 1.0)) for v in g.names])
        return cls(g, coefs, err)


def load_sem(path: str | Path) -> LinearSem:
    with open(path) as fh:
        return LinearSem.from_json(json.load(fh))


def implied_cov(m: LinearSem) -> LabeledCov:
    """Population covariance over every vertex: ``(I−A)⁻¹ Ω (I−A)⁻ᵀ``."""
    b = m.reduced_form()
    return LabeledCov(m.graph.names, b @ m.error_cov @ b.T)


def total_effect_by_paths(m: LinearSem, x: str, y: str) -> float:
    """Sum over directed paths x → … → y of the products of path coefficients."""
    g = m.graph
    g._require(x, y)
    memo: dict[str, float] = {}

    def reach(v: str) -> float:
        # memoised over vertices: the sum over paths from v splits on v's children
        if v == y:
            return 1.0
        if v not in memo:
            memo[v] = sum(m.coefficients[(v, c)] * reach(c) for c in sorted(g.children(v)))
        return memo[v]

    return reach(x)


def total_effect_by_inverse(m: LinearSem, x: str, y: str) -> float:
    names = m.graph.names
    return float(m.reduced_form()[names.index(y), names.index(x)])


def true_total_effect(m: LinearSem, x: str, y: str) -> float:
    """Total effect of ``x`` on ``y``; the path sum and ``(I−A)⁻¹`` must agree."""
    if x == y:
        raise ModelError("x and y must differ")
    by_paths = total_effect_by_paths(m, x, y)
    by_inverse = total_effect_by_inverse(m, x, y)
    if abs(by_paths - by_inverse) > 1e-12 * max(1.0, abs(by_paths)):
        raise ArithmeticError(f"path sum {by_paths!r} disagrees with (I-A)^-1 entry {by_inverse!r}")
    return by_inverse


def marginal_cov(c: LabeledCov, drop) -> LabeledCov:
    """Gaussian marginal: the submatrix without ``drop``."""
    drop = {drop} if isinstance(drop, str) else set(drop)
    c.index(drop)
    return c.sub([v for v in c.labels if v not in drop])


def random_sem(g: Dag, seed, coef_range: tuple[float, float] = DEFAULT_COEF_RANGE,
               signs: bool = True) -> LinearSem:
    """Draw path coefficients with magnitude uniform on ``coef_range``.

    Signs are random unless ``signs`` is false.  Error variances are one.
    Edges are visited in sorted order so a seed fixes the model.
    """
    lo, hi = coef_range
    if not 0 < lo <= hi:
        raise ModelError(f"degenerate coefficient range {coef_range}")
    rng = np.random.default_rng(seed)
    coefs = {}
    for e in sorted(g.edges):
        v = rng.uniform(lo, hi)
        if signs and rng.random() < 0.5:
            v = -v
        coefs[e] = v
    return LinearSem(g, coefs)


def random_dag(n: int, seed, edge_prob: float = 0.4, prefix: str = "V") -> Dag:
    """Random DAG over ``n`` observed vertices (edges only from lower to higher index)."""
    rng = np.random.default_rng(seed)
    names = [f"{prefix}{i}" for i in range(n)]
    edges = [(names[i], names[j]) for i in range(n) for j in range(i + 1, n)
             if rng.random() < edge_prob]
    return Dag(names, edges)


def sample(m: LinearSem, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` draws of every vertex, columns in ``graph.names`` order."""
    chol = np.linalg.cholesky(m.error_cov)
    eps = rng.standard_normal((n, len(m.graph.names))) @ chol.T
    return eps @ m.reduced_form().T


def sample_selected(m: LinearSem, s: str, window: Interval, n: int, seed,
                    batch: int = 200_000) -> np.ndarray:
    """Rejection sampling: ``n`` accepted draws of all vertices with ``s`` in ``window``."""
    if m.graph.kind(s) is not Kind.SELECTION:
        raise ModelError(f"{s} is not a selection vertex")
    rng = np.random.default_rng(seed)
    col = m.graph.names.index(s)
    kept, total, drawn = [], 0, 0
    while total < n:
        draws = sample(m, batch, rng)
        drawn += batch
        ok = draws[window.contains(draws[:, col])]
        if drawn >= batch and (total + len(ok)) / drawn < MIN_ACCEPTANCE:
            raise DegenerateError("window too narrow for simulation")
        kept.append(ok)
        total += len(ok)
    return np.concatenate(kept)[:n]


def simulate_selected(m: LinearSem, s: str, window: Interval, n: int, seed) -> LabeledCov:
    """Sample covariance of the observed variables among accepted draws."""
    draws = sample_selected(m, s, window, n, seed)
    names = m.graph.names
    keep = [i for i, v in enumerate(names) if m.graph.kind(v) is Kind.OBSERVED]
    return LabeledCov(tuple(names[i] for i in keep), np.cov(draws[:, keep], rowvar=False),
                      Selected(s, window))


def cov_standard_errors(data: np.ndarray) -> np.ndarray:
    """Entrywise standard errors of the sample covariance of ``data`` (rows = draws)."""
    centred = data - data.mean(axis=0)
    n, k = centred.shape
    se = np.empty((k, k))
    for i in range(k):
        for j in range(i, k):
            se[i, j] = se[j, i] = np.std(centred[:, i] * centred[:, j], ddof=1) / np.sqrt(n)
    return se
