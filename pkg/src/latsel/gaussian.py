"""Covariance algebra for jointly Gaussian variables.

Conditioning is done with Schur complements, selection on an interval of one
variable with the truncated-normal variance.  Matrices are carried with their
variable labels in :class:`LabeledCov` so that callers address entries by
name.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg

from .exceptions import DegenerateError, ModelError

#: smallest-to-largest eigenvalue ratio below which a block counts as singular
SINGULAR_RATIO = 1e-10
#: probability mass below which a selection window counts as empty
MIN_WINDOW_MASS = 1e-300


@dataclass(frozen=True)
class Interval:
    """Closed selection window ``lower <= S <= upper``; either end may be infinite."""

    lower: float = -math.inf
    upper: float = math.inf

    def __post_init__(self):
        object.__setattr__(self, "lower", float(self.lower))
        object.__setattr__(self, "upper", float(self.upper))
        if not self.lower < self.upper:
            raise ModelError(f"empty interval [{self.lower}, {self.upper}]")

    @property
    def unbounded(self) -> bool:
        return self.lower == -math.inf and self.upper == math.inf

    def contains(self, values):
        return (values >= self.lower) & (values <= self.upper)

    @classmethod
    def parse(cls, text: str) -> "Interval":
        """Parse ``"a,b"``; ``inf``/``-inf`` or an empty side mean unbounded."""
        try:
            lo, hi = (t.strip() for t in text.split(","))
            return cls(float(lo) if lo else -math.inf, float(hi) if hi else math.inf)
        except ValueError as exc:
            raise ModelError(f"cannot parse interval {text!r}") from exc


@dataclass(frozen=True)
class Selected:
    """Population obtained by keeping units with ``variable`` inside ``window``.

    ``window`` may be ``None`` when the selection rule is not known.
    """

    variable: str
    window: Interval | None = None


@dataclass(frozen=True, eq=False)
class LabeledCov:
    """Symmetric positive definite covariance matrix with named rows.

    ``population`` is ``None`` for the full population or a :class:`Selected`
    marker when the matrix describes a selected subpopulation.
    """

    labels: tuple[str, ...]
    matrix: np.ndarray = field(repr=False)
    population: Selected | None = None

    def __post_init__(self):
        labels = tuple(str(x) for x in self.labels)
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape != (len(labels), len(labels)):
            raise ModelError("matrix shape does not match the label count")
        if len(set(labels)) != len(labels):
            raise ModelError("duplicate labels")
        scale = max(1.0, float(np.abs(m).max(initial=0.0)))
        if np.abs(m - m.T).max(initial=0.0) > 1e-12 * scale:
            raise ModelError("covariance matrix is not symmetric")
        m = (m + m.T) / 2
        if labels:
            ev = np.linalg.eigvalsh(m)
            if ev[0] <= SINGULAR_RATIO * max(ev[-1], 0.0) or ev[-1] <= 0:
                raise ModelError("covariance matrix is not positive definite")
        m.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "matrix", m)

    def index(self, names: Iterable[str]) -> list[int]:
        pos = {n: i for i, n in enumerate(self.labels)}
        try:
            return [pos[n] for n in names]
        except KeyError as exc:
            raise ModelError(f"unknown label {exc.args[0]!r}") from None

    def block(self, rows: Sequence[str], cols: Sequence[str]) -> np.ndarray:
        return self.matrix[np.ix_(self.index(rows), self.index(cols))]

    def __getitem__(self, pair: tuple[str, str]) -> float:
        i, j = self.index(pair)
        return float(self.matrix[i, j])

    def sub(self, names: Sequence[str]) -> "LabeledCov":
        return LabeledCov(tuple(names), self.block(names, names), self.population)

    def with_population(self, population: Selected | None) -> "LabeledCov":
        return LabeledCov(self.labels, self.matrix, population)

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "matrix": self.matrix.tolist()}


def _check_pd_block(a: np.ndarray, what: str = "degenerate conditioning set"):
    if a.size == 0:
        return None
    ev = np.linalg.eigvalsh(a)
    if ev[-1] <= 0 or ev[0] < SINGULAR_RATIO * ev[-1]:
        raise DegenerateError(what)
    return linalg.cho_factor(a, lower=True)


def solve_pd(a: np.ndarray, b: np.ndarray, what: str = "degenerate conditioning set") -> np.ndarray:
    """Solve ``a @ x = b`` for symmetric positive definite ``a`` via Cholesky."""
    fac = _check_pd_block(a, what)
    if fac is None:
        return np.zeros((0,) + b.shape[1:])
    return linalg.cho_solve(fac, b)


def _disjoint(*groups: Iterable[str]) -> None:
    seen: set[str] = set()
    for g in groups:
        g = list(g)
        if len(set(g)) != len(g) or seen & set(g):
            raise ModelError("label sets must be disjoint")
        seen |= set(g)


def _names(x) -> list[str]:
    if isinstance(x, str):
        return [x]
    return list(x)


def conditional_cov(c: LabeledCov, keep, given=()) -> LabeledCov:
    """Covariance of ``keep`` given ``given``: Σ_kk − Σ_kg Σ_gg⁻¹ Σ_gk."""
    keep, given = _names(keep), _names(given)
    _disjoint(keep, given)
    skk = c.block(keep, keep)
    if given:
        skg = c.block(keep, given)
        skk = skk - skg @ solve_pd(c.block(given, given), skg.T)
    return LabeledCov(tuple(keep), (skk + skk.T) / 2, c.population)


def regression_coefs(c: LabeledCov, y, x, given=()) -> np.ndarray:
    """Coefficients of ``x`` when regressing ``y`` on ``x`` and ``given``.

    Returns ``Σ_yx·g Σ_xx·g⁻¹`` with shape ``(len(y), len(x))``, or a 1-d
    vector when ``y`` is a single label.
    """
    single = isinstance(y, str)
    y, x, given = _names(y), _names(x), _names(given)
    _disjoint(y, x, given)
    cc = conditional_cov(c, y + x, given) if given else c.sub(y + x)
    ny = len(y)
    sxx = cc.matrix[ny:, ny:]
    sxy = cc.matrix[ny:, :ny]
    coefs = solve_pd(sxx, sxy, "singular regressor block").T
    return coefs[0] if single else coefs


def beta(c: LabeledCov, y: str, x: str, given=()) -> float:
    """Scalar partial regression coefficient of ``x`` in the regression of ``y``."""
    return float(regression_coefs(c, y, [x], given)[0])


def cochran_residual(c: LabeledCov, y: str, x: str, s=(), t=()) -> float:
    """Gap in Cochran's omitted-variable identity.

    Returns ``β_yx·s − (β_yx·st + B_yt·xs B_tx·s)``; zero up to rounding for
    any positive definite input.
    """
    s, t = _names(s), _names(t)
    _disjoint([y], [x], s, t)
    lhs = beta(c, y, x, s)
    if not t:
        return lhs - beta(c, y, x, s)
    b_yt = regression_coefs(c, y, t, [x] + s)
    b_tx = regression_coefs(c, t, [x], s)[:, 0]
    return lhs - (beta(c, y, x, s + t) + float(b_yt @ b_tx))


def residual_var(c: LabeledCov, y: str, x: str, s=()) -> float:
    """``σ_yy·xs`` through ``σ_yy·x − B_ys·x Σ_ss·x B_ys·x'``."""
    s = _names(s)
    _disjoint([y], [x], s)
    syy_x = conditional_cov(c, [y], [x]).matrix[0, 0]
    if not s:
        return float(syy_x)
    b = regression_coefs(c, y, s, [x])
    sss_x = conditional_cov(c, s, [x]).matrix
    return float(syy_x - b @ sss_x @ b)


def _phi(z: float) -> float:
    if math.isinf(z):
        return 0.0
    return math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)


def _upper_tail(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2))


def _window_mass(alpha: float, beta_: float) -> float:
    # compute the mass on whichever side keeps both tails small, avoiding 1 - 1 cancellation
    if alpha > 0:
        return _upper_tail(alpha) - _upper_tail(beta_)
    if beta_ < 0:
        return _upper_tail(-beta_) - _upper_tail(-alpha)
    return 1.0 - _upper_tail(-alpha) - _upper_tail(beta_)


def truncated_moments(mean: float, var: float, window: Interval) -> tuple[float, float]:
    """Mean and variance of ``Normal(mean, var)`` restricted to ``window``."""
    if not var > 0:
        raise ModelError("variance must be positive")
    if window.unbounded:
        return float(mean), float(var)
    sd = math.sqrt(var)
    a = (window.lower - mean) / sd
    b = (window.upper - mean) / sd
    mass = _window_mass(a, b)
    if not mass > MIN_WINDOW_MASS:
        raise DegenerateError("empty selection window")
    pa, pb = _phi(a), _phi(b)
    apa = 0.0 if math.isinf(a) else a * pa
    bpb = 0.0 if math.isinf(b) else b * pb
    shift = (pa - pb) / mass
    factor = 1.0 + (apa - bpb) / mass - shift * shift
    # rounding can push an extreme-tail factor just outside (0, 1]
    factor = min(max(factor, np.finfo(float).tiny), 1.0)
    return mean + sd * shift, var * factor


def variance_deficit(var: float, window: Interval, mean: float = 0.0) -> float:
    """``σ_ss − var(S | S in window)``, never negative."""
    return var - truncated_moments(mean, var, window)[1]


def selected_cov(c: LabeledCov, s: str, window: Interval, mean: float = 0.0) -> LabeledCov:
    """Covariance of the remaining variables after selecting on ``s``.

    ``Σ_xx·s* = Σ_xx − B_xs B_xs' (σ_ss − σ_s*s*)`` where ``σ_s*s*`` is the
    truncated variance of ``s``; ``mean`` is the population mean of ``s``.
    """
    if c.population is not None:
        raise ModelError("input covariance already describes a selected population")
    rest = [v for v in c.labels if v != s]
    if len(rest) == len(c.labels):
        raise ModelError(f"unknown selection label {s!r}")
    sss = c[s, s]
    b = c.block(rest, [s])[:, 0] / sss
    deficit = variance_deficit(sss, window, mean)
    m = c.block(rest, rest) - np.outer(b, b) * deficit
    return LabeledCov(tuple(rest), m, Selected(s, window))


def rank_one_residual(d: np.ndarray) -> float:
    """Frobenius distance from ``d`` to its best positive semidefinite rank-one part."""
    ev, vec = np.linalg.eigh((d + d.T) / 2)
    top = max(ev[-1], 0.0)
    return float(np.linalg.norm(d - top * np.outer(vec[:, -1], vec[:, -1])))


def concentration_update_residual(c: LabeledCov, s: str, window: Interval, mean: float = 0.0) -> float:
    """Check that selection adds a positive rank-one term to the concentration matrix.

    Computes ``Σ_xx·s*⁻¹ − Σ_xx⁻¹`` and returns its distance from the nearest
    positive semidefinite rank-one matrix.
    """
    sel = selected_cov(c, s, window, mean)
    full = c.sub(sel.labels)
    eye = np.eye(len(sel.labels))
    d = solve_pd(sel.matrix, eye) - solve_pd(full.matrix, eye)
    return rank_one_residual(d)


def read_cov_csv(path: str | Path, tol: float = 1e-9) -> LabeledCov:
    """Read a covariance CSV: a header of labels followed by the matrix rows.

    An optional leading label column is accepted.  Near-symmetric input (to
    ``tol``) is symmetrized by averaging.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(x.strip() for x in r)]
    if not rows:
        raise ModelError(f"{path}: empty covariance file")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if header and header[0] == "" or (body and len(body[0]) == len(header) + 1):
        header = [h for h in header if h]
        row_labels = [r[0].strip() for r in body]
        if row_labels != header:
            raise ModelError(f"{path}: row labels {row_labels} do not match the header {header}")
        body = [r[1:] for r in body]
    try:
        m = np.array([[float(x) for x in r] for r in body])
    except ValueError as exc:
        raise ModelError(f"{path}: non-numeric entry ({exc})") from exc
    if m.shape != (len(header), len(header)):
        raise ModelError(f"{path}: expected a {len(header)}x{len(header)} matrix, got {m.shape}")
    if np.abs(m - m.T).max(initial=0.0) > tol:
        raise ModelError(f"{path}: matrix is not symmetric")
    return LabeledCov(tuple(header), (m + m.T) / 2)


def read_samples_csv(path: str | Path) -> LabeledCov:
    """Sample covariance (denominator n − 1) of a CSV of raw observations."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    try:
        data = np.array([[float(x) for x in r] for r in rows[1:]])
    except ValueError as exc:
        raise ModelError(f"{path}: non-numeric entry ({exc})") from exc
    if data.ndim != 2 or data.shape[0] < data.shape[1] + 1:
        raise ModelError(f"{path}: too few observations for a covariance matrix")
    return LabeledCov(tuple(h.strip() for h in rows[0]), np.cov(data, rowvar=False))


def write_cov_csv(c: LabeledCov, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(c.labels)
        for row in c.matrix:
            w.writerow([repr(float(v)) for v in row])
