"""Identification of total effects under latent confounding and selection.

Two families of functions live here and never mix:

* graph checkers (``check_*``, ``search_*``) read only the :class:`Dag` and
  return a :class:`Certificate` listing every condition with its verdict;
* estimators (``estimate_*``, ``solve_single_factor``, ``peel_factors``,
  ``adjusted_effect``) read only a :class:`LabeledCov`.

:func:`latent_selection_pipeline` is the one place that combines both.

Certificate ``theorem`` ids: ``"T1"`` latent-factor ratio criterion,
``"T3"`` selection ratio criterion, ``"T2Pipeline"`` de-selection followed by
factor peeling, ``"BackDoor"`` plain adjustment with observed covariates.
"""

from __future__ import annotations

import enum
import itertools
import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Iterable, Sequence

import numpy as np

from .exceptions import DegenerateError, MisspecificationError, ModelError, NotIdentifiableError
from .gaussian import LabeledCov, beta, conditional_cov
from .graph import (Dag, Kind, Mode, Relation, ZeroPattern, back_door_admissible, components,
                    connecting_trail, d_separated, factor_identifiable, find_odd_cycle, relatives,
                    zero_pattern)

log = logging.getLogger(__name__)

#: relative size below which a ratio denominator counts as zero
DENOMINATOR_TOL = 1e-10
#: relative tolerance for redundant zero-pattern edges in the factor solver
CONSISTENCY_TOL = 1e-6
#: relative size below which a loading product counts as zero
NONZERO_TOL = 1e-9


@dataclass(frozen=True)
class Roles:
    """Role assignment for the ratio criteria.

    ``aux`` is the latent confounder (``T1``) or the selection variable
    (``T3``); ``t`` is the observed conditioning set.
    """

    x: str
    y: str
    z: str
    w: str
    t: tuple[str, ...] = ()
    aux: str | None = None

    def __post_init__(self):
        t = (self.t,) if isinstance(self.t, str) else tuple(self.t)
        object.__setattr__(self, "t", t)
        named = [self.x, self.y, self.z, self.w] + ([self.aux] if self.aux else [])
        if len(set(named)) != len(named) or set(t) & set(named) or len(set(t)) != len(t):
            raise ModelError("role variables must be distinct and disjoint from t")

    def to_json(self) -> dict:
        d = asdict(self)
        d["t"] = list(self.t)
        return d


@dataclass
class Check:
    """One verdict in a certificate.

    ``witness`` is a d-connecting trail when the condition concerns an open
    connection; ``separator`` is the conditioning set that was tested.
    """

    id: str
    description: str
    passed: bool
    separator: list[str] | None = None
    witness: list[str] | None = None
    detail: str | None = None

    def to_json(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class Certificate:
    theorem: str
    roles: Roles | None = None
    checks: list[Check] = field(default_factory=list)
    estimate: float | None = None
    adjustment: tuple[str, ...] | None = None
    stages: list[str] | None = None
    tolerances: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.passed for c in self.checks)

    def failed(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    def sort_key(self):
        r = self.roles
        if r is None:
            return (self.theorem, "", "", "", len(self.adjustment or ()), tuple(self.adjustment or ()))
        return (self.theorem, r.aux or "", r.z, r.w, len(r.t), r.t)

    def to_json(self) -> dict:
        doc = {
            "theorem": self.theorem,
            "passed": self.passed,
            "roles": self.roles.to_json() if self.roles else None,
            "checks": [c.to_json() for c in self.checks],
            "estimate": self.estimate,
        }
        if self.adjustment is not None:
            doc["adjustment"] = list(self.adjustment)
        if self.stages is not None:
            doc["stages"] = list(self.stages)
        if self.tolerances:
            doc["tolerances"] = dict(self.tolerances)
        return doc


# -- graph checkers -------------------------------------------------------------

def _separation(g: Dag, cid: str, desc: str, a, b, given, want: bool) -> Check:
    """``want`` true: pass iff separated; false: pass iff connected."""
    given = sorted(given)
    trail = connecting_trail(g, a, b, given)
    separated = trail is None
    return Check(cid, desc, separated == want, separator=given, witness=trail,
                 detail=None if trail is not None else "no d-connecting trail")


def _common_checks(g: Dag, x: str, y: str, adjust: Iterable[str]) -> list[Check]:
    adjust = sorted(adjust)
    nondesc = x not in relatives(g, y, Relation.DESCENDANTS)
    checks = [Check("nondescendant", f"{x} is a nondescendant of {y}", nondesc)]
    ok = back_door_admissible(g, x, y, adjust)
    detail = None
    witness = None
    if not ok:
        bad = set(adjust) & relatives(g, x, Relation.DESCENDANTS)
        if bad:
            detail = f"adjustment contains descendants of {x}: {sorted(bad)}"
        else:
            witness = connecting_trail(g.without_edges_out_of(x), x, y, adjust)
            detail = "open back-door trail"
    checks.append(Check("backdoor", f"{adjust} satisfies the back-door criterion for ({x}, {y})",
                        ok, separator=adjust, witness=witness, detail=detail))
    return checks


def _require_roles(g: Dag, r: Roles, aux_kind: Kind) -> None:
    g._require(r.x, r.y, r.z, r.w, *r.t)
    if r.aux is None:
        raise ModelError("roles need an auxiliary vertex")
    if g.kind(r.aux) is not aux_kind:
        raise ModelError(f"{r.aux} must be a {aux_kind.value} vertex, not {g.kind(r.aux).value}")
    for v in (r.x, r.y, r.z, r.w, *r.t):
        if g.kind(v) is not Kind.OBSERVED:
            raise ModelError(f"role vertex {v} must be observed")


def check_latent_criterion(g: Dag, r: Roles) -> Certificate:
    """Graph conditions licensing the latent-factor ratio estimator.

    With ``U = r.aux`` latent: {X, U} ∪ T separates Y from Z; {U} ∪ T
    separates {X, Z} from W; {X} ∪ T leaves Z and W connected; X is a
    nondescendant of Y; and {U} ∪ T is a back-door set for (X, Y).
    """
    _require_roles(g, r, Kind.LATENT)
    t = set(r.t)
    checks = [
        _separation(g, "c1", f"{{X, U}} ∪ T d-separates {r.y} from {r.z}",
                    {r.y}, {r.z}, t | {r.x, r.aux}, True),
        _separation(g, "c2", f"{{U}} ∪ T d-separates {{{r.x}, {r.z}}} from {r.w}",
                    {r.x, r.z}, {r.w}, t | {r.aux}, True),
        _separation(g, "c3", f"{{X}} ∪ T does not d-separate {r.z} from {r.w}",
                    {r.z}, {r.w}, t | {r.x}, False),
    ]
    checks += _common_checks(g, r.x, r.y, t | {r.aux})
    return Certificate("T1", r, checks)


def check_selection_criterion(g: Dag, r: Roles) -> Certificate:
    """Graph conditions licensing the selection ratio estimator.

    With ``S = r.aux`` a selection vertex: {X} ∪ T separates Y from Z; T
    separates {X, Z} from W; {X} ∪ T leaves S and Z connected; T leaves S
    and W connected; X is a nondescendant of Y; T is a back-door set.
    """
    _require_roles(g, r, Kind.SELECTION)
    t = set(r.t)
    checks = [
        _separation(g, "c1", f"{{X}} ∪ T d-separates {r.y} from {r.z}",
                    {r.y}, {r.z}, t | {r.x}, True),
        _separation(g, "c2", f"T d-separates {{{r.x}, {r.z}}} from {r.w}",
                    {r.x, r.z}, {r.w}, t, True),
        _separation(g, "c3", f"{{X}} ∪ T does not d-separate {r.aux} from {r.z}",
                    {r.aux}, {r.z}, t | {r.x}, False),
        _separation(g, "c4", f"T does not d-separate {r.aux} from {r.w}",
                    {r.aux}, {r.w}, t, False),
    ]
    checks += _common_checks(g, r.x, r.y, t)
    return Certificate("T3", r, checks)


def check_back_door(g: Dag, x: str, y: str, adjust=()) -> Certificate:
    adjust = tuple(sorted(adjust))
    g._require(x, y, *adjust)
    checks = _common_checks(g, x, y, adjust)[1:]
    observed = all(g.kind(v) is Kind.OBSERVED for v in (x, y, *adjust))
    checks.append(Check("observed", "treatment, response and covariates are observed", observed))
    return Certificate("BackDoor", None, checks, adjustment=adjust)


def _subsets(pool: Sequence[str], max_size: int):
    for k in range(max_size + 1):
        yield from itertools.combinations(pool, k)


def search_certificates(g: Dag, x: str, y: str, max_t: int = 3) -> list[Certificate]:
    """All passing latent-factor and selection ratio certificates for (x, y).

    An empty result means these two criteria do not apply, not that the
    effect is unidentifiable.
    """
    g._require(x, y)
    if x == y:
        raise ModelError("x and y must differ")
    if g.kind(x) is not Kind.OBSERVED or g.kind(y) is not Kind.OBSERVED:
        return []
    if x in relatives(g, y, Relation.DESCENDANTS):
        return []
    desc_x = relatives(g, x, Relation.DESCENDANTS)
    pool = [v for v in g.observed if v not in (x, y)]
    out = []
    for theorem, aux_pool in (("T1", g.latent), ("T3", g.selection)):
        for aux in aux_pool:
            for t in _subsets([v for v in pool if v not in desc_x], max_t):
                ts = set(t)
                adjust = ts | {aux} if theorem == "T1" else ts
                if not back_door_admissible(g, x, y, adjust):
                    continue
                rest = [v for v in pool if v not in ts]
                for z in rest:
                    sep1 = ts | {x, aux} if theorem == "T1" else ts | {x}
                    if not d_separated(g, {y}, {z}, sep1):
                        continue
                    if theorem == "T3" and d_separated(g, {aux}, {z}, ts | {x}):
                        continue
                    for w in rest:
                        if w == z or w in desc_x:
                            continue
                        r = Roles(x, y, z, w, t, aux)
                        cert = (check_latent_criterion(g, r) if theorem == "T1"
                                else check_selection_criterion(g, r))
                        if cert.passed:
                            out.append(cert)
    return sorted(out, key=Certificate.sort_key)


def search_back_door(g: Dag, x: str, y: str, max_size: int = 3) -> list[Certificate]:
    """Observed back-door adjustment sets for (x, y), smallest first.

    Graphs with selection vertices yield nothing: plain adjustment ignores
    the selection distortion.
    """
    g._require(x, y)
    if g.selection or g.kind(x) is not Kind.OBSERVED or g.kind(y) is not Kind.OBSERVED:
        return []
    desc_x = relatives(g, x, Relation.DESCENDANTS)
    pool = [v for v in g.observed if v not in (x, y) and v not in desc_x]
    out = [check_back_door(g, x, y, z) for z in _subsets(pool, max_size)
           if back_door_admissible(g, x, y, z)]
    return sorted(out, key=Certificate.sort_key)


# -- ratio estimators -------------------------------------------------------------

def ratio_terms(c: LabeledCov, x: str, y: str, z: str, w: str, t=()) -> tuple[float, float, float]:
    """Numerator, denominator and scale of the four-variable ratio estimator.

    numerator   = σ_xw·t σ_yz·t − σ_zw·t σ_xy·t
    denominator = σ_xw·t σ_xz·t − σ_zw·t σ_xx·t
    scale       = σ_xx·t √(σ_zz·t σ_ww·t), a bound on each denominator term
    """
    s = conditional_cov(c, [x, y, z, w], list(t))
    num = s[x, w] * s[y, z] - s[z, w] * s[x, y]
    den = s[x, w] * s[x, z] - s[z, w] * s[x, x]
    scale = s[x, x] * math.sqrt(s[z, z] * s[w, w])
    return num, den, scale


def _ratio(c: LabeledCov, r: Roles, what: str, tol: float | None) -> float:
    num, den, scale = ratio_terms(c, r.x, r.y, r.z, r.w, r.t)
    if abs(den) < (DENOMINATOR_TOL if tol is None else tol) * scale:
        raise DegenerateError(f"denominator degenerate ({what} violated empirically)")
    return num / den


def estimate_latent(c: LabeledCov, r: Roles, tol: float | None = None) -> float:
    """Total effect of ``r.x`` on ``r.y`` from a full-population covariance.

    Valid when :func:`check_latent_criterion` passes; the latent variable
    itself never enters.
    """
    if c.population is not None:
        raise ModelError("latent-factor estimator expects a full-population covariance")
    return _ratio(c, r, "conditions c2/c3", tol)


def estimate_selected(c: LabeledCov, r: Roles, tol: float | None = None) -> float:
    """Total effect from a covariance observed in a selected population.

    Valid when :func:`check_selection_criterion` passes.  The result does not
    depend on the selection window.
    """
    if c.population is None:
        raise ModelError("selection estimator expects a selected-population covariance")
    return _ratio(c, r, "conditions c3/c4", tol)


def adjusted_effect(c: LabeledCov, x: str, y: str, adjust=()) -> float:
    """Regression coefficient β_yx·adjust.

    Pure arithmetic: whether ``adjust`` is a valid back-door set is the
    checker's business.
    """
    return beta(c, y, x, list(adjust))


# -- single-factor solver -----------------------------------------------------------

class Sign(str, enum.Enum):
    SUBTRACT = "subtract"   # c = residual + ωω'  (latent factor)
    ADD = "add"             # c = residual − ωω'  (selection)


def solve_single_factor(c: LabeledCov, p: ZeroPattern, sign: Sign | str = Sign.SUBTRACT,
                        tol: float | None = None) -> tuple[LabeledCov, np.ndarray]:
    """Split ``c`` into a residual with zeros on ``p.absent`` and a rank-one term.

    With ``Sign.SUBTRACT`` the residual is ``c − ωω'`` (remove a latent
    factor); with ``Sign.ADD`` it is ``c + ωω'`` (undo interval selection).
    A concentration-mode pattern is solved on ``c⁻¹`` with the opposite
    sign and inverted back.

    Each component of the zero graph is seeded on an odd cycle of nonzero
    products, where ω_i² is the alternating product of the cycle entries,
    then spread along the remaining zero pairs and every redundant pair is
    checked to ``tol`` (default :data:`CONSISTENCY_TOL`) relative to √(c_ii c_jj).  Within a component the
    loading is normalised so its first nonzero entry is positive; across
    components the relative sign is not determined by the zeros and a
    warning is logged.

    Returns the residual covariance and ω ordered as ``p.variables``.
    """
    sign = Sign(sign)
    tol = CONSISTENCY_TOL if tol is None else tol
    if not factor_identifiable(p):
        raise NotIdentifiableError("pattern not identifiable: some zero-graph component is "
                                   "bipartite or a variable has no structural zero")
    labels = list(p.variables)
    c = c.sub(labels)
    if p.mode is Mode.CONCENTRATION:
        k = np.linalg.inv(c.matrix)
        flipped = Sign.ADD if sign is Sign.SUBTRACT else Sign.SUBTRACT
        kres, lam = _solve_rank_one(k, labels, p, flipped, tol)
        res = np.linalg.inv(kres)
        return LabeledCov(c.labels, (res + res.T) / 2, _population_after(c, sign)), lam
    m = c.matrix
    res, omega = _solve_rank_one(m, labels, p, sign, tol)
    return LabeledCov(c.labels, res, _population_after(c, sign)), omega


def _population_after(c: LabeledCov, sign: Sign):
    return None if sign is Sign.ADD else c.population


def _solve_rank_one(m: np.ndarray, labels, p: ZeroPattern, sign: Sign, tol: float):
    pos = {v: i for i, v in enumerate(labels)}
    sgn = 1.0 if sign is Sign.SUBTRACT else -1.0
    d = np.sqrt(np.diag(m))

    def prod(a, b):
        return sgn * m[pos[a], pos[b]]

    def scale(a, b):
        return d[pos[a]] * d[pos[b]]

    adj = p.complement_adjacency()
    comps = components(adj)
    if len(comps) > 1:
        log.warning("zero graph has %d components; relative loading signs are not identified",
                    len(comps))
    omega = np.zeros(len(labels))
    for comp in comps:
        strong = {v: {u for u in adj[v] if abs(prod(u, v)) > NONZERO_TOL * scale(u, v)}
                  for v in comp}
        cycle = None
        for v in comp:
            cycle = find_odd_cycle(strong, v)
            if cycle is not None:
                break
        if cycle is None:
            raise MisspecificationError("no odd cycle of nonzero entries: loading not determined")
        edges = list(zip(cycle, cycle[1:] + cycle[:1]))
        log_sq = 0.0
        negative = False
        for k, (a, b) in enumerate(edges):
            v = prod(a, b)
            negative ^= v < 0
            log_sq += math.log(abs(v)) * (1 if k % 2 == 0 else -1)
        if negative:
            raise MisspecificationError("covariance incompatible with one-factor structure "
                                        "(squared loading computed negative)")
        known = {cycle[0]: math.exp(0.5 * log_sq)}
        frontier = [cycle[0]]
        while frontier:
            nxt = []
            for a in frontier:
                if abs(known[a]) <= NONZERO_TOL * d[pos[a]]:
                    continue
                for b in sorted(adj[a], key=pos.__getitem__):
                    if b not in known:
                        known[b] = prod(a, b) / known[a]
                        nxt.append(b)
            frontier = nxt
        missing = [v for v in comp if v not in known]
        if missing:
            raise MisspecificationError(f"loading not determined for {missing}")
        for a in comp:
            for b in adj[a]:
                if abs(known[a] * known[b] - prod(a, b)) > tol * scale(a, b):
                    raise MisspecificationError(
                        f"inconsistent structural zero ({a}, {b}): model misspecified")
        first = next((v for v in sorted(comp, key=pos.__getitem__)
                      if abs(known[v]) > NONZERO_TOL * d[pos[v]]), None)
        flip = -1.0 if first is not None and known[first] < 0 else 1.0
        for v in comp:
            omega[pos[v]] = flip * known[v]
    res = m - sgn * np.outer(omega, omega)
    for pair in p.absent:
        a, b = tuple(pair)
        res[pos[a], pos[b]] = res[pos[b], pos[a]] = 0.0
    return (res + res.T) / 2, omega


class StageError(Exception):
    """Failure while peeling one factor; ``stage`` is its zero-based index."""

    def __init__(self, stage: int, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage}: {cause}")


def peel_factors(c: LabeledCov, stages: Sequence[ZeroPattern]) -> LabeledCov:
    """Condition out latent factors one at a time.

    Stage ``i`` must describe the zeros of the covariance given the first
    ``i + 1`` factors (the later ones marginalised).  Returns the covariance
    given all of them.
    """
    cur = c
    for i, p in enumerate(stages):
        try:
            cur, _ = solve_single_factor(cur, p, Sign.SUBTRACT)
        except (NotIdentifiableError, MisspecificationError, ModelError) as exc:
            raise StageError(i, exc) from exc
    return cur


# -- combined pipeline -----------------------------------------------------------------

def _loading_check(g: Dag, cid: str, factor: str, variables, given) -> Check:
    hit = [v for v in variables if not d_separated(g, {factor}, {v}, given)]
    return Check(cid, f"{factor} is d-connected to some variable given {sorted(given)}",
                 bool(hit), separator=sorted(given), detail=f"connected: {hit}" if hit else None)


def _pattern_checks(g: Dag, cid: str, p: ZeroPattern) -> list[Check]:
    adj = p.complement_adjacency()
    n_comp = len(components(adj))
    return [
        Check(f"{cid}.odd_cycle", "every component of the zero graph has an odd cycle "
              "and every variable has a structural zero", factor_identifiable(p),
              detail=f"zero pairs: {sorted(sorted(x) for x in p.absent)}"),
        Check(f"{cid}.connected", "zero graph is connected (loading sign determined)",
              n_comp == 1, detail=f"{n_comp} components"),
    ]


def latent_selection_pipeline(g: Dag, c: LabeledCov, x: str, y: str, t=(),
                              max_adjust: int = 3) -> Certificate:
    """Estimate the total effect when both latent factors and selection act.

    1. find observed covariates Z with Z ∪ U ∪ T a back-door set, U being
       the latents that reach the observed variables;
    2. if ``c`` is from a selected population, restore Σ_xx·t from the zeros
       the graph implies for it (skipped for a full-population ``c``);
    3. peel the latents one at a time (trying orders until every stage's
       zero pattern qualifies), then regress y on x and Z.

    A failed step leaves a certificate with that step's checks failing and
    no estimate.
    """
    t = tuple(t)
    g._require(x, y, *t)
    observed = [v for v in c.labels if v in g and g.kind(v) is Kind.OBSERVED]
    cert = Certificate("T2Pipeline", None, [], tolerances={
        "consistency": CONSISTENCY_TOL, "nonzero": NONZERO_TOL})
    stages_log: list[str] = []
    cert.stages = stages_log
    for v in (x, y, *t):
        if v not in observed:
            raise ModelError(f"{v} must be an observed variable present in the covariance")
    x_vars = [v for v in observed if v not in t]
    obs_anc = set().union(*(relatives(g, v, Relation.ANCESTORS) for v in x_vars))
    latents = [u for u in g.latent if u in obs_anc]

    # step 1
    desc_x = relatives(g, x, Relation.DESCENDANTS)
    pool = [v for v in x_vars if v not in (x, y) and v not in desc_x]
    z_adj = next((z for z in _subsets(pool, max_adjust)
                  if back_door_admissible(g, x, y, set(z) | set(latents) | set(t))), None)
    cert.checks.append(Check("step1.backdoor", "observed covariates plus latents and T form a "
                             "back-door set", z_adj is not None,
                             separator=sorted(set(z_adj or ()) | set(latents) | set(t))))
    cert.checks.append(Check("step1.nondescendant", f"{x} is a nondescendant of {y}",
                             x not in relatives(g, y, Relation.DESCENDANTS)))
    stages_log.append("step1")
    if not cert.passed:
        return cert
    cert.adjustment = tuple(z_adj)

    # step 2
    ct = conditional_cov(c, x_vars, list(t)) if t else c.sub(x_vars)
    if c.population is not None:
        s = c.population.variable
        if s not in g or g.kind(s) is not Kind.SELECTION:
            raise ModelError(f"selected on {s!r}, which is not a selection vertex of the graph")
        p = zero_pattern(g, x_vars, t)
        cert.checks += _pattern_checks(g, "step2", p)
        cert.checks.append(_loading_check(g, "step2.loading", s, x_vars, t))
        stages_log.append("step2")
        if not cert.passed:
            return cert
        try:
            ct, _ = solve_single_factor(ct, p, Sign.ADD)
        except (NotIdentifiableError, MisspecificationError) as exc:
            cert.checks.append(Check("step2.solve", "de-selection solve", False, detail=str(exc)))
            return cert
        cert.checks.append(Check("step2.solve", "de-selection solve", True))
    else:
        stages_log.append("step2 skipped (full population)")

    # step 3
    order, patterns = _stage_order(g, x_vars, t, latents)
    cert.checks.append(Check("step3.stages", "every latent stage has an identifiable, connected "
                             "zero pattern with a nonzero loading", order is not None,
                             detail=f"order {order}" if order is not None else
                             f"no qualifying order of {latents}"))
    stages_log.append("step3")
    if order is None:
        return cert
    try:
        cu = peel_factors(ct, patterns)
    except StageError as exc:
        cert.checks.append(Check("step3.solve", "factor peeling", False, detail=str(exc)))
        return cert
    cert.checks.append(Check("step3.solve", "factor peeling", True, detail=f"order {order}"))
    cert.estimate = adjusted_effect(cu, x, y, z_adj)
    return cert


def _stage_order(g: Dag, x_vars, t, latents):
    for order in itertools.permutations(latents):
        patterns = []
        for i, u in enumerate(order):
            given = set(t) | set(order[: i + 1])
            p = zero_pattern(g, x_vars, given)
            prev = set(t) | set(order[:i])
            if not (factor_identifiable(p) and len(components(p.complement_adjacency())) == 1
                    and _loading_check(g, "", u, x_vars, prev).passed):
                break
            patterns.append(p)
        else:
            return list(order), patterns
    return None, None
