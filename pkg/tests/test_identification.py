import itertools

import numpy as np
import pytest

from latsel import graphs, identification
from latsel.exceptions import DegenerateError, MisspecificationError, ModelError, NotIdentifiableError
from latsel.gaussian import Interval, LabeledCov, conditional_cov, selected_cov
from latsel.graph import Dag, Mode, ZeroPattern, zero_pattern
from latsel.identification import (Roles, Sign, StageError, adjusted_effect, check_back_door,
                                   check_latent_criterion, check_selection_criterion,
                                   estimate_latent, estimate_selected, latent_selection_pipeline,
                                   peel_factors, search_back_door, search_certificates,
                                   solve_single_factor)
from latsel.sem import LinearSem, implied_cov, marginal_cov, random_sem, true_total_effect

ROLES = Roles("X", "Y", "Z", "W")


def verdicts(cert):
    return {c.id: c.passed for c in cert.checks}


# -- checkers ---------------------------------------------------------------------------

def test_latent_criterion_passes_on_confounded_indicators():
    cert = check_latent_criterion(graphs.confounded_indicators(), Roles("X", "Y", "Z", "W", (), "U"))
    assert cert.passed, cert.failed()
    assert set(verdicts(cert)) == {"c1", "c2", "c3", "nondescendant", "backdoor"}


def test_swapped_instruments_fail_first_condition():
    cert = check_latent_criterion(graphs.confounded_indicators(), Roles("X", "Y", "W", "Z", (), "U"))
    assert not verdicts(cert)["c1"]
    failing = next(c for c in cert.checks if c.id == "c1")
    assert failing.witness[0] == "Y" and failing.witness[-1] == "W"


def test_checker_requires_role_vertices():
    with pytest.raises(ModelError):
        check_latent_criterion(Dag(["X", "Y"], [("X", "Y")]), Roles("X", "Y", "Z", "W", (), "U"))


def test_checker_aux_type_guard():
    with pytest.raises(ModelError):
        check_latent_criterion(graphs.confounded_indicators(), Roles("X", "Y", "Z", "W", (), None))
    g = graphs.selection_collider()
    with pytest.raises(ModelError):
        check_selection_criterion(Dag([*[(v, g.kind(v)) for v in g.names], "O"], g.edges),
                                  Roles("X", "Y", "Z", "W", (), "O"))


def test_roles_must_be_distinct():
    with pytest.raises(ModelError):
        Roles("X", "Y", "X", "W")
    with pytest.raises(ModelError):
        Roles("X", "Y", "Z", "W", ("Z",))


def test_selection_criterion_passes_on_collider():
    cert = check_selection_criterion(graphs.selection_collider(), Roles("X", "Y", "Z", "W", (), "S"))
    assert cert.passed, cert.failed()
    assert set(verdicts(cert)) == {"c1", "c2", "c3", "c4", "nondescendant", "backdoor"}


def with_edge(g, edge):
    return Dag([(v, g.kind(v)) for v in g.names], set(g.edges) | {edge})


def test_w_to_y_keeps_selection_criterion():
    # W -> Y only adds paths through the colliders Y and S, so T = {} still
    # separates {X, Z} from W and the estimator stays exact
    g = with_edge(graphs.selection_collider(), ("W", "Y"))
    assert check_selection_criterion(g, Roles("X", "Y", "Z", "W", (), "S")).passed
    for seed in range(20):
        m = random_sem(g, seed)
        c = selected_cov(implied_cov(m), "S", Interval(-1, 1))
        assert estimate_selected(c, ROLES) == pytest.approx(true_total_effect(m, "X", "Y"), abs=1e-9)


def test_w_to_x_breaks_second_condition():
    g = with_edge(graphs.selection_collider(), ("W", "X"))
    v = verdicts(check_selection_criterion(g, Roles("X", "Y", "Z", "W", (), "S")))
    assert not v["c2"]
    m = random_sem(g, 0)
    c = selected_cov(implied_cov(m), "S", Interval(0.0))
    assert abs(estimate_selected(c, ROLES) - true_total_effect(m, "X", "Y")) > 1e-3


def test_back_door_certificate():
    assert check_back_door(Dag(["X", "Y"], [("X", "Y")]), "X", "Y").passed
    g = Dag([("U", "latent"), "X", "Y"], [("U", "X"), ("U", "Y"), ("X", "Y")])
    bd = check_back_door(g, "X", "Y", ["U"])
    assert not bd.passed and verdicts(bd) == {"backdoor": True, "observed": False}


# -- estimators ---------------------------------------------------------------------------

def test_okuno_rows():
    c = graphs.okuno_correlations()
    assert estimate_latent(c, Roles("X6", "Y", "X5", "X9")) == pytest.approx(-0.4638, abs=5e-5)
    num, den, _ = identification.ratio_terms(c, "X2", "Y", "X1", "X9", ["X8"])
    assert num == pytest.approx(-0.000443, abs=5e-7)
    assert den == pytest.approx(0.00421, abs=1e-5)
    assert estimate_latent(c, Roles("X2", "Y", "X1", "X9", ("X8",))) == pytest.approx(-0.105, abs=2e-3)


@pytest.mark.parametrize("with_w_to_y", [True, False])
def test_latent_estimator_with_and_without_w_to_y(with_w_to_y):
    g = graphs.confounded_indicators(with_w_to_y)
    assert check_latent_criterion(g, Roles("X", "Y", "Z", "W", (), "U")).passed
    for seed in range(50):
        m = random_sem(g, seed)
        c = marginal_cov(implied_cov(m), "U")
        assert estimate_latent(c, ROLES) == pytest.approx(m.coefficients[("X", "Y")], abs=1e-9)


def test_estimator_scale_equivariance():
    m = random_sem(graphs.confounded_indicators(), 3)
    c = marginal_cov(implied_cov(m), "U")
    base = estimate_latent(c, ROLES)
    for v, k, expect in [("Y", 2.5, 2.5 * base), ("X", 4.0, base / 4.0)]:
        d = np.ones(len(c.labels))
        d[c.labels.index(v)] = k
        scaled = LabeledCov(c.labels, c.matrix * np.outer(d, d))
        assert estimate_latent(scaled, ROLES) == pytest.approx(expect, rel=1e-12)


def test_population_flags_enforced():
    m = random_sem(graphs.selection_collider(), 0)
    full = implied_cov(m)
    with pytest.raises(ModelError):
        estimate_selected(full.sub(["X", "Y", "Z", "W"]), ROLES)
    with pytest.raises(ModelError):
        estimate_latent(selected_cov(full, "S", Interval(0)), ROLES)


def test_independent_w_gives_degenerate_denominator():
    g = Dag(["X", "Y", "Z", "W", ("S", "selection")],
            [("Z", "X"), ("X", "Y"), ("Z", "S"), ("Y", "S")])
    c = selected_cov(implied_cov(random_sem(g, 1)), "S", Interval(0.0))
    with pytest.raises(DegenerateError, match="denominator degenerate"):
        estimate_selected(c, ROLES)


def test_window_invariance():
    m = random_sem(graphs.selection_collider(), 9)
    full = implied_cov(m)
    a = estimate_selected(selected_cov(full, "S", Interval(0.0)), ROLES)
    b = estimate_selected(selected_cov(full, "S", Interval(-0.5, 2.0)), ROLES)
    assert a == pytest.approx(b, abs=1e-9)


def test_adjusted_effect():
    m = LinearSem(Dag(["X", "Y"], [("X", "Y")]), {("X", "Y"): 0.35})
    assert adjusted_effect(implied_cov(m), "X", "Y") == pytest.approx(0.35, abs=1e-12)
    g = Dag([("U", "latent"), "X", "Y"], [("U", "X"), ("U", "Y"), ("X", "Y")])
    for seed in range(20):
        m = random_sem(g, seed)
        assert adjusted_effect(implied_cov(m), "X", "Y", ["U"]) == pytest.approx(
            true_total_effect(m, "X", "Y"), abs=1e-12)


def test_back_door_regression_recovers_effect_on_random_dags():
    from latsel.graph import back_door_admissible, relatives
    from latsel.sem import random_dag
    for seed in range(30):
        g = random_dag(6, seed, 0.5)
        m = random_sem(g, seed)
        c = implied_cov(m)
        for x, y in itertools.permutations(g.names, 2):
            if x in relatives(g, y, "descendants"):
                continue
            pool = [v for v in g.names if v not in (x, y)]
            for k in range(3):
                for adj in itertools.combinations(pool, k):
                    if back_door_admissible(g, x, y, adj):
                        assert adjusted_effect(c, x, y, adj) == pytest.approx(
                            true_total_effect(m, x, y), abs=1e-9)


# -- single-factor solver ------------------------------------------------------------------

def one_factor(omega, resid):
    omega = np.asarray(omega, float)
    labels = [f"a{i}" for i in range(len(omega))]
    return LabeledCov(labels, np.diag(resid) + np.outer(omega, omega)), labels


def test_three_indicator_solution():
    c, labels = one_factor([0.6, 0.5, 0.8], [1.0, 0.7, 0.4])
    p = ZeroPattern(labels, itertools.combinations(labels, 2))
    res, omega = solve_single_factor(c, p)
    np.testing.assert_allclose(np.abs(omega), [0.6, 0.5, 0.8], atol=1e-9)
    np.testing.assert_allclose(res.matrix, np.diag([1.0, 0.7, 0.4]), atol=1e-9)


def test_negative_loadings_recovered_up_to_sign():
    c, labels = one_factor([-0.6, 0.5, -0.8, 0.3], [1.0, 0.7, 0.4, 1.2])
    p = ZeroPattern(labels, itertools.combinations(labels, 2))
    res, omega = solve_single_factor(c, p)
    assert omega[0] > 0
    np.testing.assert_allclose(omega, [0.6, -0.5, 0.8, -0.3], atol=1e-9)
    np.testing.assert_allclose(res.matrix + np.outer(omega, omega), c.matrix, atol=1e-9)


def test_four_cycle_not_identifiable():
    c, labels = one_factor([0.6, 0.5, 0.8, 0.7], [1, 1, 1, 1])
    a, b, cc, d = labels
    p = ZeroPattern(labels, [(a, b), (b, cc), (cc, d), (d, a)])
    with pytest.raises(NotIdentifiableError, match="pattern not identifiable"):
        solve_single_factor(c, p)


def test_inconsistent_redundant_pair_is_misspecification():
    omega = np.array([0.6, 0.5, 0.8, 0.7])
    m = np.eye(4) + np.outer(omega, omega)
    m[0, 3] = m[3, 0] = m[0, 3] + 0.05
    labels = ["a", "b", "c", "d"]
    p = ZeroPattern(labels, itertools.combinations(labels, 2))
    with pytest.raises(MisspecificationError):
        solve_single_factor(LabeledCov(labels, m), p)


def test_negative_square_rejected():
    labels = ["a", "b", "c"]
    m = np.array([[1.0, 0.3, 0.3], [0.3, 1.0, -0.3], [0.3, -0.3, 1.0]])
    with pytest.raises(MisspecificationError, match="incompatible with one-factor"):
        solve_single_factor(LabeledCov(labels, m), ZeroPattern(labels, itertools.combinations(labels, 2)))


def test_partial_zero_pattern_keeps_free_entries():
    # a0..a4 with zeros among a0..a3 only partially: a triangle plus two tails
    omega = np.array([0.6, 0.5, 0.8, 0.7, 0.4])
    resid = np.eye(5)
    resid[3, 4] = resid[4, 3] = 0.3
    labels = [f"a{i}" for i in range(5)]
    c = LabeledCov(labels, resid + np.outer(omega, omega))
    absent = [p for p in itertools.combinations(labels, 2) if p != ("a3", "a4")]
    res, got = solve_single_factor(c, ZeroPattern(labels, absent))
    np.testing.assert_allclose(got, omega, atol=1e-9)
    np.testing.assert_allclose(res.matrix, resid, atol=1e-9)


def test_deselection_restores_full_covariance():
    g = graphs.latent_and_selection()
    for seed in range(20):
        m = random_sem(g, seed)
        full = implied_cov(m)
        obs = list(g.observed)
        sel = selected_cov(full, "S", Interval(-0.5, 2.0)).sub(obs)
        p = zero_pattern(g, obs)
        back, _ = solve_single_factor(sel, p, Sign.ADD)
        np.testing.assert_allclose(back.matrix, full.sub(obs).matrix, atol=1e-9)
        assert back.population is None


def test_concentration_mode_pattern():
    # selection on a chain's sink: zeros appear in the concentration matrix
    omega = np.array([0.5, -0.4, 0.6, 0.3])
    labels = list("abcd")
    base = np.linalg.inv(np.eye(4))
    k = np.linalg.inv(base) + np.outer(omega, omega)
    c = LabeledCov(labels, np.linalg.inv(k))
    p = ZeroPattern(labels, itertools.combinations(labels, 2), Mode.CONCENTRATION)
    res, lam = solve_single_factor(c, p, Sign.ADD)
    np.testing.assert_allclose(res.matrix, base, atol=1e-9)
    np.testing.assert_allclose(np.abs(lam), np.abs(omega), atol=1e-9)


def test_consistency_tolerance_is_read_at_call_time(monkeypatch):
    omega = np.array([0.6, 0.5, 0.8, 0.7])
    m = np.eye(4) + np.outer(omega, omega)
    m[0, 3] = m[3, 0] = m[0, 3] + 1e-4
    labels = ["a", "b", "c", "d"]
    c, p = LabeledCov(labels, m), ZeroPattern(labels, itertools.combinations(labels, 2))
    with pytest.raises(MisspecificationError):
        solve_single_factor(c, p)
    monkeypatch.setattr(identification, "CONSISTENCY_TOL", 1e-2)
    solve_single_factor(c, p)


# -- factor peeling ------------------------------------------------------------------------

def two_factor_setup(seed):
    g = graphs.two_factor()
    obs = list(g.observed)
    full = implied_cov(random_sem(g, seed))
    return g, obs, full


def test_peeling_zero_and_one_stage():
    g, obs, full = two_factor_setup(0)
    c = full.sub(obs)
    assert peel_factors(c, []) is c
    one = zero_pattern(g, obs, {"U1"})
    both = zero_pattern(g, obs, {"U1", "U2"})
    # claiming U2's zeros while U2 is still present is inconsistent
    with pytest.raises(StageError) as err:
        peel_factors(c, [both])
    assert err.value.stage == 0
    with pytest.raises(StageError) as err:
        peel_factors(c, [one, one])
    assert err.value.stage == 1


def test_peeling_single_stage_matches_solver():
    g = Dag([("U", "latent"), "A", "B", "C", "D"], [("U", v) for v in "ABCD"])
    c = implied_cov(random_sem(g, 2)).sub(list("ABCD"))
    p = zero_pattern(g, list("ABCD"), {"U"})
    np.testing.assert_array_equal(peel_factors(c, [p]).matrix, solve_single_factor(c, p)[0].matrix)


@pytest.mark.parametrize("seed", range(10))
def test_two_factor_peeling_both_orders(seed):
    g, obs, full = two_factor_setup(seed)
    truth = conditional_cov(full, obs, ["U1", "U2"]).matrix
    orders = [("U1", "U2"), ("U2", "U1")]
    out = []
    for order in orders:
        stages = [zero_pattern(g, obs, set(order[:k + 1])) for k in range(2)]
        out.append(peel_factors(full.sub(obs), stages).matrix)
        np.testing.assert_allclose(out[-1], truth, atol=1e-6)
    np.testing.assert_allclose(out[0], out[1], atol=1e-9)


# -- search --------------------------------------------------------------------------------

def test_search_finds_latent_certificate():
    certs = search_certificates(graphs.confounded_indicators(), "X", "Y")
    keys = [(c.theorem, c.roles.z, c.roles.w, c.roles.t, c.roles.aux) for c in certs]
    assert ("T1", "Z", "W", (), "U") in keys


def test_search_finds_selection_certificate():
    certs = search_certificates(graphs.selection_collider(), "X", "Y")
    keys = [(c.theorem, c.roles.z, c.roles.w, c.roles.t, c.roles.aux) for c in certs]
    assert ("T3", "Z", "W", (), "S") in keys


def test_chain_has_only_back_door():
    g = Dag(["X", "Y"], [("X", "Y")])
    assert search_certificates(g, "X", "Y") == []
    bd = search_back_door(g, "X", "Y")
    assert [c.adjustment for c in bd] == [()]


def test_no_back_door_with_selection_vertices():
    assert search_back_door(graphs.selection_collider(), "X", "Y") == []


@pytest.mark.parametrize("name", sorted(graphs.NAMED))
def test_search_deterministic_and_sound(name):
    g = graphs.NAMED[name]()
    a = search_certificates(g, "X", "Y")
    b = search_certificates(g.relabel({v: v for v in g.names}), "X", "Y")
    assert [c.to_json() for c in a] == [c.to_json() for c in b]
    assert [c.sort_key() for c in a] == sorted(c.sort_key() for c in a)
    for cert in a:
        check = check_latent_criterion if cert.theorem == "T1" else check_selection_criterion
        assert check(g, cert.roles).passed


def test_search_results_are_valid_on_random_models():
    g = graphs.confounded_indicators()
    m = random_sem(g, 17)
    c = marginal_cov(implied_cov(m), "U")
    for cert in search_certificates(g, "X", "Y"):
        assert estimate_latent(c, cert.roles) == pytest.approx(true_total_effect(m, "X", "Y"), abs=1e-9)


# -- combined pipeline ------------------------------------------------------------------------

def test_pipeline_end_to_end():
    g = graphs.latent_and_selection()
    for seed in range(10):
        m = random_sem(g, seed)
        sel = marginal_cov(selected_cov(implied_cov(m), "S", Interval(0.0)), "U")
        cert = latent_selection_pipeline(g, sel, "X", "Y")
        assert cert.passed, cert.failed()
        assert cert.estimate == pytest.approx(true_total_effect(m, "X", "Y"), abs=1e-6)
        assert cert.stages == ["step1", "step2", "step3"]


def test_pipeline_skips_deselection_for_full_population():
    g = graphs.latent_and_selection()
    m = random_sem(g, 3)
    full = implied_cov(m).sub(list(g.observed))
    cert = latent_selection_pipeline(g, full, "X", "Y")
    assert cert.passed
    assert cert.stages[1] == "step2 skipped (full population)"
    assert cert.estimate == pytest.approx(true_total_effect(m, "X", "Y"), abs=1e-6)


def test_pipeline_reports_bipartite_deselection_pattern():
    edges = [("U", v) for v in ("X", "Y", "A1", "A2")] + [("X", "Y"), ("Y", "S"), ("B1", "S")]
    g = Dag([("U", "latent"), "X", "Y", "A1", "A2", "B1", ("S", "selection")], edges)
    m = random_sem(g, 0)
    sel = marginal_cov(selected_cov(implied_cov(m), "S", Interval(0.0)), "U")
    cert = latent_selection_pipeline(g, sel, "X", "Y")
    assert not cert.passed and cert.estimate is None
    assert not verdicts(cert)["step2.odd_cycle"]
    assert cert.stages[-1] == "step2"


def test_pipeline_reports_missing_back_door():
    g = Dag([("U", "latent"), "X", "Y"], [("U", "X"), ("U", "Y"), ("Y", "X")])
    c = implied_cov(random_sem(g, 0)).sub(["X", "Y"])
    cert = latent_selection_pipeline(g, c, "X", "Y")
    assert not cert.passed and cert.estimate is None
    assert not verdicts(cert)["step1.nondescendant"]


def test_certificate_json_shape():
    cert = check_latent_criterion(graphs.confounded_indicators(), Roles("X", "Y", "Z", "W", (), "U"))
    doc = cert.to_json()
    assert doc["theorem"] == "T1" and doc["passed"] is True and doc["estimate"] is None
    assert doc["roles"] == {"x": "X", "y": "Y", "z": "Z", "w": "W", "t": [], "aux": "U"}
    assert {c["id"] for c in doc["checks"]} == {"c1", "c2", "c3", "nondescendant", "backdoor"}
    assert all("separator" in c for c in doc["checks"] if c["id"].startswith("c"))
