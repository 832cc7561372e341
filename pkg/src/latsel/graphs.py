"""Small named graphs used by the tests, the oracle suites and the CLI.

``confounded_indicators``
    U → {X, Y, Z, W}, Z → X, X → Y, W → Y with U latent.  Plain adjustment
    fails (U is unobserved and touches everything) but the latent-factor
    ratio criterion holds with z=Z, w=W, t=∅.
``selection_collider``
    Z → X, X → Y and Z, Y, W all feeding the selection variable S.
``two_factor``
    Latents U1, U2 with three indicators each plus X → Y, both confounded by
    U1.
``latent_and_selection``
    U confounds X and Y and loads on A1, A2; independent B1, B2, B3 and Y
    feed the selection variable S.
"""

from __future__ import annotations

from importlib import resources

from .gaussian import LabeledCov, read_cov_csv
from .graph import Dag


def confounded_indicators(with_w_to_y: bool = True) -> Dag:
    edges = [("U", "X"), ("U", "Y"), ("U", "Z"), ("U", "W"), ("Z", "X"), ("X", "Y")]
    if with_w_to_y:
        edges.append(("W", "Y"))
    return Dag([("U", "latent"), "X", "Y", "Z", "W"], edges)


def selection_collider() -> Dag:
    return Dag(["X", "Y", "Z", "W", ("S", "selection")],
               [("Z", "X"), ("X", "Y"), ("Z", "S"), ("Y", "S"), ("W", "S")])


def two_factor() -> Dag:
    edges = [("U1", v) for v in ("X", "Y", "A1", "A2", "A3")]
    edges += [("U2", v) for v in ("B1", "B2", "B3")]
    edges.append(("X", "Y"))
    return Dag([("U1", "latent"), ("U2", "latent"), "X", "Y", "A1", "A2", "A3", "B1", "B2", "B3"],
               edges)


def latent_and_selection() -> Dag:
    edges = [("U", v) for v in ("X", "Y", "A1", "A2")]
    edges += [("X", "Y"), ("Y", "S"), ("B1", "S"), ("B2", "S"), ("B3", "S")]
    return Dag([("U", "latent"), "X", "Y", "A1", "A2", "B1", "B2", "B3", ("S", "selection")], edges)


NAMED = {
    "confounded_indicators": confounded_indicators,
    "selection_collider": selection_collider,
    "two_factor": two_factor,
    "latent_and_selection": latent_and_selection,
}


def okuno_correlations() -> LabeledCov:
    """Painting-process correlation matrix, as printed to three decimals."""
    with resources.as_file(resources.files("latsel") / "data" / "okuno_correlations.csv") as p:
        return read_cov_csv(p)
