"""Applications of the staircase machinery: optimal-integrability gradients for
isotropic elliptic inclusions, irregular p-harmonic constructions, and the
p <-> p' duality swap."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import InternalError, PreconditionError
from .matrices import asmatrix, frob, member
from .measures import DiscreteMeasure, TailReport, moment, pushforward
from .staircase import (
    ExtendedMeasure,
    extended_measure,
    extended_tail_report,
)

B_MAX = 1e6


@dataclass
class ExponentProfile:
    kind: str
    params: dict
    value: float
    valid: bool
    validity_range: str = ""


def exponent(kind: str, params: dict) -> ExponentProfile:
    """Critical integrability exponent: 2K/(K+1) for the elliptic pair,
    (p-1)/(b^(p-1)+1) + b/(b+1) for the p-Laplace staircase."""
    if kind == "elliptic":
        K = float(params["K"])
        if not K > 1:
            raise PreconditionError("need K > 1")
        return ExponentProfile(kind, {"K": K}, 2.0 * K / (K + 1.0), True, "(1,2)")
    if kind == "plaplace":
        p = float(params["p"])
        b = float(params["b"])
        if not (1.0 < p < 2.0):
            raise PreconditionError("need p in (1,2)")
        if not b >= 1.0:
            raise PreconditionError("need b >= 1")
        q = (p - 1.0) / (b ** (p - 1.0) + 1.0) + b / (b + 1.0)
        return ExponentProfile(kind, {"p": p, "b": b}, q, 1.0 < q < p, "(1,p)")
    raise PreconditionError(f"unknown exponent kind {kind!r}")


def select_b(p: float, b_max: float = B_MAX, tol: float = 1e-8) -> float:
    """Maximizer of the p-Laplace exponent over b in (1, b_max]."""
    if not (1.0 < p < 2.0):
        raise PreconditionError("need p in (1,2)")

    def neg_q(b: float) -> float:
        return -exponent("plaplace", {"p": p, "b": b}).value

    # coarse geometric scan to bracket the interior maximum
    grid = np.geomspace(1.0 + 1e-6, b_max, 200)
    vals = np.array([neg_q(b) for b in grid])
    i = int(np.argmin(vals))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, len(grid) - 1)]
    res = minimize_scalar(neg_q, bounds=(lo, hi), method="bounded",
                          options={"xatol": tol})
    b = float(res.x)
    prof = exponent("plaplace", {"p": p, "b": b})
    if not prof.valid:
        raise InternalError(f"no valid exponent found for p={p}")
    return b


@dataclass
class PipelineResult:
    measure: DiscreteMeasure | None
    extended: ExtendedMeasure
    tail_report: TailReport
    fitted_M: float
    exponent: ExponentProfile
    extra: dict = field(default_factory=dict)
    realized_map: object = None


def afs_pipeline(A, K: float, N: int = 200, t_grid=None,
                 mode: str = "measure", domain=None,
                 delta: float = 0.05, depth: int = 4) -> PipelineResult:
    """Elliptic-inclusion pipeline: extended measure with barycenter A supported
    in E_K union E_{1/K}, two-sided tail verdict, fitted envelope constant.
    Map mode additionally realizes the measure as a piecewise-affine gradient."""
    A = asmatrix(A)
    prof = exponent("elliptic", {"K": K})
    ext = extended_measure("elliptic", A, {"K": K})
    if t_grid is None:
        t0 = 1.0 + frob(A)
        t_grid = np.geomspace(t0 * 1.01, t0 * 50.0, 60)
    rep = extended_tail_report(ext, N, t_grid)
    result = PipelineResult(ext.truncate(N), ext, rep,
                            float(rep.meta["fitted_M"]), prof)
    if mode == "map":
        from . import synth
        result.realized_map = synth.realize_extended(ext, domain=domain,
                                                     delta=delta, depth=depth)
    elif mode != "measure":
        raise PreconditionError(f"unknown mode {mode!r}")
    return result


def plap_pipeline(A, p: float, N: int = 10_000, t_grid=None,
                  mode: str = "measure", domain=None, b: float | None = None,
                  delta: float = 0.05, depth: int = 4) -> PipelineResult:
    """p-Laplace pipeline: extended measure in K_p with the selected staircase
    parameter b, two-sided tails, and the moment-divergence proxy."""
    A = asmatrix(A)
    if b is None:
        b = select_b(p)
    prof = exponent("plaplace", {"p": p, "b": b})
    if not prof.valid:
        raise PreconditionError("selected exponent is outside (1,p)")
    ext = extended_measure("plaplace", A, {"p": p, "b": b})
    if t_grid is None:
        t0 = 1.0 + frob(A)
        t_grid = np.geomspace(t0 * 1.01, t0 * 50.0, 60)
    rep = extended_tail_report(ext, min(N, 400), t_grid)
    qbar = prof.value
    checkpoints = [n for n in (100, 1_000, 10_000, 100_000) if n <= N]
    div_moments = [moment(ext.truncate(n), qbar) for n in checkpoints]
    sub_moments = [moment(ext.truncate(n), 0.95 * qbar) for n in checkpoints]
    # Cauchy increments of the convergent sub-critical moment past N = 10^3
    sub_increments = [moment(ext.truncate(n), 0.95 * qbar)
                      - moment(ext.truncate(n - 1), 0.95 * qbar)
                      for n in (2_000, 5_000, 10_000) if n <= N]
    result = PipelineResult(ext.truncate(min(N, 400)), ext, rep,
                            float(rep.meta["fitted_M"]), prof,
                            extra={"b": b,
                                   "moment_N": checkpoints,
                                   "qbar_moments": div_moments,
                                   "sub_moments": sub_moments,
                                   "sub_increments": sub_increments})
    if mode == "map":
        from . import synth
        result.realized_map = synth.realize_extended(ext, domain=domain,
                                                     delta=delta, depth=depth)
    elif mode != "measure":
        raise PreconditionError(f"unknown mode {mode!r}")
    return result


_SWAP = np.array([[0.0, 1.0], [1.0, 0.0]])


def duality_swap(obj, p: float, tol: float = 1e-7):
    """Component swap taking gradients in K_p to gradients in K_{p'},
    p' = p/(p-1); an involution with |row1'|^{p'} = |row1|^p atomwise.

    Gradients transform as X -> P X P with P the coordinate swap: the swapped
    components are precomposed with the swapped variables so the rotation
    factor stays orientation-preserving.
    """
    if not p > 1:
        raise PreconditionError("need p > 1")
    pprime = p / (p - 1.0)
    if hasattr(obj, "swap_components"):
        return obj.swap_components()
    if not isinstance(obj, DiscreteMeasure):
        raise PreconditionError("expected a measure or a realized map")
    for a in obj.atoms:
        if a.point.shape != (2, 2):
            raise PreconditionError("duality swap needs 2x2 gradients")
        if not member(a.point, f"Kp:{p!r}", tol):
            raise PreconditionError("atom outside the p-Laplace set")
    out = pushforward(obj, lambda X: _SWAP @ X @ _SWAP)
    for a in out.atoms:
        if not member(a.point, f"Kp:{pprime!r}", tol):
            raise InternalError("swapped atom left the dual set")
    return out
