"""Atomic measures on matrix space, splitting certificates and tail calculus.

Weights are kept as exact `Fraction`s whenever every input to a construction is
rational (the telescoping residual identities are then checked exactly) and as
floats otherwise.  Atom points are float64 matrices; duplicates are merged on a
1e-12 quantization grid, which the constructions only hit with exact duplicates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    InvalidSplitError,
    NotFoundError,
    InvalidTransformError,
    PreconditionError,
    UnsupportedError,
)
from .matrices import asmatrix, frob, rank

MERGE_TOL = 1e-12
MASS_SLACK = 1e-12

Weight = Fraction | float


def _point_key(P: np.ndarray):
    return (P.shape, tuple(np.round(P, 12).ravel().tolist()))


def _freeze(P: np.ndarray) -> np.ndarray:
    P = np.array(P, dtype=float)
    P.flags.writeable = False
    return P


def _wadd(a: Weight, b: Weight) -> Weight:
    if isinstance(a, Fraction) and isinstance(b, Fraction):
        return a + b
    return float(a) + float(b)


def _wmul(a: Weight, b: Weight) -> Weight:
    if isinstance(a, Fraction) and isinstance(b, Fraction):
        return a * b
    return float(a) * float(b)


@dataclass(frozen=True)
class Atom:
    weight: Weight
    point: np.ndarray

    def __post_init__(self):
        if not float(self.weight) > 0.0:
            raise PreconditionError(f"atom weight must be positive, got {self.weight}")
        object.__setattr__(self, "point", _freeze(asmatrix(self.point)))


@dataclass(frozen=True)
class SplittingStep:
    """target = lam * left + (1 - lam) * right with rank(left - right) = 1."""

    target: np.ndarray
    left: np.ndarray
    right: np.ndarray
    lam: Weight

    def __post_init__(self):
        object.__setattr__(self, "target", _freeze(asmatrix(self.target)))
        object.__setattr__(self, "left", _freeze(asmatrix(self.left)))
        object.__setattr__(self, "right", _freeze(asmatrix(self.right)))

    def validate(self, tol: float = 1e-9, rank_tol: float = 1e-9) -> None:
        if not (0.0 < float(self.lam) < 1.0):
            raise InvalidSplitError(f"split fraction {self.lam} outside (0,1)")
        if self.left.shape != self.right.shape or self.left.shape != self.target.shape:
            raise InvalidSplitError("split matrices have mismatched shapes")
        if rank(self.left - self.right, rank_tol) != 1:
            raise InvalidSplitError("left - right is not rank one")
        recon = float(self.lam) * self.left + (1.0 - float(self.lam)) * self.right
        if frob(self.target - recon) > tol * (1.0 + frob(self.target)):
            raise InvalidSplitError("convex combination does not reproduce target")


class DiscreteMeasure:
    """Finite atomic (sub-)probability measure with an optional splitting certificate."""

    def __init__(self, atoms: Iterable[Atom], certificate: Sequence[SplittingStep] | None = None):
        merged: dict = {}
        order: list = []
        for a in atoms:
            k = _point_key(a.point)
            if k in merged:
                merged[k] = Atom(_wadd(merged[k].weight, a.weight), merged[k].point)
            else:
                merged[k] = a
                order.append(k)
        # canonical order: sorted by point key, for byte-stable outputs
        self.atoms: tuple[Atom, ...] = tuple(merged[k] for k in sorted(order))
        if not self.atoms:
            raise PreconditionError("measure must have at least one atom")
        mass = 0.0
        for a in self.atoms:
            mass += float(a.weight)
        if mass > 1.0 + MASS_SLACK * max(1, len(self.atoms)):
            raise PreconditionError(f"total mass {mass} exceeds 1")
        self.mass = mass
        self.certificate: tuple[SplittingStep, ...] | None = (
            tuple(certificate) if certificate is not None else None
        )

    def __len__(self):
        return len(self.atoms)

    def __iter__(self):
        return iter(self.atoms)

    def find(self, point, tol: float = MERGE_TOL) -> int | None:
        P = asmatrix(point)
        for i, a in enumerate(self.atoms):
            if a.point.shape == P.shape and frob(a.point - P) <= tol * (1.0 + frob(P)):
                return i
        return None


def dirac(point, certificate=None) -> DiscreteMeasure:
    return DiscreteMeasure([Atom(Fraction(1), point)], certificate)


def barycenter(nu: DiscreteMeasure) -> np.ndarray:
    out = np.zeros_like(nu.atoms[0].point)
    for a in nu.atoms:
        out = out + float(a.weight) * a.point
    return out


def elementary_split(nu: DiscreteMeasure, step: SplittingStep, tol: float = 1e-9) -> DiscreteMeasure:
    step.validate(tol)
    idx = nu.find(step.target)
    if idx is None:
        raise NotFoundError("no atom at the split target")
    new_atoms = []
    for i, a in enumerate(nu.atoms):
        if i == idx:
            lam = step.lam
            one_minus = (1 - lam) if isinstance(lam, Fraction) else (1.0 - float(lam))
            new_atoms.append(Atom(_wmul(a.weight, lam), step.left))
            new_atoms.append(Atom(_wmul(a.weight, one_minus), step.right))
        else:
            new_atoms.append(a)
    cert = (list(nu.certificate) + [step]) if nu.certificate is not None else None
    return DiscreteMeasure(new_atoms, cert)


@dataclass
class LaminateReport:
    ok: bool
    messages: list[str] = field(default_factory=list)
    failed_step: int | None = None


def replay_certificate(root, steps: Sequence[SplittingStep], tol: float = 1e-9) -> DiscreteMeasure:
    nu = dirac(root, certificate=[])
    for step in steps:
        nu = elementary_split(nu, step, tol)
    return nu


def verify_laminate(nu: DiscreteMeasure, cert: Sequence[SplittingStep] | None = None,
                    tol: float = 1e-9) -> LaminateReport:
    steps = list(cert if cert is not None else (nu.certificate or ()))
    if not steps:
        if len(nu.atoms) == 1:
            return LaminateReport(True, ["Dirac with empty certificate"])
        return LaminateReport(False, ["no certificate for a non-Dirac measure"])
    root = steps[0].target
    current = dirac(root, certificate=[])
    for i, step in enumerate(steps):
        try:
            current = elementary_split(current, step, tol)
        except (InvalidSplitError, NotFoundError) as exc:
            return LaminateReport(False, [f"step {i}: {exc}"], failed_step=i)
    for a in nu.atoms:
        j = current.find(a.point)
        if j is None:
            return LaminateReport(False, [f"replayed measure misses atom at |X|={frob(a.point):.6g}"])
        if abs(float(current.atoms[j].weight) - float(a.weight)) > tol:
            return LaminateReport(
                False,
                [f"weight mismatch at |X|={frob(a.point):.6g}: "
                 f"{float(current.atoms[j].weight)} vs {float(a.weight)}"])
    if len(current.atoms) != len(nu.atoms):
        return LaminateReport(False, ["replayed measure has extra atoms"])
    if abs(current.mass - nu.mass) > tol:
        return LaminateReport(False, ["mass mismatch after replay"])
    return LaminateReport(True, [f"replayed {len(steps)} steps"])


def pushforward(nu: DiscreteMeasure, T: Callable[[np.ndarray], np.ndarray],
                check_rank_one: bool = False, rank_tol: float = 1e-9) -> DiscreteMeasure:
    atoms = [Atom(a.weight, T(np.asarray(a.point))) for a in nu.atoms]
    cert = None
    if nu.certificate is not None:
        cert = []
        for s in nu.certificate:
            tl, tr = T(np.asarray(s.left)), T(np.asarray(s.right))
            if check_rank_one and rank(tl - tr, rank_tol) != 1:
                raise InvalidTransformError("transform breaks a rank-one connection")
            cert.append(SplittingStep(T(np.asarray(s.target)), tl, tr, s.lam))
    return DiscreteMeasure(atoms, cert)


def scale_weights(nu: DiscreteMeasure, c: Weight) -> list[Atom]:
    return [Atom(_wmul(a.weight, c), a.point) for a in nu.atoms]


def mixture(parts: Sequence[tuple[Weight, DiscreteMeasure]],
            certificate=None) -> DiscreteMeasure:
    atoms: list[Atom] = []
    for w, nu in parts:
        atoms.extend(scale_weights(nu, w))
    return DiscreteMeasure(atoms, certificate)


def tail_mass(nu: DiscreteMeasure, t: float) -> float:
    return sum(float(a.weight) for a in nu.atoms if frob(a.point) > t)


def moment(nu: DiscreteMeasure, q: float, cap: float | None = None) -> float:
    total = 0.0
    for a in nu.atoms:
        r = frob(a.point)
        if cap is None or r <= cap:
            total += float(a.weight) * r ** q
    return total


@dataclass
class TailRow:
    t: float
    tail: float
    upper_env: float | None
    lower_env: float | None
    ok: bool


@dataclass
class TailReport:
    rows: list[TailRow]
    meta: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.ok for r in self.rows)

    def csv_lines(self) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(float(v))
        out = ["t,tail,upper_env,lower_env,verdict"]
        for r in self.rows:
            out.append(f"{fmt(r.t)},{fmt(r.tail)},{fmt(r.upper_env)},{fmt(r.lower_env)},"
                       f"{'pass' if r.ok else 'fail'}")
        return out


def verify_weak_tail(nu: DiscreteMeasure, p: float, M: float, normA: float,
                     side: str = "upper", t_grid: Sequence[float] = (),
                     lower_env: Callable[[float], float] | None = None,
                     slack: float = 0.0) -> TailReport:
    """Compare tails against M^p (1+|A|^p) t^-p above and an optional lower envelope."""
    if p < 1 or M < 1:
        raise PreconditionError("need p >= 1 and M >= 1")
    if side not in ("upper", "lower", "both"):
        raise PreconditionError(f"unknown side {side!r}")
    rows = []
    cu = M ** p * (1.0 + normA ** p)
    for t in t_grid:
        tail = tail_mass(nu, t)
        up = cu * t ** -p if side in ("upper", "both") else None
        lo = lower_env(t) if (lower_env is not None and side in ("lower", "both")) else None
        ok = True
        if up is not None:
            ok = ok and tail <= up + slack
        if lo is not None:
            ok = ok and tail >= lo - slack
        rows.append(TailRow(float(t), tail, up, lo, ok))
    return TailReport(rows, {"p": p, "M": M, "normA": normA, "side": side, "slack": slack})


def fit_upper_constant(nu: DiscreteMeasure, p: float, t_grid: Sequence[float]) -> float:
    """Smallest C with tail(t) <= C t^-p on the grid."""
    best = 0.0
    for t in t_grid:
        best = max(best, tail_mass(nu, t) * t ** p)
    return best


def diamond_compose(nu1: DiscreteMeasure,
                    family: Callable[[int, Atom], DiscreteMeasure],
                    p: float | None = None, q: float | None = None,
                    M1: float | None = None, M2: float | None = None,
                    normA: float | None = None,
                    t_grid: Sequence[float] = (),
                    slack: float = 0.0):
    """Mixture sum_i lambda_i nu''_i over the atoms of nu1.

    With exponents supplied, the composed tail is checked against
    4 (1 + q/|p-q|) (M' M'')^r (1+|A|^r) t^-r, r = min(p, q).  The p = q case
    is rejected: no such envelope exists.
    """
    parts = []
    certs_ok = nu1.certificate is not None
    chained = list(nu1.certificate or ())
    for i, a in enumerate(nu1.atoms):
        nui = family(i, a)
        if abs(nui.mass - 1.0) > 1e-9:
            raise PreconditionError(f"family member {i} is not a probability measure")
        parts.append((a.weight, nui))
        if nui.certificate is None:
            certs_ok = False
        elif certs_ok:
            chained.extend(nui.certificate)
    composed = mixture(parts, certificate=chained if certs_ok else None)
    report = None
    if p is not None or q is not None:
        if p is None or q is None or M1 is None or M2 is None or normA is None:
            raise PreconditionError("envelope check needs p, q, M1, M2 and normA")
        if p == q:
            raise UnsupportedError("no composition envelope exists for p == q")
        r = min(p, q)
        C = 4.0 * (1.0 + q / abs(p - q))
        cu = C * (M1 * M2) ** r * (1.0 + normA ** r)
        rows = []
        for t in t_grid:
            tail = tail_mass(composed, t)
            up = cu * t ** -r
            rows.append(TailRow(float(t), tail, up, None, tail <= up + slack))
        report = TailReport(rows, {"p": p, "q": q, "r": r, "C": C, "M1": M1, "M2": M2,
                                   "normA": normA})
    return composed, report


def weight_norm(normA: float, p: float) -> float:
    """(1 + |A|^p)^(1/p); monotone decreasing in p for fixed A."""
    if p == float("inf"):
        return max(1.0, normA)
    return (1.0 + normA ** p) ** (1.0 / p)


def strong_from_weak(p: float, q: float, M: float, normA: float) -> float:
    """L^q-moment bound per unit volume implied by a weak-L^p tail, q < p."""
    if not (1 <= q < p):
        raise PreconditionError(f"need 1 <= q < p, got q={q}, p={p}")
    return 2.0 * (q / (p - q)) ** (q / p) * M ** q * (1.0 + normA ** q)
