import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lamstair import measures as ms
from lamstair import staircase as sc
from lamstair import synth as sy
from lamstair.errors import PreconditionError, UnsupportedError, VerdictFailure
from lamstair.matrices import frob

UNIT = sy.box((0.0, 0.0), (1.0, 1.0))


def poly_area(verts):
    v = np.asarray(verts)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


class TestBoxes:
    def test_round_trip(self):
        b = sy.box((0, -1), (2, 3))
        assert b.volume == pytest.approx(8.0)
        x = np.array([1.3, 0.7])
        assert np.allclose(b.to_world(b.to_local(x)), x)
        assert b.contains(x) and not b.contains((5.0, 0.0))

    def test_boundary_param_stays_on_edges(self):
        b = sy.box((0, 0), (1, 2))
        for t in np.linspace(0.0, 0.999, 57):
            z = b.to_local(b.boundary_point(t))
            # a perimeter point pins at least one local coordinate at its half
            assert min(abs(abs(z[0]) - b.half[0]), abs(abs(z[1]) - b.half[1])) < 1e-12
            assert abs(z[0]) <= b.half[0] + 1e-12 and abs(z[1]) <= b.half[1] + 1e-12

    def test_bad_inputs(self):
        with pytest.raises(PreconditionError):
            sy.box((0, 0), (0, 1))
        with pytest.raises(PreconditionError):
            sy.OBox((0, 0), (1, 1), [[1, 1], [0, 1]])


class TestRoof:
    def test_symmetric_halves(self):
        # equal fractions by symmetry of the two gradients
        A1 = np.array([[1.0, 0.0], [2.0, 0.0]])
        m = sy.roof(np.zeros((2, 2)), 0.0, A1, -A1, 0.5, UNIT, eps=0.05)
        f1 = m.volume_of(A1)
        f2 = m.volume_of(-A1)
        assert f1 == pytest.approx(f2)
        assert 0.5 * 0.95 <= f1 <= 0.5 * 1.05

    @pytest.mark.parametrize("lam", [0.3, 0.5, 0.7])
    def test_fraction_bounds(self, lam):
        A1 = np.diag([1.0, 1.0])
        A2 = np.diag([-1.0, 1.0])
        A = lam * A1 + (1 - lam) * A2
        m = sy.roof(A, 0.0, A1, A2, lam, UNIT, eps=0.05)
        for Ai, li in ((A1, lam), (A2, 1 - lam)):
            f = m.volume_of(Ai) / UNIT.volume
            assert (1 - 0.05) * li <= f <= (1 + 0.05) * li
        assert m.grad_bound() <= max(frob(A1), frob(A2)) + 1e-12

    def test_boundary_and_continuity(self):
        A1 = np.diag([1.0, 1.0])
        A2 = np.diag([-1.0, 1.0])
        A = 0.3 * A1 + 0.7 * A2
        m = sy.roof(A, (0.5, -0.2), A1, A2, 0.3, UNIT, eps=0.05)
        rep = sy.verify_map(m, sample_budget=4000)
        assert rep.boundary_max <= 1e-9
        assert rep.continuity_max <= rep.grad_bound * (1 + 1e-9)
        assert rep.grad_samples_max <= rep.grad_bound + 1e-12

    def test_gradient_distribution_shape(self):
        A1 = np.diag([1.0, 1.0])
        A2 = np.diag([-1.0, 1.0])
        A = 0.4 * A1 + 0.6 * A2
        m = sy.roof(A, 0.0, A1, A2, 0.4, UNIT, eps=0.1)
        nu, res = sy.gradient_distribution(m)
        assert res == 0.0
        main = (float(nu.atoms[nu.find(A1)].weight)
                + float(nu.atoms[nu.find(A2)].weight))
        assert 1.0 - main <= 0.1

    def test_rotated_direction(self):
        th = 0.6
        R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        A1 = np.diag([1.0, 1.0]) @ R
        A2 = np.diag([-1.0, 1.0]) @ R
        lam = 0.35
        A = lam * A1 + (1 - lam) * A2
        m = sy.roof(A, 0.0, A1, A2, lam, UNIT, eps=0.1)
        assert m.residual_volume <= 0.05 * UNIT.volume
        for Ai, li in ((A1, lam), (A2, 1 - lam)):
            f = m.volume_of(Ai) / UNIT.volume
            assert (1 - 0.1) * li <= f <= (1 + 0.1) * li
        rep = sy.verify_map(m, sample_budget=1000)
        assert rep.boundary_max <= 1e-9

    def test_invalid_inputs(self):
        A1 = np.diag([1.0, 1.0])
        A2 = np.diag([-1.0, -1.0])  # rank-two difference
        with pytest.raises(PreconditionError):
            sy.roof(0.5 * (A1 + A2), 0.0, A1, A2, 0.5, UNIT, eps=0.1)
        A2 = np.diag([-1.0, 1.0])
        with pytest.raises(PreconditionError):
            sy.roof(0.5 * (A1 + A2), 0.0, A1, A2, 0.5, UNIT, eps=0.0)
        with pytest.raises(PreconditionError):
            sy.roof(A1, 0.0, A1, A2, 0.5, UNIT, eps=0.1)  # wrong combination

    def test_cell_volumes_sum(self):
        A1 = np.diag([1.0, 1.0])
        A2 = np.diag([-1.0, 1.0])
        A = 0.5 * (A1 + A2)
        m = sy.roof(A, 0.0, A1, A2, 0.5, UNIT, eps=0.2)
        cells = m.cells()
        assert sum(poly_area(c.vertices) for c in cells) == pytest.approx(1.0)
        # cell offsets reproduce the map on their region
        c = cells[0]
        x = np.mean(np.asarray(c.vertices), axis=0)
        assert np.allclose(m.evaluate(x), c.A @ x + c.b)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.1, 0.9), st.floats(-2.0, 2.0), st.floats(0.2, 2.0),
           st.integers(0, 3))
    def test_conservation_property(self, lam, a, s, quarter):
        # axis-aligned lamination direction, arbitrary rank-one amplitude
        th = quarter * math.pi / 2
        R = np.array([[math.cos(th), -math.sin(th)],
                      [math.sin(th), math.cos(th)]])
        eta = R @ np.array([s, a / 2.0])
        A1 = np.outer(eta, [1.0, 0.0])
        A2 = -A1
        A = lam * A1 + (1 - lam) * A2
        m = sy.roof(A, 0.0, A1, A2, lam, UNIT, eps=0.1)
        vols = sum(va.vol for va in m.distribution())
        assert vols == pytest.approx(UNIT.volume)
        x = UNIT.boundary_point(0.37)
        assert np.allclose(m.evaluate(x), A @ x, atol=1e-12)


class TestFiniteLaminate:
    def test_dirac_is_affine(self):
        A = np.array([[1.0, 2.0], [0.0, 1.0]])
        m = sy.realize_finite_laminate(ms.dirac(A), UNIT, eps=0.1)
        nu, res = m.gradient_distribution()
        assert len(nu) == 1 and res == 0.0
        x = np.array([0.2, 0.9])
        assert np.allclose(m.evaluate(x), A @ x)

    def test_uncertified_rejected(self):
        nu = ms.DiscreteMeasure([ms.Atom(0.5, np.eye(2)), ms.Atom(0.5, -np.eye(2))])
        with pytest.raises(PreconditionError):
            sy.realize_finite_laminate(nu, UNIT, eps=0.1)

    def test_first_level_fractions(self):
        spec = sc.example_staircase("det1", {"a": [2, 2]})
        nu = sc.build_truncation(spec, 1)
        m = sy.realize_finite_laminate(nu, UNIT, eps=0.1)
        gd, res = m.gradient_distribution()
        off = res
        for a in gd.atoms:
            i = nu.find(a.point)
            if i is None:
                off += float(a.weight)
            else:
                w = float(nu.atoms[i].weight)
                assert (1 - 0.1) * w <= float(a.weight) <= (1 + 0.1) * w
        assert off <= 0.1

    @pytest.mark.parametrize("eps", [0.2, 0.1, 0.05])
    def test_tv_convergence(self, eps):
        spec = sc.example_staircase("det1", {"a": [2, 3]})
        nu = sc.build_truncation(spec, 2)
        m = sy.realize_finite_laminate(nu, UNIT, eps=eps)
        gd, res = m.gradient_distribution()
        tv = res
        seen = 0.0
        for a in nu.atoms:
            i = gd.find(a.point)
            got = float(gd.atoms[i].weight) if i is not None else 0.0
            tv += abs(got - float(a.weight))
            seen += got
        tv += max(gd.mass - seen, 0.0)
        assert tv <= eps

    def test_boundary_exact(self):
        spec = sc.example_staircase("det1", {"a": [2, 2]})
        nu = sc.build_truncation(spec, 1)
        m = sy.realize_finite_laminate(nu, UNIT, b=(1.0, -1.0), eps=0.1)
        rep = sy.verify_map(m, sample_budget=2000)
        assert rep.boundary_max <= 1e-9


class TestStaircaseRealization:
    def test_reference_budget(self):
        spec = sc.example_staircase("det1", {"a": [2, 2]})
        m = sy.realize_staircase(spec, 6, UNIT, eta=0.1, s_moment=4.0)
        nu6 = sc.build_truncation(spec, 6)
        for a in nu6.atoms:
            got = m.volume_of(a.point, flags=("good", "inductive")) / UNIT.volume
            assert abs(math.log(got / float(a.weight))) <= 0.1
        assert m.error_moment(4.0) <= 0.1 * UNIT.volume * (1 - 2.0 ** -6)
        ind = sum(va.vol for va in m.distribution() if va.flag == "inductive")
        beta6 = float(sc.betas(spec, 6)[-1])
        assert math.exp(-0.1) * beta6 <= ind / UNIT.volume <= math.exp(0.1) * beta6

    def test_single_level_matches_laminate(self):
        spec = sc.example_staircase("det1", {"a": [2, 2]})
        m = sy.realize_staircase(spec, 1, UNIT, eta=0.2)
        nu = sc.build_truncation(spec, 1)
        for a in nu.atoms:
            got = m.volume_of(a.point, flags=("good", "inductive")) / UNIT.volume
            assert abs(math.log(got / float(a.weight))) <= 0.2

    def test_tail_within_factor(self):
        spec = sc.example_staircase("det1", {"a": [2, 2]})
        m = sy.realize_staircase(spec, 6, UNIT, eta=0.1)
        gd, _ = m.gradient_distribution()
        nu6 = sc.build_truncation(spec, 6)
        for t in (1.0, 3.0, 10.0, 40.0):
            expect = ms.tail_mass(nu6, t)
            got = sum(float(a.weight) for a in gd.atoms
                      if frob(a.point) > t and nu6.find(a.point) is not None)
            if expect > 0:
                assert got >= math.exp(-0.1) * expect
                assert got <= math.exp(0.1) * expect

    def test_cell_budget_guard(self):
        spec = sc.example_staircase("det1", {"a": [2, 2]})
        m = sy.realize_staircase(spec, 6, UNIT, eta=0.1)
        with pytest.raises(UnsupportedError):
            m.cells(max_cells=100)


def det1_builder(A_seed, dom, b, slack_frac, inductive_frac, sup_budget, alpha,
                 r=1.5):
    a = np.diag(np.asarray(A_seed, dtype=float))
    spec = sc.example_staircase("det1", {"a": a.tolist(), "unchecked": True})
    growth = 1.0 + np.linalg.norm(A_seed) ** r
    N = 1
    while True:
        bN = float(sc.betas(spec, N)[-1])
        AN = spec.step(N).A_next
        if bN * (1.0 + np.linalg.norm(AN) ** r) <= inductive_frac * growth:
            break
        N += 1
        if N > 200:
            raise RuntimeError("no admissible truncation depth")
    eta = min(0.9, 2.0 * slack_frac * growth)
    m = sy.realize_staircase(spec, N, dom, b=b, eta=eta,
                             delta=sup_budget if sup_budget > 0 else math.inf,
                             s_moment=r)
    return m.root


class TestReduceExact:
    def test_round_budgets(self):
        A0 = np.diag([3.0, 3.0])
        pam, reports = sy.reduce_exact(det1_builder, UNIT, A0, 0.0, delta=0.5,
                                       alpha=0.5, depth=6, p=2.0, M=8.0, r=1.5)
        assert len(reports) == 6
        for rr in reports:
            assert rr.error_moment <= 2.0 ** -rr.round * UNIT.volume
            assert rr.tail_constant <= 2.0 * 8.0 ** 2
        assert reports[-1].error_moment <= 2.0 ** -6 * UNIT.volume
        assert pam.sup_dev() <= 0.5

    def test_single_round_is_builder_output(self):
        A0 = np.diag([2.0, 2.0])
        pam, reports = sy.reduce_exact(det1_builder, UNIT, A0, 0.0, delta=1.0,
                                       alpha=0.5, depth=1, p=2.0, M=8.0, r=1.5)
        assert len(reports) == 1
        assert reports[0].patched_slots == 1

    def test_contract_violation_detected(self):
        def lying_builder(A_seed, dom, b, slack_frac, inductive_frac,
                          sup_budget, alpha):
            # ignores its budgets: returns a single inductive cell at a
            # gradient too large for the promised moment bound
            big = 10.0 * np.asarray(A_seed, dtype=float)
            return sy.SlotMap(dom, big, b, flag="inductive")

        with pytest.raises(VerdictFailure) as exc:
            sy.reduce_exact(lying_builder, UNIT, np.diag([3.0, 3.0]), 0.0,
                            delta=1.0, alpha=0.5, depth=2, p=2.0, M=8.0, r=1.5)
        assert "round" in str(exc.value)


class TestExtendedRealization:
    def test_pure_seed(self):
        ext = sc.extended_measure("elliptic", np.diag([-1.0, 1.0]), {"K": 3.0})
        m = sy.realize_extended(ext, UNIT, delta=0.1, depth=3)
        ind = sum(va.vol for va in m.distribution() if va.flag == "inductive")
        assert ind / UNIT.volume == pytest.approx(ext.residual_mass(3), rel=0.2)
        assert m.residual_volume == 0.0

    def test_member_seed_affine(self):
        ext = sc.extended_measure("elliptic", np.diag([2.0, 6.0]), {"K": 3.0})
        m = sy.realize_extended(ext, UNIT, delta=0.1, depth=3)
        nu, res = m.gradient_distribution()
        assert len(nu) == 1 and res == 0.0

    def test_generic_seed_with_rotated_cover(self):
        rng = np.random.default_rng(0)
        A = rng.uniform(-2.0, 2.0, size=(2, 2))
        ext = sc.extended_measure("elliptic", A, {"K": 3.0})
        m = sy.realize_extended(ext, UNIT, delta=0.2, depth=2)
        nu, res = m.gradient_distribution()
        assert nu.mass + res == pytest.approx(1.0)
        assert res <= 0.05
        rep = sy.verify_map(m, sample_budget=500)
        assert rep.boundary_max <= 1e-9
        assert rep.continuity_max <= rep.grad_bound * (1 + 1e-9)


class TestSwap:
    def test_swap_consistency(self):
        ext = sc.extended_measure("elliptic", np.diag([-1.0, 1.0]), {"K": 3.0})
        m = sy.realize_extended(ext, UNIT, delta=0.1, depth=2)
        sw = m.swap_components()
        P = np.array([[0.0, 1.0], [1.0, 0.0]])
        x = np.array([0.31, 0.64])
        assert np.allclose(sw.evaluate(x), P @ m.evaluate(P @ x))
        assert np.allclose(sw.gradient_at(x), P @ m.gradient_at(P @ x) @ P)
        nu0, _ = m.gradient_distribution()
        nu1, _ = sw.gradient_distribution()
        assert nu1.mass == pytest.approx(nu0.mass)


class TestVerifyAffine:
    def test_affine_all_zero(self):
        A = np.array([[1.0, 2.0], [3.0, 4.0]])
        m = sy.realize_finite_laminate(ms.dirac(A), UNIT, eps=0.1)
        rep = sy.verify_map(m, sample_budget=500)
        assert rep.boundary_max == 0.0
        # second differences of an affine map vanish up to float cancellation
        assert rep.continuity_max <= 1e-5 * (1 + rep.grad_bound)
        assert rep.holder_estimate <= 1e-12
