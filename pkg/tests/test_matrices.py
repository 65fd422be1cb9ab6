import numpy as np
import pytest

from lamstair import matrices as mx
from lamstair.errors import PreconditionError


def rot(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


class TestRank:
    def test_diag_rank_one(self):
        assert mx.rank(np.diag([1.0, 0, 0, 0])) == 1

    def test_rank_one_product(self):
        A = np.outer([1.0, 1.0], [1.0, 0.0])
        assert mx.rank(A) == 1

    def test_first_splitting_difference(self):
        # difference of the two atoms produced by the first det-1 split at diag(2,2)
        assert mx.rank(np.diag([0.5, 2.0]) - np.diag([4.0, 2.0])) == 1

    def test_zero(self):
        assert mx.rank(np.zeros((3, 3))) == 0

    def test_invariance_under_orthogonal_factors(self):
        rng = np.random.default_rng(7)
        for d in range(1, 7):
            for m in range(1, 7):
                for _ in range(6):
                    A = rng.standard_normal((d, m))
                    U, _ = np.linalg.qr(rng.standard_normal((d, d)))
                    V, _ = np.linalg.qr(rng.standard_normal((m, m)))
                    r = mx.rank(A)
                    assert mx.rank(A.T) == r
                    assert mx.rank(U @ A @ V) == r

    def test_nonfinite_rejected(self):
        with pytest.raises(PreconditionError):
            mx.rank(np.array([[np.nan, 0.0], [0.0, 1.0]]))


class TestRankOneConnected:
    def test_equal_matrices(self):
        A = np.diag([1.0, 2.0])
        assert not mx.rank_one_connected(A, A)

    def test_unit_rank_one_pair(self):
        e1e1 = np.outer([1.0, 0.0], [1.0, 0.0])
        e2e1 = np.outer([0.0, 1.0], [1.0, 0.0])
        assert mx.rank_one_connected(e1e1, e2e1)

    def test_rank_two_difference(self):
        assert not mx.rank_one_connected(np.diag([1.0, 1.0]), np.diag([2.0, 2.0]))

    def test_shape_mismatch(self):
        with pytest.raises(PreconditionError):
            mx.rank_one_connected(np.eye(2), np.eye(3))


class TestSignedBlockSvd:
    def check(self, A, n):
        R, D, Q = mx.signed_block_svd(A)
        assert mx.frob(A - R @ D @ Q.T) <= 1e-10 * (1 + mx.frob(A))
        assert abs(np.linalg.det(R) - 1) < 1e-9
        assert abs(np.linalg.det(Q) - 1) < 1e-9
        # both factors block-diagonal and orthogonal
        assert mx.member(R, "L1", 1e-9)
        assert mx.member(Q, "L1", 1e-9)
        assert mx.frob(R @ R.T - np.eye(2 * n)) < 1e-9
        assert mx.frob(D - np.diag(np.diag(D))) < 1e-12

    def test_identity(self):
        self.check(np.eye(2), 1)

    def test_signed_diagonal(self):
        self.check(np.diag([2.0, -3.0]), 1)

    def test_rotation_block(self):
        A = np.zeros((4, 4))
        A[:2, :2] = rot(0.3)
        A[2:, 2:] = np.eye(2)
        self.check(A, 2)

    def test_random_blocks(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            A = np.zeros((4, 4))
            A[:2, :2] = rng.standard_normal((2, 2))
            A[2:, 2:] = rng.standard_normal((2, 2))
            self.check(A, 2)

    def test_off_diagonal_rejected(self):
        A = np.ones((2, 2))
        with pytest.raises(PreconditionError):
            mx.signed_block_svd(A)


class TestMember:
    def test_sigma(self):
        assert mx.member(np.diag([1.0, 1.0]), "Sigma")
        assert not mx.member(np.diag([2.0, 2.0]), "Sigma")

    def test_split_sets(self):
        A = np.outer([1.0, 1.0], [1.0, 0.0])
        assert not mx.member(A, "L")
        assert mx.member(np.diag([3.0, 0.5]), "L1")
        assert mx.member(np.array([[0.0, 2.0], [5.0, 0.0]]), "L2")
        assert mx.member(np.diag([3.0, 0.5]), "L")

    def test_elliptic_set(self):
        K = 3.0
        for x in (0.0, 0.5, 2.0):
            assert mx.member(np.diag([x, K * x]), f"E:{K}")
        assert mx.member(np.diag([1.0, K]) @ rot(1.1), f"E:{K}")
        assert not mx.member(np.diag([1.0, 2.0]), f"E:{K}")
        # negative determinant excluded
        assert not mx.member(np.diag([-1.0, K]), f"E:{K}")

    def test_plaplace_set(self):
        p = 1.5
        lam = 2.7
        assert mx.member(np.diag([lam, lam ** (p - 1)]) @ rot(0.4), f"Kp:{p}")
        assert mx.member(-np.diag([lam, lam ** (p - 1)]), f"Kp:{p}")
        assert not mx.member(np.diag([lam, lam]), f"Kp:{p}")

    def test_diag_sets(self):
        assert mx.member(np.diag([2.0, -2.5]), "D>=2")
        assert not mx.member(np.diag([2.0, 1.5]), "D>=2")
        assert mx.member(np.diag([2.0, 1.5]), "D")

    def test_rank_set(self):
        assert mx.member(np.outer([1.0, 1.0], [1.0, 0.0]), "rank<=1")
        assert not mx.member(np.eye(2), "rank<=1")

    def test_intersection(self):
        A = np.diag([2.0, 0.5])
        assert mx.member(A, "L1&Sigma")
        assert mx.member(A, "L1") and mx.member(A, "Sigma")
        assert not mx.member(np.diag([2.0, 2.0]), "L1&Sigma")


class TestConformalSplit:
    def test_identity(self):
        P, M = mx.conformal_split(np.eye(2))
        assert mx.frob(P - np.eye(2)) == 0
        assert mx.frob(M) == 0

    def test_pure_anticonformal(self):
        A = np.diag([1.0, -1.0])
        P, M = mx.conformal_split(A)
        assert mx.frob(P) == 0
        assert mx.frob(M - A) == 0

    def test_generic(self):
        A = np.array([[1.0, 2.0], [3.0, 4.0]])
        P, M = mx.conformal_split(A)
        assert np.allclose(P, 0.5 * np.array([[5.0, -1.0], [1.0, 5.0]]))
        assert np.allclose(M, 0.5 * np.array([[-3.0, 5.0], [5.0, 3.0]]))
        assert np.allclose(P + M, A)

    def test_orthogonality(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            A = rng.standard_normal((2, 2))
            P, M = mx.conformal_split(A)
            # conformal/anti-conformal forms
            assert abs(P[0, 0] - P[1, 1]) < 1e-14 and abs(P[0, 1] + P[1, 0]) < 1e-14
            assert abs(M[0, 0] + M[1, 1]) < 1e-14 and abs(M[0, 1] - M[1, 0]) < 1e-14
            assert abs(mx.frob(A) ** 2 - mx.frob(P) ** 2 - mx.frob(M) ** 2) < 1e-12
