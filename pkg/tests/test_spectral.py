import numpy as np
import pytest

from gridflow import errors, grid_model, spectral
from gridflow.spectral import (
    choose_subspace_dim, dk_bound, eigendecompose_spd, separation_constants,
    spectral_energy_fraction, subspace_distance,
)


class TestEigendecompose:
    def test_identity(self):
        basis = eigendecompose_spd(np.eye(2))
        assert np.allclose(basis.values, [1.0, 1.0])
        assert np.allclose(basis.vectors.T @ basis.vectors, np.eye(2))

    def test_triangle_inverse(self, grid3):
        basis = eigendecompose_spd(grid3.B_inv)
        assert np.allclose(basis.values, [1.0, 1 / 3])
        assert np.allclose(np.abs(basis.vectors[:, 0]),
                           np.ones(2) / np.sqrt(2))
        assert np.allclose(np.abs(basis.vectors[:, 1]),
                           np.ones(2) / np.sqrt(2))

    def test_random_spd_reconstruction(self, rng):
        r = rng.normal(size=(50, 50))
        m = r @ r.T + np.eye(50)
        basis = eigendecompose_spd(m)
        rec = basis.vectors @ np.diag(basis.values) @ basis.vectors.T
        assert np.linalg.norm(rec - m) / np.linalg.norm(m) < 1e-8
        assert (np.diff(basis.values) <= 1e-12).all()

    def test_not_symmetric(self):
        with pytest.raises(errors.NotSymmetric):
            eigendecompose_spd(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_not_positive_definite(self):
        with pytest.raises(errors.NotPositiveDefinite):
            eigendecompose_spd(np.diag([1.0, -0.5]))

    def test_deterministic_signs(self, grid118, rng):
        a = eigendecompose_spd(grid118.B_inv)
        b = eigendecompose_spd(grid118.B_inv.copy())
        assert np.array_equal(a.vectors, b.vectors)


class TestSubspaceDistance:
    def test_identical_is_zero(self, rng):
        q, _ = np.linalg.qr(rng.normal(size=(6, 3)))
        assert subspace_distance(q, q) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_axes(self):
        e1 = np.array([[1.0], [0.0]])
        e2 = np.array([[0.0], [1.0]])
        assert subspace_distance(e1, e2) == pytest.approx(1.0)
        assert subspace_distance(e1, e2, "spectral") == pytest.approx(1.0)

    def test_symmetry_and_rotation_invariance(self, rng):
        qa, _ = np.linalg.qr(rng.normal(size=(8, 3)))
        qb, _ = np.linalg.qr(rng.normal(size=(8, 3)))
        assert subspace_distance(qa, qb) == pytest.approx(
            subspace_distance(qb, qa), abs=1e-12)
        rot, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        assert abs(subspace_distance(qa @ rot, qb)
                   - subspace_distance(qa, qb)) < 1e-9

    def test_range(self, rng):
        qa, _ = np.linalg.qr(rng.normal(size=(10, 4)))
        qb, _ = np.linalg.qr(rng.normal(size=(10, 4)))
        d = subspace_distance(qa, qb)
        assert 0.0 <= d <= 2.0 + 1e-12
        assert subspace_distance(qa, qb, "spectral") <= 1.0 + 1e-12

    def test_not_orthonormal(self, rng):
        bad = rng.normal(size=(5, 2))
        with pytest.raises(errors.NotOrthonormal):
            subspace_distance(bad, bad)

    def test_shape_mismatch(self, rng):
        qa, _ = np.linalg.qr(rng.normal(size=(5, 2)))
        qb, _ = np.linalg.qr(rng.normal(size=(6, 2)))
        with pytest.raises(errors.ShapeMismatch):
            subspace_distance(qa, qb)


class TestSeparationConstants:
    def test_two_eigenvalues(self):
        basis = spectral.EigenBasis(values=np.array([1.0, 1 / 3]),
                                    vectors=np.eye(2))
        sc = separation_constants(basis, 2)
        assert sc.delta == pytest.approx(2 / 3)
        assert sc.delta_prime == pytest.approx(2.0)

    def test_boundary_gap_included(self):
        basis = spectral.EigenBasis(values=np.array([4.0, 2.0, 1.9]),
                                    vectors=np.eye(3))
        sc = separation_constants(basis, 2)
        assert sc.delta == pytest.approx(0.1)          # gap at i = s
        assert sc.delta_interior == pytest.approx(2.0)  # gaps up to s-1 only

    def test_degenerate(self):
        basis = spectral.EigenBasis(values=np.ones(4), vectors=np.eye(4))
        with pytest.raises(errors.DegenerateSpectrum):
            separation_constants(basis, 2)


class TestEnergyFraction:
    def test_hand_value(self):
        basis = spectral.EigenBasis(values=np.array([1.0, 1 / 3]),
                                    vectors=np.eye(2))
        assert spectral_energy_fraction(basis, 1) == pytest.approx(0.75)
        assert spectral_energy_fraction(basis, 2) == pytest.approx(1.0)

    def test_monotone(self, grid118):
        basis = eigendecompose_spd(grid118.B_inv)
        fracs = [spectral_energy_fraction(basis, s) for s in range(1, 118)]
        assert all(b >= a for a, b in zip(fracs, fracs[1:]))

    def test_choice_rule(self, grid118):
        basis = eigendecompose_spd(grid118.B_inv)
        s = choose_subspace_dim(basis)
        assert spectral_energy_fraction(basis, s) >= 0.5
        assert s == 1 or spectral_energy_fraction(basis, s - 1) < 0.5


class TestDkBound:
    def test_triangle_hand_value(self, grid3):
        basis = eigendecompose_spd(grid3.B_inv)
        sc = separation_constants(basis, 1)
        assert dk_bound(grid3, 2, sc) == pytest.approx(1.0)
        # l2 variant: min(2*||D||_2/delta, 4/(x*delta')) = min(2, 2) = 2
        assert dk_bound(grid3, 2, sc, "spectral") == pytest.approx(2.0)

    def test_bridge_raises(self, grid14):
        # line 4-9 side: find a bridge in case14 (7-8 is the only one)
        bridge = None
        for k in range(grid14.n_lines):
            try:
                grid_model.rank_one_inverse_update(grid14, k)
            except errors.BridgeLine:
                bridge = k
                break
        assert bridge is not None
        basis = eigendecompose_spd(grid14.B_inv)
        sc = separation_constants(basis, 2)
        with pytest.raises(errors.BridgeLine):
            dk_bound(grid14, bridge, sc)

    @pytest.mark.parametrize("fixture", ["grid14", "grid118"])
    def test_bound_dominates_distance_everywhere(self, fixture, request):
        """Every non-bridge single outage respects both bound forms."""
        grid = request.getfixturevalue(fixture)
        basis = eigendecompose_spd(grid.B_inv)
        s = choose_subspace_dim(basis)
        sc = separation_constants(basis, s)
        u_s = basis.leading(s)
        checked = 0
        for k in range(grid.n_lines):
            try:
                b_fro = dk_bound(grid, k, sc)
                b_two = dk_bound(grid, k, sc, "spectral")
            except errors.BridgeLine:
                continue
            post = grid_model.apply_outage(grid, {k}).post_grid
            basis_post = eigendecompose_spd(post.B_inv)
            d_fro = subspace_distance(u_s, basis_post.leading(s))
            d_two = subspace_distance(u_s, basis_post.leading(s), "spectral")
            assert d_fro <= b_fro + 1e-9
            assert d_two <= b_two + 1e-9
            checked += 1
        assert checked > 0

    def test_term_structure(self, grid118):
        """The Frobenius bound is exactly min(||D||_F/delta, 2/(x delta'))."""
        basis = eigendecompose_spd(grid118.B_inv)
        sc = separation_constants(basis, 10)
        k = 20
        delta_k, _ = grid_model.rank_one_inverse_update(grid118, k)
        expect = min(np.linalg.norm(delta_k, "fro") / sc.delta,
                     2.0 / (grid118.x[k] * sc.delta_prime))
        assert dk_bound(grid118, k, sc) == pytest.approx(expect, rel=1e-12)


class TestScenarioReport:
    def test_rows_and_bridge_marking(self, grid14):
        s, rows = spectral.outage_scenario_report(grid14, range(grid14.n_lines))
        assert len(rows) == grid14.n_lines
        bridges = [r for r in rows if r.get("bridge")]
        regular = [r for r in rows if not r.get("bridge")]
        assert len(bridges) >= 1
        for r in regular:
            assert r["distance_fro"] <= r["bound_fro"] + 1e-9
            assert {"delta", "delta_prime", "bound_2"} <= set(r)
