import numpy as np
import pytest
import scipy.sparse as sp

from romocp import pod


def random_spd(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n))
    return sp.csr_matrix(a @ a.T + n * np.eye(n))


def make_set(n=12, m=5, seed=0, ip=None):
    rng = np.random.default_rng(seed)
    snaps = rng.standard_normal((n, m))
    ip = random_spd(n, seed + 1) if ip is None else ip
    return snaps, ip


class TestCorrelation:
    def test_identical_unit_snapshots(self):
        ip = sp.identity(6, format="csr")
        s = np.ones(6) / np.sqrt(6.0)
        snaps = np.tile(s[:, None], (1, 4))
        corr = pod.compute_correlation(snaps, ip)
        np.testing.assert_allclose(corr, np.full((4, 4), 0.25), atol=1e-14)

    def test_orthonormal_pair(self):
        ip = sp.identity(4, format="csr")
        snaps = np.eye(4)[:, :2]
        corr = pod.compute_correlation(snaps, ip)
        np.testing.assert_allclose(corr, np.diag([0.5, 0.5]), atol=1e-15)

    def test_against_double_loop(self):
        snaps, ip = make_set(10, 3, seed=2)
        corr = pod.compute_correlation(snaps, ip)
        dense_ip = ip.toarray()
        oracle = np.empty((3, 3))
        for a in range(3):
            for b in range(3):
                oracle[a, b] = snaps[:, a] @ dense_ip @ snaps[:, b] / 3.0
        np.testing.assert_allclose(corr, oracle, atol=1e-13 * abs(oracle).max())

    def test_scalar_weight(self):
        snaps = np.array([[1.0, 2.0, -1.0]])
        corr = pod.compute_correlation(snaps, 0.5)
        np.testing.assert_allclose(corr, 0.5 * np.outer([1, 2, -1], [1, 2, -1]) / 3.0)


class TestPodBasis:
    def test_single_snapshot(self):
        snaps, ip = make_set(8, 1, seed=3)
        basis = pod.pod_basis(pod.compute_correlation(snaps, ip), snaps, 1, ip)
        norm = pod.ip_norm(ip, snaps[:, 0])
        np.testing.assert_allclose(np.abs(basis.vectors[:, 0]),
                                   np.abs(snaps[:, 0] / norm), rtol=1e-12)
        assert basis.eigenvalues[0] == pytest.approx(norm ** 2, rel=1e-12)

    def test_identical_snapshots_rank_one(self):
        rng = np.random.default_rng(4)
        s = rng.standard_normal(9)
        snaps = np.tile(s[:, None], (1, 6))
        ip = sp.identity(9, format="csr")
        corr = pod.compute_correlation(snaps, ip)
        basis = pod.pod_basis(corr, snaps, 1, ip)
        assert basis.eigenvalues[0] == pytest.approx(s @ s, rel=1e-12)
        np.testing.assert_allclose(basis.eigenvalues[1:], 0.0, atol=1e-12)
        # asking for more than the rank flags the deficiency
        all_of_it = pod.pod_basis(corr, snaps, 6, ip)
        assert all_of_it.rank_deficient
        assert all_of_it.vectors.shape[1] == 1

    def test_gram_orthonormality(self):
        snaps, ip = make_set(20, 8, seed=5)
        corr = pod.compute_correlation(snaps, ip)
        basis = pod.pod_basis(corr, snaps, 8, ip)
        gram = basis.vectors.T @ (ip @ basis.vectors)
        np.testing.assert_allclose(gram, np.eye(8), atol=1e-10)

    def test_eigenvalue_ordering_and_energy(self):
        snaps, ip = make_set(30, 10, seed=6)
        corr = pod.compute_correlation(snaps, ip)
        basis = pod.pod_basis(corr, snaps, 4, ip)
        lam = basis.eigenvalues
        assert (np.diff(lam) <= 1e-12).all()
        assert (lam >= 0).all()
        energy = sum(pod.ip_norm(ip, snaps[:, m]) ** 2 for m in range(10)) / 10.0
        assert lam.sum() == pytest.approx(energy, rel=1e-10)

    @pytest.mark.parametrize("n_retain", list(range(1, 9)))
    def test_truncation_error_identity(self, n_retain):
        snaps, ip = make_set(25, 8, seed=7)
        corr = pod.compute_correlation(snaps, ip)
        basis = pod.pod_basis(corr, snaps, n_retain, ip)
        errors = pod.projection_error(basis.vectors, ip, snaps)
        lhs = (errors ** 2).mean()
        rhs = basis.eigenvalues[n_retain:].sum()
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-12)

    def test_input_validation(self):
        snaps, ip = make_set(6, 3, seed=8)
        corr = pod.compute_correlation(snaps, ip)
        with pytest.raises(ValueError):
            pod.pod_basis(corr, snaps, 0, ip)
        with pytest.raises(ValueError):
            pod.pod_basis(corr, snaps, 4, ip)
        with pytest.raises(ValueError):
            pod.pod_basis(corr[:2, :2], snaps, 2, ip)


def qg_style_set(seed=9, n=14, m=6):
    rng = np.random.default_rng(seed)
    ip = random_spd(n, seed)
    variables = {name: rng.standard_normal((n, m)) for name in ("psi", "q", "u")}
    ips = {name: ip for name in variables}
    return pod.SnapshotSet(variables, ips, rng.uniform(size=(m, 2)))


class TestPartitioned:
    def test_one_basis_per_variable(self):
        snaps = qg_style_set()
        bases = pod.pod_partitioned(snaps, 4)
        assert set(bases) == {"psi", "q", "u"}
        for name, basis in bases.items():
            gram = basis.vectors.T @ (snaps.inner_products[name] @ basis.vectors)
            np.testing.assert_allclose(gram, np.eye(4), atol=1e-10)

    def test_scalar_control_passthrough(self):
        rng = np.random.default_rng(10)
        variables = {"y": rng.standard_normal((9, 5)), "u": rng.standard_normal((1, 5))}
        ips = {"y": random_spd(9, 11), "u": 0.04}
        snaps = pod.SnapshotSet(variables, ips, rng.uniform(size=(5, 3)),
                                scalar_variables=frozenset({"u"}))
        bases = pod.pod_partitioned(snaps, 3)
        assert bases["u"].scalar
        np.testing.assert_array_equal(bases["u"].vectors, [[1.0]])
        assert not bases["y"].scalar

    def test_full_retention_reproduces_snapshots(self):
        snaps = qg_style_set(seed=12)
        bases = pod.pod_partitioned(snaps, snaps.count)
        for name, basis in bases.items():
            errs = pod.projection_error(basis.vectors, snaps.inner_products[name],
                                        snaps.variables[name])
            norms = [pod.ip_norm(snaps.inner_products[name], snaps.variables[name][:, m])
                     for m in range(snaps.count)]
            assert (errs <= 1e-10 * max(norms)).all()


class TestMonolithic:
    def test_single_snapshot_is_normalized_stack(self):
        rng = np.random.default_rng(13)
        variables = {"y": rng.standard_normal((7, 1)), "p": rng.standard_normal((7, 1))}
        ip = sp.identity(7, format="csr")
        snaps = pod.SnapshotSet(variables, {"y": ip, "p": ip}, np.zeros((1, 1)))
        basis = pod.pod_monolithic(snaps, 1)
        stacked = np.vstack([variables["y"], variables["p"]])[:, 0]
        np.testing.assert_allclose(np.abs(basis.vectors[:, 0]),
                                   np.abs(stacked / np.linalg.norm(stacked)), rtol=1e-12)

    def test_matches_dense_eigensolve(self):
        snaps = qg_style_set(seed=14)
        basis = pod.pod_monolithic(snaps, snaps.count)
        stacked = np.vstack([snaps.variables[n] for n in snaps.names])
        blocks = sp.block_diag([snaps.inner_products[n] for n in snaps.names])
        corr = stacked.T @ blocks @ stacked / snaps.count
        oracle = np.sort(np.linalg.eigvalsh(0.5 * (corr + corr.T)))[::-1]
        np.testing.assert_allclose(basis.eigenvalues, np.clip(oracle, 0, None),
                                   rtol=1e-10, atol=1e-12)

    def test_identical_snapshots_give_same_subspaces(self):
        # degenerate input: every variable carries the same snapshot family
        rng = np.random.default_rng(15)
        shared = rng.standard_normal((10, 4))
        ip = random_spd(10, 16)
        variables = {"a": shared.copy(), "b": shared.copy(), "c": shared.copy()}
        snaps = pod.SnapshotSet(variables, {k: ip for k in variables},
                                np.zeros((4, 1)))
        parts = pod.pod_partitioned(snaps, 3)
        mono = pod.pod_monolithic(snaps, 3)
        mono_blocks = pod.split_monolithic(mono, snaps)
        for name in variables:
            part_err = pod.projection_error(parts[name].vectors, ip, shared)
            block, _ = pod.orthonormalize(mono_blocks[name], ip)
            mono_err = pod.projection_error(block, ip, shared)
            np.testing.assert_allclose(part_err, mono_err, atol=1e-10)


def test_zero_snapshots_give_empty_basis():
    ip = sp.identity(5, format="csr")
    snaps = np.zeros((5, 3))
    basis = pod.pod_basis(pod.compute_correlation(snaps, ip), snaps, 2, ip)
    assert basis.vectors.shape == (5, 0)
    assert basis.rank_deficient
    np.testing.assert_array_equal(basis.eigenvalues, 0.0)


def test_orthonormalize_drops_dependent_columns():
    rng = np.random.default_rng(17)
    ip = sp.identity(6, format="csr")
    a = rng.standard_normal(6)
    b = rng.standard_normal(6)
    vectors = np.column_stack([a, 2.0 * a, b, a + b])
    basis, kept = pod.orthonormalize(vectors, ip)
    assert basis.shape[1] == 2
    assert kept == [0, 2]
