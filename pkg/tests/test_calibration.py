import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_psd
from oracles import classic_jacobi
from sals.calibration import (
    Covariance,
    EigensolverError,
    ProjectionMatrix,
    accumulate_covariance,
    captured_energy,
    compute_joint_projection,
    compute_per_head_projection,
    fix_signs,
    jacobi_eigh,
)
from sals.config import AttentionConfig
from sals.synthetic import SyntheticSpec, generate_keys


def cov_of(c):
    c = np.asarray(c, dtype=np.float64)
    return Covariance(c.shape[0], c, 1, np.zeros(c.shape[0]))


def test_single_basis_row():
    acc = accumulate_covariance(Covariance.empty(4), np.array([[1.0, 0, 0, 0]]))
    assert np.array_equal(acc.C, np.diag([1.0, 0, 0, 0]))
    assert acc.samples_seen == 1


def test_batches_are_additive(rng):
    k = rng.standard_normal((300, 8))
    whole = Covariance.from_keys(k)
    parts = accumulate_covariance(accumulate_covariance(Covariance.empty(8), k[:100]), k[100:])
    merged = Covariance.from_keys(k[200:]) + Covariance.from_keys(k[:200])
    for c in (parts, merged):
        assert np.allclose(c.C, whole.C, rtol=1e-6, atol=1e-9)
        assert c.samples_seen == 300


def test_dim_mismatch():
    with pytest.raises(ValueError):
        accumulate_covariance(Covariance.empty(4), np.ones((2, 3)))


def test_sample_covariance_eigs():
    cfg = AttentionConfig(num_heads=1, head_dim=4, latent_rank=2)
    keys = generate_keys(SyntheticSpec(10000, [4, 1, 0.1, 0.01], seed=9), cfg)
    acc = Covariance.from_keys(keys)
    w = np.sort(np.linalg.eigvalsh(acc.C / acc.samples_seen))[::-1]
    assert np.allclose(w, [4, 1, 0.1, 0.01], rtol=0.1)


def test_centered_matrix(rng):
    k = rng.standard_normal((50, 3)) + 5.0
    acc = Covariance.from_keys(k)
    centered = (k - k.mean(0)).T @ (k - k.mean(0))
    assert np.allclose(acc.matrix(centered=True), centered, atol=1e-9)
    assert np.allclose(acc.matrix(), k.T @ k)


# --- eigensolver ----------------------------------------------------------

def test_jacobi_matches_classic_oracle(rng):
    a = random_psd(rng, 8)
    w, v = jacobi_eigh(a)
    w_ref, _ = classic_jacobi(a)
    assert np.allclose(w, w_ref, rtol=1e-6, atol=1e-12)
    assert np.allclose(a @ v, v * w, atol=1e-8 * np.trace(a))


@pytest.mark.parametrize("dim", [1, 2, 3, 5, 16, 33, 64, 128])
def test_jacobi_against_lapack(rng, dim):
    a = random_psd(rng, dim)
    w, v = jacobi_eigh(a)
    ref = np.sort(np.linalg.eigvalsh(a))[::-1]
    assert np.allclose(w, ref, rtol=1e-5, atol=1e-10 * np.trace(a))
    assert np.max(np.abs(v.T @ v - np.eye(dim))) < 1e-10


def test_jacobi_indefinite_and_ill_conditioned(rng):
    a = rng.standard_normal((10, 10))
    a = a + a.T
    w, _ = jacobi_eigh(a)
    assert np.allclose(w, np.sort(np.linalg.eigvalsh(a))[::-1], atol=1e-9)
    q, _ = np.linalg.qr(rng.standard_normal((12, 12)))
    lam = 0.5 ** np.arange(12) * 1e-3
    w, _ = jacobi_eigh(q @ np.diag(lam) @ q.T)
    assert np.allclose(w, lam, rtol=1e-5, atol=1e-12)


def test_jacobi_nonconvergence_reported(rng):
    with pytest.raises(EigensolverError):
        jacobi_eigh(random_psd(rng, 16), max_sweeps=1)


def test_zero_matrix():
    w, v = jacobi_eigh(np.zeros((3, 3)))
    assert np.array_equal(w, np.zeros(3)) and np.array_equal(v, np.eye(3))


def test_sign_convention():
    u = fix_signs(np.array([[0.6, -0.5], [-0.8, 0.5]]))
    assert np.allclose(u, [[-0.6, 0.5], [0.8, -0.5]])


# --- projections ----------------------------------------------------------

def test_joint_on_diagonal():
    p = compute_joint_projection(cov_of(np.diag([4.0, 1, 0, 0])), 1)
    assert np.allclose(p.U[:, 0], [1, 0, 0, 0]) and np.allclose(p.eigenvalues, [4.0])


def test_joint_isotropic_energy():
    acc = cov_of(np.eye(4))
    p = compute_joint_projection(acc, 2)
    assert captured_energy(acc, p) == pytest.approx(2.0)
    assert p.orthonormality_error() < 1e-12


@pytest.mark.parametrize("solver", ["jacobi", "lapack", "auto"])
def test_joint_against_oracle(rng, solver):
    acc = cov_of(random_psd(rng, 8))
    p = compute_joint_projection(acc, 3, solver=solver)
    w_ref, v_ref = classic_jacobi(acc.C)
    assert np.allclose(p.eigenvalues, w_ref[:3], rtol=1e-6)
    # same subspace, sign fixed by convention
    assert np.allclose(np.abs(p.U.T @ v_ref[:, :3]), np.eye(3), atol=1e-6)
    idx = np.argmax(np.abs(p.U), axis=0)
    assert np.all(p.U[idx, range(3)] > 0)
    assert np.all(np.diff(p.eigenvalues) <= 0)


def test_joint_large_dim_against_lapack(rng):
    acc = cov_of(random_psd(rng, 512, 600))
    p = compute_joint_projection(acc, 32)
    ref = np.sort(np.linalg.eigvalsh(acc.C))[::-1][:32]
    assert np.allclose(p.eigenvalues, ref, rtol=1e-5)
    assert p.orthonormality_error() < 1e-6


def test_rank_out_of_range():
    with pytest.raises(ValueError):
        compute_joint_projection(cov_of(np.eye(4)), 5)
    with pytest.raises(ValueError):
        compute_joint_projection(cov_of(np.eye(4)), 0)


def test_per_head_diagonal_example():
    acc = cov_of(np.diag([3.0, 2, 0.1, 0.1]))
    p = compute_per_head_projection(acc, 2, 2)
    assert np.allclose(p.U, [[1, 0], [0, 0], [0, 1], [0, 0]])
    assert captured_energy(acc, p) == pytest.approx(3.1)
    assert p.kind == "per_head_block"


def test_per_head_identical_blocks_equal_joint(rng):
    b = random_psd(rng, 4)
    acc = cov_of(np.kron(np.eye(3), b))
    per = compute_per_head_projection(acc, 6, 3)
    joint = compute_joint_projection(acc, 6)
    assert captured_energy(acc, per) == pytest.approx(captured_energy(acc, joint), rel=1e-9)


def test_per_head_single_head_is_joint(rng):
    acc = cov_of(random_psd(rng, 6))
    a = compute_per_head_projection(acc, 3, 1)
    b = compute_joint_projection(acc, 3)
    assert np.allclose(a.U, b.U, atol=1e-12)


def test_per_head_structure_and_errors(rng):
    acc = cov_of(random_psd(rng, 8))
    p = compute_per_head_projection(acc, 4, 2)
    assert np.all(p.U[:4, 2:] == 0) and np.all(p.U[4:, :2] == 0)
    assert p.orthonormality_error() < 1e-12
    with pytest.raises(ValueError):
        compute_per_head_projection(acc, 3, 2)
    with pytest.raises(ValueError):
        compute_per_head_projection(acc, 4, 3)


def test_captured_energy(rng):
    c = random_psd(rng, 6)
    acc = cov_of(c)
    assert captured_energy(acc, ProjectionMatrix.identity(6)) == pytest.approx(np.trace(c))
    assert captured_energy(cov_of(np.diag([4.0, 1, 0, 0])), ProjectionMatrix(np.eye(4)[:, :1], [4.0])) == 4.0
    q, _ = np.linalg.qr(rng.standard_normal((6, 3)))
    by_column = sum(float(q[:, i] @ c @ q[:, i]) for i in range(3))
    assert captured_energy(acc, ProjectionMatrix(q, np.zeros(3))) == pytest.approx(by_column, rel=1e-12)
    with pytest.raises(ValueError):
        captured_energy(acc, ProjectionMatrix.identity(4))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 12))
def test_energy_monotone_in_rank(seed, dim):
    acc = cov_of(random_psd(np.random.default_rng(seed), dim))
    energies = [captured_energy(acc, compute_joint_projection(acc, r)) for r in range(1, dim + 1)]
    assert all(b >= a - 1e-9 * acc.trace for a, b in zip(energies, energies[1:]))


def test_residual_identity(rng):
    keys = rng.standard_normal((500, 12)) * np.linspace(3, 0.1, 12)
    acc = Covariance.from_keys(keys)
    for r in (1, 4, 11):
        p = compute_joint_projection(acc, r)
        resid = np.linalg.norm(keys - keys @ p.U @ p.U.T) ** 2
        assert resid == pytest.approx(acc.trace - captured_energy(acc, p), rel=1e-4)
