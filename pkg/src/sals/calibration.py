"""Offline calibration of the latent projection from pre-RoPE keys.

The covariance is the raw second moment ``K^T K`` (no mean removal) unless a
caller asks for ``centered=True``. Eigenpairs come from a cyclic Jacobi
solver up to ``JACOBI_MAX_DIM``; beyond that the default ``"auto"`` solver
hands off to ``numpy.linalg.eigh``, whose results agree to ~1e-12.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


JACOBI_MAX_DIM = 128


class EigensolverError(RuntimeError):
    pass


@lru_cache(maxsize=64)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Disjoint (p, q) index pairs per round; together the rounds cover every pair once."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a < n and b < n]
        p = np.array([a for a, _ in pairs], dtype=np.intp)
        q = np.array([b for _, b in pairs], dtype=np.intp)
        rounds.append((p, q))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _off_norm(a: np.ndarray) -> float:
    off = a - np.diag(np.diag(a))
    return float(np.linalg.norm(off))


def jacobi_eigh(a, tol: float = 1e-10, max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decompose a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits all off-diagonal pairs in round-robin order, rotating
    the disjoint pairs of a round simultaneously. Stops once the off-diagonal
    Frobenius norm drops below ``tol * max(trace, ||A||_F)`` (just ``trace``
    for PSD input).

    Returns eigenvalues in descending order (ties keep the lower diagonal
    index first) and the matching eigenvectors as columns.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got {a.shape}")
    n = a.shape[0]
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    limit = tol * max(abs(float(np.trace(a))), float(np.linalg.norm(a)))
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        if _off_norm(a) <= limit:
            break
        for p, q in rounds:
            if p.size == 0:
                continue
            apq = a[p, q]
            app = a[p, p]
            aqq = a[q, q]
            nz = apq != 0.0
            with np.errstate(over="ignore", divide="ignore"):
                theta = np.where(nz, (aqq - app) / np.where(nz, 2.0 * apq, 1.0), 0.0)
                # |theta| overflowing to inf gives t = 0: the pair is already decoupled
                t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
            t = np.where(nz, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            cp, cq = a[:, p], a[:, q]
            a[:, p], a[:, q] = cp * c - cq * s, cp * s + cq * c
            rp, rq = a[p, :], a[q, :]
            a[p, :], a[q, :] = c[:, None] * rp - s[:, None] * rq, s[:, None] * rp + c[:, None] * rq
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = vp * c - vq * s, vp * s + vq * c
    else:
        if _off_norm(a) > limit:
            raise EigensolverError(f"Jacobi did not converge in {max_sweeps} sweeps")
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def _lapack_eigh(a) -> tuple[np.ndarray, np.ndarray]:
    w, v = np.linalg.eigh(np.asarray(a, dtype=np.float64))
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def _eigh(a, solver: str):
    if solver == "auto":
        solver = "jacobi" if a.shape[0] <= JACOBI_MAX_DIM else "lapack"
    if solver == "jacobi":
        return jacobi_eigh(a)
    if solver == "lapack":
        return _lapack_eigh(a)
    raise ValueError(f"unknown solver {solver!r}")


def fix_signs(u: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude entry of each column positive (first index wins ties)."""
    u = np.array(u, dtype=np.float64)
    if u.size == 0:
        return u
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[idx, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    return u * signs


@dataclass(frozen=True, eq=False)
class Covariance:
    """Running second moment ``sum k k^T`` over pre-RoPE key rows."""

    dim: int
    C: np.ndarray
    samples_seen: int = 0
    total: np.ndarray | None = None

    @classmethod
    def empty(cls, dim: int) -> Covariance:
        return cls(dim, np.zeros((dim, dim)), 0, np.zeros(dim))

    @classmethod
    def from_keys(cls, keys) -> Covariance:
        keys = np.asarray(keys)
        return accumulate_covariance(cls.empty(keys.shape[1]), keys)

    def __add__(self, other: Covariance) -> Covariance:
        if other.dim != self.dim:
            raise ValueError(f"dimension mismatch: {self.dim} vs {other.dim}")
        return Covariance(self.dim, self.C + other.C, self.samples_seen + other.samples_seen,
                          self.total + other.total)

    def matrix(self, centered: bool = False) -> np.ndarray:
        if not centered:
            return self.C
        if self.samples_seen == 0:
            return np.zeros_like(self.C)
        return self.C - np.outer(self.total, self.total) / self.samples_seen

    @property
    def trace(self) -> float:
        return float(np.trace(self.C))


def accumulate_covariance(acc: Covariance, keys) -> Covariance:
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[1] != acc.dim:
        raise ValueError(f"keys must have {acc.dim} columns, got shape {keys.shape}")
    return Covariance(acc.dim, acc.C + keys.T @ keys, acc.samples_seen + keys.shape[0],
                      acc.total + keys.sum(axis=0))


@dataclass(frozen=True, eq=False)
class ProjectionMatrix:
    """Column-orthonormal ``U`` (``dim x rank``) mapping stacked keys to the latent space.

    ``eigenvalues`` are the retained covariance eigenvalues in descending
    order. For ``kind="per_head_block"`` the columns are grouped by head, so
    the eigenvalues are a sorted summary rather than aligned to columns.
    """

    U: np.ndarray
    eigenvalues: np.ndarray
    kind: str = "joint"

    @property
    def dim(self) -> int:
        return self.U.shape[0]

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    def orthonormality_error(self) -> float:
        u = np.asarray(self.U, dtype=np.float64)
        return float(np.max(np.abs(u.T @ u - np.eye(self.rank)))) if self.rank else 0.0

    @classmethod
    def identity(cls, dim: int) -> ProjectionMatrix:
        return cls(np.eye(dim), np.ones(dim), "joint")


def compute_joint_projection(acc: Covariance, r: int, centered: bool = False,
                             solver: str = "auto") -> ProjectionMatrix:
    """Leading ``r`` eigenvectors of the full ``nd x nd`` covariance."""
    if not 1 <= r <= acc.dim:
        raise ValueError(f"rank {r} outside [1, {acc.dim}]")
    w, v = _eigh(acc.matrix(centered), solver)
    return ProjectionMatrix(fix_signs(v[:, :r]), np.maximum(w[:r], 0.0), "joint")


def compute_per_head_projection(acc: Covariance, r: int, n: int, centered: bool = False,
                                solver: str = "auto") -> ProjectionMatrix:
    """Block-diagonal projection: top ``r/n`` eigenvectors of each head's own block."""
    if n < 1 or acc.dim % n:
        raise ValueError(f"dimension {acc.dim} not divisible by {n} heads")
    if r % n:
        raise ValueError(f"rank {r} not divisible by {n} heads")
    d, rh = acc.dim // n, r // n
    if not 1 <= rh <= d:
        raise ValueError(f"per-head rank {rh} outside [1, {d}]")
    c = acc.matrix(centered)
    u = np.zeros((acc.dim, r))
    lam = []
    for h in range(n):
        w, v = _eigh(c[h * d:(h + 1) * d, h * d:(h + 1) * d], solver)
        u[h * d:(h + 1) * d, h * rh:(h + 1) * rh] = fix_signs(v[:, :rh])
        lam.append(np.maximum(w[:rh], 0.0))
    lam = np.sort(np.concatenate(lam))[::-1]
    return ProjectionMatrix(u, lam, "per_head_block")


def captured_energy(acc: Covariance, p: ProjectionMatrix, centered: bool = False) -> float:
    """``trace(U^T C U)``, the covariance energy retained by ``U``."""
    if p.dim != acc.dim:
        raise ValueError(f"projection dim {p.dim} != covariance dim {acc.dim}")
    c = acc.matrix(centered)
    u = np.asarray(p.U, dtype=np.float64)
    return float(np.sum((c @ u) * u))
