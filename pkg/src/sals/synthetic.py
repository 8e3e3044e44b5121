"""Seeded Gaussian key generator with a prescribed covariance spectrum.

Keys are ``z * sqrt(spectrum) @ B.T`` for standard normal ``z`` and an
orthogonal eigenbasis ``B`` (random by default, identity on request), so the
population covariance has exactly the requested eigenvalues.

Planted tokens: when ``planted_token`` is set, that row is overwritten with
``gain * u`` where ``u`` is a unit direction. The caller supplies ``u``; if it
does not, ``u`` is the leading eigenvector ``B[:, 0]``, and queries meant to
find the planted token should point along the same ``u``
(see :func:`planted_direction`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import AttentionConfig


@dataclass(frozen=True)
class PlantedToken:
    position: int
    gain: float


@dataclass(frozen=True)
class SyntheticSpec:
    seq_len: int
    spectrum: tuple[float, ...]
    seed: int = 0
    planted_token: PlantedToken | None = None
    basis: str = "random"

    def __post_init__(self):
        object.__setattr__(self, "spectrum", tuple(float(x) for x in self.spectrum))
        if self.seq_len < 0:
            raise ValueError("seq_len must be >= 0")
        if any(x < 0 or not np.isfinite(x) for x in self.spectrum):
            raise ValueError("spectrum values must be finite and >= 0")
        if self.basis not in ("random", "identity"):
            raise ValueError("basis must be 'random' or 'identity'")
        if self.planted_token is not None and not 0 <= self.planted_token.position < self.seq_len:
            raise ValueError("planted position must lie in [0, seq_len)")

    @classmethod
    def from_dict(cls, doc: dict) -> SyntheticSpec:
        doc = dict(doc)
        planted = doc.pop("planted_token", None)
        if planted is not None:
            planted = PlantedToken(int(planted["position"]), float(planted["gain"]))
        return cls(planted_token=planted, **doc)


def geometric_spectrum(dim: int, ratio: float = 0.5, scale: float = 1.0) -> tuple[float, ...]:
    return tuple(scale * ratio**i for i in range(dim))


def eigenbasis(spec: SyntheticSpec, dim: int) -> np.ndarray:
    if spec.basis == "identity":
        return np.eye(dim)
    rng = np.random.default_rng([spec.seed, 0xB5])
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))


def planted_direction(spec: SyntheticSpec, dim: int) -> np.ndarray:
    return eigenbasis(spec, dim)[:, 0].copy()


def generate_keys(spec: SyntheticSpec, cfg: AttentionConfig,
                  direction: np.ndarray | None = None) -> np.ndarray:
    """Draw an ``seq_len x num_heads*head_dim`` float32 key matrix."""
    dim = cfg.dim
    if len(spec.spectrum) != dim:
        raise ValueError(f"spectrum has {len(spec.spectrum)} values, expected {dim}")
    basis = eigenbasis(spec, dim)
    rng = np.random.default_rng([spec.seed, 0x4B])
    z = rng.standard_normal((spec.seq_len, dim))
    keys = (z * np.sqrt(np.asarray(spec.spectrum))) @ basis.T
    if spec.planted_token is not None:
        u = basis[:, 0] if direction is None else np.asarray(direction, dtype=np.float64)
        u = u / np.linalg.norm(u)
        keys[spec.planted_token.position] = spec.planted_token.gain * u
    return keys.astype(np.float32)


def gaussian_matrix(rows: int, cols: int, seed: int, scale: float = 1.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return (scale * rng.standard_normal((rows, cols))).astype(np.float32)
