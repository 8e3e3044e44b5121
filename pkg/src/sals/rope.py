"""Rotary position embedding over stacked multi-head vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class RotaryTable:
    """Precomputed angles ``angles[m, i] = m * base**(-2i/d)``.

    ``pairing`` fixes which dimensions rotate together: ``"adjacent"`` pairs
    ``(2i, 2i+1)``, ``"half"`` pairs ``(i, i + d/2)``.
    """

    angles: np.ndarray
    pairing: str = "adjacent"

    def __post_init__(self):
        a = np.asarray(self.angles, dtype=np.float64)
        a.setflags(write=False)
        object.__setattr__(self, "angles", a)
        object.__setattr__(self, "_cos", np.cos(a))
        object.__setattr__(self, "_sin", np.sin(a))
        if self.pairing not in ("adjacent", "half"):
            raise ValueError(f"unknown pairing {self.pairing!r}")

    @classmethod
    def build(cls, max_positions: int, head_dim: int, base: float = 10000.0,
              pairing: str = "adjacent") -> RotaryTable:
        if head_dim % 2:
            raise ValueError("head_dim must be even")
        inv_freq = base ** (-2.0 * np.arange(head_dim // 2) / head_dim)
        return cls(np.outer(np.arange(max_positions, dtype=np.float64), inv_freq), pairing)

    @classmethod
    def for_config(cls, cfg, max_positions: int) -> RotaryTable:
        return cls.build(max_positions, cfg.head_dim, cfg.rope_base, cfg.rope_pairing)

    @property
    def max_positions(self) -> int:
        return self.angles.shape[0]

    @property
    def head_dim(self) -> int:
        return 2 * self.angles.shape[1]

    def inverse(self) -> RotaryTable:
        return RotaryTable(-self.angles, self.pairing)

    def _split(self, x):
        d = self.head_dim
        if self.pairing == "adjacent":
            return x[..., 0::2], x[..., 1::2]
        return x[..., : d // 2], x[..., d // 2:]

    def _rotate(self, x: np.ndarray, positions: np.ndarray) -> np.ndarray:
        # x: (rows, heads, d); positions: (rows,)
        if positions.size and (positions.min() < 0 or positions.max() >= self.max_positions):
            raise IndexError(f"position out of rotary table range [0, {self.max_positions})")
        c = self._cos[positions][:, None, :]
        s = self._sin[positions][:, None, :]
        a, b = self._split(x)
        out = np.empty_like(x)
        oa, ob = self._split(out)
        oa[...] = a * c - b * s
        ob[...] = a * s + b * c
        return out


def apply_rope(x, position: int, table: RotaryTable) -> np.ndarray:
    """Rotate every head of the stacked vector ``x`` to ``position``."""
    x = np.asarray(x, dtype=np.float64)
    d = table.head_dim
    if x.ndim != 1 or x.size % d:
        raise ValueError(f"vector length {x.size} is not a multiple of head_dim {d}")
    pos = np.asarray([position], dtype=np.int64)
    return table._rotate(x.reshape(1, -1, d), pos).reshape(-1)


def apply_rope_batch(X, positions, table: RotaryTable) -> np.ndarray:
    """Rotate row ``i`` of ``X`` to ``positions[i]``.

    Rows keep whatever absolute position they are given, so a gathered subset
    of cached keys must be passed with its original sequence positions.
    """
    X = np.asarray(X, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.int64).reshape(-1)
    if X.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    if positions.size != X.shape[0]:
        raise ValueError(f"{positions.size} positions for {X.shape[0]} rows")
    d = table.head_dim
    if X.shape[1] % d:
        raise ValueError(f"row length {X.shape[1]} is not a multiple of head_dim {d}")
    return table._rotate(X.reshape(X.shape[0], -1, d), positions).reshape(X.shape)
