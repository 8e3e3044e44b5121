"""Compressed KV store: latent keys, group-quantized values, full-precision recent window."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .config import AttentionConfig
from .traffic import TrafficCounter


def _u(U) -> np.ndarray:
    return np.asarray(getattr(U, "U", U), dtype=np.float64)


def project_key(k, U) -> np.ndarray:
    """Latent coordinates ``U^T k`` of a stacked key."""
    u = _u(U)
    k = np.asarray(k, dtype=np.float64).reshape(-1)
    if k.size != u.shape[0]:
        raise ValueError(f"key length {k.size} != projection dim {u.shape[0]}")
    return k @ u


@dataclass(frozen=True, eq=False)
class QuantizedVector:
    codes: np.ndarray
    scales: np.ndarray
    zeros: np.ndarray
    bits: int
    group: int


def quantize_value(v, bits: int, group: int) -> QuantizedVector:
    """Asymmetric min/max quantization over contiguous channel groups."""
    if bits not in (2, 4):
        raise ValueError(f"unsupported bit width {bits}")
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if group < 1 or v.size % group:
        raise ValueError(f"group {group} does not divide length {v.size}")
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot quantize non-finite values")
    codes, scales, zeros = _quantize_rows(v.reshape(1, -1), bits, group)
    return QuantizedVector(codes[0], scales[0], zeros[0], bits, group)


def _quantize_rows(v: np.ndarray, bits: int, group: int):
    rows = v.shape[0]
    g = v.reshape(rows, -1, group)
    lo = g.min(axis=2)
    scale = (g.max(axis=2) - lo) / (2**bits - 1)
    safe = np.where(scale > 0, scale, 1.0)
    codes = np.where(scale[..., None] > 0, np.rint((g - lo[..., None]) / safe[..., None]), 0.0)
    codes = np.clip(codes, 0, 2**bits - 1).astype(np.uint8)
    return codes.reshape(rows, -1), scale, lo


def _dequantize_rows(codes: np.ndarray, scales: np.ndarray, zeros: np.ndarray, group: int):
    rows, width = codes.shape
    g = codes.reshape(rows, width // group, group).astype(np.float64)
    return (g * scales[..., None] + zeros[..., None]).reshape(rows, width)


def dequantize_value(q: QuantizedVector) -> np.ndarray:
    return _dequantize_rows(q.codes[None], q.scales[None], q.zeros[None], q.group)[0]


class LatentKvCache:
    """Per-layer cache for one sequence.

    Keys are kept only as latent rows (``s x r`` float32). Values are
    group-quantized at ``cfg.value_bits`` (2 or 4); widths 16 and 32 keep them
    as float32. The last ``cfg.recent_window`` tokens are additionally held
    at full precision and are served from there on reads.
    """

    def __init__(self, cfg: AttentionConfig, rank: int | None = None):
        self.cfg = cfg
        self.dim = cfg.dim
        self.rank = cfg.latent_rank if rank is None else rank
        self.bits = cfg.value_bits
        self.group = cfg.quant_group
        self.window = cfg.recent_window
        self.quantized = self.bits in (2, 4)
        self._n = 0
        self._latent = np.zeros((0, self.rank), dtype=np.float32)
        self._positions = np.zeros(0, dtype=np.int64)
        ng = self.dim // self.group
        if self.quantized:
            self._codes = np.zeros((0, self.dim), dtype=np.uint8)
            self._scales = np.zeros((0, ng))
            self._zeros = np.zeros((0, ng))
        else:
            self._raw = np.zeros((0, self.dim), dtype=np.float32)
        self._recent: deque = deque(maxlen=self.window)

    def __len__(self) -> int:
        return self._n

    @property
    def latent_keys(self) -> np.ndarray:
        return self._latent[: self._n]

    @property
    def positions(self) -> np.ndarray:
        return self._positions[: self._n]

    @property
    def recent_count(self) -> int:
        return len(self._recent)

    @property
    def buffer_start(self) -> int:
        """Index of the oldest token still held at full precision."""
        return self._n - len(self._recent)

    def _grow(self, extra: int) -> None:
        need = self._n + extra
        cap = self._latent.shape[0]
        if need <= cap:
            return
        cap = max(need, 2 * cap, 16)

        def grown(a):
            out = np.zeros((cap,) + a.shape[1:], dtype=a.dtype)
            out[: self._n] = a[: self._n]
            return out

        self._latent = grown(self._latent)
        self._positions = grown(self._positions)
        if self.quantized:
            self._codes, self._scales, self._zeros = map(grown, (self._codes, self._scales, self._zeros))
        else:
            self._raw = grown(self._raw)

    def append(self, k, v, position: int, U) -> None:
        u = _u(U)
        if u.shape != (self.dim, self.rank):
            raise ValueError(f"projection shape {u.shape} != ({self.dim}, {self.rank})")
        k = np.asarray(k, dtype=np.float32).reshape(-1)
        v = np.asarray(v, dtype=np.float32).reshape(-1)
        if k.size != self.dim or v.size != self.dim:
            raise ValueError(f"key/value length must be {self.dim}")
        if not (np.all(np.isfinite(k)) and np.all(np.isfinite(v))):
            raise ValueError("key/value contain non-finite entries")
        if self._n and position <= self._positions[self._n - 1]:
            raise ValueError(f"position {position} not after last position {self._positions[self._n - 1]}")
        if position < 0:
            raise ValueError("position must be >= 0")
        self._grow(1)
        i = self._n
        self._latent[i] = project_key(k, u)
        self._positions[i] = position
        if self.quantized:
            c, s, z = _quantize_rows(v[None].astype(np.float64), self.bits, self.group)
            self._codes[i], self._scales[i], self._zeros[i] = c[0], s[0], z[0]
        else:
            self._raw[i] = v
        self._recent.append((k.copy(), v.copy()))
        self._n += 1

    def _check(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= self._n):
            raise IndexError(f"token index out of range [0, {self._n})")
        return idx

    def _split(self, idx: np.ndarray):
        start = self.buffer_start
        return idx < start, start

    def reconstruct(self, indices, U, counter: TrafficCounter | None = None) -> np.ndarray:
        """Full ``nd`` keys for ``indices``: ``latent @ U^T``, or the buffered original."""
        idx = self._check(indices)
        u = _u(U)
        old, start = self._split(idx)
        out = np.empty((idx.size, self.dim))
        out[old] = self._latent[idx[old]].astype(np.float64) @ u.T
        for row in np.flatnonzero(~old):
            out[row] = self._recent[idx[row] - start][0]
        if counter is not None:
            counter.add_keys(int(old.sum()), int((~old).sum()), self.rank, self.dim)
        return out

    def values(self, indices, counter: TrafficCounter | None = None) -> np.ndarray:
        """Values for ``indices``, dequantized unless buffered."""
        idx = self._check(indices)
        old, start = self._split(idx)
        out = np.empty((idx.size, self.dim))
        sel = idx[old]
        if self.quantized:
            out[old] = _dequantize_rows(self._codes[sel], self._scales[sel], self._zeros[sel], self.group)
        else:
            out[old] = self._raw[sel]
        for row in np.flatnonzero(~old):
            out[row] = self._recent[idx[row] - start][1]
        if counter is not None:
            counter.add_values(int(old.sum()), int((~old).sum()), self.rank, self.dim, self.bits)
        return out

    def stored_elements(self) -> float:
        """Element-equivalents held: latent keys, values at their bit width, and the buffer."""
        s = self._n
        return s * self.rank + s * self.dim * self.bits / 32 + len(self._recent) * 2 * self.dim

    def snapshot(self) -> dict[str, np.ndarray]:
        snap = {
            "latent_keys": self.latent_keys.copy(),
            "positions": self.positions.astype(np.float32)[None, :],
        }
        if self.quantized:
            snap["value_codes"] = self._codes[: self._n].astype(np.float32)
            snap["value_scales"] = self._scales[: self._n].astype(np.float32)
            snap["value_zeros"] = self._zeros[: self._n].astype(np.float32)
        else:
            snap["values"] = self._raw[: self._n].copy()
        return snap


def append_token(cache: LatentKvCache, k, v, position: int, U) -> None:
    cache.append(k, v, position, U)


def reconstruct_keys(cache: LatentKvCache, indices, U, counter: TrafficCounter | None = None):
    return cache.reconstruct(indices, U, counter)
