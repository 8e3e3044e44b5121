"""Ground-truth attention and the two dense low-rank baselines.

Deliberately plain: one query row and one head at a time, float64
throughout, so every output can be audited by hand.
"""

from __future__ import annotations

import math

import numpy as np

from .rope import RotaryTable, apply_rope_batch
from .traffic import TrafficCounter


def _matrices(Q, K, V):
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ValueError("Q, K, V must be 2-D")
    if K.shape != V.shape:
        raise ValueError(f"K {K.shape} and V {V.shape} differ")
    if Q.shape[0] != K.shape[0]:
        raise ValueError(f"Q has {Q.shape[0]} rows, K has {K.shape[0]}")
    return Q, K, V


def _attend_rotated(QR, KR, V, num_heads: int, head_dim: int, causal: bool, rows) -> np.ndarray:
    s = QR.shape[0]
    nq = QR.shape[1] // head_dim
    if KR.shape[1] != num_heads * head_dim or nq % num_heads:
        raise ValueError("head layout does not match matrix widths")
    group = nq // num_heads
    rows = range(s) if rows is None else rows
    out = np.zeros((len(rows), nq * head_dim))
    scale = 1.0 / math.sqrt(head_dim)
    for o, i in enumerate(rows):
        end = i + 1 if causal else s
        for h in range(nq):
            kv = h // group
            q = QR[i, h * head_dim:(h + 1) * head_dim]
            k = KR[:end, kv * head_dim:(kv + 1) * head_dim]
            v = V[:end, kv * head_dim:(kv + 1) * head_dim]
            logits = (k @ q) * scale
            w = np.exp(logits - logits.max())
            out[o, h * head_dim:(h + 1) * head_dim] = (w / w.sum()) @ v
    return out


def _rotate(X, table: RotaryTable | None, positions):
    if table is None:
        return X
    return apply_rope_batch(X, positions, table)


def full_attention(Q, K, V, rope_table: RotaryTable | None, causal: bool = True, *,
                   num_heads: int, positions=None, rows=None) -> np.ndarray:
    """Exact per-head softmax attention with RoPE on queries and keys.

    ``Q`` may carry more heads than ``K``/``V`` (grouped queries); query head
    ``h`` reads kv head ``h // (nq / num_heads)``. ``rows`` restricts which
    query rows are evaluated.
    """
    Q, K, V = _matrices(Q, K, V)
    head_dim = K.shape[1] // num_heads
    pos = np.arange(Q.shape[0]) if positions is None else np.asarray(positions)
    QR = _rotate(Q, rope_table, pos)
    KR = _rotate(K, rope_table, pos)
    return _attend_rotated(QR, KR, V, num_heads, head_dim, causal, rows)


def post_rope_lowrank_attention(Q, K, V, U_post, rope_table: RotaryTable | None, causal: bool = True, *,
                                num_heads: int, positions=None, rows=None) -> np.ndarray:
    """Attention with keys rotated first, then squeezed through ``U U^T``."""
    Q, K, V = _matrices(Q, K, V)
    u = np.asarray(getattr(U_post, "U", U_post), dtype=np.float64)
    head_dim = K.shape[1] // num_heads
    pos = np.arange(Q.shape[0]) if positions is None else np.asarray(positions)
    KR = _rotate(K, rope_table, pos)
    return _attend_rotated(_rotate(Q, rope_table, pos), (KR @ u) @ u.T, V, num_heads, head_dim,
                           causal, rows)


def pre_rope_lowrank_full(Q, K, V, U, rope_table: RotaryTable | None, causal: bool = True, *,
                          num_heads: int, positions=None, rows=None,
                          counter: TrafficCounter | None = None) -> np.ndarray:
    """Attention after reconstructing every key from the latent cache, then rotating.

    ``counter`` is charged for one decode step over all ``s`` tokens:
    ``s*r`` latent reads plus ``s*nd`` reconstructed writes, then ``2*s*nd``
    for the attention pass over keys and values.
    """
    Q, K, V = _matrices(Q, K, V)
    u = np.asarray(getattr(U, "U", U), dtype=np.float64)
    s, nd = K.shape
    head_dim = nd // num_heads
    pos = np.arange(s) if positions is None else np.asarray(positions)
    K_hat = (K @ u) @ u.T
    if counter is not None:
        counter.reconstruct += s * u.shape[1] + s * nd
        counter.score += s * nd
        counter.value += s * nd
    return _attend_rotated(_rotate(Q, rope_table, pos), _rotate(K_hat, rope_table, pos), V,
                           num_heads, head_dim, causal, rows)
