"""One sparse decode step over the latent cache, and dense prefill."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cache import LatentKvCache
from .config import AttentionConfig, SelectionPolicy
from .reference import full_attention
from .rope import RotaryTable, apply_rope, apply_rope_batch
from .selection import TokenSelection, latent_scores, pool_query, select_topk, selected_count
from .traffic import TrafficCounter, TrafficReport, predicted_elements


@dataclass(frozen=True, eq=False)
class AttentionOutput:
    y: np.ndarray
    selection: TokenSelection
    probs: np.ndarray
    traffic: TrafficReport


def sparse_attention_over(qR, K_C, V_C, num_heads: int, head_dim: int):
    """Softmax attention of a rotated query over already-rotated selected keys.

    Returns ``(probs, y)`` with ``probs`` shaped ``(query_heads, |C|)``.
    """
    qR = np.asarray(qR, dtype=np.float64).reshape(-1)
    K_C = np.asarray(K_C, dtype=np.float64)
    V_C = np.asarray(V_C, dtype=np.float64)
    if K_C.ndim != 2 or K_C.shape[0] == 0:
        raise ValueError("empty selection")
    if K_C.shape != V_C.shape or K_C.shape[1] != num_heads * head_dim:
        raise ValueError(f"K_C {K_C.shape} / V_C {V_C.shape} do not match {num_heads}x{head_dim}")
    nq = qR.size // head_dim
    if qR.size % head_dim or nq % num_heads:
        raise ValueError("query length incompatible with head layout")
    c = K_C.shape[0]
    q = qR.reshape(num_heads, nq // num_heads, head_dim)
    k = K_C.reshape(c, num_heads, head_dim)
    v = V_C.reshape(c, num_heads, head_dim)
    logits = np.einsum("hgd,chd->hgc", q, k) / math.sqrt(head_dim)
    logits -= logits.max(axis=2, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=2, keepdims=True)
    y = np.einsum("hgc,chd->hgd", p, v)
    return p.reshape(nq, c), y.reshape(-1)


def sals_decode_step(q, k_new, v_new, cache: LatentKvCache, U, policy: SelectionPolicy,
                     cfg: AttentionConfig, position: int, *, table: RotaryTable | None = None,
                     traffic_mode: str = "itemized", layer: int | None = None,
                     num_layers: int | None = None) -> AttentionOutput:
    """Append the current token and attend over the selected critical set.

    Inputs are pre-RoPE. Selected keys are rotated at their original cached
    positions; the current token is always part of the selection. Layers
    listed in ``policy.dense_layers`` attend over every cached token.
    """
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.size != cfg.query_dim:
        raise ValueError(f"query length {q.size} != {cfg.query_dim}")
    if table is None:
        table = RotaryTable.for_config(cfg, position + 1)
    counter = TrafficCounter(traffic_mode)
    cache.append(k_new, v_new, position, U)
    s = len(cache)
    r_star = policy.score_rank or cfg.score_rank
    w_held = cache.recent_count
    dense = policy.is_dense(layer, num_layers)
    if dense:
        idx = np.arange(s)
        selection = TokenSelection(idx, np.full(s, np.nan))
        n_recent = w_held
        predicted = predicted_elements(traffic_mode, s, 0, cache.rank, cfg.dim, cfg.value_bits,
                                       s - n_recent, n_recent)
    else:
        qp = pool_query(q, cfg.num_query_heads, cfg.num_heads, cfg.head_dim)
        scores = latent_scores(qp, cache, U, r_star, counter)
        selection = select_topk(scores, policy, s, forced=(s - 1,))
        idx = selection.indices
        if cfg.recent_window <= policy.recent:
            # every buffered token sits inside the always-kept recent window
            n_sel, n_recent = selected_count(policy, s), w_held
        else:
            n_sel, n_recent = idx.size, int(np.sum(idx >= cache.buffer_start))
        predicted = predicted_elements(traffic_mode, s, r_star, cache.rank, cfg.dim, cfg.value_bits,
                                       n_sel - n_recent, n_recent)
    K_C = cache.reconstruct(idx, U, counter)
    V_C = cache.values(idx, counter)
    qR = apply_rope(q, position, table)
    KR = apply_rope_batch(K_C, cache.positions[idx], table)
    probs, y = sparse_attention_over(qR, KR, V_C, cfg.num_heads, cfg.head_dim)
    n_rec_actual = int(np.sum(idx >= cache.buffer_start))
    report = TrafficReport.from_counter(counter, seq_len=s, nd=cfg.dim, predicted=predicted,
                                        selected_compressed=idx.size - n_rec_actual,
                                        selected_recent=n_rec_actual)
    return AttentionOutput(y, selection, probs, report)


def prefill(Q, K, V, cache: LatentKvCache, U, cfg: AttentionConfig, *,
            table: RotaryTable | None = None, positions=None) -> np.ndarray:
    """Load a prompt into an empty cache and return its dense causal attention output."""
    if len(cache):
        raise ValueError("prefill requires an empty cache")
    Q = np.asarray(Q, dtype=np.float64).reshape(-1, cfg.query_dim)
    K = np.asarray(K, dtype=np.float64).reshape(-1, cfg.dim)
    V = np.asarray(V, dtype=np.float64).reshape(-1, cfg.dim)
    s = K.shape[0]
    pos = np.arange(s) if positions is None else np.asarray(positions, dtype=np.int64)
    for i in range(s):
        cache.append(K[i], V[i], int(pos[i]), U)
    if s == 0:
        return np.zeros((0, cfg.query_dim))
    if table is None:
        table = RotaryTable.for_config(cfg, int(pos.max()) + 1)
    return full_attention(Q, K, V, table, True, num_heads=cfg.num_heads, positions=pos)
