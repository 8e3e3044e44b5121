"""Critical-token selection from truncated latent scores."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .cache import LatentKvCache, _u
from .calibration import Covariance, compute_joint_projection
from .config import AttentionConfig, SelectionPolicy
from .rope import RotaryTable, apply_rope, apply_rope_batch
from .synthetic import SyntheticSpec, generate_keys, planted_direction
from .traffic import TrafficCounter


@dataclass(frozen=True, eq=False)
class TokenSelection:
    indices: np.ndarray
    scores: np.ndarray
    phase_traffic: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.indices.size


def pool_query(q, num_query_heads: int, num_heads: int, head_dim: int) -> np.ndarray:
    """Map a stacked query onto the kv-head layout.

    With grouped-query attention, consecutive query heads sharing a kv head
    are mean-pooled into one head before projection.
    """
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.size != num_query_heads * head_dim:
        raise ValueError(f"query length {q.size} != {num_query_heads}*{head_dim}")
    if num_query_heads == num_heads:
        return q
    return q.reshape(num_heads, num_query_heads // num_heads, head_dim).mean(axis=1).reshape(-1)


def truncated_scores(q_latent, latent_keys, r_star: int) -> np.ndarray:
    q_latent = np.asarray(q_latent, dtype=np.float64)
    if r_star > q_latent.size:
        raise ValueError(f"score rank {r_star} exceeds latent rank {q_latent.size}")
    return np.asarray(latent_keys, dtype=np.float64)[:, :r_star] @ q_latent[:r_star]


def latent_scores(q, cache: LatentKvCache, U, r_star: int,
                  counter: TrafficCounter | None = None) -> np.ndarray:
    """Approximate scores ``(U^T q)[:r*] . k_latent[j, :r*]`` for every cached token."""
    u = _u(U)
    if r_star > u.shape[1]:
        raise ValueError(f"score rank {r_star} exceeds latent rank {u.shape[1]}")
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.size != u.shape[0]:
        raise ValueError(f"query length {q.size} != projection dim {u.shape[0]}")
    scores = truncated_scores(q @ u, cache.latent_keys, r_star)
    if counter is not None:
        counter.add_scores(len(cache), r_star)
    return scores


def _rank_order(scores: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    # descending score, ascending index on ties
    return candidates[np.lexsort((candidates, -scores[candidates]))]


def select_topk(scores, policy: SelectionPolicy, s: int | None = None,
                forced=()) -> TokenSelection:
    """Sinks ``[0, x)``, the last ``z`` tokens, and the top ``y`` of the rest.

    Overlapping sinks and recents are counted once and the critical budget is
    not refunded. ``forced`` indices are always kept; outside the sink and
    recent windows each one takes a critical slot while any remain.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    s = scores.size if s is None else s
    if scores.size != s:
        raise ValueError(f"{scores.size} scores for {s} tokens")
    keep = np.zeros(s, dtype=bool)
    keep[: min(policy.sink, s)] = True
    keep[s - min(policy.recent, s):] = True
    forced = np.asarray([f for f in forced if not keep[f]], dtype=np.int64)
    keep[forced] = True
    slots = max(policy.critical_budget - forced.size, 0)
    rest = _rank_order(scores, np.flatnonzero(~keep))
    keep[rest[:slots]] = True
    idx = np.flatnonzero(keep)
    return TokenSelection(idx, scores[idx])


def selected_count(policy: SelectionPolicy, s: int, force_last: bool = True) -> int:
    """Size of :func:`select_topk`'s result for ``s`` tokens."""
    x, y, z = min(policy.sink, s), policy.critical_budget, min(policy.recent, s)
    fixed = min(x + z, s)
    extra = 1 if force_last and s > 0 and z == 0 and x < s else 0
    return fixed + max(min(max(y - extra, 0), s - fixed - extra), 0) + extra


def overlap_score(approx_scores, exact_probs, n_c: int) -> float:
    """Share of the exact attention mass held by the top ``n_c`` approximate scores."""
    approx = np.asarray(approx_scores, dtype=np.float64).reshape(-1)
    p = np.asarray(exact_probs, dtype=np.float64).reshape(-1)
    if approx.size != p.size:
        raise ValueError("score and probability vectors differ in length")
    if n_c > p.size or n_c < 0:
        raise ValueError(f"n_c={n_c} outside [0, {p.size}]")
    if np.any(p < 0):
        raise ValueError("probabilities must be non-negative")
    top = np.sort(_rank_order(approx, np.arange(p.size))[:n_c])
    total = math.fsum(p)
    if total == 0:
        return 1.0 if n_c == p.size else 0.0
    return math.fsum(p[top]) / total


def exact_attention_probs(q, keys, q_position: int, key_positions, table: RotaryTable | None,
                          num_heads: int, head_dim: int) -> np.ndarray:
    """Head-averaged post-RoPE softmax of one query over ``keys``."""
    q = np.asarray(q, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    if table is not None:
        q = apply_rope(q, q_position, table)
        keys = apply_rope_batch(keys, key_positions, table)
    logits = np.einsum("shd,hd->hs", keys.reshape(-1, num_heads, head_dim),
                       q.reshape(num_heads, head_dim)) / math.sqrt(head_dim)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w.mean(axis=0)


@dataclass
class RecallReport:
    trials: int
    mean_overlap: float
    p10_overlap: float
    planted_recall: float | None
    mean_topk_agreement: float
    overlaps: list[float] = field(repr=False, default_factory=list)


def selection_recall(trials: int, spec: SyntheticSpec, cfg: AttentionConfig,
                     policy: SelectionPolicy, rope: bool = True) -> RecallReport:
    """Compare latent-space selection with exact post-RoPE attention on synthetic keys.

    Trial ``t`` draws keys with seed ``spec.seed + t``, calibrates a joint
    projection on them, and issues a unit query along the planted direction
    from the last position. ``rope=False`` places every token at position 0.
    """
    s, dim = spec.seq_len, cfg.dim
    r_star = policy.score_rank or cfg.score_rank
    table = RotaryTable.for_config(cfg, max(s, 1)) if rope else None
    positions = np.arange(s) if rope else np.zeros(s, dtype=np.int64)
    overlaps, hits, agree = [], 0, []
    for t in range(trials):
        spec_t = replace(spec, seed=spec.seed + t)
        keys = generate_keys(spec_t, cfg).astype(np.float64)
        q = planted_direction(spec_t, dim)
        proj = compute_joint_projection(Covariance.from_keys(keys), cfg.latent_rank)
        approx = truncated_scores(q @ proj.U, keys @ proj.U, r_star)
        probs = exact_attention_probs(q, keys, int(positions[-1]) if s else 0, positions, table,
                                      cfg.num_heads, cfg.head_dim)
        sel = select_topk(approx, policy, s)
        k = len(sel)
        overlaps.append(overlap_score(approx, probs, k))
        if spec.planted_token is not None:
            hits += int(spec.planted_token.position in set(sel.indices.tolist()))
        exact_top = set(_rank_order(probs, np.arange(s))[:k].tolist())
        agree.append(len(exact_top & set(sel.indices.tolist())) / k if k else 1.0)
    ov = np.asarray(overlaps)
    return RecallReport(
        trials=trials,
        mean_overlap=float(ov.mean()) if trials else float("nan"),
        p10_overlap=float(np.percentile(ov, 10)) if trials else float("nan"),
        planted_recall=hits / trials if spec.planted_token is not None and trials else None,
        mean_topk_agreement=float(np.mean(agree)) if trials else float("nan"),
        overlaps=overlaps,
    )
