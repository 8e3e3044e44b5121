"""Spectral rank diagnostics and the memory-traffic model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import Covariance, _eigh
from .config import AttentionConfig, SelectionPolicy
from .rope import RotaryTable, apply_rope_batch
from .selection import selected_count
from .synthetic import SyntheticSpec, generate_keys
from .traffic import TrafficReport, predicted_elements


def rank_at_variance(eigenvalues, v: float) -> int:
    """Fewest leading eigenvalues whose share of the total reaches ``v`` percent."""
    lam = np.asarray(eigenvalues, dtype=np.float64).reshape(-1)
    if lam.size == 0 or np.any(lam < 0):
        raise ValueError("eigenvalues must be non-negative")
    if not 0 < v <= 100:
        raise ValueError("v must lie in (0, 100]")
    total = lam.sum()
    if total <= 0:
        raise ValueError("all-zero spectrum")
    lam = np.sort(lam)[::-1]
    frac = np.cumsum(lam) / total
    # cumsum may land an ulp short of 1.0 at the full length
    hit = np.flatnonzero(frac >= v / 100 - 1e-12)
    return int(hit[0]) + 1 if hit.size else lam.size


def covariance_spectrum(keys, centered: bool = True) -> np.ndarray:
    cov = Covariance.from_keys(keys)
    n = max(cov.samples_seen, 1)
    w, _ = _eigh(cov.matrix(centered) / n, "auto")
    return np.maximum(w, 0.0)


@dataclass
class SpectrumReport:
    layer: int
    eigenvalues_pre: np.ndarray
    eigenvalues_post: np.ndarray
    rank_pre: int
    rank_post: int
    v: float


def spectrum_report(keys, positions, table: RotaryTable, v: float = 90.0,
                    layer: int = 0) -> SpectrumReport:
    """Centered covariance spectra of ``keys`` before and after rotating them to ``positions``."""
    keys = np.asarray(keys, dtype=np.float64)
    pre = covariance_spectrum(keys)
    post = covariance_spectrum(apply_rope_batch(keys, positions, table))
    return SpectrumReport(layer, pre, post, rank_at_variance(pre, v), rank_at_variance(post, v), v)


def rope_rank_demo(spec: SyntheticSpec, cfg: AttentionConfig, v: float = 90.0,
                   positions=None, layer: int = 0) -> SpectrumReport:
    """Rank(v) of synthetic keys before and after RoPE.

    Keys come from :func:`generate_keys`; positions default to ``0..s-1``.
    The intended workload is a strongly decaying spectrum such as
    ``geometric_spectrum(nd, 0.5)``.
    """
    if not any(x > 0 for x in spec.spectrum):
        raise ValueError("degenerate spectrum: all eigenvalues are zero")
    keys = generate_keys(spec, cfg)
    pos = np.arange(spec.seq_len) if positions is None else np.asarray(positions, dtype=np.int64)
    table = RotaryTable.for_config(cfg, int(pos.max()) + 1 if pos.size else 1)
    return spectrum_report(keys, pos, table, v, layer)


def memory_speedup(d_rstar: float, d_r: float, k_s: float) -> float:
    """Memory-bound speed-up ``1 / (d_rstar/2 + d_r*k_s)`` over dense attention.

    ``d_rstar = r*/d``, ``d_r = r/d`` and ``k_s = k/s``; the access ratio is
    the reciprocal.
    """
    for name, x in (("d_rstar", d_rstar), ("d_r", d_r), ("k_s", k_s)):
        if not 0 < x <= 1:
            raise ValueError(f"{name}={x} outside (0, 1]")
    return 1.0 / (d_rstar / 2 + d_r * k_s)


class TrafficMismatchError(AssertionError):
    pass


@dataclass
class Reconciliation:
    measured: float
    predicted: float
    measured_ratio: float
    predicted_ratio: float
    selected: int
    selected_recent: int


def reconcile_traffic(report: TrafficReport, cfg: AttentionConfig, policy: SelectionPolicy,
                      s: int) -> Reconciliation:
    """Check a decode step's counted traffic against the closed form.

    Needs ``cfg.recent_window <= policy.recent`` so the buffered tokens are
    known to be selected. Raises :class:`TrafficMismatchError` on any drift.
    """
    if cfg.recent_window > policy.recent:
        raise ValueError("closed form requires recent_window <= recent")
    r_star = policy.score_rank or cfg.score_rank
    n_sel = selected_count(policy, s)
    n_recent = min(s, cfg.recent_window)
    predicted = predicted_elements(report.mode, s, r_star, cfg.latent_rank, cfg.dim, cfg.value_bits,
                                   n_sel - n_recent, n_recent)
    measured = report.total_elements
    baseline = 2.0 * s * cfg.dim
    if measured != predicted or report.measured_ratio != measured / baseline:
        raise TrafficMismatchError(f"counted {measured} elements, closed form gives {predicted}")
    if report.baseline_elements != baseline:
        raise TrafficMismatchError(f"baseline {report.baseline_elements} != {baseline}")
    return Reconciliation(measured, predicted, measured / baseline, predicted / baseline,
                          n_sel, n_recent)


def idealized_access_ratio(d_r: float, k_s: float, score_fraction: float = 0.5) -> float:
    """Access ratio with ``r* = score_fraction * r``."""
    return 1.0 / memory_speedup(score_fraction * d_r, d_r, k_s)

