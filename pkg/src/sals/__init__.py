"""Sparse attention in a shared low-rank latent space.

Pre-RoPE keys of all heads are projected jointly into one latent space,
critical tokens are picked with cheap truncated latent scores, and only the
picked keys are reconstructed and rotated for exact attention.
"""

from .analysis import memory_speedup, rank_at_variance, reconcile_traffic, rope_rank_demo
from .attention import AttentionOutput, prefill, sals_decode_step, sparse_attention_over
from .cache import LatentKvCache, QuantizedVector, dequantize_value, project_key, quantize_value
from .calibration import (
    Covariance,
    ProjectionMatrix,
    accumulate_covariance,
    captured_energy,
    compute_joint_projection,
    compute_per_head_projection,
    jacobi_eigh,
)
from .config import AttentionConfig, SelectionPolicy, load_config
from .reference import full_attention, post_rope_lowrank_attention, pre_rope_lowrank_full
from .rope import RotaryTable, apply_rope, apply_rope_batch
from .selection import TokenSelection, latent_scores, overlap_score, select_topk, selection_recall
from .synthetic import SyntheticSpec, generate_keys
from .tensors import read_tensor, write_tensor
from .traffic import TrafficCounter, TrafficReport

__version__ = "0.1.0"
