"""Attention geometry and selection policy, plus the JSON config loader."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields

VALUE_BITS = (2, 4, 16, 32)
PAIRINGS = ("adjacent", "half")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class AttentionConfig:
    """Shape of one attention layer and how its cache is compressed.

    ``value_bits`` of 16 or 32 keep values unquantized (held as float32);
    the width only matters for traffic accounting.
    """

    num_heads: int
    head_dim: int
    latent_rank: int
    score_rank: int | None = None
    rope_base: float = 10000.0
    value_bits: int = 4
    quant_group: int | None = None
    recent_window: int = 64
    rope_pairing: str = "adjacent"
    num_query_heads: int | None = None

    def __post_init__(self):
        nd = self.num_heads * self.head_dim
        if self.num_heads < 1:
            raise ConfigError("num_heads", "must be >= 1")
        if self.head_dim < 2 or self.head_dim % 2:
            raise ConfigError("head_dim", "must be even and >= 2")
        if not 1 <= self.latent_rank <= nd:
            raise ConfigError("latent_rank", f"must lie in [1, {nd}]")
        if self.score_rank is None:
            object.__setattr__(self, "score_rank", max(1, self.latent_rank // 2))
        if not 1 <= self.score_rank <= self.latent_rank:
            raise ConfigError("score_rank", f"must lie in [1, latent_rank={self.latent_rank}]")
        if self.value_bits not in VALUE_BITS:
            raise ConfigError("value_bits", f"must be one of {VALUE_BITS}")
        if self.quant_group is None:
            object.__setattr__(self, "quant_group", 32 if nd % 32 == 0 else nd)
        if self.quant_group < 1 or nd % self.quant_group:
            raise ConfigError("quant_group", f"must divide num_heads*head_dim={nd}")
        if self.recent_window < 0:
            raise ConfigError("recent_window", "must be >= 0")
        if self.rope_base <= 0:
            raise ConfigError("rope_base", "must be positive")
        if self.rope_pairing not in PAIRINGS:
            raise ConfigError("rope_pairing", f"must be one of {PAIRINGS}")
        if self.num_query_heads is None:
            object.__setattr__(self, "num_query_heads", self.num_heads)
        if self.num_query_heads < self.num_heads or self.num_query_heads % self.num_heads:
            raise ConfigError("num_query_heads", "must be a positive multiple of num_heads")

    @property
    def dim(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def query_dim(self) -> int:
        return self.num_query_heads * self.head_dim


@dataclass(frozen=True)
class SelectionPolicy:
    """Sink / critical / recent token budget.

    ``dense_layers`` may hold negative indices counted from the last layer;
    the default skips sparsification on layers 0, 1 and the last one.
    """

    sink: int = 16
    critical_budget: int = 432
    recent: int = 64
    score_rank: int | None = None
    dense_layers: tuple[int, ...] = (0, 1, -1)

    def __post_init__(self):
        for name in ("sink", "critical_budget", "recent"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        if self.score_rank is not None and self.score_rank < 1:
            raise ConfigError("score_rank", "must be >= 1")
        object.__setattr__(self, "dense_layers", tuple(int(i) for i in self.dense_layers))

    @property
    def budget(self) -> int:
        return self.sink + self.critical_budget + self.recent

    def is_dense(self, layer: int | None, num_layers: int | None = None) -> bool:
        if layer is None:
            return False
        if layer < 0 and num_layers is not None:
            layer += num_layers
        for i in self.dense_layers:
            if i < 0:
                if num_layers is None:
                    continue
                i += num_layers
            if i == layer:
                return True
        return False


_ATTN_KEYS = {f.name for f in fields(AttentionConfig)}
_POLICY_KEYS = {f.name for f in fields(SelectionPolicy)}
_EXTRA_KEYS = {"num_layers", "value_accounting", "seed"}


@dataclass(frozen=True)
class RunConfig:
    attention: AttentionConfig
    policy: SelectionPolicy
    num_layers: int | None = None
    value_accounting: str = "itemized"
    seed: int = 0


def parse_config(doc: dict, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from a JSON-like mapping; ``overrides`` win over ``doc``.

    Missing ``latent_rank`` defaults to a quarter of ``num_heads*head_dim``;
    missing ``value_bits`` is 4 at a rank ratio >= 0.25 and 2 below it.
    """
    merged = dict(doc)
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = set(merged) - _ATTN_KEYS - _POLICY_KEYS - _EXTRA_KEYS
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown config key")
    for req in ("num_heads", "head_dim"):
        if req not in merged:
            raise ConfigError(req, "required")
    try:
        nd = int(merged["num_heads"]) * int(merged["head_dim"])
    except (TypeError, ValueError):
        raise ConfigError("num_heads", "must be an integer") from None
    merged.setdefault("latent_rank", max(1, nd // 4))
    if "value_bits" not in merged:
        merged["value_bits"] = 4 if 4 * int(merged["latent_rank"]) >= nd else 2
    if "recent_window" not in merged and "recent" in merged:
        merged["recent_window"] = merged["recent"]

    attn_kw = {k: merged[k] for k in _ATTN_KEYS if k in merged}
    for k, v in attn_kw.items():
        if k == "rope_pairing":
            continue
        if k == "rope_base":
            attn_kw[k] = float(v)
        elif v is not None:
            if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
                raise ConfigError(k, "must be an integer")
            attn_kw[k] = int(v)
    attention = AttentionConfig(**attn_kw)

    pol_kw = {k: merged[k] for k in _POLICY_KEYS if k in merged}
    pol_kw.setdefault("score_rank", attention.score_rank)
    if "dense_layers" in pol_kw:
        if not isinstance(pol_kw["dense_layers"], (list, tuple)):
            raise ConfigError("dense_layers", "must be a list of layer indices")
        pol_kw["dense_layers"] = tuple(pol_kw["dense_layers"])
    policy = SelectionPolicy(**pol_kw)
    if policy.score_rank > attention.latent_rank:
        raise ConfigError("score_rank", "exceeds latent_rank")

    accounting = merged.get("value_accounting", "itemized")
    if accounting not in ("itemized", "idealized"):
        raise ConfigError("value_accounting", "must be 'itemized' or 'idealized'")
    num_layers = merged.get("num_layers")
    return RunConfig(attention, policy, None if num_layers is None else int(num_layers),
                     accounting, int(merged.get("seed", 0)))


def load_config(path: str | os.PathLike, overrides: dict | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError("<file>", f"invalid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError("<file>", "top level must be a JSON object")
    return parse_config(doc, overrides)
