"""Run configuration: one flat dataclass, JSON round-trippable and hashable."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

from .errors import ConfigError

VARIANTS = ("Basic", "+TA", "+SA", "+STE", "+STF", "+SimA&STD", "+TFM", "full")


@dataclass
class TrainConfig:
    epochs: int = 128
    batch_size: int = 128
    lr: float = 1e-3
    lambda_l2: float = 1e-5
    seed: int = 0
    horizon: int = 12  # Q, forecast steps
    d_model: int = 32
    heads: int = 2  # head dim = d_model / heads
    l_nf: int = 3  # fusion MLP depth in the causality branch
    l_s: int = 1  # spatial attention layers
    l_t: int = 2  # temporal attention layers
    l_tcl: int = 3  # residual blocks per pair
    gamma_terminal: float = 0.5
    recent: int = 12  # filter: most recent steps
    daily: int = 6  # filter: daily-periodic steps
    weekly: int = 2  # filter: weekly-periodic steps
    slot_minutes: int = 5
    raw_embed_dim: int = 64
    variant: str = "full"
    share_stcl_weights: bool = False
    relu_projections: bool = True
    keep_best_val: bool = True
    graph_margin: float = 0.05

    def __post_init__(self):
        for name in (
            "epochs", "batch_size", "horizon", "d_model", "heads",
            "l_nf", "l_s", "l_t", "l_tcl", "recent", "slot_minutes",
            "raw_embed_dim",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.daily < 0 or self.weekly < 0:
            raise ConfigError("daily/weekly counts must be >= 0")
        if self.lr <= 0 or self.lambda_l2 < 0:
            raise ConfigError(f"bad lr {self.lr} or lambda_l2 {self.lambda_l2}")
        if self.d_model % self.heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} must be divisible by heads {self.heads}"
            )
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"unknown variant {self.variant!r}; valid: {', '.join(VARIANTS)}"
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        valid = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - valid
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(sorted(unknown))}")
        return cls(**doc)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def variant_features(tag: str) -> dict:
    """Cumulative architecture switches for an ablation tag."""
    if tag not in VARIANTS:
        raise ConfigError(f"unknown variant {tag!r}; valid: {', '.join(VARIANTS)}")
    rank = VARIANTS.index(tag)
    return {
        "temporal_attention": rank >= 1,
        "spatial_attention": rank >= 2,
        "ste": rank >= 3,
        "st_fusion": rank >= 4,
        "similar_decoder": rank >= 5,
        "time_filter": rank >= 6,
        "stcl": rank >= 7,
    }
