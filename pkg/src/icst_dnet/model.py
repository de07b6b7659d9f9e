"""The assembled forecasting network and its ablation ladder.

Inputs per batch: filtered speed history (B, P, N, 1), calendar features for
the history steps (B, P, 7+Z) and for the future steps (B, Q, 7+Z). Output:
normalized speed predictions (B, Q, N, 1).
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .config import TrainConfig, variant_features
from .embeddings import STEmbedding
from .errors import ContractError
from .roadnet import RoadPairSet
from .sfpr import SimilarAttention, SpeedEmbedding, STEncoder
from .stcl import STCLBank


def predict_fuse(
    hst_dec: torch.Tensor,
    h_stcl: torch.Tensor,
    alpha_logit: torch.Tensor,
    head_weight: torch.Tensor,
    head_bias: torch.Tensor,
) -> torch.Tensor:
    """Convex blend of the two branches, then the scalar output head."""
    if hst_dec.shape != h_stcl.shape:
        raise ContractError(
            f"branch shapes differ: {tuple(hst_dec.shape)} vs {tuple(h_stcl.shape)}"
        )
    alpha = torch.sigmoid(alpha_logit)
    h = alpha * hst_dec + (1.0 - alpha) * h_stcl
    return h @ head_weight + head_bias


class ICSTDNet(nn.Module):
    """Full network; lower ablation rungs instantiate only what they use."""

    def __init__(
        self,
        cfg: TrainConfig,
        num_roads: int,
        filter_len: int,
        pair_set: RoadPairSet | None = None,
        road_vectors: np.ndarray | None = None,
        time_dim: int | None = None,
    ):
        super().__init__()
        self.cfg = cfg
        self.num_roads = num_roads
        self.filter_len = filter_len
        self.features = variant_features(cfg.variant)
        d = cfg.d_model

        if not self.features["temporal_attention"]:
            # two plain affine layers per road over the flattened history
            self.basic_fc1 = nn.Linear(filter_len, 64)
            self.basic_fc2 = nn.Linear(64, cfg.horizon)
            return

        self.embed = SpeedEmbedding(d)
        if self.features["ste"]:
            if road_vectors is None or time_dim is None:
                raise ContractError("this variant needs road vectors and calendar width")
            self.ste = STEmbedding(road_vectors, time_dim, d)
        combine = "gate" if self.features["st_fusion"] else "mean"
        self.enc = STEncoder(
            d,
            cfg.heads,
            spatial_layers=cfg.l_s if self.features["spatial_attention"] else 0,
            temporal_layers=cfg.l_t,
            relu_projections=cfg.relu_projections,
            use_ste=self.features["ste"],
            combine=combine,
        )
        if self.features["similar_decoder"]:
            self.sim = SimilarAttention(d, cfg.heads, cfg.relu_projections)
            self.dec = STEncoder(
                d,
                cfg.heads,
                spatial_layers=cfg.l_s,
                temporal_layers=cfg.l_t,
                relu_projections=cfg.relu_projections,
                use_ste=True,
                combine=combine,
            )
            self.head = nn.Linear(d, 1)
        else:
            self.readout = nn.Linear(filter_len * d, cfg.horizon)

        if self.features["stcl"]:
            if pair_set is None:
                raise ContractError("the full variant needs the road-pair set")
            self.stcl = STCLBank(
                pair_set,
                num_roads,
                filter_len,
                d,
                cfg.horizon,
                q_r=cfg.l_tcl,
                l_nf=cfg.l_nf,
                gamma_terminal=cfg.gamma_terminal,
                share_weights=cfg.share_stcl_weights,
            )
            self.alpha_logit = nn.Parameter(torch.zeros(()))

    def forward(
        self,
        history: torch.Tensor,
        time_hist: torch.Tensor | None = None,
        time_future: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if history.ndim != 4 or history.shape[-1] != 1:
            raise ContractError(f"history must be (B, P, N, 1), got {tuple(history.shape)}")
        if history.shape[1] != self.filter_len:
            raise ContractError(
                f"history has {history.shape[1]} steps, model expects {self.filter_len}"
            )

        if not self.features["temporal_attention"]:
            x = history[..., 0].permute(0, 2, 1)  # (B, N, P)
            out = self.basic_fc2(torch.relu(self.basic_fc1(x)))  # (B, N, Q)
            return out.permute(0, 2, 1)[..., None]

        h = self.embed(history)  # (B, P, N, d)
        ste_hist = ste_future = None
        if self.features["ste"]:
            if time_hist is None or time_future is None:
                raise ContractError("this variant needs calendar features for both spans")
            ste_hist = self.ste(time_hist)  # (B, P, N, d)
            ste_future = self.ste(time_future)  # (B, Q, N, d)

        hst_enc = self.enc(h, ste_hist)

        if not self.features["similar_decoder"]:
            b, p, n, d = hst_enc.shape
            flat = hst_enc.permute(0, 2, 1, 3).reshape(b, n, p * d)
            return self.readout(flat).permute(0, 2, 1)[..., None]

        h_dec = self.sim(hst_enc, ste_hist, ste_future)
        hst_dec = self.dec(h_dec, ste_future)  # (B, Q, N, d)

        if not self.features["stcl"]:
            return self.head(hst_dec)

        h_stcl = self.stcl(history)  # (B, Q, N, d)
        return predict_fuse(
            hst_dec, h_stcl, self.alpha_logit, self.head.weight.T, self.head.bias
        )

    def alpha(self) -> float:
        if not self.features["stcl"]:
            raise ContractError("this variant has no branch-blend parameter")
        return float(torch.sigmoid(self.alpha_logit))
