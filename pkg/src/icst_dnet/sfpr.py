"""Fluctuation-pattern branch: attention encoder/decoder over filtered windows.

Layout convention throughout: (batch, steps, roads, d_model). Spatial
attention mixes roads within a timestep, temporal attention mixes timesteps
within a road, similar attention carries encoder history into the future
steps using calendar/road embeddings as the addressing key.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import ContractError
from .primitives import BatchNormLastDim, softmax_lastdim


class SpeedEmbedding(nn.Module):
    """Pointwise two-layer ReLU map from scalar speeds to d_model features."""

    def __init__(self, d_model: int):
        super().__init__()
        self.fc1 = nn.Linear(1, d_model)
        self.fc2 = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != 1:
            raise ContractError(f"expected channel dim 1, got {tuple(x.shape)}")
        return torch.relu(self.fc2(torch.relu(self.fc1(x))))


class AttentionHead(nn.Module):
    """Per-head query/key/value projections (affine + optional ReLU)."""

    def __init__(self, q_in: int, k_in: int, v_in: int, head_dim: int, relu: bool = True):
        super().__init__()
        self.q = nn.Linear(q_in, head_dim)
        self.k = nn.Linear(k_in, head_dim)
        self.v = nn.Linear(v_in, head_dim)
        self.relu = relu

    def project(self, which: str, x: torch.Tensor) -> torch.Tensor:
        out = getattr(self, which)(x)
        return torch.relu(out) if self.relu else out


def _check_heads(d_model: int, heads: int):
    if d_model % heads != 0:
        raise ContractError(f"d_model {d_model} not divisible by {heads} heads")
    return d_model // heads


class SpatialAttentionLayer(nn.Module):
    """Road-to-road attention at each timestep, queries/keys/values from
    [features, embedding] concatenation; residual then batch norm.

    With use_ste=False (ablation), projections read the features alone.
    """

    def __init__(
        self,
        d_model: int,
        heads: int = 2,
        relu_projections: bool = True,
        use_ste: bool = True,
    ):
        super().__init__()
        head_dim = _check_heads(d_model, heads)
        self.head_dim = head_dim
        self.use_ste = use_ste
        in_dim = 2 * d_model if use_ste else d_model
        self.heads = nn.ModuleDict(
            {
                f"head{m}": AttentionHead(in_dim, in_dim, in_dim, head_dim, relu_projections)
                for m in range(heads)
            }
        )
        self.out = nn.Linear(d_model, d_model, bias=False)
        self.norm = BatchNormLastDim(d_model)

    def forward(self, h: torch.Tensor, ste=None, return_attention=False):
        if self.use_ste:
            if ste is None or h.shape != ste.shape:
                raise ContractError(
                    f"feature/embedding shapes differ: {tuple(h.shape)} vs "
                    f"{None if ste is None else tuple(ste.shape)}"
                )
            x = torch.cat([h, ste], dim=-1)  # (B, S, N, 2d)
        else:
            x = h
        mixed, weights = [], []
        for m in range(len(self.heads)):
            head = self.heads[f"head{m}"]
            q = head.project("q", x)
            k = head.project("k", x)
            v = head.project("v", x)
            scores = torch.einsum("bsnd,bsvd->bsnv", q, k) / self.head_dim**0.5
            attn = softmax_lastdim(scores)  # over roads v
            mixed.append(torch.einsum("bsnv,bsvd->bsnd", attn, v))
            weights.append(attn)
        out = self.norm(self.out(torch.cat(mixed, dim=-1)) + h)
        if return_attention:
            return out, torch.stack(weights, dim=1)  # (B, M, S, N, N)
        return out


class TemporalAttentionLayer(nn.Module):
    """Step-to-step self-attention within each road, from features alone."""

    def __init__(self, d_model: int, heads: int = 2, relu_projections: bool = True):
        super().__init__()
        head_dim = _check_heads(d_model, heads)
        self.head_dim = head_dim
        self.heads = nn.ModuleDict(
            {
                f"head{m}": AttentionHead(d_model, d_model, d_model, head_dim, relu_projections)
                for m in range(heads)
            }
        )
        self.out = nn.Linear(d_model, d_model, bias=False)
        self.norm = BatchNormLastDim(d_model)

    def forward(self, h: torch.Tensor, return_attention=False):
        mixed, weights = [], []
        for m in range(len(self.heads)):
            head = self.heads[f"head{m}"]
            q = head.project("q", h)
            k = head.project("k", h)
            v = head.project("v", h)
            scores = torch.einsum("bsnd,btnd->bnst", q, k) / self.head_dim**0.5
            attn = softmax_lastdim(scores)  # over source steps t
            mixed.append(torch.einsum("bnst,btnd->bsnd", attn, v))
            weights.append(attn)
        out = self.norm(self.out(torch.cat(mixed, dim=-1)) + h)
        if return_attention:
            return out, torch.stack(weights, dim=1)  # (B, M, N, S, S)
        return out


class STFusion(nn.Module):
    """Sigmoid gate blending the spatial and temporal branch outputs."""

    def __init__(self, d_model: int):
        super().__init__()
        self.w_st = nn.Parameter(torch.randn(d_model, d_model) / d_model**0.5)
        self.w_t = nn.Parameter(torch.randn(d_model, d_model) / d_model**0.5)
        self.bias = nn.Parameter(torch.zeros(d_model))

    def gate(self, hs: torch.Tensor, ht: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid((hs * ht) @ self.w_st + ht @ self.w_t + self.bias)

    def forward(self, hs: torch.Tensor, ht: torch.Tensor) -> torch.Tensor:
        if hs.shape != ht.shape:
            raise ContractError(
                f"branch shapes differ: {tuple(hs.shape)} vs {tuple(ht.shape)}"
            )
        z = self.gate(hs, ht)
        return hs * z + ht * (1.0 - z)


class STEncoder(nn.Module):
    """Parallel spatial/temporal attention stacks merged by the fusion gate.

    The same block serves as the decoder over future steps (own parameters).
    Ablation hooks: spatial_layers=0 drops the spatial branch entirely,
    combine="mean" replaces the gate with a plain average, use_ste=False
    makes spatial attention read features only.
    """

    def __init__(
        self,
        d_model: int,
        heads: int = 2,
        spatial_layers: int = 1,
        temporal_layers: int = 2,
        relu_projections: bool = True,
        use_ste: bool = True,
        combine: str = "gate",
    ):
        super().__init__()
        if combine not in ("gate", "mean"):
            raise ContractError(f"combine must be 'gate' or 'mean', got {combine!r}")
        self.combine = combine
        self.spatial = nn.ModuleDict(
            {
                f"spatial{l}": SpatialAttentionLayer(
                    d_model, heads, relu_projections, use_ste
                )
                for l in range(spatial_layers)
            }
        )
        self.temporal = nn.ModuleDict(
            {
                f"temporal{l}": TemporalAttentionLayer(d_model, heads, relu_projections)
                for l in range(temporal_layers)
            }
        )
        if spatial_layers > 0 and combine == "gate":
            self.fusion = STFusion(d_model)

    def forward(self, h: torch.Tensor, ste=None) -> torch.Tensor:
        ht = h
        for l in range(len(self.temporal)):
            ht = self.temporal[f"temporal{l}"](ht)
        if len(self.spatial) == 0:
            return ht
        hs = h
        for l in range(len(self.spatial)):
            hs = self.spatial[f"spatial{l}"](hs, ste)
        if self.combine == "mean":
            return 0.5 * (hs + ht)
        return self.fusion(hs, ht)


class SimilarAttention(nn.Module):
    """Cross-attention addressing encoder history by embedding similarity.

    Queries come from the future-step embeddings, keys from the historical
    ones, values from the encoder output; a single layer, no residual.
    """

    def __init__(self, d_model: int, heads: int = 2, relu_projections: bool = True):
        super().__init__()
        head_dim = _check_heads(d_model, heads)
        self.head_dim = head_dim
        self.heads = nn.ModuleDict(
            {
                f"head{m}": AttentionHead(d_model, d_model, d_model, head_dim, relu_projections)
                for m in range(heads)
            }
        )
        self.out = nn.Linear(d_model, d_model, bias=False)
        self.norm = BatchNormLastDim(d_model)

    def forward(
        self,
        hst_enc: torch.Tensor,  # (B, P, N, d)
        ste_hist: torch.Tensor,  # (B, P, N, d)
        ste_future: torch.Tensor,  # (B, Q, N, d)
        return_attention=False,
    ):
        if hst_enc.shape != ste_hist.shape:
            raise ContractError(
                f"encoder/embedding history shapes differ: "
                f"{tuple(hst_enc.shape)} vs {tuple(ste_hist.shape)}"
            )
        mixed, weights = [], []
        for m in range(len(self.heads)):
            head = self.heads[f"head{m}"]
            q = head.project("q", ste_future)  # (B, Q, N, dh)
            k = head.project("k", ste_hist)  # (B, P, N, dh)
            v = head.project("v", hst_enc)  # (B, P, N, dh)
            scores = torch.einsum("bqnd,bpnd->bnqp", q, k) / self.head_dim**0.5
            attn = softmax_lastdim(scores)  # over history steps p
            mixed.append(torch.einsum("bnqp,bpnd->bqnd", attn, v))
            weights.append(attn)
        out = self.norm(self.out(torch.cat(mixed, dim=-1)))
        if return_attention:
            return out, torch.stack(weights, dim=1)  # (B, M, N, Q, P)
        return out
