"""Traffic-diffusion branch: per-pair temporal/spatial causality learning.

Each road pair (m, n) owns a small residual stack over its two filtered
histories, a 2x2 spatial mixing matrix per block, and a tanh fusion MLP.
Pair outputs are summed over the pair set and projected to a per-horizon,
per-road representation.

Functional single-pair ops are provided for verification; `STCLBank` runs
the same math vectorized over pairs and batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ContractError, RangeError
from .roadnet import RoadPairSet


def layer_relevance(q: int, q_r: int, gamma_terminal: float = 0.5) -> float:
    """Per-block weight: gamma_q = 1 - (q / Q_R) * (1 - gamma_terminal)."""
    if not 1 <= q <= q_r:
        raise ContractError(f"block index {q} outside 1..{q_r}")
    return 1.0 - (q / q_r) * (1.0 - gamma_terminal)


def relevance_schedule(q_r: int, gamma_terminal: float = 0.5) -> list:
    return [layer_relevance(q, q_r, gamma_terminal) for q in range(1, q_r + 1)]


def tcl_forward(pair_history: torch.Tensor, b_mats: list, gammas: list) -> list:
    """Residual stack over a (2, P) pair history; returns all block outputs.

    Block 1 projects the history through B_1 (P x d), with the skip routed
    through the same projection so shapes agree; later blocks use identity
    skips: R^q = ReLU(gamma_q * (R^{q-1} B_q) + R^{q-1}).
    """
    if pair_history.shape[0] != 2 or pair_history.ndim != 2:
        raise ContractError(f"pair history must be (2, P), got {tuple(pair_history.shape)}")
    if pair_history.shape[1] != b_mats[0].shape[0]:
        raise ContractError(
            f"history length {pair_history.shape[1]} != B_1 rows {b_mats[0].shape[0]}"
        )
    if len(b_mats) != len(gammas):
        raise ContractError(f"{len(b_mats)} weight matrices vs {len(gammas)} relevances")
    outs = []
    r = pair_history
    for q, (b, gamma) in enumerate(zip(b_mats, gammas), start=1):
        if q == 1:
            r = torch.relu((1.0 + gamma) * (r @ b))
        else:
            r = torch.relu(gamma * (r @ b) + r)
        outs.append(r)
    return outs


def scl_forward(r_q: torch.Tensor, a_q: torch.Tensor) -> torch.Tensor:
    """Spatial mixing: (R_hat)^T = R^T A, i.e. R_hat = A^T R.

    Row m of the output is a11*r_m + a21*r_n; row n is a12*r_m + a22*r_n.
    """
    if a_q.shape != (2, 2):
        raise ContractError(f"spatial matrix must be 2x2, got {tuple(a_q.shape)}")
    if r_q.shape[0] != 2:
        raise ContractError(f"representation must be (2, d), got {tuple(r_q.shape)}")
    return a_q.T @ r_q


def nf_forward(concat: torch.Tensor, weights: list, biases: list) -> torch.Tensor:
    """Stack of tanh(x @ W_s + b_s) layers over the concatenated block outputs."""
    if len(weights) == 0:
        raise ConfigError("fusion MLP needs at least one layer")
    if concat.shape[-1] != weights[0].shape[0]:
        raise ContractError(
            f"concat width {concat.shape[-1]} != W_1 rows {weights[0].shape[0]}"
        )
    f = concat
    for w, b in zip(weights, biases):
        f = torch.tanh(f @ w + b)
    return f


def aggregate_pairs(per_pair_outputs: list) -> torch.Tensor:
    """Elementwise sum over pair outputs, in the given (fixed) order."""
    if len(per_pair_outputs) == 0:
        raise ContractError("cannot aggregate an empty pair set")
    total = per_pair_outputs[0]
    for x in per_pair_outputs[1:]:
        total = total + x
    return total


def stcl_project(
    f_d: torch.Tensor,
    expand_weight: torch.Tensor,
    expand_bias: torch.Tensor,
    w_p: torch.Tensor,
) -> torch.Tensor:
    """(2, d) network summary -> (Q, N, d) per-horizon road representation.

    The summary is flattened, expanded to N x d by one affine layer, then
    each horizon applies its own d x d map from w_p (Q, d, d).
    """
    d = f_d.shape[-1]
    n = expand_weight.shape[1] // d
    flat = f_d.reshape(-1, 2 * d)  # batch-or-single x 2d
    base = (flat @ expand_weight + expand_bias).reshape(-1, n, d)
    out = torch.einsum("bnd,qde->bqne", base, w_p)
    return out[0] if f_d.ndim == 2 else out


@dataclass
class PairCausalState:
    """Numpy snapshot of one pair's trained parameters (read-only views)."""

    pair: tuple
    b_mats: list  # B_1 (P, d), then (d, d)
    a_mats: list  # Q_R matrices, each (2, 2)
    nf_weights: list
    nf_biases: list


class STCLBank(nn.Module):
    """All road pairs' causality parameters, evaluated in one vectorized pass.

    history: (B, P, N, 1) filtered, normalized speeds -> (B, Q, N, d_model).
    """

    def __init__(
        self,
        pair_set: RoadPairSet,
        num_roads: int,
        filter_len: int,
        d_model: int,
        horizon: int,
        q_r: int = 3,
        l_nf: int = 3,
        gamma_terminal: float = 0.5,
        share_weights: bool = False,
    ):
        super().__init__()
        if len(pair_set.pairs) == 0:
            raise ContractError("pair set is empty; no causality to learn")
        if q_r < 1 or l_nf < 1:
            raise ConfigError(f"need q_r >= 1 and l_nf >= 1, got {q_r}, {l_nf}")
        self.pairs = pair_set.pairs
        self.order_tags = pair_set.order_tags
        self.num_roads = num_roads
        self.q_r = q_r
        self.l_nf = l_nf
        self.share_weights = share_weights
        self.gammas = relevance_schedule(q_r, gamma_terminal)
        self.register_buffer(
            "pair_index", torch.as_tensor(pair_set.index_array(), dtype=torch.long)
        )

        k = 1 if share_weights else len(self.pairs)
        p, d = filter_len, d_model
        self.b1 = nn.Parameter(torch.randn(k, p, d) / p**0.5)
        self.b_rest = nn.Parameter(torch.randn(max(q_r - 1, 0), k, d, d) / d**0.5)
        eye = torch.eye(2).expand(q_r, k, 2, 2).clone()
        self.a = nn.Parameter(eye)  # identity start: no initial direction bias
        w = q_r * d
        self.nf_w1 = nn.Parameter(torch.randn(k, w, d) / w**0.5)
        self.nf_w_rest = nn.Parameter(torch.randn(max(l_nf - 1, 0), k, d, d) / d**0.5)
        self.nf_b = nn.Parameter(torch.zeros(l_nf, k, d))
        self.expand = nn.Linear(2 * d, num_roads * d)
        self.w_p = nn.Parameter(torch.randn(horizon, d, d) / d**0.5)

    def _k(self) -> int:
        return len(self.pairs)

    def _expand_k(self, t: torch.Tensor, dim: int) -> torch.Tensor:
        if not self.share_weights:
            return t
        shape = list(t.shape)
        shape[dim] = self._k()
        return t.expand(shape)

    def pair_histories(self, history: torch.Tensor) -> torch.Tensor:
        """(B, P, N, 1) -> (B, K, 2, P) rows ordered (m, n) per pair."""
        if history.ndim != 4 or history.shape[-1] != 1:
            raise ContractError(f"history must be (B, P, N, 1), got {tuple(history.shape)}")
        if history.shape[2] != self.num_roads:
            raise ContractError(
                f"history has {history.shape[2]} roads, bank built for {self.num_roads}"
            )
        x = history[..., 0]  # (B, P, N)
        gathered = x[:, :, self.pair_index]  # (B, P, K, 2)
        return gathered.permute(0, 2, 3, 1)

    def fused_pair_outputs(self, history: torch.Tensor) -> torch.Tensor:
        """(B, P, N, 1) -> per-pair fusion outputs (B, K, 2, d_model)."""
        r = self.pair_histories(history)  # (B, K, 2, P)
        b1 = self._expand_k(self.b1, 0)
        outs = []
        for q in range(1, self.q_r + 1):
            gamma = self.gammas[q - 1]
            if q == 1:
                r = torch.relu((1.0 + gamma) * torch.einsum("bkrp,kpd->bkrd", r, b1))
            else:
                bq = self._expand_k(self.b_rest[q - 2], 0)
                r = torch.relu(gamma * torch.einsum("bkrd,kde->bkre", r, bq) + r)
            a_q = self._expand_k(self.a[q - 1], 0)
            r = torch.einsum("krs,bkrd->bksd", a_q, r)
            outs.append(r)
        f = torch.cat(outs, dim=-1)  # (B, K, 2, q_r*d)
        for s in range(self.l_nf):
            w = self.nf_w1 if s == 0 else self.nf_w_rest[s - 1]
            w = self._expand_k(w, 0)
            b = self._expand_k(self.nf_b[s], 0)
            f = torch.tanh(torch.einsum("bkrw,kwd->bkrd", f, w) + b[None, :, None, :])
        return f

    def forward(self, history: torch.Tensor) -> torch.Tensor:
        f = self.fused_pair_outputs(history)
        f_d = f.sum(dim=1)  # (B, 2, d): fixed pair order, deterministic
        return stcl_project(f_d, self.expand.weight.T, self.expand.bias, self.w_p)

    # ---- interpretability access -------------------------------------

    def pair_position(self, m: int, n: int) -> int:
        try:
            return self.pairs.index((m, n) if m < n else (n, m))
        except ValueError:
            raise RangeError(f"pair ({m}, {n}) is not in the bank") from None

    def pair_state(self, k: int) -> PairCausalState:
        if not 0 <= k < len(self.pairs):
            raise RangeError(f"pair position {k} outside 0..{len(self.pairs) - 1}")
        i = 0 if self.share_weights else k
        with torch.no_grad():
            b_mats = [self.b1[i].numpy().copy()]
            b_mats += [self.b_rest[q, i].numpy().copy() for q in range(self.q_r - 1)]
            a_mats = [self.a[q, i].numpy().copy() for q in range(self.q_r)]
            nf_w = [self.nf_w1[i].numpy().copy()]
            nf_w += [self.nf_w_rest[s, i].numpy().copy() for s in range(self.l_nf - 1)]
            nf_b = [self.nf_b[s, i].numpy().copy() for s in range(self.l_nf)]
        return PairCausalState(
            pair=self.pairs[k],
            b_mats=b_mats,
            a_mats=a_mats,
            nf_weights=nf_w,
            nf_biases=nf_b,
        )

    def all_pair_states(self) -> list:
        return [self.pair_state(k) for k in range(len(self.pairs))]

    def reference_forward(self, history: torch.Tensor) -> torch.Tensor:
        """Slow per-pair loop through the functional ops; used as an oracle."""
        outs = []
        for b in range(history.shape[0]):
            per_pair = []
            for k, (m, n) in enumerate(self.pairs):
                i = 0 if self.share_weights else k
                r = torch.stack([history[b, :, m, 0], history[b, :, n, 0]])  # (2, P)
                b_mats = [self.b1[i]] + [self.b_rest[q, i] for q in range(self.q_r - 1)]
                blocks = []
                for q in range(1, self.q_r + 1):
                    if q == 1:
                        r = torch.relu((1.0 + self.gammas[0]) * (r @ b_mats[0]))
                    else:
                        r = torch.relu(self.gammas[q - 1] * (r @ b_mats[q - 1]) + r)
                    r = scl_forward(r, self.a[q - 1, i])
                    blocks.append(r)
                cat = torch.cat(blocks, dim=-1)
                nf_w = [self.nf_w1[i]] + [self.nf_w_rest[s, i] for s in range(self.l_nf - 1)]
                nf_b = [self.nf_b[s, i] for s in range(self.l_nf)]
                per_pair.append(nf_forward(cat, nf_w, nf_b))
            f_d = aggregate_pairs(per_pair)
            outs.append(
                stcl_project(f_d, self.expand.weight.T, self.expand.bias, self.w_p)
            )
        return torch.stack(outs)
