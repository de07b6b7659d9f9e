"""Shared numeric building blocks and the gradient checking harness.

Everything differentiable runs on torch tensors (CPU); the finite-difference
harness below is the ground truth that the analytic gradients of every block
in this package are checked against.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ContractError


def seed_all(seed: int) -> None:
    """Seed torch, numpy's legacy global RNG, and the stdlib RNG."""
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    random.seed(seed)


def affine(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None):
    """x @ weight + bias over the last axis, with explicit shape contracts."""
    if weight.ndim != 2:
        raise ContractError(f"weight must be 2-D, got shape {tuple(weight.shape)}")
    if x.shape[-1] != weight.shape[0]:
        raise ContractError(
            f"affine mismatch: x has {x.shape[-1]} features, weight expects {weight.shape[0]}"
        )
    out = x @ weight
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ContractError(
                f"bias shape {tuple(bias.shape)} != ({weight.shape[1]},)"
            )
        out = out + bias
    return out


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def tanh(x: torch.Tensor) -> torch.Tensor:
    return torch.tanh(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def softmax_lastdim(x: torch.Tensor) -> torch.Tensor:
    """Numerically stable softmax over the last axis."""
    shifted = x - x.max(dim=-1, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


class BatchNormLastDim(nn.Module):
    """Batch normalization over the last axis, all leading axes flattened.

    `momentum` here is the fraction of the running statistics kept per step
    (0.9 keeps 90%), which maps to torch's momentum of 1 - 0.9.
    """

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.9):
        super().__init__()
        self.bn = nn.BatchNorm1d(num_features, eps=eps, momentum=1.0 - momentum)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        c = x.shape[-1]
        flat = x.reshape(-1, c)
        if self.training and flat.shape[0] < 2:
            raise ContractError(
                f"batch norm needs >= 2 flattened rows in training, got {flat.shape[0]}"
            )
        return self.bn(flat).reshape(x.shape)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)  # name -> tensor
    second_moment: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One Adam update, in place. `params` and `grads` map name -> tensor.

    Parameters with no gradient entry (or None) are left untouched and their
    moments are not advanced.
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ContractError(
                    f"gradient shape {tuple(g.shape)} != param {name} shape {tuple(p.shape)}"
                )
            if name not in state.first_moment:
                state.first_moment[name] = torch.zeros_like(p)
                state.second_moment[name] = torch.zeros_like(p)
            m = state.first_moment[name]
            v = state.second_moment[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(state.eps), value=-state.lr)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(
    fn,
    inputs: list,
    h: float = 1e-5,
    rel_floor: float = 1e-8,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn(*inputs)` must return a scalar tensor. Inputs are cloned to float64;
    relative error uses max(|analytic| + |numeric|, rel_floor) in the
    denominator so that near-zero gradients are compared absolutely.
    """
    xs = [x.detach().double().clone().requires_grad_(True) for x in inputs]
    out = fn(*xs)
    if out.ndim != 0:
        raise ContractError(f"fn must return a scalar, got shape {tuple(out.shape)}")
    analytic = torch.autograd.grad(out, xs, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for x, a in zip(xs, analytic):
            a = torch.zeros_like(x) if a is None else a
            flat = x.reshape(-1)
            num = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = fn(*xs).item()
                flat[i] = orig - h
                dn = fn(*xs).item()
                flat[i] = orig
                num[i] = (up - dn) / (2.0 * h)
            num = num.reshape(x.shape)
            denom = torch.clamp(a.abs() + num.abs(), min=rel_floor)
            worst = max(worst, ((a - num).abs() / denom).max().item())
    return worst
