"""Tensor primitives, losses, parameter store, Adam and finite-difference checks.

Autograd itself comes from torch; this module pins the handful of ops the
models are built from and owns the optimizer state so checkpoints can
round-trip it exactly.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import MissingGrad, NonFiniteLoss, ShapeMismatch


def conv1d(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None = None, stride: int = 1,
           padding: int = 0, pad_mode: str = "zeros") -> torch.Tensor:
    """1-D convolution over ``[B, C_in, T]``.

    ``T' = floor((T + 2*padding - kernel) / stride) + 1``. ``pad_mode`` is
    ``"zeros"`` or ``"replicate"``.
    """
    if x.dim() != 3 or w.dim() != 3:
        raise ShapeMismatch("conv1d expects x [B, C, T] and w [C_out, C_in, k]")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    if stride < 1:
        raise ShapeMismatch("stride must be >= 1")
    if x.shape[2] + 2 * padding < w.shape[2]:
        raise ShapeMismatch("kernel does not fit the padded input")
    if padding and pad_mode == "replicate":
        x = F.pad(x, (padding, padding), mode="replicate")
        padding = 0
    return F.conv1d(x, w, b, stride=stride, padding=padding)


def conv1d_out_len(T: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (T + 2 * padding - kernel) // stride + 1


class Conv1d(nn.Conv1d):
    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, pad_mode="replicate"):
        super().__init__(c_in, c_out, kernel, stride=stride, padding=padding)
        self.pad_mode = pad_mode

    def forward(self, x):
        return conv1d(x, self.weight, self.bias, self.stride[0], self.padding[0], self.pad_mode)


def causal_attention(x: torch.Tensor, w_qkv: torch.Tensor, b_qkv: torch.Tensor | None,
                     w_out: torch.Tensor, b_out: torch.Tensor | None, heads: int,
                     past: tuple[torch.Tensor, torch.Tensor] | None = None,
                     return_weights: bool = False):
    """Multi-head causal self-attention over ``[B, T, D]``.

    ``past`` holds cached ``(k, v)`` of shape ``[B, H, T_past, D/H]``; the
    new positions attend to all cached positions and causally to each
    other. Returns ``(out, (k, v))`` or ``(out, (k, v), weights)``.
    """
    B, T, D = x.shape
    if D % heads:
        raise ShapeMismatch(f"model width {D} not divisible by {heads} heads")
    dh = D // heads
    qkv = F.linear(x, w_qkv, b_qkv)
    q, k, v = qkv.split(D, dim=-1)
    q = q.view(B, T, heads, dh).transpose(1, 2)
    k = k.view(B, T, heads, dh).transpose(1, 2)
    v = v.view(B, T, heads, dh).transpose(1, 2)
    if past is not None:
        k = torch.cat([past[0], k], dim=2)
        v = torch.cat([past[1], v], dim=2)
    Tk = k.shape[2]
    offset = Tk - T
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
    qi = torch.arange(T).unsqueeze(1) + offset
    ki = torch.arange(Tk).unsqueeze(0)
    scores = scores.masked_fill(ki > qi, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    out = (weights @ v).transpose(1, 2).reshape(B, T, D)
    out = F.linear(out, w_out, b_out)
    if return_weights:
        return out, (k, v), weights
    return out, (k, v)


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        if d_model % heads:
            raise ShapeMismatch(f"model width {d_model} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x, past=None):
        return causal_attention(x, self.qkv.weight, self.qkv.bias, self.proj.weight,
                                self.proj.bias, self.heads, past)


def smooth_l1(pred: torch.Tensor, target: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Mean smoothed-L1, reduced in float64."""
    d = (pred - target).abs()
    per = torch.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)
    return per.double().mean()


def token_nll(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-position negative log-likelihood in float64."""
    logp = torch.log_softmax(logits.double(), dim=-1)
    return -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)


# ---------------------------------------------------------------------------
# Parameters and optimizer
# ---------------------------------------------------------------------------

class ParameterStore:
    """Named parameters plus Adam moments and a step counter."""

    def __init__(self, params: "OrderedDict[str, torch.Tensor] | Iterable"):
        self.params = OrderedDict(params)
        self.exp_avg = OrderedDict((k, torch.zeros_like(p)) for k, p in self.params.items())
        self.exp_avg_sq = OrderedDict((k, torch.zeros_like(p)) for k, p in self.params.items())
        self.step = 0

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParameterStore":
        return cls((n, p) for n, p in module.named_parameters() if p.requires_grad)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.exp_avg[k]
            out[f"adam.v.{k}"] = self.exp_avg_sq[k]
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor], step: int):
        for k in self.params:
            self.exp_avg[k] = tensors[f"adam.m.{k}"].clone()
            self.exp_avg_sq[k] = tensors[f"adam.v.{k}"].clone()
        self.step = int(step)


@torch.no_grad()
def adam_step(store: ParameterStore, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, strict: bool = True, max_grad_norm: float | None = None):
    """Bias-corrected Adam update; clears gradients afterwards.

    Parameters without a gradient are skipped unless ``strict``.
    """
    missing = [k for k, p in store.params.items() if p.grad is None]
    if missing and (strict or len(missing) == len(store.params)):
        raise MissingGrad(f"no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    if max_grad_norm is not None:
        grads = [p.grad for p in store.params.values() if p.grad is not None]
        total = torch.sqrt(sum((g.double() ** 2).sum() for g in grads))
        if not torch.isfinite(total):
            raise NonFiniteLoss("non-finite gradient norm")
        scale = min(1.0, max_grad_norm / (float(total) + 1e-12))
        if scale < 1.0:
            for g in grads:
                g.mul_(scale)
    store.step += 1
    t = store.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for k, p in store.params.items():
        g = p.grad
        if g is None:
            continue
        m = store.exp_avg[k]
        v = store.exp_avg_sq[k]
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        denom = (v / bc2).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    store.zero_grad()


def grad_check(f: Callable[[], torch.Tensor], params: dict[str, torch.Tensor] | list, eps: float = 1e-4,
               n_coords: int = 50, seed: int = 0) -> float:
    """Max relative error between autograd and central differences.

    ``f`` rebuilds the graph and returns a scalar. Coordinates are sampled
    uniformly over the flattened ``params``; error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-5, 1e-2]")
    plist = list(params.values()) if isinstance(params, dict) else list(params)
    for p in plist:
        p.grad = None
    loss = f()
    if not torch.isfinite(loss):
        raise NonFiniteLoss("objective is not finite")
    loss.backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in plist]
    sizes = np.array([p.numel() for p in plist])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(offsets[-1], size=min(n_coords, int(offsets[-1])), replace=False)
    worst = 0.0
    with torch.no_grad():
        for gi in flat_idx:
            pi = int(np.searchsorted(offsets, gi, side="right") - 1)
            local = int(gi - offsets[pi])
            flat = plist[pi].view(-1)
            orig = flat[local].item()
            flat[local] = orig + eps
            up = float(f())
            flat[local] = orig - eps
            down = float(f())
            flat[local] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NonFiniteLoss("objective became non-finite during differencing")
            num = (up - down) / (2 * eps)
            a = float(analytic[pi].view(-1)[local])
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    for p in plist:
        p.grad = None
    return worst
