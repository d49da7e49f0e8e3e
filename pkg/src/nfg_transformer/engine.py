"""Differentiable numerics on top of torch autograd.

Attention kernels, the pre-norm attention layer used throughout the model,
per-token MLPs, a functional Adam step, a finite-difference gradient
checker and the checkpoint container.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

__all__ = [
    "attention",
    "masked_attention",
    "AttentionBlock",
    "multi_head_attention",
    "MLP",
    "mlp",
    "AdamState",
    "adam_init",
    "adam_step",
    "GradCheckReport",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_FORMAT",
]

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "nfgt-checkpoint/1"


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """``softmax(q k^T / sqrt(d_k)) v`` over the last two axes."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention shape mismatch: q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)}")
    return _mix(torch.softmax(_scores(q, k), dim=-1), v)


def masked_attention(q: Tensor, k: Tensor, v: Tensor, m_q: Tensor | None, m_kv: Tensor | None) -> Tensor:
    """Attention restricted to valid query/key pairs.

    Invalid pairs get ``-inf`` logits.  Rows with no valid key, and rows
    whose query is invalid, produce zeros and pass no gradient.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention shape mismatch: q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)}")
    if m_q is None and m_kv is None:
        return attention(q, k, v)
    n_q, n_k = q.shape[-2], k.shape[-2]
    if m_q is None:
        m_q = torch.ones(q.shape[:-1], dtype=torch.bool, device=q.device)
    if m_kv is None:
        m_kv = torch.ones(k.shape[:-1], dtype=torch.bool, device=k.device)
    if m_q.shape[-1] != n_q or m_kv.shape[-1] != n_k:
        raise ValueError(f"mask lengths {m_q.shape[-1]}, {m_kv.shape[-1]} do not match rows {n_q}, {n_k}")
    pair = m_q.unsqueeze(-1) & m_kv.unsqueeze(-2)
    logits = _scores(q, k)
    logits = logits.masked_fill(~pair, float("-inf"))
    live = pair.any(dim=-1, keepdim=True)
    # rows without any valid key would softmax to NaN; route them through zeros
    logits = torch.where(live, logits, torch.zeros_like(logits))
    weights = torch.softmax(logits, dim=-1) * pair
    return _mix(weights, v)


# Games produce many tiny attention sets (a handful of tokens each), where
# broadcast-and-reduce beats batched matmul dispatch by a wide margin.
_SMALL = 64


def _scores(q: Tensor, k: Tensor) -> Tensor:
    scale = 1.0 / math.sqrt(q.shape[-1])
    if q.shape[-2] * k.shape[-2] <= _SMALL * _SMALL:
        return (q.unsqueeze(-2) * k.unsqueeze(-3)).sum(-1) * scale
    return (q @ k.transpose(-1, -2)) * scale


def _mix(weights: Tensor, v: Tensor) -> Tensor:
    if weights.shape[-2] * weights.shape[-1] <= _SMALL * _SMALL:
        return (weights.unsqueeze(-1) * v.unsqueeze(-3)).sum(-2)
    return weights @ v


class AttentionBlock(nn.Module):
    """Multi-head attention followed by a feed-forward network, pre-norm.

    ``x_q + Attn(LN(x_q), LN(x_kv))`` then ``h + FFN(LN(h))``.  Self-attention
    blocks share one norm between queries and keys; cross-attention blocks
    normalize the key-value set separately.
    """

    def __init__(self, dim: int, heads: int, cross: bool = False, hidden_mult: int = 4):
        super().__init__()
        if dim % heads:
            raise ValueError(f"heads={heads} must divide dim={dim}")
        self.dim, self.heads, self.cross = dim, heads, cross
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim) if cross else None
        self.query = nn.Linear(dim, dim)
        # a key bias only shifts every logit of a row equally, so it is left out
        self.key = nn.Linear(dim, dim, bias=False)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = MLP(dim, hidden_mult * dim, dim)

    def forward(self, x_q: Tensor, x_kv: Tensor | None = None, m_q: Tensor | None = None,
                m_kv: Tensor | None = None) -> Tensor:
        return multi_head_attention(x_q, x_q if x_kv is None else x_kv, m_q, m_kv, self)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    return x.unflatten(-1, (heads, x.shape[-1] // heads)).transpose(-2, -3)


def multi_head_attention(x_q: Tensor, x_kv: Tensor, m_q: Tensor | None, m_kv: Tensor | None,
                         params: AttentionBlock) -> Tensor:
    """Full attention layer: projections, masked heads, residuals, FFN.

    ``x_q`` is ``[..., n_q, D]`` and ``x_kv`` is ``[..., n_k, D]``; leading axes
    broadcast.  Returns ``[..., n_q, D]``.
    """
    if x_q.shape[-1] != params.dim or x_kv.shape[-1] != params.dim:
        raise ValueError(f"expected width {params.dim}, got {x_q.shape[-1]} and {x_kv.shape[-1]}")
    hq = params.norm_q(x_q)
    hkv = params.norm_kv(x_kv) if params.cross else params.norm_q(x_kv)
    q = _split_heads(params.query(hq), params.heads)
    k = _split_heads(params.key(hkv), params.heads)
    v = _split_heads(params.value(hkv), params.heads)
    mq = None if m_q is None else m_q.unsqueeze(-2)
    mkv = None if m_kv is None else m_kv.unsqueeze(-2)
    att = masked_attention(q, k, v, mq, mkv).transpose(-2, -3).flatten(-2)
    h = x_q + params.out(att)
    return h + params.ff(params.norm_ff(h))


class MLP(nn.Module):
    """Two affine maps with a GELU between, applied per token."""

    def __init__(self, d_in: int, hidden: int, d_out: int, out_bias: bool = True):
        super().__init__()
        self.fc1 = nn.Linear(d_in, hidden)
        self.fc2 = nn.Linear(hidden, d_out, bias=out_bias)

    def forward(self, x: Tensor) -> Tensor:
        return mlp(x, self)


def mlp(x: Tensor, params: MLP) -> Tensor:
    return params.fc2(F.gelu(params.fc1(x)))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)
    skipped: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: Mapping[str, Tensor]) -> AdamState:
    return AdamState(
        m={k: torch.zeros_like(p) for k, p in params.items()},
        v={k: torch.zeros_like(p) for k, p in params.items()},
    )


@torch.no_grad()
def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Tensor | None], state: AdamState,
              lr: float) -> tuple[Mapping[str, Tensor], AdamState]:
    """One bias-corrected Adam update, in place on ``params``.

    Missing gradients count as zero.  If any gradient is non-finite the step
    is skipped, logged, and counted in ``state.skipped``.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
    if not all(g is None or bool(torch.isfinite(g).all()) for g in grads.values()):
        state.skipped += 1
        log.warning("non-finite gradient at optimizer step %d; update skipped", state.step + 1)
        return params, state
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        m = state.m[name].mul_(b1).add_(g, alpha=1.0 - b1)
        v = state.v[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return params, state


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple[int, ...]
    checked: int
    per_param: dict[str, float]
    max_abs_error: float = 0.0
    analytic: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    numeric: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    @property
    def ok(self) -> bool:
        return math.isfinite(self.max_rel_error)

    def violations(self, rtol: float, atol: float) -> int:
        """Coordinates where ``|ad - fd| > rtol * max(|ad|, |fd|) + atol``."""
        scale = np.maximum(np.abs(self.analytic), np.abs(self.numeric))
        bad = ~(np.abs(self.analytic - self.numeric) <= rtol * scale + atol)
        return int(np.count_nonzero(bad))


def grad_check(fn: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-5,
               floor: float = 1e-8, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn()`` with central differences.

    ``fn`` takes no arguments and closes over ``params``, which are perturbed
    in place.  Relative error is ``|ad - fd| / max(|ad|, |fd|, floor)``.  With
    ``max_coords`` set, a random subset of coordinates per tensor is probed.
    """
    tensors = dict(params)
    for p in tensors.values():
        if p.grad is not None:
            p.grad = None
    loss = fn()
    analytic = torch.autograd.grad(loss, list(tensors.values()), allow_unused=True)
    worst, worst_name, worst_idx, checked = 0.0, "", (), 0
    worst_abs = 0.0
    ads: list[float] = []
    fds: list[float] = []
    per_param: dict[str, float] = {}
    with torch.no_grad():
        for (name, p), g in zip(tensors.items(), analytic):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            coords = range(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                rng = rng or np.random.default_rng(0)
                coords = sorted(rng.choice(flat.numel(), size=max_coords, replace=False).tolist())
            param_worst = 0.0
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                fd = (up - down) / (2 * eps)
                ad = g.view(-1)[i].item()
                rel = abs(ad - fd) / max(abs(ad), abs(fd), floor)
                worst_abs = max(worst_abs, abs(ad - fd))
                ads.append(ad)
                fds.append(fd)
                checked += 1
                if rel > param_worst:
                    param_worst = rel
                if rel > worst or not math.isfinite(rel):
                    worst, worst_name = rel, name
                    worst_idx = tuple(np.unravel_index(i, tuple(p.shape)))
            per_param[name] = param_worst
    return GradCheckReport(worst, worst_name, worst_idx, checked, per_param, worst_abs,
                           np.asarray(ads), np.asarray(fds))


def save_checkpoint(path: str | Path, module: nn.Module, meta: dict) -> None:
    """Write parameters as float32 arrays plus a JSON metadata record.

    Parameter names follow the module tree, e.g.
    ``encoder.blocks.2.play_attn.query.weight``.
    """
    arrays = {
        name: t.detach().cpu().to(torch.float32).numpy() for name, t in module.state_dict().items()
    }
    record = {"format": CHECKPOINT_FORMAT, **meta}
    arrays["__meta__"] = np.frombuffer(json.dumps(record, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, Tensor]]:
    """Return ``(meta, state_dict)`` from a checkpoint file."""
    with np.load(path) as data:
        if "__meta__" not in data.files:
            raise ValueError(f"{path}: not a checkpoint (missing metadata)")
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        state = {k: torch.from_numpy(data[k].copy()) for k in data.files if k != "__meta__"}
    return meta, state
