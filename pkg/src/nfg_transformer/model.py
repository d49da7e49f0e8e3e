"""Equivariant game encoder and task decoders.

A game is encoded as one embedding per (player, action).  Embeddings start
at zero and are refined by ``K`` blocks, each made of

1. action-to-joint-action self-attention: for every joint action the N
   participating action embeddings, each joined with that player's payoff,
   attend to one another and yield one *play* per player;
2. action-to-play cross-attention: every action attends over the plays it
   took part in (unobserved joint actions are masked out);
3. ``A`` rounds of action-to-action self-attention over all actions.

Tensors are batched: payoffs are ``[B, N, T_1, ..., T_N]``, masks
``[B, T_1, ..., T_N]`` and embeddings a list of ``[B, T_p, D]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
from torch import Tensor, nn

from .engine import MLP, AttentionBlock

__all__ = [
    "ModelConfig",
    "EncoderBlock",
    "NfgEncoder",
    "NashDecoder",
    "JointScalarDecoder",
    "PayoffDecoder",
    "NfgModel",
    "TASKS",
    "init_embeddings",
    "broadcast_to_joint",
    "count_parameters",
]

TASKS = ("ne", "devgain", "recon")


@dataclass(frozen=True)
class ModelConfig:
    D: int = 32
    K: int = 4
    A: int = 1
    H: int = 8

    def __post_init__(self):
        if self.D < 1 or self.K < 1 or self.A < 0 or self.H < 1:
            raise ValueError(f"invalid model config {self}")
        if self.D % self.H:
            raise ValueError(f"H={self.H} must divide D={self.D}")

    def to_dict(self) -> dict:
        return asdict(self)


def init_embeddings(batch: int, actions: Sequence[int], dim: int, dtype=torch.float32) -> list[Tensor]:
    return [torch.zeros(batch, t, dim, dtype=dtype) for t in actions]


def broadcast_to_joint(emb: Sequence[Tensor]) -> Tensor:
    """Stack per-player embeddings onto the joint-action grid.

    Returns ``[B, J, N, D]`` where ``J = prod T_p`` in row-major order and slot
    ``p`` holds the embedding of the action player ``p`` takes.
    """
    n = len(emb)
    batch, dim = emb[0].shape[0], emb[0].shape[-1]
    actions = [e.shape[1] for e in emb]
    grid = []
    for p, e in enumerate(emb):
        view = [batch] + [1] * n + [dim]
        view[1 + p] = actions[p]
        grid.append(e.reshape(view).expand(batch, *actions, dim).reshape(batch, -1, dim))
    return torch.stack(grid, dim=2)


def _player_first(x: Tensor, player: int, actions: Sequence[int]) -> Tensor:
    """``[B, J, ...]`` -> ``[B, T_p, J / T_p, ...]`` grouped by player ``p``'s action."""
    batch, rest = x.shape[0], x.shape[2:]
    x = x.reshape(batch, *actions, *rest).movedim(1 + player, 1)
    return x.reshape(batch, actions[player], -1, *rest)


class EncoderBlock(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d, h = config.D, config.H
        self.payoff_proj = nn.Linear(d + 1, d)
        self.joint_attn = AttentionBlock(d, h)
        self.play_attn = AttentionBlock(d, h, cross=True)
        self.action_attn = nn.ModuleList(AttentionBlock(d, h) for _ in range(config.A))

    def plays(self, emb: Sequence[Tensor], payoffs: Tensor, mask: Tensor | None) -> tuple[Tensor, Tensor | None]:
        """Plays ``[B, J, N, D]`` and their validity ``[B, J, N]``."""
        batch, n = payoffs.shape[:2]
        tokens = broadcast_to_joint(emb)
        values = payoffs.reshape(batch, n, -1).transpose(1, 2).unsqueeze(-1)
        if mask is not None:
            # unobserved payoffs never reach the network
            values = values.masked_fill(~mask.reshape(batch, -1, 1, 1), 0.0)
        tokens = self.payoff_proj(torch.cat([tokens, values], dim=-1))
        valid = None
        if mask is not None:
            valid = mask.reshape(batch, -1, 1).expand(-1, -1, n)
        return self.joint_attn(tokens, tokens, valid, valid), valid

    def forward(self, emb: Sequence[Tensor], payoffs: Tensor, mask: Tensor | None = None) -> list[Tensor]:
        actions = [e.shape[1] for e in emb]
        plays, valid = self.plays(emb, payoffs, mask)
        out = []
        for p, e in enumerate(emb):
            kv = _player_first(plays[:, :, p], p, actions)
            m_kv = None if valid is None else _player_first(valid[:, :, p], p, actions)
            out.append(self.play_attn(e.unsqueeze(2), kv, None, m_kv).squeeze(2))
        if len(self.action_attn):
            x = torch.cat(out, dim=1)
            for layer in self.action_attn:
                x = layer(x)
            out = list(torch.split(x, actions, dim=1))
        return out


class NfgEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.blocks = nn.ModuleList(EncoderBlock(config) for _ in range(config.K))

    def forward(self, payoffs: Tensor, mask: Tensor | None = None) -> list[Tensor]:
        emb = init_embeddings(payoffs.shape[0], payoffs.shape[2:], self.config.D, payoffs.dtype)
        for block in self.blocks:
            emb = block(emb, payoffs, mask)
        return emb


class NashDecoder(nn.Module):
    """Per-action logits from a shared MLP, softmax within each player."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.norm = nn.LayerNorm(config.D)
        # softmax ignores a shared logit offset, so the output bias is dropped
        self.head = MLP(config.D, 4 * config.D, 1, out_bias=False)

    def logits(self, emb: Sequence[Tensor]) -> list[Tensor]:
        return [self.head(self.norm(e)).squeeze(-1) for e in emb]

    def forward(self, emb: Sequence[Tensor]) -> list[Tensor]:
        return [torch.softmax(w, dim=-1) for w in self.logits(emb)]


class JointScalarDecoder(nn.Module):
    """One scalar per joint action from the sum of its action embeddings."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.norm = nn.LayerNorm(config.D)
        self.head = MLP(config.D, 4 * config.D, 1)

    def forward(self, emb: Sequence[Tensor]) -> Tensor:
        actions = [e.shape[1] for e in emb]
        joint = broadcast_to_joint(emb).sum(dim=2)
        return self.head(self.norm(joint)).reshape(emb[0].shape[0], *actions)


class PayoffDecoder(nn.Module):
    """Self-attention over each joint action's embeddings, scalar per player."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.attn = AttentionBlock(config.D, config.H)
        self.norm = nn.LayerNorm(config.D)
        self.head = MLP(config.D, 4 * config.D, 1)

    def forward(self, emb: Sequence[Tensor]) -> Tensor:
        batch, actions = emb[0].shape[0], [e.shape[1] for e in emb]
        tokens = self.attn(broadcast_to_joint(emb))
        values = self.head(self.norm(tokens)).squeeze(-1)
        return values.transpose(1, 2).reshape(batch, len(emb), *actions)


_DECODERS = {"ne": NashDecoder, "devgain": JointScalarDecoder, "recon": PayoffDecoder}


class NfgModel(nn.Module):
    """Encoder plus the decoder for one task."""

    def __init__(self, config: ModelConfig, task: str):
        super().__init__()
        if task not in _DECODERS:
            raise ValueError(f"unknown task {task!r}; choose from {TASKS}")
        self.config, self.task = config, task
        self.encoder = NfgEncoder(config)
        self.decoder = _DECODERS[task](config)

    def encode(self, payoffs: Tensor, mask: Tensor | None = None) -> list[Tensor]:
        return self.encoder(payoffs, mask)

    def forward(self, payoffs: Tensor, mask: Tensor | None = None):
        return self.decoder(self.encoder(payoffs, mask))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def init_parameters(module: nn.Module, generator: torch.Generator, std: float = 0.02) -> None:
    """Scaled-normal weights, zero biases, unit/zero LayerNorm affine."""
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, nn.Linear):
                sub.weight.copy_(torch.randn(sub.weight.shape, generator=generator, dtype=sub.weight.dtype) * std)
                if sub.bias is not None:
                    sub.bias.zero_()
            elif isinstance(sub, nn.LayerNorm):
                sub.weight.fill_(1.0)
                if sub.bias is not None:
                    sub.bias.zero_()


def randomize_parameters(module: nn.Module, generator: torch.Generator, scale: float = 0.5) -> None:
    """Overwrite every parameter with N(0, scale^2 / fan_in) noise (for property tests)."""
    with torch.no_grad():
        for p in module.parameters():
            fan_in = p.shape[-1] if p.ndim > 1 else 1
            p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * scale / math.sqrt(fan_in))
