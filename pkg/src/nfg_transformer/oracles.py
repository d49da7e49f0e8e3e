"""Exact game-theoretic quantities used as losses, targets and test oracles.

Everything here is plain numpy and deliberately independent of the torch
code paths in :mod:`nfg_transformer.training`: expectations are taken
against the explicit joint distribution rather than by successive
contraction.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .games import Game

__all__ = [
    "GapReport",
    "validate_profile",
    "joint_distribution",
    "expected_payoff",
    "deviation_gain_mixed",
    "ne_gap",
    "deviation_gain_pure",
    "max_deviation_gain",
    "max_deviation_gain_tensor",
    "enumerate_pure_ne",
    "embedding_distance",
    "min_embedding_distance",
    "masked_mse",
    "MAX_JOINT_ACTIONS",
]

MAX_JOINT_ACTIONS = 10**6


@dataclass(frozen=True)
class GapReport:
    per_player_gaps: tuple[float, ...]
    ne_gap: float


def _require_complete(game: Game):
    if not game.is_complete:
        raise ValueError("oracle requires a fully observed game")


def validate_profile(game: Game, profile: Sequence, atol: float = 1e-6) -> list[np.ndarray]:
    if len(profile) != game.num_players:
        raise ValueError(f"profile has {len(profile)} players, game has {game.num_players}")
    out = []
    for p, (sigma, t) in enumerate(zip(profile, game.actions_per_player)):
        sigma = np.asarray(sigma, dtype=np.float64)
        if sigma.shape != (t,):
            raise ValueError(f"profile[{p}] has shape {sigma.shape}, expected ({t},)")
        if (sigma < -atol).any() or abs(sigma.sum() - 1.0) > atol:
            raise ValueError(f"profile[{p}] is not a probability vector")
        out.append(sigma)
    return out


def joint_distribution(profile: Sequence[np.ndarray]) -> np.ndarray:
    """Outer product of the per-player marginals."""
    joint = np.ones(())
    for sigma in profile:
        joint = np.multiply.outer(joint, sigma)
    return joint


def expected_payoff(game: Game, profile: Sequence, player: int) -> float:
    _require_complete(game)
    profile = validate_profile(game, profile)
    return float(np.sum(joint_distribution(profile) * game.payoffs[player]))


def _deviation_values(game: Game, profile: list[np.ndarray], player: int) -> np.ndarray:
    # value of each pure deviation a'_p against the co-players' joint marginal
    others = joint_distribution([s for q, s in enumerate(profile) if q != player])
    g = np.moveaxis(game.payoffs[player], player, 0)
    return np.array([float(np.sum(g[i] * others)) for i in range(g.shape[0])])


def deviation_gain_mixed(game: Game, profile: Sequence, player: int) -> float:
    _require_complete(game)
    profile = validate_profile(game, profile)
    current = float(np.sum(joint_distribution(profile) * game.payoffs[player]))
    return float(np.max(_deviation_values(game, profile, player)) - current)


def ne_gap(game: Game, profile: Sequence) -> GapReport:
    gaps = tuple(deviation_gain_mixed(game, profile, p) for p in range(game.num_players))
    return GapReport(gaps, max(gaps))


def _check_joint_action(game: Game, a: Sequence[int]) -> tuple[int, ...]:
    a = tuple(int(x) for x in a)
    if len(a) != game.num_players:
        raise IndexError(f"joint action has {len(a)} entries, game has {game.num_players} players")
    for p, (x, t) in enumerate(zip(a, game.actions_per_player)):
        if not 0 <= x < t:
            raise IndexError(f"action {x} out of range for player {p} with {t} actions")
    return a


def deviation_gain_pure(game: Game, a: Sequence[int], player: int) -> float:
    _require_complete(game)
    a = _check_joint_action(game, a)
    current = game.payoffs[(player, *a)]
    best = max(
        game.payoffs[(player, *a[:player], alt, *a[player + 1:])]
        for alt in range(game.actions_per_player[player])
    )
    return float(best - current)


def max_deviation_gain(game: Game, a: Sequence[int]) -> float:
    return max(deviation_gain_pure(game, a, p) for p in range(game.num_players))


def max_deviation_gain_tensor(payoffs: np.ndarray, batched: bool = False) -> np.ndarray:
    """Maximum deviation gain of every joint action.

    ``payoffs`` has shape ``[N, T_1, ..., T_N]``, or ``[B, N, T_1, ..., T_N]``
    when ``batched``; the result drops the player axis.
    """
    payoffs = np.asarray(payoffs, dtype=np.float64)
    if not batched:
        return max_deviation_gain_tensor(payoffs[None], batched=True)[0]
    n = payoffs.shape[1]
    if payoffs.ndim != n + 2:
        raise ValueError(f"payoff batch shape {payoffs.shape} is inconsistent with {n} players")
    gains = []
    for p in range(n):
        g = payoffs[:, p]
        gains.append(g.max(axis=1 + p, keepdims=True) - g)
    return np.max(np.stack(gains), axis=0)


def enumerate_pure_ne(game: Game, tol: float = 1e-6) -> list[tuple[int, ...]]:
    _require_complete(game)
    if game.num_joint_actions > MAX_JOINT_ACTIONS:
        raise ValueError(f"game has {game.num_joint_actions} joint actions; limit is {MAX_JOINT_ACTIONS}")
    return [
        a
        for a in itertools.product(*(range(t) for t in game.actions_per_player))
        if max_deviation_gain(game, a) <= tol
    ]


def embedding_distance(e1: Sequence, e2: Sequence) -> float:
    if len(e1) != len(e2):
        raise ValueError("embeddings have different player counts")
    total = 0.0
    for p, (x, y) in enumerate(zip(e1, e2)):
        x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
        if x.shape != y.shape:
            raise ValueError(f"player {p} embeddings have shapes {x.shape} and {y.shape}")
        total += float(np.sum((x - y) ** 2))
    return math.sqrt(total)


def min_embedding_distance(index: int, embeddings: Sequence[Sequence]) -> float:
    """Distance from ``embeddings[index]`` to its nearest other entry."""
    return min(
        embedding_distance(embeddings[index], other)
        for j, other in enumerate(embeddings)
        if j != index
    )


def masked_mse(pred, target, mask) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), pred.shape)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if not mask.any():
        raise ValueError("masked_mse: mask selects no entries")
    diff = pred[mask] - target[mask]
    return float(np.mean(diff * diff))
