"""Rating baselines for incomplete two-player games and a flat NE network.

Elo models ``P(i beats j) = logistic(r_i - r_j)``; mElo adds an
antisymmetric low-rank term ``c_i^T W c_j`` where ``W`` pairs the columns of
the cycle vectors into ``k`` rotation planes.  Both are fitted by maximum
likelihood on the observed entries of player one's win-probability table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import minimize
from scipy.special import expit, log_expit
from torch import Tensor, nn

from .games import Game, make_rng
from .model import ModelConfig, NfgModel, count_parameters
from .oracles import masked_mse
from .training import TrainConfig, TrainResult, train

__all__ = [
    "EloRatings",
    "MEloRatings",
    "fit_elo",
    "fit_melo",
    "predict_elo",
    "predict_melo",
    "elo_probabilities",
    "melo_probabilities",
    "prediction_tensor",
    "unobserved_mse",
    "FlatNashMLP",
    "fit_flat_mlp_ne",
    "MELO_L2",
]

MELO_L2 = 1e-4


@dataclass(frozen=True)
class EloRatings:
    ratings: np.ndarray
    log_likelihood: tuple[float, ...] = field(default=(), repr=False)
    iterations: int = 0


@dataclass(frozen=True)
class MEloRatings:
    ratings: np.ndarray
    cycle_vectors: np.ndarray

    @property
    def components(self) -> int:
        return self.cycle_vectors.shape[1] // 2


def _observations(game: Game, mask) -> tuple[np.ndarray, np.ndarray]:
    if game.num_players != 2 or game.actions_per_player[0] != game.actions_per_player[1]:
        raise ValueError("rating baselines need a square two-player game")
    obs = game.observed if mask is None else np.asarray(mask, dtype=bool)
    if obs.shape != game.actions_per_player:
        raise ValueError(f"mask shape {obs.shape} does not match game {game.actions_per_player}")
    obs = obs & ~np.eye(obs.shape[0], dtype=bool)  # self-play carries no rating information
    if not obs.any():
        raise ValueError("no observed off-diagonal entries to fit")
    return game.payoffs[0], obs.astype(np.float64)


def _log_likelihood(logits: np.ndarray, target: np.ndarray, weight: np.ndarray) -> float:
    ll = target * log_expit(logits) + (1.0 - target) * log_expit(-logits)
    return float(np.sum(weight * ll))


def fit_elo(game: Game, mask=None, tol: float = 1e-9, max_iter: int = 200_000) -> EloRatings:
    """Maximum-likelihood Elo ratings by full-batch gradient ascent.

    The step ``2 / max_degree`` is the inverse of a Lipschitz bound on the
    gradient, so the log-likelihood never decreases.
    """
    target, weight = _observations(game, mask)
    degree = weight.sum(axis=0) + weight.sum(axis=1)
    step = 2.0 / degree.max()
    r = np.zeros(target.shape[0])
    trace = []
    for it in range(max_iter):
        logits = r[:, None] - r[None, :]
        trace.append(_log_likelihood(logits, target, weight))
        resid = weight * (target - expit(logits))
        grad = resid.sum(axis=1) - resid.sum(axis=0)
        if np.max(np.abs(grad)) < tol:
            break
        r = r + step * grad
    else:
        it = max_iter
    return EloRatings(r - r.mean(), tuple(trace), it)


def _omega(k: int) -> np.ndarray:
    w = np.zeros((2 * k, 2 * k))
    for plane in range(k):
        w[2 * plane, 2 * plane + 1] = 1.0
        w[2 * plane + 1, 2 * plane] = -1.0
    return w


def fit_melo(game: Game, mask=None, k: int = 3, seed: int = 0, l2: float = MELO_L2,
             tol: float = 1e-10, max_iter: int = 20_000) -> MEloRatings:
    """Jointly fit ratings and ``k`` cycle planes with L-BFGS.

    Cycle vectors start from small seeded noise and carry an L2 penalty.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    target, weight = _observations(game, mask)
    t = target.shape[0]
    omega = _omega(k)
    c0 = make_rng(seed).normal(0.0, 0.1, size=(t, 2 * k))
    x0 = np.concatenate([np.zeros(t), c0.ravel()])

    def objective(x):
        r, c = x[:t], x[t:].reshape(t, 2 * k)
        logits = r[:, None] - r[None, :] + c @ omega @ c.T
        resid = weight * (target - expit(logits))
        value = -_log_likelihood(logits, target, weight) + l2 * float(np.sum(c * c))
        grad_r = -(resid.sum(axis=1) - resid.sum(axis=0))
        grad_c = -(resid @ c @ omega.T + resid.T @ c @ omega) + 2.0 * l2 * c
        return value, np.concatenate([grad_r, grad_c.ravel()])

    res = minimize(objective, x0, jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": tol, "ftol": 1e-15})
    r, c = res.x[:t], res.x[t:].reshape(t, 2 * k)
    return MEloRatings(r - r.mean(), c)


def elo_probabilities(ratings: EloRatings) -> np.ndarray:
    r = ratings.ratings
    return expit(r[:, None] - r[None, :])


def melo_probabilities(ratings: MEloRatings) -> np.ndarray:
    r, c = ratings.ratings, ratings.cycle_vectors
    return expit(r[:, None] - r[None, :] + c @ _omega(ratings.components) @ c.T)


def _check_index(n: int, i: int, j: int):
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"indices ({i}, {j}) out of range for {n} actions")


def predict_elo(ratings: EloRatings, i: int, j: int) -> float:
    _check_index(len(ratings.ratings), i, j)
    return float(expit(ratings.ratings[i] - ratings.ratings[j]))


def predict_melo(ratings: MEloRatings, i: int, j: int) -> float:
    _check_index(len(ratings.ratings), i, j)
    c = ratings.cycle_vectors
    cyc = float(c[i] @ _omega(ratings.components) @ c[j])
    return float(expit(ratings.ratings[i] - ratings.ratings[j] + cyc))


def prediction_tensor(probabilities: np.ndarray) -> np.ndarray:
    """Both players' predicted payoffs ``[2, T, T]`` from player one's win-probabilities."""
    return np.stack([probabilities, 1.0 - probabilities])


def unobserved_mse(game: Game, mask, prediction: np.ndarray) -> float:
    """MSE over unobserved joint actions, averaged over both players."""
    hidden = ~np.asarray(mask, dtype=bool)
    return masked_mse(prediction, game.payoffs, np.broadcast_to(hidden, game.payoffs.shape))


class FlatNashMLP(nn.Module):
    """Fully connected baseline: flattened payoffs to per-player logits.

    Unlike the transformer it is tied to one game shape.
    """

    architecture = "flat_mlp"
    task = "ne"

    def __init__(self, actions: tuple[int, ...], hidden: int, layers: int = 3):
        super().__init__()
        self.actions = tuple(int(t) for t in actions)
        self.hidden, self.layers = hidden, layers
        d_in = len(self.actions) * math.prod(self.actions)
        dims = [d_in] + [hidden] * layers
        mods: list[nn.Module] = []
        for a, b in zip(dims[:-1], dims[1:]):
            mods += [nn.Linear(a, b), nn.GELU()]
        mods.append(nn.Linear(hidden, sum(self.actions)))
        self.net = nn.Sequential(*mods)

    def checkpoint_extra(self) -> dict:
        return {"actions": list(self.actions), "hidden": self.hidden, "layers": self.layers}

    def forward(self, payoffs: Tensor, mask: Tensor | None = None) -> list[Tensor]:
        expected = (len(self.actions), *self.actions)
        if tuple(payoffs.shape[1:]) != expected:
            raise ValueError(
                f"flat baseline was built for games of shape {list(expected)}, got {list(payoffs.shape[1:])}"
            )
        logits = self.net(payoffs.flatten(1))
        return [torch.softmax(w, dim=-1) for w in torch.split(logits, list(self.actions), dim=-1)]


def _flat_param_count(actions: tuple[int, ...], hidden: int, layers: int) -> int:
    d_in = len(actions) * math.prod(actions)
    dims = [d_in] + [hidden] * layers + [sum(actions)]
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


def fit_flat_mlp_ne(config: TrainConfig, min_params: int | None = None, layers: int = 3) -> TrainResult:
    """Train the flat baseline with the NE loss under ``config``'s budget.

    The hidden width is the smallest multiple of 32 whose parameter count
    reaches ``min_params`` (default: the transformer described by
    ``config.model``).
    """
    if config.task != "ne":
        raise ValueError("the flat baseline is trained on the ne task only")
    if min_params is None:
        min_params = count_parameters(NfgModel(config.model, "ne"))
    hidden = 32
    while _flat_param_count(config.actions, hidden, layers) < min_params:
        hidden += 32
    return train(config, model=FlatNashMLP(config.actions, hidden, layers))
