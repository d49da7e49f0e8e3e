"""Normal-form game data model, isomorphisms, normalization and samplers.

Payoff tensors are stored player-major: ``payoffs[p, a_1, ..., a_N]`` is the
utility of player ``p`` under joint action ``(a_1, ..., a_N)``.  The optional
observation mask has the joint-action shape only.

Random sampling uses numpy's ``PCG64`` bit generator seeded through
``SeedSequence``; samples are bit-reproducible across platforms.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Game",
    "Isomorphism",
    "DiscLatents",
    "GameValidationError",
    "validate_game",
    "apply_isomorphism",
    "compose_isomorphisms",
    "is_automorphism",
    "random_isomorphism",
    "invariant_normalize",
    "invariant_normalize_batch",
    "sample_invariant_game",
    "sample_invariant_batch",
    "sample_disc_game",
    "sample_disc_batch",
    "sample_mask",
    "build_named_game",
    "NAMED_GAMES",
    "make_rng",
    "game_to_json",
    "game_from_json",
    "save_game",
    "load_game",
]

RNG_ALGORITHM = "numpy.random.PCG64"
NORM_FLOOR = 1e-12


class GameValidationError(ValueError):
    """Raised when a game violates its shape or value invariants.

    ``field`` names the offending field of the game record.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def make_rng(seed: int | Sequence[int] | np.random.SeedSequence) -> np.random.Generator:
    """Return a PCG64 generator for ``seed``.

    Sequences of ints are accepted so callers can derive independent
    streams as ``make_rng([seed, stream_id])``.
    """
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


@dataclass(frozen=True, eq=False)
class Game:
    num_players: int
    actions_per_player: tuple[int, ...]
    payoffs: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "actions_per_player", tuple(int(t) for t in self.actions_per_player))
        object.__setattr__(self, "payoffs", np.asarray(self.payoffs, dtype=np.float64))
        if self.mask is not None:
            object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))

    @classmethod
    def from_payoffs(cls, payoffs, mask=None) -> "Game":
        payoffs = np.asarray(payoffs, dtype=np.float64)
        return cls(payoffs.shape[0], payoffs.shape[1:], payoffs, mask)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.actions_per_player

    @property
    def num_joint_actions(self) -> int:
        return math.prod(self.actions_per_player)

    @property
    def observed(self) -> np.ndarray:
        """Boolean joint-action mask; all true for a complete game."""
        if self.mask is None:
            return np.ones(self.actions_per_player, dtype=bool)
        return self.mask

    @property
    def is_complete(self) -> bool:
        return self.mask is None or bool(self.mask.all())

    def with_mask(self, mask) -> "Game":
        return Game(self.num_players, self.actions_per_player, self.payoffs, mask)

    def __eq__(self, other):
        if not isinstance(other, Game):
            return NotImplemented
        if self.actions_per_player != other.actions_per_player:
            return False
        if not np.array_equal(self.payoffs, other.payoffs):
            return False
        return np.array_equal(self.observed, other.observed)

    def __repr__(self):
        return f"Game(N={self.num_players}, actions={list(self.actions_per_player)}, masked={self.mask is not None})"


@dataclass(frozen=True)
class Isomorphism:
    """A relabelling of players and actions.

    ``action_perms[p][i]`` is the new index of old player ``p``'s action ``i``
    and ``player_perm[p]`` is the new slot of old player ``p``.  Action
    relabelling is applied before the player reordering.
    """

    player_perm: tuple[int, ...]
    action_perms: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "player_perm", tuple(int(x) for x in self.player_perm))
        object.__setattr__(
            self, "action_perms", tuple(tuple(int(x) for x in perm) for perm in self.action_perms)
        )
        if not _is_permutation(self.player_perm):
            raise ValueError(f"player_perm is not a permutation: {self.player_perm}")
        if len(self.action_perms) != len(self.player_perm):
            raise ValueError("need one action permutation per player")
        for p, perm in enumerate(self.action_perms):
            if not _is_permutation(perm):
                raise ValueError(f"action_perms[{p}] is not a permutation: {perm}")

    @classmethod
    def identity(cls, actions_per_player: Sequence[int]) -> "Isomorphism":
        n = len(actions_per_player)
        return cls(tuple(range(n)), tuple(tuple(range(t)) for t in actions_per_player))

    @property
    def num_players(self) -> int:
        return len(self.player_perm)

    def source_actions(self) -> tuple[int, ...]:
        return tuple(len(perm) for perm in self.action_perms)

    def target_actions(self) -> tuple[int, ...]:
        """Action counts of the relabelled game, in new player order."""
        out = [0] * self.num_players
        for p, q in enumerate(self.player_perm):
            out[q] = len(self.action_perms[p])
        return tuple(out)

    def inverse(self) -> "Isomorphism":
        n = self.num_players
        inv_players = [0] * n
        inv_actions: list[tuple[int, ...]] = [()] * n
        for p, q in enumerate(self.player_perm):
            inv_players[q] = p
            inv_actions[q] = tuple(np.argsort(self.action_perms[p]).tolist())
        return Isomorphism(tuple(inv_players), tuple(inv_actions))

    def permute_players(self, per_player: Sequence) -> list:
        """Relabel per-player arrays whose leading axis indexes actions.

        Works for mixed profiles ``[T_p]`` and action embeddings ``[T_p, D]``.
        """
        self._check_source(tuple(len(x) for x in per_player))
        out: list = [None] * self.num_players
        for p, q in enumerate(self.player_perm):
            inv = np.argsort(self.action_perms[p])
            out[q] = per_player[p][inv]
        return out

    def _check_source(self, actions: tuple[int, ...]):
        if actions != self.source_actions():
            raise ValueError(
                f"isomorphism expects action counts {list(self.source_actions())}, got {list(actions)}"
            )


@dataclass(frozen=True)
class DiscLatents:
    u: np.ndarray
    v: np.ndarray


def _is_permutation(seq: Sequence[int]) -> bool:
    return sorted(seq) == list(range(len(seq)))


def validate_game(game: Game) -> None:
    """Raise :class:`GameValidationError` unless every game invariant holds."""
    if game.num_players < 2:
        raise GameValidationError("num_players", f"need at least 2 players, got {game.num_players}")
    if len(game.actions_per_player) != game.num_players:
        raise GameValidationError(
            "actions_per_player",
            f"length {len(game.actions_per_player)} does not match num_players={game.num_players}",
        )
    if any(t < 1 for t in game.actions_per_player):
        raise GameValidationError("actions_per_player", "every player needs at least one action")
    expected = (game.num_players, *game.actions_per_player)
    if game.payoffs.shape != expected:
        raise GameValidationError("payoffs", f"shape {game.payoffs.shape} != expected {expected}")
    if game.mask is not None and game.mask.shape != tuple(game.actions_per_player):
        raise GameValidationError(
            "mask", f"shape {game.mask.shape} != joint-action shape {tuple(game.actions_per_player)}"
        )
    finite = np.isfinite(game.payoffs)
    if not finite[:, game.observed].all():
        raise GameValidationError("payoffs", "non-finite payoff at an observed joint action")


def apply_isomorphism(game: Game, iso: Isomorphism) -> Game:
    """Relabel ``game`` so that G'[q](a') = G[p](a) with q = player_perm[p].

    Here ``a'`` places ``action_perms[p][a_p]`` at slot ``player_perm[p]``.
    """
    if iso.num_players != game.num_players:
        raise ValueError(f"isomorphism has {iso.num_players} players, game has {game.num_players}")
    iso._check_source(game.actions_per_player)
    payoffs = _permute_tensor(game.payoffs, iso, leading=1)
    payoffs = payoffs[list(np.argsort(iso.player_perm))]
    mask = None if game.mask is None else _permute_tensor(game.mask, iso, leading=0)
    return Game(game.num_players, iso.target_actions(), payoffs, mask)


def _permute_tensor(x: np.ndarray, iso: Isomorphism, leading: int) -> np.ndarray:
    for p, perm in enumerate(iso.action_perms):
        x = np.take(x, np.argsort(perm), axis=leading + p)
    inv_players = np.argsort(iso.player_perm)
    axes = list(range(leading)) + [leading + int(inv_players[k]) for k in range(iso.num_players)]
    return np.ascontiguousarray(np.transpose(x, axes))


def compose_isomorphisms(first: Isomorphism, second: Isomorphism) -> Isomorphism:
    """Isomorphism equivalent to applying ``first`` and then ``second``."""
    n = first.num_players
    players = [0] * n
    actions: list[tuple[int, ...]] = []
    for p in range(n):
        mid = first.player_perm[p]
        players[p] = second.player_perm[mid]
        inner, outer = first.action_perms[p], second.action_perms[mid]
        actions.append(tuple(outer[i] for i in inner))
    return Isomorphism(tuple(players), tuple(actions))


def is_automorphism(game: Game, iso: Isomorphism, tol: float = 1e-9) -> bool:
    if iso.target_actions() != game.actions_per_player:
        return False
    image = apply_isomorphism(game, iso)
    if not np.array_equal(image.observed, game.observed):
        return False
    obs = game.observed
    return bool(np.max(np.abs(image.payoffs[:, obs] - game.payoffs[:, obs]), initial=0.0) <= tol)


def random_isomorphism(
    rng: np.random.Generator, actions_per_player: Sequence[int], permute_players: bool = True
) -> Isomorphism:
    """Uniform random isomorphism; player swaps only mix equal action counts."""
    players = list(range(len(actions_per_player)))
    if permute_players:
        # shuffle within groups of equal action count so the game shape is preserved
        groups: dict[int, list[int]] = {}
        for p, t in enumerate(actions_per_player):
            groups.setdefault(t, []).append(p)
        for members in groups.values():
            for p, q in zip(members, rng.permutation(members).tolist()):
                players[p] = q
    actions = tuple(tuple(rng.permutation(t).tolist()) for t in actions_per_player)
    return Isomorphism(tuple(players), actions)


def invariant_normalize(game: Game) -> Game:
    """Map a complete game onto the equilibrium-invariant subspace.

    Each player's payoffs are de-meaned over that player's own actions and
    rescaled to Frobenius norm ``sqrt(prod_q T_q)``; a slice with norm below
    ``1e-12`` after de-meaning becomes all zeros.
    """
    if not game.is_complete:
        raise ValueError("invariant_normalize requires a fully observed game")
    payoffs = invariant_normalize_batch(game.payoffs[None])[0]
    return Game(game.num_players, game.actions_per_player, payoffs, game.mask)


def invariant_normalize_batch(payoffs: np.ndarray) -> np.ndarray:
    """Vectorized normalization over a batch ``[B, N, T_1, ..., T_N]``."""
    payoffs = np.asarray(payoffs, dtype=np.float64)
    n = payoffs.shape[1]
    scale = math.sqrt(math.prod(payoffs.shape[2:]))
    out = np.empty_like(payoffs)
    reduce_axes = tuple(range(1, n + 1))
    for p in range(n):
        g = payoffs[:, p]
        g = g - g.mean(axis=1 + p, keepdims=True)
        norm = np.sqrt(np.sum(g * g, axis=reduce_axes, keepdims=True))
        safe = np.where(norm < NORM_FLOOR, 1.0, norm)
        out[:, p] = np.where(norm < NORM_FLOOR, 0.0, g * (scale / safe))
    return out


def sample_invariant_batch(
    rng: np.random.Generator, batch: int, actions_per_player: Sequence[int]
) -> np.ndarray:
    shape = (batch, len(actions_per_player), *actions_per_player)
    return invariant_normalize_batch(rng.standard_normal(shape))


def sample_invariant_game(seed: int, num_players: int, actions: Sequence[int] | int) -> Game:
    """Draw a standard-normal game and project it onto the invariant subspace."""
    actions = _resolve_actions(num_players, actions)
    if num_players < 2:
        raise ValueError("need at least 2 players")
    if any(t < 2 for t in actions):
        raise ValueError(f"every player needs at least 2 actions, got {list(actions)}")
    payoffs = sample_invariant_batch(make_rng(seed), 1, actions)[0]
    return Game(num_players, actions, payoffs)


def _resolve_actions(num_players: int, actions: Sequence[int] | int) -> tuple[int, ...]:
    if isinstance(actions, (int, np.integer)):
        return (int(actions),) * num_players
    actions = tuple(int(t) for t in actions)
    if len(actions) != num_players:
        raise ValueError(f"got {len(actions)} action counts for {num_players} players")
    return actions


def disc_payoffs(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Two-player payoffs ``[2, T, T]`` from latents ``u, v`` of shape ``[..., T, Z]``."""
    m = u @ np.swapaxes(v, -1, -2)
    logits = m - np.swapaxes(m, -1, -2)
    return np.stack([expit(logits), expit(-logits)], axis=-3)


def sample_disc_batch(
    rng: np.random.Generator, batch: int, num_actions: int, latent_dim: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample ``batch`` DISC games; returns ``(payoffs, u, v)``."""
    shape = (batch, num_actions, latent_dim)
    u = rng.standard_normal(shape) + rng.uniform(-1.0, 1.0, size=(batch, 1, 1))
    v = rng.standard_normal(shape) + rng.uniform(-1.0, 1.0, size=(batch, 1, 1))
    return disc_payoffs(u, v), u, v


def sample_disc_game(seed: int, num_actions: int, latent_dim: int) -> tuple[Game, DiscLatents]:
    """Sample a DISC game where player 1 receives the win-probability.

    Player 2 receives one minus it, so payoffs sum to one everywhere.
    """
    if num_actions < 2 or latent_dim < 1:
        raise ValueError("need num_actions >= 2 and latent_dim >= 1")
    payoffs, u, v = sample_disc_batch(make_rng(seed), 1, num_actions, latent_dim)
    game = Game(2, (num_actions, num_actions), payoffs[0])
    return game, DiscLatents(u[0], v[0])


def sample_mask(seed: int | np.random.Generator, shape: Sequence[int], p_observe: float) -> np.ndarray:
    if not 0.0 <= p_observe <= 1.0:
        raise ValueError(f"p_observe must lie in [0, 1], got {p_observe}")
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    return rng.random(tuple(shape)) < p_observe


_COORD = [[1.0, 0.0], [0.0, 1.0]]
_ANTI = [[0.0, 1.0], [1.0, 0.0]]
_PENNIES = [[1.0, -1.0], [-1.0, 1.0]]

NAMED_GAMES = {
    "coordination": np.array([_COORD, _COORD]),
    "anti_coordination": np.array([_ANTI, _ANTI]),
    "matching_pennies": np.array([_PENNIES, np.negative(_PENNIES)]),
    "anti_cycle": np.array([np.negative(_PENNIES), _PENNIES]),
}


def build_named_game(family: str) -> Game:
    try:
        payoffs = NAMED_GAMES[family]
    except KeyError:
        raise ValueError(f"unknown game family {family!r}; choose from {sorted(NAMED_GAMES)}") from None
    return Game.from_payoffs(payoffs.copy())


_JSON_FIELDS = {"num_players", "actions_per_player", "payoffs", "mask", "provenance"}


def game_to_json(game: Game, provenance: dict | None = None) -> dict:
    record = {
        "num_players": game.num_players,
        "actions_per_player": list(game.actions_per_player),
        "payoffs": [float(x) for x in game.payoffs.ravel()],
    }
    if game.mask is not None:
        record["mask"] = [bool(x) for x in game.mask.ravel()]
    if provenance is not None:
        record["provenance"] = provenance
    return record


def game_from_json(record: dict) -> Game:
    if not isinstance(record, dict):
        raise GameValidationError("<root>", "game record must be a JSON object")
    unknown = set(record) - _JSON_FIELDS
    if unknown:
        raise GameValidationError(sorted(unknown)[0], "unknown field in game record")
    for key in ("num_players", "actions_per_player", "payoffs"):
        if key not in record:
            raise GameValidationError(key, "missing required field")
    n = record["num_players"]
    actions = record["actions_per_player"]
    if not isinstance(n, int) or not isinstance(actions, list) or not all(isinstance(t, int) for t in actions):
        raise GameValidationError("actions_per_player", "num_players and actions_per_player must be integers")
    joint = math.prod(actions)
    payoffs = np.asarray(record["payoffs"], dtype=np.float64)
    if payoffs.size != n * joint:
        raise GameValidationError("payoffs", f"expected {n * joint} values, got {payoffs.size}")
    mask = None
    if "mask" in record and record["mask"] is not None:
        mask = np.asarray(record["mask"], dtype=bool)
        if mask.size != joint:
            raise GameValidationError("mask", f"expected {joint} values, got {mask.size}")
        mask = mask.reshape(actions)
    game = Game(n, tuple(actions), payoffs.reshape((n, *actions)), mask)
    validate_game(game)
    return game


def save_game(path: str | Path, game: Game, provenance: dict | None = None) -> None:
    text = json.dumps(game_to_json(game, provenance), sort_keys=True)
    Path(path).write_text(text + "\n")


def load_game(path: str | Path) -> Game:
    return game_from_json(json.loads(Path(path).read_text()))
