"""Property suites shared by the ``check`` command and the test-suite.

Each suite returns a small report object with the worst observed error, so
callers decide the tolerance.  All randomness is drawn from explicit seeds.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .engine import grad_check
from .games import Isomorphism, _permute_tensor, make_rng
from .model import ModelConfig, NfgModel, TASKS, init_parameters, randomize_parameters

__all__ = [
    "TOLERANCE",
    "SuiteReport",
    "random_full_isomorphism",
    "build_task_models",
    "trained_task_models",
    "equivariance_suite",
    "repeated_action_suite",
    "symmetric_game_suite",
    "gradient_suite",
    "degenerate_mask_suite",
    "symmetrize_players",
]

# equivariance tolerance per precision
TOLERANCE = {32: 1e-4, 64: 1e-9}

CHECK_CONFIG = ModelConfig(D=16, K=2, A=1, H=4)
GRAD_CONFIG = ModelConfig(D=8, K=1, A=1, H=2)


@dataclass
class SuiteReport:
    name: str
    max_error: float
    trials: int
    seconds: float
    per_component: dict[str, float] = field(default_factory=dict)
    failures: int = 0
    max_abs_error: float = 0.0

    def passed(self, tol: float) -> bool:
        return bool(np.isfinite(self.max_error)) and self.max_error <= tol and self.failures == 0


def _dtype(precision: int) -> torch.dtype:
    return torch.float64 if precision == 64 else torch.float32


def random_full_isomorphism(rng: np.random.Generator, actions) -> Isomorphism:
    """Any player order and any action relabelling; the game shape may change."""
    n = len(actions)
    return Isomorphism(tuple(rng.permutation(n).tolist()),
                       tuple(tuple(rng.permutation(int(t)).tolist()) for t in actions))


def build_task_models(config: ModelConfig, precision: int, seed: int, kind: str = "random") -> dict[str, nn.Module]:
    """One model per task.  ``kind`` is ``random`` (wide noise) or ``init`` (training init)."""
    gen = torch.Generator().manual_seed(seed)
    models = {}
    for task in TASKS:
        model = NfgModel(config, task)
        if kind == "random":
            randomize_parameters(model, gen)
        elif kind == "init":
            init_parameters(model, gen)
        else:
            raise ValueError(f"unknown parameter kind {kind!r}")
        models[task] = model.to(_dtype(precision)).eval()
    return models


def trained_task_models(config: ModelConfig = CHECK_CONFIG, precision: int = 32, seed: int = 0,
                        steps: int = 200) -> dict[str, nn.Module]:
    """Briefly trained models for every task, so properties are also checked away from init."""
    from .training import TrainConfig, train

    base = dict(model=config, steps=steps, batch_size=32, eval_every=steps, eval_games=16,
                precision=precision, seed=seed)
    configs = {
        "ne": TrainConfig(task="ne", actions=(3, 3), **base),
        "devgain": TrainConfig(task="devgain", actions=(3, 3), **base),
        "recon": TrainConfig(task="recon", actions=(4, 4), sampler="disc", p_observe=0.5, **base),
    }
    return {task: train(cfg).model.eval() for task, cfg in configs.items()}


def _sample_pairs(rng, count: int, players=(2, 3), actions=(2, 5)):
    pairs = []
    for _ in range(count):
        n = int(rng.choice(players))
        shape = tuple(int(t) for t in rng.integers(actions[0], actions[1] + 1, size=n))
        payoffs = rng.standard_normal((n, *shape))
        mask = rng.random(shape) < 0.6
        pairs.append((payoffs, mask, random_full_isomorphism(rng, shape)))
    return pairs


def _transform_outputs(out: dict, iso: Isomorphism) -> dict:
    emb = iso.permute_players(out["emb"])
    recon = _permute_tensor(out["recon"], iso, leading=1)[list(np.argsort(iso.player_perm))]
    return {
        "emb": emb,
        "ne": iso.permute_players(out["ne"]),
        "devgain": _permute_tensor(out["devgain"], iso, leading=0),
        "recon": recon,
        "emb_recon": iso.permute_players(out["emb_recon"]),
    }


@torch.no_grad()
def _batched_outputs(models: dict, games: list[tuple[np.ndarray, np.ndarray]], dtype) -> list[dict]:
    """Per-game numpy outputs of every task model, batching equal shapes."""
    groups: dict[tuple, list[int]] = {}
    for i, (payoffs, _) in enumerate(games):
        groups.setdefault(payoffs.shape, []).append(i)
    results: list[dict] = [None] * len(games)  # type: ignore[list-item]
    for idx in groups.values():
        x = torch.as_tensor(np.stack([games[i][0] for i in idx]), dtype=dtype)
        m = torch.as_tensor(np.stack([games[i][1] for i in idx]))
        emb = models["ne"].encode(x)
        ne = models["ne"].decoder(emb)
        dev = models["devgain"](x)
        emb_r = models["recon"].encode(x, m)
        rec = models["recon"].decoder(emb_r)
        for j, i in enumerate(idx):
            results[i] = {
                "emb": [e[j].double().numpy() for e in emb],
                "ne": [s[j].double().numpy() for s in ne],
                "devgain": dev[j].double().numpy(),
                "recon": rec[j].double().numpy(),
                "emb_recon": [e[j].double().numpy() for e in emb_r],
            }
    return results


def _max_diff(a, b) -> float:
    if isinstance(a, list):
        return max(float(np.max(np.abs(x - y))) for x, y in zip(a, b))
    return float(np.max(np.abs(a - b)))


def equivariance_suite(pairs: int = 10_000, precision: int = 32, seed: int = 0,
                       model_sets: list[dict] | None = None, config: ModelConfig = CHECK_CONFIG) -> SuiteReport:
    """max |f(phi(G)) - phi(f(G))| for the encoder and all three decoders.

    ``model_sets`` is a list of ``{task: model}`` dicts; pairs are spread
    over them round-robin.  By default two sets of random parameters are used.
    Recon models see a random mask that is transformed with the game.
    """
    start = time.perf_counter()
    rng = make_rng([seed, 1])
    if model_sets is None:
        model_sets = [build_task_models(config, precision, seed, "random"),
                      build_task_models(config, precision, seed + 1, "init")]
    dtype = _dtype(precision)
    samples = _sample_pairs(rng, pairs)
    worst = {"encoder": 0.0, "ne": 0.0, "devgain": 0.0, "recon": 0.0}
    failures = 0
    for s, models in enumerate(model_sets):
        chosen = samples[s::len(model_sets)]
        if not chosen:
            continue
        base = _batched_outputs(models, [(p, m) for p, m, _ in chosen], dtype)
        moved_games = []
        for payoffs, mask, iso in chosen:
            moved_games.append((
                _permute_tensor(payoffs, iso, leading=1)[list(np.argsort(iso.player_perm))],
                _permute_tensor(mask, iso, leading=0),
            ))
        moved = _batched_outputs(models, moved_games, dtype)
        for (_, _, iso), b, mv in zip(chosen, base, moved):
            expect = _transform_outputs(b, iso)
            errs = {
                "encoder": max(_max_diff(mv["emb"], expect["emb"]), _max_diff(mv["emb_recon"], expect["emb_recon"])),
                "ne": _max_diff(mv["ne"], expect["ne"]),
                "devgain": _max_diff(mv["devgain"], expect["devgain"]),
                "recon": _max_diff(mv["recon"], expect["recon"]),
            }
            for k, v in errs.items():
                if not np.isfinite(v):
                    failures += 1
                worst[k] = max(worst[k], v) if np.isfinite(v) else float("inf")
    return SuiteReport("equivariance", max(worst.values()), pairs, time.perf_counter() - start, worst, failures)


def _random_models(count: int, config: ModelConfig, precision: int, seed: int) -> list[NfgModel]:
    gen = torch.Generator().manual_seed(seed)
    out = []
    for i in range(count):
        model = NfgModel(config, "ne")
        if i % 2 == 0:
            randomize_parameters(model, gen, scale=1.0)
        else:
            init_parameters(model, gen, std=0.3)
        out.append(model.to(_dtype(precision)).eval())
    return out


@torch.no_grad()
def repeated_action_suite(games: int = 1000, precision: int = 32, seed: int = 0,
                          config: ModelConfig = CHECK_CONFIG, param_sets: int = 8) -> SuiteReport:
    """Actions with identical payoff slices for every player receive equal embeddings."""
    start = time.perf_counter()
    rng = make_rng([seed, 2])
    models = _random_models(param_sets, config, precision, seed)
    worst = 0.0
    for g in range(games):
        n = int(rng.choice([2, 3]))
        shape = tuple(int(t) for t in rng.integers(2, 6, size=n))
        payoffs = rng.standard_normal((n, *shape))
        p = int(rng.integers(n))
        i, j = rng.choice(shape[p], size=2, replace=False).tolist()
        src = np.take(payoffs, [i], axis=1 + p)
        idx = [slice(None)] * (n + 1)
        idx[1 + p] = j
        payoffs[tuple(idx)] = np.squeeze(src, axis=1 + p)
        model = models[g % len(models)]
        emb = model.encode(torch.as_tensor(payoffs[None], dtype=_dtype(precision)))
        diff = float((emb[p][0, i] - emb[p][0, j]).abs().max())
        worst = max(worst, diff) if np.isfinite(diff) else float("inf")
    return SuiteReport("repeated_actions", worst, games, time.perf_counter() - start)


def symmetrize_players(payoffs: np.ndarray) -> np.ndarray:
    """Average a game over all player orderings (requires equal action counts)."""
    n = payoffs.shape[0]
    total = np.zeros_like(payoffs)
    perms = list(itertools.permutations(range(n)))
    for perm in perms:
        iso = Isomorphism(perm, tuple(tuple(range(payoffs.shape[1 + p])) for p in range(n)))
        total += _permute_tensor(payoffs, iso, leading=1)[list(np.argsort(perm))]
    return total / len(perms)


@torch.no_grad()
def symmetric_game_suite(games: int = 1000, precision: int = 32, seed: int = 0,
                         config: ModelConfig = CHECK_CONFIG, param_sets: int = 8) -> SuiteReport:
    """In a player-symmetric game every player's i-th action gets the same embedding."""
    start = time.perf_counter()
    rng = make_rng([seed, 3])
    models = _random_models(param_sets, config, precision, seed + 7)
    worst = 0.0
    for g in range(games):
        n = int(rng.choice([2, 3]))
        t = int(rng.integers(2, 6))
        payoffs = symmetrize_players(rng.standard_normal((n, *([t] * n))))
        model = models[g % len(models)]
        emb = model.encode(torch.as_tensor(payoffs[None], dtype=_dtype(precision)))
        diff = max(float((emb[p][0] - emb[0][0]).abs().max()) for p in range(1, n))
        worst = max(worst, diff) if np.isfinite(diff) else float("inf")
    return SuiteReport("symmetric_players", worst, games, time.perf_counter() - start)


def _loss_closure(task: str, model: nn.Module, payoffs: torch.Tensor, mask):
    from .training import task_loss

    return lambda: task_loss(task, model, payoffs, mask)


def gradient_suite(seed: int = 0, config: ModelConfig = GRAD_CONFIG, batch: int = 1,
                   eps: float = 1e-5, max_coords: int | None = None, scale: float = 0.5,
                   rtol: float = 1e-4, atol: float = 1e-9) -> SuiteReport:
    """Finite-difference checks of all three losses at 64-bit on 2x2 games.

    The recon loss is checked with half the joint actions masked as well as
    fully observed.  ``max_error`` is the floored relative error of
    :func:`grad_check`; ``failures`` counts coordinates outside the mixed
    bound ``rtol * max(|ad|, |fd|) + atol``, which tolerates the round-off of
    central differences on gradients that are zero or nearly so.
    """
    from .games import invariant_normalize_batch

    start = time.perf_counter()
    rng = make_rng([seed, 4])
    gen = torch.Generator().manual_seed(seed)
    worst: dict[str, float] = {}
    checked, worst_abs, violations = 0, 0.0, 0
    cases = [("ne", None), ("devgain", None), ("recon", None), ("recon", "half")]
    for task, mask_kind in cases:
        model = NfgModel(config, task)
        randomize_parameters(model, gen, scale)
        model = model.double()
        raw = rng.standard_normal((batch, 2, 2, 2))
        payoffs = torch.as_tensor(raw if task == "recon" else invariant_normalize_batch(raw))
        mask = None
        if mask_kind == "half":
            m = np.zeros((batch, 4), dtype=bool)
            for b in range(batch):
                m[b, rng.choice(4, size=2, replace=False)] = True
            mask = torch.as_tensor(m.reshape(batch, 2, 2))
        report = grad_check(_loss_closure(task, model, payoffs, mask), dict(model.named_parameters()),
                            eps=eps, max_coords=max_coords, rng=rng)
        worst[task if mask_kind is None else f"{task}_masked"] = report.max_rel_error
        checked += report.checked
        worst_abs = max(worst_abs, report.max_abs_error)
        violations += report.violations(rtol, atol)
    return SuiteReport("gradients", max(worst.values()), checked, time.perf_counter() - start, worst,
                       failures=violations, max_abs_error=worst_abs)


def degenerate_mask_suite(trials: int = 1000, seed: int = 0, config: ModelConfig = CHECK_CONFIG,
                          precision: int = 32) -> SuiteReport:
    """All-masked and single-observation games: finite loss and gradients.

    ``max_error`` counts nothing; ``failures`` counts trials with a NaN or
    infinity anywhere in outputs, loss or gradients.
    """
    from .training import recon_loss

    start = time.perf_counter()
    rng = make_rng([seed, 5])
    gen = torch.Generator().manual_seed(seed)
    model = NfgModel(config, "recon")
    randomize_parameters(model, gen)
    model = model.to(_dtype(precision))
    params = list(model.parameters())
    failures = 0
    for trial in range(trials):
        n = int(rng.choice([2, 3]))
        shape = tuple(int(t) for t in rng.integers(2, 6, size=n))
        batch = int(rng.integers(1, 4))
        mask = np.zeros((batch, *shape), dtype=bool)
        for b in range(batch):
            if trial % 2 == 1:
                mask[b].flat[int(rng.integers(mask[b].size))] = True
        payoffs = torch.as_tensor(rng.random((batch, n, *shape)), dtype=_dtype(precision))
        loss = recon_loss(model, payoffs, torch.as_tensor(mask))
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        ok = bool(torch.isfinite(loss)) and all(g is None or bool(torch.isfinite(g).all()) for g in grads)
        failures += not ok
    return SuiteReport("degenerate_masks", float(failures), trials, time.perf_counter() - start, failures=failures)
