"""Task losses, the training loop and evaluation.

Games are sampled fresh every step from seed-derived streams, so a run is a
pure function of its :class:`TrainConfig`.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass
from functools import partial
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from . import __version__
from .engine import adam_init, adam_step, load_checkpoint, save_checkpoint
from .games import (
    Game,
    invariant_normalize_batch,
    make_rng,
    sample_disc_batch,
    sample_invariant_batch,
)
from .model import TASKS, ModelConfig, NfgModel, count_parameters, init_parameters
from .oracles import masked_mse, max_deviation_gain_tensor, ne_gap

__all__ = [
    "TrainConfig",
    "Metrics",
    "TrainResult",
    "EvalReport",
    "TrainingError",
    "action_values",
    "ne_gap_torch",
    "ne_loss",
    "devgain_loss",
    "recon_loss",
    "task_loss",
    "prepare_payoffs",
    "sample_batch",
    "train",
    "evaluate",
    "evaluate_predictions",
    "predict",
    "build_model",
    "load_model",
    "write_metrics_csv",
    "DEFAULT_LR",
    "INIT_STD",
]

log = logging.getLogger(__name__)

DEFAULT_LR = 3e-4
INIT_STD = 0.02
HELD_OUT_GAMES = 256
EVAL_CHUNK = 64


class TrainingError(RuntimeError):
    def __init__(self, step: int, seed: int, message: str):
        super().__init__(f"step {step} (seed {seed}): {message}")
        self.step, self.seed = step, seed


@dataclass(frozen=True)
class TrainConfig:
    task: str = "ne"
    num_players: int = 2
    actions: tuple[int, ...] = (4, 4)
    sampler: str = "invariant"
    Z: int = 1
    p_observe: float | tuple[float, ...] = 1.0
    model: ModelConfig = ModelConfig(D=32, K=4, A=1, H=4)
    steps: int = 5000
    batch_size: int = 64
    learning_rate: float = DEFAULT_LR
    seed: int = 0
    eval_every: int = 500
    precision: int = 32
    eval_games: int = HELD_OUT_GAMES
    compile: bool = False

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(int(t) for t in self.actions))
        if isinstance(self.p_observe, (list, tuple)):
            object.__setattr__(self, "p_observe", tuple(float(p) for p in self.p_observe))
        if isinstance(self.model, dict):
            object.__setattr__(self, "model", ModelConfig(**self.model))
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.sampler not in ("invariant", "disc"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.sampler == "disc" and (self.num_players != 2 or len(set(self.actions)) != 1):
            raise ValueError("disc sampler produces square two-player games")
        if self.task == "ne" and self.p_observe != 1.0:
            raise ValueError("the ne task needs fully observed games")
        if self.task == "devgain" and self.p_observe != 1.0:
            raise ValueError("the devgain task needs fully observed games")
        if len(self.actions) != self.num_players:
            raise ValueError("actions must list one count per player")
        for name in ("steps", "batch_size", "eval_every", "eval_games"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == 64 else torch.float32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["actions"] = list(self.actions)
        if isinstance(self.p_observe, tuple):
            d["p_observe"] = list(self.p_observe)
        return d

    @classmethod
    def from_dict(cls, record: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(record) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        record = dict(record)
        if "model" in record:
            record["model"] = ModelConfig(**record["model"])
        return cls(**record)


@dataclass(frozen=True)
class Metrics:
    step: int
    train_loss: float
    eval_metric: float
    seconds: float


@dataclass
class TrainResult:
    model: nn.Module
    config: TrainConfig
    metrics: list[Metrics]
    step_losses: list[float]
    skipped_steps: int = 0

    @property
    def final_metric(self) -> float:
        return self.metrics[-1].eval_metric

    def meta(self) -> dict:
        return {
            "tool_version": __version__,
            "task": self.config.task,
            "architecture": getattr(self.model, "architecture", "nfg_transformer"),
            "model_config": self.config.model.to_dict(),
            "train_config": self.config.to_dict(),
            "seed": self.config.seed,
            "steps": self.config.steps,
            "init": {"scheme": "normal", "std": INIT_STD, "bias": 0.0},
            "optimizer": {"name": "adam", "lr": self.config.learning_rate, "beta1": 0.9, "beta2": 0.999,
                          "eps": 1e-8},
            "extra": getattr(self.model, "checkpoint_extra", lambda: {})(),
        }

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.model, self.meta())


@dataclass(frozen=True)
class EvalReport:
    task: str
    metric: float
    num_games: int
    per_game: tuple[float, ...]


# -- differentiable game quantities -------------------------------------------------


def action_values(payoffs: Tensor, profile: Sequence[Tensor]) -> list[Tensor]:
    """Expected payoff of each own action against the co-players' mixtures.

    ``payoffs`` is ``[B, N, T_1, ..., T_N]``; entry ``p`` of the result is
    ``[B, T_p]``.
    """
    n = payoffs.shape[1]
    out = []
    for p in range(n):
        x = payoffs[:, p]
        for q in reversed(range(n)):
            if q == p:
                continue
            shape = [x.shape[0]] + [1] * (x.ndim - 1)
            shape[1 + q] = x.shape[1 + q]
            x = (x * profile[q].reshape(shape)).sum(dim=1 + q)
        out.append(x)
    return out


def ne_gap_torch(payoffs: Tensor, profile: Sequence[Tensor]) -> Tensor:
    """Per-game NE gap ``[B]``: the largest unilateral deviation incentive."""
    gaps = []
    for values, sigma in zip(action_values(payoffs, profile), profile):
        gaps.append(values.max(dim=-1).values - (values * sigma).sum(dim=-1))
    return torch.stack(gaps, dim=-1).max(dim=-1).values


def prepare_payoffs(payoffs: np.ndarray, task: str) -> np.ndarray:
    """Model input for ``task``: normalized for ne/devgain, raw for recon."""
    if task == "recon":
        return np.asarray(payoffs, dtype=np.float64)
    return invariant_normalize_batch(payoffs)


def _as_tensor(x, dtype) -> Tensor:
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def ne_loss(model: nn.Module, payoffs: Tensor, model_input: Tensor | None = None,
            reduce: bool = True) -> Tensor:
    """NE gap of the decoded profile, measured on ``payoffs``.

    ``model_input`` defaults to ``payoffs`` (training games are already
    normalized).
    """
    profile = model(payoffs if model_input is None else model_input)
    gaps = ne_gap_torch(payoffs, profile)
    return gaps.mean() if reduce else gaps


def devgain_loss(model: nn.Module, payoffs: Tensor, targets: Tensor | None = None,
                 reduce: bool = True) -> Tensor:
    if targets is None:
        targets = _as_tensor(max_deviation_gain_tensor(payoffs.detach().cpu().numpy(), batched=True),
                             payoffs.dtype)
    err = (model(payoffs) - targets) ** 2
    per_game = err.flatten(1).mean(dim=1)
    return per_game.mean() if reduce else per_game


def recon_loss(model: nn.Module, payoffs: Tensor, mask: Tensor | None, reduce: bool = True) -> Tensor:
    """Squared error over every payoff, observed or not; the encoder only sees observed ones."""
    err = (model(payoffs, mask) - payoffs) ** 2
    per_game = err.flatten(1).mean(dim=1)
    return per_game.mean() if reduce else per_game


def task_loss(task: str, model: nn.Module, payoffs: Tensor, mask: Tensor | None = None,
              targets: Tensor | None = None) -> Tensor:
    if task == "ne":
        return ne_loss(model, payoffs)
    if task == "devgain":
        return devgain_loss(model, payoffs, targets)
    return recon_loss(model, payoffs, mask)


# -- sampling -----------------------------------------------------------------------


def sample_batch(config: TrainConfig, rng: np.random.Generator, batch: int):
    """Return ``(payoffs, mask_or_None)`` numpy arrays for one batch."""
    if config.sampler == "invariant":
        payoffs = sample_invariant_batch(rng, batch, config.actions)
    else:
        payoffs, _, _ = sample_disc_batch(rng, batch, config.actions[0], config.Z)
    if config.task != "recon":
        return payoffs, None
    p = config.p_observe
    if isinstance(p, tuple):
        p = np.asarray(p)[rng.integers(len(p), size=batch)]
    else:
        p = np.full(batch, p)
    mask = rng.random((batch, *config.actions)) < p.reshape((batch,) + (1,) * len(config.actions))
    return payoffs, mask


# -- model construction -------------------------------------------------------------


def build_model(config: TrainConfig, generator: torch.Generator) -> nn.Module:
    model = NfgModel(config.model, config.task)
    init_parameters(model, generator, INIT_STD)
    return model.to(config.dtype)


def load_model(path: str | Path) -> tuple[nn.Module, dict]:
    """Rebuild a model from a checkpoint; returns ``(model, meta)``."""
    meta, state = load_checkpoint(path)
    arch = meta.get("architecture", "nfg_transformer")
    if arch == "nfg_transformer":
        model = NfgModel(ModelConfig(**meta["model_config"]), meta["task"])
    elif arch == "flat_mlp":
        from .baselines import FlatNashMLP

        extra = meta["extra"]
        model = FlatNashMLP(tuple(extra["actions"]), extra["hidden"], extra["layers"])
    else:
        raise ValueError(f"{path}: unknown architecture {arch!r}")
    model.load_state_dict(state)
    precision = meta.get("train_config", {}).get("precision", 32)
    model = model.to(torch.float64 if precision == 64 else torch.float32)
    model.eval()
    return model, meta


# -- training -----------------------------------------------------------------------


def _streams(seed: int):
    init_ss, train_ss, eval_ss = np.random.SeedSequence(seed).spawn(3)
    generator = torch.Generator().manual_seed(int(init_ss.generate_state(1, dtype=np.uint64)[0] >> 1))
    return generator, make_rng(train_ss), make_rng(eval_ss)


def train(config: TrainConfig, model: nn.Module | None = None,
          callback: Callable[[Metrics], None] | None = None) -> TrainResult:
    """Train ``model`` (default: a fresh transformer) on freshly sampled games.

    Metrics are emitted every ``eval_every`` steps and at the final step,
    measured on a held-out set sampled once from a disjoint stream.
    """
    torch.use_deterministic_algorithms(True)
    generator, train_rng, eval_rng = _streams(config.seed)
    if model is None:
        model = build_model(config, generator)
    else:
        init_parameters(model, generator, INIT_STD)
        model = model.to(config.dtype)
    held_out = [g for g in _held_out(config, eval_rng)]
    params = dict(model.named_parameters())
    state = adam_init(params)
    metrics: list[Metrics] = []
    step_losses: list[float] = []
    since_eval: list[float] = []
    loss_fn = _compiled_loss(config.task, model) if config.compile else partial(task_loss, config.task, model)
    start = time.perf_counter()
    for step in range(1, config.steps + 1):
        payoffs, mask = sample_batch(config, train_rng, config.batch_size)
        x = _as_tensor(payoffs, config.dtype)
        m = None if mask is None else torch.as_tensor(mask)
        loss = loss_fn(x, m)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingError(step, config.seed, f"non-finite loss {value}")
        grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
        adam_step(params, dict(zip(params, grads)), state, config.learning_rate)
        step_losses.append(value)
        since_eval.append(value)
        if step % config.eval_every == 0 or step == config.steps:
            report = evaluate(model, held_out, config.task)
            entry = Metrics(step, float(np.mean(since_eval)), report.metric, time.perf_counter() - start)
            since_eval = []
            metrics.append(entry)
            log.info("step %d train_loss %.6f eval %.6f", entry.step, entry.train_loss, entry.eval_metric)
            if callback is not None:
                callback(entry)
    model.eval()
    return TrainResult(model, config, metrics, step_losses, state.skipped)


def _compiled_loss(task: str, model: nn.Module):
    # graph compilation only changes speed; eval and checkpoints use the eager model
    return torch.compile(partial(task_loss, task, model), dynamic=False)


def _held_out(config: TrainConfig, rng: np.random.Generator) -> list[Game]:
    payoffs, mask = sample_batch(config, rng, config.eval_games)
    games = []
    for i in range(config.eval_games):
        games.append(Game.from_payoffs(payoffs[i], None if mask is None else mask[i]))
    return games


def held_out_games(config: TrainConfig) -> list[Game]:
    """The fixed held-out set a run with ``config`` evaluates on."""
    return _held_out(config, _streams(config.seed)[2])


# -- evaluation ---------------------------------------------------------------------


def _model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def predict(model: nn.Module, games: Sequence[Game], task: str) -> list:
    """Decoder outputs per game as numpy arrays.

    ``ne`` yields a list of per-player marginals, ``devgain`` a joint-action
    tensor and ``recon`` a payoff tensor.
    """
    dtype = _model_dtype(model)
    out: list = [None] * len(games)
    groups: dict[tuple, list[int]] = {}
    for i, g in enumerate(games):
        groups.setdefault((g.actions_per_player, g.mask is not None), []).append(i)
    for (_, masked), idx in groups.items():
        for start in range(0, len(idx), EVAL_CHUNK):
            chunk = idx[start:start + EVAL_CHUNK]
            raw = np.stack([games[i].payoffs for i in chunk])
            if masked:
                mask = np.stack([games[i].mask for i in chunk])
                raw = np.where(mask[:, None], raw, 0.0)
            x = _as_tensor(prepare_payoffs(raw, task), dtype)
            if task == "recon":
                m = torch.as_tensor(mask) if masked else None
                res = model(x, m).cpu().numpy()
            else:
                res = model(x)
                res = [r.cpu().numpy() for r in res] if task == "ne" else res.cpu().numpy()
            for j, i in enumerate(chunk):
                out[i] = [r[j].astype(np.float64) for r in res] if task == "ne" else res[j].astype(np.float64)
    return out


def evaluate_predictions(task: str, games: Sequence[Game], predictions: Sequence) -> EvalReport:
    """Score predictions against exact oracles.

    ne: NE gap of the profile; devgain: MSE against the maximum deviation
    gains; recon: MSE over unobserved payoffs (games without unobserved
    entries are skipped).
    """
    per_game = []
    for game, pred in zip(games, predictions):
        if task == "ne":
            per_game.append(ne_gap(game.with_mask(None), pred).ne_gap)
        elif task == "devgain":
            target = max_deviation_gain_tensor(game.payoffs)
            per_game.append(float(np.mean((np.asarray(pred) - target) ** 2)))
        elif task == "recon":
            hidden = ~game.observed
            if hidden.any():
                per_game.append(masked_mse(pred, game.payoffs, np.broadcast_to(hidden, game.payoffs.shape)))
        else:
            raise ValueError(f"unknown task {task!r}")
    metric = float(np.mean(per_game)) if per_game else float("nan")
    return EvalReport(task, metric, len(per_game), tuple(per_game))


def evaluate(model: nn.Module | str | Path, games: Sequence[Game], task: str) -> EvalReport:
    """Average task metric of ``model`` (or a checkpoint path) over ``games``."""
    if isinstance(model, (str, Path)):
        model, meta = load_model(model)
        if meta["task"] != task:
            raise ValueError(f"checkpoint was trained for task {meta['task']!r}, not {task!r}")
    elif getattr(model, "task", task) != task:
        raise ValueError(f"model was built for task {model.task!r}, not {task!r}")
    was_training = model.training
    model.eval()
    report = evaluate_predictions(task, games, predict(model, games, task))
    model.train(was_training)
    return report


def write_metrics_csv(metrics: Sequence[Metrics], path: str | Path | None = None,
                      wall_clock: bool = False) -> str:
    """Render metrics as CSV; the seconds column stays empty unless ``wall_clock``.

    Leaving wall-clock time out keeps the file a pure function of the config.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "train_loss", "eval_metric", "seconds"])
    for m in metrics:
        writer.writerow([m.step, repr(m.train_loss), repr(m.eval_metric), repr(m.seconds) if wall_clock else ""])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
