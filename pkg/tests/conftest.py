"""Shared fixtures: cached desk-scale training runs and the acceptance ledger.

Training runs are expensive, so each distinct configuration is trained at
most once per session and shared between the acceptance and CLI tests.
"""

from __future__ import annotations

import pytest

from nfg_transformer.model import ModelConfig
from nfg_transformer.training import TrainConfig, TrainResult, train

DESK_SEEDS = (0, 1, 2)


def desk_config(task: str = "ne", K: int = 4, seed: int = 0, **kw) -> TrainConfig:
    base = dict(task=task, num_players=2, actions=(4, 4), model=ModelConfig(D=32, K=K, A=1, H=4),
                steps=5000, batch_size=64, seed=seed, compile=True)
    base.update(kw)
    return TrainConfig(**base)


def disc_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(task="recon", num_players=2, actions=(16, 16), sampler="disc", Z=1,
                       p_observe=(0.1, 0.5), model=ModelConfig(D=32, K=2, A=1, H=4), steps=6000,
                       batch_size=32, learning_rate=1e-3, eval_every=500, eval_games=32, seed=seed,
                       compile=True)


class RunCache:
    def __init__(self):
        self._runs: dict[TrainConfig, TrainResult] = {}

    def get(self, config: TrainConfig) -> TrainResult:
        if config not in self._runs:
            self._runs[config] = train(config)
        return self._runs[config]


@pytest.fixture(scope="session")
def runs() -> RunCache:
    return RunCache()


# -- acceptance ledger ------------------------------------------------------------------

_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance verdict: ``criterion(n, ok, detail)``."""

    def record(number: int, ok: bool, detail: str) -> None:
        prev = _CRITERIA.get(number)
        if prev is not None:
            ok = ok and prev[0]
            detail = f"{prev[1]}; {detail}"
        _CRITERIA[number] = (ok, detail)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, 11):
        ok, detail = _CRITERIA.get(number, (False, "no verdict recorded (errored or deselected)"))
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
