"""``nfgt`` command line: sample games, train and evaluate models, fit baselines, run checks.

Every verb echoes its resolved configuration as one JSON line before doing
any work, and every file it writes records the tool version and seed.

Exit codes::

    0  success
    2  bad command line (argparse)
    3  input file not found
    4  malformed input (schema, shape or value error)
    5  checkpoint task or shape does not fit the request
    6  a property check failed
    7  training hit a non-finite loss
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK = 0
EXIT_MISSING = 3
EXIT_SCHEMA = 4
EXIT_TASK = 5
EXIT_CHECK = 6
EXIT_TRAINING = 7

log = logging.getLogger("nfgt")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _echo(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


def _require_file(path: str | Path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise CliError(EXIT_MISSING, f"file not found: {path}")
    return path


def _load_game(path: str | Path):
    from .games import GameValidationError, load_game

    path = _require_file(path)
    try:
        return load_game(path)
    except GameValidationError as exc:
        raise CliError(EXIT_SCHEMA, f"{path}: invalid game ({exc})") from None
    except (json.JSONDecodeError, ValueError) as exc:
        raise CliError(EXIT_SCHEMA, f"{path}: cannot parse game: {exc}") from None


def _load_checkpoint(path: str | Path):
    from .training import load_model

    path = _require_file(path)
    try:
        return load_model(path)
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        raise CliError(EXIT_SCHEMA, f"{path}: invalid checkpoint ({exc})") from None


# -- verbs ----------------------------------------------------------------------------


def cmd_sample(args) -> int:
    from .games import build_named_game, make_rng, sample_disc_game, sample_invariant_game, sample_mask, save_game

    resolved = {"verb": "sample", "family": args.family, "seed": args.seed, "p_observe": args.p_observe,
                "out": args.out, "tool_version": __version__}
    provenance = {"tool_version": __version__, "seed": args.seed, "family": args.family}
    if args.family == "invariant":
        actions = args.T if len(args.T) > 1 else args.T * args.N
        if len(actions) != args.N:
            raise CliError(EXIT_SCHEMA, f"--T lists {len(actions)} action counts for {args.N} players")
        resolved.update(N=args.N, T=actions)
        provenance.update(N=args.N, T=actions)
        _echo(resolved)
        game = sample_invariant_game(args.seed, args.N, actions)
    elif args.family == "disc":
        if len(args.T) != 1:
            raise CliError(EXIT_SCHEMA, "disc games take a single --T")
        resolved.update(N=2, T=args.T[0], Z=args.Z)
        _echo(resolved)
        game, latents = sample_disc_game(args.seed, args.T[0], args.Z)
        provenance.update(T=args.T[0], Z=args.Z, latents={"u": latents.u.tolist(), "v": latents.v.tolist()})
    else:
        if args.name is None:
            raise CliError(EXIT_SCHEMA, "--family named needs --name")
        resolved.update(name=args.name)
        _echo(resolved)
        try:
            game = build_named_game(args.name)
        except ValueError as exc:
            raise CliError(EXIT_SCHEMA, str(exc)) from None
        provenance.update(name=args.name)
    if args.p_observe < 1.0:
        mask = sample_mask(make_rng([args.seed, 1]), game.actions_per_player, args.p_observe)
        game = game.with_mask(mask)
        provenance["p_observe"] = args.p_observe
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_game(args.out, game, provenance)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_solve(args) -> int:
    from .oracles import ne_gap
    from .training import predict

    game = _load_game(args.game)
    model, meta = _load_checkpoint(args.checkpoint)
    _echo({"verb": "solve", "game": args.game, "checkpoint": args.checkpoint, "task": meta["task"],
           "seed": meta.get("seed"), "tool_version": __version__})
    if meta["task"] != "ne":
        raise CliError(EXIT_TASK, f"checkpoint was trained for task {meta['task']!r}; solve needs 'ne'")
    if not game.is_complete:
        raise CliError(EXIT_SCHEMA, "solve needs a fully observed game")
    try:
        profile = predict(model, [game], "ne")[0]
    except ValueError as exc:
        raise CliError(EXIT_TASK, str(exc)) from None
    report = ne_gap(game, profile)
    for p, sigma in enumerate(profile):
        print(f"player {p}: " + " ".join(f"{x:.6f}" for x in sigma))
    print(f"ne_gap {report.ne_gap:.6g}")
    return EXIT_OK


def _read_train_config(args):
    from .training import TrainConfig

    record: dict = {}
    if args.config is not None:
        path = _require_file(args.config)
        try:
            record = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_SCHEMA, f"{path}: cannot parse config: {exc}") from None
        if not isinstance(record, dict):
            raise CliError(EXIT_SCHEMA, f"{path}: config must be a JSON object")
    overrides = {"seed": args.seed, "steps": args.steps, "precision": args.precision}
    for key, value in overrides.items():
        if value is not None:
            record[key] = value
    if args.compile:
        record["compile"] = True
    try:
        return TrainConfig.from_dict(record)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_SCHEMA, f"invalid training config: {exc}") from None


def cmd_train(args) -> int:
    from .training import TrainingError, train, write_metrics_csv

    config = _read_train_config(args)
    out = Path(args.out)
    _echo({"verb": "train", "config": config.to_dict(), "seed": config.seed, "out": str(out),
           "tool_version": __version__})
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = train(config, callback=lambda m: print(
            f"step {m.step} train_loss {m.train_loss:.6g} eval {m.eval_metric:.6g}", flush=True))
    except TrainingError as exc:
        raise CliError(EXIT_TRAINING, f"training aborted: {exc}") from None
    write_metrics_csv(result.metrics, out / "metrics.csv")
    result.save(out / "checkpoint.npz")
    (out / "config.json").write_text(json.dumps(
        {"tool_version": __version__, **config.to_dict()}, sort_keys=True, indent=2) + "\n")
    print(f"final eval_metric {result.final_metric:.6g}")
    print(f"wrote {out / 'metrics.csv'} and {out / 'checkpoint.npz'}")
    return EXIT_OK


def _game_paths(spec: list[str]) -> list[Path]:
    paths: list[Path] = []
    for item in spec:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.json")))
        else:
            paths.append(_require_file(p))
    if not paths:
        raise CliError(EXIT_MISSING, "no game files found")
    return paths


def cmd_eval(args) -> int:
    from .training import Metrics, evaluate, write_metrics_csv

    model, meta = _load_checkpoint(args.checkpoint)
    paths = _game_paths(args.games)
    _echo({"verb": "eval", "checkpoint": args.checkpoint, "task": args.task, "games": len(paths),
           "seed": meta.get("seed"), "tool_version": __version__})
    if meta["task"] != args.task:
        raise CliError(EXIT_TASK, f"checkpoint was trained for task {meta['task']!r}, not {args.task!r}")
    games = [_load_game(p) for p in paths]
    if args.task in ("ne", "devgain") and not all(g.is_complete for g in games):
        raise CliError(EXIT_SCHEMA, f"task {args.task!r} needs fully observed games")
    try:
        report = evaluate(model, games, args.task)
    except ValueError as exc:
        raise CliError(EXIT_TASK, str(exc)) from None
    print(f"{args.task} metric {report.metric:.6g} over {report.num_games} games")
    if args.out is not None:
        write_metrics_csv([Metrics(meta.get("steps", 0), float("nan"), report.metric, 0.0)], args.out)
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    from .baselines import (
        elo_probabilities,
        fit_elo,
        fit_melo,
        melo_probabilities,
        prediction_tensor,
        unobserved_mse,
    )
    from .games import make_rng, sample_mask

    game = _load_game(args.game)
    if game.num_players != 2 or len(set(game.actions_per_player)) != 1:
        raise CliError(EXIT_SCHEMA, "rating baselines need a square two-player game")
    if args.p_observe is not None:
        mask = sample_mask(make_rng([args.mask_seed, 1]), game.actions_per_player, args.p_observe)
    elif game.mask is not None:
        mask = game.mask
    else:
        raise CliError(EXIT_SCHEMA, "game has no mask; pass --p-observe")
    _echo({"verb": "baseline", "method": args.method, "game": args.game, "mask_seed": args.mask_seed,
           "p_observe": args.p_observe, "k": args.k, "tool_version": __version__})
    if mask.all():
        raise CliError(EXIT_SCHEMA, "mask hides nothing; unobserved MSE is undefined")
    try:
        if args.method == "elo":
            ratings = fit_elo(game, mask)
            probs = elo_probabilities(ratings)
            record = {"ratings": ratings.ratings.tolist()}
        else:
            ratings = fit_melo(game, mask, k=args.k, seed=args.mask_seed)
            probs = melo_probabilities(ratings)
            record = {"ratings": ratings.ratings.tolist(), "cycle_vectors": ratings.cycle_vectors.tolist()}
    except ValueError as exc:
        raise CliError(EXIT_SCHEMA, str(exc)) from None
    mse = unobserved_mse(game, mask, prediction_tensor(probs))
    const = unobserved_mse(game, mask, np.full(game.payoffs.shape, 0.5))
    print(f"{args.method} unobserved_mse {mse:.6g}")
    print(f"constant_0.5 unobserved_mse {const:.6g}")
    if args.out is not None:
        record.update(method=args.method, game=str(args.game), mask_seed=args.mask_seed,
                      p_observe=args.p_observe, unobserved_mse=mse, tool_version=__version__)
        Path(args.out).write_text(json.dumps(record, sort_keys=True) + "\n")
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import (
        TOLERANCE,
        degenerate_mask_suite,
        equivariance_suite,
        gradient_suite,
        repeated_action_suite,
        symmetric_game_suite,
    )

    _echo({"verb": "check", "precision": args.precision, "pairs": args.pairs, "seed": args.seed,
           "tool_version": __version__})
    results = []
    rep = equivariance_suite(args.pairs, args.precision, seed=args.seed)
    results.append((rep, rep.passed(TOLERANCE[args.precision]), f"max error {rep.max_error:.3g}"))
    rep = repeated_action_suite(args.pairs // 10, args.precision, seed=args.seed)
    results.append((rep, rep.passed(1e-5), f"max error {rep.max_error:.3g}"))
    rep = symmetric_game_suite(args.pairs // 10, args.precision, seed=args.seed)
    results.append((rep, rep.passed(1e-5), f"max error {rep.max_error:.3g}"))
    rep = degenerate_mask_suite(args.pairs // 10, seed=args.seed, precision=args.precision)
    results.append((rep, rep.failures == 0, f"{rep.failures} non-finite trials"))
    rep = gradient_suite(seed=args.seed)
    results.append((rep, rep.failures == 0,
                    f"{rep.failures} coordinates outside rtol 1e-4 + atol 1e-9; max abs {rep.max_abs_error:.3g}"))
    failed = 0
    for rep, ok, detail in results:
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {rep.name}: {detail} ({rep.trials} trials, {rep.seconds:.1f}s)")
    return EXIT_CHECK if failed else EXIT_OK


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nfgt", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"nfgt {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("sample", help="write a sampled or named game as JSON")
    p.add_argument("--family", choices=["invariant", "disc", "named"], required=True)
    p.add_argument("--N", type=int, default=2)
    p.add_argument("--T", type=int, nargs="+", default=[4])
    p.add_argument("--Z", type=int, default=1)
    p.add_argument("--name", default=None, help="named game (coordination, matching_pennies, ...)")
    p.add_argument("--p-observe", dest="p_observe", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("solve", help="decode an equilibrium profile and score it")
    p.add_argument("--game", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--precision", type=int, choices=[32, 64], default=None)
    p.add_argument("--compile", action="store_true", help="compile the loss graph (faster, same results path)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on game files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--games", nargs="+", required=True, help="game JSON files or directories")
    p.add_argument("--task", choices=["ne", "devgain", "recon"], required=True)
    p.add_argument("--out", default=None, help="optional metrics CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="fit Elo or mElo on a masked game")
    p.add_argument("--method", choices=["elo", "melo"], required=True)
    p.add_argument("--game", required=True)
    p.add_argument("--mask-seed", dest="mask_seed", type=int, default=0)
    p.add_argument("--p-observe", dest="p_observe", type=float, default=None)
    p.add_argument("--k", type=int, default=3, help="mElo cycle components")
    p.add_argument("--out", default=None, help="optional ratings JSON")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("check", help="run the equivariance and gradient property suites")
    p.add_argument("--precision", type=int, choices=[32, 64], default=32)
    p.add_argument("--pairs", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_check)
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
