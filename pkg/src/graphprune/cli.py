"""Command line entry point: ``graphprune <command> ...``.

Exit codes: 0 success, 2 configuration or parse error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autograd as ag
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .correlation import capture_activations, correlation_report
from .data import DataError, load_dataset, make_synthetic, parse_synth_spec
from .ddpg import InfeasibleBudgetError, SearchConfig
from .gcn import neighbor_distance_report
from .graph import (BUNDLED, ParseError, RatioSharingError, build_adjacency, count_flops, count_params,
                    load_bundled, load_model_description, renormalize_adjacency, uniform_ratios)
from .pipeline import budget_from_fraction, search_model
from .reports import (COST_HEADER, channel_series, cost_rows, read_csv, read_ratio_file, search_log_rows,
                      write_csv, write_json, write_matrix, write_ratio_file)
from .trainer import DEFAULT_GRID, GraphPruningModel, NumericError, TrainConfig, evaluate_config, retrain, train

logger = logging.getLogger("graphprune")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------------
# configuration

TRAIN_KEYS = {"epochs": int, "batch_size": int, "init_lr": float, "momentum": float,
              "weight_decay": float, "lr_schedule": str, "mix_neighbors": bool, "hypernet_hidden": int}
SEARCH_KEYS = {"episodes": int, "warmup_episodes": int, "noise_init": float, "noise_decay": float,
               "discount": float, "batch_size": int, "tau": float, "buffer_capacity": int,
               "hidden": int, "actor_lr": float, "critic_lr": float, "reward_window": int,
               "updates_per_episode": int, "logit_penalty": float}


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _get(section, key, kind):
    if kind is bool:
        return section.getboolean(key)
    return kind(section[key])


def read_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
    for name in ("model", "data", "train", "search"):
        if not cp.has_section(name):
            cp.add_section(name)
    return cp


def train_config(cp, seed: int) -> TrainConfig:
    s = cp["train"]
    kw = {}
    try:
        for key, kind in TRAIN_KEYS.items():
            if key in s:
                kw[key] = _get(s, key, kind)
        if "ratio_grid" in s:
            kw["ratio_grid"] = _floats(s["ratio_grid"])
        if "augmentation" in s:
            aug = {a.strip() for a in s["augmentation"].replace("+", ",").split(",") if a.strip()}
            if not aug <= {"crop", "flip", "none"}:
                raise ConfigError(f"unknown augmentation {sorted(aug - {'crop', 'flip', 'none'})}")
            kw["crop"], kw["flip"] = "crop" in aug, "flip" in aug
        return TrainConfig(seed=seed, **kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[train]: {exc}") from None


def search_config(cp, seed: int, graph_budget=None, ratio_grid=DEFAULT_GRID) -> SearchConfig:
    s = cp["search"]
    kw = {}
    try:
        for key, kind in SEARCH_KEYS.items():
            if key in s:
                kw[key] = _get(s, key, kind)
        return SearchConfig(seed=seed, budget=graph_budget, ratio_grid=tuple(ratio_grid), **kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[search]: {exc}") from None


def resolve_description(value):
    if value is None:
        raise ConfigError("no model description given (use --description or [model] description)")
    if value in BUNDLED:
        return load_bundled(value)
    if not Path(value).is_file():
        raise ConfigError(f"model description {value} does not exist")
    return load_model_description(value)


def load_splits(args, cp):
    """(train, recal, eval) splits from --data / --synth or the [data] section."""
    d = cp["data"]
    path = args.data or d.get("path")
    synth = args.synth or d.get("synth")
    if path:
        ds = load_dataset(path)
    elif synth:
        ds = make_synthetic(*parse_synth_spec(synth))
    else:
        raise DataError("no dataset given (use --data DIR or --synth classes,n,hw,seed)")
    fractions = _floats(d.get("splits", "0.6 0.1 0.3"))
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError("[data] splits must be three fractions summing to 1")
    parts = ds.split(fractions[0], fractions[1])
    for name, part in zip(("train", "recalibration", "evaluation"), parts):
        if len(part) == 0:
            raise DataError(f"{name} split is empty")
    return parts


# ----------------------------------------------------------------------------
# commands


def cmd_transform(args, cp, out: Path) -> int:
    g = resolve_description(args.description)
    a_hat = renormalize_adjacency(build_adjacency(g))
    write_matrix(out / "adjacency.csv", a_hat, prefix="n")
    print(f"{g.num_nodes} nodes, {len(g.edges)} edges")
    print(f"{len(g.conv_nodes)} convolutions, {len(g.prunable)} free ratios, {count_flops(g)} MACs")
    return 0


def cmd_train(args, cp, out: Path) -> int:
    config = train_config(cp, args.seed)
    if args.epochs is not None:
        config.epochs = args.epochs
    train_set, recal_set, eval_set = load_splits(args, cp)
    if args.resume:
        model = load_checkpoint(args.resume)
        model.config.epochs = config.epochs
    else:
        g = resolve_description(args.description or cp["model"].get("description"))
        model = GraphPruningModel(g, train_set.num_classes, config)
    train(model, train_set, model.config, epochs=config.epochs)
    save_checkpoint(model, out / "checkpoint.gpck")
    write_csv(out / "loss_curve.csv", ["epoch", "loss"], ((k + 1, v) for k, v in enumerate(model.loss_history)))
    full = evaluate_config(model, uniform_ratios(model.graph, 1.0), recal_set, eval_set)
    print(f"trained {model.epochs_completed} epochs, final loss {model.loss_history[-1]:.4f}, "
          f"unpruned accuracy {full.accuracy:.4f}")
    return 0


def cmd_search(args, cp, out: Path) -> int:
    model = load_checkpoint(args.checkpoint)
    _, recal_set, eval_set = load_splits(args, cp)
    fraction = args.budget if args.budget is not None else float(cp["search"].get("budget_fraction", "0.5"))
    config = search_config(cp, args.seed, budget_from_fraction(model, fraction), model.config.ratio_grid)
    if args.episodes is not None:
        config.episodes = args.episodes
    result = search_model(model, recal_set, eval_set, config)
    header, rows = search_log_rows(model.graph, result.log)
    write_csv(out / "search_log.csv", header, rows)
    write_ratio_file(out / "best_ratios.txt", model.graph, result.best_ratios)
    print(f"best reward {result.best_reward:.4f} at {result.best_flops} MACs "
          f"(budget {config.budget:.0f}, baseline {count_flops(model.graph)})")
    return 0


def cmd_flops(args, cp, out: Path) -> int:
    g = resolve_description(args.description)
    ratios = read_ratio_file(args.ratios, g) if args.ratios else uniform_ratios(g, 1.0)
    write_csv(out / "flops.csv", COST_HEADER, cost_rows(g, ratios))
    flops, params = count_flops(g, ratios), count_params(g, ratios)
    base = count_flops(g)
    print(f"macs {flops} ({flops / base:.4f} of baseline {base})")
    print(f"params {params} ({params / count_params(g):.4f} of baseline {count_params(g)})")
    return 0


def cmd_report(args, cp, out: Path) -> int:
    if not args.ratio_files:
        raise ConfigError("report needs at least one ratio file")
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        g = model.graph
    else:
        g = resolve_description(args.description or cp["model"].get("description"))
        model = GraphPruningModel(g, 2, TrainConfig(seed=args.seed))
    named = [(Path(p).stem, read_ratio_file(p, g)) for p in args.ratio_files]
    header, rows = channel_series(g, named)
    write_csv(out / "channels.csv", header, rows)
    for label, ratios in named:
        with ag.no_grad():
            dist = neighbor_distance_report(model.embeddings(ratios))
        write_matrix(out / f"distance_{label}.csv", dist, prefix="n")
    if args.log:
        head, log_rows = read_csv(args.log)
        if head[:2] != ["episode", "reward"]:
            raise ConfigError(f"{args.log} is not a search log")
        best, curve = -np.inf, []
        for row in log_rows:
            best = max(best, float(row[1]))
            curve.append([int(row[0]), float(row[1]), best])
        write_csv(out / "reward_curve.csv", ["episode", "reward", "best_reward"], curve)
    print(f"reported {len(named)} configurations")
    return 0


def cmd_analyze_corr(args, cp, out: Path) -> int:
    model = load_checkpoint(args.checkpoint)
    g = model.graph
    ratios = read_ratio_file(args.ratios, g) if args.ratios else uniform_ratios(g, 1.0)
    _, recal_set, eval_set = load_splits(args, cp)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 23]))
    probe = eval_set.images[np.sort(rng.choice(len(eval_set), size=min(args.probe, len(eval_set)), replace=False))]
    evaluate_config(model, ratios, recal_set, eval_set)
    a, b = args.layers
    stacks = capture_activations(model, ratios, sorted({a, b}), probe, source=f"evaluation split, {len(probe)} images")
    report = correlation_report(stacks[a], stacks[b], args.mode, args.tau)
    stem = f"corr_{args.mode}_{a}_{b}"
    write_matrix(out / f"{stem}_matrix.csv", report.matrix)
    write_csv(out / f"{stem}_pairs.csv", ["i", "j", "value"], report.pairs)
    summary = report.summary()
    summary["probe_images"] = len(probe)
    write_json(out / f"{stem}_summary.json", summary)
    print(f"{len(report.pairs)} pairs with |p| > {args.tau} ({args.mode} mode)")
    return 0


def cmd_retrain(args, cp, out: Path) -> int:
    g = resolve_description(args.description or cp["model"].get("description"))
    ratios = read_ratio_file(args.ratios, g) if args.ratios else None
    config = train_config(cp, args.seed)
    if args.epochs is not None:
        config.epochs = args.epochs
    train_set, recal_set, eval_set = load_splits(args, cp)
    net = retrain(g, ratios, train_set, config)
    result = evaluate_config(net, None, recal_set, eval_set)
    save_checkpoint(net, out / "retrained.gpck")
    write_csv(out / "retrain_loss.csv", ["epoch", "loss"], ((k + 1, v) for k, v in enumerate(net.loss_history)))
    write_json(out / "retrain_summary.json", {"accuracy": result.accuracy, "macs": count_flops(net.graph),
                                               "params": count_params(net.graph), "epochs": net.epochs_completed})
    print(f"retrained accuracy {result.accuracy:.4f} at {count_flops(net.graph)} MACs")
    return 0


COMMANDS = {"transform": cmd_transform, "train": cmd_train, "search": cmd_search, "flops": cmd_flops,
            "report": cmd_report, "analyze-corr": cmd_analyze_corr, "retrain": cmd_retrain}


# ----------------------------------------------------------------------------
# argument parsing


def _global_flags(default) -> argparse.ArgumentParser:
    # the subcommand copy uses SUPPRESS so flags given before the subcommand survive
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=default, help="INI file with [model] [data] [train] [search] sections")
    p.add_argument("--seed", type=int, default=default, help="seed for every stochastic component")
    p.add_argument("--out", default=default, help="output directory (default: current directory)")
    p.add_argument("--threads", type=int, default=default, help="BLAS threads; 1 is fully deterministic")
    p.add_argument("-v", "--verbose", action="store_true", default=default or False)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(argparse.SUPPRESS)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="dataset directory (meta, images.bin, labels.bin)")
    data.add_argument("--synth", help="synthetic dataset classes,n,hw,seed")

    p = argparse.ArgumentParser(prog="graphprune", parents=[_global_flags(None)],
                                description="Graph-aggregated pruning: train, search and analyse.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("transform", parents=[common], help="parse a model description and dump its adjacency")
    s.add_argument("description")

    s = sub.add_parser("train", parents=[common, data], help="train the pruning network")
    s.add_argument("--description")
    s.add_argument("--epochs", type=int)
    s.add_argument("--resume", help="checkpoint to continue training from")

    s = sub.add_parser("search", parents=[common, data], help="DDPG search for per-layer ratios")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--budget", type=float, help="FLOPs budget as a fraction of the unpruned network")
    s.add_argument("--episodes", type=int)

    s = sub.add_parser("flops", parents=[common], help="MACs and parameters of a configuration")
    s.add_argument("description")
    s.add_argument("ratios", nargs="?")

    s = sub.add_parser("report", parents=[common], help="channel series and node distance matrices")
    s.add_argument("ratio_files", nargs="*")
    s.add_argument("--log", help="search log CSV")
    s.add_argument("--checkpoint")
    s.add_argument("--description")

    s = sub.add_parser("analyze-corr", parents=[common, data], help="filter correlation between two layers")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--ratios")
    s.add_argument("--layers", type=int, nargs=2, required=True, metavar=("A", "B"))
    s.add_argument("--mode", choices=("standard", "literal"), default="standard")
    s.add_argument("--tau", type=float, default=0.8)
    s.add_argument("--probe", type=int, default=64, help="probe images from the evaluation split")

    s = sub.add_parser("retrain", parents=[common, data], help="train a pruned network from scratch")
    s.add_argument("--description")
    s.add_argument("--ratios")
    s.add_argument("--epochs", type=int)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cp = read_config(args.config)
        if args.seed is None:
            args.seed = int(cp["model"].get("seed", "0"))
        out = Path(args.out or cp["model"].get("out", "."))
        out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args, cp, out)
    except (ParseError, ConfigError, RatioSharingError, CheckpointError, InfeasibleBudgetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
