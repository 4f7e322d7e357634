"""Experiment harness: scenario configs in, CSVs and chain dumps out.

Subcommands:
    train-auction   train the mechanism net, write checkpoint + train.csv
    revenue         training curves for DLA / DLA-LR next to SPA baselines
    reliability     attack-strength x permitted-reputation accuracy grid
    verify-chain    integrity-check a chain dump
    replay          rebuild the seller reputation table from a chain dump

Exit codes: 0 success, 1 unexpected failure, 2 invalid config,
4 chain verification failure. Every run writes a manifest (config hash,
seed, tool version) into the output directory before any result file, and
reruns with the same manifest produce byte-identical CSVs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path


from . import __version__, auction, config as cfgmod, ledger, marketsim
from .auction import MarketShape
from .config import ConfigError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_BAD_CHAIN = 4


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_text_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="ascii", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in columns))
    write_text_atomic(path, "\n".join(lines) + "\n")


def write_manifest(out_dir: Path, config_path: str, config_bytes: bytes,
                   seed: int) -> None:
    manifest = {
        "config_path": str(config_path),
        "config_sha256": hashlib.sha256(config_bytes).hexdigest(),
        "master_seed": seed,
        "out_dir": str(out_dir),
        "tool_version": __version__,
    }
    write_text_atomic(out_dir / "manifest.json",
                      json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _prepare_run(args):
    with open(args.config, "rb") as fh:
        config_bytes = fh.read()
    cfg = cfgmod.parse_config_text(config_bytes.decode("utf-8"))
    seed = args.seed if args.seed is not None else cfg["seed"]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir, args.config, config_bytes, seed)
    return cfg, seed, out_dir


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train_auction(args) -> int:
    cfg, seed, out_dir = _prepare_run(args)
    shape = MarketShape(cfg["market.n_buyers"], cfg["market.n_items"])
    tc = cfgmod.train_config(cfg, seed)
    permitted = cfg["market.permitted_reputation"]

    def sampler(rng, n):
        return auction.uniform_value_sampler(rng, n, shape)

    def reps(rng, n):
        return rng.uniform(permitted, 1.0, size=(n, shape.n_items))

    anet, metrics = auction.train_dla(shape, sampler, reps, tc,
                                      log=None if args.quiet else print)
    auction.save_auction_net(anet, out_dir / "auction.ckpt")
    write_csv(out_dir / "train.csv",
              ["epoch", "revenue", "mean_regret", "max_regret", "loss"], metrics)
    return EXIT_OK


def cmd_revenue(args) -> int:
    cfg, seed, out_dir = _prepare_run(args)
    rc = cfgmod.revenue_config(cfg, seed)
    series = marketsim.run_revenue_experiment(
        rc, log=None if args.quiet else print)
    nets = series.pop("nets")
    rows = []
    for mech in rc.mechanisms:
        rows.extend(series[mech])
    write_csv(out_dir / "revenue.csv",
              ["epoch", "mechanism", "revenue", "mean_regret"], rows)
    for mech, anet in nets.items():
        name = mech.lower().replace("-", "_") + ".ckpt"
        auction.save_auction_net(anet, out_dir / name)
    return EXIT_OK


def cmd_reliability(args) -> int:
    cfg, seed, out_dir = _prepare_run(args)
    grid = cfgmod.reliability_config(cfg, seed)
    rows = marketsim.run_reliability_experiment(
        grid, jobs=args.jobs, log=None if args.quiet else print)
    write_csv(out_dir / "reliability.csv",
              ["attack_strength", "permitted_reputation", "seed",
               "mean_accuracy", "trades_executed"], rows)
    if args.dump_chains or cfg["reliability.dump_chains"]:
        index = []
        for ai, a in enumerate(grid.attack_strengths):
            for pi, p in enumerate(grid.permitted_reputations):
                for s in range(grid.seeds):
                    _, artifacts = marketsim.run_reliability_cell(
                        grid, a, p, s, with_artifacts=True)
                    name = f"chain_a{ai}_p{pi}_s{s}.ndjson"
                    write_text_atomic(out_dir / name, artifacts["chain_text"])
                    index.append({"file": name, "attack_strength": a,
                                  "permitted_reputation": p, "seed": s,
                                  "scenario_seed": artifacts["config"].master_seed})
        write_text_atomic(out_dir / "cells.json",
                          json.dumps(index, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_verify_chain(args) -> int:
    with open(args.infile, "r", encoding="ascii") as fh:
        text = fh.read()
    scheme = ledger.scheme_for_chain(text, args.registry_seed,
                                     marketsim.DELEGATES)
    verdict = ledger.verify_chain_text(text, list(marketsim.DELEGATES), scheme)
    if verdict is None:
        print(f"chain valid ({len(text.splitlines())} blocks)")
        return EXIT_OK
    print(f"chain INVALID at height {verdict}")
    return EXIT_BAD_CHAIN


def cmd_replay(args) -> int:
    cfg, seed, out_dir = _prepare_run(args)
    scenario_seed = args.registry_seed if args.registry_seed is not None else seed
    with open(args.infile, "r", encoding="ascii") as fh:
        text = fh.read()
    scheme = ledger.scheme_for_chain(text, scenario_seed, marketsim.DELEGATES)
    verdict = ledger.verify_chain_text(text, list(marketsim.DELEGATES), scheme)
    if verdict is not None:
        print(f"chain INVALID at height {verdict}")
        return EXIT_BAD_CHAIN
    blocks = ledger.parse_chain(text)
    last_round = max((b.round for b in blocks), default=0)
    scenario = marketsim.ScenarioConfig(
        n_buyers=cfg["market.n_buyers"], n_sellers=cfg["market.n_items"],
        rounds=max(1, last_round),
        attack_strengths=tuple(0.0 for _ in range(cfg["market.n_items"])),
        weights=cfgmod.aggregation_weights(cfg),
        rating_threshold=cfg["market.rating_threshold"],
        window=cfg["market.window"],
        reputation_prior=cfg["market.reputation_prior"],
        master_seed=scenario_seed, task=cfgmod.task_spec(cfg))
    table = marketsim.reputation_table_from_chain(
        blocks, list(marketsim.DELEGATES), scheme, scenario, now=last_round)
    rows = [{"seller": s, "reputation": table[s]} for s in sorted(table)]
    write_csv(out_dir / "reputation.csv", ["seller", "reputation"], rows)
    if not args.quiet:
        for row in rows:
            print(f"{row['seller']}: {row['reputation']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modelmarket",
        description="model trading market simulator and experiment harness")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", required=True, help="scenario config file")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config master seed")
        p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("train-auction", help="train the mechanism net")
    common(p)
    p.set_defaults(func=cmd_train_auction)

    p = sub.add_parser("revenue", help="revenue-vs-epochs experiment")
    common(p)
    p.set_defaults(func=cmd_revenue)

    p = sub.add_parser("reliability", help="attack/reputation accuracy grid")
    common(p)
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel workers for independent grid cells")
    p.add_argument("--dump-chains", action="store_true",
                   help="also write each cell's ledger dump")
    p.set_defaults(func=cmd_reliability)

    p = sub.add_parser("verify-chain", help="integrity-check a chain dump")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--registry-seed", type=int, default=0,
                   help="signature registry seed the run used")
    p.set_defaults(func=cmd_verify_chain)

    p = sub.add_parser("replay", help="rebuild reputations from a chain dump")
    common(p)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--registry-seed", type=int, default=None,
                   help="signature registry seed the run used (defaults to --seed)")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as exc:   # surfaced with a stable exit code
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
