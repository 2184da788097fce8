"""Command-line entry points: train, eval, demo-quality."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from .config import OracleConfig, RunConfig, load_config
from .network import load_network
from .oracle.llm import HttpOracle, OracleEndpoint
from .oracle.scripted import ScriptedOracle
from .policy import CheckpointError, load_checkpoint
from .sim import load_scenario
from .trainer import ConfigError, Trainer

log = logging.getLogger("navmarl")

EXIT_USAGE = 2
EXIT_FAILURE = 1


def make_oracle(oc: OracleConfig, scenario, network):
    if oc.kind == "scripted":
        return ScriptedOracle(scenario, network)
    return HttpOracle(OracleEndpoint(oc.base_url, oc.model, oc.timeout, oc.retries, oc.temperature,
                                     oc.backoff, oc.token_env))


def parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.seeds = args.seed
    if args.mode is not None:
        cfg.mode = args.mode
        cfg.trainer = replace(cfg.trainer, mode=args.mode)
    if args.oracle is not None:
        cfg.oracle = replace(cfg.oracle, kind=args.oracle)
        if args.oracle == "http" and (not cfg.oracle.base_url or not cfg.oracle.model):
            raise ConfigError([("oracle.base_url", "the http oracle needs base_url and model in [oracle]")])
    if args.out is not None:
        cfg.out_dir = Path(args.out)
    return cfg


def sidecar(cfg: RunConfig, seed: int, **extra) -> dict:
    return {"config_digest": cfg.digest(), "seed": seed, "mode": cfg.mode, "version": __version__,
            "config": str(cfg.source) if cfg.source else None, **extra}


def write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def cmd_train(cfg: RunConfig) -> int:
    network = load_network(cfg.network)
    scenario = load_scenario(cfg.scenario)
    status = 0
    for seed in cfg.seeds:
        run_dir = cfg.out_dir / f"seed_{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        tc = cfg.trainer_for(seed)
        oracle = make_oracle(cfg.oracle, scenario, network) if cfg.mode == "reled" else None
        trainer = Trainer(tc, network, scenario, oracle, run_dir)
        write_json(run_dir / "run.json", sidecar(cfg, seed, status="running", trainer=asdict(tc)))
        try:
            result = trainer.run()
        except Exception as exc:  # keep partial artifacts and record why the run stopped
            log.error("seed %d failed: %s", seed, exc)
            write_json(run_dir / "failure.json", {**sidecar(cfg, seed), "error": repr(exc),
                                                  "traceback": traceback.format_exc()})
            write_json(run_dir / "run.json", sidecar(cfg, seed, status="failed", trainer=asdict(tc)))
            status = EXIT_FAILURE
            continue
        finally:
            if cfg.mode == "reled":
                _write_transcript(run_dir / "transcript.jsonl", trainer, cfg, seed)
        write_json(run_dir / "run.json", sidecar(cfg, seed, status="completed", trainer=asdict(tc),
                                                 demo_epochs=result.demo_epochs))
        last = [m for m in result.metrics if m["epoch"] == tc.epochs]
        mean = sum(m["mean_reward"] for m in last) / max(len(last), 1)
        print(f"seed {seed}: {tc.epochs} epochs, final mean reward {mean:.2f} -> {run_dir}")
    return status


def _write_transcript(path: Path, trainer: Trainer, cfg: RunConfig, seed: int) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"header": sidecar(cfg, seed)}) + "\n")
        for entry in trainer.transcript:
            fh.write(json.dumps(asdict(entry)) + "\n")


def cmd_eval(cfg: RunConfig, checkpoint: Path | None, episodes: int | None) -> int:
    from .experiments import evaluate_policies

    network = load_network(cfg.network)
    scenario = load_scenario(cfg.scenario)
    episodes = episodes or cfg.eval_episodes
    status = 0
    for seed in cfg.seeds:
        ckpt = checkpoint or cfg.checkpoint or cfg.out_dir / f"seed_{seed}" / "checkpoints" / "final.npz"
        bundles, _ = load_checkpoint(ckpt, network.m_out, network.n_junctions)
        report = evaluate_policies(bundles, network, scenario, episodes, seed)
        report["checkpoint"] = str(ckpt)
        out = cfg.out_dir / f"seed_{seed}" / "eval.json"
        write_json(out, {**sidecar(cfg, seed), **report})
        r, t = report["episode_reward"], report["travel_time"]
        print(f"seed {seed}: reward {r['mean']:.2f} ± {r['sd']:.2f}, travel time {t['mean']:.2f} ± {t['sd']:.2f} "
              f"over {episodes} episode(s) -> {out}")
    return status


def cmd_demo_quality(cfg: RunConfig, refinement_counts: list[int] | None) -> int:
    from .experiments import demo_quality

    network = load_network(cfg.network)
    scenario = load_scenario(cfg.scenario)
    counts = sorted(set(refinement_counts)) if refinement_counts else cfg.refinement_counts
    for seed in cfg.seeds:
        oracle = make_oracle(cfg.oracle, scenario, network)
        report = demo_quality(oracle, network, scenario, counts, cfg.prompts, seed,
                              cfg.trainer.n_subsets, cfg.trainer.hidden, cfg.oracle.token_budget)
        out = cfg.out_dir / f"seed_{seed}" / "demo_quality.json"
        write_json(out, {**sidecar(cfg, seed), **report})
        _write_tidy(out.with_suffix(".csv"), report)
        for row in report["rows"]:
            ex = row["execution_rate_pct"]
            ex_txt = f"{ex['mean']:.1f} ± {ex['sd']:.1f}%" if isinstance(ex, dict) else ex
            print(f"seed {seed}, refinements {row['refinements']}: execution rate {ex_txt}")
    return 0


def _write_tidy(path: Path, report: dict) -> None:
    lines = ["refinements,metric,mean,sd,n"]
    for row in report["rows"]:
        for metric in ("execution_rate_pct", "demo_reward", "inference_s", "dtw_diff"):
            if metric not in row:
                continue
            v = row[metric]
            if isinstance(v, dict):
                lines.append(f"{row['refinements']},{metric},{v['mean']!r},{v['sd']!r},{v['n']}")
            else:
                lines.append(f"{row['refinements']},{metric},,,0")
    path.write_text("\n".join(lines) + "\n")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="navmarl", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, type=Path, help="TOML run configuration")
        sp.add_argument("--seed", type=parse_seeds, help="comma-separated seeds (overrides [run].seeds)")
        sp.add_argument("--mode", choices=("reled", "ippo"))
        sp.add_argument("--oracle", choices=("scripted", "http"))
        sp.add_argument("--out", type=Path, help="output directory (overrides [paths].out)")

    common(sub.add_parser("train", help="train policies, one run directory per seed"))
    ev = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    common(ev)
    ev.add_argument("--checkpoint", type=Path)
    ev.add_argument("--episodes", type=int)
    dq = sub.add_parser("demo-quality", help="oracle demonstration quality report")
    common(dq)
    dq.add_argument("--refinements", type=parse_seeds, help="comma-separated refinement counts")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            if args.episodes is not None and args.episodes < 1:
                raise ConfigError([("--episodes", "must be >= 1")])
            return cmd_eval(cfg, args.checkpoint, args.episodes)
        return cmd_demo_quality(cfg, args.refinements)
    except ConfigError as exc:
        for key, msg in exc.problems:
            print(f"navmarl: config error: {key}: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"navmarl: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"navmarl: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
