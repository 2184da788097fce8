"""Evaluation and demonstration-quality experiments used by the CLI."""

from __future__ import annotations

import logging
import statistics
from dataclasses import dataclass, field

import numpy as np

from .network import RoadNetwork
from .oracle.dsl import parse_program
from .oracle.execution import execution_report
from .oracle.llm import OracleUnavailable
from .oracle.prompts import build_prompts, feedback_prompt
from .policy import PolicyBundle
from .rollout import PolicyController, run_episode
from .sed import build_feedback_report, evaluate_subset, mixed_rollout, partition_agents
from .sim import RoadNetEnv, Scenario
from .trainer import episode_seed
from .trajectory import dtw_normalized

log = logging.getLogger(__name__)


def mean_sd(values) -> dict:
    values = [float(v) for v in values]
    return {
        "mean": statistics.fmean(values),
        "sd": statistics.stdev(values) if len(values) > 1 else 0.0,
        "n": len(values),
    }


def evaluate_policies(bundles: list[PolicyBundle], network: RoadNetwork, scenario: Scenario,
                      episodes: int, seed: int = 0) -> dict:
    """Greedy rollouts; per-episode values are averaged over agents."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if len(bundles) != scenario.n_agents:
        raise ValueError(f"checkpoint has {len(bundles)} agents, scenario has {scenario.n_agents}")
    env = RoadNetEnv(network, scenario)
    controllers = {i: PolicyController(b.policy, greedy=True) for i, b in enumerate(bundles)}
    rewards, times, arrivals = [], [], []
    for k in range(episodes):
        rec = run_episode(env, controllers, episode_seed(seed, 0, k))
        trs = list(rec.trajectories.values())
        rewards.append(float(np.mean([tr.total_reward for tr in trs])))
        times.append(float(np.mean([tr.travel_time for tr in trs])))
        arrivals.append(float(np.mean([tr.arrived for tr in trs])))
    return {
        "episodes": episodes,
        "seed": seed,
        "episode_reward": mean_sd(rewards),
        "travel_time": mean_sd(times),
        "arrival_rate": mean_sd(arrivals),
        "per_episode": [{"reward": r, "travel_time": t} for r, t in zip(rewards, times)],
    }


@dataclass
class RoundStats:
    execution_rate: float | None = None
    mean_reward: float | None = None
    inference_s: float | None = None
    paths: dict[int, list[int]] = field(default_factory=dict)


def _demo_round(oracle, context, network, scenario, partition, policies, seed, rng):
    stats = RoundStats()
    try:
        reply = oracle.generate(context)
    except OracleUnavailable as exc:
        log.warning("oracle unavailable: %s", exc)
        return stats, None
    stats.inference_s = oracle.last_inference_s
    context.record_reply(reply)
    program = parse_program(reply, scenario.n_agents)
    stats.execution_rate = execution_report(program, scenario, network).rate
    agent_rec = run_episode(RoadNetEnv(network, scenario),
                            {i: PolicyController(p, rng) for i, p in policies.items()}, seed)
    results, rewards = [], []
    for j, subset in enumerate(partition.subsets):
        ro = mixed_rollout(subset, program.instructions, policies, RoadNetEnv(network, scenario), seed, rng)
        results.append(evaluate_subset(j, ro, agent_rec, policies, 0.99))
        for i in subset:
            tr = ro.record.trajectories[i]
            rewards.append(tr.total_reward)
            stats.paths[i] = list(tr.path)
    stats.mean_reward = float(np.mean(rewards)) if rewards else None
    report = build_feedback_report(results, 0)
    return stats, report


def demo_quality(oracle, network: RoadNetwork, scenario: Scenario, refinement_counts: list[int],
                 prompts: int = 10, seed: int = 0, n_subsets: int = 2, hidden: int = 128,
                 token_budget: int = 10_000) -> dict:
    """Execution rate, demonstration reward, oracle time and route drift per refinement count.

    Each of ``prompts`` independent sessions starts from freshly initialized
    policies, asks for a program, then feeds diagnostics back ``max(counts)``
    times. Statistics are mean and SD across sessions.
    """
    max_r = max(refinement_counts)
    per_count: dict[int, dict[str, list]] = {r: {"exec": [], "reward": [], "time": [], "dtw": []}
                                             for r in refinement_counts}
    unavailable: dict[int, int] = {r: 0 for r in refinement_counts}
    dtw_scale = float(np.mean([e.length for e in network.edges]))
    for p in range(prompts):
        rng = np.random.default_rng([seed, p, 3])
        policies = {
            i: PolicyBundle.create(network.m_out, network.n_junctions, rng, hidden).policy
            for i in range(scenario.n_agents)
        }
        partition = partition_agents(range(scenario.n_agents), min(n_subsets, scenario.n_agents), rng)
        context = build_prompts(scenario, network, budget=token_budget)
        ep_seed = episode_seed(seed, p, 0)
        initial: dict[int, list[int]] | None = None
        for r in range(max_r + 1):
            stats, report = _demo_round(oracle, context, network, scenario, partition, policies, ep_seed, rng)
            if r == 0:
                initial = stats.paths if stats.execution_rate is not None else None
            if r in per_count:
                if stats.execution_rate is None:
                    unavailable[r] += 1
                else:
                    cell = per_count[r]
                    cell["exec"].append(100.0 * stats.execution_rate)
                    if stats.mean_reward is not None:
                        cell["reward"].append(stats.mean_reward)
                    cell["time"].append(stats.inference_s)
                    if r > 0 and initial:
                        diffs = [
                            dtw_normalized(np.array([network.coord(j) for j in stats.paths[i]]) / dtw_scale,
                                           np.array([network.coord(j) for j in initial[i]]) / dtw_scale)
                            for i in stats.paths if i in initial and stats.paths[i] and initial[i]
                        ]
                        if diffs:
                            cell["dtw"].append(float(np.mean(diffs)))
            if report is not None:
                context.ask(feedback_prompt(report))
    rows = []
    for r in refinement_counts:
        cell = per_count[r]
        row = {"refinements": r, "sessions": prompts, "unavailable_sessions": unavailable[r]}
        for key, name in (("exec", "execution_rate_pct"), ("reward", "demo_reward"), ("time", "inference_s")):
            row[name] = mean_sd(cell[key]) if cell[key] else "unavailable"
        if r > 0:
            row["dtw_diff"] = mean_sd(cell["dtw"]) if cell["dtw"] else "unavailable"
        rows.append(row)
    return {"seed": seed, "rows": rows}

