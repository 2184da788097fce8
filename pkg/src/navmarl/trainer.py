"""Hybrid expert/agent policy optimization and the full training loop.

Each agent owns a policy, an agent-data value net and an expert-data value
net. Every epoch collects whole episodes from the current joint policy;
every ``demo_interval`` epochs the agents are split into subsets, an
oracle plans routes, and each subset drives one instruction rollout while
the others act from their policies. Those expert trajectories are reused
until the next round. Policies maximize

    alpha * L_agent + (1 - alpha) * L_expert + beta * E[H(pi)]

with ``alpha = exp(-(k / K) * dtw)`` per agent, where ``dtw`` compares the
agent's route with its latest expert route.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractViolation
from .network import RoadNetwork
from .oracle.dsl import parse_program
from .oracle.llm import OracleUnavailable
from .oracle.prompts import PromptContext, build_prompts, feedback_prompt
from .policy import (
    PolicyBundle, check_finite, entropy_grad, log_prob_grad, masked_log_softmax,
    optimizer_step, save_checkpoint, value_loss_and_grad,
)
from .rollout import EpisodeRecord, PolicyController, run_episode
from .sed import (
    SubsetResult, build_feedback_report, evaluate_subset, mixed_rollout, partition_agents,
)
from .sim import RoadNetEnv, Scenario
from .trajectory import (
    Trajectory, advantages, dtw, path_points, trajectory_returns, write_trajectory_log,
)

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "agent_id", "mean_reward", "mean_travel_time", "alpha", "dtw",
                  "rvi_count", "pdi_max", "bound_value", "wall_clock_s")
MODES = ("reled", "ippo")
ALPHA_FLOOR = 1e-12


# -- losses ------------------------------------------------------------------------


def value_loss(predictions, returns) -> float:
    v = np.asarray(predictions, dtype=np.float64)
    r = np.asarray(returns, dtype=np.float64)
    if v.size == 0:
        raise ContractViolation("value loss of an empty batch")
    if v.shape != r.shape:
        raise ContractViolation(f"length mismatch: {v.shape} predictions vs {r.shape} returns")
    return float(np.mean((v - r) ** 2))


def clipped_surrogate(log_prob_new, log_prob_old, advantage, epsilon: float) -> float:
    """Batch mean of min(w A, clip(w, 1-eps, 1+eps) A), w = exp(new - old)."""
    return float(np.mean(_surrogate_terms(log_prob_new, log_prob_old, advantage, epsilon)[0]))


def _surrogate_terms(lp_new, lp_old, adv, eps):
    if not 0.0 < eps < 1.0:
        raise ContractViolation(f"clip epsilon must lie in (0, 1), got {eps}")
    lp_new = np.asarray(lp_new, dtype=np.float64)
    ratio = np.exp(lp_new - np.asarray(lp_old, dtype=np.float64))
    adv = np.asarray(adv, dtype=np.float64)
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
    unclipped_obj = ratio * adv
    obj = np.minimum(unclipped_obj, clipped * adv)
    # gradient flows through the ratio wherever the unclipped term is the active one
    active = (unclipped_obj <= clipped * adv) | ((ratio >= 1.0 - eps) & (ratio <= 1.0 + eps))
    d_lp = np.where(active, unclipped_obj, 0.0)
    return obj, d_lp


def hybrid_alpha(k: int, K: int, dtw_normalized: float) -> float:
    if not 1 <= k <= K:
        raise ContractViolation(f"need 1 <= k <= K, got k={k}, K={K}")
    if not dtw_normalized >= 0:
        raise ContractViolation(f"dtw must be nonnegative, got {dtw_normalized}")
    return math.exp(-(k / K) * dtw_normalized)


def hybrid_loss(agent_surrogate: float, expert_surrogate: float, alpha: float,
                entropy: float, beta: float) -> float:
    """alpha * L_a + (1 - alpha) * L_e + beta * H, an objective to maximize."""
    if not 0.0 < alpha <= 1.0:
        raise ContractViolation(f"alpha must lie in (0, 1], got {alpha}")
    if not 0.0 <= beta <= 1.0:
        raise ContractViolation(f"beta must lie in [0, 1], got {beta}")
    if alpha == 1.0:
        return agent_surrogate + beta * entropy
    return alpha * agent_surrogate + (1.0 - alpha) * expert_surrogate + beta * entropy


@dataclass
class Batch:
    obs: np.ndarray
    masks: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    def take(self, idx) -> "Batch":
        return Batch(*(getattr(self, f.name)[idx] for f in fields(self)))


def _policy_terms(policy, batch: Batch, weight: float, eps: float):
    """Surrogate value plus d(weight * surrogate)/dlogits for one batch."""
    logits, cache = policy.logits(batch.obs)
    lp = masked_log_softmax(logits, batch.masks)
    lp_new = lp[np.arange(len(batch)), batch.actions]
    obj, d_lp = _surrogate_terms(lp_new, batch.old_log_probs, batch.advantages, eps)
    check_finite(obj)
    g = log_prob_grad(lp, batch.actions, weight * d_lp / len(batch))
    return float(obj.mean()), lp, g, cache


def hybrid_objective_and_grad(policy, agent: Batch, expert: Batch | None, alpha: float,
                              beta: float, eps: float):
    """Hybrid objective and the gradient of its negation w.r.t. policy parameters.

    The entropy bonus is averaged over the agent batch.
    """
    if expert is None or len(expert) == 0:
        alpha = 1.0
    la, lp_a, g_a, cache_a = _policy_terms(policy, agent, alpha, eps)
    ent = float(np.mean(_entropy(lp_a)))
    g_a = g_a + entropy_grad(lp_a, np.full(len(agent), beta / len(agent)))
    grads = policy.backward(cache_a, -g_a)
    le = 0.0
    if alpha < 1.0:
        le, _, g_e, cache_e = _policy_terms(policy, expert, 1.0 - alpha, eps)
        for k, v in policy.backward(cache_e, -g_e).items():
            grads[k] = grads[k] + v
    return hybrid_loss(la, le, alpha, ent, beta), grads


def ippo_objective_and_grad(policy, agent: Batch, beta: float, eps: float):
    """Plain clipped surrogate plus entropy bonus (independent PPO)."""
    logits, cache = policy.logits(agent.obs)
    lp = masked_log_softmax(logits, agent.masks)
    lp_new = lp[np.arange(len(agent)), agent.actions]
    obj, d_lp = _surrogate_terms(lp_new, agent.old_log_probs, agent.advantages, eps)
    check_finite(obj)
    g = log_prob_grad(lp, agent.actions, d_lp / len(agent))
    g = g + entropy_grad(lp, np.full(len(agent), beta / len(agent)))
    ent = float(np.mean(_entropy(lp)))
    return float(obj.mean()) + beta * ent, policy.backward(cache, -g)


def _entropy(lp: np.ndarray) -> np.ndarray:
    p = np.exp(lp)
    return -(p * np.where(p > 0, lp, 0.0)).sum(axis=1)


# -- configuration ------------------------------------------------------------------


@dataclass
class TrainerConfig:
    gamma: float = 0.99
    lr: float = 3e-4
    clip_eps: float = 0.2
    entropy_coef: float = 0.01
    demo_interval: int = 10
    n_subsets: int = 2
    epochs: int = 500
    steps_per_epoch: int = 1000
    update_passes: int = 4
    minibatch_size: int = 64
    hidden: int = 128
    seed: int = 0
    mode: str = "reled"
    step_cap: int = 200
    checkpoint_interval: int = 0  # 0: final checkpoint only
    log_trajectories: bool = True
    record_wall_clock: bool = False
    demonstrations: bool = True
    force_alpha: float | None = None
    dtw_scale: float | None = None  # meters per DTW unit; None: mean edge length

    def __post_init__(self):
        errors = []
        if not 0.0 <= self.gamma < 1.0:
            errors.append(("gamma", "must lie in [0, 1)"))
        if not self.lr > 0:
            errors.append(("lr", "must be positive"))
        if not 0.0 < self.clip_eps < 1.0:
            errors.append(("clip_eps", "must lie in (0, 1)"))
        if not 0.0 < self.entropy_coef <= 1.0:
            errors.append(("entropy_coef", "must lie in (0, 1]"))
        for name in ("demo_interval", "n_subsets", "epochs", "steps_per_epoch", "update_passes",
                     "minibatch_size", "hidden", "step_cap"):
            if getattr(self, name) < 1:
                errors.append((name, "must be >= 1"))
        if self.checkpoint_interval < 0:
            errors.append(("checkpoint_interval", "must be >= 0"))
        if self.mode not in MODES:
            errors.append(("mode", f"must be one of {MODES}"))
        if self.force_alpha is not None and not 0.0 < self.force_alpha <= 1.0:
            errors.append(("force_alpha", "must lie in (0, 1]"))
        if self.dtw_scale is not None and not self.dtw_scale > 0:
            errors.append(("dtw_scale", "must be positive"))
        if errors:
            raise ConfigError(errors)

    def digest_fields(self) -> dict:
        return asdict(self)


class ConfigError(ValueError):
    def __init__(self, problems: Sequence[tuple[str, str]]):
        self.problems = list(problems)
        super().__init__("; ".join(f"{k}: {msg}" for k, msg in self.problems))


# -- training loop ----------------------------------------------------------------------


def episode_seed(seed: int, epoch: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, episode]).generate_state(1)[0])


@dataclass
class ExpertDemo:
    trajectory: Trajectory
    epoch: int


@dataclass
class DemoRound:
    epoch: int
    results: list[SubsetResult] = field(default_factory=list)
    failed: str | None = None


@dataclass
class TranscriptEntry:
    epoch: int
    messages: list[dict]
    reply: str | None
    inference_s: float
    error: str | None = None
    diagnostics: list[str] = field(default_factory=list)


@dataclass
class TrainResult:
    bundles: list[PolicyBundle]
    metrics: list[dict]
    transcript: list[TranscriptEntry]
    demo_epochs: list[int]


class MetricsWriter:
    """One CSV row per agent per epoch; floats use their shortest round-trip form."""

    def __init__(self, fh):
        self.fh = fh
        self.writer = csv.writer(fh, lineterminator="\n")
        self.writer.writerow(METRICS_HEADER)

    def write(self, row: dict) -> None:
        self.writer.writerow([_cell(row[k]) for k in METRICS_HEADER])
        self.fh.flush()


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class Trainer:
    def __init__(self, config: TrainerConfig, network: RoadNetwork, scenario: Scenario,
                 oracle=None, out_dir: str | Path | None = None):
        scenario.validate_for(network)
        self.cfg = config
        self.network = network
        self.scenario = scenario
        self.oracle = oracle if config.mode == "reled" else None
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.n = scenario.n_agents
        init = np.random.default_rng([config.seed, 0xB0B])
        self.bundles = [
            PolicyBundle.create(network.m_out, network.n_junctions, np.random.default_rng(init.integers(2**63)),
                                config.hidden, config.lr)
            for _ in range(self.n)
        ]
        self.env = RoadNetEnv(network, scenario)
        # route coordinates are compared in units of the mean road length
        self.dtw_scale = config.dtw_scale or float(np.mean([e.length for e in network.edges]))
        self.experts: dict[int, ExpertDemo] = {}
        self.context: PromptContext | None = None
        self.transcript: list[TranscriptEntry] = []
        self.metrics: list[dict] = []
        self.demo_epochs: list[int] = []
        self._metrics_writer: MetricsWriter | None = None
        self._traj_fh = None

    # -- rollouts

    def collect(self, epoch: int) -> list[EpisodeRecord]:
        rng = np.random.default_rng([self.cfg.seed, epoch, 0])
        controllers = {i: PolicyController(self.bundles[i].policy, rng) for i in range(self.n)}
        records, decisions, k = [], 0, 0
        while decisions < self.cfg.steps_per_epoch:
            rec = run_episode(self.env, controllers, episode_seed(self.cfg.seed, epoch, k))
            records.append(rec)
            decisions += rec.n_decisions
            k += 1
            if rec.n_decisions == 0:
                raise ContractViolation("episode produced no decisions; check the scenario")
        return records

    def demonstration_round(self, epoch: int, agent_record: EpisodeRecord) -> DemoRound:
        rnd = DemoRound(epoch)
        rng = np.random.default_rng([self.cfg.seed, epoch, 1])
        partition = partition_agents(range(self.n), min(self.cfg.n_subsets, self.n), rng, epoch)
        if self.context is None:
            self.context = build_prompts(self.scenario, self.network)
        messages = self.context.messages()
        try:
            reply = self.oracle.generate(self.context)
        except OracleUnavailable as exc:
            log.warning("epoch %d: %s; training on agent data only", epoch, exc)
            self.transcript.append(TranscriptEntry(epoch, messages, None, self.oracle.last_inference_s, str(exc)))
            self.experts.clear()
            rnd.failed = str(exc)
            return rnd
        self.context.record_reply(reply)
        program = parse_program(reply, self.n)
        self.transcript.append(TranscriptEntry(epoch, messages, reply, self.oracle.last_inference_s,
                                               None, [str(d) for d in program.diagnostics]))
        policies = {i: self.bundles[i].policy for i in range(self.n)}
        self.experts.clear()
        for j, subset in enumerate(partition.subsets):
            covered = [i for i in subset if program.for_agent(i)]
            if not covered:
                log.info("epoch %d: no instructions for subset %s, skipped", epoch, subset)
                continue
            env = RoadNetEnv(self.network, self.scenario)
            ro = mixed_rollout(subset, program.instructions, policies, env, agent_record.seed, rng,
                               self.cfg.step_cap)
            result = evaluate_subset(j, ro, agent_record, policies, self.cfg.gamma)
            rnd.results.append(result)
            for i in covered:
                tr = ro.record.trajectories[i]
                if len(tr):
                    self.experts[i] = ExpertDemo(tr, epoch)
        if rnd.results:
            report = build_feedback_report(rnd.results, epoch)
            self.context.ask(feedback_prompt(report))
        return rnd

    # -- updates

    def _agent_batch(self, i: int, records: list[EpisodeRecord]) -> Batch | None:
        b = self.bundles[i]
        parts = []
        for rec in records:
            tr = rec.trajectories[i]
            if len(tr):
                parts.append((tr, trajectory_returns(tr, b.agent_value, self.cfg.gamma)))
        return self._batch(parts, b.agent_value)

    def _expert_batch(self, i: int) -> Batch | None:
        demo = self.experts.get(i)
        if demo is None:
            return None
        b = self.bundles[i]
        tr = demo.trajectory
        batch = self._batch([(tr, trajectory_returns(tr, b.expert_value, self.cfg.gamma))], b.expert_value)
        # ratios are taken against the policy as it stands before this epoch's update
        logits, _ = b.policy.logits(batch.obs)
        lp = masked_log_softmax(logits, batch.masks)
        batch.old_log_probs = lp[np.arange(len(batch)), batch.actions]
        return batch

    @staticmethod
    def _batch(parts, value_net) -> Batch | None:
        if not parts:
            return None
        obs = np.concatenate([tr.obs_array() for tr, _ in parts])
        masks = np.concatenate([tr.mask_array() for tr, _ in parts])
        actions = np.concatenate([np.asarray(tr.actions, dtype=int) for tr, _ in parts])
        old = np.concatenate([np.asarray(tr.log_probs, dtype=np.float64) for tr, _ in parts])
        returns = np.concatenate([r for _, r in parts])
        values, _ = value_net.predict(obs)
        return Batch(obs, masks, actions, old, advantages(returns, values), returns)

    def update_agent(self, i: int, epoch: int, agent: Batch | None, expert: Batch | None, alpha: float) -> None:
        cfg = self.cfg
        b = self.bundles[i]
        if agent is None:
            return
        rng = np.random.default_rng([cfg.seed, epoch, 2, i])
        n = len(agent)
        for _ in range(cfg.update_passes):
            perm = rng.permutation(n)
            for start in range(0, n, cfg.minibatch_size):
                mb = agent.take(perm[start:start + cfg.minibatch_size])
                _, g = value_loss_and_grad(b.agent_value, mb.obs, mb.returns)
                optimizer_step(b.agent_value_opt, b.agent_value.params, g)
                if cfg.mode == "ippo":
                    _, g = ippo_objective_and_grad(b.policy, mb, cfg.entropy_coef, cfg.clip_eps)
                else:
                    if expert is not None:
                        _, g = value_loss_and_grad(b.expert_value, expert.obs, expert.returns)
                        optimizer_step(b.expert_value_opt, b.expert_value.params, g)
                    _, g = hybrid_objective_and_grad(b.policy, mb, expert, alpha, cfg.entropy_coef, cfg.clip_eps)
                optimizer_step(b.policy_opt, b.policy.params, g)

    def alpha_for(self, i: int, epoch: int, agent_record: EpisodeRecord) -> tuple[float, float | None]:
        if self.cfg.force_alpha is not None:
            return self.cfg.force_alpha, None
        demo = self.experts.get(i)
        agent_tr = agent_record.trajectories[i]
        if demo is None or not agent_tr.path or not demo.trajectory.path:
            return 1.0, None
        scale = self.dtw_scale
        raw, steps = dtw(path_points(agent_tr, self.network) / scale,
                         path_points(demo.trajectory, self.network) / scale)
        d = raw / steps
        log.debug("epoch %d agent %d: raw dtw %.6g over %d steps", epoch, i, raw, steps)
        # guard against exp underflow for very long or very different routes
        return max(hybrid_alpha(epoch, self.cfg.epochs, d), ALPHA_FLOOR), d

    # -- main loop

    def run(self) -> TrainResult:
        cfg = self.cfg
        out = self.out_dir
        metrics_fh = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            metrics_fh = open(out / "metrics.csv", "w", newline="")
            self._metrics_writer = MetricsWriter(metrics_fh)
            if cfg.log_trajectories:
                self._traj_fh = open(out / "trajectories.jsonl", "w")
        t0 = time.perf_counter()
        try:
            for epoch in range(1, cfg.epochs + 1):
                records = self.collect(epoch)
                rnd = None
                if cfg.mode == "reled" and cfg.demonstrations and self.oracle is not None and epoch % cfg.demo_interval == 0:
                    self.demo_epochs.append(epoch)
                    rnd = self.demonstration_round(epoch, records[0])
                alphas, dtws = {}, {}
                batches = {}
                for i in range(self.n):
                    alphas[i], dtws[i] = self.alpha_for(i, epoch, records[0]) if cfg.mode == "reled" else (1.0, None)
                    batches[i] = (self._agent_batch(i, records),
                                  self._expert_batch(i) if cfg.mode == "reled" else None)
                for i in range(self.n):
                    self.update_agent(i, epoch, *batches[i], alphas[i])
                wall = time.perf_counter() - t0 if cfg.record_wall_clock else None
                self._emit(epoch, records, rnd, alphas, dtws, wall)
                if self._traj_fh is not None:
                    self._log_trajectories(epoch, records, rnd)
                if out is not None and cfg.checkpoint_interval and epoch % cfg.checkpoint_interval == 0:
                    self.checkpoint(out / "checkpoints" / f"epoch_{epoch:05d}.npz", epoch)
            if out is not None:
                self.checkpoint(out / "checkpoints" / "final.npz", cfg.epochs)
        finally:
            if metrics_fh is not None:
                metrics_fh.close()
            if self._traj_fh is not None:
                self._traj_fh.close()
        return TrainResult(self.bundles, self.metrics, self.transcript, self.demo_epochs)

    def checkpoint(self, path: Path, epoch: int) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.bundles, path, {"epoch": epoch, "seed": self.cfg.seed, "mode": self.cfg.mode})

    def _emit(self, epoch, records, rnd: DemoRound | None, alphas, dtws, wall) -> None:
        rvi: dict[int, int] = {}
        pdi: dict[int, float] = {}
        bound: dict[int, float] = {}
        if rnd is not None:
            for res in rnd.results:
                for p in res.reward_pairs:
                    rvi[p.agent_id] = rvi.get(p.agent_id, 0) + 1
                for d in res.divergence:
                    pdi[d.agent_id] = d.kl_max
                for i in res.rollout.subset:
                    bound[i] = res.bound
        for i in range(self.n):
            trs = [rec.trajectories[i] for rec in records]
            row = {
                "epoch": epoch,
                "agent_id": i,
                "mean_reward": float(np.mean([tr.total_reward for tr in trs])),
                "mean_travel_time": float(np.mean([tr.travel_time for tr in trs])),
                "alpha": float(alphas[i]),
                "dtw": dtws[i],
                "rvi_count": rvi.get(i, 0) if rnd is not None else None,
                "pdi_max": pdi.get(i),
                "bound_value": bound.get(i),
                "wall_clock_s": wall,
            }
            self.metrics.append(row)
            if self._metrics_writer is not None:
                self._metrics_writer.write(row)

    def _log_trajectories(self, epoch, records, rnd) -> None:
        for k, rec in enumerate(records):
            write_trajectory_log(self._traj_fh, rec.trajectories.values(), epoch, k)
        if rnd is not None:
            for res in rnd.results:
                write_trajectory_log(self._traj_fh, res.rollout.trajectories.values(), epoch, -1)


def train(config: TrainerConfig, network: RoadNetwork, scenario: Scenario, oracle=None,
          out_dir: str | Path | None = None) -> TrainResult:
    return Trainer(config, network, scenario, oracle, out_dir).run()
