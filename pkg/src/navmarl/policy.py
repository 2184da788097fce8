"""Policy and value networks in plain numpy with hand-written backprop.

Both networks are ``input -> 128 -> 128 -> output`` tanh MLPs in float64.
The policy head is a masked categorical: masked logits are replaced by
``-inf`` before a max-shifted log-softmax, so masked probabilities are
exactly zero.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ContractViolation, NumericError

HIDDEN = 128
LEARNING_RATE = 3e-4
CHECKPOINT_VERSION = 1
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


def orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float) -> np.ndarray:
    a = rng.standard_normal(shape if shape[0] >= shape[1] else shape[::-1])
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if shape[0] < shape[1]:
        q = q.T
    return gain * q[: shape[0], : shape[1]]


def encode_observations(vectors: np.ndarray, n_junctions: int) -> np.ndarray:
    """Scale junction ids into [0, 1]; scores and the -1 sentinel pass through."""
    x = np.array(vectors, dtype=np.float64, copy=True, ndmin=2)
    id_cols = [0, 1] + list(range(3, x.shape[1], 2))
    ids = x[:, id_cols]
    x[:, id_cols] = np.where(ids < 0, ids, ids / n_junctions)
    return x


class MLP:
    """Two tanh hidden layers and a linear output."""

    def __init__(self, n_in: int, n_out: int, hidden: int = HIDDEN,
                 rng: np.random.Generator | None = None, out_gain: float = 1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out, self.hidden = n_in, n_out, hidden
        self.params = {
            "W1": orthogonal(rng, (n_in, hidden), math.sqrt(2)),
            "b1": np.zeros(hidden),
            "W2": orthogonal(rng, (hidden, hidden), math.sqrt(2)),
            "b2": np.zeros(hidden),
            "W3": orthogonal(rng, (hidden, n_out), out_gain),
            "b3": np.zeros(n_out),
        }

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        p = self.params
        h1 = np.tanh(x @ p["W1"] + p["b1"])
        h2 = np.tanh(h1 @ p["W2"] + p["b2"])
        return h2 @ p["W3"] + p["b3"], (x, h1, h2)

    def backward(self, cache: tuple, dout: np.ndarray) -> dict[str, np.ndarray]:
        x, h1, h2 = cache
        p = self.params
        g = {"W3": h2.T @ dout, "b3": dout.sum(axis=0)}
        dz2 = (dout @ p["W3"].T) * (1.0 - h2 * h2)
        g["W2"] = h1.T @ dz2
        g["b2"] = dz2.sum(axis=0)
        dz1 = (dz2 @ p["W2"].T) * (1.0 - h1 * h1)
        g["W1"] = x.T @ dz1
        g["b1"] = dz1.sum(axis=0)
        return g

    def copy(self) -> "MLP":
        other = object.__new__(type(self))
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other


class PolicyNet(MLP):
    def __init__(self, m_out: int, n_junctions: int, hidden: int = HIDDEN,
                 rng: np.random.Generator | None = None):
        super().__init__(2 * m_out + 2, m_out, hidden, rng, out_gain=0.01)
        self.m_out = m_out
        self.n_junctions = n_junctions

    def logits(self, vectors: np.ndarray) -> tuple[np.ndarray, tuple]:
        return self.forward(encode_observations(vectors, self.n_junctions))


class ValueNet(MLP):
    def __init__(self, m_out: int, n_junctions: int, hidden: int = HIDDEN,
                 rng: np.random.Generator | None = None):
        super().__init__(2 * m_out + 2, 1, hidden, rng, out_gain=1.0)
        self.m_out = m_out
        self.n_junctions = n_junctions

    def predict(self, vectors: np.ndarray) -> tuple[np.ndarray, tuple]:
        out, cache = self.forward(encode_observations(vectors, self.n_junctions))
        return out[:, 0], cache


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    logits = np.atleast_2d(logits)
    mask = np.atleast_2d(mask)
    if not mask.any(axis=1).all():
        bad = int(np.flatnonzero(~mask.any(axis=1))[0])
        raise ContractViolation(f"observation {bad} has no available action")
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


@dataclass
class Categorical:
    """Masked categorical distribution(s); rows are independent observations."""

    log_probs: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def entropy(self) -> np.ndarray:
        p = self.probs
        plogp = np.where(p > 0, p * np.where(p > 0, self.log_probs, 0.0), 0.0)
        return -plogp.sum(axis=1)

    def log_prob(self, actions: np.ndarray) -> np.ndarray:
        actions = np.asarray(actions, dtype=int)
        return self.log_probs[np.arange(len(actions)), actions]


def forward_policy(net: PolicyNet, vectors: np.ndarray, mask: np.ndarray) -> Categorical:
    logits, _ = net.logits(vectors)
    return Categorical(masked_log_softmax(logits, mask))


def sample_action(dist: Categorical, rng: np.random.Generator, row: int = 0) -> tuple[int, float]:
    """Inverse-CDF draw from one row; masked entries can never be chosen."""
    p = dist.probs[row]
    u = rng.random()
    cdf = np.cumsum(p)
    a = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    a = min(a, len(p) - 1)
    while p[a] == 0.0:  # only reachable through float round-off at the top of the cdf
        a -= 1
    return a, float(dist.log_probs[row, a])


def greedy_action(dist: Categorical, row: int = 0) -> tuple[int, float]:
    a = int(np.argmax(dist.log_probs[row]))
    return a, float(dist.log_probs[row, a])


# -- gradients of the scalar objectives the trainer uses ----------------------


def log_prob_grad(log_probs: np.ndarray, actions: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """d/dlogits of sum_n weights[n] * log pi(a_n | o_n)."""
    p = np.exp(log_probs)
    g = -p * weights[:, None]
    g[np.arange(len(actions)), actions] += weights
    return g


def entropy_grad(log_probs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """d/dlogits of sum_n weights[n] * H(pi(.|o_n))."""
    p = np.exp(log_probs)
    safe = np.where(p > 0, log_probs, 0.0)
    h = -(p * safe).sum(axis=1, keepdims=True)
    return -p * (safe + h) * weights[:, None]


def value_loss_and_grad(net: ValueNet, vectors: np.ndarray, returns: np.ndarray):
    """Mean squared error and its parameter gradients."""
    v, cache = net.predict(vectors)
    diff = v - returns
    check_finite(diff * diff)
    loss = float(np.mean(diff * diff))
    dout = (2.0 * diff / len(diff))[:, None]
    return loss, net.backward(cache, dout)


def check_finite(per_sample: np.ndarray) -> None:
    bad = np.flatnonzero(~np.isfinite(per_sample))
    if len(bad):
        raise NumericError("non-finite loss", int(bad[0]))


# -- optimizer ---------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(state: OptimizerState, params: dict[str, np.ndarray],
                   grads: dict[str, np.ndarray]) -> None:
    """Bias-corrected Adam update of ``params`` in place (descends ``grads``)."""
    for k, g in grads.items():
        if k not in params or params[k].shape != g.shape:
            got = None if k not in params else params[k].shape
            raise ContractViolation(f"gradient {k} shape {g.shape} does not match parameter {got}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for k, g in grads.items():
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        v = state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[k] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- bundles and checkpoints -------------------------------------------------


@dataclass
class PolicyBundle:
    policy: PolicyNet
    agent_value: ValueNet
    expert_value: ValueNet
    policy_opt: OptimizerState = field(default_factory=OptimizerState)
    agent_value_opt: OptimizerState = field(default_factory=OptimizerState)
    expert_value_opt: OptimizerState = field(default_factory=OptimizerState)

    @classmethod
    def create(cls, m_out: int, n_junctions: int, rng: np.random.Generator,
               hidden: int = HIDDEN, lr: float = LEARNING_RATE) -> "PolicyBundle":
        return cls(
            PolicyNet(m_out, n_junctions, hidden, rng),
            ValueNet(m_out, n_junctions, hidden, rng),
            ValueNet(m_out, n_junctions, hidden, rng),
            OptimizerState(lr=lr),
            OptimizerState(lr=lr),
            OptimizerState(lr=lr),
        )

    def nets(self) -> dict[str, MLP]:
        return {"policy": self.policy, "agent_value": self.agent_value,
                "expert_value": self.expert_value}

    def optimizers(self) -> dict[str, OptimizerState]:
        return {"policy": self.policy_opt, "agent_value": self.agent_value_opt,
                "expert_value": self.expert_value_opt}


class CheckpointError(ValueError):
    pass


def save_checkpoint(bundles: Iterable[PolicyBundle], path: str | Path,
                    extra: dict | None = None) -> None:
    bundles = list(bundles)
    first = bundles[0].policy
    header = {
        "format_version": CHECKPOINT_VERSION,
        "n_agents": len(bundles),
        "m_out": first.m_out,
        "n_junctions": first.n_junctions,
        "hidden": first.hidden,
        "optimizer_steps": [
            {name: opt.step for name, opt in b.optimizers().items()} for b in bundles
        ],
        "optimizer_hparams": [
            {name: [opt.lr, opt.beta1, opt.beta2, opt.eps] for name, opt in b.optimizers().items()}
            for b in bundles
        ],
        "extra": extra or {},
    }
    arrays = {}
    for i, b in enumerate(bundles):
        for name, net in b.nets().items():
            for k, v in net.params.items():
                arrays[f"agent{i}/{name}/{k}"] = v
        for name, opt in b.optimizers().items():
            for k in opt.m:
                arrays[f"agent{i}/{name}_opt/m/{k}"] = opt.m[k]
                arrays[f"agent{i}/{name}_opt/v/{k}"] = opt.v[k]
    header["shapes"] = {k: list(v.shape) for k, v in arrays.items()}
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path, m_out: int | None = None,
                    n_junctions: int | None = None) -> tuple[list[PolicyBundle], dict]:
    with np.load(path) as data:
        if "__header__" not in data:
            raise CheckpointError(f"{path}: missing header")
        header = json.loads(data["__header__"].tobytes().decode())
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported format_version {header.get('format_version')}")
        if m_out is not None and header["m_out"] != m_out:
            raise CheckpointError(
                f"{path}: checkpoint built for m_out={header['m_out']}, network has m_out={m_out}"
            )
        if n_junctions is not None and header["n_junctions"] != n_junctions:
            raise CheckpointError(
                f"{path}: checkpoint built for {header['n_junctions']} junctions, "
                f"network has {n_junctions}"
            )
        bundles = []
        for i in range(header["n_agents"]):
            b = PolicyBundle.create(header["m_out"], header["n_junctions"],
                                    np.random.default_rng(0), header["hidden"])
            for name, net in b.nets().items():
                for k in PARAM_NAMES:
                    net.params[k] = data[f"agent{i}/{name}/{k}"].copy()
            for name, opt in b.optimizers().items():
                opt.step = header["optimizer_steps"][i][name]
                opt.lr, opt.beta1, opt.beta2, opt.eps = header["optimizer_hparams"][i][name]
                for k in PARAM_NAMES:
                    key = f"agent{i}/{name}_opt/m/{k}"
                    if key in data:
                        opt.m[k] = data[key].copy()
                        opt.v[k] = data[f"agent{i}/{name}_opt/v/{k}"].copy()
            bundles.append(b)
    return bundles, header.get("extra", {})
