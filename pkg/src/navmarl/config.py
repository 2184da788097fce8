"""TOML run configuration shared by the command-line entry points."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .fixtures import fixture_path
from .oracle.llm import TOKEN_ENV
from .trainer import ConfigError, TrainerConfig

BUILTIN = "builtin:"
ORACLE_KINDS = ("scripted", "http")


@dataclass
class OracleConfig:
    kind: str = "scripted"
    base_url: str = ""
    model: str = ""
    timeout: float = 60.0
    retries: int = 2
    temperature: float = 0.0
    backoff: float = 1.0
    token_env: str = TOKEN_ENV
    token_budget: int = 10_000


@dataclass
class RunConfig:
    network: Path
    scenario: Path
    out_dir: Path
    trainer: TrainerConfig
    oracle: OracleConfig = field(default_factory=OracleConfig)
    mode: str = "reled"
    seeds: list[int] = field(default_factory=lambda: [0])
    eval_episodes: int = 20
    checkpoint: Path | None = None
    refinement_counts: list[int] = field(default_factory=lambda: [0, 1, 3])
    prompts: int = 10
    source: Path | None = None

    def digest(self) -> str:
        """SHA-256 over everything that affects results (seeds and output paths excluded)."""
        payload = {
            "network": _file_digest(self.network),
            "scenario": _file_digest(self.scenario),
            "trainer": {k: v for k, v in asdict(self.trainer).items() if k != "seed"},
            "oracle": {k: v for k, v in asdict(self.oracle).items() if k != "token_env"},
            "mode": self.mode,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def trainer_for(self, seed: int) -> TrainerConfig:
        return replace(self.trainer, seed=seed, mode=self.mode)


def _file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def resolve_path(value: str, base: Path) -> Path:
    if value.startswith(BUILTIN):
        return fixture_path(value[len(BUILTIN):])
    p = Path(value).expanduser()
    return p if p.is_absolute() else (base / p)


def _take(section: Mapping[str, Any], allowed: set[str], prefix: str) -> dict:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError([(f"{prefix}.{k}", "unknown key") for k in unknown])
    return dict(section)


def _typed(cls, data: dict, prefix: str) -> dict:
    """Check value types against each field's default (None defaults accept numbers)."""
    for f in fields(cls):
        if f.name not in data:
            continue
        v, default = data[f.name], f.default
        key = f"{prefix}.{f.name}"
        if isinstance(default, bool):
            ok, what = isinstance(v, bool), "true or false"
        elif isinstance(default, int):
            ok, what = isinstance(v, int) and not isinstance(v, bool), "an integer"
        elif isinstance(default, float) or default is None:
            ok, what = isinstance(v, (int, float)) and not isinstance(v, bool), "a number"
        elif isinstance(default, str):
            ok, what = isinstance(v, str), "a string"
        else:
            ok, what = True, ""
        if not ok:
            raise ConfigError([(key, f"must be {what}")])
    return {k: (float(v) if isinstance(v, int) and isinstance(_default(cls, k), float) else v)
            for k, v in data.items()}


def _default(cls, name: str):
    return next(f.default for f in fields(cls) if f.name == name)


def config_from_dict(data: Mapping[str, Any], base: Path = Path("."), check_paths: bool = True) -> RunConfig:
    data = _take(data, {"paths", "run", "trainer", "oracle", "eval", "demo_quality"}, "config")
    paths = _take(data.get("paths", {}), {"network", "scenario", "out"}, "paths")
    run = _take(data.get("run", {}), {"mode", "seeds"}, "run")
    trainer_keys = {f.name for f in fields(TrainerConfig)} - {"seed", "mode"}
    trainer = _take(data.get("trainer", {}), trainer_keys, "trainer")
    oracle = _take(data.get("oracle", {}), {f.name for f in fields(OracleConfig)}, "oracle")
    ev = _take(data.get("eval", {}), {"episodes", "checkpoint"}, "eval")
    dq = _take(data.get("demo_quality", {}), {"refinement_counts", "prompts"}, "demo_quality")

    problems = []
    for key in ("network", "scenario"):
        if key not in paths:
            problems.append((f"paths.{key}", "required"))
    if problems:
        raise ConfigError(problems)
    network = resolve_path(str(paths["network"]), base)
    scenario = resolve_path(str(paths["scenario"]), base)
    out_dir = resolve_path(str(paths.get("out", "runs")), base)
    if check_paths:
        for key, p in (("paths.network", network), ("paths.scenario", scenario)):
            if not p.is_file():
                problems.append((key, f"file not found: {p}"))

    mode = run.get("mode", "reled")
    if mode not in ("reled", "ippo"):
        problems.append(("run.mode", "must be 'reled' or 'ippo'"))
    seeds = run.get("seeds", [0])
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        seeds = [seeds]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        problems.append(("run.seeds", "must be a non-empty list of integers"))

    oc = OracleConfig(**_typed(OracleConfig, oracle, "oracle"))
    if oc.kind not in ORACLE_KINDS:
        problems.append(("oracle.kind", f"must be one of {ORACLE_KINDS}"))
    if oc.kind == "http" and (not oc.base_url or not oc.model):
        problems.append(("oracle.base_url" if not oc.base_url else "oracle.model", "required for the http oracle"))
    if not oc.timeout > 0:
        problems.append(("oracle.timeout", "must be positive"))

    episodes = ev.get("episodes", 20)
    if not isinstance(episodes, int) or episodes < 1:
        problems.append(("eval.episodes", "must be an integer >= 1"))
    counts = dq.get("refinement_counts", [0, 1, 3])
    if not isinstance(counts, list) or not counts or not all(isinstance(c, int) and c >= 0 for c in counts):
        problems.append(("demo_quality.refinement_counts", "must be a non-empty list of integers >= 0"))
    prompts = dq.get("prompts", 10)
    if not isinstance(prompts, int) or prompts < 1:
        problems.append(("demo_quality.prompts", "must be an integer >= 1"))
    if problems:
        raise ConfigError(problems)

    trainer = _typed(TrainerConfig, trainer, "trainer")
    try:
        tc = TrainerConfig(**trainer, mode=mode)
    except ConfigError as exc:
        raise ConfigError([(f"trainer.{k}", msg) for k, msg in exc.problems]) from None
    checkpoint = resolve_path(str(ev["checkpoint"]), base) if "checkpoint" in ev else None
    return RunConfig(network, scenario, out_dir, tc, oc, mode, list(seeds), episodes, checkpoint,
                     sorted(set(counts)), prompts)


def load_config(path: str | Path, check_paths: bool = True) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([("config", f"{path}: {exc}")]) from exc
    cfg = config_from_dict(data, path.parent, check_paths)
    cfg.source = path
    return cfg
