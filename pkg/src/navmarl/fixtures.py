"""Bundled example networks and scenarios."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from .network import RoadNetwork, load_network
from .sim import Scenario, load_scenario


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("navmarl") / "data" / name))


def grid5x5() -> RoadNetwork:
    return load_network(fixture_path("grid5x5.json"))


def grid_scenario() -> Scenario:
    return load_scenario(fixture_path("grid_scenario.json"))


def two_node() -> RoadNetwork:
    return load_network(fixture_path("two_node.json"))


def two_node_scenario() -> Scenario:
    return load_scenario(fixture_path("two_node_scenario.json"))
