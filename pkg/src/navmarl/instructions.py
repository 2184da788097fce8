"""The navigation command set an instruction oracle may emit."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class VerbSpec:
    arg_kinds: tuple[str, ...]  # "node" (integer id) or "coord" (number)
    moves: bool
    returns: str


VERBS: dict[str, VerbSpec] = {
    "move_to_by_shortest_path": VerbSpec(("node",), True, "bool"),
    "move_to_by_shortest_time": VerbSpec(("node",), True, "bool"),
    "get_origin": VerbSpec((), False, "int"),
    "get_destination": VerbSpec((), False, "int"),
    "get_shortest_dist": VerbSpec(("node",), False, "float"),
    "get_shortest_time": VerbSpec(("node",), False, "float"),
    "get_nearest_node": VerbSpec(("coord", "coord"), False, "int"),
    "get_node_coord": VerbSpec(("node",), False, "tuple[float, float]"),
}

INTERFACE_DOCS = {
    "move_to_by_shortest_path": "drive to node_id along the route with the least total road length",
    "move_to_by_shortest_time": "drive to node_id along the route with the least free-flow driving time",
    "get_origin": "this agent's start node",
    "get_destination": "this agent's goal node",
    "get_shortest_dist": "road length in meters of the shortest route from the current node to target_node_id",
    "get_shortest_time": "free-flow driving time in seconds of the fastest route from the current node to target_node_id",
    "get_nearest_node": "id of the node nearest to the point (x, y)",
    "get_node_coord": "(x, y) position of node_id",
}

_ARG_NAMES = {
    "move_to_by_shortest_path": ("node_id",),
    "move_to_by_shortest_time": ("node_id",),
    "get_shortest_dist": ("target_node_id",),
    "get_shortest_time": ("target_node_id",),
    "get_nearest_node": ("x", "y"),
    "get_node_coord": ("node_id",),
}


def signature(verb: str) -> str:
    spec = VERBS[verb]
    return f"{verb}({', '.join(_ARG_NAMES.get(verb, ()))}) -> {spec.returns}"


def _fmt(arg: int | float) -> str:
    return str(arg) if isinstance(arg, int) else repr(float(arg))


@dataclass(frozen=True)
class Instruction:
    verb: str
    args: tuple[int | float, ...] = ()

    def __post_init__(self):
        if self.verb not in VERBS:
            raise ValueError(f"unknown verb {self.verb!r}")
        if len(self.args) != len(VERBS[self.verb].arg_kinds):
            raise ValueError(f"{self.verb} takes {len(VERBS[self.verb].arg_kinds)} arguments")

    @property
    def moves(self) -> bool:
        return VERBS[self.verb].moves

    def __str__(self) -> str:
        return f"{self.verb}({', '.join(_fmt(a) for a in self.args)})"
