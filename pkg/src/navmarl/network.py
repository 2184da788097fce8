"""Road network graph: loading, validation and shortest-path queries."""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

FORMAT_VERSION = 1


class NetworkError(ValueError):
    """Raised for malformed or inconsistent network descriptions.

    ``location`` is a JSON-path-like pointer (``edges[3].to``) or a
    ``line:col`` pair for syntax errors.
    """

    def __init__(self, message: str, location: str | None = None):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class UnreachableError(LookupError):
    pass


@dataclass(frozen=True)
class Junction:
    id: int
    x: float
    y: float


@dataclass(frozen=True)
class Edge:
    id: int
    source: int
    target: int
    length: float
    max_speed: float
    lanes: int = 1

    @property
    def free_flow_time(self) -> float:
        return self.length / self.max_speed


@dataclass(frozen=True)
class PathResult:
    junctions: tuple[int, ...]
    edges: tuple[int, ...]
    cost: float


@dataclass
class RoadNetwork:
    junctions: list[Junction]
    edges: list[Edge]
    junction_index: dict[int, Junction] = field(init=False, repr=False)
    edge_index: dict[int, Edge] = field(init=False, repr=False)
    out_edges: dict[int, tuple[Edge, ...]] = field(init=False, repr=False)
    m_out: int = field(init=False)

    def __post_init__(self) -> None:
        self.junction_index = {}
        for i, j in enumerate(self.junctions):
            if j.id in self.junction_index:
                raise NetworkError(f"duplicate junction id {j.id}", f"junctions[{i}].id")
            self.junction_index[j.id] = j
        self.edge_index = {}
        outgoing: dict[int, list[Edge]] = {j.id: [] for j in self.junctions}
        for i, e in enumerate(self.edges):
            loc = f"edges[{i}]"
            if e.id in self.edge_index:
                raise NetworkError(f"duplicate edge id {e.id}", f"{loc}.id")
            for attr, jid in (("from", e.source), ("to", e.target)):
                if jid not in self.junction_index:
                    raise NetworkError(
                        f"edge {e.id} references unknown junction {jid}", f"{loc}.{attr}"
                    )
            if not (e.length >= 0 and math.isfinite(e.length)):
                raise NetworkError(f"edge {e.id} has invalid length {e.length}", f"{loc}.length")
            if not (e.max_speed > 0 and math.isfinite(e.max_speed)):
                raise NetworkError(
                    f"edge {e.id} has invalid max_speed {e.max_speed}", f"{loc}.max_speed"
                )
            if e.lanes < 1:
                raise NetworkError(f"edge {e.id} has invalid lane count {e.lanes}", f"{loc}.lanes")
            self.edge_index[e.id] = e
            outgoing[e.source].append(e)
        self.out_edges = {jid: tuple(sorted(es, key=lambda e: e.id)) for jid, es in outgoing.items()}
        if not self.edges:
            raise NetworkError("network has no edges", "edges")
        self.m_out = max(len(es) for es in self.out_edges.values())

    @property
    def n_junctions(self) -> int:
        return len(self.junctions)

    def sinks(self) -> list[int]:
        """Junctions with incoming but no outgoing edges."""
        has_in = {e.target for e in self.edges}
        return sorted(j for j in has_in if not self.out_edges[j])

    def coord(self, junction: int) -> tuple[float, float]:
        j = self.junction_index[junction]
        return (j.x, j.y)

    def euclidean(self, a: int, b: int) -> float:
        ja, jb = self.junction_index[a], self.junction_index[b]
        return math.hypot(ja.x - jb.x, ja.y - jb.y)

    def nearest_junction(self, x: float, y: float) -> int:
        return min(self.junctions, key=lambda j: (math.hypot(j.x - x, j.y - y), j.id)).id

    def slot_of(self, junction: int, edge_id: int) -> int:
        for slot, e in enumerate(self.out_edges[junction]):
            if e.id == edge_id:
                return slot
        raise KeyError(f"edge {edge_id} does not leave junction {junction}")

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "junctions": [{"id": j.id, "x": j.x, "y": j.y} for j in self.junctions],
            "edges": [
                {
                    "id": e.id,
                    "from": e.source,
                    "to": e.target,
                    "length": e.length,
                    "max_speed": e.max_speed,
                    "lanes": e.lanes,
                }
                for e in self.edges
            ],
        }


def _require(obj: Mapping, key: str, loc: str, kind: type | tuple[type, ...]):
    if key not in obj:
        raise NetworkError(f"missing field '{key}'", loc)
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, kind):
        raise NetworkError(f"field '{key}' has wrong type {type(value).__name__}", f"{loc}.{key}")
    return value


def network_from_dict(data: Mapping) -> RoadNetwork:
    if not isinstance(data, Mapping):
        raise NetworkError("network description must be an object")
    version = data.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise NetworkError(f"unsupported format_version {version!r}", "format_version")
    junctions_raw = data.get("junctions")
    edges_raw = data.get("edges")
    if not isinstance(junctions_raw, list):
        raise NetworkError("'junctions' must be a list", "junctions")
    if not isinstance(edges_raw, list):
        raise NetworkError("'edges' must be a list", "edges")
    number = (int, float)
    junctions = []
    for i, j in enumerate(junctions_raw):
        loc = f"junctions[{i}]"
        if not isinstance(j, Mapping):
            raise NetworkError("junction entry must be an object", loc)
        junctions.append(
            Junction(
                int(_require(j, "id", loc, int)),
                float(_require(j, "x", loc, number)),
                float(_require(j, "y", loc, number)),
            )
        )
    edges = []
    for i, e in enumerate(edges_raw):
        loc = f"edges[{i}]"
        if not isinstance(e, Mapping):
            raise NetworkError("edge entry must be an object", loc)
        lanes = e.get("lanes", 1)
        if isinstance(lanes, bool) or not isinstance(lanes, int):
            raise NetworkError("field 'lanes' must be an integer", f"{loc}.lanes")
        edges.append(
            Edge(
                int(_require(e, "id", loc, int)),
                int(_require(e, "from", loc, int)),
                int(_require(e, "to", loc, int)),
                float(_require(e, "length", loc, number)),
                float(_require(e, "max_speed", loc, number)),
                lanes,
            )
        )
    return RoadNetwork(junctions, edges)


def load_network(source: str | Path | Mapping) -> RoadNetwork:
    """Load a network from a JSON file path, a JSON string or a dict."""
    if isinstance(source, Mapping):
        return network_from_dict(source)
    text = None
    if isinstance(source, Path) or not str(source).lstrip().startswith("{"):
        path = Path(source)
        text = path.read_text()
        origin = str(path)
    else:
        text = str(source)
        origin = "<string>"
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkError(f"invalid JSON in {origin}: {exc.msg}", f"{exc.lineno}:{exc.colno}") from exc
    return network_from_dict(data)


def save_network(network: RoadNetwork, path: str | Path) -> None:
    Path(path).write_text(json.dumps(network.to_dict(), indent=1) + "\n")


def grid_network(rows: int = 5, cols: int = 5, spacing: float = 100.0,
                 max_speed: float = 10.0, lanes: int = 1) -> RoadNetwork:
    """Bidirectional rectangular grid; junction id = row * cols + col."""
    junctions = [
        Junction(r * cols + c, c * spacing, r * spacing) for r in range(rows) for c in range(cols)
    ]
    pairs = []
    for r in range(rows):
        for c in range(cols):
            a = r * cols + c
            if c + 1 < cols:
                pairs += [(a, a + 1), (a + 1, a)]
            if r + 1 < rows:
                pairs += [(a, a + cols), (a + cols, a)]
    edges = [Edge(i, s, t, spacing, max_speed, lanes) for i, (s, t) in enumerate(pairs)]
    return RoadNetwork(junctions, edges)


def shortest_path_query(
    network: RoadNetwork,
    source: int,
    target: int,
    metric: str = "distance",
    edge_time: Callable[[Edge], float] | None = None,
) -> PathResult:
    """Dijkstra over directed edges.

    ``metric="time"`` weighs edges with ``edge_time`` (default: free-flow
    time). Ties are broken towards lower junction ids so results are stable.
    """
    for jid in (source, target):
        if jid not in network.junction_index:
            raise KeyError(f"unknown junction {jid}")
    if metric == "distance":
        weight = lambda e: e.length  # noqa: E731
    elif metric == "time":
        weight = edge_time or (lambda e: e.free_flow_time)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    if source == target:
        return PathResult((), (), 0.0)

    best = {source: 0.0}
    prev: dict[int, Edge] = {}
    heap = [(0.0, source)]
    done = set()
    while heap:
        cost, node = heapq.heappop(heap)
        if node in done:
            continue
        done.add(node)
        if node == target:
            break
        for e in network.out_edges[node]:
            c = cost + weight(e)
            if e.target not in best or c < best[e.target]:
                best[e.target] = c
                prev[e.target] = e
                heapq.heappush(heap, (c, e.target))
    if target not in done:
        raise UnreachableError(f"junction {target} is unreachable from {source}")

    edges: list[Edge] = []
    node = target
    while node != source:
        e = prev[node]
        edges.append(e)
        node = e.source
    edges.reverse()
    junctions = (source,) + tuple(e.target for e in edges)
    return PathResult(junctions, tuple(e.id for e in edges), best[target])


def reachable(network: RoadNetwork, source: int) -> set[int]:
    seen = {source}
    stack = [source]
    while stack:
        node = stack.pop()
        for e in network.out_edges[node]:
            if e.target not in seen:
                seen.add(e.target)
                stack.append(e.target)
    return seen

