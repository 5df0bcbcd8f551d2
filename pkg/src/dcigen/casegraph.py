"""Spawn-point graphs, A* routing and camera poses along the resulting trajectories."""

import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .scene import Pose


class GraphError(ValueError):
    pass


class Unreachable(GraphError):
    """No path connects the requested endpoints."""


class CaseGraph:
    """Undirected spawn-point graph.

    Edge weights default to the Euclidean distance between endpoints and may
    be overridden, but never below it, so straight-line distance stays an
    admissible and consistent A* heuristic.
    """

    def __init__(self, nodes, edges):
        self.nodes = {}
        for node_id, position in (nodes.items() if isinstance(nodes, dict) else nodes):
            if node_id in self.nodes:
                raise GraphError(f"duplicate node id {node_id!r}")
            pos = np.asarray(position, dtype=np.float64)
            if pos.shape != (3,):
                raise GraphError(f"node {node_id!r} needs an (x, y, z) position")
            pos.setflags(write=False)
            self.nodes[node_id] = pos
        self.adjacency = {node_id: {} for node_id in self.nodes}
        for edge in edges:
            a, b = edge[0], edge[1]
            weight = edge[2] if len(edge) > 2 else None
            if a not in self.nodes or b not in self.nodes:
                raise GraphError(f"edge ({a!r}, {b!r}) references a missing node")
            if a == b:
                raise GraphError(f"self-loop on node {a!r}")
            if b in self.adjacency[a]:
                raise GraphError(f"duplicate edge ({a!r}, {b!r})")
            length = float(np.linalg.norm(self.nodes[a] - self.nodes[b]))
            weight = length if weight is None else float(weight)
            if not weight > 0:
                raise GraphError(f"edge ({a!r}, {b!r}) must have positive weight")
            if weight < length * (1.0 - 1e-12):
                raise GraphError(f"edge ({a!r}, {b!r}) weight {weight} is below the "
                                 f"straight-line length {length}")
            self.adjacency[a][b] = weight
            self.adjacency[b][a] = weight

    def __contains__(self, node_id):
        return node_id in self.nodes

    def neighbors(self, node_id):
        return sorted(self.adjacency[node_id].items())

    def edges(self):
        for a in sorted(self.adjacency):
            for b, w in sorted(self.adjacency[a].items()):
                if a < b:
                    yield a, b, w

    def heuristic(self, node_id, goal):
        return float(np.linalg.norm(self.nodes[node_id] - self.nodes[goal]))

    @classmethod
    def from_dict(cls, data):
        try:
            nodes = [(n["id"], (n["x"], n["y"], n.get("z", 0.0))) for n in data["nodes"]]
            edges = [(e["a"], e["b"], e["weight"]) if "weight" in e else (e["a"], e["b"])
                     for e in data["edges"]]
        except KeyError as exc:
            raise GraphError(f"graph file is missing field {exc.args[0]!r}") from None
        return cls(nodes, edges)

    def to_dict(self):
        return {
            "nodes": [{"id": k, "x": float(p[0]), "y": float(p[1]), "z": float(p[2])}
                      for k, p in self.nodes.items()],
            "edges": [{"a": a, "b": b, "weight": w} for a, b, w in self.edges()],
        }


def load_graph(path):
    with open(path, encoding="utf-8") as fh:
        return CaseGraph.from_dict(json.load(fh))


@dataclass(frozen=True)
class Trajectory:
    nodes: tuple
    cost: float
    positions: np.ndarray = field(repr=False)
    expanded: tuple = field(default=(), repr=False)

    @property
    def length(self):
        return float(np.linalg.norm(np.diff(self.positions, axis=0), axis=1).sum())


def shortest_path(graph, start, end):
    """A* search with straight-line heuristic; stops when ``end`` is popped.

    Ties in ``f`` are broken by the smaller node id. Raises ``Unreachable``
    when ``end`` cannot be reached from ``start``.
    """
    for node_id, role in ((start, "start"), (end, "end")):
        if node_id not in graph:
            raise GraphError(f"{role} node {node_id!r} does not exist")
    g = {start: 0.0}
    parent = {start: None}
    closed = set()
    expanded = []
    heap = [(graph.heuristic(start, end), start)]
    while heap:
        f, node = heapq.heappop(heap)
        if node in closed:
            continue
        closed.add(node)
        expanded.append(node)
        if node == end:
            break
        for child, weight in graph.neighbors(node):
            if child in closed:
                continue
            candidate = g[node] + weight
            if candidate < g.get(child, math.inf):
                g[child] = candidate
                parent[child] = node
                heapq.heappush(heap, (candidate + graph.heuristic(child, end), child))
    else:
        raise Unreachable(f"no path from {start!r} to {end!r}")

    path = [end]
    while parent[path[-1]] is not None:
        path.append(parent[path[-1]])
    path.reverse()
    cost = 0.0
    for a, b in zip(path, path[1:]):
        cost += graph.adjacency[a][b]
    positions = np.array([graph.nodes[n] for n in path])
    return Trajectory(tuple(path), cost, positions, tuple(expanded))


class Sample(NamedTuple):
    position: np.ndarray
    heading: np.ndarray
    arc: float


def sample_trajectory(trajectory, step, default_heading=(1.0, 0.0)):
    """Positions every ``step`` meters of arc length, plus the final endpoint.

    A sample that lands exactly on a corner takes the heading of the outgoing
    segment; the final endpoint keeps the heading of the last segment.
    """
    if not step > 0:
        raise ValueError(f"step must be positive, got {step!r}")
    points = np.asarray(trajectory.positions, dtype=np.float64)
    if len(points) == 0:
        raise ValueError("trajectory has no nodes")
    seg_vec = np.diff(points, axis=0)
    seg_len = np.linalg.norm(seg_vec, axis=1)
    keep = seg_len > 0
    seg_vec, seg_len = seg_vec[keep], seg_len[keep]
    starts = points[:-1][keep]
    default = np.asarray(default_heading, dtype=np.float64)
    if len(seg_len) == 0:
        return [Sample(points[0].copy(), default / np.linalg.norm(default), 0.0)]

    headings = []
    last = default / np.linalg.norm(default)
    for vec in seg_vec:
        planar = vec[:2]
        norm = np.linalg.norm(planar)
        if norm > 0:
            last = planar / norm
        headings.append(last)

    cumulative = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cumulative[-1]
    n_steps = int(math.floor(total / step))
    arcs = [k * step for k in range(n_steps + 1)]
    if total - arcs[-1] > 1e-9 * max(1.0, total):
        arcs.append(total)
    else:
        arcs[-1] = total

    samples = []
    for arc in arcs:
        seg = int(np.searchsorted(cumulative, arc, side="right")) - 1
        seg = min(max(seg, 0), len(seg_len) - 1)
        frac = min(max((arc - cumulative[seg]) / seg_len[seg], 0.0), 1.0)
        position = starts[seg] + frac * seg_vec[seg]
        samples.append(Sample(position, headings[seg].copy(), float(arc)))
    return samples


@dataclass(frozen=True)
class RigConfig:
    """Camera rig constants (configuration, not measured values)."""

    eye_height: float = 1.2
    drone_altitude: float = 30.0
    monitor_anchor: tuple = (0.0, 0.0, 6.0)
    fov: float = math.radians(60.0)
    target_position: tuple = (0.0, 0.0, 0.0)
    target_yaw: float = 0.0


RIGS = ("driver", "monitor", "drone")


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def poses_from_samples(samples, rig, config=None):
    """Camera poses for trajectory samples.

    * ``driver``: the camera rides the trajectory at eye height, looking along
      the heading; the observed vehicle is parked at ``config.target_position``.
    * ``monitor``: a fixed camera at ``config.monitor_anchor`` looks at the
      vehicle driving the trajectory.
    * ``drone``: the camera hovers at ``config.drone_altitude`` above the
      vehicle, looking straight down with the image top along the heading.
    """
    if rig not in RIGS:
        raise ValueError(f"unknown camera rig {rig!r} (expected one of {', '.join(RIGS)})")
    config = config or RigConfig()
    poses = []
    for position, heading, _ in samples:
        position = np.asarray(position, dtype=np.float64)
        h3 = np.array([heading[0], heading[1], 0.0])
        yaw = math.atan2(heading[1], heading[0])
        if rig == "driver":
            poses.append(Pose(model_angle=config.target_yaw,
                              camera_position=position + (0.0, 0.0, config.eye_height),
                              camera_direction=h3, camera_up=(0.0, 0.0, 1.0), fov=config.fov,
                              vehicle_position=config.target_position))
        elif rig == "monitor":
            anchor = np.asarray(config.monitor_anchor, dtype=np.float64)
            direction = _unit(position - anchor)
            up = (0.0, 0.0, 1.0) if abs(direction[2]) < 1.0 - 1e-6 else h3
            poses.append(Pose(model_angle=yaw, camera_position=anchor, camera_direction=direction,
                              camera_up=up, fov=config.fov, vehicle_position=position))
        else:
            poses.append(Pose(model_angle=yaw,
                              camera_position=(position[0], position[1], config.drone_altitude),
                              camera_direction=(0.0, 0.0, -1.0), camera_up=h3, fov=config.fov,
                              vehicle_position=position))
    return poses
