from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from errors import InvalidParameters, IrregularNeighborhood, NotInnerNode
from sensing.field import SQRT3, canonical_offsets

LOGGER = logging.getLogger(__name__)

DEDUP_DECIMALS = 9


class TessellationKind(str, Enum):
    HEXAGONAL = 'hexagonal'
    TRIANGULAR = 'triangular'
    SQUARE = 'square'


# Area covered per node, in units of l^2.
_AREA_PER_NODE = {
    TessellationKind.HEXAGONAL: 3.0 * SQRT3 / 4.0,
    TessellationKind.TRIANGULAR: SQRT3 / 2.0,
    TessellationKind.SQUARE: 1.0,
}


@dataclass(frozen=True, eq=False)
class HexNetwork:
    """Sensor positions and links of a honeycomb patch.

    `inner` holds the degree-3 nodes, the only ones that estimate. `interior`
    holds the nodes whose three incident cells all belong to the patch (empty for
    hand-built networks such as the 12-node preset).
    """

    nodes: np.ndarray
    edges: Tuple[Tuple[int, int], ...]
    l: float
    inner: Tuple[int, ...]
    interior: Tuple[int, ...] = ()
    name: str = 'honeycomb'
    _graph: nx.Graph = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        graph = nx.Graph()
        graph.add_nodes_from(range(len(self.nodes)))
        graph.add_edges_from(self.edges)
        object.__setattr__(self, '_graph', graph)

    @property
    def graph(self) -> nx.Graph:
        return self._graph

    @property
    def size(self) -> int:
        return len(self.nodes)

    def neighbors(self, node: int) -> List[int]:
        return sorted(self._graph.neighbors(node))

    def degree(self, node: int) -> int:
        return self._graph.degree(node)

    def transformed(self, angle: float = 0.0, shift: Sequence[float] = (0.0, 0.0)) -> 'HexNetwork':
        """Rigidly rotate by `angle` (radians, about the origin) and then translate.

        Node indices and adjacency are preserved so per-node results stay comparable.
        """
        rotation = _rotation(angle)
        moved = self.nodes @ rotation.T + np.asarray(shift, dtype=float)
        return HexNetwork(moved, self.edges, self.l, self.inner, self.interior, self.name)

    def to_dict(self) -> dict:
        return {
            'name': self.name,
            'l': self.l,
            'nodes': [[float(x), float(y)] for x, y in self.nodes],
            'edges': [[int(i), int(j)] for i, j in self.edges],
            'inner': [int(i) for i in self.inner],
            'interior': [int(i) for i in self.interior],
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'HexNetwork':
        try:
            nodes = np.array(data['nodes'], dtype=float).reshape(-1, 2)
            edges = tuple(tuple(sorted((int(i), int(j)))) for i, j in data['edges'])
            l = float(data['l'])
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidParameters(f"Malformed network document: {exc}") from exc
        net = cls(nodes, edges, l, (), tuple(int(i) for i in data.get('interior', [])), data.get('name', 'honeycomb'))
        inner = _degree_three(net)
        declared = data.get('inner')
        if declared is not None and sorted(int(i) for i in declared) != list(inner):
            LOGGER.warning("Network document lists inner nodes %s; recomputed %s from adjacency.", declared, inner)
        return cls(nodes, edges, l, inner, net.interior, net.name)


@dataclass(frozen=True, eq=False)
class LocalFrame:
    """Proper isometry taking a node's neighborhood onto the canonical frame."""

    node: int
    rotation: np.ndarray
    translation: np.ndarray
    neighbor_labels: Dict[int, int]

    @property
    def angle(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def to_local(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def to_global(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return (pts - self.translation) @ self.rotation

    def ordered_nodes(self) -> List[int]:
        """Network indices in measurement order mu1..mu4."""
        by_label = {label: n for n, label in self.neighbor_labels.items()}
        return [self.node, by_label[2], by_label[3], by_label[4]]


def _rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def _assemble(
        positions: Iterable[Tuple[float, float]],
        raw_edges: Iterable[Tuple[Tuple[float, float], Tuple[float, float]]],
        l: float,
) -> Tuple[np.ndarray, Tuple[Tuple[int, int], ...], Dict[Tuple[float, float], int]]:
    """Deduplicate vertices, order them by (y, x) and index the edges."""

    def key(p: Tuple[float, float]) -> Tuple[float, float]:
        return (round(p[0] / l, DEDUP_DECIMALS) + 0.0, round(p[1] / l, DEDUP_DECIMALS) + 0.0)

    unique: Dict[Tuple[float, float], Tuple[float, float]] = {}
    for p in positions:
        unique.setdefault(key(p), p)
    ordered = sorted(unique, key=lambda k: (k[1], k[0]))
    index = {k: i for i, k in enumerate(ordered)}
    nodes = np.array([unique[k] for k in ordered], dtype=float)
    edges = set()
    for a, b in raw_edges:
        i, j = index[key(a)], index[key(b)]
        if i != j:
            edges.add((min(i, j), max(i, j)))
    return nodes, tuple(sorted(edges)), index


def _degree_three(net: HexNetwork) -> Tuple[int, ...]:
    return tuple(i for i in range(net.size) if net.degree(i) == 3)


def _hex_cells(rings: int) -> List[Tuple[int, int]]:
    cells = []
    for q in range(-rings, rings + 1):
        for r in range(-rings, rings + 1):
            if abs(q + r) <= rings:
                cells.append((q, r))
    return cells


def generate_honeycomb(rings: int, l: float, origin: Sequence[float] = (0.0, 0.0)) -> HexNetwork:
    """Vertices and edges of all pointy-top hexagonal cells within `rings` of a central cell.

    Cells are addressed by axial coordinates (q, r); cell centers sit at
    (sqrt(3) l (q + r/2), 3 l r / 2) and cell vertices at angles 30 + 60k degrees,
    so every degree-3 node has its neighbors either at the canonical offsets or
    at the canonical offsets rotated by 60 degrees.
    """
    if rings < 0:
        raise InvalidParameters(f"rings must be >= 0, got {rings}")
    if not l > 0:
        raise InvalidParameters(f"Edge length must be positive, got {l}")
    ox, oy = float(origin[0]), float(origin[1])
    corner_angles = [math.radians(30 + 60 * k) for k in range(6)]
    positions: List[Tuple[float, float]] = []
    raw_edges = []
    cell_corners: List[List[Tuple[float, float]]] = []
    for q, r in _hex_cells(rings):
        cx = ox + SQRT3 * l * (q + r / 2.0)
        cy = oy + 1.5 * l * r
        corners = [(cx + l * math.cos(a), cy + l * math.sin(a)) for a in corner_angles]
        cell_corners.append(corners)
        positions.extend(corners)
        raw_edges.extend((corners[k], corners[(k + 1) % 6]) for k in range(6))
    nodes, edges, index = _assemble(positions, raw_edges, l)

    incidence = [0] * len(nodes)
    for corners in cell_corners:
        for p in corners:
            key = (round(p[0] / l, DEDUP_DECIMALS) + 0.0, round(p[1] / l, DEDUP_DECIMALS) + 0.0)
            incidence[index[key]] += 1
    interior = tuple(i for i, count in enumerate(incidence) if count == 3)

    net = HexNetwork(nodes, edges, float(l), (), interior, f"honeycomb-r{rings}")
    net = HexNetwork(nodes, edges, float(l), _degree_three(net), interior, net.name)
    LOGGER.debug(
        "Generated honeycomb rings=%d l=%g: %d nodes, %d edges, %d inner.",
        rings, l, net.size, len(net.edges), len(net.inner),
    )
    return net


def preset_twelve_node_network(l: float) -> HexNetwork:
    """Twelve nodes: a hexagonal cycle of circumradius l, each vertex with one outward pendant."""
    if not l > 0:
        raise InvalidParameters(f"Edge length must be positive, got {l}")
    angles = [math.radians(90 + 60 * k) for k in range(6)]
    ring = [(l * math.cos(a), l * math.sin(a)) for a in angles]
    pendants = [(2 * l * math.cos(a), 2 * l * math.sin(a)) for a in angles]
    raw_edges = [(ring[k], ring[(k + 1) % 6]) for k in range(6)]
    raw_edges += [(ring[k], pendants[k]) for k in range(6)]
    nodes, edges, _ = _assemble(ring + pendants, raw_edges, l)
    net = HexNetwork(nodes, edges, float(l), (), (), 'paper12')
    return HexNetwork(nodes, edges, float(l), _degree_three(net), (), 'paper12')


def build_network(preset: Optional[str] = None, rings: int = 1, l: float = 1.0) -> HexNetwork:
    if preset:
        if preset.lower() != 'paper12':
            raise InvalidParameters(f"Unknown network preset '{preset}'")
        return preset_twelve_node_network(l)
    return generate_honeycomb(rings, l)


def local_frame(net: HexNetwork, node: int, tol: float = 1e-9) -> LocalFrame:
    """Isometry mapping `node` to the origin and its neighbors onto (0, l), (-sqrt3 l/2, -l/2), (sqrt3 l/2, -l/2).

    Among the three proper rotations that superpose the neighbor triad onto the
    canonical triad, the one with the smallest angle wins; ties go to the
    counterclockwise one.
    """
    if node < 0 or node >= net.size:
        raise NotInnerNode(f"Node {node} is not part of the network")
    neighbors = net.neighbors(node)
    if len(neighbors) != 3:
        raise NotInnerNode(f"Node {node} has {len(neighbors)} neighbors; estimation needs exactly 3")
    origin = net.nodes[node]
    offsets = net.nodes[neighbors] - origin
    north = math.pi / 2
    candidates = []
    for offset in offsets:
        raw = north - math.atan2(offset[1], offset[0])
        wrapped = math.atan2(math.sin(raw), math.cos(raw))
        candidates.append(wrapped)
    angle = min(candidates, key=lambda a: (round(abs(a), 9), -a))
    rotation = _rotation(angle)
    translation = -rotation @ origin
    local = offsets @ rotation.T
    canonical = canonical_offsets(net.l)[1:]
    labels: Dict[int, int] = {}
    scale = max(net.l, 1.0)
    for n, point in zip(neighbors, local):
        distances = np.linalg.norm(canonical - point, axis=1)
        best = int(np.argmin(distances))
        if distances[best] > tol * scale:
            raise IrregularNeighborhood(
                f"Neighbors of node {node} are not at mutual 120 degree angles with edge length {net.l}"
            )
        labels[n] = best + 2
    if sorted(labels.values()) != [2, 3, 4]:
        raise IrregularNeighborhood(f"Neighbors of node {node} do not map onto distinct canonical positions")
    return LocalFrame(node, rotation, translation, labels)


def coverage_area(kind: TessellationKind, l: float, n: int) -> float:
    if not l > 0:
        raise InvalidParameters(f"Edge length must be positive, got {l}")
    if n < 0:
        raise InvalidParameters(f"Node count must be >= 0, got {n}")
    return _AREA_PER_NODE[TessellationKind(kind)] * l * l * n
