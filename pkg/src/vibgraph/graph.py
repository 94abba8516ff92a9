"""The wind-turbine knowledge graph.

Four node kinds (terminology, data, state, meta) and four directed relation
kinds (has, is-a, measures, causes) describe the turbine: a component tree
of 21 terminology nodes, the 8 accelerometer channels AN3-AN10 as data
nodes, the two health states, and 4 attribute meta nodes.  Graphs are
immutable; every constructor returns a new value.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import FormatError
from .signals import SENSOR_NAMES


class NodeKind(Enum):
    TERMINOLOGY = "terminology"
    DATA = "data"
    STATE = "state"
    META = "meta"


class EdgeKind(Enum):
    HAS = "has"
    IS_A = "is-a"
    MEASURES = "measures"
    CAUSES = "causes"


#: Deterministic ordering used for neighbor listings and tie-breaking.
EDGE_ORDER = {kind: i for i, kind in enumerate(EdgeKind)}


class Direction(Enum):
    IN = "in"
    OUT = "out"


@dataclass(frozen=True)
class GraphNode:
    id: int
    name: str
    kind: NodeKind


@dataclass(frozen=True)
class GraphEdge:
    source: int
    target: int
    kind: EdgeKind


@dataclass(frozen=True)
class KnowledgeGraph:
    """Typed nodes and directed typed edges, with optional node annotations.

    ``annotations`` maps node id to a real vector; all vectors share one
    length.  A graph without annotations has ``annotations=None``.
    """

    nodes: tuple[GraphNode, ...]
    edges: tuple[GraphEdge, ...]
    annotations: Mapping[int, np.ndarray] | None = None

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))

    def node_by_id(self, node_id: int) -> GraphNode:
        for node in self.nodes:
            if node.id == node_id:
                return node
        raise KeyError(f"no node with id {node_id}")

    def node_by_name(self, name: str) -> GraphNode:
        for node in self.nodes:
            if node.name == name:
                return node
        raise KeyError(f"no node named {name!r}")

    def nodes_of_kind(self, kind: NodeKind) -> tuple[GraphNode, ...]:
        return tuple(n for n in self.nodes if n.kind == kind)

    def has_edge(self, source: int, target: int, kind: EdgeKind) -> bool:
        return any(e.source == source and e.target == target and e.kind == kind
                   for e in self.edges)

    def label_of(self, node_id: int) -> tuple[str, str]:
        """Categorical node label: the (kind, name) pair."""
        node = self.node_by_id(node_id)
        return (node.kind.value, node.name)

    @property
    def annotation_dim(self) -> int:
        if not self.annotations:
            raise ValueError("graph carries no annotations")
        return next(iter(self.annotations.values())).shape[0]


#: The component ontology: (child, parent) pairs wired with "has" edges from
#: parent to child.  The 21 terminology names form a tree rooted at the
#: turbine itself.
_COMPONENT_TREE: tuple[tuple[str, str | None], ...] = (
    ("Wind Turbine", None),
    ("Rotor", "Wind Turbine"),
    ("Nacelle", "Wind Turbine"),
    ("Drivetrain", "Wind Turbine"),
    ("Hub", "Rotor"),
    ("Main Shaft", "Drivetrain"),
    ("Gearbox", "Drivetrain"),
    ("Generator", "Drivetrain"),
    ("Ring Gear", "Gearbox"),
    ("Planet Carrier", "Gearbox"),
    ("Planet Gear Set", "Gearbox"),
    ("Sun Gear", "Gearbox"),
    ("Low-Speed Shaft", "Gearbox"),
    ("Intermediate-Speed Shaft", "Gearbox"),
    ("High-Speed Shaft", "Gearbox"),
    ("Lubrication System", "Gearbox"),
    ("LS-SH Bearing", "Low-Speed Shaft"),
    ("IMS-SH Bearing", "Intermediate-Speed Shaft"),
    ("HS-SH Upwind Bearing", "High-Speed Shaft"),
    ("HS-SH Downwind Bearing", "High-Speed Shaft"),
    ("Carrier Bearing", "Planet Carrier"),
)

#: Accelerometer mount points from the sensor description table.
SENSOR_MOUNTS: dict[str, str] = {
    "AN3": "Ring Gear",
    "AN4": "Ring Gear",
    "AN5": "Low-Speed Shaft",
    "AN6": "Intermediate-Speed Shaft",
    "AN7": "High-Speed Shaft",
    "AN8": "HS-SH Upwind Bearing",
    "AN9": "HS-SH Downwind Bearing",
    "AN10": "Planet Carrier",
}

#: Components whose kind-of-motion attribute links to the Rotating meta node.
_ROTATING_COMPONENTS = (
    "Ring Gear", "Planet Carrier", "Planet Gear Set", "Sun Gear",
    "Low-Speed Shaft", "Intermediate-Speed Shaft", "High-Speed Shaft", "Main Shaft",
)

STATE_HEALTHY = "Healthy"
STATE_DAMAGED = "Damaged"
META_SENSOR_TYPE = "Accelerometer"
META_DATA_TYPE = "Vibration"
META_COMPONENT_TYPE = "Rotating"
META_CONDITION_TYPE = "Operational"


def build_default_graph() -> KnowledgeGraph:
    """The 35-node turbine graph: 21 terminology, 8 data, 2 state, 4 meta."""
    nodes: list[GraphNode] = []
    ids: dict[str, int] = {}

    def add(name: str, kind: NodeKind) -> int:
        node_id = len(nodes)
        nodes.append(GraphNode(id=node_id, name=name, kind=kind))
        ids[name] = node_id
        return node_id

    for name, _parent in _COMPONENT_TREE:
        add(name, NodeKind.TERMINOLOGY)
    for sensor in SENSOR_NAMES:
        add(sensor, NodeKind.DATA)
    add(STATE_HEALTHY, NodeKind.STATE)
    add(STATE_DAMAGED, NodeKind.STATE)
    for name in (META_SENSOR_TYPE, META_DATA_TYPE, META_COMPONENT_TYPE,
                 META_CONDITION_TYPE):
        add(name, NodeKind.META)

    edges: list[GraphEdge] = []
    for name, parent in _COMPONENT_TREE:
        if parent is not None:
            edges.append(GraphEdge(ids[parent], ids[name], EdgeKind.HAS))
    for sensor, mount in SENSOR_MOUNTS.items():
        edges.append(GraphEdge(ids[mount], ids[sensor], EdgeKind.HAS))
    for sensor in SENSOR_NAMES:
        edges.append(GraphEdge(ids[sensor], ids[META_SENSOR_TYPE], EdgeKind.IS_A))
        edges.append(GraphEdge(ids[sensor], ids[META_DATA_TYPE], EdgeKind.MEASURES))
        edges.append(GraphEdge(ids[sensor], ids[STATE_HEALTHY], EdgeKind.CAUSES))
        edges.append(GraphEdge(ids[sensor], ids[STATE_DAMAGED], EdgeKind.CAUSES))
    for name in _ROTATING_COMPONENTS:
        edges.append(GraphEdge(ids[name], ids[META_COMPONENT_TYPE], EdgeKind.IS_A))
    for state in (STATE_HEALTHY, STATE_DAMAGED):
        edges.append(GraphEdge(ids[state], ids[META_CONDITION_TYPE], EdgeKind.IS_A))

    graph = KnowledgeGraph(nodes=tuple(nodes), edges=tuple(edges))
    violations = validate(graph)
    if violations:
        raise AssertionError(f"default graph failed validation: {violations}")
    return graph


def validate(graph: KnowledgeGraph) -> list[str]:
    """Check every structural invariant; an empty list means success."""
    violations: list[str] = []
    ids = [n.id for n in graph.nodes]
    id_set = set(ids)
    if len(id_set) != len(ids):
        violations.append("duplicate node ids")
    seen_triples = set()
    for edge in graph.edges:
        if edge.source not in id_set or edge.target not in id_set:
            violations.append(
                f"dangling edge ({edge.source}, {edge.kind.value}, {edge.target})")
            continue
        if edge.source == edge.target:
            violations.append(f"self-loop at node {edge.source}")
        key = (edge.source, edge.target, edge.kind)
        if key in seen_triples:
            violations.append(
                f"duplicate edge ({edge.source}, {edge.kind.value}, {edge.target})")
        seen_triples.add(key)

    kind_by_id = {n.id: n.kind for n in graph.nodes}
    for node in graph.nodes:
        if node.kind is not NodeKind.DATA:
            continue
        out_edges = [e for e in graph.edges if e.source == node.id and e.target in id_set]
        n_measures = sum(1 for e in out_edges if e.kind is EdgeKind.MEASURES)
        n_isa = sum(1 for e in out_edges if e.kind is EdgeKind.IS_A)
        causes_states = [e for e in out_edges if e.kind is EdgeKind.CAUSES
                         and kind_by_id[e.target] is NodeKind.STATE]
        if n_measures != 1:
            violations.append(
                f"data node {node.id} ({node.name}) has {n_measures} outgoing "
                f"measures edges, expected exactly 1")
        if n_isa != 1:
            violations.append(
                f"data node {node.id} ({node.name}) has {n_isa} outgoing is-a "
                f"edges, expected exactly 1")
        if not causes_states:
            violations.append(
                f"data node {node.id} ({node.name}) has no outgoing causes edge "
                f"to a state node")

    if graph.nodes and not _weakly_connected(graph, id_set):
        violations.append("not weakly connected")
    return violations


def _weakly_connected(graph: KnowledgeGraph, id_set: set[int]) -> bool:
    adjacency: dict[int, set[int]] = {i: set() for i in id_set}
    for edge in graph.edges:
        if edge.source in id_set and edge.target in id_set:
            adjacency[edge.source].add(edge.target)
            adjacency[edge.target].add(edge.source)
    start = next(iter(id_set))
    seen = {start}
    frontier = [start]
    while frontier:
        current = frontier.pop()
        for other in adjacency[current]:
            if other not in seen:
                seen.add(other)
                frontier.append(other)
    return seen == id_set


def attach_annotations(graph: KnowledgeGraph,
                       features: Mapping[str, Sequence[float] | np.ndarray]) -> KnowledgeGraph:
    """Annotate data nodes with feature vectors; every other node gets zeros.

    All vectors must share one length, which becomes the annotation
    dimension of the returned graph.
    """
    if not features:
        raise ValueError("features must contain at least one sensor entry")
    vectors = {name: np.asarray(vec, dtype=float) for name, vec in features.items()}
    dims = {v.shape for v in vectors.values()}
    if len(dims) > 1 or any(len(s) != 1 for s in dims):
        raise ValueError(f"feature vectors must be 1-D of one shared length, got {dims}")
    dim = next(iter(dims))[0]
    annotations: dict[int, np.ndarray] = {}
    by_name = {n.name: n for n in graph.nodes}
    for name in vectors:
        if name not in by_name:
            raise KeyError(f"no node named {name!r} in the graph")
        if by_name[name].kind is not NodeKind.DATA:
            raise KeyError(f"node {name!r} is not a data node")
    for node in graph.nodes:
        if node.name in vectors:
            annotations[node.id] = vectors[node.name].copy()
        else:
            annotations[node.id] = np.zeros(dim)
    return replace(graph, annotations=annotations)


def neighbors(graph: KnowledgeGraph, node_id: int,
              direction: Direction) -> list[tuple[int, EdgeKind]]:
    """Adjacent (node id, edge kind) pairs, sorted by id then edge order."""
    graph.node_by_id(node_id)
    out: list[tuple[int, EdgeKind]] = []
    for edge in graph.edges:
        if direction is Direction.OUT and edge.source == node_id:
            out.append((edge.target, edge.kind))
        elif direction is Direction.IN and edge.target == node_id:
            out.append((edge.source, edge.kind))
    out.sort(key=lambda pair: (pair[0], EDGE_ORDER[pair[1]]))
    return out


def serialize(graph: KnowledgeGraph) -> str:
    """Canonical line-oriented text form.

    Nodes sorted by id, edges by (source, target, kind), annotations by id;
    identical graphs always serialize to identical bytes.
    """
    violations = validate(graph)
    if violations:
        raise ValueError(f"refusing to serialize an invalid graph: {violations[0]}")
    lines: list[str] = []
    for node in sorted(graph.nodes, key=lambda n: n.id):
        lines.append(f"node {node.id} {node.kind.value} {node.name}")
    for edge in sorted(graph.edges,
                       key=lambda e: (e.source, e.target, EDGE_ORDER[e.kind])):
        lines.append(f"edge {edge.source} {edge.kind.value} {edge.target}")
    if graph.annotations:
        for node_id in sorted(graph.annotations):
            values = " ".join(repr(float(v)) for v in graph.annotations[node_id])
            lines.append(f"annot {node_id} {values}")
    return "\n".join(lines) + "\n"


def deserialize(text: str) -> KnowledgeGraph:
    """Parse the text form produced by :func:`serialize`."""
    node_kinds = {k.value: k for k in NodeKind}
    edge_kinds = {k.value: k for k in EdgeKind}
    nodes: list[GraphNode] = []
    edges: list[GraphEdge] = []
    annotations: dict[int, np.ndarray] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        tag = fields[0]
        try:
            if tag == "node":
                if len(fields) < 4:
                    raise FormatError(f"line {lineno}: node line needs id, kind, name",
                                      line=lineno)
                kind = fields[2]
                if kind not in node_kinds:
                    raise FormatError(
                        f"line {lineno}: unknown node kind {kind!r}", line=lineno)
                name = line.split(None, 3)[3]
                nodes.append(GraphNode(id=int(fields[1]), name=name,
                                       kind=node_kinds[kind]))
            elif tag == "edge":
                if len(fields) != 4:
                    raise FormatError(
                        f"line {lineno}: edge line needs source, kind, target",
                        line=lineno)
                kind = fields[2]
                if kind not in edge_kinds:
                    raise FormatError(
                        f"line {lineno}: unknown edge kind {kind!r}", line=lineno)
                edges.append(GraphEdge(source=int(fields[1]), target=int(fields[3]),
                                       kind=edge_kinds[kind]))
            elif tag == "annot":
                annotations[int(fields[1])] = np.asarray(
                    [float(v) for v in fields[2:]], dtype=float)
            else:
                raise FormatError(f"line {lineno}: unknown record {tag!r}", line=lineno)
        except FormatError:
            raise
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}", line=lineno) from None
    nodes.sort(key=lambda n: n.id)
    return KnowledgeGraph(nodes=tuple(nodes), edges=tuple(edges),
                          annotations=annotations or None)
