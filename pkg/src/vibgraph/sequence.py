"""Semantic sequence output: chained gated networks over the turbine graph.

One gated network scores nodes and relations to emit a (subject, relation,
object) triple per step; a second gated network predicts the node
annotations that initialize the next step.  Decoding walks the ontology:
the next subject is the emitted object while the object has outgoing edges,
and candidate triples are restricted to edges leaving the current subject,
which makes every emitted sequence grammar-valid by construction.  The two
networks are shared across steps; the step index is appended to the
annotations so steps remain distinguishable.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .graph import (Direction, EDGE_ORDER, EdgeKind, KnowledgeGraph, NodeKind,
                    build_default_graph, attach_annotations)
from .gnn import _Topology, build_topology, stack_annotations, _to_class_index
from .gated import AGG_KEYS, _backward_gated, _forward_gated, init_gated_tensors
from .numerics import (EpochLog, Params, TrainingConfig, cross_entropy_batch,
                       glorot_init, l2_penalty, run_adam_training, seed_streams,
                       softmax)

Triple = tuple[int, EdgeKind, int]

START_NODE = "Gearbox"
DEFAULT_MAX_STEPS = 8

EDGE_KINDS = tuple(EdgeKind)


@dataclass(frozen=True)
class SequenceOutput:
    """Ordered semantic triples plus a completion flag.

    ``complete`` is true when the sequence ended with a causes-relation
    triple into a state node; ``fallback_steps`` records steps where the
    unrestricted argmax was not a graph edge and the best valid edge was
    emitted instead.
    """

    triples: tuple[Triple, ...]
    complete: bool
    fallback_steps: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.triples)


@dataclass(frozen=True)
class SequenceNet:
    """One gated network with either the triple-scoring or annotation head."""

    hidden_size: int
    n_steps: int
    input_dim: int
    role: str  # "output" or "annotation"
    tensors: Params


@dataclass(frozen=True)
class GgsnnParameters:
    """Output and annotation networks sharing one flat tensor dict.

    Tensor names carry an ``out:`` or ``ann:`` prefix.  Both networks see
    annotation vectors of ``annot_dim + 1`` entries: the raw annotation plus
    the step index.
    """

    hidden_size: int
    n_steps: int
    annot_dim: int
    tensors: Params

    @classmethod
    def init(cls, annot_dim: int, hidden_size: int = 16, n_steps: int = 4,
             seed: int | np.random.Generator = 0) -> "GgsnnParameters":
        if n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        rng = np.random.default_rng(seed) if isinstance(seed, int) else seed
        tensors: Params = {}
        for name, value in init_gated_tensors(annot_dim + 1, hidden_size, rng).items():
            tensors[f"out:{name}"] = value
        tensors["out:node_w"] = glorot_init(hidden_size, 1, rng)[:, 0]
        tensors["out:node_b"] = np.zeros(1)
        tensors["out:rel_w"] = glorot_init(hidden_size, len(EDGE_KINDS), rng)
        tensors["out:rel_b"] = np.zeros(len(EDGE_KINDS))
        for name, value in init_gated_tensors(annot_dim + 1, hidden_size, rng).items():
            tensors[f"ann:{name}"] = value
        tensors["ann:head_w"] = glorot_init(hidden_size, annot_dim, rng)
        tensors["ann:head_b"] = np.zeros(annot_dim)
        return cls(hidden_size=hidden_size, n_steps=n_steps, annot_dim=annot_dim,
                   tensors=tensors)

    def _view(self, prefix: str, role: str) -> SequenceNet:
        sub = {k[len(prefix):]: v for k, v in self.tensors.items()
               if k.startswith(prefix)}
        return SequenceNet(hidden_size=self.hidden_size, n_steps=self.n_steps,
                           input_dim=self.annot_dim + 1, role=role, tensors=sub)

    @property
    def output_net(self) -> SequenceNet:
        return self._view("out:", "output")

    @property
    def annotation_net(self) -> SequenceNet:
        return self._view("ann:", "annotation")

    def with_tensors(self, tensors: Params) -> "GgsnnParameters":
        return replace(self, tensors=tensors)


def _with_step_column(annots: np.ndarray, step_index: int) -> np.ndarray:
    column = np.full(annots.shape[:-1] + (1,), float(step_index))
    return np.concatenate([annots, column], axis=-1)


def _outgoing_edges(graph: KnowledgeGraph, node_id: int) -> list[tuple[int, EdgeKind]]:
    out = [(e.target, e.kind) for e in graph.edges if e.source == node_id]
    out.sort(key=lambda pair: (pair[0], EDGE_ORDER[pair[1]]))
    return out


def ggsnn_step(graph: KnowledgeGraph, output_net: SequenceNet,
               annotation_net: SequenceNet, annotations: np.ndarray, *,
               step_index: int = 0, subject: int | None = None,
               ) -> tuple[Triple, np.ndarray, bool]:
    """Emit one triple and the annotations initializing the next step.

    ``annotations`` is (node count, annot_dim) in ascending node-id order.
    Returns (triple, next annotations, fallback flag); the flag is set when
    the unrestricted argmax over nodes and relations was not an edge leaving
    the subject and the best valid edge was emitted instead.  Exact ties
    resolve to the lowest object id, then to edge-kind order.
    """
    topo = build_topology(graph, keying="edge_dir")
    if subject is None:
        try:
            subject = graph.node_by_name(START_NODE).id
        except KeyError:
            subject = min(topo.node_ids)
    annotations = np.asarray(annotations, dtype=float)
    if annotations.shape != (topo.n_nodes, output_net.input_dim - 1):
        raise ValueError(
            f"annotations must have shape ({topo.n_nodes}, "
            f"{output_net.input_dim - 1}), got {annotations.shape}")
    ann_in = _with_step_column(annotations, step_index)[None, :, :]
    out_states, _ = _forward_gated(topo, output_net.tensors, ann_in,
                                   output_net.n_steps)
    final = out_states[-1][0]
    node_logits = final @ output_net.tensors["node_w"] + output_net.tensors["node_b"][0]
    rel_logits = final[topo.pos[subject]] @ output_net.tensors["rel_w"] \
        + output_net.tensors["rel_b"]

    candidates = _outgoing_edges(graph, subject)
    if not candidates:
        raise ValueError(f"node {subject} has no outgoing edges to decode over")
    best = None
    best_score = -np.inf
    for target, kind in candidates:
        score = node_logits[topo.pos[target]] + rel_logits[EDGE_ORDER[kind]]
        if score > best_score:
            best_score = score
            best = (target, kind)
    free_node = topo.node_ids[int(np.argmax(node_logits))]
    free_kind = EDGE_KINDS[int(np.argmax(rel_logits))]
    fallback = not graph.has_edge(subject, free_node, free_kind)

    ann_states, _ = _forward_gated(topo, annotation_net.tensors, ann_in,
                                   annotation_net.n_steps)
    next_annotations = ann_states[-1][0] @ annotation_net.tensors["head_w"] \
        + annotation_net.tensors["head_b"]
    return (subject, best[1], best[0]), next_annotations, fallback


def predict_sequence(graph: KnowledgeGraph, params: GgsnnParameters,
                     max_steps: int = DEFAULT_MAX_STEPS,
                     start: str = START_NODE) -> SequenceOutput:
    """Greedy decode until a causes triple reaches a state node.

    The subject chain follows emitted objects; when an object has no
    outgoing edges (meta and state nodes) the subject is retained.  Stops
    incomplete when ``max_steps`` is exhausted or decoding gets stuck.
    """
    if max_steps < 0:
        raise ValueError("max_steps must be nonnegative")
    if not graph.annotations:
        raise ValueError("graph carries no annotations; attach them first")
    topo = build_topology(graph, keying="edge_dir")
    annotations = np.stack([graph.annotations[i] for i in topo.node_ids])
    kind_by_id = {n.id: n.kind for n in graph.nodes}
    subject = graph.node_by_name(start).id
    triples: list[Triple] = []
    fallbacks: list[int] = []
    complete = False
    output_net = params.output_net
    annotation_net = params.annotation_net
    for step in range(max_steps):
        if not _outgoing_edges(graph, subject):
            break
        triple, annotations, fell_back = ggsnn_step(
            graph, output_net, annotation_net, annotations,
            step_index=step, subject=subject)
        triples.append(triple)
        if fell_back:
            fallbacks.append(step)
        obj = triple[2]
        if triple[1] is EdgeKind.CAUSES and kind_by_id[obj] is NodeKind.STATE:
            complete = True
            break
        if _outgoing_edges(graph, obj):
            subject = obj
    return SequenceOutput(triples=tuple(triples), complete=complete,
                          fallback_steps=tuple(fallbacks))


def sequence_is_grammar_valid(graph: KnowledgeGraph,
                              triples: Sequence[Triple]) -> bool:
    """True when every triple is an edge of the graph."""
    return all(graph.has_edge(s, o, k) for s, k, o in triples)


def target_sequence_for_sensor(graph: KnowledgeGraph, sensor: str,
                               state: str = "Damaged") -> SequenceOutput:
    """Ground-truth chain from the gearbox to a sensor's final state triple.

    Walks the component tree along has-edges to the sensor, then appends the
    sensor's is-a, measures, and causes triples.
    """
    start = graph.node_by_name(START_NODE).id
    goal = graph.node_by_name(sensor).id
    state_id = graph.node_by_name(state).id
    parents: dict[int, Triple] = {}
    frontier = [start]
    seen = {start}
    while frontier:
        current = frontier.pop(0)
        for target, kind in _outgoing_edges(graph, current):
            if kind is EdgeKind.HAS and target not in seen:
                parents[target] = (current, kind, target)
                seen.add(target)
                frontier.append(target)
    if goal not in parents and goal != start:
        raise ValueError(f"no has-path from {START_NODE} to {sensor}")
    path: list[Triple] = []
    node = goal
    while node != start:
        triple = parents[node]
        path.append(triple)
        node = triple[0]
    path.reverse()
    outgoing = _outgoing_edges(graph, goal)
    isa = next(t for t, k in outgoing if k is EdgeKind.IS_A)
    measures = next(t for t, k in outgoing if k is EdgeKind.MEASURES)
    path.append((goal, EdgeKind.IS_A, isa))
    path.append((goal, EdgeKind.MEASURES, measures))
    path.append((goal, EdgeKind.CAUSES, state_id))
    return SequenceOutput(triples=tuple(path), complete=True)


def _article(word: str) -> str:
    return "an" if word[:1].lower() in "aeiou" else "a"


def render_sentence(graph: KnowledgeGraph, triple: Triple) -> str:
    """English rendering, e.g. "the gearbox has a ring gear"."""
    subject_node = graph.node_by_id(triple[0])
    object_node = graph.node_by_id(triple[2])
    kind = triple[1]
    subject = (subject_node.name if subject_node.kind is NodeKind.DATA
               else f"the {subject_node.name.lower()}")
    if kind is EdgeKind.CAUSES and object_node.kind is NodeKind.STATE:
        obj = ("fault operations" if object_node.name == "Damaged"
               else "normal operations")
        return f"{subject} causes {obj}"
    if object_node.kind is NodeKind.DATA:
        obj = object_node.name
    elif kind in (EdgeKind.HAS, EdgeKind.IS_A):
        lowered = object_node.name.lower()
        obj = f"{_article(lowered)} {lowered}"
    else:
        obj = object_node.name.lower()
    verb = {EdgeKind.HAS: "has", EdgeKind.IS_A: "is", EdgeKind.MEASURES: "measures",
            EdgeKind.CAUSES: "causes"}[kind]
    return f"{subject} {verb} {obj}"


# ---------------------------------------------------------------------------
# Training with teacher forcing.

def _normalize_target(graph: KnowledgeGraph, target) -> tuple[Triple, ...]:
    triples = target.triples if isinstance(target, SequenceOutput) else tuple(target)
    normalized = []
    for item in triples:
        s, k, o = item
        if not isinstance(k, EdgeKind):
            k = EdgeKind(k)
        if not graph.has_edge(s, o, k):
            raise ValueError(
                f"target triple ({s}, {k.value}, {o}) is not an edge of the graph")
        normalized.append((int(s), k, int(o)))
    return tuple(normalized)


def _group_loss_and_grads(topo: _Topology, graph: KnowledgeGraph,
                          params: GgsnnParameters, annots: np.ndarray,
                          target: tuple[Triple, ...],
                          ) -> tuple[float, Params]:
    """Teacher-forced loss of one batch sharing a single target sequence.

    Per example the loss is the sum over steps of node plus relation cross
    entropy; the return value is the mean over the batch.  Gradients flow
    through both networks and across the annotation handoff between steps.
    """
    tensors = params.tensors
    batch = annots.shape[0]
    n_seq = len(target)
    ann = annots
    step_caches = []
    total_loss = 0.0
    for k, (subj, rel, obj) in enumerate(target):
        subj_pos, obj_pos = topo.pos[subj], topo.pos[obj]
        ann_in = _with_step_column(ann, k)
        out_states, out_caches = _forward_gated(topo, tensors, ann_in,
                                                params.n_steps, prefix="out:")
        final = out_states[-1]
        node_logits = final @ tensors["out:node_w"] + tensors["out:node_b"][0]
        loss_node, d_node_logits = cross_entropy_batch(
            node_logits, np.full(batch, obj_pos, dtype=int))
        subj_state = final[:, subj_pos, :]
        rel_logits = subj_state @ tensors["out:rel_w"] + tensors["out:rel_b"]
        loss_rel, d_rel_logits = cross_entropy_batch(
            rel_logits, np.full(batch, EDGE_ORDER[rel], dtype=int))
        total_loss += loss_node + loss_rel
        produces_handoff = k < n_seq - 1
        ann_states = ann_caches = ann_next = None
        if produces_handoff:
            ann_states, ann_caches = _forward_gated(topo, tensors, ann_in,
                                                    params.n_steps, prefix="ann:")
            ann_next = ann_states[-1] @ tensors["ann:head_w"] + tensors["ann:head_b"]
        step_caches.append((ann_in, out_states, out_caches, d_node_logits,
                            d_rel_logits, subj_pos, ann_states, ann_caches))
        if produces_handoff:
            ann = ann_next

    grads: Params = {key: np.zeros_like(value) for key, value in tensors.items()}
    d_ann_from_next = np.zeros_like(annots)
    for k in reversed(range(n_seq)):
        (ann_in, out_states, out_caches, d_node_logits, d_rel_logits,
         subj_pos, ann_states, ann_caches) = step_caches[k]
        final = out_states[-1]
        d_final = d_node_logits[:, :, None] * tensors["out:node_w"][None, None, :]
        grads["out:node_w"] += np.tensordot(d_node_logits, final, axes=([0, 1], [0, 1]))
        grads["out:node_b"] += np.array([d_node_logits.sum()])
        d_final[:, subj_pos, :] += d_rel_logits @ tensors["out:rel_w"].T
        grads["out:rel_w"] += final[:, subj_pos, :].T @ d_rel_logits
        grads["out:rel_b"] += d_rel_logits.sum(axis=0)
        g_out, d_h0_out = _backward_gated(topo, tensors, out_states, out_caches,
                                          d_final, prefix="out:")
        for key, value in g_out.items():
            grads[key] += value
        grads["out:in_proj"] += np.tensordot(ann_in, d_h0_out, axes=([0, 1], [0, 1]))
        d_ann_in = d_h0_out @ tensors["out:in_proj"].T

        if ann_states is not None:
            d_ann_states_final = d_ann_from_next @ tensors["ann:head_w"].T
            grads["ann:head_w"] += np.tensordot(ann_states[-1], d_ann_from_next,
                                                axes=([0, 1], [0, 1]))
            grads["ann:head_b"] += d_ann_from_next.sum(axis=(0, 1))
            g_ann, d_h0_ann = _backward_gated(topo, tensors, ann_states, ann_caches,
                                              d_ann_states_final, prefix="ann:")
            for key, value in g_ann.items():
                grads[key] += value
            grads["ann:in_proj"] += np.tensordot(ann_in, d_h0_ann,
                                                 axes=([0, 1], [0, 1]))
            d_ann_in = d_ann_in + d_h0_ann @ tensors["ann:in_proj"].T
        d_ann_from_next = d_ann_in[:, :, :params.annot_dim]
    return total_loss, grads


def batch_loss_and_grads_sequence(graph: KnowledgeGraph, params: GgsnnParameters,
                                  annots: np.ndarray,
                                  targets: Sequence[tuple[Triple, ...]], *,
                                  topo: _Topology | None = None,
                                  l2_lambda: float = 0.0) -> tuple[float, Params]:
    """Teacher-forced loss over a batch with possibly mixed target sequences."""
    topo = topo or build_topology(graph, keying="edge_dir")
    groups: dict[tuple[Triple, ...], list[int]] = {}
    for i, target in enumerate(targets):
        groups.setdefault(target, []).append(i)
    total = annots.shape[0]
    loss = 0.0
    grads: Params = {key: np.zeros_like(value) for key, value in params.tensors.items()}
    for target in sorted(groups, key=lambda t: tuple((s, k.value, o) for s, k, o in t)):
        idx = np.asarray(groups[target], dtype=int)
        group_loss, group_grads = _group_loss_and_grads(
            topo, graph, params, annots[idx], target)
        weight = len(idx) / total
        loss += group_loss * weight
        for key, value in group_grads.items():
            grads[key] += value * weight
    if l2_lambda > 0:
        weights = {k: w for k, w in params.tensors.items() if w.ndim >= 2}
        _, l2_grads = l2_penalty(weights, l2_lambda)
        for key, g in l2_grads.items():
            grads[key] = grads[key] + g
    return loss, grads


def train_ggsnn(train_graphs: Sequence[KnowledgeGraph], train_targets: Sequence,
                dev_graphs: Sequence[KnowledgeGraph], dev_targets: Sequence,
                config: TrainingConfig, n_steps: int = 4, batch_size: int = 32,
                ) -> tuple[GgsnnParameters, list[EpochLog]]:
    """Teacher-forced Adam training of the chained networks.

    Targets must be grammar-valid for their graph; the ground-truth subject
    of each step feeds the next step regardless of the heads' predictions.
    """
    if not train_graphs:
        raise ValueError("training set must be non-empty")
    graph = train_graphs[0]
    topo = build_topology(graph, keying="edge_dir")
    norm_train = [_normalize_target(graph, t) for t in train_targets]
    norm_dev = [_normalize_target(graph, t) for t in dev_targets]
    from .gnn import stack_annotation_batch
    train_annots = stack_annotation_batch(train_graphs, topo)
    dev_annots = stack_annotation_batch(dev_graphs, topo) if dev_graphs else None
    init_rng = seed_streams(config.seed)[0]
    params = GgsnnParameters.init(
        annot_dim=graph.annotation_dim, hidden_size=config.hidden_size,
        n_steps=n_steps, seed=init_rng)

    def batch_fn(tensors: Params, idx: np.ndarray,
                 dropout_rng: np.random.Generator) -> tuple[float, Params]:
        return batch_loss_and_grads_sequence(
            graph, params.with_tensors(tensors), train_annots[idx],
            [norm_train[i] for i in idx], topo=topo, l2_lambda=config.l2_lambda)

    dev_fn = None
    if dev_graphs:
        def dev_fn(tensors: Params) -> float:
            loss, _ = batch_loss_and_grads_sequence(
                graph, params.with_tensors(tensors), dev_annots, norm_dev, topo=topo)
            return loss

    best, log = run_adam_training(
        params.tensors, len(train_graphs), batch_fn, config=config,
        batch_size=batch_size, dev_loss_fn=dev_fn)
    return params.with_tensors(best), log


class GgsnnSequenceModel(BaseEstimator):
    """Estimator-style wrapper: fit on annotation maps and target sequences."""

    _variant = "ggsnn"

    def __init__(self, graph: KnowledgeGraph | None = None, hidden_size: int = 16,
                 n_steps: int = 4, lr: float = 0.001, l2_lambda: float = 0.0,
                 max_epochs: int = 500, patience: int = 20, batch_size: int = 32,
                 max_decode_steps: int = DEFAULT_MAX_STEPS, random_state: int = 0):
        self.graph = graph
        self.hidden_size = hidden_size
        self.n_steps = n_steps
        self.lr = lr
        self.l2_lambda = l2_lambda
        self.max_epochs = max_epochs
        self.patience = patience
        self.batch_size = batch_size
        self.max_decode_steps = max_decode_steps
        self.random_state = random_state

    def fit(self, X, y, X_dev=None, y_dev=None):
        graph = self.graph if self.graph is not None else build_default_graph()
        self.graph_ = graph
        config = TrainingConfig(hidden_size=self.hidden_size, lr=self.lr,
                                dropout_p=0.0, l2_lambda=self.l2_lambda,
                                max_epochs=self.max_epochs, patience=self.patience,
                                seed=self.random_state)
        train_graphs = [attach_annotations(graph, m) for m in X]
        dev_graphs = [attach_annotations(graph, m) for m in X_dev] if X_dev else []
        dev_targets = list(y_dev) if y_dev else []
        self.params_, self.log_ = train_ggsnn(
            train_graphs, list(y), dev_graphs, dev_targets, config,
            n_steps=self.n_steps, batch_size=self.batch_size)
        return self

    def predict(self, X) -> list[SequenceOutput]:
        if not hasattr(self, "params_"):
            raise NotFittedError("GgsnnSequenceModel is not fitted yet")
        out = []
        for mapping in X:
            annotated = attach_annotations(self.graph_, mapping)
            out.append(predict_sequence(annotated, self.params_,
                                        max_steps=self.max_decode_steps))
        return out
