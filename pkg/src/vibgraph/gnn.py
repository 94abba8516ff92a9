"""Node-embedding graph network with per-relation affine aggregation.

Each propagation step replaces a node's state by the sum, over incoming and
outgoing neighbors, of tanh(W x + b), where the (W, b) pair is selected by
the label triple (receiver kind, edge kind with direction, sender kind).
After a fixed number of steps, a two-layer readout with a log-sigmoid
hidden layer classifies the damaged-state node as healthy or damaged.

All heavy math is batched: node states live in (batch, node, hidden)
arrays, and per-triple edge groups are applied with small dense
gather/scatter matrices so results are independent of edge order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .errors import DivergenceError
from .graph import (Direction, EdgeKind, KnowledgeGraph, NodeKind,
                    STATE_DAMAGED, build_default_graph)
from .numerics import (EpochLog, Params, TrainingConfig, cross_entropy_batch,
                       dropout_mask, glorot_init, l2_penalty, log_sigmoid,
                       run_adam_training, seed_streams, sigmoid, softmax)

NodeStates = dict[int, np.ndarray]

DEFAULT_STEPS = 4


@dataclass(frozen=True)
class _EdgeGroup:
    """Directed edge instances sharing one parameter key."""

    recv: np.ndarray
    send: np.ndarray
    scatter: np.ndarray  # (V, E) 0/1, receiver rows
    gather: np.ndarray   # (E, V) 0/1, sender rows


@dataclass(frozen=True)
class _Topology:
    """Precomputed propagation structure of one graph."""

    node_ids: tuple[int, ...]
    pos: dict[int, int]
    groups: dict[str, _EdgeGroup]

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)


def triple_key(recv_kind: NodeKind, edge_kind: EdgeKind, direction: Direction,
               send_kind: NodeKind) -> str:
    return f"{recv_kind.value}|{edge_kind.value}|{direction.value}|{send_kind.value}"


def edge_dir_key(edge_kind: EdgeKind, direction: Direction) -> str:
    return f"{edge_kind.value}|{direction.value}"


def build_topology(graph: KnowledgeGraph, keying: str = "triple") -> _Topology:
    """Group directed edge instances by parameter key.

    ``keying="triple"`` keys on (receiver kind, edge kind, direction, sender
    kind); ``keying="edge_dir"`` keys on (edge kind, direction) only.
    """
    node_ids = tuple(sorted(n.id for n in graph.nodes))
    pos = {node_id: i for i, node_id in enumerate(node_ids)}
    kind = {n.id: n.kind for n in graph.nodes}
    instances: dict[str, list[tuple[int, int]]] = {}
    for edge in graph.edges:
        u, w = edge.source, edge.target
        if keying == "triple":
            key_in = triple_key(kind[w], edge.kind, Direction.IN, kind[u])
            key_out = triple_key(kind[u], edge.kind, Direction.OUT, kind[w])
        elif keying == "edge_dir":
            key_in = edge_dir_key(edge.kind, Direction.IN)
            key_out = edge_dir_key(edge.kind, Direction.OUT)
        else:
            raise ValueError(f"unknown keying {keying!r}")
        instances.setdefault(key_in, []).append((pos[w], pos[u]))
        instances.setdefault(key_out, []).append((pos[u], pos[w]))
    n_nodes = len(node_ids)
    groups: dict[str, _EdgeGroup] = {}
    for key in sorted(instances):
        pairs = sorted(instances[key])
        recv = np.asarray([p[0] for p in pairs], dtype=int)
        send = np.asarray([p[1] for p in pairs], dtype=int)
        scatter = np.zeros((n_nodes, recv.shape[0]))
        scatter[recv, np.arange(recv.shape[0])] = 1.0
        gather = np.zeros((send.shape[0], n_nodes))
        gather[np.arange(send.shape[0]), send] = 1.0
        groups[key] = _EdgeGroup(recv=recv, send=send, scatter=scatter, gather=gather)
    return _Topology(node_ids=node_ids, pos=pos, groups=groups)


def graph_label_vocab(graph: KnowledgeGraph) -> tuple[str, ...]:
    """Sorted (kind, name) labels used for the readout one-hot."""
    return tuple(sorted(f"{n.kind.value}|{n.name}" for n in graph.nodes))


@dataclass(frozen=True)
class GnnParameters:
    """Trainable tensors plus the structural metadata they were built for."""

    hidden_size: int
    n_steps: int
    annot_dim: int
    triples: tuple[str, ...]
    label_vocab: tuple[str, ...]
    tensors: Params

    @classmethod
    def init(cls, graph: KnowledgeGraph, annot_dim: int, hidden_size: int = 16,
             n_steps: int = DEFAULT_STEPS, seed: int | np.random.Generator = 0,
             ) -> "GnnParameters":
        """Glorot-initialized parameters covering every triple in the graph."""
        if n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        rng = np.random.default_rng(seed) if isinstance(seed, int) else seed
        topo = build_topology(graph, keying="triple")
        triples = tuple(sorted(topo.groups))
        vocab = graph_label_vocab(graph)
        h = hidden_size
        tensors: Params = {"in_proj": glorot_init(annot_dim, h, rng)}
        for key in triples:
            tensors[f"agg_w:{key}"] = glorot_init(h, h, rng)
            tensors[f"agg_b:{key}"] = np.zeros(h)
        tensors["ro_w1"] = glorot_init(h + len(vocab), h, rng)
        tensors["ro_b1"] = np.zeros(h)
        tensors["ro_w2"] = glorot_init(h, 2, rng)
        tensors["ro_b2"] = np.zeros(2)
        return cls(hidden_size=h, n_steps=n_steps, annot_dim=annot_dim,
                   triples=triples, label_vocab=vocab, tensors=tensors)

    def with_tensors(self, tensors: Params) -> "GnnParameters":
        return replace(self, tensors=tensors)


def stack_annotations(graph: KnowledgeGraph, topo: _Topology) -> np.ndarray:
    """Annotations of one graph as a (1, V, D) array in topology order."""
    if not graph.annotations:
        raise ValueError("graph carries no annotations; attach them first")
    missing = [i for i in topo.node_ids if i not in graph.annotations]
    if missing:
        raise ValueError(f"nodes {missing} carry no annotation")
    return np.stack([graph.annotations[i] for i in topo.node_ids])[None, :, :]


def stack_annotation_batch(graphs: Sequence[KnowledgeGraph],
                           topo: _Topology) -> np.ndarray:
    return np.concatenate([stack_annotations(g, topo) for g in graphs], axis=0)


def _forward_states(topo: _Topology, tensors: Params, annots: np.ndarray,
                    n_steps: int) -> tuple[list[np.ndarray], list[dict[str, np.ndarray]]]:
    """All intermediate states plus the tanh activations per step and triple."""
    state = annots @ tensors["in_proj"]
    states = [state]
    caches: list[dict[str, np.ndarray]] = []
    for step in range(n_steps):
        new_state = np.zeros_like(state)
        cache: dict[str, np.ndarray] = {}
        for key, group in topo.groups.items():
            weight = tensors.get(f"agg_w:{key}")
            if weight is None:
                raise KeyError(f"no aggregation parameters for label triple {key!r}")
            sent = group.gather @ state
            messages = np.tanh(sent @ weight + tensors[f"agg_b:{key}"])
            new_state = new_state + group.scatter @ messages
            cache[key] = messages
        if not np.all(np.isfinite(new_state)):
            raise DivergenceError(f"non-finite node state at step {step + 1}",
                                  iteration=step + 1)
        states.append(new_state)
        caches.append(cache)
        state = new_state
    return states, caches


def _backward_states(topo: _Topology, tensors: Params, states: list[np.ndarray],
                     caches: list[dict[str, np.ndarray]], d_final: np.ndarray,
                     ) -> tuple[Params, np.ndarray]:
    """Gradients of aggregation tensors and of the initial state."""
    grads: Params = {}
    for key in topo.groups:
        grads[f"agg_w:{key}"] = np.zeros_like(tensors[f"agg_w:{key}"])
        grads[f"agg_b:{key}"] = np.zeros_like(tensors[f"agg_b:{key}"])
    d_state = d_final
    for step in reversed(range(len(caches))):
        prev = states[step]
        d_prev = np.zeros_like(d_state)
        for key, group in topo.groups.items():
            messages = caches[step][key]
            d_messages = group.scatter.T @ d_state
            d_pre = d_messages * (1.0 - messages ** 2)
            sent = group.gather @ prev
            grads[f"agg_w:{key}"] += np.tensordot(d_pre, sent, axes=([0, 1], [0, 1])).T
            grads[f"agg_b:{key}"] += d_pre.sum(axis=(0, 1))
            d_prev = d_prev + group.gather.T @ (d_pre @ tensors[f"agg_w:{key}"].T)
        d_state = d_prev
    return grads, d_state


def _node_onehot(params: GnnParameters, graph: KnowledgeGraph, node_id: int,
                 ) -> np.ndarray:
    label = "|".join(graph.label_of(node_id))
    try:
        index = params.label_vocab.index(label)
    except ValueError:
        raise KeyError(f"label {label!r} missing from the readout vocabulary") from None
    onehot = np.zeros(len(params.label_vocab))
    onehot[index] = 1.0
    return onehot


def _readout_forward(tensors: Params, state: np.ndarray, onehot: np.ndarray,
                     mask: np.ndarray | None = None):
    batch = state.shape[0]
    inputs = np.concatenate([state, np.tile(onehot, (batch, 1))], axis=1)
    pre = inputs @ tensors["ro_w1"] + tensors["ro_b1"]
    hidden = log_sigmoid(pre)
    dropped = hidden if mask is None else hidden * mask
    scores = dropped @ tensors["ro_w2"] + tensors["ro_b2"]
    return scores, (inputs, pre, dropped)


def _readout_backward(tensors: Params, cache, d_scores: np.ndarray,
                      mask: np.ndarray | None, hidden_size: int,
                      ) -> tuple[Params, np.ndarray]:
    inputs, pre, dropped = cache
    grads: Params = {
        "ro_w2": dropped.T @ d_scores,
        "ro_b2": d_scores.sum(axis=0),
    }
    d_hidden = d_scores @ tensors["ro_w2"].T
    if mask is not None:
        d_hidden = d_hidden * mask
    d_pre = d_hidden * sigmoid(-pre)
    grads["ro_w1"] = inputs.T @ d_pre
    grads["ro_b1"] = d_pre.sum(axis=0)
    d_state = (d_pre @ tensors["ro_w1"].T)[:, :hidden_size]
    return grads, d_state


def batch_loss_and_grads(graph: KnowledgeGraph, params: GnnParameters,
                         annots: np.ndarray, targets: np.ndarray, *,
                         topo: _Topology | None = None,
                         readout_mask: np.ndarray | None = None,
                         l2_lambda: float = 0.0) -> tuple[float, Params]:
    """Mean cross-entropy at the damaged-state node, plus L2 on the matrices.

    The returned loss excludes the L2 term; the gradients include it.
    """
    topo = topo or build_topology(graph, keying="triple")
    target_node = graph.node_by_name(STATE_DAMAGED).id
    states, caches = _forward_states(topo, params.tensors, annots, params.n_steps)
    onehot = _node_onehot(params, graph, target_node)
    node_pos = topo.pos[target_node]
    scores, ro_cache = _readout_forward(
        params.tensors, states[-1][:, node_pos, :], onehot, readout_mask)
    loss, d_scores = cross_entropy_batch(scores, targets)
    grads_ro, d_state_node = _readout_backward(
        params.tensors, ro_cache, d_scores, readout_mask, params.hidden_size)
    d_final = np.zeros_like(states[-1])
    d_final[:, node_pos, :] = d_state_node
    grads_agg, d_init = _backward_states(topo, params.tensors, states, caches, d_final)
    grads: Params = {"in_proj": np.tensordot(annots, d_init, axes=([0, 1], [0, 1]))}
    grads.update(grads_agg)
    grads.update(grads_ro)
    if l2_lambda > 0:
        weights = {k: w for k, w in params.tensors.items() if w.ndim >= 2}
        _, l2_grads = l2_penalty(weights, l2_lambda)
        for key, g in l2_grads.items():
            grads[key] = grads[key] + g
    return loss, grads


# ---------------------------------------------------------------------------
# Single-graph operations.

def init_states(graph: KnowledgeGraph, params: GnnParameters) -> NodeStates:
    """Initial states: the input projection applied to each annotation."""
    topo = build_topology(graph, keying="triple")
    annots = stack_annotations(graph, topo)
    state = (annots @ params.tensors["in_proj"])[0]
    return {node_id: state[i].copy() for i, node_id in enumerate(topo.node_ids)}


def propagate_step(graph: KnowledgeGraph, params: GnnParameters,
                   states: NodeStates) -> NodeStates:
    """One aggregation step over all label triples present in the graph."""
    topo = build_topology(graph, keying="triple")
    missing = [i for i in topo.node_ids if i not in states]
    if missing:
        raise ValueError(f"states missing for nodes {missing}")
    stacked = np.stack([states[i] for i in topo.node_ids])[None, :, :]
    out = np.zeros_like(stacked)
    for key, group in topo.groups.items():
        weight = params.tensors.get(f"agg_w:{key}")
        if weight is None:
            raise KeyError(f"no aggregation parameters for label triple {key!r}")
        sent = group.gather @ stacked
        out = out + group.scatter @ np.tanh(sent @ weight + params.tensors[f"agg_b:{key}"])
    return {node_id: out[0, i].copy() for i, node_id in enumerate(topo.node_ids)}


def embed(graph: KnowledgeGraph, params: GnnParameters) -> NodeStates:
    """Run the configured number of propagation steps from the initial states."""
    topo = build_topology(graph, keying="triple")
    annots = stack_annotations(graph, topo)
    states, _ = _forward_states(topo, params.tensors, annots, params.n_steps)
    final = states[-1][0]
    return {node_id: final[i].copy() for i, node_id in enumerate(topo.node_ids)}


def readout(params: GnnParameters, state: np.ndarray,
            label: tuple[str, str]) -> np.ndarray:
    """Class scores for one node state and its (kind, name) label."""
    state = np.asarray(state, dtype=float)
    if state.shape != (params.hidden_size,):
        raise ValueError(
            f"state must have shape ({params.hidden_size},), got {state.shape}")
    key = "|".join(label)
    try:
        index = params.label_vocab.index(key)
    except ValueError:
        raise KeyError(f"label {key!r} missing from the readout vocabulary") from None
    onehot = np.zeros(len(params.label_vocab))
    onehot[index] = 1.0
    scores, _ = _readout_forward(params.tensors, state[None, :], onehot)
    return scores[0]


def predict_single(graph: KnowledgeGraph, params: GnnParameters,
                   ) -> tuple[str, np.ndarray]:
    """Health decision read out at the damaged-state node.

    Returns the predicted state value ("healthy" or "damaged") and the two
    class probabilities; exact ties resolve to healthy.
    """
    for tensor in params.tensors.values():
        if not np.all(np.isfinite(tensor)):
            raise ValueError("parameters contain non-finite values")
    states = embed(graph, params)
    node = graph.node_by_name(STATE_DAMAGED)
    scores = readout(params, states[node.id], graph.label_of(node.id))
    probs = softmax(scores)
    decision = "damaged" if scores[1] > scores[0] else "healthy"
    return decision, probs


# ---------------------------------------------------------------------------
# Training.

def _to_class_index(label) -> int:
    from .signals import HealthState
    if isinstance(label, HealthState):
        return 0 if label is HealthState.HEALTHY else 1
    if isinstance(label, str):
        return 0 if HealthState(label) is HealthState.HEALTHY else 1
    index = int(label)
    if index not in (0, 1):
        raise ValueError(f"class index must be 0 or 1, got {label!r}")
    return index


def _check_same_structure(graphs: Sequence[KnowledgeGraph]) -> None:
    first = graphs[0]
    signature = (tuple((n.id, n.kind, n.name) for n in first.nodes),
                 tuple(sorted((e.source, e.target, e.kind.value) for e in first.edges)))
    for g in graphs[1:]:
        other = (tuple((n.id, n.kind, n.name) for n in g.nodes),
                 tuple(sorted((e.source, e.target, e.kind.value) for e in g.edges)))
        if other != signature:
            raise ValueError("all graphs in a training set must share one structure")


def train_gnn(train_graphs: Sequence[KnowledgeGraph], train_labels: Sequence,
              dev_graphs: Sequence[KnowledgeGraph], dev_labels: Sequence,
              config: TrainingConfig, n_steps: int = DEFAULT_STEPS,
              batch_size: int = 32) -> tuple[GnnParameters, list[EpochLog]]:
    """Minibatch Adam training with early stopping on the dev loss.

    The backward pass is manual and is exercised against finite differences
    in the test suite.  Dropout applies to the readout hidden layer only, so
    propagation stays deterministic.  Returns the parameters at the best dev
    loss and the per-epoch loss log.
    """
    if not train_graphs:
        raise ValueError("training set must be non-empty")
    _check_same_structure(list(train_graphs) + list(dev_graphs))
    graph = train_graphs[0]
    topo = build_topology(graph, keying="triple")
    init_rng = seed_streams(config.seed)[0]
    params = GnnParameters.init(
        graph, annot_dim=graph.annotation_dim, hidden_size=config.hidden_size,
        n_steps=n_steps, seed=init_rng)
    train_annots = stack_annotation_batch(train_graphs, topo)
    train_targets = np.asarray([_to_class_index(y) for y in train_labels], dtype=int)
    if dev_graphs:
        dev_annots = stack_annotation_batch(dev_graphs, topo)
        dev_targets = np.asarray([_to_class_index(y) for y in dev_labels], dtype=int)

    def batch_fn(tensors: Params, idx: np.ndarray,
                 dropout_rng: np.random.Generator) -> tuple[float, Params]:
        mask = None
        if config.dropout_p > 0:
            mask = dropout_mask((len(idx), config.hidden_size), config.dropout_p,
                                dropout_rng, training=True)
        return batch_loss_and_grads(
            graph, params.with_tensors(tensors), train_annots[idx],
            train_targets[idx], topo=topo, readout_mask=mask,
            l2_lambda=config.l2_lambda)

    dev_fn = None
    if dev_graphs:
        def dev_fn(tensors: Params) -> float:
            loss, _ = batch_loss_and_grads(
                graph, params.with_tensors(tensors), dev_annots, dev_targets,
                topo=topo)
            return loss

    best, log = run_adam_training(
        params.tensors, len(train_graphs), batch_fn, config=config,
        batch_size=batch_size, dev_loss_fn=dev_fn)
    return params.with_tensors(best), log


def predict_batch(graph: KnowledgeGraph, params: GnnParameters,
                  annotation_maps: Sequence[Mapping[str, np.ndarray]],
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized prediction for many annotation maps over one graph.

    Returns (class indices, probabilities); class 0 is healthy.
    """
    from .graph import attach_annotations
    topo = build_topology(graph, keying="triple")
    annotated = [attach_annotations(graph, m) for m in annotation_maps]
    annots = stack_annotation_batch(annotated, topo)
    states, _ = _forward_states(topo, params.tensors, annots, params.n_steps)
    node = graph.node_by_name(STATE_DAMAGED)
    onehot = _node_onehot(params, graph, node.id)
    scores, _ = _readout_forward(
        params.tensors, states[-1][:, topo.pos[node.id], :], onehot)
    probs = softmax(scores, axis=1)
    classes = (scores[:, 1] > scores[:, 0]).astype(int)
    return classes, probs


class BasicGnnClassifier(ClassifierMixin, BaseEstimator):
    """Scikit-learn style wrapper for the triple-keyed graph network.

    ``X`` is a sequence of per-example mappings from sensor name to feature
    vector; ``y`` holds health states ("healthy"/"damaged",
    :class:`HealthState`, or 0/1).  The turbine graph is fixed per
    estimator; only the annotations vary between examples.
    """

    _variant = "gnn"

    def __init__(self, graph: KnowledgeGraph | None = None, hidden_size: int = 16,
                 n_steps: int = DEFAULT_STEPS, lr: float = 0.001,
                 dropout_p: float = 0.2, l2_lambda: float = 0.05,
                 max_epochs: int = 1000, patience: int = 20, batch_size: int = 32,
                 validation_fraction: float = 0.2, random_state: int = 0):
        self.graph = graph
        self.hidden_size = hidden_size
        self.n_steps = n_steps
        self.lr = lr
        self.dropout_p = dropout_p
        self.l2_lambda = l2_lambda
        self.max_epochs = max_epochs
        self.patience = patience
        self.batch_size = batch_size
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _config(self) -> TrainingConfig:
        return TrainingConfig(hidden_size=self.hidden_size, lr=self.lr,
                              dropout_p=self.dropout_p, l2_lambda=self.l2_lambda,
                              max_epochs=self.max_epochs, patience=self.patience,
                              seed=self.random_state)

    def _train(self, train_graphs, train_y, dev_graphs, dev_y, config):
        return train_gnn(train_graphs, train_y, dev_graphs, dev_y, config,
                         n_steps=self.n_steps, batch_size=self.batch_size)

    def fit(self, X, y, X_dev=None, y_dev=None):
        from .graph import attach_annotations
        graph = self.graph if self.graph is not None else build_default_graph()
        self.graph_ = graph
        labels = [_to_class_index(v) for v in y]
        annotated = [attach_annotations(graph, m) for m in X]
        if X_dev is not None:
            dev_graphs = [attach_annotations(graph, m) for m in X_dev]
            dev_labels = [_to_class_index(v) for v in y_dev]
            train_graphs, train_labels = annotated, labels
        elif self.validation_fraction > 0:
            n_dev = max(1, int(math.floor(len(annotated) * self.validation_fraction)))
            order = np.random.default_rng(self.random_state).permutation(len(annotated))
            dev_idx, train_idx = order[:n_dev], order[n_dev:]
            train_graphs = [annotated[i] for i in train_idx]
            train_labels = [labels[i] for i in train_idx]
            dev_graphs = [annotated[i] for i in dev_idx]
            dev_labels = [labels[i] for i in dev_idx]
        else:
            train_graphs, train_labels, dev_graphs, dev_labels = annotated, labels, [], []
        self.params_, self.log_ = self._train(
            train_graphs, train_labels, dev_graphs, dev_labels, self._config())
        self.classes_ = np.array(["healthy", "damaged"])
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet")

    def predict_proba(self, X):
        self._check_fitted()
        _, probs = predict_batch(self.graph_, self.params_, X)
        return probs

    def predict(self, X):
        self._check_fitted()
        classes, _ = predict_batch(self.graph_, self.params_, X)
        return self.classes_[classes]
