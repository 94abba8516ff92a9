"""Gated graph network: the same neighborhood aggregation, GRU updates.

Aggregation parameters are keyed by (edge kind, direction) only, giving
exactly eight weight/bias pairs, and node states are updated by a gated
recurrent unit over a fixed number of unrolled steps.  The readout matches
the basic network's.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import DivergenceError
from .graph import (Direction, EdgeKind, KnowledgeGraph, STATE_DAMAGED)
from .gnn import (BasicGnnClassifier, DEFAULT_STEPS, _Topology, _node_onehot,
                  _readout_backward, _readout_forward, _to_class_index,
                  _check_same_structure, build_topology, edge_dir_key,
                  graph_label_vocab, stack_annotations, stack_annotation_batch)
from .numerics import (EpochLog, Params, TrainingConfig, cross_entropy_batch,
                       dropout_mask, glorot_init, l2_penalty, run_adam_training,
                       seed_streams, sigmoid, softmax)

NodeStates = dict[int, np.ndarray]

#: All (edge kind, direction) aggregation keys, fixed regardless of graph.
AGG_KEYS = tuple(edge_dir_key(kind, direction)
                 for kind in EdgeKind for direction in Direction)


@dataclass(frozen=True)
class GruParameters:
    """Update gate, reset gate, and candidate transforms (a, h_prev) -> h."""

    wz: np.ndarray
    uz: np.ndarray
    bz: np.ndarray
    wr: np.ndarray
    ur: np.ndarray
    br: np.ndarray
    wh: np.ndarray
    uh: np.ndarray
    bh: np.ndarray


def gru_update(gru: GruParameters, h_prev: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Standard GRU cell; works on vectors or stacked (..., H) arrays."""
    h_prev = np.asarray(h_prev, dtype=float)
    a = np.asarray(a, dtype=float)
    if h_prev.shape != a.shape:
        raise ValueError(f"shape mismatch: h_prev {h_prev.shape} vs a {a.shape}")
    if h_prev.shape[-1] != gru.wz.shape[0]:
        raise ValueError(
            f"state width {h_prev.shape[-1]} does not match GRU size {gru.wz.shape[0]}")
    z = sigmoid(a @ gru.wz + h_prev @ gru.uz + gru.bz)
    r = sigmoid(a @ gru.wr + h_prev @ gru.ur + gru.br)
    candidate = np.tanh(a @ gru.wh + (r * h_prev) @ gru.uh + gru.bh)
    return (1.0 - z) * h_prev + z * candidate


def init_gated_tensors(annot_dim: int, hidden_size: int,
                       rng: np.random.Generator) -> Params:
    """Aggregation, GRU, and input-projection tensors in a fixed draw order."""
    h = hidden_size
    tensors: Params = {"in_proj": glorot_init(annot_dim, h, rng)}
    for key in AGG_KEYS:
        tensors[f"agg_w:{key}"] = glorot_init(h, h, rng)
        tensors[f"agg_b:{key}"] = np.zeros(h)
    for gate in ("z", "r", "h"):
        tensors[f"gru_w{gate}"] = glorot_init(h, h, rng)
        tensors[f"gru_u{gate}"] = glorot_init(h, h, rng)
        tensors[f"gru_b{gate}"] = np.zeros(h)
    return tensors


def gru_view(tensors: Params, prefix: str = "") -> GruParameters:
    return GruParameters(
        wz=tensors[f"{prefix}gru_wz"], uz=tensors[f"{prefix}gru_uz"],
        bz=tensors[f"{prefix}gru_bz"], wr=tensors[f"{prefix}gru_wr"],
        ur=tensors[f"{prefix}gru_ur"], br=tensors[f"{prefix}gru_br"],
        wh=tensors[f"{prefix}gru_wh"], uh=tensors[f"{prefix}gru_uh"],
        bh=tensors[f"{prefix}gru_bh"])


@dataclass(frozen=True)
class GatedGnnParameters:
    """Tensors for one gated network plus its readout."""

    hidden_size: int
    n_steps: int
    annot_dim: int
    label_vocab: tuple[str, ...]
    tensors: Params

    @classmethod
    def init(cls, graph: KnowledgeGraph, annot_dim: int, hidden_size: int = 16,
             n_steps: int = DEFAULT_STEPS, seed: int | np.random.Generator = 0,
             ) -> "GatedGnnParameters":
        if n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        rng = np.random.default_rng(seed) if isinstance(seed, int) else seed
        vocab = graph_label_vocab(graph)
        tensors = init_gated_tensors(annot_dim, hidden_size, rng)
        tensors["ro_w1"] = glorot_init(hidden_size + len(vocab), hidden_size, rng)
        tensors["ro_b1"] = np.zeros(hidden_size)
        tensors["ro_w2"] = glorot_init(hidden_size, 2, rng)
        tensors["ro_b2"] = np.zeros(2)
        return cls(hidden_size=hidden_size, n_steps=n_steps, annot_dim=annot_dim,
                   label_vocab=vocab, tensors=tensors)

    @property
    def gru(self) -> GruParameters:
        return gru_view(self.tensors)

    def with_tensors(self, tensors: Params) -> "GatedGnnParameters":
        return replace(self, tensors=tensors)


def _forward_gated(topo: _Topology, tensors: Params, annots: np.ndarray,
                   n_steps: int, prefix: str = ""):
    """Forward pass returning all states and per-step GRU caches."""
    state = annots @ tensors[f"{prefix}in_proj"]
    states = [state]
    caches = []
    for step in range(n_steps):
        agg = np.zeros_like(state)
        for key, group in topo.groups.items():
            sent = group.gather @ state
            agg = agg + group.scatter @ (
                sent @ tensors[f"{prefix}agg_w:{key}"] + tensors[f"{prefix}agg_b:{key}"])
        z = sigmoid(agg @ tensors[f"{prefix}gru_wz"] + state @ tensors[f"{prefix}gru_uz"]
                    + tensors[f"{prefix}gru_bz"])
        r = sigmoid(agg @ tensors[f"{prefix}gru_wr"] + state @ tensors[f"{prefix}gru_ur"]
                    + tensors[f"{prefix}gru_br"])
        candidate = np.tanh(agg @ tensors[f"{prefix}gru_wh"]
                            + (r * state) @ tensors[f"{prefix}gru_uh"]
                            + tensors[f"{prefix}gru_bh"])
        new_state = (1.0 - z) * state + z * candidate
        if not np.all(np.isfinite(new_state)):
            raise DivergenceError(f"non-finite node state at step {step + 1}",
                                  iteration=step + 1)
        states.append(new_state)
        caches.append((agg, z, r, candidate))
        state = new_state
    return states, caches


def _backward_gated(topo: _Topology, tensors: Params, states, caches,
                    d_final: np.ndarray, prefix: str = "",
                    ) -> tuple[Params, np.ndarray]:
    """Gradients of all gated tensors plus the initial-state gradient."""
    grads: Params = {}
    for key in topo.groups:
        grads[f"{prefix}agg_w:{key}"] = np.zeros_like(tensors[f"{prefix}agg_w:{key}"])
        grads[f"{prefix}agg_b:{key}"] = np.zeros_like(tensors[f"{prefix}agg_b:{key}"])
    for gate in ("z", "r", "h"):
        for part in ("w", "u", "b"):
            name = f"{prefix}gru_{part}{gate}"
            grads[name] = np.zeros_like(tensors[name])
    d_state = d_final
    for step in reversed(range(len(caches))):
        prev = states[step]
        agg, z, r, candidate = caches[step]
        d_z = d_state * (candidate - prev)
        d_candidate = d_state * z
        d_prev = d_state * (1.0 - z)
        d_agg = np.zeros_like(agg)

        d_c = d_candidate * (1.0 - candidate ** 2)
        d_agg += d_c @ tensors[f"{prefix}gru_wh"].T
        grads[f"{prefix}gru_wh"] += np.tensordot(agg, d_c, axes=([0, 1], [0, 1]))
        reset_prev = r * prev
        grads[f"{prefix}gru_uh"] += np.tensordot(reset_prev, d_c, axes=([0, 1], [0, 1]))
        grads[f"{prefix}gru_bh"] += d_c.sum(axis=(0, 1))
        d_reset_prev = d_c @ tensors[f"{prefix}gru_uh"].T
        d_r = d_reset_prev * prev
        d_prev = d_prev + d_reset_prev * r

        d_z_pre = d_z * z * (1.0 - z)
        d_agg += d_z_pre @ tensors[f"{prefix}gru_wz"].T
        d_prev = d_prev + d_z_pre @ tensors[f"{prefix}gru_uz"].T
        grads[f"{prefix}gru_wz"] += np.tensordot(agg, d_z_pre, axes=([0, 1], [0, 1]))
        grads[f"{prefix}gru_uz"] += np.tensordot(prev, d_z_pre, axes=([0, 1], [0, 1]))
        grads[f"{prefix}gru_bz"] += d_z_pre.sum(axis=(0, 1))

        d_r_pre = d_r * r * (1.0 - r)
        d_agg += d_r_pre @ tensors[f"{prefix}gru_wr"].T
        d_prev = d_prev + d_r_pre @ tensors[f"{prefix}gru_ur"].T
        grads[f"{prefix}gru_wr"] += np.tensordot(agg, d_r_pre, axes=([0, 1], [0, 1]))
        grads[f"{prefix}gru_ur"] += np.tensordot(prev, d_r_pre, axes=([0, 1], [0, 1]))
        grads[f"{prefix}gru_br"] += d_r_pre.sum(axis=(0, 1))

        for key, group in topo.groups.items():
            d_group = group.scatter.T @ d_agg
            sent = group.gather @ prev
            grads[f"{prefix}agg_w:{key}"] += np.tensordot(
                sent, d_group, axes=([0, 1], [0, 1]))
            grads[f"{prefix}agg_b:{key}"] += d_group.sum(axis=(0, 1))
            d_prev = d_prev + group.gather.T @ (
                d_group @ tensors[f"{prefix}agg_w:{key}"].T)
        d_state = d_prev
    return grads, d_state


def ggnn_propagate(graph: KnowledgeGraph, params: GatedGnnParameters,
                   annotations: Mapping[int, np.ndarray] | None = None) -> NodeStates:
    """Run the fixed number of aggregation + GRU steps; returns final states."""
    if annotations is not None:
        graph = replace(graph, annotations=dict(annotations))
    topo = build_topology(graph, keying="edge_dir")
    annots = stack_annotations(graph, topo)
    states, _ = _forward_gated(topo, params.tensors, annots, params.n_steps)
    final = states[-1][0]
    return {node_id: final[i].copy() for i, node_id in enumerate(topo.node_ids)}


def predict_single_gated(graph: KnowledgeGraph, params: GatedGnnParameters,
                         ) -> tuple[str, np.ndarray]:
    """Health decision at the damaged-state node, as with the basic network."""
    from .gnn import readout as basic_readout
    for tensor in params.tensors.values():
        if not np.all(np.isfinite(tensor)):
            raise ValueError("parameters contain non-finite values")
    states = ggnn_propagate(graph, params)
    node = graph.node_by_name(STATE_DAMAGED)
    scores = basic_readout(params, states[node.id], graph.label_of(node.id))  # type: ignore[arg-type]
    probs = softmax(scores)
    decision = "damaged" if scores[1] > scores[0] else "healthy"
    return decision, probs


def batch_loss_and_grads_gated(graph: KnowledgeGraph, params: GatedGnnParameters,
                               annots: np.ndarray, targets: np.ndarray, *,
                               topo: _Topology | None = None,
                               readout_mask: np.ndarray | None = None,
                               l2_lambda: float = 0.0) -> tuple[float, Params]:
    """Mean cross entropy at the damaged-state node through the GRU unrolling."""
    topo = topo or build_topology(graph, keying="edge_dir")
    target_node = graph.node_by_name(STATE_DAMAGED).id
    states, caches = _forward_gated(topo, params.tensors, annots, params.n_steps)
    onehot = _node_onehot(params, graph, target_node)  # type: ignore[arg-type]
    node_pos = topo.pos[target_node]
    scores, ro_cache = _readout_forward(
        params.tensors, states[-1][:, node_pos, :], onehot, readout_mask)
    loss, d_scores = cross_entropy_batch(scores, targets)
    grads_ro, d_state_node = _readout_backward(
        params.tensors, ro_cache, d_scores, readout_mask, params.hidden_size)
    d_final = np.zeros_like(states[-1])
    d_final[:, node_pos, :] = d_state_node
    grads, d_init = _backward_gated(topo, params.tensors, states, caches, d_final)
    grads["in_proj"] = np.tensordot(annots, d_init, axes=([0, 1], [0, 1]))
    grads.update(grads_ro)
    if l2_lambda > 0:
        weights = {k: w for k, w in params.tensors.items() if w.ndim >= 2}
        _, l2_grads = l2_penalty(weights, l2_lambda)
        for key, g in l2_grads.items():
            grads[key] = grads[key] + g
    return loss, grads


def train_ggnn(train_graphs: Sequence[KnowledgeGraph], train_labels: Sequence,
               dev_graphs: Sequence[KnowledgeGraph], dev_labels: Sequence,
               config: TrainingConfig, n_steps: int = DEFAULT_STEPS,
               batch_size: int = 32) -> tuple[GatedGnnParameters, list[EpochLog]]:
    """Training loop for the gated variant; mirrors :func:`gnn.train_gnn`."""
    if not train_graphs:
        raise ValueError("training set must be non-empty")
    _check_same_structure(list(train_graphs) + list(dev_graphs))
    graph = train_graphs[0]
    topo = build_topology(graph, keying="edge_dir")
    init_rng = seed_streams(config.seed)[0]
    params = GatedGnnParameters.init(
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
        return batch_loss_and_grads_gated(
            graph, params.with_tensors(tensors), train_annots[idx],
            train_targets[idx], topo=topo, readout_mask=mask,
            l2_lambda=config.l2_lambda)

    dev_fn = None
    if dev_graphs:
        def dev_fn(tensors: Params) -> float:
            loss, _ = batch_loss_and_grads_gated(
                graph, params.with_tensors(tensors), dev_annots, dev_targets,
                topo=topo)
            return loss

    best, log = run_adam_training(
        params.tensors, len(train_graphs), batch_fn, config=config,
        batch_size=batch_size, dev_loss_fn=dev_fn)
    return params.with_tensors(best), log


def predict_batch_gated(graph: KnowledgeGraph, params: GatedGnnParameters,
                        annotation_maps: Sequence[Mapping[str, np.ndarray]],
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized prediction over one graph; class 0 is healthy."""
    from .graph import attach_annotations
    topo = build_topology(graph, keying="edge_dir")
    annotated = [attach_annotations(graph, m) for m in annotation_maps]
    annots = stack_annotation_batch(annotated, topo)
    states, _ = _forward_gated(topo, params.tensors, annots, params.n_steps)
    node = graph.node_by_name(STATE_DAMAGED)
    onehot = _node_onehot(params, graph, node.id)  # type: ignore[arg-type]
    scores, _ = _readout_forward(
        params.tensors, states[-1][:, topo.pos[node.id], :], onehot)
    probs = softmax(scores, axis=1)
    classes = (scores[:, 1] > scores[:, 0]).astype(int)
    return classes, probs


class GatedGnnClassifier(BasicGnnClassifier):
    """Drop-in gated variant of :class:`BasicGnnClassifier`."""

    _variant = "ggnn"

    def _train(self, train_graphs, train_y, dev_graphs, dev_y, config):
        return train_ggnn(train_graphs, train_y, dev_graphs, dev_y, config,
                          n_steps=self.n_steps, batch_size=self.batch_size)

    def predict_proba(self, X):
        self._check_fitted()
        _, probs = predict_batch_gated(self.graph_, self.params_, X)
        return probs

    def predict(self, X):
        self._check_fitted()
        classes, _ = predict_batch_gated(self.graph_, self.params_, X)
        return self.classes_[classes]
