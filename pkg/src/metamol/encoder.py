"""Molecular graph neural network: message passing, readout, and heads.

Per layer, each node aggregates neighbor states combined with the incident
edge states (elementwise mean in the concat-and-project mode, elementwise
sum in GIN mode), then projects the concatenation of its previous state and
the aggregate through a weight matrix and a LeakyReLU. Final-layer node
states are L2-normalized; the graph embedding is their mean. Three heads sit
on top: a two-class property MLP, an inner-product bond score, and a
118-class atom-type MLP over pooled context states.

Batches of graphs are packed into one block-diagonal computation driven by
constant sparse operators, so a whole support or query set is one forward
pass. The per-node operations are the contractual API and double as the
oracle the batched path is tested against.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse

from . import autodiff as ad
from .autodiff import ParameterSet, SparseLinear, Tensor
from .molgraph import VOCAB, EmbeddingTables
from .smiles import MolecularGraph


class EmptyGraph(ValueError):
    pass


class EmptyContext(ValueError):
    pass


class Aggregator(enum.Enum):
    PAPER_CONCAT = "paper_concat"
    GIN_SUM = "gin_sum"


@dataclass
class EncoderConfig:
    num_layers: int = 5
    hidden_dim: int = 300
    leaky_slope: float = 0.01
    aggregator: Aggregator = Aggregator.PAPER_CONCAT

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.hidden_dim < 2 or self.hidden_dim % 2:
            raise ValueError("hidden_dim must be even (feature halves are concatenated)")


def _uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
             shape: tuple[int, ...]) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> ParameterSet:
    """Seeded scaled-uniform initialization of every named parameter.

    Embedding tables use lookup fans (one row feeds the network per index),
    not the table's row count, so initial features have a usable spread.
    """
    d = cfg.hidden_dim
    half = d // 2
    arrays: dict[str, np.ndarray] = {
        "atom_number_table": _uniform(rng, 1, half, (VOCAB.atom_type_count, half)),
        "chirality_table": _uniform(rng, 1, half, (VOCAB.chirality_count, half)),
        "bond_type_table": _uniform(rng, 1, half, (VOCAB.bond_type_count, half)),
        "bond_direction_table": _uniform(rng, 1, half,
                                         (VOCAB.bond_direction_count, half)),
    }
    for layer in range(cfg.num_layers):
        arrays[f"layer_{layer}.weight"] = _uniform(rng, 2 * d, d, (d, 2 * d))
    arrays["property_head.w1"] = _uniform(rng, d, d, (d, d))
    arrays["property_head.b1"] = np.zeros(d)
    arrays["property_head.w2"] = _uniform(rng, d, 2, (2, d))
    arrays["property_head.b2"] = np.zeros(2)
    arrays["atom_head.w1"] = _uniform(rng, d, d, (d, d))
    arrays["atom_head.b1"] = np.zeros(d)
    arrays["atom_head.w2"] = _uniform(rng, d, VOCAB.atom_type_count,
                                      (VOCAB.atom_type_count, d))
    arrays["atom_head.b2"] = np.zeros(VOCAB.atom_type_count)
    arrays["attention.weight"] = _uniform(rng, d, 1, (d,))
    return ParameterSet.from_arrays(arrays)


def tables_from_params(params: ParameterSet) -> EmbeddingTables:
    return EmbeddingTables(
        atom_number_table=params["atom_number_table"],
        chirality_table=params["chirality_table"],
        bond_type_table=params["bond_type_table"],
        bond_direction_table=params["bond_direction_table"],
    )


# ---------------------------------------------------------------------------
# per-node operations (contractual API, also the oracle for the batched path)


def aggregate_neighborhood(graph: MolecularGraph, v: int, node_states: Tensor,
                           edge_states: Tensor,
                           aggregator: Aggregator = Aggregator.PAPER_CONCAT) -> Tensor:
    """Combine neighbor and incident-edge states for one atom.

    Each neighbor contributes (h_u + h_e); PAPER_CONCAT averages the
    contributions, GIN_SUM adds them. An empty neighborhood yields zeros.
    """
    d = node_states.shape[1]
    entries = graph.adjacency[v]
    if not entries:
        return ad.constant(np.zeros(d))
    total = None
    for u, b in entries:
        h_u = ad.reshape(ad.gather_rows(node_states, [u]), (d,))
        h_e = ad.reshape(ad.gather_rows(edge_states, [b]), (d,))
        term = ad.add(h_u, h_e)
        total = term if total is None else ad.add(total, term)
    if aggregator is Aggregator.PAPER_CONCAT:
        return ad.scale(total, 1.0 / len(entries))
    return total


def layer_update(h_prev: Tensor, agg: Tensor, weight: Tensor, slope: float = 0.01) -> Tensor:
    """One message-passing update: LeakyReLU(W . concat(h_prev, agg))."""
    return ad.leaky_relu(ad.matmul(weight, ad.concat(h_prev, agg, axis=0)), slope)


def graph_embedding(node_vectors: Tensor) -> Tensor:
    """Mean of the final-layer node vectors."""
    if node_vectors.ndim != 2 or node_vectors.shape[0] == 0:
        raise EmptyGraph(f"expected a non-empty [n, d] matrix, got shape {node_vectors.shape}")
    return ad.mean(node_vectors, axis=0)


def _mlp2(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, slope: float) -> Tensor:
    return ad.linear(ad.leaky_relu(ad.linear(x, w1, b1), slope), w2, b2)


def predict_property(h_graph: Tensor, params: ParameterSet,
                     cfg: EncoderConfig) -> Tensor:
    """Two-class logits from a graph embedding (vector) or a batch of them."""
    expected = params["property_head.w1"].shape[1]
    if h_graph.shape[-1] != expected:
        raise ad.ShapeMismatch(f"embedding width {h_graph.shape[-1]}, head expects {expected}")
    return _mlp2(h_graph, params["property_head.w1"], params["property_head.b1"],
                 params["property_head.w2"], params["property_head.b2"], cfg.leaky_slope)


def predict_bond(h_u: Tensor, h_v: Tensor) -> Tensor:
    """Raw bond reconstruction score: the inner product of two node states."""
    return ad.inner(h_u, h_v)


def predict_atom_type(context_vectors: Tensor, params: ParameterSet,
                      cfg: EncoderConfig) -> Tensor:
    """118-class logits from mean-pooled context node states."""
    if context_vectors.ndim != 2 or context_vectors.shape[0] == 0:
        raise EmptyContext("atom type prediction needs at least one context vector")
    pooled = ad.mean(context_vectors, axis=0)
    return _mlp2(pooled, params["atom_head.w1"], params["atom_head.b1"],
                 params["atom_head.w2"], params["atom_head.b2"], cfg.leaky_slope)


# ---------------------------------------------------------------------------
# batched path


# Per-graph index arrays, memoized by graph identity: graphs are immutable
# and reappear in many episode batches. Keeping a reference to the graph in
# the value pins its id, so stale-key collisions cannot occur.
_GRAPH_ARRAYS: dict[int, tuple[MolecularGraph, dict[str, np.ndarray]]] = {}


def _graph_arrays(g: MolecularGraph) -> dict[str, np.ndarray]:
    key = id(g)
    hit = _GRAPH_ARRAYS.get(key)
    if hit is not None and hit[0] is g:
        return hit[1]
    src, dst, dir_bond = [], [], []
    for bi, b in enumerate(g.bonds):
        src.extend((b.u, b.v))
        dst.extend((b.v, b.u))
        dir_bond.extend((bi, bi))
    arrays = {
        "an": np.array([a.atomic_number - 1 for a in g.atoms], dtype=np.intp),
        "ct": np.array([a.chirality.value for a in g.atoms], dtype=np.intp),
        "bt": np.array([b.bond_type.value for b in g.bonds], dtype=np.intp),
        "bd": np.array([b.direction.value for b in g.bonds], dtype=np.intp),
        "src": np.array(src, dtype=np.intp),
        "dst": np.array(dst, dtype=np.intp),
        "dir_bond": np.array(dir_bond, dtype=np.intp),
    }
    _GRAPH_ARRAYS[key] = (g, arrays)
    return arrays


@dataclass
class GraphBatch:
    """Constant packing of a list of graphs for block-diagonal forwards."""

    graphs: list[MolecularGraph]
    aggregator: Aggregator = Aggregator.PAPER_CONCAT
    sizes: np.ndarray = field(init=False)
    offsets: np.ndarray = field(init=False)
    atom_an_idx: np.ndarray = field(init=False)
    atom_ct_idx: np.ndarray = field(init=False)
    bond_bt_idx: np.ndarray = field(init=False)
    bond_bd_idx: np.ndarray = field(init=False)
    src_idx: np.ndarray = field(init=False)
    dir_bond_idx: np.ndarray = field(init=False)
    src_expand_op: SparseLinear = field(init=False)
    edge_expand_op: SparseLinear = field(init=False)
    agg_op: SparseLinear = field(init=False)
    readout_op: SparseLinear = field(init=False)

    def __post_init__(self):
        if not self.graphs:
            raise EmptyGraph("a graph batch needs at least one graph")
        per_graph = [_graph_arrays(g) for g in self.graphs]
        self.sizes = np.array([g.num_atoms for g in self.graphs], dtype=np.intp)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        bond_counts = np.array([g.num_bonds for g in self.graphs], dtype=np.intp)
        bond_offsets = np.concatenate([[0], np.cumsum(bond_counts)])
        total_nodes = int(self.offsets[-1])

        self.atom_an_idx = np.concatenate([a["an"] for a in per_graph])
        self.atom_ct_idx = np.concatenate([a["ct"] for a in per_graph])
        self.bond_bt_idx = np.concatenate([a["bt"] for a in per_graph])
        self.bond_bd_idx = np.concatenate([a["bd"] for a in per_graph])
        self.src_idx = np.concatenate(
            [a["src"] + self.offsets[i] for i, a in enumerate(per_graph)])
        self.dir_bond_idx = np.concatenate(
            [a["dir_bond"] + bond_offsets[i] for i, a in enumerate(per_graph)])
        dst = np.concatenate([a["dst"] + self.offsets[i] for i, a in enumerate(per_graph)])

        if self.aggregator is Aggregator.PAPER_CONCAT:
            degree = np.bincount(dst, minlength=total_nodes).astype(np.float64)
            inv_deg = np.divide(1.0, degree, out=np.zeros_like(degree), where=degree > 0)
            weights = inv_deg[dst]
        else:
            weights = np.ones(len(dst))
        n_dir = len(dst)
        self.agg_op = SparseLinear(scipy.sparse.csr_matrix(
            (weights, (dst, np.arange(n_dir))), shape=(total_nodes, n_dir)))
        total_bonds = int(bond_offsets[-1])
        self.src_expand_op = SparseLinear(scipy.sparse.csr_matrix(
            (np.ones(n_dir), (np.arange(n_dir), self.src_idx)),
            shape=(n_dir, total_nodes)))
        self.edge_expand_op = SparseLinear(scipy.sparse.csr_matrix(
            (np.ones(n_dir), (np.arange(n_dir), self.dir_bond_idx)),
            shape=(n_dir, max(total_bonds, 1))))

        graph_of_node = np.repeat(np.arange(len(self.graphs)), self.sizes)
        self.readout_op = SparseLinear(scipy.sparse.csr_matrix(
            (1.0 / self.sizes[graph_of_node], (graph_of_node, np.arange(total_nodes))),
            shape=(len(self.graphs), total_nodes)))

    @property
    def num_nodes(self) -> int:
        return int(self.offsets[-1])

    def global_index(self, graph_pos: int, atom_index: int) -> int:
        return int(self.offsets[graph_pos]) + atom_index


def encode_batch(batch: GraphBatch, params: ParameterSet,
                 cfg: EncoderConfig) -> tuple[Tensor, Tensor]:
    """Run the full encoder over a packed batch.

    Returns (normalized node states [total_nodes, d], graph embeddings [G, d]).
    Intermediate layers are raw; only the final layer is normalized.
    """
    h = ad.concat(ad.gather_rows(params["atom_number_table"], batch.atom_an_idx),
                  ad.gather_rows(params["chirality_table"], batch.atom_ct_idx), axis=1)
    has_edges = len(batch.dir_bond_idx) > 0
    if has_edges:
        e = ad.concat(ad.gather_rows(params["bond_type_table"], batch.bond_bt_idx),
                      ad.gather_rows(params["bond_direction_table"], batch.bond_bd_idx), axis=1)
    for layer in range(cfg.num_layers):
        if has_edges:
            agg = ad.sparse_message_aggregate(h, e, batch.src_expand_op,
                                              batch.edge_expand_op, batch.agg_op)
        else:
            agg = ad.constant(np.zeros((batch.num_nodes, cfg.hidden_dim)))
        stacked = ad.concat(h, agg, axis=1)
        h = ad.leaky_relu(ad.matmul_t(stacked, params[f"layer_{layer}.weight"]),
                          cfg.leaky_slope)
    normalized = ad.l2_normalize_rows(h)
    embeddings = ad.sparse_matmul(batch.readout_op, normalized)
    return normalized, embeddings


def encode_nodes(graph: MolecularGraph, params: ParameterSet,
                 cfg: EncoderConfig) -> Tensor:
    """Per-atom final representations for a single graph ([n, d], rows unit
    or exactly zero)."""
    node_states, _ = encode_batch(GraphBatch([graph], cfg.aggregator), params, cfg)
    return node_states


def property_logits_batch(graph_embeddings: Tensor, params: ParameterSet,
                          cfg: EncoderConfig) -> Tensor:
    return predict_property(graph_embeddings, params, cfg)


def atom_logits_batch(pooled_contexts: Tensor, params: ParameterSet,
                      cfg: EncoderConfig) -> Tensor:
    """118-class logits for pre-pooled context rows [C, d]."""
    return _mlp2(pooled_contexts, params["atom_head.w1"], params["atom_head.b1"],
                 params["atom_head.w2"], params["atom_head.b2"], cfg.leaky_slope)


def bond_scores_batch(node_states: Tensor, u_idx: np.ndarray, v_idx: np.ndarray) -> Tensor:
    """Inner-product scores for node index pairs, vectorized over pairs."""
    left = ad.gather_rows(node_states, u_idx)
    right = ad.gather_rows(node_states, v_idx)
    return ad.reduce_sum(ad.mul(left, right), axis=1)
