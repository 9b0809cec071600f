"""Initial node/edge embeddings and structural samplers.

Node features are (atom number, chirality tag); edge features are
(bond type, bond direction). Initial representations concatenate the two
table lookups per node/edge. The samplers draw positive/negative atom
pairs for bond reconstruction and l-hop context neighborhoods for atom
type prediction, deterministically under an explicit RNG stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, gather_rows, reshape
from .smiles import Atom, Bond, MolecularGraph


class IndexOutOfRange(ValueError):
    pass


class NoBonds(ValueError):
    """Graph has no bonds: caller skips the bond reconstruction loss."""


class NoNegativesAvailable(ValueError):
    """Graph is complete: caller skips the bond reconstruction loss."""


@dataclass(frozen=True)
class FeatureVocab:
    atom_type_count: int = 118
    chirality_count: int = 4
    bond_type_count: int = 4
    bond_direction_count: int = 3


VOCAB = FeatureVocab()


@dataclass
class EmbeddingTables:
    """Lookup tables for the four feature families.

    Row counts follow the vocabulary; atom/chirality widths sum to the
    node dimension and bond type/direction widths to the edge dimension.
    """

    atom_number_table: Tensor
    chirality_table: Tensor
    bond_type_table: Tensor
    bond_direction_table: Tensor

    def __post_init__(self):
        expect = [
            (self.atom_number_table, VOCAB.atom_type_count, "atom_number_table"),
            (self.chirality_table, VOCAB.chirality_count, "chirality_table"),
            (self.bond_type_table, VOCAB.bond_type_count, "bond_type_table"),
            (self.bond_direction_table, VOCAB.bond_direction_count, "bond_direction_table"),
        ]
        for tensor, rows, name in expect:
            if tensor.shape[0] != rows:
                raise ValueError(f"{name} must have {rows} rows, got {tensor.shape[0]}")

    @property
    def node_dim(self) -> int:
        return self.atom_number_table.shape[1] + self.chirality_table.shape[1]

    @property
    def edge_dim(self) -> int:
        return self.bond_type_table.shape[1] + self.bond_direction_table.shape[1]


@dataclass
class BondPairSample:
    positives: list[tuple[int, int]]
    negatives: list[tuple[int, int]]


@dataclass
class ContextSample:
    center: int
    context: list[int]
    target_atomic_number: int


def init_node_embedding(atom: Atom, tables: EmbeddingTables) -> Tensor:
    """Concatenate the atom-number and chirality table rows for one atom."""
    if not 1 <= atom.atomic_number <= VOCAB.atom_type_count:
        raise IndexOutOfRange(f"atomic number {atom.atomic_number} outside vocabulary")
    an_row = gather_rows(tables.atom_number_table, [atom.atomic_number - 1])
    ct_row = gather_rows(tables.chirality_table, [atom.chirality.value])
    return reshape(concat(an_row, ct_row, axis=1), (tables.node_dim,))


def init_edge_embedding(bond: Bond, tables: EmbeddingTables) -> Tensor:
    """Concatenate the bond-type and bond-direction table rows for one bond."""
    bt_row = gather_rows(tables.bond_type_table, [bond.bond_type.value])
    bd_row = gather_rows(tables.bond_direction_table, [bond.direction.value])
    return reshape(concat(bt_row, bd_row, axis=1), (tables.edge_dim,))


def sample_bond_pairs(graph: MolecularGraph, n_pos: int, n_neg: int,
                      rng: np.random.Generator) -> BondPairSample:
    """Sample existing bonds and absent atom pairs, without replacement.

    Counts clamp to availability. Rejection sampling covers the sparse
    common case; a full non-edge enumeration is the fallback so the
    sampler stays uniform on dense graphs.
    """
    n = graph.num_atoms
    if graph.num_bonds == 0:
        raise NoBonds("graph has no bonds to reconstruct")
    bond_pairs = [(b.u, b.v) for b in graph.bonds]
    k_pos = min(n_pos, len(bond_pairs))
    chosen = rng.choice(len(bond_pairs), size=k_pos, replace=False)
    positives = [bond_pairs[i] for i in sorted(chosen)]

    negatives: list[tuple[int, int]] = []
    if n_neg > 0:
        total_pairs = n * (n - 1) // 2
        n_non_edges = total_pairs - graph.num_bonds
        if n_non_edges == 0:
            raise NoNegativesAvailable("graph is complete; no negative pairs exist")
        want = min(n_neg, n_non_edges)
        bond_set = set(bond_pairs)
        seen: set[tuple[int, int]] = set()
        draws = rng.integers(0, n, size=(50 * n_neg, 2))
        for u, v in draws:
            if u == v:
                continue
            pair = (int(min(u, v)), int(max(u, v)))
            if pair in bond_set or pair in seen:
                continue
            seen.add(pair)
            negatives.append(pair)
            if len(negatives) == want:
                break
        if len(negatives) < want:
            remaining = [(u, v) for u in range(n) for v in range(u + 1, n)
                         if (u, v) not in bond_set and (u, v) not in seen]
            extra = rng.choice(len(remaining), size=want - len(negatives), replace=False)
            negatives.extend(remaining[i] for i in sorted(extra))
    return BondPairSample(positives=positives, negatives=negatives)


def _l_hop_neighborhood(graph: MolecularGraph, center: int, hops: int) -> list[int]:
    seen = {center}
    frontier = [center]
    for _ in range(hops):
        nxt = []
        for v in frontier:
            for u in graph.neighbors(v):
                if u not in seen:
                    seen.add(u)
                    nxt.append(u)
        frontier = nxt
    seen.discard(center)
    return sorted(seen)


def sample_context_nodes(graph: MolecularGraph, fraction: float, hops: int,
                         rng: np.random.Generator) -> list[ContextSample]:
    """Pick center atoms and their l-hop contexts for atom type prediction.

    The center count is round(fraction * n) with a floor of one; isolated
    atoms are never chosen as centers. Returns an empty list when every
    atom is isolated, which callers treat as a skip signal.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if hops < 1:
        raise ValueError(f"hop count must be >= 1, got {hops}")
    n = graph.num_atoms
    eligible = [v for v in range(n) if graph.adjacency[v]]
    if not eligible:
        return []
    want = max(1, int(np.floor(fraction * n + 0.5)))
    want = min(want, len(eligible))
    chosen = rng.choice(len(eligible), size=want, replace=False)
    samples = []
    for i in sorted(chosen):
        center = eligible[i]
        samples.append(ContextSample(
            center=center,
            context=_l_hop_neighborhood(graph, center, hops),
            target_atomic_number=graph.atoms[center].atomic_number,
        ))
    return samples
