"""Few-shot molecular property prediction toolkit.

SMILES parsing into attribute-typed molecular graphs, a message-passing
encoder with self-supervised auxiliary heads, and gradient-based
meta-learning with task-attention weighting, all on a self-contained
reverse-mode autodiff tape.
"""

from .autodiff import GradMode, ParameterSet, Tape, Tensor
from .data import (Episode, MultiTaskDataset, TaskSplit, build_episode,
                   generate_synthetic, load_checkpoint, load_dataset,
                   save_checkpoint, split_tasks)
from .encoder import Aggregator, EncoderConfig, encode_nodes, graph_embedding, init_params
from .losses import LossBreakdown, LossWeights
from .meta import AblationFlags, MetaConfig, SslConfig, meta_test, meta_train
from .metrics import export_embeddings, roc_auc
from .smiles import (Atom, Bond, BondDirection, BondType, Chirality,
                     MolecularGraph, SmilesError, parse, parse_directional, tokenize)

__all__ = [
    "Aggregator", "AblationFlags", "Atom", "Bond", "BondDirection", "BondType",
    "Chirality", "Episode", "EncoderConfig", "GradMode", "LossBreakdown",
    "LossWeights", "MetaConfig", "MolecularGraph", "MultiTaskDataset",
    "ParameterSet", "SmilesError", "SslConfig", "Tape", "TaskSplit", "Tensor",
    "build_episode", "encode_nodes", "export_embeddings", "generate_synthetic",
    "graph_embedding", "init_params", "load_checkpoint", "load_dataset",
    "meta_test", "meta_train", "parse", "parse_directional", "roc_auc",
    "save_checkpoint", "split_tasks", "tokenize",
]

__version__ = "0.1.0"
