"""Episodic meta-training and meta-testing.

Each iteration samples a batch of tasks and one episode per task. The
inner loop adapts a copy of the shared parameters by gradient descent on
the support joint loss; the outer step descends the task-weighted sum of
query joint losses. Task weights come from a softmax over scored task
embeddings (the mean of the support graph embeddings under the shared,
pre-adaptation parameters), or are uniform when attention is disabled.

The meta-gradient is first-order by default: the outer gradient is
evaluated at the adapted parameters without differentiating through the
inner steps. In second-order mode the whole iteration is traced on one
tape and the composition is differentiated exactly.

Self-supervised terms (bond reconstruction, atom type prediction) are
sampled once per episode so adaptation descends a fixed objective, and are
active in both the inner and outer loss evaluations.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse

from . import autodiff as ad
from .autodiff import GradMode, ParameterSet, SparseLinear, Tape, Tensor
from .data import Episode, MultiTaskDataset, build_episode
from .encoder import (EncoderConfig, GraphBatch, atom_logits_batch,
                      bond_scores_batch, encode_batch, property_logits_batch)
from .losses import LossBreakdown, LossWeights, atom_loss, bond_loss, joint_loss, property_loss
from .molgraph import (NoBonds, NoNegativesAvailable, sample_bond_pairs,
                       sample_context_nodes)
from .smiles import MolecularGraph

log = logging.getLogger(__name__)


class EmptySupport(ValueError):
    pass


class EmptyTaskBatch(ValueError):
    pass


class InsufficientData(ValueError):
    def __init__(self, message: str):
        super().__init__(message)


@dataclass
class AblationFlags:
    use_pretrained: bool = True
    use_meta: bool = True
    use_bond_loss: bool = True
    use_atom_loss: bool = True
    use_task_attention: bool = True


@dataclass
class SslConfig:
    n_pos: int = 5
    n_neg: int = 5
    context_fraction: float = 0.15
    hops: int = 1


@dataclass
class MetaConfig:
    alpha: float = 0.1
    beta: float = 1e-3
    beta_end: float | None = None  # linear outer-step decay target; None = constant
    inner_steps_train: int = 5
    inner_steps_test: int = 10
    k_shot: int = 1
    query_size_per_class: int = 16
    tasks_per_batch: int | None = None  # None: every training task each iteration
    meta_grad_mode: GradMode = GradMode.FIRST_ORDER
    episode_budget: int = 2000
    threads: int = 1
    ablation: AblationFlags = field(default_factory=AblationFlags)
    ssl: SslConfig = field(default_factory=SslConfig)

    def __post_init__(self):
        if self.alpha < 0 or self.beta <= 0:
            raise ValueError("step sizes must be positive (alpha may be zero only in tests)")
        if self.beta_end is not None and not 0 < self.beta_end <= self.beta:
            raise ValueError("beta_end must be in (0, beta]")
        if self.inner_steps_train < 1 or self.inner_steps_test < 0:
            raise ValueError("inner_steps_train must be >= 1 and inner_steps_test >= 0")
        if self.k_shot < 1:
            raise ValueError("k_shot must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def beta_at(self, consumed: int) -> float:
        """Outer step size after ``consumed`` episodes (linear decay)."""
        if self.beta_end is None or self.episode_budget <= 0:
            return self.beta
        frac = min(1.0, consumed / self.episode_budget)
        return self.beta + (self.beta_end - self.beta) * frac


@dataclass
class TaskWeightRecord:
    task_id: int
    embedding: np.ndarray
    weight: float


@dataclass
class PreparedGraphSet:
    """One episode side (support or query) with its fixed SSL samples."""

    batch: GraphBatch
    labels: np.ndarray
    bond_u: np.ndarray
    bond_v: np.ndarray
    bond_flags: np.ndarray
    ctx_op: SparseLinear | None
    ctx_targets: np.ndarray

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.labels), len(self.bond_flags), len(self.ctx_targets)


def prepare_graph_set(items: list[tuple[MolecularGraph, int]], enc_cfg: EncoderConfig,
                      ssl_cfg: SslConfig, rng: np.random.Generator,
                      use_bond: bool = True, use_atom: bool = True) -> PreparedGraphSet:
    """Pack labeled graphs and draw the episode's self-supervised samples.

    Graphs where bond sampling is degenerate (no bonds, or complete graph)
    simply contribute no pairs; likewise all-isolated graphs contribute no
    contexts.
    """
    graphs = [g for g, _ in items]
    labels = np.array([y for _, y in items], dtype=np.intp)
    batch = GraphBatch(graphs, enc_cfg.aggregator)
    bond_u: list[int] = []
    bond_v: list[int] = []
    bond_flags: list[int] = []
    ctx_rows: list[tuple[list[int], float]] = []
    ctx_targets: list[int] = []
    for gi, graph in enumerate(graphs):
        base = int(batch.offsets[gi])
        if use_bond:
            try:
                pairs = sample_bond_pairs(graph, ssl_cfg.n_pos, ssl_cfg.n_neg, rng)
            except (NoBonds, NoNegativesAvailable):
                pairs = None
            if pairs is not None:
                for u, v in pairs.positives:
                    bond_u.append(base + u)
                    bond_v.append(base + v)
                    bond_flags.append(1)
                for u, v in pairs.negatives:
                    bond_u.append(base + u)
                    bond_v.append(base + v)
                    bond_flags.append(0)
        if use_atom:
            for sample in sample_context_nodes(graph, ssl_cfg.context_fraction,
                                               ssl_cfg.hops, rng):
                ctx_rows.append(([base + u for u in sample.context],
                                 1.0 / len(sample.context)))
                ctx_targets.append(sample.target_atomic_number)

    ctx_op = None
    if ctx_rows:
        rows, cols, vals = [], [], []
        for r, (members, weight) in enumerate(ctx_rows):
            rows.extend([r] * len(members))
            cols.extend(members)
            vals.extend([weight] * len(members))
        ctx_op = SparseLinear(scipy.sparse.csr_matrix(
            (vals, (rows, cols)), shape=(len(ctx_rows), batch.num_nodes)))
    return PreparedGraphSet(batch=batch, labels=labels,
                            bond_u=np.array(bond_u, dtype=np.intp),
                            bond_v=np.array(bond_v, dtype=np.intp),
                            bond_flags=np.array(bond_flags, dtype=np.float64),
                            ctx_op=ctx_op,
                            ctx_targets=np.array(ctx_targets, dtype=np.intp))


def evaluate_joint(params: ParameterSet, prepared: PreparedGraphSet,
                   enc_cfg: EncoderConfig, weights: LossWeights
                   ) -> tuple[LossBreakdown, Tensor]:
    """Joint loss over a prepared graph set; also returns the graph embeddings."""
    node_states, graph_emb = encode_batch(prepared.batch, params, enc_cfg)
    label_term = property_loss(property_logits_batch(graph_emb, params, enc_cfg),
                               prepared.labels)
    edge_term = None
    if len(prepared.bond_flags):
        scores = bond_scores_batch(node_states, prepared.bond_u, prepared.bond_v)
        edge_term = bond_loss(scores, prepared.bond_flags)
    node_term = None
    if prepared.ctx_op is not None:
        pooled = ad.sparse_matmul(prepared.ctx_op, node_states)
        node_term = atom_loss(atom_logits_batch(pooled, params, enc_cfg),
                              prepared.ctx_targets)
    breakdown = joint_loss(label_term, edge_term, node_term, weights, prepared.counts)
    return breakdown, graph_emb


def apply_gradient(params: ParameterSet, grads: dict[str, np.ndarray],
                   lr: float) -> ParameterSet:
    """One plain gradient-descent step; returns fresh leaf tensors."""
    return ParameterSet({name: Tensor(t.value - lr * grads[name], requires_grad=True)
                         for name, t in params.items()})


def inner_update(params: ParameterSet, support: PreparedGraphSet,
                 enc_cfg: EncoderConfig, weights: LossWeights, steps: int,
                 alpha: float) -> tuple[ParameterSet, np.ndarray]:
    """Adapt a copy of the parameters with ``steps`` descent steps on the
    support joint loss. The input parameters are never mutated.

    Returns the adapted parameters and the support graph embeddings
    evaluated under the original parameters (the task-embedding input).
    """
    if alpha == 0.0:
        with ad.no_trace():
            _, emb = evaluate_joint(params, support, enc_cfg, weights)
        return params.clone(), emb.value
    adapted = params
    first_emb: np.ndarray | None = None
    for step in range(steps):
        with Tape() as tape:
            breakdown, emb = evaluate_joint(adapted, support, enc_cfg, weights)
        if step == 0:
            first_emb = emb.value
        grads = ad.grads_for(adapted, ad.backward(tape, breakdown.joint))
        adapted = apply_gradient(adapted, grads, alpha)
    return adapted, first_emb


def task_embedding(support_embeddings: Tensor) -> Tensor:
    """Mean of the support graph embeddings (computed pre-adaptation)."""
    if support_embeddings.ndim != 2 or support_embeddings.shape[0] == 0:
        raise EmptySupport("task embedding needs at least one support embedding")
    return ad.mean(support_embeddings, axis=0)


def task_attention(task_embeddings: Tensor, attention_weight: Tensor) -> Tensor:
    """Softmax over linearly scored task embeddings ([t, d] -> [t])."""
    if task_embeddings.ndim != 2 or task_embeddings.shape[0] == 0:
        raise EmptyTaskBatch("attention needs at least one task embedding")
    return ad.softmax(ad.matmul(task_embeddings, attention_weight))


def outer_update(params: ParameterSet, task_grads: list[dict[str, np.ndarray]],
                 etas: list[float], beta: float) -> ParameterSet:
    """Descend the eta-weighted sum of per-task query gradients."""
    if len(task_grads) != len(etas):
        raise ValueError("one weight per task gradient required")
    combined = {}
    for name, tensor in params.items():
        total = np.zeros_like(tensor.value)
        for eta, grads in zip(etas, task_grads):
            total += eta * grads[name]
        combined[name] = total
    return apply_gradient(params, combined, beta)


@dataclass
class EpisodeOutcome:
    task_id: int
    support_breakdown_counts: tuple[int, int, int]
    query_breakdown: LossBreakdown
    eta: float
    support_size: int
    query_size: int


@dataclass
class TrainResult:
    params: ParameterSet
    log_lines: list[str]
    excluded_tasks: list[int]
    episodes_consumed: int


LOG_HEADER = "# iteration\ttask\tsupport\tquery\tl_label\tl_edge\tl_node\tjoint\teta"


def _format_log_line(iteration: int, task_name: str, outcome: EpisodeOutcome) -> str:
    b = outcome.query_breakdown
    return (f"{iteration}\t{task_name}\t{outcome.support_size}\t{outcome.query_size}"
            f"\t{b.l_label:.10g}\t{b.l_edge:.10g}\t{b.l_node:.10g}"
            f"\t{float(b.joint.value):.10g}\t{outcome.eta:.10g}")


def _usable_tasks(dataset: MultiTaskDataset, task_ids: list[int], k_shot: int,
                  ) -> tuple[list[int], list[int]]:
    usable, excluded = [], []
    for task in task_ids:
        pos, neg = dataset.task_pools(task)
        if len(pos) >= k_shot + 1 and len(neg) >= k_shot + 1:
            usable.append(task)
        else:
            excluded.append(task)
            log.warning("excluding task %s: not enough labeled molecules per class",
                        dataset.task_names[task])
    return usable, excluded


def _prepare_episode(episode: Episode, enc_cfg: EncoderConfig, cfg: MetaConfig,
                     rng: np.random.Generator) -> tuple[PreparedGraphSet, PreparedGraphSet]:
    flags = cfg.ablation
    support = prepare_graph_set(episode.support, enc_cfg, cfg.ssl, rng,
                                use_bond=flags.use_bond_loss, use_atom=flags.use_atom_loss)
    query = prepare_graph_set(episode.query, enc_cfg, cfg.ssl, rng,
                              use_bond=flags.use_bond_loss, use_atom=flags.use_atom_loss)
    return support, query


def _first_order_task(params: ParameterSet, support: PreparedGraphSet,
                      query: PreparedGraphSet, enc_cfg: EncoderConfig,
                      weights: LossWeights, cfg: MetaConfig
                      ) -> tuple[dict[str, np.ndarray], LossBreakdown, np.ndarray]:
    adapted, support_emb = inner_update(params, support, enc_cfg, weights,
                                        cfg.inner_steps_train, cfg.alpha)
    with Tape() as tape:
        breakdown, _ = evaluate_joint(adapted, query, enc_cfg, weights)
    grads = ad.grads_for(adapted, ad.backward(tape, breakdown.joint))
    return grads, breakdown, support_emb.mean(axis=0)


def _attention_values(params: ParameterSet, task_embs: np.ndarray,
                      use_attention: bool) -> np.ndarray:
    t = task_embs.shape[0]
    if not use_attention:
        return np.full(t, 1.0 / t)
    with ad.no_trace():
        weights = task_attention(ad.constant(task_embs), params["attention.weight"])
    return weights.value


def _meta_iteration_first_order(params: ParameterSet, prepared: list,
                                enc_cfg: EncoderConfig, weights: LossWeights,
                                cfg: MetaConfig, pool: ThreadPoolExecutor | None,
                                lr: float) -> tuple[ParameterSet, list[EpisodeOutcome]]:
    def run(pair):
        support, query = pair
        return _first_order_task(params, support, query, enc_cfg, weights, cfg)

    if pool is not None:
        results = list(pool.map(run, [(s, q) for _, s, q in prepared]))
    else:
        results = [run((s, q)) for _, s, q in prepared]

    task_embs = np.stack([emb for _, _, emb in results])
    etas = _attention_values(params, task_embs, cfg.ablation.use_task_attention)
    grads = [g for g, _, _ in results]
    new_params = outer_update(params, grads, [float(e) for e in etas], lr)
    outcomes = [
        EpisodeOutcome(task_id=episode.task_id,
                       support_breakdown_counts=support.counts,
                       query_breakdown=breakdown, eta=float(eta),
                       support_size=len(support.labels), query_size=len(query.labels))
        for (episode, support, query), (_, breakdown, _), eta in zip(prepared, results, etas)
    ]
    return new_params, outcomes


def _meta_iteration_second_order(params: ParameterSet, prepared: list,
                                 enc_cfg: EncoderConfig, weights: LossWeights,
                                 cfg: MetaConfig, lr: float
                                 ) -> tuple[ParameterSet, list[EpisodeOutcome]]:
    with Tape() as tape:
        query_losses: list[Tensor] = []
        breakdowns: list[LossBreakdown] = []
        task_emb_rows: list[Tensor] = []
        for _, support, query in prepared:
            adapted = params
            support_emb: Tensor | None = None
            for step in range(cfg.inner_steps_train):
                breakdown, emb = evaluate_joint(adapted, support, enc_cfg, weights)
                if step == 0:
                    support_emb = emb
                step_grads = ad.backward(tape, breakdown.joint, create_graph=True)
                adapted_entries = {}
                for name, tensor in adapted.items():
                    g = step_grads.get(tensor)
                    adapted_entries[name] = tensor if g is None else \
                        ad.sub(tensor, ad.scale(g, cfg.alpha))
                adapted = ParameterSet(adapted_entries)
            q_breakdown, _ = evaluate_joint(adapted, query, enc_cfg, weights)
            query_losses.append(q_breakdown.joint)
            breakdowns.append(q_breakdown)
            task_emb_rows.append(ad.reshape(task_embedding(support_emb),
                                            (1, enc_cfg.hidden_dim)))
        stacked = task_emb_rows[0]
        for row in task_emb_rows[1:]:
            stacked = ad.concat(stacked, row, axis=0)
        if cfg.ablation.use_task_attention:
            etas = task_attention(stacked, params["attention.weight"])
        else:
            etas = ad.constant(np.full(len(prepared), 1.0 / len(prepared)))
        total: Tensor | None = None
        for i, loss_tensor in enumerate(query_losses):
            piece = ad.mul(ad.reduce_sum(ad.narrow(etas, 0, i, 1)), loss_tensor)
            total = piece if total is None else ad.add(total, piece)
    outer_grads = ad.grads_for(params, ad.backward(tape, total))
    new_params = apply_gradient(params, outer_grads, lr)
    eta_values = etas.value
    outcomes = [
        EpisodeOutcome(task_id=episode.task_id,
                       support_breakdown_counts=support.counts,
                       query_breakdown=breakdown, eta=float(eta_values[i]),
                       support_size=len(support.labels), query_size=len(query.labels))
        for i, ((episode, support, query), breakdown) in enumerate(zip(prepared, breakdowns))
    ]
    return new_params, outcomes


def _pooled_iteration(params: ParameterSet, prepared: list, enc_cfg: EncoderConfig,
                      weights: LossWeights, cfg: MetaConfig, lr: float
                      ) -> tuple[ParameterSet, list[EpisodeOutcome]]:
    """Non-meta baseline: one descent step on the loss pooled over every
    episode's support and query molecules."""
    total: Tensor | None = None
    outcomes = []
    with Tape() as tape:
        for episode, support, query in prepared:
            s_breakdown, _ = evaluate_joint(params, support, enc_cfg, weights)
            q_breakdown, _ = evaluate_joint(params, query, enc_cfg, weights)
            piece = ad.add(s_breakdown.joint, q_breakdown.joint)
            total = piece if total is None else ad.add(total, piece)
            outcomes.append(EpisodeOutcome(
                task_id=episode.task_id, support_breakdown_counts=support.counts,
                query_breakdown=q_breakdown, eta=1.0 / len(prepared),
                support_size=len(support.labels), query_size=len(query.labels)))
        total = ad.scale(total, 1.0 / len(prepared))
    grads = ad.grads_for(params, ad.backward(tape, total))
    return apply_gradient(params, grads, lr), outcomes


def meta_train(params: ParameterSet, dataset: MultiTaskDataset,
               train_task_ids: list[int], cfg: MetaConfig, enc_cfg: EncoderConfig,
               weights: LossWeights, rng: np.random.Generator) -> TrainResult:
    """Run episodic training until the episode budget is consumed.

    Tasks without k+1 molecules per class are excluded with a warning;
    fewer than two usable tasks aborts. With ``ablation.use_meta`` off the
    same episode stream trains a plain pooled gradient-descent baseline.
    """
    usable, excluded = _usable_tasks(dataset, train_task_ids, cfg.k_shot)
    if len(usable) < 2:
        raise InsufficientData(
            f"only {len(usable)} trainable tasks remain; at least 2 required")
    lines = [LOG_HEADER]
    pool = ThreadPoolExecutor(max_workers=cfg.threads) if (
        cfg.threads > 1 and cfg.meta_grad_mode is GradMode.FIRST_ORDER
        and cfg.ablation.use_meta) else None
    consumed = 0
    iteration = 0
    try:
        while consumed < cfg.episode_budget:
            if cfg.tasks_per_batch is None or cfg.tasks_per_batch >= len(usable):
                batch_tasks = usable
            else:
                picked = rng.choice(len(usable), size=cfg.tasks_per_batch, replace=False)
                batch_tasks = [usable[i] for i in sorted(picked)]
            prepared = []
            for task in batch_tasks:
                episode = build_episode(dataset, task, cfg.k_shot,
                                        cfg.query_size_per_class, rng)
                support, query = _prepare_episode(episode, enc_cfg, cfg, rng)
                prepared.append((episode, support, query))
            lr = cfg.beta_at(consumed)
            if not cfg.ablation.use_meta:
                params, outcomes = _pooled_iteration(params, prepared, enc_cfg,
                                                     weights, cfg, lr)
            elif cfg.meta_grad_mode is GradMode.SECOND_ORDER:
                params, outcomes = _meta_iteration_second_order(
                    params, prepared, enc_cfg, weights, cfg, lr)
            else:
                params, outcomes = _meta_iteration_first_order(
                    params, prepared, enc_cfg, weights, cfg, pool, lr)
            for outcome in outcomes:
                lines.append(_format_log_line(
                    iteration, dataset.task_names[outcome.task_id], outcome))
            consumed += len(batch_tasks)
            iteration += 1
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(params=params, log_lines=lines, excluded_tasks=excluded,
                       episodes_consumed=consumed)


@dataclass
class TaskScores:
    task_id: int
    probabilities: np.ndarray
    labels: np.ndarray


def adapt_to_support(params: ParameterSet, episode: Episode, cfg: MetaConfig,
                     enc_cfg: EncoderConfig, weights: LossWeights,
                     rng: np.random.Generator, steps: int) -> ParameterSet:
    """Meta-testing adaptation: descent steps on the episode's support loss."""
    support = prepare_graph_set(episode.support, enc_cfg, cfg.ssl, rng,
                                use_bond=cfg.ablation.use_bond_loss,
                                use_atom=cfg.ablation.use_atom_loss)
    if steps == 0:
        return params.clone()
    adapted, _ = inner_update(params, support, enc_cfg, weights, steps, cfg.alpha)
    return adapted


def score_molecules(params: ParameterSet, items: list[tuple[MolecularGraph, int]],
                    enc_cfg: EncoderConfig) -> np.ndarray:
    """Positive-class probabilities for labeled graphs."""
    batch = GraphBatch([g for g, _ in items], enc_cfg.aggregator)
    with ad.no_trace():
        _, graph_emb = encode_batch(batch, params, enc_cfg)
        logits = property_logits_batch(graph_emb, params, enc_cfg)
        probabilities = ad.softmax(logits, axis=1)
    return probabilities.value[:, 1]


def meta_test(params: ParameterSet, episodes: list[Episode], cfg: MetaConfig,
              enc_cfg: EncoderConfig, weights: LossWeights,
              rng: np.random.Generator) -> list[TaskScores]:
    """Adapt to each test episode's support set, then score its query set.

    The shared parameters are restored (never touched) between tasks.
    """
    results = []
    for episode in episodes:
        adapted = adapt_to_support(params, episode, cfg, enc_cfg, weights, rng,
                                   cfg.inner_steps_test)
        probabilities = score_molecules(adapted, episode.query, enc_cfg)
        results.append(TaskScores(
            task_id=episode.task_id,
            probabilities=probabilities,
            labels=np.array([y for _, y in episode.query], dtype=np.intp)))
    return results
