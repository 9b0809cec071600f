"""Named gradient-correctness checks against central finite differences.

Shared by the ``gradcheck`` CLI command and the acceptance tests. Each
check returns (name, max relative error, threshold); exact cases
(quadratics, identities) use a 1e-9 threshold, finite-difference
comparisons of non-polynomial compositions use 1e-4.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse

from . import autodiff as ad
from .autodiff import GradMode, ParameterSet, SparseLinear, Tensor
from .encoder import EncoderConfig, init_params
from .losses import LossWeights
from .meta import SslConfig, evaluate_joint, prepare_graph_set
from .smiles import Atom, BondDirection, BondType, make_graph

FD_TOL = 1e-4
EXACT_TOL = 1e-9


def _params(rng: np.random.Generator, **arrays) -> ParameterSet:
    return ParameterSet.from_arrays(
        {name: rng.standard_normal(shape) if isinstance(shape, tuple)
         else rng.standard_normal(shape) for name, shape in arrays.items()})


def _op_checks(rng: np.random.Generator) -> list[tuple[str, float, float]]:
    checks: list[tuple[str, float, float]] = []

    def run(name, f, params, tol=FD_TOL, step=1e-5):
        checks.append((name, ad.grad_check(f, params, step=step), tol))

    p = _params(rng, x=(5,))
    run("quadratic_sum_of_squares", lambda q: ad.reduce_sum(ad.mul(q["x"], q["x"])), p,
        tol=EXACT_TOL)
    run("constant_function", lambda q: ad.constant(3.5), _params(rng, x=(3,)), tol=EXACT_TOL)

    p = _params(rng, a=(3, 4), b=(4, 2))
    run("matmul_matrix_matrix",
        lambda q: ad.reduce_sum(ad.mul(ad.matmul(q["a"], q["b"]),
                                       ad.matmul(q["a"], q["b"]))), p)
    p = _params(rng, a=(3, 4), v=(4,))
    run("matmul_matrix_vector",
        lambda q: ad.reduce_sum(ad.exp(ad.scale(ad.matmul(q["a"], q["v"]), 0.1))), p)
    p = _params(rng, u=(6,), v=(6,))
    run("inner_product", lambda q: ad.inner(q["u"], q["v"]), p, tol=EXACT_TOL)

    p = _params(rng, a=(4, 3), b=(4, 2))
    window_w = ad.constant(rng.standard_normal((4, 2)))
    run("concat_narrow",
        lambda q: ad.reduce_sum(ad.mul(ad.narrow(ad.concat(q["a"], q["b"], axis=1), 1, 2, 2),
                                       window_w)), p)
    p = _params(rng, a=(3, 5))
    run("mean_rows", lambda q: ad.reduce_sum(ad.exp(ad.scale(ad.mean(q["a"], axis=0), 0.3))), p)
    flat_w = ad.constant(rng.standard_normal(15))
    run("transpose_reshape",
        lambda q: ad.reduce_sum(ad.mul(ad.reshape(ad.transpose(q["a"]), (15,)), flat_w)), p)
    run("broadcast_sum",
        lambda q: ad.reduce_sum(ad.mul(ad.broadcast_to(ad.reshape(
            ad.reduce_sum(q["a"], axis=1, keepdims=True), (3, 1)), (3, 5)), q["a"])), p)

    p = _params(rng, table=(7, 4))
    idx = np.array([0, 3, 3, 6, 1])
    run("gather_scatter",
        lambda q: ad.reduce_sum(ad.mul(ad.scatter_rows(ad.gather_rows(q["table"], idx),
                                                       idx, 7), q["table"])), p)

    sparse_op = SparseLinear(scipy.sparse.csr_matrix(
        (np.ones(6), (np.array([0, 1, 1, 2, 3, 3]), np.arange(6))), shape=(4, 6)))
    p = _params(rng, x=(6, 3))
    run("sparse_matmul",
        lambda q: ad.reduce_sum(ad.exp(ad.scale(ad.sparse_matmul(sparse_op, q["x"]), 0.2))), p)

    pick_h = SparseLinear(scipy.sparse.csr_matrix(
        (np.ones(6), (np.arange(6), np.array([0, 2, 1, 4, 3, 0]))), shape=(6, 5)))
    pick_e = SparseLinear(scipy.sparse.csr_matrix(
        (np.ones(6), (np.arange(6), np.array([0, 1, 2, 0, 1, 2]))), shape=(6, 3)))
    combine = SparseLinear(scipy.sparse.csr_matrix(
        (np.full(6, 0.5), (np.array([0, 0, 1, 2, 3, 4]), np.arange(6))), shape=(5, 6)))
    p = _params(rng, h=(5, 3), e=(3, 3))
    run("sparse_message_aggregate",
        lambda q: ad.reduce_sum(ad.exp(ad.scale(ad.sparse_message_aggregate(
            q["h"], q["e"], pick_h, pick_e, combine), 0.2))), p)

    p = _params(rng, a=(3, 4), b=(5, 4))
    run("matmul_t",
        lambda q: ad.reduce_sum(ad.exp(ad.scale(ad.matmul_t(q["a"], q["b"]), 0.1))), p)
    p = _params(rng, x=(4, 3), w=(2, 3), b=(2,))
    run("linear_batch",
        lambda q: ad.reduce_sum(ad.exp(ad.scale(ad.linear(q["x"], q["w"], q["b"]), 0.2))), p)
    p = _params(rng, x=(3,), w=(2, 3), b=(2,))
    run("linear_vector",
        lambda q: ad.reduce_sum(ad.exp(ad.scale(ad.linear(q["x"], q["w"], q["b"]), 0.2))), p)
    p = _params(rng, x=(4, 6))
    row_w = ad.constant(rng.standard_normal((4, 6)))
    run("l2_normalize_rows",
        lambda q: ad.reduce_sum(ad.mul(ad.l2_normalize_rows(q["x"]), row_w)), p)

    p = _params(rng, x=(8,))
    vec_w = ad.constant(rng.standard_normal(8))
    run("leaky_relu", lambda q: ad.reduce_sum(ad.leaky_relu(q["x"], 0.01)), p)
    run("softmax_weighted",
        lambda q: ad.reduce_sum(ad.mul(ad.softmax(q["x"]), vec_w)), p)
    run("l2_normalize",
        lambda q: ad.reduce_sum(ad.mul(ad.l2_normalize(q["x"]), vec_w)), p)
    run("sigmoid_log_chain",
        lambda q: ad.reduce_sum(ad.log(ad.maximum_const(ad.sigmoid(q["x"]), 1e-12))), p)
    run("sqrt_reciprocal_chain",
        lambda q: ad.reduce_sum(ad.reciprocal(ad.sqrt(ad.add(ad.mul(q["x"], q["x"]),
                                                             ad.constant(1.0))))), p)

    p = _params(rng, logits=(4,))
    run("cross_entropy", lambda q: ad.cross_entropy(q["logits"], 2), p)
    p = _params(rng, logits=(5, 7))
    labels = np.array([0, 3, 6, 1, 2])
    run("cross_entropy_rows", lambda q: ad.mean(ad.cross_entropy_rows(q["logits"], labels)), p)
    p = _params(rng, scores=(6,))
    flags = np.array([1.0, 0, 1, 1, 0, 0])
    run("binary_cross_entropy",
        lambda q: ad.mean(ad.binary_cross_entropy(q["scores"], flags)), p)
    return checks


def _random_small_molecule(rng: np.random.Generator):
    """Random connected graph with at most 10 atoms plus one ring closure."""
    n = int(rng.integers(6, 11))
    elements = [6, 7, 8, 16, 9]
    atoms = [Atom(int(elements[i])) for i in rng.integers(0, len(elements), size=n)]
    bonds = [(int(rng.integers(0, i)), i, BondType.SINGLE, BondDirection.NONE)
             for i in range(1, n)]
    existing = {(min(u, v), max(u, v)) for u, v, _, _ in bonds}
    u, v = int(rng.integers(0, n)), int(rng.integers(0, n))
    if u != v and (min(u, v), max(u, v)) not in existing:
        bonds.append((u, v, BondType.SINGLE, BondDirection.NONE))
    return make_graph(atoms, bonds)


def _kink_margin(params: ParameterSet, prepared, cfg: EncoderConfig) -> float:
    """Smallest |LeakyReLU pre-activation| across layers.

    Central differences are invalid within a step of the kink, so the
    end-to-end check only accepts instances with a comfortable margin.
    """
    from .encoder import GraphBatch  # local import to avoid a cycle at module load
    import metamol.autodiff as adx

    batch = prepared.batch
    with adx.no_trace():
        h = adx.concat(adx.gather_rows(params["atom_number_table"], batch.atom_an_idx),
                       adx.gather_rows(params["chirality_table"], batch.atom_ct_idx), axis=1)
        e = adx.concat(adx.gather_rows(params["bond_type_table"], batch.bond_bt_idx),
                       adx.gather_rows(params["bond_direction_table"], batch.bond_bd_idx),
                       axis=1)
        margin = np.inf
        for layer in range(cfg.num_layers):
            agg = adx.sparse_message_aggregate(h, e, batch.src_expand_op,
                                               batch.edge_expand_op, batch.agg_op)
            pre = adx.matmul_t(adx.concat(h, agg, axis=1), params[f"layer_{layer}.weight"])
            margin = min(margin, float(np.abs(pre.value).min()))
            h = adx.leaky_relu(pre, cfg.leaky_slope)
    return margin


def _multi_step_fd_error(objective, params: ParameterSet,
                         steps: tuple[float, ...]) -> float:
    """Max relative error against central differences, per component taking
    the best step from a small sweep.

    One step cannot serve every component here: large-curvature components
    need a small step (truncation ~ h^2), while components attenuated below
    the 1e-8 denominator floor by deep LeakyReLU(0.01) chains need a large
    step (cancellation noise ~ eps/h).
    """
    with ad.Tape() as tape:
        loss = objective(params)
    analytic = ad.grads_for(params, ad.backward(tape, loss))

    def central(array, index, h) -> float:
        original = array[index]
        array[index] = original + h
        with ad.no_trace():
            f_plus = float(objective(params).value)
        array[index] = original - h
        with ad.no_trace():
            f_minus = float(objective(params).value)
        array[index] = original
        return (f_plus - f_minus) / (2.0 * h)

    worst = 0.0
    for name, tensor in params.items():
        grad = analytic[name]
        for index in np.ndindex(tensor.value.shape):
            a = grad[index]
            best = np.inf
            for h in steps:
                fd = central(tensor.value, index, h)
                best = min(best, abs(a - fd) / max(abs(a), abs(fd), 1e-8))
                if best < 1e-6:
                    break
            worst = max(worst, best)
    return worst


def _end_to_end_check(rng: np.random.Generator, num_layers: int) -> tuple[str, float, float]:
    """Full joint-loss gradient on a random small molecule.

    Instances are redrawn until every pre-activation sits well clear of the
    LeakyReLU kink, so the larger finite-difference step cannot cross it.
    """
    cfg = EncoderConfig(num_layers=num_layers, hidden_dim=8)
    steps = (1e-5, 3e-4)
    for _ in range(50):
        params = init_params(cfg, rng)
        graph = _random_small_molecule(rng)
        prepared = prepare_graph_set([(graph, 1)], cfg, SslConfig(), rng)
        if _kink_margin(params, prepared, cfg) > 20 * max(steps):
            break

    def objective(q: ParameterSet) -> Tensor:
        breakdown, _ = evaluate_joint(q, prepared, cfg, LossWeights())
        return breakdown.joint

    return (f"joint_loss_end_to_end_{num_layers}layer",
            _multi_step_fd_error(objective, params, steps), FD_TOL)


def _second_order_checks(rng: np.random.Generator) -> list[tuple[str, float, float]]:
    checks = []

    # 1-D analytic case: L_in = L_out = x^2/2, alpha = 0.1, x = 1.
    params = ParameterSet.from_arrays({"x": np.array(1.0)})

    def half_square(q):
        return ad.scale(ad.mul(q["x"], q["x"]), 0.5)

    g2 = ad.second_order_trace(half_square, half_square, params, 0.1, GradMode.SECOND_ORDER)
    g1 = ad.second_order_trace(half_square, half_square, params, 0.1, GradMode.FIRST_ORDER)
    checks.append(("second_order_1d_analytic", abs(float(g2["x"]) - 0.81), EXACT_TOL))
    checks.append(("first_order_1d_analytic", abs(float(g1["x"]) - 0.9), EXACT_TOL))

    # alpha = 0: both modes must coincide with the plain outer gradient.
    g2z = ad.second_order_trace(half_square, half_square, params, 0.0, GradMode.SECOND_ORDER)
    g1z = ad.second_order_trace(half_square, half_square, params, 0.0, GradMode.FIRST_ORDER)
    drift = max(abs(float(g2z["x"]) - 1.0), abs(float(g1z["x"]) - 1.0))
    checks.append(("second_order_alpha0_identity", drift, 1e-15))

    # 4-D random quadratic forms, finite differences of the composed map.
    m = rng.standard_normal((4, 4))
    a_mat = m.T @ m
    b_vec = rng.standard_normal(4)
    c_full = rng.standard_normal((4, 4))
    c_mat = 0.5 * (c_full + c_full.T)
    d_vec = rng.standard_normal(4)
    theta0 = rng.standard_normal(4)
    alpha = 0.07

    def inner_fn(q):
        x = q["theta"]
        return ad.add(ad.scale(ad.inner(x, ad.matmul(ad.constant(a_mat), x)), 0.5),
                      ad.inner(ad.constant(b_vec), x))

    def outer_fn(q):
        x = q["theta"]
        return ad.add(ad.scale(ad.inner(x, ad.matmul(ad.constant(c_mat), x)), 0.5),
                      ad.inner(ad.constant(d_vec), x))

    params4 = ParameterSet.from_arrays({"theta": theta0.copy()})
    got = ad.second_order_trace(inner_fn, outer_fn, params4, alpha,
                                GradMode.SECOND_ORDER)["theta"]

    def composed(theta: np.ndarray) -> float:
        adapted = theta - alpha * (a_mat @ theta + b_vec)
        return float(0.5 * adapted @ c_mat @ adapted + d_vec @ adapted)

    step = 1e-5
    worst = 0.0
    for i in range(4):
        probe = theta0.copy()
        probe[i] += step
        f_plus = composed(probe)
        probe[i] -= 2 * step
        f_minus = composed(probe)
        fd = (f_plus - f_minus) / (2 * step)
        worst = max(worst, abs(got[i] - fd) / max(abs(got[i]), abs(fd), 1e-8))
    checks.append(("second_order_4d_quadratic_fd", worst, FD_TOL))
    return checks


def run_gradient_checks(quick: bool = False, seed: int = 12345
                        ) -> list[tuple[str, float, float]]:
    rng = np.random.default_rng(seed)
    results = _op_checks(rng)
    results.append(_end_to_end_check(rng, num_layers=2 if quick else 5))
    results.extend(_second_order_checks(rng))
    return results
