import numpy as np
import pytest

import metamol.autodiff as ad
from metamol.autodiff import GradMode, ParameterSet, Tensor
from metamol.data import build_episode, generate_synthetic, split_tasks
from metamol.encoder import EncoderConfig, init_params
from metamol.losses import LossWeights
from metamol.meta import (AblationFlags, EmptySupport, EmptyTaskBatch, InsufficientData,
                          MetaConfig, SslConfig, TrainResult, adapt_to_support,
                          evaluate_joint, inner_update, meta_test, meta_train,
                          outer_update, prepare_graph_set, task_attention,
                          task_embedding)
from metamol.metrics import roc_auc

ENC = EncoderConfig(num_layers=2, hidden_dim=8)
WEIGHTS = LossWeights()


@pytest.fixture(scope="module")
def dataset():
    return generate_synthetic(4, 30, np.random.default_rng(0))


@pytest.fixture()
def prepared_support(dataset):
    episode = build_episode(dataset, 0, 2, 4, np.random.default_rng(1))
    return prepare_graph_set(episode.support, ENC, SslConfig(), np.random.default_rng(2))


def fresh_params(seed=0):
    return init_params(ENC, np.random.default_rng(seed))


class TestInnerUpdate:
    def test_alpha_zero_is_bitwise_identity(self, prepared_support):
        params = fresh_params()
        adapted, _ = inner_update(params, prepared_support, ENC, WEIGHTS, 5, 0.0)
        assert adapted is not params
        assert params.equals_bitwise(adapted)

    def test_input_never_mutated(self, prepared_support):
        params = fresh_params()
        snapshot = {name: t.value.copy() for name, t in params.items()}
        inner_update(params, prepared_support, ENC, WEIGHTS, 3, 0.1)
        for name, t in params.items():
            assert np.array_equal(t.value, snapshot[name])

    def test_five_steps_equal_composed_single_steps(self, prepared_support):
        params = fresh_params()
        five, _ = inner_update(params, prepared_support, ENC, WEIGHTS, 5, 0.05)
        stepped = params
        for _ in range(5):
            stepped, _ = inner_update(stepped, prepared_support, ENC, WEIGHTS, 1, 0.05)
        assert five.equals_bitwise(stepped)

    def test_one_dimensional_analytic_surrogate(self):
        # theta' = theta - alpha * dL/dtheta with L = theta^2: 1 - 0.1*2 = 0.8
        params = ParameterSet.from_arrays({"theta": np.array(1.0)})
        with ad.Tape() as tape:
            loss = ad.mul(params["theta"], params["theta"])
        grads = ad.grads_for(params, ad.backward(tape, loss))
        from metamol.meta import apply_gradient
        adapted = apply_gradient(params, grads, 0.1)
        assert abs(float(adapted["theta"].value) - 0.8) < 1e-15

    def test_descent_with_halving_schedule(self, prepared_support):
        params = fresh_params(3)
        alpha = 0.4
        for _ in range(12):
            losses = []
            adapted = params
            ok = True
            for _ in range(5):
                with ad.no_trace():
                    before, _ = evaluate_joint(adapted, prepared_support, ENC, WEIGHTS)
                losses.append(float(before.joint.value))
                adapted, _ = inner_update(adapted, prepared_support, ENC, WEIGHTS, 1, alpha)
            with ad.no_trace():
                final, _ = evaluate_joint(adapted, prepared_support, ENC, WEIGHTS)
            losses.append(float(final.joint.value))
            ok = all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
            if ok:
                break
            alpha *= 0.5
        assert ok, f"support loss not monotone even at alpha={alpha}"


class TestTaskEmbeddingAndAttention:
    def test_single_support_molecule(self):
        row = np.random.default_rng(0).standard_normal((1, 8))
        np.testing.assert_array_equal(task_embedding(Tensor(row)).value, row[0])

    def test_opposite_embeddings_cancel(self):
        e = np.random.default_rng(1).standard_normal(8)
        out = task_embedding(Tensor(np.stack([e, -e])))
        np.testing.assert_allclose(out.value, np.zeros(8), atol=1e-15)

    def test_mean_matches_brute_force(self):
        rows = np.random.default_rng(2).standard_normal((5, 8))
        np.testing.assert_allclose(task_embedding(Tensor(rows)).value,
                                   rows.mean(axis=0), atol=1e-15)

    def test_empty_support_rejected(self):
        with pytest.raises(EmptySupport):
            task_embedding(Tensor(np.zeros((0, 8))))

    def test_identical_embeddings_uniform_weights(self):
        h = np.tile(np.random.default_rng(3).standard_normal(8), (4, 1))
        w = Tensor(np.random.default_rng(4).standard_normal(8))
        weights = task_attention(Tensor(h), w).value
        np.testing.assert_array_equal(weights, np.full(4, 0.25))

    def test_analytic_two_task_weights(self):
        w = np.zeros(8)
        w[0] = 1.0
        h = np.zeros((2, 8))
        h[1, 0] = np.log(3.0)
        weights = task_attention(Tensor(h), Tensor(w)).value
        np.testing.assert_allclose(weights, [0.25, 0.75], atol=1e-15)

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            t = int(rng.integers(1, 9))
            weights = task_attention(Tensor(rng.standard_normal((t, 8))),
                                     Tensor(rng.standard_normal(8))).value
            assert abs(weights.sum() - 1.0) < 1e-9
            assert (weights > 0).all()

    def test_shift_invariance(self):
        rng = np.random.default_rng(6)
        w = rng.standard_normal(8)
        h = rng.standard_normal((5, 8))
        shift = 3.7 * w / np.dot(w, w)  # adds 3.7 to every logit
        a = task_attention(Tensor(h), Tensor(w)).value
        b = task_attention(Tensor(h + shift), Tensor(w)).value
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_empty_batch_rejected(self):
        with pytest.raises(EmptyTaskBatch):
            task_attention(Tensor(np.zeros((0, 8))), Tensor(np.zeros(8)))


class TestOuterUpdate:
    def test_zero_gradients_leave_params_unchanged(self):
        params = fresh_params()
        zeros = [{name: np.zeros_like(t.value) for name, t in params.items()}]
        updated = outer_update(params, zeros, [1.0], 0.05)
        assert params.equals_bitwise(updated)

    def test_single_task_definition(self):
        params = fresh_params()
        rng = np.random.default_rng(7)
        grads = {name: rng.standard_normal(t.shape) for name, t in params.items()}
        updated = outer_update(params, [grads], [1.0], 0.01)
        for name, t in params.items():
            np.testing.assert_allclose(updated[name].value, t.value - 0.01 * grads[name],
                                       atol=1e-15)

    def test_uniform_weights_match_disabled_attention(self, dataset):
        split = split_tasks(dataset, ["task_3"])
        base = dict(alpha=0.1, beta=0.02, k_shot=1, episode_budget=3,
                    query_size_per_class=2, inner_steps_train=1)
        run_a = meta_train(fresh_params(), dataset, split.train_task_ids,
                           MetaConfig(**base, ablation=AblationFlags(use_task_attention=False)),
                           ENC, WEIGHTS, np.random.default_rng(8))
        run_b = meta_train(fresh_params(), dataset, split.train_task_ids,
                           MetaConfig(**base, ablation=AblationFlags(use_task_attention=False)),
                           ENC, WEIGHTS, np.random.default_rng(8))
        assert run_a.params.equals_bitwise(run_b.params)
        etas = {line.split("\t")[8] for line in run_a.log_lines[1:]}
        # the log carries 10 significant digits
        assert all(abs(float(e) - 1.0 / 3.0) < 1e-9 for e in etas)


class TestMetaTrain:
    def test_budget_zero_returns_params_unchanged(self, dataset):
        params = fresh_params()
        split = split_tasks(dataset, ["task_3"])
        cfg = MetaConfig(alpha=0.1, beta=0.01, k_shot=1, episode_budget=0)
        result = meta_train(params, dataset, split.train_task_ids, cfg, ENC, WEIGHTS,
                            np.random.default_rng(0))
        assert result.params is params
        assert result.episodes_consumed == 0

    def test_fixed_seed_is_bitwise_reproducible(self, dataset):
        split = split_tasks(dataset, ["task_3"])
        cfg = MetaConfig(alpha=0.1, beta=0.02, k_shot=1, episode_budget=9,
                         query_size_per_class=2)
        runs = []
        for _ in range(2):
            result = meta_train(fresh_params(), dataset, split.train_task_ids, cfg,
                                ENC, WEIGHTS, np.random.default_rng(9))
            runs.append(result)
        assert runs[0].params.equals_bitwise(runs[1].params)
        assert runs[0].log_lines == runs[1].log_lines

    def test_threads_do_not_change_results(self, dataset):
        split = split_tasks(dataset, ["task_3"])
        outputs = []
        for threads in (1, 3):
            cfg = MetaConfig(alpha=0.1, beta=0.02, k_shot=1, episode_budget=9,
                             query_size_per_class=2, threads=threads)
            result = meta_train(fresh_params(), dataset, split.train_task_ids, cfg,
                                ENC, WEIGHTS, np.random.default_rng(10))
            outputs.append(result)
        assert outputs[0].params.equals_bitwise(outputs[1].params)
        assert outputs[0].log_lines == outputs[1].log_lines

    def test_pooled_baseline_runs(self, dataset):
        split = split_tasks(dataset, ["task_3"])
        cfg = MetaConfig(alpha=0.1, beta=0.02, k_shot=1, episode_budget=6,
                         query_size_per_class=2,
                         ablation=AblationFlags(use_meta=False))
        result = meta_train(fresh_params(), dataset, split.train_task_ids, cfg,
                            ENC, WEIGHTS, np.random.default_rng(11))
        assert isinstance(result, TrainResult)
        assert result.episodes_consumed >= 6

    def test_insufficient_tasks_abort(self):
        tiny = generate_synthetic(2, 4, np.random.default_rng(12))
        cfg = MetaConfig(alpha=0.1, beta=0.02, k_shot=3, episode_budget=4)
        with pytest.raises(InsufficientData):
            meta_train(fresh_params(), tiny, [0, 1], cfg, ENC, WEIGHTS,
                       np.random.default_rng(13))

    def test_ablated_losses_log_zero(self, dataset):
        split = split_tasks(dataset, ["task_3"])
        cfg = MetaConfig(alpha=0.1, beta=0.02, k_shot=1, episode_budget=6,
                         query_size_per_class=2,
                         ablation=AblationFlags(use_bond_loss=False, use_atom_loss=False))
        result = meta_train(fresh_params(), dataset, split.train_task_ids, cfg,
                            ENC, WEIGHTS, np.random.default_rng(14))
        for line in result.log_lines[1:]:
            fields = line.split("\t")
            assert float(fields[5]) == 0.0 and float(fields[6]) == 0.0

    def test_second_order_mode_trains_attention_head(self, dataset):
        split = split_tasks(dataset, ["task_3"])
        base = dict(alpha=0.05, beta=0.02, k_shot=1, episode_budget=3,
                    query_size_per_class=2, inner_steps_train=1)
        for mode, should_move in ((GradMode.FIRST_ORDER, False),
                                  (GradMode.SECOND_ORDER, True)):
            params = fresh_params(15)
            before = params["attention.weight"].value.copy()
            cfg = MetaConfig(**base, meta_grad_mode=mode)
            result = meta_train(params, dataset, split.train_task_ids, cfg, ENC,
                                WEIGHTS, np.random.default_rng(16))
            moved = not np.array_equal(result.params["attention.weight"].value, before)
            assert moved == should_move


class TestMetaTest:
    def test_params_restored_bitwise(self, dataset):
        params = fresh_params()
        snapshot = {name: t.value.copy() for name, t in params.items()}
        episodes = [build_episode(dataset, 3, 1, None, np.random.default_rng(17))]
        cfg = MetaConfig(alpha=0.1, beta=0.02, k_shot=1)
        meta_test(params, episodes, cfg, ENC, WEIGHTS, np.random.default_rng(18))
        for name, t in params.items():
            assert np.array_equal(t.value, snapshot[name])

    def test_zero_steps_random_params_near_chance(self):
        # over many random initializations and >= 200 query molecules the
        # unadapted model scores at chance level
        ds = generate_synthetic(2, 240, np.random.default_rng(19))
        cfg = MetaConfig(alpha=0.1, beta=0.02, k_shot=1, inner_steps_test=0)
        aucs = []
        for seed in range(5):
            params = init_params(ENC, np.random.default_rng([20, seed]))
            episode = build_episode(ds, 1, 1, None, np.random.default_rng([21, seed]))
            scores = meta_test(params, [episode], cfg, ENC, WEIGHTS,
                               np.random.default_rng([22, seed]))[0]
            assert len(scores.labels) >= 200
            aucs.append(roc_auc(scores.probabilities, scores.labels))
        assert abs(float(np.mean(aucs)) - 0.5) < 0.1

    def test_diagnostic_adaptation_descends_support_loss(self, dataset):
        # support == query: ten adaptation steps must reduce the support loss
        params = fresh_params(23)
        episode = build_episode(dataset, 0, 2, 4, np.random.default_rng(24))
        support = prepare_graph_set(episode.support, ENC, SslConfig(),
                                    np.random.default_rng(25))
        with ad.no_trace():
            before, _ = evaluate_joint(params, support, ENC, WEIGHTS)
        adapted, _ = inner_update(params, support, ENC, WEIGHTS, 10, 0.05)
        with ad.no_trace():
            after, _ = evaluate_joint(adapted, support, ENC, WEIGHTS)
        assert float(after.joint.value) < float(before.joint.value)

    def test_adapt_to_support_zero_steps_clone(self, dataset):
        params = fresh_params()
        episode = build_episode(dataset, 3, 1, 2, np.random.default_rng(26))
        cfg = MetaConfig(alpha=0.1, beta=0.02, k_shot=1, inner_steps_test=0)
        adapted = adapt_to_support(params, episode, cfg, ENC, WEIGHTS,
                                   np.random.default_rng(27), steps=0)
        assert adapted.equals_bitwise(params)


class TestConfigValidation:
    def test_bounds(self):
        with pytest.raises(ValueError):
            MetaConfig(beta=0.0)
        with pytest.raises(ValueError):
            MetaConfig(inner_steps_train=0)
        with pytest.raises(ValueError):
            MetaConfig(k_shot=0)
        with pytest.raises(ValueError):
            MetaConfig(threads=0)
