import math

import numpy as np
import pytest

from expquant import datagen, expansion
from expquant.errors import InvalidInputError
from expquant.quantizer import Codebooks, QuantizerConfig, assign_codes, reconstruct
from expquant.training import (AdamState, LossWeights, TrainConfig, ZeroTaskLoss, adam_step, batch_gradients,
                               codebook_loss, commit_loss, default_task_loss, evaluate_losses, grad_at_x,
                               initial_state, straight_through_grad, total_loss, train, write_loss_csv)

from oracles import central_diff, rel_err


class TestPqLosses:
    def test_identical_operands(self):
        x = np.array([[1.0, 2.0], [3.0, -1.0]])
        for fn in (codebook_loss, commit_loss):
            value, grad = fn(x, x.copy())
            assert value == 0.0 and not grad.any()

    def test_hand_value(self):
        x = [[1.0, 0.0], [0.0, 2.0]]
        e = [[0.0, 0.0], [0.0, 0.0]]
        assert codebook_loss(x, e)[0] == 2.5
        assert commit_loss(x, e)[0] == 2.5

    def test_values_agree(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            x, e = rng.normal(size=(2, 5, 3))
            assert codebook_loss(x, e)[0] == commit_loss(x, e)[0]

    @pytest.mark.parametrize("seed", range(20))
    def test_codebook_grad_fd(self, seed):
        rng = np.random.default_rng(seed)
        x, e = rng.normal(size=(2, 4, 3))
        _, grad = codebook_loss(x, e)
        assert rel_err(grad, central_diff(lambda v: codebook_loss(x, v)[0], e)) < 1e-6

    @pytest.mark.parametrize("seed", range(20))
    def test_commit_grad_fd(self, seed):
        rng = np.random.default_rng(seed)
        x, e = rng.normal(size=(2, 4, 3))
        _, grad = commit_loss(x, e)
        assert rel_err(grad, central_diff(lambda v: commit_loss(v, e)[0], x)) < 1e-6

    def test_mismatch(self):
        with pytest.raises(InvalidInputError):
            codebook_loss(np.zeros((2, 3)), np.zeros((2, 2)))

    def test_codeword_moves_toward_subvector(self):
        rng = np.random.default_rng(3)
        x, e = rng.normal(size=(2, 6, 4))
        _, grad = codebook_loss(x, e)
        stepped = e - 1e-2 * grad
        assert np.all(np.linalg.norm(stepped - x, axis=1) < np.linalg.norm(e - x, axis=1))


class TestStraightThrough:
    def test_copy(self):
        assert straight_through_grad([1, -2, 3]).tolist() == [1, -2, 3]
        assert not straight_through_grad(np.zeros(4)).any()

    def test_composition_exact(self):
        w = LossWeights(1.0, 0.25)
        g_q = np.array([0.5, -1.0, 2.0, 0.0])
        g_commit = np.array([4.0, 8.0, -4.0, 1.0])
        assert grad_at_x(g_q, g_commit, w).tolist() == [1.5, 1.0, 1.0, 0.25]

    @pytest.mark.parametrize("seed", range(5))
    def test_composition_against_fd(self, seed):
        rng = np.random.default_rng(seed)
        w = LossWeights(1.0, 0.25)
        f = rng.normal(size=(4, 3))
        x = rng.normal(size=(4, 6))
        q = rng.normal(size=(4, 6))
        offset = q - x
        M = 2

        def surrogate(v):
            task = default_task_loss(v + offset, f)[0]
            d = (v - q).reshape(4, M, 3)
            return task + w.lambda_commit * float(np.sum(d * d)) / (M * 4)

        g_task = default_task_loss(q, f)[1]
        g_commit = 2.0 / (M * 4) * (x - q)
        assert rel_err(grad_at_x(g_task, g_commit, w), central_diff(surrogate, x)) < 1e-5


class TestTotalLoss:
    def test_default_weights(self):
        assert total_loss(1.0, 2.0, 4.0, LossWeights(1.0, 0.25)) == 4.0

    def test_zero_weights(self):
        assert total_loss(1.5, 2.0, 4.0, LossWeights(0.0, 0.0)) == 1.5

    def test_zeros(self):
        assert total_loss(0.0, 0.0, 0.0, LossWeights()) == 0.0

    def test_negative_weight_rejected(self):
        with pytest.raises(InvalidInputError):
            LossWeights(-1.0, 0.25)


class TestTaskLoss:
    def test_proportional_features(self):
        f = np.array([[1.0, 2.0], [-1.0, 0.5], [0.3, 0.3]])
        q = np.array([[2.0, 4.0, 0.0], [-3.0, 1.5, 0.0], [0.1, 0.1, 0.0]])
        value, grad = default_task_loss(q, f)
        assert value == pytest.approx(0.0, abs=1e-15)
        np.testing.assert_allclose(grad, 0.0, atol=1e-15)

    def test_hand_pair(self):
        # backbone orthogonal (cos 0), outputs parallel (cos 1): two off-diagonal gaps of 1
        f = np.array([[1.0, 0.0], [0.0, 1.0]])
        q = np.array([[1.0, 1.0], [2.0, 2.0]])
        assert default_task_loss(q, f)[0] == pytest.approx(2 / 4)

    def test_hand_pair_antiparallel(self):
        f = np.array([[1.0, 0.0], [1.0, 0.0]])
        q = np.array([[1.0, 0.0], [-1.0, 0.0]])
        assert default_task_loss(q, f)[0] == pytest.approx(2 * 4 / 4)

    @pytest.mark.parametrize("seed", range(20))
    def test_grad_fd(self, seed):
        rng = np.random.default_rng(seed)
        f = rng.normal(size=(5, 4))
        q = rng.normal(size=(5, 6))
        _, grad = default_task_loss(q, f)
        assert rel_err(grad, central_diff(lambda v: default_task_loss(v, f)[0], q)) < 1e-5

    def test_batch_mismatch(self):
        with pytest.raises(InvalidInputError):
            default_task_loss(np.ones((3, 2)), np.ones((2, 2)))


class TestAdam:
    def test_zero_gradient_noop(self):
        p = {"w": np.array([1.0, -2.0])}
        adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
        assert p["w"].tolist() == [1.0, -2.0]

    def test_first_step(self):
        p = {"w": np.array([0.0])}
        state = AdamState()
        adam_step(p, {"w": np.array([1.0])}, state, lr=0.1)
        # m_hat = v_hat = 1 after bias correction
        assert p["w"][0] == pytest.approx(-0.1 / (1.0 + 1e-8), rel=1e-15)
        assert state.step == 1

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        grads = [rng.normal(size=3) for _ in range(10)]
        runs = []
        for _ in range(2):
            p, s = {"w": np.ones(3)}, AdamState()
            for g in grads:
                adam_step(p, {"w": g}, s, lr=1e-2)
            runs.append(p["w"].tobytes())
        assert runs[0] == runs[1]

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            adam_step({"w": np.ones(2)}, {"w": np.ones(3)}, AdamState(), lr=0.1)


def small_config(**kw):
    base = dict(input_dim=8, quantizer=QuantizerConfig(4, 8, 32), learning_rate=3e-3, epochs=5,
                batch_size=16, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def two_class_batch(seed=0):
    return datagen.generate(datagen.uniform_mixture(2, 8, 0.5, 40, seed))


class TestComposedStep:
    @pytest.mark.parametrize("seed", range(5))
    def test_head_and_codebook_grads_fd(self, seed):
        rng = np.random.default_rng(seed)
        cfg = QuantizerConfig(2, 3, 6)
        head = expansion.init_head(3, 6, seed)
        books = Codebooks(rng.normal(size=(2, 3, 3)), cfg)
        f = rng.normal(size=(4, 3))
        w = LossWeights(1.0, 0.25)

        class Task:
            def evaluate(self, q, b):
                return default_task_loss(q, b)

        out = batch_gradients(head, books, f, Task(), w)
        x0, _ = expansion.forward(head, f)
        q0 = reconstruct(out.codes, books)

        def surrogate(trial_head):
            x, _ = expansion.forward(trial_head, f)
            task = default_task_loss(x + (q0 - x0), f)[0]
            d = (x - q0).reshape(4, 2, 3)
            return task + w.lambda_commit * float(np.sum(d * d)) / (2 * 4)

        for name in expansion.PARAM_NAMES:
            def obj(v, name=name):
                trial = head.copy()
                trial.params[name] = v
                return surrogate(trial)
            assert rel_err(out.head[name], central_diff(obj, head.params[name])) < 1e-5, name

        def book_obj(entries):
            sel = entries[np.arange(2)[None, :], out.codes].reshape(4, 6)
            d = (x0 - sel).reshape(4, 2, 3)
            return w.lambda_codebook * float(np.sum(d * d)) / (2 * 4)

        assert rel_err(out.codebooks, central_diff(book_obj, books.entries)) < 1e-5


class TestTrain:
    def test_zero_epochs_rejected(self):
        with pytest.raises(InvalidInputError):
            small_config(epochs=0)

    def test_dim_mismatch_before_mutation(self):
        with pytest.raises(InvalidInputError):
            train(np.ones((4, 3)), small_config())

    def test_step_count(self):
        result = train(two_class_batch(), small_config(epochs=3, batch_size=16))
        assert len(result.history) == 3 * math.ceil(80 / 16)
        assert [r.step for r in result.history] == list(range(15))

    def test_zero_gradients_leave_parameters(self):
        cfg = small_config(weights=LossWeights(0.0, 0.0))
        head0, books0, _ = initial_state(cfg)
        result = train(two_class_batch(), cfg, task=ZeroTaskLoss())
        for name in expansion.PARAM_NAMES:
            np.testing.assert_array_equal(result.head.params[name], head0.params[name])
        np.testing.assert_array_equal(result.codebooks.entries, books0.entries)

    def test_loss_decreases(self):
        batch = two_class_batch()
        cfg = small_config(epochs=40, batch_size=16)  # 200 steps
        head0, books0, _ = initial_state(cfg)
        result = train(batch, cfg)
        assert len(result.history) == 200
        before = evaluate_losses(head0, books0, batch)[3]
        after = evaluate_losses(result.head, result.codebooks, batch)[3]
        assert after < before

    def test_bitwise_reproducible(self, tmp_path):
        batch = two_class_batch()
        runs = []
        for i in range(2):
            result = train(batch, small_config())
            write_loss_csv(result.history, tmp_path / f"loss{i}.csv")
            runs.append(result.codebooks.entries.tobytes() + result.head.params["a1_weight"].tobytes())
        assert runs[0] == runs[1]
        assert (tmp_path / "loss0.csv").read_bytes() == (tmp_path / "loss1.csv").read_bytes()

    def test_loss_csv_columns(self, tmp_path):
        result = train(two_class_batch(), small_config(epochs=1))
        write_loss_csv(result.history, tmp_path / "loss.csv")
        lines = (tmp_path / "loss.csv").read_text().splitlines()
        assert lines[0] == "step,task_loss,codebook_loss,commit_loss,total_loss"
        assert len(lines) == 1 + len(result.history)

    def test_singleton_tail_batch(self):
        batch = datagen.generate(datagen.uniform_mixture(2, 8, 0.5, 8, 0))  # N=16 -> tail of 1
        result = train(batch, small_config(epochs=1, batch_size=15))
        assert len(result.history) == 2
        assert result.history[1].task_loss == 0.0
