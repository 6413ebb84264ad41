import numpy as np
import pytest

from tgnet.autodiff import (
    BatchNormState, ParamStore, Tensor, adam_step, avg_pool_grid, batch_norm, broadcast_nodes, concat_features,
    dense, dropout, grad_check, learning_rate, mae_loss, mse_loss, nearest_unpool, neighbor_mean, relu,
    squeeze_last,
)
from tgnet.errors import DataError, NumericalError
from tgnet.grid import build_graph


def param(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def naive_neighbor_mean(x, graph):
    out = np.zeros_like(x)
    for i, nb in enumerate(graph.neighbors):
        if nb:
            out[..., i, :] = sum(x[..., j, :] for j in nb) / len(nb)
    return out


class TestForward:
    def test_dense_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(dense(Tensor(x), Tensor(np.eye(4))).data, x)

    def test_dense_bias(self):
        out = dense(Tensor([[1.0, 2.0]]), Tensor([[1.0, 1.0], [0.0, 2.0]]), Tensor([0.5, -1.0]))
        np.testing.assert_array_equal(out.data, [[3.5, 3.0]])

    def test_relu(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_concat_and_broadcast(self):
        a = Tensor(np.ones((2, 3, 1)))
        b = broadcast_nodes(Tensor([[5.0, 6.0], [7.0, 8.0]]), 3)
        assert b.data.shape == (2, 3, 2)
        out = concat_features(a, b)
        np.testing.assert_array_equal(out.data[1, 2], [1.0, 7.0, 8.0])

    def test_squeeze(self):
        assert squeeze_last(Tensor(np.zeros((2, 5, 1)))).data.shape == (2, 5)

    def test_neighbor_mean_matches_naive(self):
        for shape in [(1, 1), (1, 4), (3, 3), (4, 5)]:
            g = build_graph(shape)
            x = np.random.default_rng(1).normal(size=(2, g.n_nodes, 3))
            np.testing.assert_allclose(neighbor_mean(Tensor(x), g).data, naive_neighbor_mean(x, g), rtol=1e-12)

    def test_neighbor_mean_constant_field(self):
        g = build_graph((4, 4))
        np.testing.assert_array_equal(neighbor_mean(Tensor(np.full((16, 2), 3.0)), g).data, 3.0)

    def test_pool_and_unpool(self):
        x = np.arange(6, dtype=float).reshape(6, 1)  # 2x3 grid
        pooled, coarse = avg_pool_grid(Tensor(x), (2, 3))
        assert coarse == (1, 2)
        # second block replicates the last column: (2 + 2 + 5 + 5) / 4
        np.testing.assert_array_equal(pooled.data[:, 0], [(0 + 1 + 3 + 4) / 4, 3.5])
        up = nearest_unpool(pooled, (2, 3))
        np.testing.assert_array_equal(up.data[:, 0], [2.0, 2.0, 3.5, 2.0, 2.0, 3.5])

    def test_losses(self):
        pred = Tensor([1.0, 2.0, 4.0])
        assert mse_loss(pred, [1.0, 0.0, 1.0]).data == pytest.approx(13 / 3)
        assert mae_loss(pred, [1.0, 0.0, 1.0]).data == pytest.approx(5 / 3)

    def test_loss_shape_mismatch(self):
        with pytest.raises(DataError):
            mse_loss(Tensor([1.0, 2.0]), [1.0])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_raises(self):
        with pytest.raises(NumericalError):
            dense(Tensor([[1e308]]), Tensor([[1e308]]))


class TestBatchNorm:
    def test_train_mode_normalises(self):
        x = np.random.default_rng(2).normal(3.0, 5.0, size=(40, 4))
        state = BatchNormState.fresh(4)
        out = batch_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), state, training=True).data
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=0), x.var(axis=0) / (x.var(axis=0) + 1e-5), rtol=1e-10)
        np.testing.assert_allclose(state.running_mean, 0.01 * x.mean(axis=0))
        np.testing.assert_allclose(state.running_var, 0.99 + 0.01 * x.var(axis=0))

    def test_eval_mode_uses_running_stats(self):
        state = BatchNormState(np.array([1.0]), np.array([4.0]))
        out = batch_norm(Tensor([[5.0]]), Tensor([2.0]), Tensor([1.0]), state, training=False)
        assert out.data[0, 0] == pytest.approx(2.0 * 4.0 / np.sqrt(4.0 + 1e-5) + 1.0)

    def test_single_row_training_rejected(self):
        with pytest.raises(DataError):
            batch_norm(Tensor([[1.0, 2.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), BatchNormState.fresh(2), True)


class TestDropout:
    def test_eval_identity(self):
        x = Tensor(np.ones(10))
        assert dropout(x, 0.5, training=False) is x

    def test_inverted_scaling(self):
        out = dropout(Tensor(np.ones(200_000)), 0.25, True, np.random.default_rng(0)).data
        assert set(np.unique(out)) <= {0.0, 1.0 / 0.75}
        assert out.mean() == pytest.approx(1.0, abs=0.01)


class TestGradients:
    def test_dense_relu_chain(self):
        rng = np.random.default_rng(0)
        x = param(rng.normal(size=(4, 3)))
        W, b = param(rng.normal(size=(2, 3))), param(rng.normal(size=2))
        target = rng.normal(size=(4, 2))
        report = grad_check(lambda: mse_loss(relu(dense(x, W, b)), target), {"x": x, "W": W, "b": b})
        assert report.passed(1e-6), report.per_param

    def test_neighbor_mean(self):
        g = build_graph((3, 4))
        x = param(np.random.default_rng(1).normal(size=(2, 12, 3)))
        w = np.random.default_rng(2).normal(size=(2, 12, 3))
        report = grad_check(lambda: mse_loss(neighbor_mean(x, g), w), {"x": x})
        assert report.passed(1e-7)

    def test_pool_unpool_odd_grid(self):
        x = param(np.random.default_rng(3).normal(size=(2, 15, 2)))
        w = np.random.default_rng(4).normal(size=(2, 15, 2))

        def fn():
            pooled, _ = avg_pool_grid(x, (3, 5))
            return mse_loss(concat_features(nearest_unpool(pooled, (3, 5)), x), np.concatenate([w, w], -1))

        assert grad_check(fn, {"x": x}).passed(1e-7)

    def test_batch_norm_train(self):
        rng = np.random.default_rng(5)
        x, gamma, beta = param(rng.normal(size=(6, 4, 3))), param(rng.normal(size=3)), param(rng.normal(size=3))
        w = rng.normal(size=(6, 4, 3))

        def fn():
            return mse_loss(batch_norm(x, gamma, beta, BatchNormState.fresh(3), True), w)

        assert grad_check(fn, {"x": x, "gamma": gamma, "beta": beta}).passed(1e-6)

    def test_mae_away_from_kinks(self):
        pred = param([0.5, 2.0, -1.0])
        assert grad_check(lambda: mae_loss(pred, [0.0, 3.0, 1.0]), {"p": pred}).passed(1e-8)

    def test_shared_input_accumulates(self):
        x = param([1.0, -2.0, 3.0])
        report = grad_check(lambda: mse_loss(concat_features(x, x), np.zeros(6)), {"x": x})
        assert report.passed(1e-8)


class TestAdam:
    def test_lr_schedule(self):
        assert learning_rate(0.01, 0.01, 0) == 0.01
        assert learning_rate(0.01, 0.01, 100) == pytest.approx(0.005)

    def test_first_step_by_hand(self):
        # f(w) = w^2 at w = 1: g = 2, m_hat = 2, v_hat = 4
        store = ParamStore()
        w = store.add("w", np.array([1.0]))
        loss = Tensor(w.data**2)
        w.grad = 2.0 * w.data
        assert loss.data == 1.0
        lr = adam_step(store, lr0=0.01, decay=0.01)
        assert lr == 0.01
        assert w.data[0] == pytest.approx(1.0 - 0.01 * 2.0 / (2.0 + 1e-8), rel=0, abs=1e-15)
        assert store.step == 1

    def test_second_step_decayed_rate(self):
        store = ParamStore()
        w = store.add("w", np.array([1.0]))
        adam_step(store, {"w": np.array([2.0])}, lr0=0.01, decay=0.5)
        before = w.data[0]
        lr = adam_step(store, {"w": np.array([2.0])}, lr0=0.01, decay=0.5)
        assert lr == pytest.approx(0.01 / 1.5)
        # constant gradient: bias-corrected moments stay at g and g^2
        assert before - w.data[0] == pytest.approx(lr * 2.0 / (2.0 + 1e-8))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        store = ParamStore()
        store.add("a", np.random.default_rng(0).normal(size=(3, 2)))
        store.add_bn("bn", 2).running_var[:] = [2.0, 3.0]
        adam_step(store, {"a": np.ones((3, 2))})
        store.save(tmp_path / "c.tgck", extra={"note": 1})
        manifest, arrays = ParamStore.read(tmp_path / "c.tgck")
        other = ParamStore()
        other.add("a", np.zeros((3, 2)))
        other.add_bn("bn", 2)
        other.load_arrays(manifest, arrays)
        np.testing.assert_array_equal(other["a"].data, store["a"].data)
        np.testing.assert_array_equal(other.bn["bn"].running_var, [2.0, 3.0])
        np.testing.assert_array_equal(other.m["a"], store.m["a"])
        assert other.step == 1 and manifest["extra"] == {"note": 1}

    def test_truncated_file(self, tmp_path):
        store = ParamStore()
        store.add("a", np.ones(4))
        store.save(tmp_path / "c.tgck")
        raw = (tmp_path / "c.tgck").read_bytes()
        (tmp_path / "c.tgck").write_bytes(raw[:-8])
        with pytest.raises(DataError):
            ParamStore.read(tmp_path / "c.tgck")
