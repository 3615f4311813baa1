"""Network forward/backward/training against hand and finite-difference oracles."""

import numpy as np
import pytest

from alforge import net
from alforge.rng import RngStream

from helpers import gradcheck, model_loss, numerical_grads, max_rel_error, random_tiny_setup


def dense_model(seed=0, **over):
    kw = dict(input_shape=(6,), fc_widths=(8,), dropout_rate=0.0, num_classes=3,
              loc_weight=1.0, weight_decay=0.0)
    kw.update(over)
    cfg = net.NetworkConfig(**kw)
    return net.Model(cfg, net.init_params(cfg, RngStream(seed)))


class TestInit:
    def test_same_stream_same_params(self):
        cfg = net.desk_dense_config(8)
        a = net.init_params(cfg, RngStream(5))
        b = net.init_params(cfg, RngStream(5))
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)

    def test_biases_zero(self):
        params = net.init_params(net.desk_dense_config(8), RngStream(1))
        for b in params.biases:
            assert np.all(b == 0)

    def test_he_variance(self):
        cfg = net.NetworkConfig(input_shape=(256,), fc_widths=(256,), num_classes=3)
        params = net.init_params(cfg, RngStream(2))
        w = params.weights[0]
        target = 2.0 / 256
        assert abs(w.var() - target) / target < 0.2

    def test_fullscale_preset_shape(self):
        cfg = net.fullscale_config()
        assert cfg.conv_layers == 4 and cfg.conv_channels == 32
        assert cfg.pool_after is not None
        assert cfg.fc_widths == (256, 256, 256)
        assert cfg.dropout_rate == 0.5 and cfg.weight_decay == 1e-4


class TestForward:
    def test_deterministic_repeatable(self):
        m = dense_model()
        x = RngStream(3).normal(size=(5, 6))
        a = net.forward(m, x)
        b = net.forward(m, x)
        assert np.array_equal(a.class_probs, b.class_probs)
        assert np.array_equal(a.loc, b.loc)

    def test_dropout_zero_equals_deterministic(self):
        m = dense_model(dropout_rate=0.0)
        x = RngStream(4).normal(size=(5, 6))
        train = net.forward(m, x, train=True, stream=RngStream(9))
        det = net.forward(m, x)
        assert np.array_equal(train.class_probs, det.class_probs)

    def test_rows_sum_to_one(self):
        m = dense_model(seed=7)
        x = RngStream(8).normal(size=(9, 6))
        p = net.forward(m, x).class_probs
        assert np.abs(p.sum(axis=1) - 1.0).max() < 1e-9

    def test_loc_in_open_interval(self):
        m = dense_model(seed=7)
        x = RngStream(8).normal(size=(9, 6))
        loc = net.forward(m, x).loc
        assert (loc > 0).all() and (loc < 1).all()

    def test_shape_mismatch(self):
        m = dense_model()
        with pytest.raises(net.DimensionError):
            net.forward(m, np.ones((2, 7)))

    def test_inverted_dropout_expectation(self):
        # single dropout layer before the linear heads: the mask average of the
        # pre-softmax activations converges to the deterministic logits
        m = dense_model(seed=11, dropout_rate=0.5, fc_widths=(8,))
        x = RngStream(12).normal(size=(1, 6))
        _, det_cache = net.forward(m, x, return_cache=True)
        det_logits = det_cache["logits"]
        s = RngStream(13)
        acc = np.zeros_like(det_logits)
        passes = 10_000
        for _ in range(passes):
            _, c = net.forward(m, x, train=True, stream=s, return_cache=True)
            acc += c["logits"]
        mean_logits = acc / passes
        assert np.linalg.norm(mean_logits - det_logits) / np.linalg.norm(det_logits) < 0.02


class TestLoss:
    def test_perfect_prediction_zero_loss(self):
        pred = net.Prediction(np.array([[1.0, 0.0], [0.0, 1.0]]),
                              np.array([[0.2, 0.3, 0.4, 0.5]] * 2))
        l = net.loss(pred, [0, 1], pred.loc.copy(), [1, 1])
        assert l == 0.0

    def test_uniform_probs_ln_c(self):
        c = 5
        pred = net.Prediction(np.full((3, c), 1.0 / c), np.full((3, 4), 0.5))
        l = net.loss(pred, [0, 2, 4], np.zeros((3, 4)), [0, 0, 0], loc_weight=0.0)
        assert abs(l - np.log(c)) < 1e-12

    def test_label_out_of_range(self):
        pred = net.Prediction(np.full((1, 3), 1 / 3), np.full((1, 4), 0.5))
        with pytest.raises(ValueError):
            net.loss(pred, [3], np.zeros((1, 4)), [1])

    def test_matches_scalar_recomputation(self):
        model, x, labels, locs, mask, masks = random_tiny_setup(4)
        pred = net.forward(model, x, train=masks is not None, masks=masks)
        got = net.loss(pred, labels, locs, mask, loc_weight=model.config.loc_weight,
                       weight_decay=model.config.weight_decay, params=model.params)
        # independent scalar re-evaluation
        ce = 0.0
        for i, y in enumerate(labels):
            ce -= np.log(pred.class_probs[i, y])
        ce /= len(labels)
        msum, m = 0.0, 0
        for i in range(len(labels)):
            if mask[i]:
                m += 1
                for j in range(4):
                    msum += (pred.loc[i, j] - locs[i, j]) ** 2
        expected = ce + model.config.loc_weight * msum / (4 * m)
        expected += model.config.weight_decay * 0.5 * sum(
            float((w**2).sum()) for w in model.params.weights)
        assert abs(got - expected) < 1e-12


class TestBackward:
    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4, 5])
    def test_gradcheck_tiny_networks(self, seed):
        assert gradcheck(seed) < 1e-4

    def test_zero_loss_gradients_vanish(self):
        # saturate the class head so probs are exactly one-hot on the true
        # label and silence the location task: loss is 0, so every gradient
        # must be exactly the weight-decay term
        m = dense_model(seed=3, weight_decay=1e-3, loc_weight=0.0)
        m.params.biases[-2][0] = 1000.0
        x = RngStream(33).normal(size=(4, 6))
        labels = np.zeros(4, dtype=np.int64)
        pred, cache = net.forward(m, x, return_cache=True)
        assert net.loss(pred, labels, np.zeros((4, 4)), np.zeros(4),
                        loc_weight=0.0) == 0.0
        g = net.backward(m, cache, labels, np.zeros((4, 4)), np.zeros(4))
        wd = m.config.weight_decay
        for gw, w in zip(g.weights, m.params.weights):
            assert np.array_equal(gw, wd * w)
        for gb in g.biases:
            assert np.all(gb == 0.0)

    def test_background_masked_loc_head_silent(self):
        model, x, labels, locs, mask, masks = random_tiny_setup(0)
        mask = np.zeros_like(mask)
        _, cache = net.forward(model, x, train=masks is not None, masks=masks,
                               return_cache=True)
        g = net.backward(model, cache, labels, locs, mask)
        wd = model.config.weight_decay
        assert np.array_equal(g.weights[-1], wd * model.params.weights[-1])
        assert np.all(g.biases[-1] == 0.0)

    def test_loc_weight_linearity(self):
        base, x, labels, locs, mask, _ = random_tiny_setup(0)
        cfg2 = net.NetworkConfig(**{**base.config.to_dict(),
                                    "loc_weight": 2 * base.config.loc_weight})
        m2 = net.Model(cfg2, base.params)
        _, c1 = net.forward(base, x, return_cache=True)
        _, c2 = net.forward(m2, x, return_cache=True)
        g1 = net.backward(base, c1, labels, locs, mask)
        g2 = net.backward(m2, c2, labels, locs, mask)
        assert np.allclose(g2.biases[-1], 2.0 * g1.biases[-1], rtol=1e-12, atol=0)


class TestAdam:
    def cfg(self):
        return net.NetworkConfig(input_shape=(1,), fc_widths=(), num_classes=2,
                                 learning_rate=0.1)

    def test_single_step_hand_oracle(self):
        params = net.NetworkParams([np.array([[0.0]])], [np.array([0.0])])
        grads = net.NetworkParams([np.array([[1.0]])], [np.array([0.0])])
        state = net.AdamState.zeros_like(params)
        net.adam_step(params, grads, state, self.cfg())
        # bias-corrected first step moves by ~lr: -0.1/(1 + 1e-8)
        assert abs(params.weights[0][0, 0] + 0.1) < 1e-8

    def test_zero_gradient_no_motion(self):
        params = net.NetworkParams([np.array([[1.5]])], [np.array([0.5])])
        grads = net.NetworkParams([np.array([[0.0]])], [np.array([0.0])])
        state = net.AdamState.zeros_like(params)
        for _ in range(10):
            net.adam_step(params, grads, state, self.cfg())
        assert params.weights[0][0, 0] == 1.5 and params.biases[0][0] == 0.5

    def test_bitwise_repeatable(self):
        def run():
            model, x, labels, locs, mask, _ = random_tiny_setup(3)
            state = net.AdamState.zeros_like(model.params)
            for _ in range(5):
                _, cache = net.forward(model, x, return_cache=True)
                g = net.backward(model, cache, labels, locs, mask)
                net.adam_step(model.params, g, state, model.config)
            return model.params
        a, b = run(), run()
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)


class TestTrain:
    def test_separable_blobs(self):
        s = RngStream(21)
        n = 200
        labels = np.repeat([0, 1], n // 2).astype(np.int32)
        x = s.normal(size=(n, 2)) + np.where(labels[:, None] == 0, -3.0, 3.0)
        cfg = net.NetworkConfig(input_shape=(2,), fc_widths=(16,), dropout_rate=0.0,
                                num_classes=2, loc_weight=0.0, weight_decay=0.0,
                                learning_rate=0.01, epochs=50, batch_size=32)
        model, hist = net.train(x, labels, np.zeros((n, 4)), np.zeros(n), cfg,
                                RngStream(22))
        pred = net.forward(model, x)
        acc = np.mean(pred.class_probs.argmax(axis=1) == labels)
        assert acc >= 0.99
        assert np.isfinite(hist).all()

    def test_same_seed_identical_params(self):
        s = RngStream(31)
        x = s.normal(size=(30, 4))
        labels = s.integers(0, 3, size=30).astype(np.int32)
        locs = s.uniform(size=(30, 4), low=0.1, high=0.9)
        cfg = net.desk_dense_config(4, num_classes=3, epochs=3)
        m1, _ = net.train(x, labels, locs, np.ones(30), cfg, RngStream(7))
        m2, _ = net.train(x, labels, locs, np.ones(30), cfg, RngStream(7))
        for a, b in zip(m1.params.weights, m2.params.weights):
            assert np.array_equal(a, b)

    def test_empty_labeled_set(self):
        cfg = net.desk_dense_config(4)
        with pytest.raises(ValueError):
            net.train(np.zeros((0, 4)), np.zeros(0, dtype=np.int32),
                      np.zeros((0, 4)), np.zeros(0), cfg, RngStream(1))


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        model, *_ = random_tiny_setup(2)
        path = tmp_path / "model.ckpt"
        net.save_checkpoint(path, model)
        loaded = net.load_checkpoint(path)
        assert loaded.config == model.config
        for a, b in zip(loaded.params.weights, model.params.weights):
            assert np.array_equal(a, b)
        for a, b in zip(loaded.params.biases, model.params.biases):
            assert np.array_equal(a, b)
