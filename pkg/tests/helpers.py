"""Shared test oracles: finite-difference gradients and tiny random nets."""

import numpy as np

from alforge import net
from alforge.rng import RngStream


def model_loss(model, x, labels, locs, mask, masks=None):
    pred = net.forward(model, x, train=masks is not None, masks=masks)
    return net.loss(pred, labels, locs, mask,
                    loc_weight=model.config.loc_weight,
                    weight_decay=model.config.weight_decay,
                    params=model.params)


def numerical_grads(model, x, labels, locs, mask, masks=None, h=1e-6):
    """Central finite differences of the full loss w.r.t. every parameter."""
    gw = [np.zeros_like(w) for w in model.params.weights]
    gb = [np.zeros_like(b) for b in model.params.biases]
    for arrs, outs in ((model.params.weights, gw), (model.params.biases, gb)):
        for arr, out in zip(arrs, outs):
            it = np.nditer(arr, flags=["multi_index"])
            while not it.finished:
                ix = it.multi_index
                orig = arr[ix]
                arr[ix] = orig + h
                lp = model_loss(model, x, labels, locs, mask, masks)
                arr[ix] = orig - h
                lm = model_loss(model, x, labels, locs, mask, masks)
                arr[ix] = orig
                out[ix] = (lp - lm) / (2.0 * h)
                it.iternext()
    return net.NetworkParams(gw, gb)


def max_rel_error(analytic: net.NetworkParams, numeric: net.NetworkParams) -> float:
    worst = 0.0
    for a, n in zip(analytic.weights + analytic.biases, numeric.weights + numeric.biases):
        denom = np.maximum(np.abs(a) + np.abs(n), 1e-3)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def random_tiny_setup(seed: int):
    """A random tiny network + batch, cycling layer mixes: dense-only,
    conv, conv+pool, with and without dropout (fixed masks)."""
    s = RngStream(seed, 777)
    kind = seed % 3
    rate = (0.0, 0.3, 0.5)[seed % 3 if seed % 2 else 0]
    if kind == 0:
        cfg = net.NetworkConfig(input_shape=(5,), fc_widths=(4, 3), dropout_rate=rate,
                                num_classes=3, loc_weight=0.7, weight_decay=1e-3)
        x = s.normal(size=(4, 5))
    elif kind == 1:
        cfg = net.NetworkConfig(input_shape=(2, 6, 6), conv_layers=2, conv_channels=3,
                                pool_after=None, fc_widths=(4,), dropout_rate=rate,
                                num_classes=3, loc_weight=1.3, weight_decay=1e-3)
        x = s.normal(size=(3, 2, 6, 6))
    else:
        cfg = net.NetworkConfig(input_shape=(1, 8, 8), conv_layers=2, conv_channels=2,
                                pool_after=2, fc_widths=(5,), dropout_rate=rate,
                                num_classes=4, loc_weight=1.0, weight_decay=0.0)
        x = s.normal(size=(3, 1, 8, 8))
    params = net.init_params(cfg, s.substream("init"))
    # zero-init biases can park relu pre-activations exactly on the kink
    # (a dead layer feeds 0 into the next), where finite differences see a
    # spurious half-slope; random biases keep the check off measure-zero points
    bs = s.substream("bias")
    for b in params.biases:
        b += bs.normal(size=b.shape) * 0.1
    model = net.Model(cfg, params)
    n = x.shape[0]
    labels = s.integers(0, cfg.num_classes, size=n)
    locs = s.uniform(size=(n, 4), low=0.1, high=0.9)
    mask = (s.uniform(size=n) > 0.3).astype(np.int32)
    if not mask.any():
        mask[0] = 1
    masks = net.draw_dropout_masks(cfg, n, s.substream("drop")) if rate > 0 else None
    return model, x, labels, locs, mask, masks


def gradcheck(seed: int) -> float:
    model, x, labels, locs, mask, masks = random_tiny_setup(seed)
    _, cache = net.forward(model, x, train=masks is not None, masks=masks,
                           return_cache=True)
    analytic = net.backward(model, cache, labels, locs, mask)
    numeric = numerical_grads(model, x, labels, locs, mask, masks)
    return max_rel_error(analytic, numeric)
