"""Multi-task detector network: conv/fc stack with dropout, analytic
gradients, and an Adam training loop.

The model has two heads sharing all hidden layers: softmax class scores
and a logistic-squashed 4-vector of normalized object location ratios.
Everything is float64 and deterministic given the owning RngStream, so
retraining from scratch with the same (seed, data) is bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import ops
from .ops import DimensionError, NumericError
from .rng import RngStream
from . import tensorio


@dataclass(frozen=True)
class NetworkConfig:
    input_shape: tuple  # (d,) for vector inputs, (c, h, w) for patches
    conv_layers: int = 0
    conv_channels: int = 32
    pool_after: int | None = None  # 1-based conv layer index, None = no pooling
    fc_widths: tuple = (256, 256, 256)
    dropout_rate: float = 0.5
    num_classes: int = 5
    loc_outputs: int = 4
    loc_weight: float = 1.0
    weight_decay: float = 1e-4
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "fc_widths", tuple(int(w) for w in self.fc_widths))
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError(f"dropout_rate must be in [0,1), got {self.dropout_rate}")
        if self.conv_layers and len(self.input_shape) != 3:
            raise ValueError("conv layers require a (c, h, w) input shape")

    @property
    def is_conv(self) -> bool:
        return self.conv_layers > 0

    def flat_features(self) -> int:
        """Feature count entering the first fully connected layer."""
        if not self.is_conv:
            d = 1
            for s in self.input_shape:
                d *= s
            return d
        c, h, w = self.input_shape
        for i in range(self.conv_layers):
            h, w = h - 2, w - 2
            if h < 1 or w < 1:
                raise DimensionError("input too small for configured conv stack")
            if self.pool_after == i + 1:
                h, w = h // 2, w // 2
        return self.conv_channels * h * w

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        d["fc_widths"] = tuple(d["fc_widths"])
        return cls(**d)


def fullscale_config(num_classes: int = 5, input_shape=(2, 105, 105)) -> NetworkConfig:
    """Full-size architecture preset: 4 conv layers of 32 3x3 kernels, one
    pooling layer, three 256-wide fc layers each followed by dropout 0.5,
    weight decay 1e-4."""
    return NetworkConfig(
        input_shape=input_shape,
        conv_layers=4,
        conv_channels=32,
        pool_after=4,
        fc_widths=(256, 256, 256),
        dropout_rate=0.5,
        weight_decay=1e-4,
        num_classes=num_classes,
    )


def desk_conv_config(num_classes: int = 5, input_shape=(2, 16, 16)) -> NetworkConfig:
    """Reduced conv preset with the same topology rules, sized for tests."""
    return NetworkConfig(
        input_shape=input_shape,
        conv_layers=2,
        conv_channels=8,
        pool_after=2,
        fc_widths=(64,),
        dropout_rate=0.5,
        weight_decay=1e-4,
        num_classes=num_classes,
    )


def desk_dense_config(feature_dim: int, num_classes: int = 5, **over) -> NetworkConfig:
    """Dense preset for vector-feature datasets."""
    kw = dict(
        input_shape=(feature_dim,),
        fc_widths=(64, 64),
        dropout_rate=0.5,
        weight_decay=1e-4,
        num_classes=num_classes,
    )
    kw.update(over)
    return NetworkConfig(**kw)


@dataclass
class NetworkParams:
    """Per-layer weights and biases, in topology order:
    conv layers, fc layers, class head, location head."""

    weights: list
    biases: list

    def copy(self) -> "NetworkParams":
        return NetworkParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def check_finite(self):
        for w in self.weights + self.biases:
            if not np.isfinite(w).all():
                raise NumericError("non-finite network parameter")


@dataclass
class Prediction:
    class_probs: np.ndarray  # (n, C)
    loc: np.ndarray  # (n, 4), each component in (0, 1)


@dataclass
class Model:
    config: NetworkConfig
    params: NetworkParams


def _layer_dims(config: NetworkConfig):
    """[(fan_in, weight_shape, bias_shape), ...] in parameter order."""
    dims = []
    if config.is_conv:
        c_in = config.input_shape[0]
        for _ in range(config.conv_layers):
            dims.append((c_in * 9, (config.conv_channels, c_in, 3, 3), (config.conv_channels,)))
            c_in = config.conv_channels
    d = config.flat_features()
    for w in config.fc_widths:
        dims.append((d, (d, w), (w,)))
        d = w
    dims.append((d, (d, config.num_classes), (config.num_classes,)))
    dims.append((d, (d, config.loc_outputs), (config.loc_outputs,)))
    return dims


def init_params(config: NetworkConfig, stream: RngStream) -> NetworkParams:
    """He-style init: zero-mean normal weights with variance 2/fan_in, zero biases."""
    weights, biases = [], []
    for fan_in, wshape, bshape in _layer_dims(config):
        weights.append(stream.normal(size=wshape) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(bshape))
    return NetworkParams(weights, biases)


def draw_dropout_masks(config: NetworkConfig, n: int, stream: RngStream):
    """Scaled inverted-dropout masks, one per fc layer: entries are 0 with
    probability `rate`, else 1/(1-rate)."""
    rate = config.dropout_rate
    masks = []
    for w in config.fc_widths:
        if rate == 0.0:
            masks.append(np.ones((n, w)))
        else:
            keep = stream.uniform(size=(n, w)) >= rate
            masks.append(keep / (1.0 - rate))
    return masks


def forward(model: Model, x, *, train: bool = False, stream: RngStream | None = None,
            masks=None, return_cache: bool = False):
    """Run the network on a batch.

    Deterministic mode (train=False) applies no dropout and no scaling: it
    is the single clean forward pass used for evaluation. Train mode uses
    inverted dropout; masks may be supplied explicitly (fixed-mask gradient
    checks) or drawn from `stream`.
    """
    config, params = model.config, model.params
    x = ops.as_tensor(x)
    if x.shape[1:] != config.input_shape:
        raise DimensionError(f"batch shape {x.shape[1:]} != input shape {config.input_shape}")
    n = x.shape[0]
    if train and masks is None:
        if config.dropout_rate > 0 and stream is None:
            raise ValueError("train-mode forward needs masks or a stream")
        masks = draw_dropout_masks(config, n, stream) if config.dropout_rate > 0 else None

    cache = {"x": x, "masks": masks, "conv": [], "fc": []}
    li = 0
    h = x
    if config.is_conv:
        for i in range(config.conv_layers):
            z = ops.conv2d_valid(h, params.weights[li], params.biases[li])
            a = ops.relu(z)
            entry = {"inp": h, "z": z, "pooled": False}
            h = a
            if config.pool_after == i + 1:
                h, idx = ops.maxpool2d(a)
                entry.update(pooled=True, pre_pool_shape=a.shape, pool_idx=idx)
            cache["conv"].append(entry)
            li += 1
        cache["flat_shape"] = h.shape
        h = h.reshape(n, -1)
    else:
        h = h.reshape(n, -1)

    for j, w in enumerate(config.fc_widths):
        z = h @ params.weights[li] + params.biases[li]
        a = ops.relu(z)
        m = masks[j] if (train and masks is not None) else None
        d = a * m if m is not None else a
        cache["fc"].append({"inp": h, "z": z, "mask": m})
        h = d
        li += 1

    cache["head_in"] = h
    logits = h @ params.weights[li] + params.biases[li]
    probs = ops.softmax(logits)
    u = h @ params.weights[li + 1] + params.biases[li + 1]
    loc = ops.sigmoid(u)
    ops.check_finite(probs, "class probabilities")
    cache["logits"] = logits
    cache["probs"] = probs
    cache["loc"] = loc
    pred = Prediction(probs, loc)
    return (pred, cache) if return_cache else pred


def loss(pred: Prediction, labels, loc_targets, loc_mask, *, loc_weight: float = 1.0,
         weight_decay: float = 0.0, params: NetworkParams | None = None) -> float:
    """Mean cross-entropy + loc_weight * masked location MSE + L2 penalty.

    The location term averages squared error over masked-in samples and
    over the 4 components; background samples (mask 0) contribute nothing.
    """
    probs = np.asarray(pred.class_probs)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = probs.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"label out of range [0, {c})")
    ce = -np.mean(np.log(np.clip(probs[np.arange(n), labels], 1e-300, None)))
    total = ce
    loc_mask = np.asarray(loc_mask, dtype=np.float64).reshape(-1)
    m = loc_mask.sum()
    if loc_weight != 0.0 and m > 0:
        diff = (np.asarray(pred.loc) - np.asarray(loc_targets)) * loc_mask[:, None]
        total = total + loc_weight * float((diff**2).sum()) / (4.0 * m)
    if weight_decay != 0.0:
        if params is None:
            raise ValueError("weight_decay requires params")
        total = total + weight_decay * 0.5 * sum(float((w**2).sum()) for w in params.weights)
    return float(total)


def backward(model: Model, cache: dict, labels, loc_targets, loc_mask) -> NetworkParams:
    """Analytic gradients of `loss` w.r.t. every parameter.

    Reuses the dropout masks recorded by the forward pass; returns a
    NetworkParams-shaped gradient container.
    """
    config, params = model.config, model.params
    probs, loc = cache["probs"], cache["loc"]
    n = probs.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    loc_mask = np.asarray(loc_mask, dtype=np.float64).reshape(-1)

    gw = [np.zeros_like(w) for w in params.weights]
    gb = [np.zeros_like(b) for b in params.biases]

    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n

    m = loc_mask.sum()
    if config.loc_weight != 0.0 and m > 0:
        dloc = config.loc_weight * (loc - np.asarray(loc_targets)) * loc_mask[:, None] / (2.0 * m)
        du = dloc * loc * (1.0 - loc)
    else:
        du = np.zeros_like(loc)

    li_class = len(params.weights) - 2
    li_loc = len(params.weights) - 1
    h = cache["head_in"]
    gw[li_class] = h.T @ dlogits + config.weight_decay * params.weights[li_class]
    gb[li_class] = dlogits.sum(axis=0)
    gw[li_loc] = h.T @ du + config.weight_decay * params.weights[li_loc]
    gb[li_loc] = du.sum(axis=0)
    dh = dlogits @ params.weights[li_class].T + du @ params.weights[li_loc].T

    li = li_class - 1
    for entry in reversed(cache["fc"]):
        if entry["mask"] is not None:
            dh = dh * entry["mask"]
        dz = dh * (entry["z"] > 0)
        gw[li] = entry["inp"].T @ dz + config.weight_decay * params.weights[li]
        gb[li] = dz.sum(axis=0)
        dh = dz @ params.weights[li].T
        li -= 1

    if config.is_conv:
        dh = dh.reshape(cache["flat_shape"])
        for entry in reversed(cache["conv"]):
            if entry["pooled"]:
                dh = ops.maxpool2d_backward(entry["pre_pool_shape"], entry["pool_idx"], dh)
            dz = dh * (entry["z"] > 0)
            dk, db, dh = ops.conv2d_backward(entry["inp"], params.weights[li], dz)
            gw[li] = dk + config.weight_decay * params.weights[li]
            gb[li] = db
            li -= 1

    return NetworkParams(gw, gb)


@dataclass
class AdamState:
    mw: list
    vw: list
    mb: list
    vb: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params: NetworkParams) -> "AdamState":
        return cls(
            [np.zeros_like(w) for w in params.weights],
            [np.zeros_like(w) for w in params.weights],
            [np.zeros_like(b) for b in params.biases],
            [np.zeros_like(b) for b in params.biases],
        )


def adam_step(params: NetworkParams, grads: NetworkParams, state: AdamState,
              config: NetworkConfig) -> NetworkParams:
    """Standard bias-corrected Adam update, in place."""
    state.t += 1
    b1, b2, eps, lr = config.beta1, config.beta2, config.eps, config.learning_rate
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for group, ggroup, ms, vs in (
        (params.weights, grads.weights, state.mw, state.vw),
        (params.biases, grads.biases, state.mb, state.vb),
    ):
        for p, g, mbuf, vbuf in zip(group, ggroup, ms, vs):
            mbuf *= b1
            mbuf += (1.0 - b1) * g
            vbuf *= b2
            vbuf += (1.0 - b2) * g * g
            p -= lr * (mbuf / c1) / (np.sqrt(vbuf / c2) + eps)
    return params


def train(features, labels, loc_targets, loc_mask, config: NetworkConfig,
          stream: RngStream):
    """Train from a fresh initialization; returns (Model, loss history).

    Per-epoch reshuffle and dropout masks come from named substreams of
    `stream`, so two calls with the same stream and data are bit-identical.
    """
    features = ops.as_tensor(features)
    n = features.shape[0]
    if n == 0:
        raise ValueError("empty labeled set")
    s_init = stream.substream("init")
    s_shuffle = stream.substream("shuffle")
    s_drop = stream.substream("dropout")
    params = init_params(config, s_init)
    model = Model(config, params)
    state = AdamState.zeros_like(params)
    labels = np.asarray(labels, dtype=np.int64)
    loc_targets = ops.as_tensor(loc_targets)
    loc_mask = np.asarray(loc_mask, dtype=np.float64).reshape(-1)
    history = []
    bs = max(1, config.batch_size)
    for _ in range(config.epochs):
        order = s_shuffle.permutation(n)
        for start in range(0, n, bs):
            sel = order[start : start + bs]
            pred, cache = forward(model, features[sel], train=True, stream=s_drop,
                                  return_cache=True)
            l = loss(pred, labels[sel], loc_targets[sel], loc_mask[sel],
                     loc_weight=config.loc_weight, weight_decay=config.weight_decay,
                     params=params)
            if not np.isfinite(l):
                raise NumericError("non-finite training loss")
            history.append(l)
            grads = backward(model, cache, labels[sel], loc_targets[sel], loc_mask[sel])
            adam_step(params, grads, state, config)
    params.check_finite()
    return model, history


# -- checkpoint file ---------------------------------------------------------


def save_checkpoint(path, model: Model) -> None:
    """One file: 8-byte header length, JSON header with the config and layer
    count, then one binary tensor record per parameter tensor."""
    header = json.dumps(
        {"format": "alforge-checkpoint", "version": 1,
         "config": model.config.to_dict(),
         "layers": len(model.params.weights)},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for w, b in zip(model.params.weights, model.params.biases):
            f.write(tensorio.tensor_to_bytes(w))
            f.write(tensorio.tensor_to_bytes(b))


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        buf = f.read()
    hlen = int.from_bytes(buf[:8], "little")
    header = json.loads(buf[8 : 8 + hlen].decode("utf-8"))
    config = NetworkConfig.from_dict(header["config"])
    pos = 8 + hlen
    weights, biases = [], []
    for _ in range(header["layers"]):
        w, used = tensorio.tensor_from_bytes(buf[pos:], base_offset=pos)
        pos += used
        b, used = tensorio.tensor_from_bytes(buf[pos:], base_offset=pos)
        pos += used
        weights.append(w)
        biases.append(b)
    return Model(config, NetworkParams(weights, biases))
