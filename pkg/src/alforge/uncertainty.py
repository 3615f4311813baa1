"""Predictive-distribution construction and acquisition scoring.

A PredictiveSet holds M per-member class-probability matrices: M is the
number of stochastic dropout passes, or the number of ensemble members.
Entropy and mutual-information scores are computed from the same member
set through a single code path for both estimator families.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import net
from .rng import RngStream

STRATEGIES = ("random", "softmax-entropy", "mc-entropy", "mc-mi", "ens-entropy", "ens-mi")


@dataclass
class PredictiveSet:
    member_probs: np.ndarray  # (M, n, C)
    mean_probs: np.ndarray  # (n, C)

    @classmethod
    def from_members(cls, members) -> "PredictiveSet":
        members = np.asarray(members, dtype=np.float64)
        if members.ndim != 3:
            raise ValueError(f"member probs must be (M, n, C), got {members.shape}")
        # Identical members (single member, zero dropout, tied params) get the
        # exact member as mean so degenerate cases stay bitwise clean.
        if members.shape[0] == 1 or (members == members[0]).all():
            mean = members[0].copy()
        else:
            mean = members.mean(axis=0)
        return cls(members, mean)

    @property
    def n_members(self) -> int:
        return self.member_probs.shape[0]


def softmax_single(model: net.Model, inputs) -> PredictiveSet:
    """One deterministic forward pass; M = 1."""
    pred = net.forward(model, inputs)
    return PredictiveSet.from_members(pred.class_probs[None])


def mc_dropout_predict(model: net.Model, inputs, passes: int, stream: RngStream,
                       sample_ids=None) -> PredictiveSet:
    """T stochastic forward passes with independent dropout masks at the
    training rate, averaged into the predictive probability.

    Masks are drawn from per-sample substreams keyed by `sample_ids`
    (dataset indices by default), so scoring is independent of batch
    partitioning and parallelization.
    """
    if passes < 1:
        raise ValueError("pass count must be >= 1")
    inputs = np.asarray(inputs, dtype=np.float64)
    n = inputs.shape[0]
    config = model.config
    if config.dropout_rate == 0.0:
        det = net.forward(model, inputs).class_probs
        return PredictiveSet.from_members(np.broadcast_to(det, (passes,) + det.shape).copy())
    if sample_ids is None:
        sample_ids = np.arange(n)
    widths = config.fc_widths
    total = sum(widths)
    keep = 1.0 - config.dropout_rate
    draws = np.empty((n, passes, total))
    for row, sid in enumerate(sample_ids):
        draws[row] = stream.substream(int(sid)).uniform(size=(passes, total))
    members = np.empty((passes, n, config.num_classes))
    for t in range(passes):
        masks, off = [], 0
        for w in widths:
            masks.append((draws[:, t, off : off + w] >= config.dropout_rate) / keep)
            off += w
        members[t] = net.forward(model, inputs, train=True, masks=masks).class_probs
    return PredictiveSet.from_members(members)


def ensemble_predict(models, inputs) -> PredictiveSet:
    """One deterministic pass per ensemble member, averaged."""
    models = list(models)
    if not models:
        raise ValueError("ensemble must have at least one member")
    cfg = models[0].config
    for m in models[1:]:
        if m.config != cfg:
            raise ValueError("ensemble members must share a NetworkConfig")
    members = np.stack([net.forward(m, inputs).class_probs for m in models])
    return PredictiveSet.from_members(members)


def shannon_entropy(mean_probs) -> np.ndarray:
    """Per-row entropy -sum_c p log p in nats, with 0 log 0 = 0."""
    p = np.asarray(mean_probs, dtype=np.float64)
    squeeze = p.ndim == 1
    if squeeze:
        p = p[None]
    rowsum = p.sum(axis=1)
    if np.abs(rowsum - 1.0).max() > 1e-6 or (p < -1e-12).any():
        raise ValueError("rows must be probability vectors summing to 1")
    h = -np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum(axis=1)
    return h[0] if squeeze else h


def mutual_information(ps: PredictiveSet, return_raw: bool = False):
    """H[mean] minus the member-average entropy (the Monte-Carlo BALD score).

    Clamped at 0 from below against floating-point rounding; pass
    return_raw=True to also get the unclamped values.
    """
    if ps.n_members == 1 or (ps.member_probs == ps.member_probs[0]).all():
        # identical members: epistemic uncertainty is exactly zero
        raw = np.zeros(ps.mean_probs.shape[0])
    else:
        h_mean = shannon_entropy(ps.mean_probs)
        member_h = np.stack([shannon_entropy(m) for m in ps.member_probs])
        raw = h_mean - member_h.mean(axis=0)
    clamped = np.maximum(raw, 0.0)
    return (clamped, raw) if return_raw else clamped


def score_pool(strategy: str, models, inputs, *, passes: int = 20,
               stream: RngStream | None = None, sample_ids=None) -> np.ndarray:
    """Per-sample acquisition scores for the unlabeled pool.

    `models` is a single Model for non-ensemble strategies, or the list of
    ensemble members. The random baseline draws uniform scores from
    `stream`, so top-k selection on them is uniform sampling.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if strategy == "random":
        if stream is None:
            raise ValueError("random strategy needs a stream")
        return stream.uniform(size=np.asarray(inputs).shape[0])
    if strategy.startswith("ens-"):
        if isinstance(models, net.Model):
            raise ValueError("ensemble strategies require a list of models")
        ps = ensemble_predict(models, inputs)
    else:
        model = models[0] if isinstance(models, (list, tuple)) else models
        if strategy == "softmax-entropy":
            ps = softmax_single(model, inputs)
        else:
            if stream is None:
                raise ValueError("mc strategies need a stream")
            ps = mc_dropout_predict(model, inputs, passes, stream, sample_ids=sample_ids)
    if strategy.endswith("-mi"):
        return mutual_information(ps)
    return shannon_entropy(ps.mean_probs)
