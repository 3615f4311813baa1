"""Pool-based active-learning engine: seed selection, iterative scoring,
top-k querying, simulated oracle labeling, retraining from scratch, and
stop conditions.

The master seed fans out into named substreams (seed set, per-step
training, per-step scoring) so a rerun with the same seed replays the
identical query sequence and metrics bit for bit.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import metrics as met
from . import net
from . import uncertainty as unc
from .datagen import Dataset
from .rng import RngStream

THREADS_ENV = "ALFORGE_THREADS"


def max_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class LoopConfig:
    seed_per_class: int = 200
    query_batch: int = 200
    max_steps: int = 60
    strategy: str = "random"
    repetitions: int = 3
    stop_rule: str = "max-steps"  # "max-steps" | "convergence" | "target"
    conv_epsilon: float = 1e-3
    conv_window: int = 5
    target_accuracy: float = 1.0
    mc_passes: int = 20
    ensemble_size: int = 5
    calibration_bins: int = 10
    sparsification_steps: int = 20

    def __post_init__(self):
        if self.query_batch < 1 or self.max_steps < 0:
            raise ValueError("query_batch must be >= 1 and max_steps >= 0")
        if self.strategy not in unc.STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")


@dataclass
class QueryRecord:
    step: int
    strategy: str
    indices: tuple


@dataclass
class PoolState:
    """Disjoint labeled/unlabeled index sets over the training dataset.

    Both index lists stay sorted ascending so tie-breaking by lower dataset
    index falls out of positional order.
    """

    labeled: np.ndarray
    unlabeled: np.ndarray
    total: int
    query_log: list = field(default_factory=list)

    def assert_partition(self):
        lab, unl = set(self.labeled.tolist()), set(self.unlabeled.tolist())
        assert not (lab & unl), "labeled and unlabeled sets overlap"
        assert len(lab) + len(unl) == self.total, "pool partition does not cover the dataset"

    def move_to_labeled(self, indices, step: int, strategy: str):
        idx = np.asarray(indices)
        mask = np.isin(self.unlabeled, idx)
        if mask.sum() != idx.size:
            raise ValueError("queried index not in the unlabeled set")
        self.labeled = np.sort(np.concatenate([self.labeled, idx]))
        self.unlabeled = self.unlabeled[~mask]
        self.query_log.append(QueryRecord(step, strategy, tuple(int(i) for i in idx)))


@dataclass
class Oracle:
    """Simulated annotator: returns the stored ground truth, idempotently."""

    labels: np.ndarray
    locations: np.ndarray
    loc_mask: np.ndarray

    @classmethod
    def for_dataset(cls, ds: Dataset) -> "Oracle":
        return cls(ds.labels, ds.locations, ds.loc_mask)


def init_seed_set(ds: Dataset, per_class: int, stream: RngStream) -> tuple[PoolState, dict]:
    """Uniform per-class sampling without replacement for the seed set.

    Classes with fewer than `per_class` samples contribute everything they
    have; the shortfall is returned for logging.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    chosen = []
    shortfall = {}
    for c in range(ds.num_classes):
        members = np.nonzero(ds.labels == c)[0]
        if members.size == 0:
            continue
        take = min(per_class, members.size)
        if take < per_class:
            shortfall[ds.class_names[c]] = per_class - take
        picked = stream.substream(("seed-class", c)).choice_without_replacement(members, take)
        chosen.append(picked)
    labeled = np.sort(np.concatenate(chosen))
    unlabeled = np.setdiff1d(np.arange(len(ds)), labeled)
    return PoolState(labeled, unlabeled, len(ds)), shortfall


def select_top_k(scores, k: int) -> np.ndarray:
    """Positions of the k highest scores; ties go to the lower position."""
    scores = np.asarray(scores, dtype=np.float64)
    if k > scores.size:
        raise ValueError(f"k={k} exceeds pool size {scores.size}")
    order = np.lexsort((np.arange(scores.size), -scores))
    return order[:k]


def oracle_label(oracle: Oracle, indices, labeled: np.ndarray):
    """Ground-truth class labels and location targets for queried indices."""
    idx = np.asarray(indices)
    if np.unique(idx).size != idx.size:
        raise ValueError("duplicate index in a single oracle query")
    if np.isin(idx, labeled).any():
        raise ValueError("queried index is already labeled")
    return oracle.labels[idx], oracle.locations[idx], oracle.loc_mask[idx]


def stop_condition(history: list, config: LoopConfig) -> bool:
    """`history` holds one MetricsRecord per completed query step (the seed
    record is excluded). max_steps caps every rule."""
    steps_done = len(history)
    if steps_done >= config.max_steps:
        return True
    if config.stop_rule == "target":
        return bool(history) and history[-1].accuracy >= config.target_accuracy
    if config.stop_rule == "convergence":
        if steps_done <= config.conv_window:
            return False
        gain = history[-1].accuracy - history[-1 - config.conv_window].accuracy
        return gain < config.conv_epsilon
    return False


@dataclass
class RunResult:
    records: list  # MetricsRecord per step (step 0 = seed-trained model)
    query_log: list  # QueryRecord per query step
    calibration_curves: list  # CalibrationCurve per step
    error_curves: list  # (method ErrorCurve, oracle ErrorCurve) per step
    pool_class_counts: np.ndarray  # unlabeled-pool class counts at loop start
    seed_shortfall: dict


def _train_models(train_ds: Dataset, pool: PoolState, loop_cfg: LoopConfig,
                  net_cfg: net.NetworkConfig, root: RngStream, step: int):
    """Retrain from scratch on the current labeled set; ensemble strategies
    retrain all members with distinct substreams."""
    idx = pool.labeled
    sub = train_ds.subset(idx)

    def one(member: int) -> net.Model:
        stream = root.substream(("train", step, member))
        model, _ = net.train(sub.features, sub.labels, sub.locations, sub.loc_mask,
                             net_cfg, stream)
        return model

    if loop_cfg.strategy.startswith("ens-"):
        workers = min(max_threads(), loop_cfg.ensemble_size)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                return list(ex.map(one, range(loop_cfg.ensemble_size)))
        return [one(e) for e in range(loop_cfg.ensemble_size)]
    return [one(0)]


def _evaluate(models, test_ds: Dataset, loop_cfg: LoopConfig, root: RngStream,
              step: int, labeled_count: int, queried_counts: np.ndarray):
    """Task metrics from the clean pass of member 0; uncertainty-quality
    metrics from the strategy's own predictive distribution."""
    t0 = time.perf_counter()
    strategy = loop_cfg.strategy
    eval_model = models[0]
    pred = net.forward(eval_model, test_ds.features)
    pred_cls = met.predicted_classes(pred.class_probs)
    acc = met.accuracy(pred_cls, test_ds.labels)
    mse = met.loc_mse(pred.loc, test_ds.locations, test_ds.loc_mask) \
        if test_ds.loc_mask.any() else 0.0

    if strategy.startswith("ens-"):
        ps = unc.ensemble_predict(models, test_ds.features)
    elif strategy.startswith("mc-"):
        ps = unc.mc_dropout_predict(eval_model, test_ds.features, loop_cfg.mc_passes,
                                    root.substream(("eval-mc", step)))
    else:
        ps = unc.softmax_single(eval_model, test_ds.features)

    curve, cal_err, _ = met.calibration(ps.mean_probs, test_ds.labels,
                                        bins=loop_cfg.calibration_bins)
    n = len(test_ds)
    losses = -np.log(np.clip(ps.mean_probs[np.arange(n), test_ds.labels], 1e-300, None))
    if strategy.endswith("-mi"):
        scores = unc.mutual_information(ps)
    else:
        scores = unc.shannon_entropy(ps.mean_probs)
    m_curve, o_curve, err_sum = met.sparsification(losses, scores,
                                                   steps=loop_cfg.sparsification_steps)
    record = met.MetricsRecord(
        step=step,
        labeled_count=labeled_count,
        accuracy=acc,
        loc_mse=mse,
        calibration_error=cal_err,
        error_sum=err_sum,
        queried_class_counts=queried_counts,
        wall_time=time.perf_counter() - t0,
    )
    return record, curve, (m_curve, o_curve)


def run_loop(train_ds: Dataset, test_ds: Dataset, loop_cfg: LoopConfig,
             net_cfg: net.NetworkConfig, master_seed: int) -> RunResult:
    """Execute the full query loop and return per-step metrics.

    Step 0 records the seed-trained model; each later step scores the pool,
    queries top-k (uniform scores for the random baseline), labels via the
    oracle, retrains from scratch, and evaluates on the test set.
    """
    root = RngStream(master_seed)
    oracle = Oracle.for_dataset(train_ds)
    pool, shortfall = init_seed_set(train_ds, loop_cfg.seed_per_class,
                                    root.substream("seed-set"))
    pool.assert_partition()
    pool_counts = np.bincount(train_ds.labels[pool.unlabeled],
                              minlength=train_ds.num_classes)
    nclass = train_ds.num_classes
    step = 0
    models = _train_models(train_ds, pool, loop_cfg, net_cfg, root, step)
    record, curve, ecurves = _evaluate(models, test_ds, loop_cfg, root, step,
                                       pool.labeled.size, np.zeros(nclass, dtype=np.int64))
    records = [record]
    curves = [curve]
    error_curves = [ecurves]

    while not stop_condition(records[1:], loop_cfg) and pool.unlabeled.size > 0:
        step += 1
        k = min(loop_cfg.query_batch, pool.unlabeled.size)
        scores = unc.score_pool(
            loop_cfg.strategy,
            models if loop_cfg.strategy.startswith("ens-") else models[0],
            train_ds.features[pool.unlabeled],
            passes=loop_cfg.mc_passes,
            stream=root.substream(("score", step)),
            sample_ids=pool.unlabeled,
        )
        chosen = pool.unlabeled[select_top_k(scores, k)]
        labels, _, _ = oracle_label(oracle, chosen, pool.labeled)
        pool.move_to_labeled(chosen, step, loop_cfg.strategy)
        pool.assert_partition()
        models = _train_models(train_ds, pool, loop_cfg, net_cfg, root, step)
        record, curve, ecurves = _evaluate(
            models, test_ds, loop_cfg, root, step, pool.labeled.size,
            np.bincount(labels, minlength=nclass).astype(np.int64))
        records.append(record)
        curves.append(curve)
        error_curves.append(ecurves)

    return RunResult(records, pool.query_log, curves, error_curves, pool_counts, shortfall)


def write_query_log(path, query_log) -> None:
    """One line per step: step number, strategy, comma-separated indices."""
    with open(path, "w") as f:
        for rec in query_log:
            f.write(f"{rec.step} {rec.strategy} {','.join(map(str, rec.indices))}\n")


def read_query_log(path) -> list:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            step, strategy, idx = line.split(" ", 2)
            out.append(QueryRecord(int(step), strategy,
                                   tuple(int(i) for i in idx.split(","))))
    return out
