"""Synthetic datasets, the KITTI-shaped imbalanced pool profile, the
region-proposal simulator, location-target encoding, and the on-disk
dataset container.

Two generator families exist: Gaussian vector clusters (fast dense path)
and 2-channel sparse patches with class-specific motifs (conv path). All
generators are bit-deterministic given their RngStream.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .rng import RngStream
from .tensorio import FormatError, read_tensor, write_tensor

KITTI_CLASSES = ("Small Vehicle", "Human", "Truck", "Tram", "Misc")
KITTI_FRACTIONS = (0.78, 0.156, 0.027, 0.013, 0.024)
DEFAULT_CAPS = (4.0, 12.0, 4.0, 80.0)  # (w, l, h, d) meters

BACKGROUND = "Background"


@dataclass(frozen=True)
class ClassProfile:
    class_names: tuple
    fractions: tuple

    def __post_init__(self):
        fr = np.asarray(self.fractions, dtype=np.float64)
        if len(self.class_names) != fr.size:
            raise ValueError("class name / fraction count mismatch")
        if (fr <= 0).any() or abs(fr.sum() - 1.0) > 1e-9:
            raise ValueError("fractions must be positive and sum to 1")

    @classmethod
    def kitti(cls) -> "ClassProfile":
        return cls(KITTI_CLASSES, KITTI_FRACTIONS)

    @classmethod
    def balanced(cls, num_classes: int) -> "ClassProfile":
        names = tuple(f"class{i}" for i in range(num_classes))
        return cls(names, (1.0 / num_classes,) * num_classes)


@dataclass(frozen=True)
class ProposalProfile:
    recall: tuple  # per-class survival probability, in (0, 1]
    background_fraction: float = 0.3  # fraction of emitted proposals that are background
    iou_positive: tuple = (0.5, 1.0)
    iou_background: tuple = (0.0, 0.2)
    iou_midband: tuple = (0.2, 0.5)
    midband_fraction: float = 0.1  # test-split-only extra samples in the ignore band

    def __post_init__(self):
        r = np.asarray(self.recall, dtype=np.float64)
        if (r <= 0).any() or (r > 1).any():
            raise ValueError("recall values must lie in (0, 1]")

    @classmethod
    def kitti(cls) -> "ProposalProfile":
        # image-detector recall: Small Vehicle 0.917, Human 0.862
        return cls(recall=(0.917, 0.862))


@dataclass
class LocationGroundTruth:
    raw: np.ndarray  # (w, l, h, d) in meters
    caps: np.ndarray  # (w_max, l_max, h_max, d_max)


def encode_location(gt: LocationGroundTruth) -> np.ndarray:
    """Componentwise ratio raw/caps; each output in (0, 1]."""
    raw = np.asarray(gt.raw, dtype=np.float64)
    caps = np.asarray(gt.caps, dtype=np.float64)
    if (caps <= 0).any():
        raise ValueError("caps must be positive")
    if (raw <= 0).any() or (raw > caps).any():
        raise ValueError("raw location values must be in (0, caps]")
    return raw / caps


def decode_location(encoded, caps) -> np.ndarray:
    return np.asarray(encoded, dtype=np.float64) * np.asarray(caps, dtype=np.float64)


@dataclass
class Dataset:
    features: np.ndarray  # (n, d) or (n, c, h, w) float64
    labels: np.ndarray  # (n,) int32
    locations: np.ndarray  # (n, 4) float64, encoded ratios (zeros when masked out)
    loc_mask: np.ndarray  # (n,) int32, 1 = location target valid
    class_names: tuple
    caps: np.ndarray  # (4,)
    meta: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)  # extra per-sample arrays (e.g. iou)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32)
        self.loc_mask = np.asarray(self.loc_mask, dtype=np.int32)
        self.caps = np.asarray(self.caps, dtype=np.float64)

    def __len__(self):
        return self.features.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.features[idx], self.labels[idx], self.locations[idx],
                       self.loc_mask[idx], self.class_names, self.caps,
                       dict(self.meta), {k: v[idx] for k, v in self.extras.items()})


def largest_remainder_counts(fractions, n: int) -> np.ndarray:
    """Integer class counts summing exactly to n, by largest remainder."""
    fr = np.asarray(fractions, dtype=np.float64)
    exact = fr * n
    counts = np.floor(exact).astype(np.int64)
    remainder = exact - counts
    short = n - counts.sum()
    # ties broken by lower class index for determinism
    order = np.lexsort((np.arange(fr.size), -remainder))
    counts[order[:short]] += 1
    return counts


def _class_location_ranges(c: int, num_classes: int) -> tuple[float, float]:
    """Per-class normalized raw-location band inside (0, 1]."""
    lo = 0.15 + 0.7 * c / num_classes
    hi = 0.15 + 0.7 * (c + 1) / num_classes
    return lo, hi


def _gen_locations(labels: np.ndarray, num_classes: int, stream: RngStream) -> np.ndarray:
    n = labels.size
    u = stream.uniform(size=(n, 4))
    locs = np.empty((n, 4))
    for c in range(num_classes):
        sel = labels == c
        lo, hi = _class_location_ranges(c, num_classes)
        ratios = lo + (hi - lo) * u[sel]
        locs[sel] = ratios  # already the encoded values: raw = ratios * caps
    return locs


def gen_cluster_dataset(profile: ClassProfile, n_train: int, n_test: int,
                        feature_dim: int, separation: float, stream: RngStream,
                        caps=DEFAULT_CAPS):
    """Per-class Gaussian clusters with means at controlled separation.

    Class counts follow the profile fractions exactly (largest remainder).
    Location targets are drawn from class-dependent bands and stored in
    encoded (ratio) form with mask 1 everywhere.
    """
    if feature_dim < 2:
        raise ValueError("feature_dim must be >= 2")
    num_classes = len(profile.class_names)
    if min(n_train, n_test) < num_classes:
        raise ValueError("dataset smaller than class count")
    caps = np.asarray(caps, dtype=np.float64)
    s_means = stream.substream("means")
    means = s_means.normal(size=(num_classes, feature_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    means *= separation / np.sqrt(2.0)  # ~separation pairwise for orthogonal units

    def make(n, s: RngStream) -> Dataset:
        counts = largest_remainder_counts(profile.fractions, n)
        labels = np.repeat(np.arange(num_classes), counts).astype(np.int32)
        feats = means[labels] + s.substream("noise").normal(size=(n, feature_dim))
        locs = _gen_locations(labels, num_classes, s.substream("loc"))
        return Dataset(feats, labels, locs, np.ones(n, dtype=np.int32),
                       profile.class_names, caps,
                       {"generator": "cluster", "separation": separation})

    return make(n_train, stream.substream("train")), make(n_test, stream.substream("test"))


_MOTIFS = ("hbar", "vbar", "cross", "diag", "block", "ring")


def _motif_patch(kind: str, size: int, stream: RngStream) -> np.ndarray:
    """One dense 2-channel patch carrying a class-specific geometric motif."""
    base = 0.1 + 0.05 * stream.uniform(size=(2, size, size))  # nonzero background
    r0 = int(stream.integers(1, size - 3))
    c0 = int(stream.integers(1, size - 3))
    amp = 0.8 + 0.4 * stream.uniform()
    ch = base.copy()
    if kind == "hbar":
        ch[:, r0, :] += amp
    elif kind == "vbar":
        ch[:, :, c0] += amp
    elif kind == "cross":
        ch[:, r0, :] += amp
        ch[:, :, c0] += amp
    elif kind == "diag":
        idx = np.arange(size)
        ch[:, idx, (idx + c0) % size] += amp
    elif kind == "block":
        ch[:, r0 : r0 + 3, c0 : c0 + 3] += amp
    else:  # ring
        ch[:, r0 : r0 + 3, c0] += amp
        ch[:, r0 : r0 + 3, min(c0 + 2, size - 1)] += amp
        ch[:, r0, c0 : c0 + 3] += amp
        ch[:, min(r0 + 2, size - 1), c0 : c0 + 3] += amp
    ch[1] *= 0.5  # intensity channel dimmer than depth channel
    return ch


def gen_patch_dataset(profile: ClassProfile, patch_size: int, n: int,
                      stream: RngStream, channels: int = 2,
                      zero_fill: float = 0.8, caps=DEFAULT_CAPS) -> Dataset:
    """2-channel sparse patches with class-specific motifs.

    Exactly round(zero_fill * pixels) positions per sample are zeroed
    (no interpolation: empty cells stay zero), exercising the conv path
    on sparse inputs.
    """
    if patch_size < 8:
        raise ValueError("patch_size must be >= 8")
    if channels != 2:
        raise ValueError("patch datasets are 2-channel (depth + intensity)")
    num_classes = len(profile.class_names)
    caps = np.asarray(caps, dtype=np.float64)
    counts = largest_remainder_counts(profile.fractions, n)
    labels = np.repeat(np.arange(num_classes), counts).astype(np.int32)
    feats = np.zeros((n, 2, patch_size, patch_size))
    s_patch = stream.substream("patch")
    s_fill = stream.substream("fill")
    n_zero = int(round(zero_fill * patch_size * patch_size))
    for i in range(n):
        kind = _MOTIFS[labels[i] % len(_MOTIFS)]
        patch = _motif_patch(kind, patch_size, s_patch)
        holes = s_fill.permutation(patch_size * patch_size)[:n_zero]
        flat = patch.reshape(2, -1)
        flat[:, holes] = 0.0
        feats[i] = flat.reshape(2, patch_size, patch_size)
    locs = _gen_locations(labels, num_classes, stream.substream("loc"))
    return Dataset(feats, labels, locs, np.ones(n, dtype=np.int32),
                   profile.class_names, caps,
                   {"generator": "patch", "zero_fill": zero_fill})


@dataclass
class ProposalReport:
    dropped_indices: np.ndarray  # source indices missed by the simulated detector
    dropped_class_counts: np.ndarray
    surviving_class_counts: np.ndarray
    background_count: int
    midband_count: int


def simulate_proposals(dataset: Dataset, pp: ProposalProfile, stream: RngStream,
                       test_band: bool = False):
    """Replace the RGB detector with a per-class recall simulator.

    Each true object survives with probability recall(class); survivors get
    a simulated IoU in the positive band and keep their class and location
    ground truth unchanged. Background proposals are injected at the
    configured fraction with IoU in the background band and loc-mask 0.
    With test_band=True, extra ignore-band (IoU 0.2-0.5) samples are added
    and marked Background, mirroring the harder test split.
    """
    recall = np.asarray(pp.recall, dtype=np.float64)
    if recall.size != dataset.num_classes:
        raise ValueError("one recall value per dataset class required")
    n = len(dataset)
    s_surv = stream.substream("survive")
    s_iou = stream.substream("iou")
    s_bg = stream.substream("background")

    survive = s_surv.uniform(size=n) < recall[dataset.labels]
    surv_idx = np.nonzero(survive)[0]
    dropped = np.nonzero(~survive)[0]
    surv = dataset.subset(surv_idx)
    lo, hi = pp.iou_positive
    iou = lo + (hi - lo) * s_iou.uniform(size=surv_idx.size)

    parts_feats = [surv.features]
    parts_labels = [surv.labels]
    parts_locs = [surv.locations]
    parts_mask = [surv.loc_mask]
    parts_iou = [iou]

    class_names = tuple(dataset.class_names) + (BACKGROUND,)
    bg_class = dataset.num_classes

    n_bg = 0
    if pp.background_fraction > 0:
        n_bg = int(round(pp.background_fraction * surv_idx.size / (1.0 - pp.background_fraction)))
        feat_shape = (n_bg,) + dataset.features.shape[1:]
        scale = float(np.std(dataset.features)) or 1.0
        parts_feats.append(s_bg.normal(size=feat_shape) * scale)
        parts_labels.append(np.full(n_bg, bg_class, dtype=np.int32))
        parts_locs.append(np.zeros((n_bg, 4)))
        parts_mask.append(np.zeros(n_bg, dtype=np.int32))
        blo, bhi = pp.iou_background
        parts_iou.append(blo + (bhi - blo) * s_bg.uniform(size=n_bg))

    n_mid = 0
    if test_band and pp.midband_fraction > 0:
        s_mid = stream.substream("midband")
        n_mid = int(round(pp.midband_fraction * surv_idx.size))
        pick = s_mid.permutation(surv_idx.size)[:n_mid]
        noisy = surv.features[pick] + 0.5 * s_mid.normal(size=(n_mid,) + dataset.features.shape[1:])
        parts_feats.append(noisy)
        parts_labels.append(np.full(n_mid, bg_class, dtype=np.int32))
        parts_locs.append(np.zeros((n_mid, 4)))
        parts_mask.append(np.zeros(n_mid, dtype=np.int32))
        mlo, mhi = pp.iou_midband
        parts_iou.append(mlo + (mhi - mlo) * s_mid.uniform(size=n_mid))

    pool = Dataset(
        np.concatenate(parts_feats),
        np.concatenate(parts_labels),
        np.concatenate(parts_locs),
        np.concatenate(parts_mask),
        class_names,
        dataset.caps,
        {"generator": "proposals", "source": dataset.meta.get("generator", "unknown")},
        {"iou": np.concatenate(parts_iou)},
    )
    report = ProposalReport(
        dropped_indices=dropped,
        dropped_class_counts=np.bincount(dataset.labels[dropped], minlength=dataset.num_classes),
        surviving_class_counts=np.bincount(surv.labels, minlength=dataset.num_classes),
        background_count=n_bg,
        midband_count=n_mid,
    )
    return pool, report


# -- on-disk container --------------------------------------------------------

_FILES = ("features", "labels", "locations", "locmask")


def dataset_write(path, dataset: Dataset) -> None:
    """Write the dataset container: a directory with a JSON manifest and one
    binary tensor file per array."""
    os.makedirs(path, exist_ok=True)
    write_tensor(os.path.join(path, "features.bin"), dataset.features)
    write_tensor(os.path.join(path, "labels.bin"), dataset.labels.astype(np.int32))
    write_tensor(os.path.join(path, "locations.bin"), dataset.locations)
    write_tensor(os.path.join(path, "locmask.bin"), dataset.loc_mask.astype(np.int32))
    for name, arr in sorted(dataset.extras.items()):
        write_tensor(os.path.join(path, f"extra_{name}.bin"), arr)
    manifest = {
        "format": "alforge-dataset",
        "version": 1,
        "samples": len(dataset),
        "classes": list(dataset.class_names),
        "feature_shape": list(dataset.features.shape[1:]),
        "caps": list(map(float, dataset.caps)),
        "extras": sorted(dataset.extras),
        "meta": dataset.meta,
    }
    with open(os.path.join(path, "manifest"), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")


def dataset_read(path) -> Dataset:
    mpath = os.path.join(path, "manifest")
    if not os.path.exists(mpath):
        raise FormatError(f"missing manifest in {path}", 0)
    with open(mpath) as f:
        manifest = json.load(f)
    if manifest.get("format") != "alforge-dataset":
        raise FormatError(f"not a dataset container: {path}", 0)
    arrays = {name: read_tensor(os.path.join(path, f"{name}.bin")) for name in _FILES}
    extras = {name: read_tensor(os.path.join(path, f"extra_{name}.bin"))
              for name in manifest.get("extras", [])}
    ds = Dataset(arrays["features"], arrays["labels"], arrays["locations"],
                 arrays["locmask"], tuple(manifest["classes"]),
                 np.asarray(manifest["caps"], dtype=np.float64),
                 manifest.get("meta", {}), extras)
    if len(ds) != manifest["samples"]:
        raise FormatError("manifest sample count does not match features file", 0)
    return ds
