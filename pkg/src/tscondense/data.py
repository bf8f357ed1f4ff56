"""Dataset ingestion, synthetic benchmarks, and coreset initializers.

Two on-disk formats are supported: a flat CSV (label first, channel-major
series values, self-describing header) and the @-header text layout common
to public time-series archives. The synthetic benchmark assigns each class a
set of active frequency bins, which makes class structure verifiable against
the DFT in closed form.
"""

from __future__ import annotations

import json
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, ShapeError
from .rng import substream


@dataclass
class LabeledSeriesSet:
    """Real series (n, channels, length) with integer class labels (n,)."""

    values: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.values.ndim != 3:
            raise ShapeError(f"values must be (n, channels, length), got {self.values.shape}")
        if self.labels.shape != (self.values.shape[0],):
            raise ShapeError("labels do not match sample count")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ShapeError("label id out of range")

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def length(self) -> int:
        return self.values.shape[2]

    def __len__(self) -> int:
        return self.values.shape[0]

    def class_indices(self, c: int) -> np.ndarray:
        return np.nonzero(self.labels == c)[0]


@dataclass
class SyntheticSet:
    """The learnable condensed dataset: values plus an inner learning rate.

    Labels are fixed and balanced: ``spc`` samples for each class, grouped
    class-major. Only ``values`` and ``inner_lr`` are learnable.
    """

    values: np.ndarray
    labels: np.ndarray
    num_classes: int
    inner_lr: float = 1e-3

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.values.ndim != 3:
            raise ShapeError("synthetic values must be (n, channels, length)")
        counts = np.bincount(self.labels, minlength=self.num_classes)
        if len(set(counts.tolist())) != 1:
            raise ShapeError("synthetic labels must be balanced across classes")
        if self.inner_lr <= 0:
            raise ShapeError("inner_lr must be positive")

    @property
    def spc(self) -> int:
        return len(self.labels) // self.num_classes

    def copy(self) -> "SyntheticSet":
        return SyntheticSet(self.values.copy(), self.labels.copy(), self.num_classes, self.inner_lr)


def balanced_labels(num_classes: int, spc: int) -> np.ndarray:
    return np.repeat(np.arange(num_classes, dtype=np.int64), spc)


# ---------------------------------------------------------------------------
# loading / saving
# ---------------------------------------------------------------------------


def load(path, format: str = "csv") -> LabeledSeriesSet:
    if format == "csv":
        return load_csv(path)
    if format == "ucr-ts":
        return load_ucr_ts(path)
    raise ConfigError(f"unknown dataset format '{format}'")


def load_csv(path) -> LabeledSeriesSet:
    """CSV with header ``label,c0_t0,...``: one row per sample, label first,
    then channel-major flattened values. Channel/length counts come from the
    column names."""
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip()
        if not header:
            raise DataFormatError(f"{path}: no samples (empty file)")
        cols = header.split(",")
        if cols[0] != "label":
            raise DataFormatError(f"{path}: first header column must be 'label'")
        channels, length = 0, 0
        for name in cols[1:]:
            try:
                c, t = name.split("_")
                channels = max(channels, int(c[1:]) + 1)
                length = max(length, int(t[1:]) + 1)
            except (ValueError, IndexError):
                raise DataFormatError(f"{path}: malformed column name '{name}'") from None
        if channels * length != len(cols) - 1:
            raise DataFormatError(f"{path}: header names {len(cols) - 1} columns, "
                                  f"expected {channels}x{length}")
        rows, labels = [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(cols):
                raise DataFormatError(
                    f"{path}: row {lineno} has {len(parts)} columns, expected {len(cols)}"
                )
            try:
                labels.append(int(parts[0]))
                rows.append(np.array(parts[1:], dtype=np.float64))
            except ValueError as exc:
                raise DataFormatError(f"{path}: row {lineno}: {exc}") from None
    if not rows:
        raise DataFormatError(f"{path}: no samples")
    values = np.stack(rows).reshape(len(rows), channels, length)
    labels = np.asarray(labels)
    if labels.min() < 0:
        raise DataFormatError(f"{path}: negative label")
    return LabeledSeriesSet(values, labels, int(labels.max()) + 1)


def save_csv(dataset: LabeledSeriesSet, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["label"] + [
        f"c{c}_t{t}" for c in range(dataset.channels) for t in range(dataset.length)
    ]
    with path.open("w") as fh:
        fh.write(",".join(cols) + "\n")
        flat = dataset.values.reshape(len(dataset), -1)
        for label, row in zip(dataset.labels, flat):
            fh.write(str(int(label)) + "," + ",".join(repr(v) for v in row) + "\n")


def load_ucr_ts(path) -> LabeledSeriesSet:
    """@-header text layout: metadata lines, then ``@data`` followed by
    ``v,..,v:v,..,v:label`` records (one colon-separated block per channel)."""
    path = Path(path)
    rows, labels = [], []
    in_data = False
    label_names: dict[str, int] = {}
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.lower().startswith("@data"):
                in_data = True
                continue
            if line.startswith("@"):
                continue
            if not in_data:
                raise DataFormatError(f"{path}: line {lineno}: data before @data marker")
            blocks = line.split(":")
            if len(blocks) < 2:
                raise DataFormatError(f"{path}: line {lineno}: missing ':label' field")
            label_tok = blocks[-1].strip()
            try:
                label = int(label_tok)
            except ValueError:
                label = label_names.setdefault(label_tok, len(label_names))
            try:
                chans = [np.array(b.split(","), dtype=np.float64) for b in blocks[:-1]]
            except ValueError as exc:
                raise DataFormatError(f"{path}: line {lineno}: {exc}") from None
            if len({c.size for c in chans}) != 1:
                raise DataFormatError(f"{path}: line {lineno}: ragged channel lengths")
            rows.append(np.stack(chans))
            labels.append(label)
    if not rows:
        raise DataFormatError(f"{path}: no samples")
    shapes = {r.shape for r in rows}
    if len(shapes) != 1:
        raise DataFormatError(f"{path}: inconsistent sample shapes {sorted(shapes)}")
    labels = np.asarray(labels)
    labels = labels - labels.min()  # archives sometimes label from 1
    return LabeledSeriesSet(np.stack(rows), labels, int(labels.max()) + 1)


def save_synthetic(synth: SyntheticSet, path, provenance: dict | None = None) -> None:
    """Flat float64 blob + JSON sidecar (shape, labels, inner_lr, provenance)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = path.with_suffix(".bin")
    blob.write_bytes(synth.values.astype("<f8").tobytes())
    sidecar = {
        "shape": list(synth.values.shape),
        "labels": synth.labels.tolist(),
        "num_classes": synth.num_classes,
        "inner_lr": synth.inner_lr,
        "dtype": "<f8",
        "provenance": provenance or {},
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_synthetic(path) -> SyntheticSet:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    shape = tuple(meta["shape"])
    raw = path.with_suffix(".bin").read_bytes()
    values = np.frombuffer(raw, dtype="<f8")
    if values.size != int(np.prod(shape)):
        raise DataFormatError(f"{path}: blob holds {values.size} values, expected {np.prod(shape)}")
    return SyntheticSet(
        values.reshape(shape).copy(),
        np.asarray(meta["labels"]),
        int(meta["num_classes"]),
        float(meta["inner_lr"]),
    )


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def zscore_stats(train: LabeledSeriesSet) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over the training split; std floored at 1e-8."""
    if len(train) == 0:
        raise ConfigError("cannot compute statistics of an empty training set")
    mean = train.values.mean(axis=(0, 2))
    std = np.maximum(train.values.std(axis=(0, 2)), 1e-8)
    return mean, std


def apply_zscore(dataset: LabeledSeriesSet, mean: np.ndarray, std: np.ndarray) -> LabeledSeriesSet:
    values = (dataset.values - mean[None, :, None]) / std[None, :, None]
    return LabeledSeriesSet(values, dataset.labels, dataset.num_classes)


def zscore_normalize(
    train: LabeledSeriesSet, test: LabeledSeriesSet | None = None
) -> tuple[LabeledSeriesSet, LabeledSeriesSet | None]:
    """Standardize both splits with statistics of the training split."""
    mean, std = zscore_stats(train)
    return (
        apply_zscore(train, mean, std),
        apply_zscore(test, mean, std) if test is not None else None,
    )


# ---------------------------------------------------------------------------
# synthetic benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Frequency-signature benchmark: class c emits its own set of bins."""

    num_classes: int
    samples_per_class: int
    channels: int
    length: int
    class_bins: tuple[tuple[int, ...], ...]
    class_amps: tuple[tuple[float, ...], ...]
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.class_bins) != self.num_classes or len(self.class_amps) != self.num_classes:
            raise ConfigError("need one bin/amplitude signature per class")
        half = self.length // 2 + 1
        for bins, amps in zip(self.class_bins, self.class_amps):
            if len(bins) != len(amps):
                raise ConfigError("bins and amplitudes must pair up")
            if any(b < 0 or b >= half for b in bins):
                raise ConfigError(f"active bin out of range [0, {half})")

    def to_json(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "samples_per_class": self.samples_per_class,
            "channels": self.channels,
            "length": self.length,
            "class_bins": [list(b) for b in self.class_bins],
            "class_amps": [list(a) for a in self.class_amps],
            "noise": self.noise,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SynthSpec":
        try:
            return cls(
                num_classes=int(obj["num_classes"]),
                samples_per_class=int(obj["samples_per_class"]),
                channels=int(obj["channels"]),
                length=int(obj["length"]),
                class_bins=tuple(tuple(int(b) for b in bins) for bins in obj["class_bins"]),
                class_amps=tuple(tuple(float(a) for a in amps) for amps in obj["class_amps"]),
                noise=float(obj.get("noise", 0.0)),
                seed=int(obj.get("seed", 0)),
            )
        except KeyError as exc:
            raise ConfigError(f"synth spec missing field {exc}") from None

    @classmethod
    def default(
        cls,
        num_classes: int,
        samples_per_class: int,
        channels: int = 1,
        length: int = 96,
        bins_per_class: int = 2,
        noise: float = 0.0,
        seed: int = 0,
    ) -> "SynthSpec":
        """Disjoint low-frequency signatures, two bins per class by default."""
        half = length // 2 + 1
        needed = num_classes * bins_per_class
        if needed > half - 2:
            raise ConfigError("not enough spectral bins for disjoint class signatures")
        bins = tuple(
            tuple(2 + c * bins_per_class + j for j in range(bins_per_class))
            for c in range(num_classes)
        )
        amps = tuple(
            tuple(1.0 + 0.5 * (j % 2) for j in range(bins_per_class)) for _ in range(num_classes)
        )
        return cls(num_classes, samples_per_class, channels, length, bins, amps, noise, seed)


def _synth_split(spec: SynthSpec, rng: np.random.Generator) -> LabeledSeriesSet:
    n = spec.num_classes * spec.samples_per_class
    t = np.arange(spec.length)
    values = np.zeros((n, spec.channels, spec.length))
    labels = balanced_labels(spec.num_classes, spec.samples_per_class)
    for i, c in enumerate(labels):
        for b, a in zip(spec.class_bins[c], spec.class_amps[c]):
            phase = rng.uniform(0, 2 * np.pi, size=(spec.channels, 1))
            values[i] += a * np.sin(2 * np.pi * b * t[None, :] / spec.length + phase)
    if spec.noise > 0:
        values += rng.normal(0, spec.noise, size=values.shape)
    return LabeledSeriesSet(values, labels, spec.num_classes)


def synth_generate(spec: SynthSpec) -> tuple[LabeledSeriesSet, LabeledSeriesSet]:
    """Train/test splits from disjoint random streams of the same spec."""
    train = _synth_split(spec, substream(spec.seed, "synth", "train"))
    test = _synth_split(spec, substream(spec.seed, "synth", "test"))
    return train, test


# ---------------------------------------------------------------------------
# coreset initializers
# ---------------------------------------------------------------------------


def _require_spc(dataset: LabeledSeriesSet, spc: int) -> None:
    for c in range(dataset.num_classes):
        have = len(dataset.class_indices(c))
        if have < spc:
            raise ConfigError(f"class {c} has {have} samples, need at least {spc}")


def _kmeans_pp_seeds(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(len(x))]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = x[rng.integers(len(x))]
            continue
        centers[j] = x[rng.choice(len(x), p=d2 / total)]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iters: int, tol: float) -> tuple[np.ndarray, float]:
    prev = np.inf
    k = len(centers)
    for _ in range(max_iters):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        inertia = float(d2[np.arange(len(x)), assign].sum())
        for j in range(k):
            members = x[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:  # re-seed an empty cluster on the farthest point
                centers[j] = x[d2.min(axis=1).argmax()]
        if prev - inertia <= tol:
            break
        prev = inertia
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    inertia = float(d2.min(axis=1).sum())
    return centers, inertia


def kmeans(
    x: np.ndarray,
    k: int,
    rng: np.random.Generator,
    max_iters: int = 100,
    tol: float = 1e-6,
    n_init: int = 10,
) -> tuple[np.ndarray, float]:
    """Lloyd's algorithm with k-means++ seeding, best of ``n_init`` restarts.

    Restarts guard against Lloyd's local minima; on small classes the best
    restart reliably reaches the globally optimal partition.
    """
    if k > len(x):
        raise ConfigError(f"cannot place {k} centroids on {len(x)} points")
    best_centers, best_inertia = None, np.inf
    for _ in range(max(1, n_init)):
        centers, inertia = _lloyd(x, _kmeans_pp_seeds(x, k, rng), max_iters, tol)
        if inertia < best_inertia:
            best_centers, best_inertia = centers, inertia
    return best_centers, best_inertia


def kmeans_per_class(
    dataset: LabeledSeriesSet,
    spc: int,
    max_iters: int = 100,
    seed: int = 0,
    inner_lr: float = 1e-3,
) -> SyntheticSet:
    """Per-class k-means centroids on flattened samples (Euclidean)."""
    _require_spc(dataset, spc)
    out = np.zeros((dataset.num_classes * spc, dataset.channels, dataset.length))
    for c in range(dataset.num_classes):
        idx = dataset.class_indices(c)
        flat = dataset.values[idx].reshape(len(idx), -1)
        centers, _ = kmeans(flat, spc, substream(seed, "kmeans", c), max_iters)
        out[c * spc : (c + 1) * spc] = centers.reshape(spc, dataset.channels, dataset.length)
    return SyntheticSet(out, balanced_labels(dataset.num_classes, spc), dataset.num_classes, inner_lr)


def random_select(
    dataset: LabeledSeriesSet, spc: int, seed: int = 0, inner_lr: float = 1e-3
) -> SyntheticSet:
    """Uniform per-class sampling without replacement."""
    _require_spc(dataset, spc)
    out = np.zeros((dataset.num_classes * spc, dataset.channels, dataset.length))
    for c in range(dataset.num_classes):
        idx = dataset.class_indices(c)
        pick = substream(seed, "random-select", c).choice(idx, size=spc, replace=False)
        out[c * spc : (c + 1) * spc] = dataset.values[pick]
    return SyntheticSet(out, balanced_labels(dataset.num_classes, spc), dataset.num_classes, inner_lr)


def herding_select(
    dataset: LabeledSeriesSet, spc: int, inner_lr: float = 1e-3
) -> SyntheticSet:
    """Greedy mean matching: repeatedly add the sample whose inclusion brings
    the running selection mean closest to the class mean."""
    _require_spc(dataset, spc)
    out = np.zeros((dataset.num_classes * spc, dataset.channels, dataset.length))
    for c in range(dataset.num_classes):
        idx = dataset.class_indices(c)
        flat = dataset.values[idx].reshape(len(idx), -1)
        target = flat.mean(axis=0)
        chosen: list[int] = []
        running = np.zeros_like(target)
        for step in range(spc):
            cand_means = (running[None, :] + flat) / (step + 1)
            dists = ((cand_means - target[None, :]) ** 2).sum(axis=1)
            dists[chosen] = np.inf
            best = int(dists.argmin())
            chosen.append(best)
            running = running + flat[best]
        out[c * spc : (c + 1) * spc] = flat[chosen].reshape(spc, dataset.channels, dataset.length)
    return SyntheticSet(out, balanced_labels(dataset.num_classes, spc), dataset.num_classes, inner_lr)


def dataset_hash(dataset: LabeledSeriesSet) -> str:
    h = hashlib.sha256()
    h.update(dataset.values.tobytes())
    h.update(dataset.labels.tobytes())
    return h.hexdigest()[:16]
