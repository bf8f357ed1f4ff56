"""Expert parameter trajectories: the sampled approximation of p(theta).

Networks are trained on the full real dataset (in the time domain, and in
the frequency domain on DFT-encoded inputs) with plain minibatch SGD, saving
a checkpoint of the flat parameter vector every ``stride`` iterations.
Matching later samples (theta_0, theta_M) pairs from these checkpoints
instead of retraining, which is what makes meta-optimization affordable.

Store layout on disk: ``manifest.json`` plus one little-endian float64
binary per trajectory holding its checkpoints back to back.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import models as md
from .autodiff import FlatParams, Tape
from .data import LabeledSeriesSet
from .errors import ArtifactError, ConfigError, NumericalError
from .rng import substream
from .spectral import dft_forward, freq_input

DOMAINS = ("time", "freq")


def to_freq_dataset(dataset: LabeledSeriesSet) -> LabeledSeriesSet:
    """Re-encode every sample as stacked real/imag half-spectrum channels."""
    values = freq_input(dft_forward(dataset.values)).data
    return LabeledSeriesSet(values, dataset.labels, dataset.num_classes)


def sgd_step(
    layout: md.ModelLayout,
    params: np.ndarray,
    batch: np.ndarray,
    labels: np.ndarray,
    lr: float,
    state: Optional[md.NormState] = None,
) -> float:
    """One untracked SGD step in place; returns the batch loss."""
    with Tape():
        theta = ad.leaf(params)
        logits, _ = md.forward(layout, theta, batch, state=state, train=True)
        loss = ad.softmax_cross_entropy(logits, labels)
        (grad,) = ad.backward(loss, [theta])
    params -= lr * grad.data
    return float(loss.data)


def accuracy(
    layout: md.ModelLayout,
    params: FlatParams,
    dataset: LabeledSeriesSet,
    state: Optional[md.NormState] = None,
    batch_size: int = 512,
) -> float:
    """Untracked classification accuracy; uses running stats when available."""
    hits = 0
    use_state = state if (state and state.mean) else None
    for start in range(0, len(dataset), batch_size):
        chunk = dataset.values[start : start + batch_size]
        logits, _ = md.forward(layout, params, chunk, state=use_state, train=False if use_state else True)
        hits += int((logits.data.argmax(axis=1) == dataset.labels[start : start + batch_size]).sum())
    return hits / len(dataset)


@dataclass
class Trajectory:
    domain: str
    spec: md.ArchSpec
    seed: int
    stride: int
    iterations: np.ndarray  # strictly increasing multiples of stride, from 0
    checkpoints: np.ndarray  # (n_ckpt, param_count)
    batch_size: int
    lr: float
    loss_curve: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.iterations = np.asarray(self.iterations, dtype=np.int64)
        self.checkpoints = np.asarray(self.checkpoints, dtype=np.float64)
        if self.domain not in DOMAINS:
            raise ConfigError(f"unknown domain '{self.domain}'")
        if len(self.iterations) != len(self.checkpoints):
            raise ArtifactError("iteration index / checkpoint count mismatch")
        if len(self.iterations) == 0 or self.iterations[0] != 0:
            raise ArtifactError("trajectory must start with the iteration-0 checkpoint")
        if np.any(np.diff(self.iterations) <= 0) or np.any(self.iterations % self.stride):
            raise ArtifactError("checkpoint iterations must be increasing multiples of the stride")

    @property
    def final_iteration(self) -> int:
        return int(self.iterations[-1])

    def checkpoint_at(self, iteration: int) -> np.ndarray:
        pos = np.searchsorted(self.iterations, iteration)
        if pos >= len(self.iterations) or self.iterations[pos] != iteration:
            raise ArtifactError(f"no checkpoint at iteration {iteration}")
        return self.checkpoints[pos]


@dataclass
class TrajectoryStore:
    trajectories: list[Trajectory] = field(default_factory=list)

    def add(self, traj: Trajectory) -> None:
        self.trajectories.append(traj)

    def for_domain(self, domain: str) -> list[Trajectory]:
        return [t for t in self.trajectories if t.domain == domain]

    def spec_for(self, domain: str) -> md.ArchSpec:
        trajs = self.for_domain(domain)
        if not trajs:
            raise ArtifactError(f"store holds no '{domain}'-domain trajectories")
        specs = {t.spec for t in trajs}
        if len(specs) != 1:
            raise ArtifactError(f"store mixes architectures within domain '{domain}'")
        return trajs[0].spec


def train_expert(
    dataset: LabeledSeriesSet,
    spec: md.ArchSpec,
    domain: str,
    total_iters: int,
    stride: int,
    batch_size: int = 256,
    lr: float = 0.01,
    seed: int = 0,
) -> Trajectory:
    """Train one expert and checkpoint every ``stride`` iterations (incl. 0)."""
    if len(dataset) == 0:
        raise ConfigError("cannot train an expert on an empty dataset")
    if domain not in DOMAINS:
        raise ConfigError(f"unknown domain '{domain}'")
    if stride < 1 or total_iters < 0:
        raise ConfigError("stride must be >= 1 and total_iters >= 0")
    if domain == "freq":
        dataset = to_freq_dataset(dataset)
    if dataset.channels != spec.input_channels or dataset.length != spec.input_length:
        raise ArtifactError(
            f"dataset shape ({dataset.channels}, {dataset.length}) does not match spec "
            f"({spec.input_channels}, {spec.input_length})"
        )
    layout = md.build(spec)
    params = md.init_params(layout, substream(seed, "expert-init", domain)).data.copy()
    batch_rng = substream(seed, "expert-batches", domain)
    bs = min(batch_size, len(dataset))

    iters = [0]
    checkpoints = [params.copy()]
    losses: list[float] = []
    for it in range(1, total_iters + 1):
        idx = batch_rng.choice(len(dataset), size=bs, replace=False)
        try:
            loss = sgd_step(layout, params, dataset.values[idx], dataset.labels[idx], lr)
        except NumericalError as exc:
            raise NumericalError(
                f"expert trajectory (domain={domain}, seed={seed}) aborted at iteration {it}: {exc}"
            ) from exc
        losses.append(loss)
        if it % stride == 0:
            iters.append(it)
            checkpoints.append(params.copy())
    return Trajectory(
        domain=domain,
        spec=spec,
        seed=seed,
        stride=stride,
        iterations=np.asarray(iters),
        checkpoints=np.stack(checkpoints),
        batch_size=bs,
        lr=lr,
        loss_curve=losses,
    )


def inline_train_m(
    dataset: LabeledSeriesSet,
    theta0: FlatParams,
    spec: md.ArchSpec,
    domain: str,
    m_iters: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
) -> FlatParams:
    """Literal M fresh real-data SGD steps from theta0 (untracked)."""
    if domain == "freq":
        dataset = to_freq_dataset(dataset)
    layout = md.build(spec)
    if theta0.layout.size != layout.layout.size:
        raise ArtifactError("theta0 does not match the architecture layout")
    params = theta0.data.copy()
    bs = min(batch_size, len(dataset))
    for _ in range(m_iters):
        idx = rng.choice(len(dataset), size=bs, replace=False)
        sgd_step(layout, params, dataset.values[idx], dataset.labels[idx], lr)
    return FlatParams(theta0.layout, params)


def sample_pair(
    store: TrajectoryStore,
    m_iters: int,
    rng: np.random.Generator,
    domain: str = "time",
) -> tuple[FlatParams, FlatParams, Trajectory]:
    """Uniformly pick a trajectory then a start index i with i + M on record."""
    if m_iters <= 0:
        raise ConfigError("M must be positive")
    eligible = []
    for traj in store.for_domain(domain):
        if m_iters % traj.stride == 0 and traj.final_iteration >= m_iters:
            eligible.append(traj)
    if not eligible:
        raise ArtifactError(
            f"no '{domain}' trajectory offers checkpoint pairs {m_iters} iterations apart"
        )
    traj = eligible[rng.integers(len(eligible))]
    max_start = traj.final_iteration - m_iters
    start = int(rng.integers(max_start // traj.stride + 1)) * traj.stride
    layout = md.build(traj.spec).layout
    theta0 = FlatParams(layout, traj.checkpoint_at(start).copy())
    theta_m = FlatParams(layout, traj.checkpoint_at(start + m_iters).copy())
    return theta0, theta_m, traj


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_store(store: TrajectoryStore, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, traj in enumerate(store.trajectories):
        fname = f"trajectory_{i:03d}.bin"
        (path / fname).write_bytes(traj.checkpoints.astype("<f8").tobytes())
        entries.append(
            {
                "file": fname,
                "domain": traj.domain,
                "arch": traj.spec.to_json(),
                "seed": traj.seed,
                "stride": traj.stride,
                "iterations": traj.iterations.tolist(),
                "batch_size": traj.batch_size,
                "lr": traj.lr,
                "loss_curve": traj.loss_curve,
                "param_count": int(traj.checkpoints.shape[1]),
            }
        )
    (path / "manifest.json").write_text(json.dumps({"trajectories": entries}, indent=2))


def load_store(path, expect_spec: Optional[md.ArchSpec] = None, domain: str = "time") -> TrajectoryStore:
    """Load a store; optionally refuse if the named domain's arch differs."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise ArtifactError(f"{path}: no manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{path}: corrupt manifest: {exc}") from None
    store = TrajectoryStore()
    for entry in manifest.get("trajectories", []):
        spec = md.ArchSpec.from_json(entry["arch"])
        count = md.build(spec).param_count
        if count != entry["param_count"]:
            raise ArtifactError(
                f"{entry['file']}: manifest says {entry['param_count']} parameters, "
                f"architecture implies {count}"
            )
        raw = (path / entry["file"]).read_bytes()
        data = np.frombuffer(raw, dtype="<f8")
        n_ckpt = len(entry["iterations"])
        if data.size != n_ckpt * count:
            raise ArtifactError(
                f"{entry['file']}: binary holds {data.size} values, "
                f"expected {n_ckpt} x {count}"
            )
        store.add(
            Trajectory(
                domain=entry["domain"],
                spec=spec,
                seed=entry["seed"],
                stride=entry["stride"],
                iterations=np.asarray(entry["iterations"]),
                checkpoints=data.reshape(n_ckpt, count).copy(),
                batch_size=entry["batch_size"],
                lr=entry["lr"],
                loss_curve=list(entry.get("loss_curve", [])),
            )
        )
    if expect_spec is not None:
        found = store.spec_for(domain)
        if found != expect_spec:
            raise ArtifactError(
                "store architecture mismatch:\n"
                f"  requested: {expect_spec.to_json()}\n"
                f"  stored:    {found.to_json()}"
            )
    return store


def time_accuracy_probe(
    dataset: LabeledSeriesSet, traj: Trajectory, sample: int = 512
) -> float:
    """Accuracy of a trajectory's final checkpoint on (a sample of) its data."""
    if traj.domain == "freq":
        dataset = to_freq_dataset(dataset)
    layout = md.build(traj.spec)
    n = min(sample, len(dataset))
    subset = LabeledSeriesSet(dataset.values[:n], dataset.labels[:n], dataset.num_classes)
    return accuracy(layout, FlatParams(layout.layout, traj.checkpoints[-1]), subset)
