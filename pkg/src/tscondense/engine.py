"""The condensation loop: multi-view augmentation, dual-domain unrolled
training on the synthetic set, surrogate matching losses, and the meta-update.

Per meta-epoch, for every view of the synthetic data and every enabled
domain, a (theta_0, theta_M) pair is drawn from the expert trajectories, the
network is trained N traced SGD steps on the view, and two surrogate losses
compare the result against theta_M: the normalized multi-step parameter
distance and the squared distance of batch-mean embeddings. The summed loss
is back-propagated through the whole unroll into the synthetic values and the
learnable inner-loop learning rate, which take one SGD-with-momentum step.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import models as md
from .autodiff import FlatParams, Tape, Tensor
from .data import LabeledSeriesSet, SyntheticSet
from .errors import ArtifactError, ConfigError, NumericalError
from .expert import TrajectoryStore, inline_train_m, sample_pair
from .rng import substream
from .spectral import dft_forward, dft_inverse, freq_input, low_pass, perturb_magnitude, perturb_phase

log = logging.getLogger(__name__)

VIEW_KINDS = ("raw", "lpf", "pp", "mp")
DEN_GUARD = 1e-12  # below this, the matching denominator is degenerate
INNER_LR_FLOOR = 1e-8


@dataclass(frozen=True)
class CondenseConfig:
    """Every knob of the condensation loop (JSON schema of the CLI)."""

    spc: int = 1
    inner_steps: int = 10          # N: traced steps on the synthetic set
    real_steps: int = 1000         # M: real-data iterations between the pair
    emb_weight: float = 1.0        # scale between gradient and embedding losses
    meta_lr: float = 1.0           # SGD learning rate on the synthetic set
    meta_momentum: float = 0.5
    meta_epochs: int = 2000
    views: tuple[str, ...] = VIEW_KINDS
    keep_ratio: float = 0.5
    sigma_phase: float = 0.1
    sigma_mag: float = 0.1
    use_augmentation: bool = True  # multi-view flag; off -> raw view only
    use_freq_domain: bool = True   # dual-domain flag; off -> time only
    use_emb_matching: bool = True  # embedding-loss flag
    expert_mode: str = "trajectory"  # or "inline": retrain M steps on the fly
    real_batch_size: int = 256
    inline_lr: float = 0.01
    init: str = "kmeans"           # or "random"
    inner_lr_init: float = 1e-3
    inner_lr_meta_lr: float = 1e-6  # separate tiny rate for the learnable inner lr
    snapshot_every: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.inner_steps < 1 or self.real_steps < 1:
            raise ConfigError("inner_steps and real_steps must be >= 1")
        if self.inner_steps >= self.real_steps:
            log.warning(
                "inner_steps (%d) >= real_steps (%d): unrolled training may overfit the "
                "synthetic set", self.inner_steps, self.real_steps,
            )
        if self.emb_weight < 0:
            raise ConfigError("emb_weight must be >= 0")
        if self.meta_lr <= 0 or self.inner_lr_meta_lr < 0:
            raise ConfigError("meta_lr must be positive and inner_lr_meta_lr >= 0")
        if self.meta_epochs < 0 or self.spc < 1:
            raise ConfigError("meta_epochs must be >= 0 and spc >= 1")
        if self.expert_mode not in ("trajectory", "inline"):
            raise ConfigError(f"unknown expert_mode '{self.expert_mode}'")
        if self.init not in ("kmeans", "random"):
            raise ConfigError(f"unknown initializer '{self.init}'")
        for v in self.views:
            if v not in VIEW_KINDS:
                raise ConfigError(f"unknown view kind '{v}'")
        if not self.views:
            raise ConfigError("need at least one view")

    @property
    def active_views(self) -> tuple[str, ...]:
        return self.views if self.use_augmentation else ("raw",)

    @property
    def domains(self) -> tuple[str, ...]:
        return ("time", "freq") if self.use_freq_domain else ("time",)

    def with_ablation(self, level: str) -> "CondenseConfig":
        """Map an ablation name to flag settings: base, a, at, atm."""
        flags = {
            "base": (False, False, False),
            "a": (True, False, False),
            "at": (True, True, False),
            "atm": (True, True, True),
        }
        if level not in flags:
            raise ConfigError(f"unknown ablation level '{level}' (use base|a|at|atm)")
        aug, freq, emb = flags[level]
        return replace(
            self, use_augmentation=aug, use_freq_domain=freq, use_emb_matching=emb
        )

    def to_json(self) -> dict:
        out = asdict(self)
        out["views"] = list(self.views)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "CondenseConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown condense config fields: {sorted(unknown)}")
        kwargs = dict(obj)
        if "views" in kwargs:
            kwargs["views"] = tuple(kwargs["views"])
        return cls(**kwargs)


@dataclass
class LossRow:
    epoch: int
    view: str
    domain: str
    grad_loss: float
    emb_loss: float


@dataclass
class EpochRecord:
    epoch: int
    rows: list[LossRow]
    total: float
    inner_lr: float
    seconds: float


@dataclass
class LossReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)

    CSV_COLUMNS = ("epoch", "view", "domain", "grad_loss", "emb_loss", "total", "inner_lr", "seconds")

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.CSV_COLUMNS)
            for rec in self.epochs:
                for row in rec.rows:
                    writer.writerow(
                        [rec.epoch, row.view, row.domain, repr(row.grad_loss),
                         repr(row.emb_loss), repr(rec.total), repr(rec.inner_lr),
                         f"{rec.seconds:.6f}"]
                    )


# ---------------------------------------------------------------------------
# pieces of one meta-step
# ---------------------------------------------------------------------------


def augment_views(
    s_values: Tensor, cfg: CondenseConfig, rng: np.random.Generator
) -> list[tuple[str, Tensor]]:
    """Sequential augmentation chain, tape-connected to the synthetic values.

    raw = S; lpf = IFT(LPF(FT(raw))); pp perturbs the phase of lpf's
    spectrum; mp perturbs the magnitude of pp's spectrum. Noise is freshly
    drawn from ``rng`` on every call. With augmentation disabled only the raw
    view is returned.
    """
    wanted = cfg.active_views
    chain: dict[str, Tensor] = {"raw": s_values}
    if any(v != "raw" for v in wanted):
        lpf = dft_inverse(low_pass(dft_forward(s_values), cfg.keep_ratio))
        chain["lpf"] = lpf
        if "pp" in wanted or "mp" in wanted:
            pp = dft_inverse(perturb_phase(dft_forward(lpf), cfg.sigma_phase, rng))
            chain["pp"] = pp
            if "mp" in wanted:
                chain["mp"] = dft_inverse(
                    perturb_magnitude(dft_forward(pp), cfg.sigma_mag, rng)
                )
    return [(v, chain[v]) for v in wanted]


def inner_train(
    view: Tensor,
    labels: np.ndarray,
    theta0: FlatParams,
    layout: md.ModelLayout,
    n_steps: int,
    inner_lr,
) -> Tensor:
    """N traced full-batch SGD steps on the view; returns theta_N on tape.

    theta_0 enters as a constant; gradients flow into the view and the
    (possibly learnable) inner learning rate through every step.
    """
    if n_steps < 1:
        raise ConfigError("inner_train needs n_steps >= 1")
    theta = ad.leaf(theta0.data)
    for _ in range(n_steps):
        logits, _ = md.forward(layout, theta, view)
        loss = ad.softmax_cross_entropy(logits, labels)
        (grad,) = ad.backward(loss, [theta], create_graph=True)
        theta = ad.traced_sgd_step(theta, grad, inner_lr)
    return theta


def grad_match_loss(theta_n: Tensor, theta_m: FlatParams, theta0: FlatParams) -> Tensor:
    """||theta_N - theta_M||^2 / ||theta_0 - theta_M||^2 (constants below)."""
    den = float(((theta0.data - theta_m.data) ** 2).sum())
    if den <= DEN_GUARD:
        raise NumericalError(f"degenerate matching denominator ({den:.3e})")
    num = ad.squared_l2(ad.sub(theta_n, theta_m.data))
    return ad.scalar_mul(num, 1.0 / den)


def emb_match_loss(
    view: Tensor,
    theta_n: Tensor,
    theta_m: FlatParams,
    layout: md.ModelLayout,
) -> Tensor:
    """Squared distance of batch-mean embeddings of the synthetic view under
    theta_N (trained on S) and theta_M (trained on real data, constant)."""
    _, emb_n = md.forward(layout, theta_n, view)
    _, emb_m = md.forward(layout, theta_m, view)
    diff = ad.sub(ad.mean_axes(emb_n, (0,)), ad.mean_axes(emb_m, (0,)))
    return ad.squared_l2(diff)


@dataclass
class _MetaState:
    velocity_values: np.ndarray
    velocity_lr: float = 0.0


def _domain_view(view: Tensor, domain: str) -> Tensor:
    return view if domain == "time" else freq_input(dft_forward(view))


def meta_step(
    synth: SyntheticSet,
    store: TrajectoryStore,
    cfg: CondenseConfig,
    rng: np.random.Generator,
    state: Optional[_MetaState] = None,
    real: Optional[LabeledSeriesSet] = None,
    epoch: int = 0,
) -> tuple[SyntheticSet, EpochRecord, _MetaState]:
    """One pass of the view/domain loop plus the momentum update of S."""
    t_start = time.perf_counter()
    if state is None:
        state = _MetaState(np.zeros_like(synth.values))
    layouts = {d: md.build(store.spec_for(d)) for d in cfg.domains}
    _check_layouts(synth, layouts, cfg)

    rows: list[LossRow] = []
    with Tape():
        s_vals = ad.leaf(synth.values)
        lr_t = ad.leaf(np.asarray(synth.inner_lr))
        total: Optional[Tensor] = None
        for view_kind, view in augment_views(s_vals, cfg, rng):
            for domain in cfg.domains:
                theta0, theta_m = _draw_pair(store, cfg, rng, domain, real)
                net_input = _domain_view(view, domain)
                theta_n = inner_train(
                    net_input, synth.labels, theta0, layouts[domain], cfg.inner_steps, lr_t
                )
                try:
                    l_grad = grad_match_loss(theta_n, theta_m, theta0)
                except NumericalError as exc:
                    log.warning("skipping %s/%s term at epoch %d: %s", view_kind, domain, epoch, exc)
                    rows.append(LossRow(epoch, view_kind, domain, float("nan"), 0.0))
                    continue
                term = l_grad
                emb_val = 0.0
                if cfg.use_emb_matching and cfg.emb_weight > 0.0:
                    l_emb = emb_match_loss(net_input, theta_n, theta_m, layouts[domain])
                    term = ad.add(term, ad.scalar_mul(l_emb, cfg.emb_weight))
                    emb_val = float(l_emb.data)
                rows.append(LossRow(epoch, view_kind, domain, float(l_grad.data), emb_val))
                total = term if total is None else ad.add(total, term)
        if total is None:
            raise NumericalError(f"all matching terms degenerate at epoch {epoch}")
        if not np.isfinite(total.data):
            raise NumericalError(f"non-finite total loss at epoch {epoch}")
        g_values, g_lr = ad.backward(total, [s_vals, lr_t])

    state.velocity_values = cfg.meta_momentum * state.velocity_values + g_values.data
    state.velocity_lr = cfg.meta_momentum * state.velocity_lr + float(g_lr.data)
    new_values = synth.values - cfg.meta_lr * state.velocity_values
    new_lr = max(synth.inner_lr - cfg.inner_lr_meta_lr * state.velocity_lr, INNER_LR_FLOOR)
    updated = SyntheticSet(new_values, synth.labels.copy(), synth.num_classes, new_lr)
    record = EpochRecord(
        epoch=epoch,
        rows=rows,
        total=float(total.data),
        inner_lr=new_lr,
        seconds=time.perf_counter() - t_start,
    )
    return updated, record, state


def _draw_pair(store, cfg, rng, domain, real):
    if cfg.expert_mode == "trajectory":
        theta0, theta_m, _ = sample_pair(store, cfg.real_steps, rng, domain)
        return theta0, theta_m
    if real is None:
        raise ConfigError("inline expert mode needs the real dataset")
    trajs = store.for_domain(domain)
    traj = trajs[rng.integers(len(trajs))]
    start = int(rng.integers(len(traj.iterations)))
    layout = md.build(traj.spec).layout
    theta0 = FlatParams(layout, traj.checkpoints[start].copy())
    theta_m = inline_train_m(
        real, theta0, traj.spec, domain, cfg.real_steps, cfg.real_batch_size, cfg.inline_lr, rng
    )
    return theta0, theta_m


def _check_layouts(synth: SyntheticSet, layouts, cfg: CondenseConfig) -> None:
    time_spec = layouts["time"].spec
    if (synth.values.shape[1], synth.values.shape[2]) != (
        time_spec.input_channels,
        time_spec.input_length,
    ):
        raise ArtifactError(
            f"synthetic shape {synth.values.shape[1:]} does not match the time-domain "
            f"architecture ({time_spec.input_channels}, {time_spec.input_length})"
        )
    if time_spec.num_classes != synth.num_classes:
        raise ArtifactError("class count mismatch between synthetic set and architecture")
    if "freq" in cfg.domains:
        fspec = layouts["freq"].spec
        expect = md.freq_arch_of(time_spec)
        if (fspec.input_channels, fspec.input_length) != (
            expect.input_channels,
            expect.input_length,
        ):
            raise ArtifactError(
                "frequency-domain architecture does not match the stacked-spectrum "
                f"encoding: expected ({expect.input_channels}, {expect.input_length}), "
                f"got ({fspec.input_channels}, {fspec.input_length})"
            )


def run(
    real: LabeledSeriesSet,
    init: SyntheticSet,
    store: TrajectoryStore,
    cfg: CondenseConfig,
    snapshot_hook: Optional[Callable[[int, SyntheticSet], None]] = None,
) -> tuple[SyntheticSet, LossReport]:
    """Full condensation: meta_epochs of meta_step, deterministic per seed."""
    synth = init.copy()
    report = LossReport(
        meta={
            "config": cfg.to_json(),
            "views": list(cfg.active_views),
            "domains": list(cfg.domains),
        }
    )
    rng = substream(cfg.seed, "condense")
    state: Optional[_MetaState] = None
    for epoch in range(cfg.meta_epochs):
        try:
            synth, record, state = meta_step(
                synth, store, cfg, rng, state, real=real, epoch=epoch
            )
        except NumericalError as exc:
            log.warning("meta-epoch %d aborted: %s", epoch, exc)
            report.failures.append({"epoch": epoch, "error": str(exc)})
            continue
        report.epochs.append(record)
        if cfg.snapshot_every and snapshot_hook and (epoch + 1) % cfg.snapshot_every == 0:
            snapshot_hook(epoch + 1, synth)
    return synth, report
