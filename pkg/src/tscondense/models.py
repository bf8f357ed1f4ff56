"""MLP and 1-D CNN families used for condensation, evaluation, and NAS.

Architectures are fully described by an ArchSpec; ``build`` turns a spec
into a deterministic parameter layout and ``forward`` runs the network from
a flat parameter vector, returning logits and the penultimate ("embedding")
activation. When the parameter vector is a tape tensor the whole forward is
differentiable, including w.r.t. the flat vector itself.

CNN blocks are conv(k=3, stride 1, same padding) -> norm -> activation ->
pool-by-2, followed by global average pooling over time and a linear
classifier. MLPs use flattened input and shared-width hidden layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import FlatParams, ParamLayout, Tensor
from .errors import ConfigError, ShapeError

KINDS = ("mlp", "cnn")
NORMS = ("none", "batch", "instance", "layer")
ACTIVATIONS = ("relu", "leaky-relu", "sigmoid")
POOLINGS = ("none", "max", "mean")

CONV_KERNEL = 3  # fixed 3x1 kernel, stride 1
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ArchSpec:
    kind: str
    depth: int
    width: int
    norm: str
    activation: str
    pooling: str
    input_channels: int
    input_length: int
    num_classes: int

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown kind '{self.kind}'")
        if self.norm not in NORMS:
            raise ConfigError(f"unknown norm '{self.norm}'")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation '{self.activation}'")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"unknown pooling '{self.pooling}'")
        if self.depth < 1 or self.width < 1:
            raise ConfigError("depth and width must be >= 1")
        if self.input_channels < 1 or self.input_length < 1 or self.num_classes < 2:
            raise ConfigError("invalid input/class dimensions")

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "depth": self.depth,
            "width": self.width,
            "norm": self.norm,
            "activation": self.activation,
            "pooling": self.pooling,
            "input_channels": self.input_channels,
            "input_length": self.input_length,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ArchSpec":
        try:
            return cls(**{k: obj[k] for k in (
                "kind", "depth", "width", "norm", "activation", "pooling",
                "input_channels", "input_length", "num_classes")})
        except KeyError as exc:
            raise ConfigError(f"arch spec missing field {exc}") from None


def freq_arch_of(spec: ArchSpec) -> ArchSpec:
    """The matching frequency-domain spec: stacked re/im channels, bin axis."""
    return replace(
        spec,
        input_channels=2 * spec.input_channels,
        input_length=spec.input_length // 2 + 1,
    )


@dataclass(frozen=True)
class ModelLayout:
    spec: ArchSpec
    layout: ParamLayout
    embedding_dim: int
    block_lengths: tuple[int, ...] = field(default=())

    @property
    def param_count(self) -> int:
        return self.layout.size


def build(spec: ArchSpec) -> ModelLayout:
    """Deterministic parameter layout for a spec."""
    entries: list[tuple[str, tuple[int, ...]]] = []
    norm_params = spec.norm != "none"
    if spec.kind == "mlp":
        in_dim = spec.input_channels * spec.input_length
        for i in range(spec.depth):
            entries.append((f"fc{i}_w", (in_dim, spec.width)))
            entries.append((f"fc{i}_b", (spec.width,)))
            if norm_params:
                entries.append((f"norm{i}_g", (spec.width,)))
                entries.append((f"norm{i}_b", (spec.width,)))
            in_dim = spec.width
        entries.append(("head_w", (spec.width, spec.num_classes)))
        entries.append(("head_b", (spec.num_classes,)))
        return ModelLayout(spec, ParamLayout(tuple(entries)), spec.width)

    lengths = []
    length = spec.input_length
    in_ch = spec.input_channels
    for i in range(spec.depth):
        entries.append((f"conv{i}_w", (spec.width, in_ch, CONV_KERNEL)))
        entries.append((f"conv{i}_b", (spec.width,)))
        if norm_params:
            entries.append((f"norm{i}_g", (spec.width,)))
            entries.append((f"norm{i}_b", (spec.width,)))
        if spec.pooling != "none":
            length //= 2
            if length < 1:
                raise ConfigError(
                    f"pooling reduces temporal length to 0 at block {i} "
                    f"(input length {spec.input_length}, depth {spec.depth})"
                )
        lengths.append(length)
        in_ch = spec.width
    entries.append(("head_w", (spec.width, spec.num_classes)))
    entries.append(("head_b", (spec.num_classes,)))
    return ModelLayout(spec, ParamLayout(tuple(entries)), spec.width, tuple(lengths))


def init_params(layout: ModelLayout, rng: np.random.Generator) -> FlatParams:
    """Fan-in-scaled uniform weights, zero biases, unit norm scales."""
    arrays: dict[str, np.ndarray] = {}
    for name, shape in layout.layout.entries:
        if name.endswith("_w"):
            fan_in = int(np.prod(shape[:-1])) if name.startswith("conv") else shape[0]
            if name.startswith("conv"):
                fan_in = shape[1] * shape[2]
            bound = np.sqrt(3.0 / fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith("_g"):
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = np.zeros(shape)
    return FlatParams.flatten(layout.layout, arrays)


class NormState:
    """Running batch-norm statistics for the untracked training protocol."""

    def __init__(self) -> None:
        self.mean: dict[str, np.ndarray] = {}
        self.var: dict[str, np.ndarray] = {}

    def update(self, key: str, mean: np.ndarray, var: np.ndarray) -> None:
        if key not in self.mean:
            self.mean[key] = mean.copy()
            self.var[key] = var.copy()
        else:
            self.mean[key] = (1 - BN_MOMENTUM) * self.mean[key] + BN_MOMENTUM * mean
            self.var[key] = (1 - BN_MOMENTUM) * self.var[key] + BN_MOMENTUM * var


def _activation(spec: ArchSpec, x: Tensor) -> Tensor:
    if spec.activation == "relu":
        return ad.relu(x)
    if spec.activation == "leaky-relu":
        return ad.leaky_relu(x, 0.01)
    return ad.sigmoid(x)


def _norm(
    spec: ArchSpec,
    x: Tensor,
    gamma: Optional[Tensor],
    beta: Optional[Tensor],
    key: str,
    state: Optional[NormState],
    train: bool,
) -> Tensor:
    if spec.norm == "none":
        return x
    if spec.norm == "instance":
        if x.data.ndim == 2:  # MLP hidden has no time axis; fall back to layer stats
            return ad.layer_norm(x, gamma, beta)
        return ad.instance_norm(x, gamma, beta)
    if spec.norm == "layer":
        return ad.layer_norm(x, gamma, beta)
    # batch norm
    if state is None:
        return ad.batch_norm(x, gamma, beta)
    axes = (0,) if x.data.ndim == 2 else (0, 2)
    if train:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.update(key, mean, var)
    else:
        if key not in state.mean:
            raise ShapeError(f"no running statistics recorded for '{key}'")
        mean, var = state.mean[key], state.var[key]
    shape = tuple(x.data.shape[1] if d == 1 else 1 for d in range(x.data.ndim))
    inv = 1.0 / np.sqrt(var + 1e-5)
    normalized = ad.mul(
        ad.add(x, np.broadcast_to(-mean.reshape(shape), x.data.shape).copy()),
        np.broadcast_to(inv.reshape(shape), x.data.shape).copy(),
    )
    if gamma is None:
        return normalized
    g = ad.broadcast_to(ad.reshape(gamma, shape), x.data.shape)
    b = ad.broadcast_to(ad.reshape(beta, shape), x.data.shape)
    return ad.add(ad.mul(normalized, g), b)


def forward(
    layout: ModelLayout,
    params,
    batch,
    state: Optional[NormState] = None,
    train: bool = True,
) -> tuple[Tensor, Tensor]:
    """Run the network; returns (logits (B, classes), embedding (B, D)).

    ``params`` may be a FlatParams (treated as constants) or a flat Tensor
    (differentiable). ``batch`` is (B, channels, length). Passing a NormState
    switches batch norm to running-statistics mode: updated when ``train`` is
    true, consumed otherwise. Without a state the forward is a pure function
    using batch statistics, as required on the tape.
    """
    spec = layout.spec
    data = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float64)
    if data.ndim != 3 or data.shape[1] != spec.input_channels or data.shape[2] != spec.input_length:
        raise ShapeError(
            f"batch shape {data.shape} does not match spec "
            f"(B, {spec.input_channels}, {spec.input_length})"
        )
    if not isinstance(batch, Tensor):
        batch = ad.leaf(data)
    p = ad.slice_params(params, layout.layout)
    b = data.shape[0]

    if spec.kind == "mlp":
        x = ad.reshape(batch, (b, spec.input_channels * spec.input_length))
        for i in range(spec.depth):
            x = ad.matmul(x, p[f"fc{i}_w"])
            bias = ad.broadcast_to(ad.reshape(p[f"fc{i}_b"], (1, spec.width)), x.data.shape)
            x = ad.add(x, bias)
            gamma = p.get(f"norm{i}_g")
            beta = p.get(f"norm{i}_b")
            x = _norm(spec, x, gamma, beta, f"norm{i}", state, train)
            x = _activation(spec, x)
        emb = x
    else:
        x = batch
        for i in range(spec.depth):
            x = ad.conv1d(x, p[f"conv{i}_w"], padding=CONV_KERNEL // 2)
            bias = ad.broadcast_to(
                ad.reshape(p[f"conv{i}_b"], (1, spec.width, 1)), x.data.shape
            )
            x = ad.add(x, bias)
            gamma = p.get(f"norm{i}_g")
            beta = p.get(f"norm{i}_b")
            x = _norm(spec, x, gamma, beta, f"norm{i}", state, train)
            x = _activation(spec, x)
            if spec.pooling == "max":
                x = ad.max_pool1d(x, 2)
            elif spec.pooling == "mean":
                x = ad.mean_pool1d(x, 2)
        emb = ad.global_avg_pool(x)

    logits = ad.add(
        ad.matmul(emb, p["head_w"]),
        ad.broadcast_to(ad.reshape(p["head_b"], (1, spec.num_classes)), (b, spec.num_classes)),
    )
    return logits, emb


def nas_grid(
    input_channels: int,
    input_length: int,
    num_classes: int,
    depths=(2, 3, 4),
    widths=(32, 64, 128),
    norms=NORMS,
    activations=ACTIVATIONS,
    poolings=POOLINGS,
) -> list[ArchSpec]:
    """CNN search grid; the default axes enumerate 3*3*4*3*3 = 324 specs."""
    grid = []
    for depth in depths:
        for width in widths:
            for norm in norms:
                for act in activations:
                    for pool in poolings:
                        grid.append(
                            ArchSpec(
                                kind="cnn",
                                depth=depth,
                                width=width,
                                norm=norm,
                                activation=act,
                                pooling=pool,
                                input_channels=input_channels,
                                input_length=input_length,
                                num_classes=num_classes,
                            )
                        )
    return grid
