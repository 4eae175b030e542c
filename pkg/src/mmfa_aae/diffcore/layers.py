"""Layer specifications with their parameter bundles, plus the sequential forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import ShapeError, Tape, Tensor

LAYER_KINDS = ("dense", "conv2d", "relu", "instance_norm", "batch_norm", "global_avg_pool")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int = 0
    out_dim: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    eps: float = 1e-5
    affine: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.kind in ("dense", "conv2d") and (self.in_dim <= 0 or self.out_dim <= 0):
            raise ValueError(f"{self.kind} needs positive in_dim/out_dim")
        if self.kind in ("instance_norm", "batch_norm") and self.out_dim <= 0:
            raise ValueError(f"{self.kind} needs a positive channel count (out_dim)")
        if self.kind == "conv2d" and (self.kernel <= 0 or self.stride <= 0 or self.padding < 0):
            raise ValueError("conv2d needs kernel, stride > 0 and padding >= 0")

    @classmethod
    def dense_layer(cls, in_dim: int, out_dim: int) -> "LayerSpec":
        return cls("dense", in_dim, out_dim)

    @classmethod
    def norm(cls, kind: str, channels: int, eps: float = 1e-5) -> "LayerSpec":
        return cls(kind, channels, channels, eps=eps)


@dataclass
class ParameterSet:
    """Named trainable arrays plus batch-norm running statistics."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    momentum: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("batch-norm momentum must lie in [0, 1)")

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.momentum,
        )

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def tensors(self, trainable=None) -> dict[str, Tensor]:
        """Wrap parameters as leaf tensors; ``trainable`` filters which get gradients."""
        return {
            k: Tensor(v, requires_grad=trainable is None or trainable(k))
            for k, v in self.params.items()
        }

    def commit_stats(self, updates: dict[str, tuple[np.ndarray, np.ndarray]]) -> None:
        """Fold batch statistics into the running estimates.

        ``momentum`` is the weight of the new batch; the first batch seen
        initializes the running statistics outright.
        """
        m = self.momentum
        for name, (mu, var) in updates.items():
            mean_key, var_key = f"{name}.running_mean", f"{name}.running_var"
            if mean_key not in self.buffers:
                self.buffers[mean_key] = mu.copy()
                self.buffers[var_key] = var.copy()
            else:
                self.buffers[mean_key] = (1.0 - m) * self.buffers[mean_key] + m * mu
                self.buffers[var_key] = (1.0 - m) * self.buffers[var_key] + m * var


def init_layers(layers: list[LayerSpec], rng: np.random.Generator, prefix: str = "") -> dict[str, np.ndarray]:
    """Fan-in scaled uniform weights, zero biases, unit/zero norm affine."""
    params: dict[str, np.ndarray] = {}
    for i, spec in enumerate(layers):
        name = f"{prefix}{i}"
        if spec.kind == "dense":
            bound = np.sqrt(3.0 / spec.in_dim)
            params[f"{name}.weight"] = rng.uniform(-bound, bound, (spec.in_dim, spec.out_dim))
            params[f"{name}.bias"] = np.zeros(spec.out_dim)
        elif spec.kind == "conv2d":
            fan_in = spec.in_dim * spec.kernel * spec.kernel
            bound = np.sqrt(3.0 / fan_in)
            params[f"{name}.weight"] = rng.uniform(
                -bound, bound, (spec.out_dim, spec.in_dim, spec.kernel, spec.kernel)
            )
            params[f"{name}.bias"] = np.zeros(spec.out_dim)
        elif spec.kind == "batch_norm" or (spec.kind == "instance_norm" and spec.affine):
            params[f"{name}.gamma"] = np.ones(spec.out_dim)
            params[f"{name}.beta"] = np.zeros(spec.out_dim)
    return params


def apply_layers(
    layers: list[LayerSpec],
    tensors: dict[str, Tensor],
    buffers: dict[str, np.ndarray],
    x: Tensor,
    mode: str = "train",
    prefix: str = "",
) -> tuple[Tensor, dict[str, tuple[np.ndarray, np.ndarray]]]:
    """Run ``x`` through ``layers``; returns output and fresh batch-norm statistics."""
    stats: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for i, spec in enumerate(layers):
        name = f"{prefix}{i}"
        try:
            if spec.kind == "dense":
                x = ops.dense(x, tensors[f"{name}.weight"], tensors[f"{name}.bias"])
            elif spec.kind == "conv2d":
                x = ops.conv2d(
                    x, tensors[f"{name}.weight"], tensors[f"{name}.bias"], spec.stride, spec.padding
                )
            elif spec.kind == "relu":
                x = ops.relu(x)
            elif spec.kind == "global_avg_pool":
                x = ops.global_avg_pool(x)
            elif spec.kind == "instance_norm":
                _check_channels(x, spec)
                x = ops.instance_norm(
                    x, tensors.get(f"{name}.gamma"), tensors.get(f"{name}.beta"), spec.eps
                )
            elif spec.kind == "batch_norm":
                _check_channels(x, spec)
                x, mu, var = ops.batch_norm(
                    x,
                    tensors[f"{name}.gamma"],
                    tensors[f"{name}.beta"],
                    buffers.get(f"{name}.running_mean"),
                    buffers.get(f"{name}.running_var"),
                    mode,
                    spec.eps,
                )
                if mu is not None:
                    stats[name] = (mu, var)
        except ShapeError as exc:
            raise ShapeError(f"layer {name} ({spec.kind}): {exc}") from exc
        except KeyError as exc:
            raise ValueError(f"layer {name} ({spec.kind}): missing parameter {exc}") from exc
        except ValueError as exc:
            raise ValueError(f"layer {name} ({spec.kind}): {exc}") from exc
    return x, stats


def _check_channels(x: Tensor, spec: LayerSpec) -> None:
    if x.ndim < 2 or x.shape[1] != spec.out_dim:
        raise ShapeError(f"expected {spec.out_dim} channels, got input shape {x.shape}")


def forward(
    layers: list[LayerSpec],
    params: ParameterSet,
    x,
    mode: str = "train",
) -> tuple[Tensor, Tape]:
    """Pure forward pass.

    Parameters and the input become gradient-tracked leaves, collected in the
    returned tape's ``inputs`` under their parameter names (the input as
    ``"input"``).  Batch statistics land in ``tape.stat_updates``; nothing in
    ``params`` is modified.
    """
    tensors = params.tensors()
    x_t = x if isinstance(x, Tensor) else Tensor(x)
    x_t = Tensor(x_t.data, requires_grad=True)
    out, stats = apply_layers(layers, tensors, params.buffers, x_t, mode)
    tape = Tape(out, {**tensors, "input": x_t})
    tape.stat_updates = stats
    return out, tape
