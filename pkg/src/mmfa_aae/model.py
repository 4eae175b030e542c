"""The four trainable sub-networks plus the identity head.

Parameter names are prefixed by sub-network: ``E.`` backbone (feature
extractor), ``Q.`` encoder, ``P.`` decoder, ``D.`` domain discriminator and
``C.`` identity classifier.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .diffcore import LayerSpec, ParameterSet, ShapeError, Tensor, apply_layers, init_layers
from .settings import format_value, parse_value

GROUPS = ("E", "Q", "P", "D", "C")
CHECKPOINT_MAGIC = "MMFA-CKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    mode: str = "vector"
    input_dim: int = 32
    channels: int = 3
    height: int = 8
    width: int = 8
    widths: tuple[int, ...] = (96, 96, 128)
    kernel: int = 3
    in_blocks: int = 2
    hidden: int = 64
    identities: int = 60
    domains: int = 3
    eps: float = 1e-5
    momentum: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in ("vector", "image"):
            raise ValueError(f"model.mode must be 'vector' or 'image', got {self.mode!r}")
        if not self.widths or min(self.widths) < 1:
            raise ValueError("model.widths must be a non-empty list of positive ints")
        if not 0 <= self.in_blocks <= len(self.widths):
            raise ValueError(f"model.in_blocks must lie in [0, {len(self.widths)}]")
        if self.hidden < 1 or self.hidden > self.feature_dim:
            raise ValueError(f"model.hidden ({self.hidden}) must be in [1, feature dim {self.feature_dim}]")
        if self.identities < 2:
            raise ValueError("model.identities must be >= 2")
        if self.domains < 2:
            raise ValueError("model.domains must be >= 2")
        if self.mode == "vector" and self.input_dim < 1:
            raise ValueError("model.input_dim must be positive")
        if self.mode == "image":
            if min(self.channels, self.height, self.width) < 1:
                raise ValueError("image dimensions must be positive")
            if not 1 <= self.kernel <= 5 or max(self.widths) > 32 or self.channels > 32:
                raise ValueError("image mode supports kernels <= 5 and <= 32 channels")

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return (self.input_dim,) if self.mode == "vector" else (self.channels, self.height, self.width)


def backbone_layers(cfg: ModelConfig) -> list[LayerSpec]:
    """Pre-normalized blocks ``norm -> linear -> ReLU``, then a batch-norm neck.

    The first ``in_blocks`` blocks use instance norm, later ones batch norm.
    Image mode pools globally before the neck.
    """
    layers = []
    width_in = cfg.input_dim if cfg.mode == "vector" else cfg.channels
    for b, width in enumerate(cfg.widths):
        kind = "instance_norm" if b < cfg.in_blocks else "batch_norm"
        layers.append(LayerSpec(kind, width_in, width_in, eps=cfg.eps))
        if cfg.mode == "vector":
            layers.append(LayerSpec("dense", width_in, width))
        else:
            layers.append(LayerSpec("conv2d", width_in, width, kernel=cfg.kernel, padding=cfg.kernel // 2))
        layers.append(LayerSpec("relu"))
        width_in = width
    if cfg.mode == "image":
        layers.append(LayerSpec("global_avg_pool"))
    layers.append(LayerSpec("batch_norm", cfg.feature_dim, cfg.feature_dim, eps=cfg.eps))
    return layers


def head_layers(cfg: ModelConfig) -> dict[str, list[LayerSpec]]:
    h = cfg.hidden
    return {
        "Q": [LayerSpec("dense", cfg.feature_dim, h), LayerSpec("relu")],
        "P": [LayerSpec("dense", h, cfg.feature_dim)],
        "D": [LayerSpec("dense", h, h), LayerSpec("relu"), LayerSpec("dense", h, cfg.domains)],
        "C": [LayerSpec("dense", h, h), LayerSpec("relu"), LayerSpec("dense", h, cfg.identities)],
    }


@dataclass
class ModelState:
    config: ModelConfig
    params: ParameterSet
    seed: int = 0
    layers: dict[str, list[LayerSpec]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.layers:
            self.layers = {"E": backbone_layers(self.config), **head_layers(self.config)}

    def group(self, name: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.params.items() if k.startswith(name + ".")}

    def tensors(self, trainable_groups=()) -> dict[str, Tensor]:
        groups = tuple(g + "." for g in trainable_groups)
        return self.params.tensors(lambda k: k.startswith(groups))

    def group_hash(self, names) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params.params):
            if k.split(".", 1)[0] in names:
                h.update(k.encode())
                h.update(self.params.params[k].tobytes())
        return h.hexdigest()


def init_model(config: ModelConfig) -> ModelState:
    config.validate()
    rng = np.random.default_rng(config.seed)
    state = ModelState(config, ParameterSet(momentum=config.momentum), config.seed)
    for g in GROUPS:
        state.params.params.update(init_layers(state.layers[g], rng, prefix=f"{g}."))
    return state


def run_group(state: ModelState, group: str, x: Tensor, tensors=None, mode: str = "train"):
    """Apply one sub-network.  Returns ``(output, batch-norm statistics)``."""
    if tensors is None:
        tensors = state.tensors()
    return apply_layers(state.layers[group], tensors, state.params.buffers, x, mode, prefix=f"{group}.")


def _as_input(state: ModelState, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    expected = state.config.input_shape
    if tuple(x.shape[1:]) != expected:
        raise ShapeError(f"input samples have shape {tuple(x.shape[1:])}, model expects {expected}")
    return x


def backbone(state: ModelState, x, tensors=None, mode: str = "train"):
    return run_group(state, "E", _as_input(state, x), tensors, mode)


def extract_features(state: ModelState, x, mode: str = "eval", tensors=None) -> Tensor:
    """Backbone features X.  Batch statistics from train mode are discarded."""
    out, _ = backbone(state, x, tensors, mode)
    return out


def _head(state, group, inp, tensors, expected_dim):
    inp = inp if isinstance(inp, Tensor) else Tensor(inp)
    if inp.ndim != 2 or inp.shape[1] != expected_dim:
        raise ShapeError(f"{group} expects (n, {expected_dim}) input, got {inp.shape}")
    out, _ = run_group(state, group, inp, tensors)
    return out


def encode(state: ModelState, features, tensors=None) -> Tensor:
    return _head(state, "Q", features, tensors, state.config.feature_dim)


def decode(state: ModelState, codes, tensors=None) -> Tensor:
    return _head(state, "P", codes, tensors, state.config.hidden)


def discriminate(state: ModelState, codes, tensors=None) -> Tensor:
    return _head(state, "D", codes, tensors, state.config.hidden)


def classify_identity(state: ModelState, codes, tensors=None) -> Tensor:
    return _head(state, "C", codes, tensors, state.config.hidden)


def embed(state: ModelState, x) -> np.ndarray:
    """Eval-mode hidden codes H, the retrieval representation."""
    return encode(state, extract_features(state, x, mode="eval")).data


# --- checkpoint file -------------------------------------------------------

def config_lines(config: ModelConfig, prefix: str = "model.") -> list[str]:
    return [f"{prefix}{f.name} = {format_value(getattr(config, f.name))}" for f in fields(config)]


def save_checkpoint(state: ModelState, path) -> None:
    """Text header (version, seed, config, array table) then little-endian float64 payload."""
    lines = [CHECKPOINT_MAGIC, f"format_version = {CHECKPOINT_VERSION}", f"seed = {state.seed}"]
    lines += config_lines(state.config)
    arrays = [("param", k, v) for k, v in sorted(state.params.params.items())]
    arrays += [("buffer", k, v) for k, v in sorted(state.params.buffers.items())]
    for kind, name, arr in arrays:
        lines.append(f"{kind} {name} {','.join(str(s) for s in arr.shape)}")
    lines.append("end_header")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, _, a in arrays)
    Path(path).write_bytes("\n".join(lines).encode("utf-8") + b"\n" + payload)


def load_checkpoint(path) -> ModelState:
    raw = Path(path).read_bytes()
    marker = b"\nend_header\n"
    end = raw.find(marker)
    if not raw.startswith(CHECKPOINT_MAGIC.encode() + b"\n") or end < 0:
        raise CheckpointError(f"{path}: not a checkpoint file")
    lines = raw[:end].decode("utf-8").split("\n")[1:]
    payload = raw[end + len(marker):]
    config = ModelConfig()
    types = {f.name: f.type for f in fields(ModelConfig)}
    seed = None
    version = None
    table = []
    for line in lines:
        if line.startswith(("param ", "buffer ")):
            kind, name, shape = line.split(" ")
            table.append((kind, name, tuple(int(s) for s in shape.split(",") if s)))
            continue
        key, _, value = (s.strip() for s in line.partition("="))
        if key == "format_version":
            version = int(value)
        elif key == "seed":
            seed = int(value)
        elif key.startswith("model.") and key[6:] in types:
            setattr(config, key[6:], parse_value(value, getattr(ModelConfig(), key[6:])))
        else:
            raise CheckpointError(f"{path}: unexpected header line {line!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    expected = sum(8 * int(np.prod(s)) for _, _, s in table)
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    config.validate()
    params = ParameterSet(momentum=config.momentum)
    offset = 0
    for kind, name, shape in table:
        size = 8 * int(np.prod(shape))
        arr = np.frombuffer(payload[offset:offset + size], dtype="<f8").reshape(shape).astype(np.float64)
        offset += size
        (params.params if kind == "param" else params.buffers)[name] = arr
    state = ModelState(config, params, seed if seed is not None else config.seed)
    reference = init_model(config)
    if {k: v.shape for k, v in reference.params.params.items()} != {k: v.shape for k, v in params.params.items()}:
        raise CheckpointError(f"{path}: parameter table does not match the model config")
    return state
