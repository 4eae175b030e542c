"""Synthetic multi-domain corpus and the MMFA1 dataset file format.

Each domain applies its own "style" to shared-kind content.  The linear part
is a per-channel gain and bias after channel mixing.  On top sits a nuisance
component in a low-dimensional style subspace shared by all domains, with a
domain-specific center plus per-sample variation (think illumination within
one camera).  Identities never cross domains, and held-out domains get both
fresh identities and a fresh style.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MMFA1"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """Base class for unreadable dataset files."""


class BadMagicError(DatasetFormatError):
    pass


class TruncatedPayloadError(DatasetFormatError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"payload truncated: expected {expected} bytes, found {actual}")
        self.expected = expected
        self.actual = actual


class HeaderError(DatasetFormatError):
    """Header is malformed or disagrees with the payload."""


@dataclass
class SynthConfig:
    train_domains: int = 3
    heldout_domains: int = 1
    identities: int = 20
    samples_per_identity: int = 4
    mode: str = "vector"
    dim: int = 32
    channels: int = 3
    height: int = 8
    width: int = 8
    prototype_spread: float = 1.0
    view_sigma: float = 0.5
    noise_sigma: float = 0.1
    style_gap: float = 2.0
    style_dims: int = 2
    style_spread: float = 2.0
    style_sigma: float = 0.5
    instance_gain_sigma: float = 0.5
    instance_bias_sigma: float = 1.0
    gain_spread: float = 2.0
    gain_jitter: float = 0.1
    bias_jitter: float = 0.2
    mixing: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.samples_per_identity < 2:
            raise ValueError("samples_per_identity must be >= 2 (probe and gallery views)")
        if self.train_domains < 1 or self.heldout_domains < 0:
            raise ValueError("need >= 1 training domain and >= 0 held-out domains")
        if self.identities < 1:
            raise ValueError("identities must be >= 1")
        if self.mode not in ("vector", "image"):
            raise ValueError(f"mode must be 'vector' or 'image', got {self.mode!r}")
        dims = (self.dim,) if self.mode == "vector" else (self.channels, self.height, self.width)
        if min(dims) < 1:
            raise ValueError("sample dimensions must be positive")
        if self.gain_spread < 1.0:
            raise ValueError("gain_spread must be >= 1")
        if not 0 <= self.style_dims <= self.sample_shape[0]:
            raise ValueError("style_dims must lie in [0, channels]")
        for name in ("prototype_spread", "view_sigma", "noise_sigma", "style_gap", "style_spread",
                     "style_sigma", "instance_gain_sigma", "instance_bias_sigma", "gain_jitter", "bias_jitter", "mixing"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return (self.dim,) if self.mode == "vector" else (self.channels, self.height, self.width)


@dataclass
class DomainSpec:
    name: str
    gain: np.ndarray
    bias: np.ndarray
    mixing: np.ndarray
    noise_sigma: float
    style_basis: np.ndarray | None = None  # (channels, r), orthonormal columns
    style_center: np.ndarray | None = None  # (r,)
    style_sigma: float = 0.0
    instance_gain_sigma: float = 0.0
    instance_bias_sigma: float = 0.0

    def __post_init__(self):
        if (self.gain <= 0).any():
            raise ValueError("style gains must be positive")
        if np.linalg.cond(self.mixing) > 100:
            raise ValueError("mixing matrix is ill-conditioned")

    def apply(self, content: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Style a batch of content, shape (n, channels, ...)."""
        mixed = np.einsum("ij,nj...->ni...", self.mixing, content)
        view = (1, -1) + (1,) * (content.ndim - 2)
        styled = mixed * self.gain.reshape(view) + self.bias.reshape(view)
        if self.style_basis is not None and self.style_basis.shape[1]:
            r = self.style_basis.shape[1]
            coords = self.style_center + self.style_sigma * rng.standard_normal((len(content), r))
            styled = styled + (coords @ self.style_basis.T).reshape((len(content), -1) + view[2:])
        if self.instance_gain_sigma or self.instance_bias_sigma:
            # per-sample global gain and offset, e.g. illumination
            per = (len(content),) + (1,) * (content.ndim - 1)
            g = np.exp(self.instance_gain_sigma * rng.standard_normal(per))
            styled = g * styled + self.instance_bias_sigma * rng.standard_normal(per)
        return styled + self.noise_sigma * rng.standard_normal(content.shape)


@dataclass
class Dataset:
    features: np.ndarray
    identities: np.ndarray
    domains: np.ndarray
    domain_names: list[str]
    heldout: list[str] = field(default_factory=list)
    mode: str = "vector"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.domains = np.asarray(self.domains, dtype=np.int64)
        n = len(self.features)
        if self.identities.shape != (n,) or self.domains.shape != (n,):
            raise ValueError("one identity and one domain label per sample")
        if not self.domain_names:
            raise ValueError("dataset needs at least one domain")
        if n and (self.domains.min() < 0 or self.domains.max() >= len(self.domain_names)):
            raise ValueError("domain label out of range")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.features.shape[1:])

    @property
    def num_identities(self) -> int:
        return int(self.identities.max()) + 1 if len(self) else 0

    def subset(self, mask_or_index) -> "Dataset":
        idx = np.asarray(mask_or_index)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return Dataset(
            self.features[idx], self.identities[idx], self.domains[idx],
            list(self.domain_names), list(self.heldout), self.mode, dict(self.provenance),
        )

    def domain_ids(self, names) -> list[int]:
        return [self.domain_names.index(n) for n in names]

    def train_part(self) -> "Dataset":
        keep = [i for i, n in enumerate(self.domain_names) if n not in self.heldout]
        return self.subset(np.isin(self.domains, keep))

    def heldout_part(self) -> "Dataset":
        return self.subset(np.isin(self.domains, self.domain_ids(self.heldout)))

    def equals(self, other: "Dataset") -> bool:
        return (
            np.array_equal(self.features, other.features)
            and np.array_equal(self.identities, other.identities)
            and np.array_equal(self.domains, other.domains)
            and self.domain_names == other.domain_names
            and self.heldout == other.heldout
            and self.mode == other.mode
            and self.provenance == other.provenance
        )


def _mixing_matrix(c: int, strength: float, rng: np.random.Generator) -> np.ndarray:
    while True:
        m = np.eye(c) + strength * rng.standard_normal((c, c)) / np.sqrt(c)
        if np.linalg.cond(m) <= 100:
            return m


def make_domain_specs(config: SynthConfig, rng: np.random.Generator) -> list[DomainSpec]:
    total = config.train_domains + config.heldout_domains
    c = config.sample_shape[0]
    # offsets on a grid spaced 1.5 gaps apart, randomly assigned to domains
    slots = (np.arange(total) - (total - 1) / 2.0) * 1.5 * config.style_gap
    offsets = slots[rng.permutation(total)]
    basis = np.linalg.qr(rng.standard_normal((c, config.style_dims)))[0] if config.style_dims else np.zeros((c, 0))
    specs = []
    for k in range(total):
        name = f"train{k}" if k < config.train_domains else f"heldout{k - config.train_domains}"
        log_g = rng.uniform(-np.log(config.gain_spread), np.log(config.gain_spread))
        gain = np.exp(log_g + config.gain_jitter * rng.standard_normal(c))
        bias = offsets[k] + config.bias_jitter * rng.standard_normal(c)
        mixing = _mixing_matrix(c, config.mixing, rng)
        center = config.style_spread * rng.standard_normal(config.style_dims)
        specs.append(DomainSpec(name, gain, bias, mixing, config.noise_sigma,
                                basis, center, config.style_sigma,
                                config.instance_gain_sigma, config.instance_bias_sigma))
    return specs


def generate_synthetic(config: SynthConfig) -> Dataset:
    """Draw the full corpus: training domains first, then held-out domains."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    specs = make_domain_specs(config, rng)
    shape = config.sample_shape
    m = config.samples_per_identity
    feats, ids, doms = [], [], []
    next_id = 0
    for k, spec in enumerate(specs):
        protos = config.prototype_spread * rng.standard_normal((config.identities,) + shape)
        content = np.repeat(protos, m, axis=0)
        content = content + config.view_sigma * rng.standard_normal(content.shape)
        x = spec.apply(content, rng)
        feats.append(x)
        ids.append(next_id + np.repeat(np.arange(config.identities), m))
        doms.append(np.full(len(x), k))
        next_id += config.identities
    # stored at 32-bit so the file round-trip is exact
    features = np.concatenate(feats).astype(np.float32).astype(np.float64)
    return Dataset(
        features,
        np.concatenate(ids),
        np.concatenate(doms),
        [s.name for s in specs],
        [s.name for s in specs[config.train_domains:]],
        config.mode,
        {"generator": "synthetic", "seed": str(config.seed),
         "config": json.dumps(asdict(config), sort_keys=True)},
    )


def domain_channel_means(dataset: Dataset) -> np.ndarray:
    """Per-domain mean of every channel (feature in vector mode): (domains, channels)."""
    x = dataset.features
    per_channel = x if x.ndim == 2 else x.reshape(len(x), x.shape[1], -1).mean(axis=2)
    return np.stack([per_channel[dataset.domains == d].mean(axis=0) for d in range(len(dataset.domain_names))])


def write_dataset(dataset: Dataset, path) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "mode": dataset.mode,
        "sample_shape": list(dataset.sample_shape),
        "count": len(dataset),
        "domain_names": dataset.domain_names,
        "heldout": dataset.heldout,
        "identity_count": dataset.num_identities,
        "provenance": dataset.provenance,
        "labels": [[int(i), int(d)] for i, d in zip(dataset.identities, dataset.domains)],
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(dataset.features, dtype="<f4").tobytes()
    Path(path).write_bytes(MAGIC + b"\n" + text + b"\0" + payload)


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC + b"\n"):
        raise BadMagicError(f"{path}: not an MMFA1 dataset file")
    end = raw.find(b"\0", len(MAGIC) + 1)
    if end < 0:
        raise HeaderError(f"{path}: header is not terminated")
    try:
        header = json.loads(raw[len(MAGIC) + 1:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"{path}: unparseable header ({exc})") from exc
    try:
        count = int(header["count"])
        shape = tuple(int(s) for s in header["sample_shape"])
        names = list(header["domain_names"])
        labels = np.asarray(header["labels"], dtype=np.int64).reshape(-1, 2)
        mode = header["mode"]
    except (KeyError, TypeError, ValueError) as exc:
        raise HeaderError(f"{path}: missing or malformed header field ({exc})") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise HeaderError(f"{path}: unsupported format version {header.get('format_version')}")
    if len(names) == 0:
        raise HeaderError(f"{path}: header declares 0 domains")
    if not shape or min(shape) < 1:
        raise HeaderError(f"{path}: invalid sample shape {shape}")
    if len(labels) != count:
        raise HeaderError(f"{path}: {len(labels)} label rows for {count} samples")
    if count and (labels[:, 1].min() < 0 or labels[:, 1].max() >= len(names) or labels[:, 0].min() < 0):
        raise HeaderError(f"{path}: label out of range")
    payload = raw[end + 1:]
    expected = count * int(np.prod(shape)) * 4
    if len(payload) < expected:
        raise TruncatedPayloadError(expected, len(payload))
    if len(payload) > expected:
        raise HeaderError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    features = np.frombuffer(payload, dtype="<f4").reshape((count,) + shape).astype(np.float64)
    return Dataset(
        features, labels[:, 0], labels[:, 1], names,
        list(header.get("heldout", [])), mode, dict(header.get("provenance", {})),
    )


def make_eval_split(dataset: Dataset, trial_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Single-shot split: one probe and one gallery sample per identity.

    Returns index arrays into ``dataset``, ordered by identity.
    """
    rng = np.random.default_rng(trial_seed)
    probes, gallery = [], []
    for ident in np.unique(dataset.identities):
        members = np.flatnonzero(dataset.identities == ident)
        if len(members) < 2:
            raise ValueError(f"identity {ident} has {len(members)} sample(s); need >= 2")
        p, g = rng.choice(members, size=2, replace=False)
        probes.append(p)
        gallery.append(g)
    return np.array(probes, dtype=np.intp), np.array(gallery, dtype=np.intp)
