import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmfa_aae.data import (
    MAGIC,
    BadMagicError,
    Dataset,
    DatasetFormatError,
    HeaderError,
    SynthConfig,
    TruncatedPayloadError,
    domain_channel_means,
    generate_synthetic,
    make_eval_split,
    read_dataset,
    write_dataset,
)


def softmax_train_accuracy(x, y, steps=1000, lr=0.5):
    x = (x - x.mean(0)) / x.std(0)
    x = np.hstack([x, np.ones((len(x), 1))])
    onehot = np.eye(y.max() + 1)[y]
    w = np.zeros((x.shape[1], onehot.shape[1]))
    for _ in range(steps):
        z = x @ w
        p = np.exp(z - z.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        w -= lr * x.T @ (p - onehot) / len(x)
    return np.mean((x @ w).argmax(1) == y)


def test_default_corpus_counts_and_labels():
    ds = generate_synthetic(SynthConfig())
    train = ds.train_part()
    assert len(train) == 240
    assert set(np.unique(train.domains)) == {0, 1, 2}
    assert train.identities.min() == 0 and train.identities.max() == 59
    held = ds.heldout_part()
    assert len(held) == 80 and ds.heldout == ["heldout0"]
    assert set(held.identities) == set(range(60, 80))


def test_identities_never_cross_domains():
    ds = generate_synthetic(SynthConfig(seed=3))
    for ident in np.unique(ds.identities):
        assert len(np.unique(ds.domains[ds.identities == ident])) == 1


def test_same_seed_gives_identical_files(tmp_path):
    for name in ("a", "b"):
        write_dataset(generate_synthetic(SynthConfig(seed=7)), tmp_path / name)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    write_dataset(generate_synthetic(SynthConfig(seed=8)), tmp_path / "c")
    assert (tmp_path / "a").read_bytes() != (tmp_path / "c").read_bytes()


@pytest.mark.parametrize("mode", ["vector", "image"])
@pytest.mark.parametrize("seed", range(5))
def test_domain_channel_means_separated_by_style_gap(mode, seed):
    cfg = SynthConfig(seed=seed, mode=mode)
    means = domain_channel_means(generate_synthetic(cfg))
    k = len(means)
    gaps = [np.linalg.norm(means[i] - means[j]) for i in range(k) for j in range(i + 1, k)]
    assert min(gaps) >= cfg.style_gap


def test_raw_features_are_learnable():
    train = generate_synthetic(SynthConfig()).train_part()
    assert softmax_train_accuracy(train.features, train.identities) >= 0.9


@pytest.mark.parametrize("bad", [
    dict(samples_per_identity=1), dict(train_domains=0), dict(mode="text"), dict(dim=0),
    dict(style_dims=40), dict(noise_sigma=-1.0), dict(gain_spread=0.5),
])
def test_invalid_generator_configs(bad):
    with pytest.raises(ValueError):
        generate_synthetic(SynthConfig(**bad))


def test_image_mode_shape():
    ds = generate_synthetic(SynthConfig(mode="image", identities=3, channels=2, height=4, width=5))
    assert ds.sample_shape == (2, 4, 5)


random_datasets = st.builds(
    lambda seed, n, d, k: Dataset(
        np.random.default_rng(seed).standard_normal((n, d)).astype(np.float32),
        np.random.default_rng(seed + 1).integers(0, 9, n),
        np.random.default_rng(seed + 2).integers(0, k, n),
        [f"dom{i}" for i in range(k)],
        ["dom0"] if k > 1 else [],
        "vector",
        {"note": "random", "seed": str(seed)},
    ),
    st.integers(0, 10_000), st.integers(0, 12), st.integers(1, 5), st.integers(1, 4),
)


@given(random_datasets)
@settings(max_examples=40, deadline=None)
def test_round_trip_is_identity(tmp_path_factory, ds):
    path = tmp_path_factory.mktemp("rt") / "d.mmfa"
    write_dataset(ds, path)
    assert read_dataset(path).equals(ds)


def test_image_round_trip(tmp_path):
    ds = generate_synthetic(SynthConfig(mode="image", identities=2, height=3, width=3))
    write_dataset(ds, tmp_path / "i.mmfa")
    assert read_dataset(tmp_path / "i.mmfa").equals(ds)


@pytest.fixture
def dataset_file(tmp_path):
    path = tmp_path / "d.mmfa"
    write_dataset(generate_synthetic(SynthConfig(identities=2)), path)
    return path


def split_file(path):
    raw = path.read_bytes()
    end = raw.index(b"\0", len(MAGIC) + 1)
    return json.loads(raw[len(MAGIC) + 1:end]), raw[end + 1:]


def rewrite(path, header, payload):
    path.write_bytes(MAGIC + b"\n" + json.dumps(header).encode() + b"\0" + payload)


def test_payload_one_float_short(dataset_file):
    header, payload = split_file(dataset_file)
    rewrite(dataset_file, header, payload[:-4])
    with pytest.raises(TruncatedPayloadError) as info:
        read_dataset(dataset_file)
    assert info.value.expected == len(payload) and info.value.actual == len(payload) - 4
    assert str(len(payload)) in str(info.value)


def test_payload_too_long_is_inconsistent(dataset_file):
    header, payload = split_file(dataset_file)
    rewrite(dataset_file, header, payload + b"\0" * 4)
    with pytest.raises(HeaderError, match="payload"):
        read_dataset(dataset_file)


def test_zero_domains_rejected(dataset_file):
    header, payload = split_file(dataset_file)
    header["domain_names"] = []
    rewrite(dataset_file, header, payload)
    with pytest.raises(HeaderError, match="0 domains"):
        read_dataset(dataset_file)


def test_bad_magic(dataset_file):
    dataset_file.write_bytes(b"NOPE!" + dataset_file.read_bytes()[5:])
    with pytest.raises(BadMagicError):
        read_dataset(dataset_file)


def test_errors_are_distinct_types():
    assert len({BadMagicError, TruncatedPayloadError, HeaderError}) == 3
    for cls in (BadMagicError, TruncatedPayloadError, HeaderError):
        assert issubclass(cls, DatasetFormatError)


@pytest.mark.parametrize("field, value", [("format_version", 99), ("sample_shape", [0]), ("count", 3)])
def test_malformed_headers(dataset_file, field, value):
    header, payload = split_file(dataset_file)
    header[field] = value
    rewrite(dataset_file, header, payload)
    with pytest.raises(HeaderError):
        read_dataset(dataset_file)


def test_split_examples():
    ds = generate_synthetic(SynthConfig(identities=60, train_domains=1, heldout_domains=0))
    probe, gallery = make_eval_split(ds, 0)
    assert len(probe) == len(gallery) == 60
    assert not set(probe) & set(gallery)
    assert np.array_equal(ds.identities[probe], ds.identities[gallery])
    again = make_eval_split(ds, 0)
    assert np.array_equal(again[0], probe) and np.array_equal(again[1], gallery)
    others = [make_eval_split(ds, s)[0] for s in range(1, 11)]
    assert any(not np.array_equal(o, probe) for o in others)


def test_split_needs_two_views():
    ds = Dataset(np.zeros((3, 2)), [0, 0, 1], [0, 0, 0], ["a"])
    with pytest.raises(ValueError, match="need >= 2"):
        make_eval_split(ds, 0)
