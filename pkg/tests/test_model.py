import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmfa_aae import losses
from mmfa_aae.diffcore import ShapeError, backward
from mmfa_aae.model import (
    CheckpointError,
    ModelConfig,
    backbone,
    classify_identity,
    decode,
    discriminate,
    embed,
    encode,
    extract_features,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from mmfa_aae.train import Adam

SMALL = dict(input_dim=6, widths=(8, 8), hidden=5, identities=4, domains=3)
IMAGE = dict(mode="image", channels=3, height=5, width=4, widths=(4, 6), hidden=4, identities=3, domains=2)


def small(**over):
    return init_model(ModelConfig(**{**SMALL, **over}))


def warm(state, x):
    """Run one train-mode batch and commit its statistics so eval mode works."""
    _, stats = backbone(state, x, mode="train")
    state.params.commit_stats(stats)
    return state


def train_head(state, fn, names, steps, lr=0.05):
    opt = Adam(names)
    history = []
    for _ in range(steps):
        tensors = state.tensors(trainable_groups=tuple({n.split(".")[0] for n in names}))
        loss = fn(tensors)
        grads = backward(loss)
        opt.step(state.params.params, {k: grads[id(tensors[k])] for k in names if id(tensors[k]) in grads}, lr)
        history.append(loss.item())
    return history


def test_same_seed_same_state_and_different_seed_differs():
    a, b, c = small(seed=3), small(seed=3), small(seed=4)
    assert all(np.array_equal(a.params.params[k], b.params.params[k]) for k in a.params.params)
    assert any(not np.array_equal(a.params.params[k], c.params.params[k]) for k in a.params.params)


@pytest.mark.parametrize("bad", [
    dict(hidden=9), dict(in_blocks=3), dict(identities=1), dict(domains=1), dict(mode="audio"), dict(widths=()),
])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ValueError):
        init_model(ModelConfig(**{**SMALL, **bad}))


def test_wrong_input_shape_is_a_shape_error():
    with pytest.raises(ShapeError, match="expects"):
        extract_features(small(), np.zeros((4, 7)), mode="train")
    with pytest.raises(ShapeError):
        encode(small(), np.zeros((4, 5)))


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_full_instance_norm_cancels_per_sample_affine_style(seed):
    rng = np.random.default_rng(seed)
    # eps enters as eps / a**2 and would leave an O(eps) residual; make it negligible
    state = warm(small(in_blocks=2, seed=seed, eps=1e-12), rng.standard_normal((6, 6)))
    x = rng.standard_normal((5, 6))
    a = np.exp(rng.uniform(-1, 1, (5, 1)))
    b = rng.uniform(-3, 3, (5, 1))
    for mode in ("eval", "train"):
        ref = extract_features(state, x, mode=mode).data
        styled = extract_features(state, a * x + b, mode=mode).data
        assert np.max(np.abs(ref - styled)) <= 1e-6


def test_full_instance_norm_cancels_channel_affine_on_images():
    rng = np.random.default_rng(1)
    state = warm(init_model(ModelConfig(**IMAGE, in_blocks=2, eps=1e-12)), rng.standard_normal((4, 3, 5, 4)))
    x = rng.standard_normal((3, 3, 5, 4))
    a = np.exp(rng.uniform(-1, 1, (3, 3, 1, 1)))
    b = rng.uniform(-2, 2, (3, 3, 1, 1))
    ref = extract_features(state, x).data
    assert np.max(np.abs(ref - extract_features(state, a * x + b).data)) <= 1e-6


def test_default_eps_style_residual_is_small():
    rng = np.random.default_rng(15)
    state = warm(small(in_blocks=2), rng.standard_normal((6, 6)))
    x = rng.standard_normal((5, 6))
    assert np.max(np.abs(extract_features(state, x).data - extract_features(state, 2 * x - 1).data)) < 1e-3


def test_without_instance_norm_style_leaks():
    rng = np.random.default_rng(2)
    state = warm(small(in_blocks=0), rng.standard_normal((6, 6)))
    x = rng.standard_normal((5, 6))
    assert np.max(np.abs(extract_features(state, x).data - extract_features(state, 3 * x + 1).data)) > 1e-3


def test_single_sample_eval_uses_running_stats():
    rng = np.random.default_rng(3)
    state = small()
    with pytest.raises(ValueError):
        extract_features(state, rng.standard_normal((1, 6)), mode="eval")
    warm(state, rng.standard_normal((8, 6)))
    out = extract_features(state, rng.standard_normal((1, 6)), mode="eval")
    assert out.shape == (1, 8)


def test_features_reproducible():
    x = np.random.default_rng(4).standard_normal((6, 6))
    a = extract_features(small(seed=7), x, mode="train").data
    b = extract_features(small(seed=7), x, mode="train").data
    assert a.tobytes() == b.tobytes()


def test_encoder_identity_weights_pass_nonnegative_features():
    state = small(hidden=8)
    state.params.params["Q.0.weight"][:] = np.eye(8)
    state.params.params["Q.0.bias"][:] = 0
    x = np.abs(np.random.default_rng(5).standard_normal((4, 8)))
    assert np.array_equal(encode(state, x).data, x)


def test_encoder_zero_weights_give_activation_of_bias():
    state = small()
    state.params.params["Q.0.weight"][:] = 0
    state.params.params["Q.0.bias"][:] = [-1.0, 0.5, 2.0, 0.0, -0.2]
    h = encode(state, np.random.default_rng(6).standard_normal((3, 8))).data
    assert np.array_equal(h, np.tile([0.0, 0.5, 2.0, 0.0, 0.0], (3, 1)))


def test_encoder_matches_dense_oracle():
    state = small(seed=8)
    x = np.random.default_rng(8).standard_normal((7, 8))
    w, b = state.params.params["Q.0.weight"], state.params.params["Q.0.bias"]
    np.testing.assert_allclose(encode(state, x).data, np.maximum(x @ w + b, 0.0), atol=1e-12)


def test_decoder_shapes_and_bias():
    state = small()
    x = np.random.default_rng(9).standard_normal((4, 8))
    assert decode(state, encode(state, x)).shape == x.shape
    state.params.params["P.0.bias"][:] = np.linspace(-1, 1, 8)
    np.testing.assert_array_equal(decode(state, np.zeros((2, 5))).data, np.tile(np.linspace(-1, 1, 8), (2, 1)))


def test_toy_autoencoder_reconstruction_decreases():
    state = small(seed=10)
    x = np.random.default_rng(10).standard_normal((10, 8))
    names = [k for k in state.params.params if k.startswith(("Q.", "P."))]

    def loss(t):
        return losses.reconstruction_loss(x, decode(state, encode(state, x, t), t))

    hist = train_head(state, loss, names, 150, lr=0.02)
    assert np.mean(hist[-10:]) < 0.5 * np.mean(hist[:10])


@pytest.mark.parametrize("head, classes", [("D", 2), ("C", 2)])
def test_zeroed_final_layer_gives_uniform_softmax(head, classes):
    state = small(domains=classes, identities=classes)
    state.params.params[f"{head}.2.weight"][:] = 0
    state.params.params[f"{head}.2.bias"][:] = 0
    fn = discriminate if head == "D" else classify_identity
    z = fn(state, np.random.default_rng(0).standard_normal((6, 5))).data
    assert z.shape == (6, classes) and np.all(z == 0)


@pytest.mark.parametrize("head", ["D", "C"])
def test_heads_learn_separable_codes(head):
    rng = np.random.default_rng(11)
    labels = np.repeat([0, 1], 20)
    codes = rng.standard_normal((40, 5)) + np.where(labels[:, None] == 1, 2.0, -2.0) * np.eye(5)[0]
    state = small(domains=2, identities=2, seed=11)
    fn = discriminate if head == "D" else classify_identity
    names = [k for k in state.params.params if k.startswith(head + ".")]
    train_head(state, lambda t: losses.identity_loss(fn(state, codes, t), labels), names, 200, lr=0.01)
    acc = np.mean(fn(state, codes).data.argmax(axis=1) == labels)
    assert acc >= 0.95


def test_checkpoint_round_trip_is_byte_exact(tmp_path):
    state = warm(small(seed=12), np.random.default_rng(12).standard_normal((8, 6)))
    save_checkpoint(state, tmp_path / "a.ckpt")
    loaded = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(loaded, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    x = np.random.default_rng(13).standard_normal((3, 6))
    assert np.array_equal(embed(state, x), embed(loaded, x))


def test_checkpoint_corruption_errors(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(small(), path)
    raw = path.read_bytes()
    cases = {"bad magic": b"XX" + raw[2:], "truncated": raw[:-16], "extra": raw + b"\0" * 8,
             "version": raw.replace(b"format_version = 1", b"format_version = 9")}
    for name, data in cases.items():
        path.write_bytes(data)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_image_mode_shapes():
    state = init_model(ModelConfig(**IMAGE))
    x = np.random.default_rng(14).standard_normal((4, 3, 5, 4))
    feats = extract_features(state, x, mode="train")
    assert feats.shape == (4, 6)
    assert encode(state, feats).shape == (4, 4)
    assert discriminate(state, encode(state, feats)).shape == (4, 2)
