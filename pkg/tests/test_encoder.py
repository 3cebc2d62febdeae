import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emargin import autodiff as ad
from emargin.autodiff import Tensor, backward
from emargin.encoder import (
    EncoderConfig,
    EncoderParams,
    embed,
    encode,
    init_params,
    preset,
)
from emargin.errors import ConfigError, DimensionError, DomainError


def identity_params(cfg: EncoderConfig) -> EncoderParams:
    p = init_params(cfg, 0)
    for blk in p.blocks:
        blk.weight = np.eye(*blk.weight.shape)
    return p


def test_identity_config_passes_non_negative_input(rng):
    cfg = EncoderConfig(input_dim=4, hidden_dims=(4, 4), output_dim=4, bn_epsilon=0.0)
    X = np.abs(rng.standard_normal((2, 3, 4)))
    Z = encode(X, identity_params(cfg), cfg, mode="eval").data
    np.testing.assert_allclose(Z, X, rtol=0, atol=1e-15)


def test_output_shape():
    cfg = EncoderConfig(input_dim=7, output_dim=32)
    X = np.random.default_rng(0).standard_normal((2, 5, 7))
    assert encode(X, init_params(cfg, 0), cfg).shape == (2, 5, 32)


def test_eval_is_bit_deterministic(rng):
    cfg = EncoderConfig(input_dim=3, output_dim=8)
    p = init_params(cfg, 4)
    X = rng.standard_normal((2, 6, 3))
    a = encode(X, p, cfg).data
    b = encode(X, p, cfg).data
    assert np.array_equal(a, b)


def test_embed_matches_encode_and_chunking(rng):
    cfg = EncoderConfig(input_dim=3, output_dim=8)
    p = init_params(cfg, 4)
    X = rng.standard_normal((5, 4, 3))
    np.testing.assert_array_equal(embed(X, p, cfg, chunk=2), encode(X, p, cfg).data)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_eval_is_timestep_equivariant(seed):
    r = np.random.default_rng(seed)
    cfg = EncoderConfig(input_dim=3, hidden_dims=(5, 6), output_dim=4)
    p = init_params(cfg, seed)
    X = r.standard_normal((2, 7, 3))
    perm = r.permutation(7)
    Z = encode(X, p, cfg).data
    np.testing.assert_array_equal(encode(X[:, perm], p, cfg).data, Z[:, perm])


def test_train_mode_batchnorm_standardizes(rng):
    # pre-affine output of the first block, inputs scaled so epsilon is negligible
    cfg = EncoderConfig(input_dim=4, hidden_dims=(6, 6), output_dim=3)
    p = init_params(cfg, 1)
    X = 100.0 * rng.standard_normal((3, 8, 4)) + 5.0
    blk = p.blocks[0]
    h = X.reshape(-1, 4) @ blk.weight + blk.bias
    out = ad.batchnorm(
        Tensor(h), blk.gamma, blk.beta, blk.running_mean.copy(), blk.running_var.copy(), mode="train"
    ).data
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-6)


def test_train_mode_updates_running_stats_and_eval_does_not(rng):
    cfg = EncoderConfig(input_dim=3, output_dim=4)
    p = init_params(cfg, 2)
    X = rng.standard_normal((2, 5, 3))
    before = {k: v.copy() for k, v in p.named_arrays().items()}
    encode(X, p, cfg, mode="eval")
    for k, v in p.named_arrays().items():
        np.testing.assert_array_equal(v, before[k])
    encode(X, p, cfg, mode="train")
    h = X.reshape(-1, 3) @ before["block0.weight"]
    np.testing.assert_allclose(p.blocks[0].running_mean, 0.1 * h.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(p.blocks[0].running_var, 0.9 + 0.1 * h.var(axis=0, ddof=1), atol=1e-12)


@pytest.mark.parametrize("mode", ["eval", "train"])
def test_parameter_gradients_match_finite_differences(rng, mode):
    cfg = EncoderConfig(input_dim=3, hidden_dims=(4, 5), output_dim=3)
    p = init_params(cfg, 7)
    for blk in p.blocks:
        blk.bias = rng.standard_normal(blk.bias.shape) * 0.3
        blk.beta = rng.standard_normal(blk.beta.shape) * 0.3 + 0.5
    X = rng.standard_normal((2, 4, 3))
    names = list(p.trainable())

    def loss(values):
        q = p.copy()
        leaves = {n: Tensor(v, requires_grad=True) for n, v in values.items()}
        return ad.mean(encode(X, q, cfg, mode=mode, leaves=leaves)), leaves

    out, leaves = loss(p.trainable())
    grads = backward(out)
    h = 1e-6
    for n in names:
        base = p.trainable()[n]
        num = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += h
            minus[idx] -= h
            fp = loss({**p.trainable(), n: plus})[0].item()
            fm = loss({**p.trainable(), n: minus})[0].item()
            num[idx] = (fp - fm) / (2 * h)
        ana = grads[leaves[n]]
        err = np.max(np.abs(ana - num) / np.maximum(1.0, np.abs(ana)))
        assert err < 1e-4, n


def test_init_bounds_and_conventions():
    cfg = EncoderConfig(input_dim=6, hidden_dims=(6, 6), output_dim=6)
    p = init_params(cfg, 11)
    for blk in p.blocks:
        assert np.abs(blk.weight).max() <= 1.0
        np.testing.assert_array_equal(blk.bias, 0.0)
        np.testing.assert_array_equal(blk.gamma, 1.0)
        np.testing.assert_array_equal(blk.beta, 0.0)
        np.testing.assert_array_equal(blk.running_mean, 0.0)
        np.testing.assert_array_equal(blk.running_var, 1.0)


def test_init_is_seed_deterministic():
    cfg = EncoderConfig(input_dim=5, output_dim=8)
    a, b, c = init_params(cfg, 3), init_params(cfg, 3), init_params(cfg, 4)
    for k, v in a.named_arrays().items():
        np.testing.assert_array_equal(v, b.named_arrays()[k])
    assert not np.array_equal(a.blocks[0].weight, c.blocks[0].weight)


def test_config_validation_and_roundtrip():
    with pytest.raises(ConfigError):
        EncoderConfig(input_dim=0)
    with pytest.raises(ConfigError):
        EncoderConfig(input_dim=3, hidden_dims=(4, 4, 4))
    cfg = EncoderConfig(input_dim=3, hidden_dims=(7, 9), output_dim=11)
    assert EncoderConfig.from_dict(cfg.to_dict()) == cfg
    assert preset("full", 5).output_dim == 320
    assert preset("compact", 5).output_dim == 32
    with pytest.raises(ConfigError):
        preset("huge", 5)


def test_encode_input_errors():
    cfg = EncoderConfig(input_dim=3, output_dim=4)
    p = init_params(cfg, 0)
    with pytest.raises(DimensionError):
        encode(np.zeros((1, 2, 4)), p, cfg)
    with pytest.raises(DomainError):
        encode(np.full((1, 2, 3), np.nan), p, cfg)
    with pytest.raises(DomainError):
        encode(np.zeros((1, 1, 3)), p, cfg, mode="train")
