import math

import numpy as np
import pytest
from scipy.special import erf

from t2t_binformer import tensor as T
from t2t_binformer.codec import (BlockParams, CodecConfig, CodecParams, ConfigError, attention_weights,
                                 bridge, decode, encode, encoder_block, mlp, multi_head_attention)
from t2t_binformer.tensor import ShapeError, Tensor

TOY = CodecConfig(enc_layers=2, dec_layers=1, n_heads=2, enc_dim=16, dec_dim=8, mlp_dim=32)


def block(dim=8, mlp_dim=16, seed=0):
    return BlockParams.init(np.random.default_rng(seed), dim, mlp_dim)


def tokens(n, d, seed=1):
    return Tensor(np.random.default_rng(seed).standard_normal((n, d)))


def reference_block(x, p, n_heads):
    """Plain numpy forward pass of one pre-norm block."""
    def ln(a, g, b):
        mu = a.mean(-1, keepdims=True)
        var = ((a - mu) ** 2).mean(-1, keepdims=True)
        return (a - mu) / np.sqrt(var + 1e-5) * g + b

    d = x.shape[1]
    hd = d // n_heads
    h = ln(x, p.ln1_gamma.data, p.ln1_beta.data)
    q, k, v = h @ p.wq.data, h @ p.wk.data, h @ p.wv.data
    heads = []
    for i in range(n_heads):
        s = slice(i * hd, (i + 1) * hd)
        sc = q[:, s] @ k[:, s].T / math.sqrt(hd)
        e = np.exp(sc - sc.max(-1, keepdims=True))
        heads.append((e / e.sum(-1, keepdims=True)) @ v[:, s])
    y = x + np.concatenate(heads, 1) @ p.wo.data
    h2 = ln(y, p.ln2_gamma.data, p.ln2_beta.data)
    z = h2 @ p.mlp_w1.data + p.mlp_b1.data
    z = 0.5 * z * (1 + erf(z / math.sqrt(2)))
    return y + z @ p.mlp_w2.data + p.mlp_b2.data


class TestAttention:
    def test_single_token_returns_value_projection(self):
        p = block()
        x = tokens(1, 8)
        out = multi_head_attention(x, p, 2)
        np.testing.assert_allclose(out.data, x.data @ p.wv.data @ p.wo.data, rtol=1e-13)

    def test_zero_query_key_gives_uniform_mean(self):
        p = block()
        p.wq.data[:] = 0
        p.wk.data[:] = 0
        x = tokens(5, 8)
        expected = np.tile((x.data @ p.wv.data).mean(0), (5, 1)) @ p.wo.data
        np.testing.assert_allclose(multi_head_attention(x, p, 4).data, expected, rtol=1e-12, atol=1e-14)

    @pytest.mark.parametrize("heads", [1, 2, 4, 8])
    def test_rows_stochastic(self, heads):
        ws = attention_weights(tokens(7, 8), block(), heads)
        assert len(ws) == heads
        for w in ws:
            assert w.shape == (7, 7) and np.all(w >= 0)
            np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            multi_head_attention(tokens(3, 8), block(), 3)


class TestBlock:
    @pytest.mark.parametrize("heads", [1, 2])
    def test_matches_reference(self, heads):
        p, x = block(seed=3), tokens(6, 8, seed=4)
        np.testing.assert_allclose(encoder_block(x, p, heads).data, reference_block(x.data, p, heads),
                                   rtol=1e-12, atol=1e-12)

    def test_zero_output_weights_are_identity(self):
        p = block()
        for t in (p.wo, p.mlp_w2, p.mlp_b2):
            t.data[:] = 0
        x = tokens(4, 8)
        np.testing.assert_array_equal(encoder_block(x, p, 2).data, x.data)

    def test_mlp_bias_only(self):
        p = block()
        p.mlp_w1.data[:] = 0
        p.mlp_w2.data[:] = 0
        out = mlp(tokens(3, 8), p)
        np.testing.assert_array_equal(out.data, np.tile(p.mlp_b2.data, (3, 1)))

    def test_permutation_equivariance(self):
        p, x = block(seed=5), tokens(9, 8, seed=6)
        perm = np.random.default_rng(7).permutation(9)
        a = encoder_block(Tensor(x.data[perm]), p, 2).data
        b = encoder_block(x, p, 2).data[perm]
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)

    def test_wrong_width(self):
        with pytest.raises(ShapeError):
            encoder_block(tokens(3, 6), block(), 2)


class TestCodec:
    def test_paper_stack_shapes(self):
        cfg = CodecConfig(enc_dim=24, dec_dim=8, mlp_dim=16)  # paper depth and heads, narrow widths
        params = CodecParams.init(np.random.default_rng(0), cfg)
        assert len(params.encoder) == 12 and len(params.decoder) == 1
        x = encode(tokens(256, 24), params, cfg)
        assert x.shape == (256, 24)
        y = decode(bridge(x, params, cfg), params, cfg)
        assert y.shape == (256, 8) and np.all(np.isfinite(y.data))

    def test_bridge_is_linear(self):
        params = CodecParams.init(np.random.default_rng(0), TOY)
        a, b = tokens(4, 16, 1), tokens(4, 16, 2)
        lhs = bridge(Tensor(2 * a.data - b.data), params, TOY).data
        rhs = 2 * bridge(a, params, TOY).data - bridge(b, params, TOY).data
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-13)
        assert params.bridge.shape == (16, 8)

    def test_encoder_width_checked(self):
        params = CodecParams.init(np.random.default_rng(0), TOY)
        with pytest.raises(ShapeError):
            encode(tokens(4, 8), params, TOY)
        with pytest.raises(ShapeError):
            decode(tokens(4, 16), params, TOY)

    @pytest.mark.parametrize("kw", [dict(enc_dim=10, n_heads=4), dict(dec_dim=6, n_heads=4)])
    def test_config_divisibility(self, kw):
        with pytest.raises(ConfigError):
            CodecConfig(**kw)

    @pytest.mark.parametrize("seed", range(3))
    def test_grad_check_toy(self, seed):
        rng = np.random.default_rng(seed)
        params = CodecParams.init(rng, TOY)
        x = Tensor(rng.standard_normal((4, 16)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 8)))
        named = [x, params.encoder[0].wq, params.encoder[1].mlp_w1, params.bridge,
                 params.decoder[0].ln1_gamma, params.decoder[0].wv]

        def f():
            return T.sum_(T.multiply(decode(bridge(encode(x, params, TOY), params, TOY), params, TOY), w))

        report = T.grad_check(f, named, max_checks=200, seed=seed)
        assert report.passed, report
