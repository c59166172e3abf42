import numpy as np
import pytest

from gradcheck_util import max_rel_error, numeric_grad, sample_coords
from holoslide import attention as att
from holoslide import nn
from holoslide.errors import ConfigError, NumericalError, TokenError


def quadratic_oracle(Q, K, V, eps=0.0):
    q, k = np.maximum(Q, 0), np.maximum(K, 0)
    out = np.zeros((len(Q), V.shape[1]))
    for i in range(len(Q)):
        wts = np.array([q[i] @ k[j] for j in range(len(K))])
        den = wts.sum() + eps
        out[i] = 0.0 if den == 0 else (wts[:, None] * V).sum(0) / den
    return out


def pool_oracle(x, s):
    h, w, c = x.shape
    out = np.zeros((-(-h // s), -(-w // s), c))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            out[i, j] = x[i * s:(i + 1) * s, j * s:(j + 1) * s].reshape(-1, c).mean(0)
    return out


def upsample_oracle(x, s, h, w):
    out = np.zeros((h, w, x.shape[2]))
    for i in range(h):
        for j in range(w):
            out[i, j] = x[i // s, j // s]
    return out


def ln_oracle(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * g + b


def block_params(gen, d, n_scales, prefix="b"):
    p = att.init_block(gen, d, n_scales, prefix, dtype=np.float64)
    for k in p:
        p[k] = p[k] + gen.normal(0, 0.1, p[k].shape)
    return p


def test_relu_attention_matches_quadratic_oracle():
    gen = np.random.default_rng(0)
    Q, K, V = gen.normal(size=(8, 4)), gen.normal(size=(8, 4)), gen.normal(size=(8, 4))
    got = att.relu_linear_attention(Q, K, V, epsilon=0.0)
    assert np.abs(got - quadratic_oracle(Q, K, V)).max() <= 1e-10


def test_relu_attention_zero_denominator():
    Q = np.array([[-1.0, -2.0], [1.0, 0.0]])
    K = np.array([[0.5, 1.0], [1.0, 0.0]])
    V = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = att.relu_linear_attention(Q, K, V, epsilon=0.0)
    assert out[0].tolist() == [0.0, 0.0]
    np.testing.assert_allclose(out, quadratic_oracle(Q, K, V))
    with pytest.raises(NumericalError):
        att.relu_linear_attention(Q * np.nan, K, V)


def test_relu_attention_epsilon():
    gen = np.random.default_rng(1)
    Q, K, V = gen.random((5, 3)), gen.random((6, 3)), gen.normal(size=(6, 2))
    np.testing.assert_allclose(att.relu_linear_attention(Q, K, V, 0.1), quadratic_oracle(Q, K, V, 0.1))


def test_single_token_by_hand():
    q = np.array([[1.0, 0.0, 2.0, -1.0]])
    k = np.array([[0.5, 1.0, 1.0, 3.0]])
    v = np.array([[2.0, -1.0, 0.0, 4.0]])
    # one key: weight cancels, output is v (up to epsilon)
    w = 1.0 * 0.5 + 2.0 * 1.0
    np.testing.assert_allclose(att.relu_linear_attention(q, k, v, 1e-6), w * v / (w + 1e-6))


def test_multi_scale_compositional_oracle():
    gen = np.random.default_rng(2)
    d, heads = 8, 2
    cfg = att.AttentionConfig(d, heads, (1, 2), 1e-6, "relu", (1, 1))
    p = block_params(gen, d, 2)
    x = gen.normal(size=(8, 8, d))
    got, _ = att.multi_scale_attention(x, p, "b", cfg)

    xn = ln_oracle(x, p["b.ln1.g"], p["b.ln1.b"])
    Q, K, V = xn @ p["b.wq"], xn @ p["b.wk"], xn @ p["b.wv"]
    fused = np.zeros_like(x)
    for si, s in enumerate((1, 2)):
        Qs, Ks, Vs = (pool_oracle(m, s) for m in (Q, K, V))
        hp, wp = Qs.shape[:2]
        outs = []
        for hd in range(heads):
            sl = slice(hd * d // heads, (hd + 1) * d // heads)
            outs.append(att.relu_linear_attention(Qs[..., sl].reshape(-1, d // heads),
                                                  Ks[..., sl].reshape(-1, d // heads),
                                                  Vs[..., sl].reshape(-1, d // heads), 1e-6))
        A = np.concatenate(outs, axis=1).reshape(hp, wp, d)
        fused += p["b.scale_w"][si] * upsample_oracle(A, s, 8, 8)
    expect = x + (fused / 2) @ p["b.wo"] + p["b.bo"]
    np.testing.assert_allclose(got, expect, atol=1e-12)


@pytest.mark.parametrize("h,w", [(1, 1), (3, 5), (7, 4), (8, 8)])
def test_block_preserves_shape(h, w):
    gen = np.random.default_rng(h * w)
    cfg = att.AttentionConfig(8, 2, (1,) if min(h, w) < 2 else (1, 2), 1e-6, "relu", (1, 1))
    p = block_params(gen, 8, len(cfg.scales))
    x = gen.normal(size=(h, w, 8))
    assert att.block(x, p, "b", cfg)[0].shape == x.shape


def test_zero_weights_are_identity():
    cfg = att.AttentionConfig(4, 2, (1,), 1e-6, "relu", (1, 1))
    p = {k: np.zeros_like(v) for k, v in att.init_block(np.random.default_rng(0), 4, 1, "b", np.float64).items()}
    x = np.random.default_rng(1).normal(size=(3, 3, 4))
    np.testing.assert_array_equal(att.block(x, p, "b", cfg)[0], x)


def test_ffn_by_hand():
    gen = np.random.default_rng(3)
    p = block_params(gen, 4, 1)
    x = gen.normal(size=(1, 1, 4))
    xn = ln_oracle(x[0, 0], p["b.ln2.g"], p["b.ln2.b"])
    hid = np.maximum(xn @ p["b.w1"] + p["b.b1"], 0)
    np.testing.assert_allclose(att.ffn(x, p, "b")[0][0, 0], x[0, 0] + hid @ p["b.w2"] + p["b.b2"])


def test_stages_match_straight_line_composition():
    gen = np.random.default_rng(4)
    cfg = att.AttentionConfig(8, 2, (1, 2, 4), 1e-6, "relu", (2, 1))
    p = att.init_backbone(gen, cfg, 10, (16, 16), np.float64)
    idx = gen.integers(0, 10, size=(16, 16))
    x = p["embed"][idx] + p["pos"]
    for i in range(2):
        x = att.ffn(att.multi_scale_attention(x, p, f"stage1.{i}", cfg)[0], p, f"stage1.{i}")[0]
    merged = np.zeros((8, 8, 32))
    for i, j in np.ndindex(8, 8):
        merged[i, j] = x[2 * i:2 * i + 2, 2 * j:2 * j + 2].reshape(-1)
    x = merged @ p["down.w"] + p["down.b"]
    x = att.ffn(att.multi_scale_attention(x, p, "stage2.0", cfg)[0], p, "stage2.0")[0]
    np.testing.assert_allclose(att.backbone_forward(idx, p, cfg), x, atol=1e-12)


def test_config_and_token_errors():
    with pytest.raises(ConfigError):
        att.AttentionConfig(10, 4)
    with pytest.raises(ConfigError):
        att.AttentionConfig(8, 2, kernel="cosine")
    with pytest.raises(TokenError):
        att.embed_tokens(np.array([[5]]), {"embed": np.zeros((5, 2))})
    cfg = att.AttentionConfig(8, 2, (1, 4), 1e-6, "relu", (1, 1))
    with pytest.raises(ConfigError):
        att.multi_scale_attention(np.zeros((3, 3, 8)), block_params(np.random.default_rng(0), 8, 2), "b", cfg)


def test_softmax_attention_rows_sum_to_one():
    gen = np.random.default_rng(5)
    V = np.eye(6)
    A = att.softmax_attention(gen.normal(size=(4, 3)), gen.normal(size=(6, 3)), V)
    np.testing.assert_allclose(A.sum(1), 1.0)


@pytest.mark.parametrize("kernel", ["relu", "mhsa"])
def test_attention_kernel_gradients(kernel):
    gen = np.random.default_rng(6)
    Q, K, V = gen.normal(size=(2, 7, 3)), gen.normal(size=(2, 7, 3)), gen.normal(size=(2, 7, 3))
    up = gen.normal(size=(2, 7, 3))
    fwd, bwd = att._KERNELS[kernel]
    out, cache = fwd(Q, K, V, 1e-6)
    grads = bwd(up, cache)
    for arr, g in zip((Q, K, V), grads):
        num = numeric_grad(lambda: float((fwd(Q, K, V, 1e-6)[0] * up).sum()), arr)
        assert max_rel_error(num, g) <= 1e-6


@pytest.mark.parametrize("name", ["layer_norm", "avg_pool", "upsample", "linear"])
def test_primitive_gradients(name):
    gen = np.random.default_rng(7)
    x = gen.normal(size=(5, 7, 4))
    if name == "layer_norm":
        g, b = gen.normal(size=4), gen.normal(size=4)
        fwd = lambda: nn.layer_norm(x, g, b)[0]
        out, cache = nn.layer_norm(x, g, b)
        back = lambda up: nn.layer_norm_backward(up, cache)[0]
    elif name == "avg_pool":
        fwd = lambda: nn.avg_pool(x, 3)[0]
        out, cache = nn.avg_pool(x, 3)
        back = lambda up: nn.avg_pool_backward(up, cache)
    elif name == "upsample":
        fwd = lambda: nn.upsample_nearest(x, 2, 9, 13)
        out = fwd()
        back = lambda up: nn.upsample_nearest_backward(up, 2, 5, 7)
    else:
        w = gen.normal(size=(4, 3))
        fwd = lambda: nn.linear(x, w)[0]
        out, cache = nn.linear(x, w)
        back = lambda up: nn.linear_backward(up, cache)[0]
    up = gen.normal(size=out.shape)
    num = numeric_grad(lambda: float((fwd() * up).sum()), x, coords=sample_coords(x.shape, gen, 40))
    assert max_rel_error(num, back(up)) <= 1e-6


def test_single_scale_single_head_reduces_to_kernel():
    gen = np.random.default_rng(8)
    cfg = att.AttentionConfig(4, 1, (1,), 1e-6, "relu", (1, 1))
    p = block_params(gen, 4, 1)
    x = gen.normal(size=(3, 5, 4))
    xn = ln_oracle(x, p["b.ln1.g"], p["b.ln1.b"]).reshape(-1, 4)
    A = att.relu_linear_attention(xn @ p["b.wq"], xn @ p["b.wk"], xn @ p["b.wv"], 1e-6)
    expect = x + (p["b.scale_w"][0] * A @ p["b.wo"] + p["b.bo"]).reshape(3, 5, 4)
    np.testing.assert_allclose(att.multi_scale_attention(x, p, "b", cfg)[0], expect, atol=1e-12)


def test_constant_grid_gives_constant_update():
    gen = np.random.default_rng(9)
    cfg = att.AttentionConfig(8, 2, (1, 2, 4), 1e-6, "relu", (1, 1))
    p = block_params(gen, 8, 3)
    x = np.tile(gen.normal(size=8), (5, 7, 1))
    y = att.multi_scale_attention(x, p, "b", cfg)[0] - x
    np.testing.assert_allclose(y, np.broadcast_to(y[0, 0], y.shape), atol=1e-12)


def test_backbone_shape_and_embedding_permutation():
    gen = np.random.default_rng(10)
    cfg = att.AttentionConfig(8, 2, (1, 2), 1e-6, "relu", (1, 1))
    p = att.init_backbone(gen, cfg, 6, (9, 7), np.float64)
    idx = gen.integers(0, 6, size=(9, 7))
    out = att.backbone_forward(idx, p, cfg)
    assert out.shape == (5, 4, 16)
    perm = gen.permutation(6)
    q = dict(p)
    q["embed"] = np.empty_like(p["embed"])
    q["embed"][perm] = p["embed"]
    np.testing.assert_allclose(att.backbone_forward(perm[idx], q, cfg), out, atol=1e-12)
