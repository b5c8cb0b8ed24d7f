import itertools

import numpy as np
import pytest

from partformer import tensor as T
from partformer.model import (
    ConfigError,
    DataError,
    ModelConfig,
    PartFormer,
    PatchifyConfig,
    embed,
    extract_patches,
    hdb_forward,
    hdb_param_count,
    init_params,
    model_forward,
    msa_concat,
    msa_headsum,
    patch_count,
    transformer_block,
)
from partformer.tensor import Tensor

SMALL = dict(embed_dim=12, depth=2, num_heads=3, hdb_heads=3, img_height=16, img_width=8, patch=4, stride=4, num_cameras=3)


def enumerate_windows(H, W, P, s):
    tops = [y for y in range(0, H) if y + P <= H and y % s == 0]
    lefts = [x for x in range(0, W) if x + P <= W and x % s == 0]
    return len(tops), len(lefts), len(list(itertools.product(tops, lefts)))


def rand_images(rng, n, cfg):
    return rng.normal(size=(n, cfg.img_height, cfg.img_width, 3))


# ---------------------------------------------------------------- patches


@pytest.mark.parametrize("H,W,P,s,expected", [
    (256, 128, 16, 16, (16, 8, 128)),
    (256, 128, 16, 12, (21, 10, 210)),
    (5, 5, 5, 1, (1, 1, 1)),
    (64, 32, 8, 8, (8, 4, 32)),
])
def test_patch_count_examples(H, W, P, s, expected):
    assert patch_count(PatchifyConfig(H, W, P, s)) == expected


def test_patch_count_matches_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(50):
        P = int(rng.integers(1, 17))
        H, W = int(rng.integers(P, 70)), int(rng.integers(P, 70))
        s = int(rng.integers(1, P + 1))
        assert patch_count(PatchifyConfig(H, W, P, s)) == enumerate_windows(H, W, P, s)


@pytest.mark.parametrize("H,W,P,s", [(8, 8, 9, 1), (8, 16, 9, 3), (8, 8, 4, 5), (8, 8, 0, 1)])
def test_patch_config_rejects_bad_geometry(H, W, P, s):
    with pytest.raises(ConfigError):
        PatchifyConfig(H, W, P, s)


def test_extract_patches_row_major_windows():
    img = np.arange(6 * 5 * 3, dtype=float).reshape(1, 6, 5, 3)
    cfg = PatchifyConfig(6, 5, 3, 2)
    out = extract_patches(img, cfg)
    assert out.shape == (1, 4, 27)
    # window (row 1, col 0) starts at pixel (2, 0)
    np.testing.assert_array_equal(out[0, 2], img[0, 2:5, 0:3].reshape(-1))
    np.testing.assert_array_equal(out[0, 1], img[0, 0:3, 2:5].reshape(-1))


# ---------------------------------------------------------------- embedding


def test_embed_zero_image_gives_bias_rows():
    cfg = ModelConfig(**{**SMALL, "sie_lambda": 0.0})
    p = init_params(cfg, seed=1)
    p["patch_embed.bias"] = Tensor(np.random.default_rng(2).normal(size=12))
    z = embed(np.zeros((1, 16, 8, 3)), [0], p, cfg)
    assert z.shape == (1, cfg.num_patches + 1, 12)
    np.testing.assert_array_equal(z.data[0, 1:], np.broadcast_to(p["patch_embed.bias"].data, (8, 12)))


def test_embed_camera_difference_is_constant():
    cfg = ModelConfig(**SMALL)
    p = init_params(cfg, seed=1)
    rng = np.random.default_rng(3)
    p["sie_embed"] = Tensor(rng.normal(size=(3, 12)))
    img = rand_images(rng, 1, cfg)
    diff = embed(img, [0], p, cfg).data - embed(img, [2], p, cfg).data
    expected = 3.0 * (p["sie_embed"].data[0] - p["sie_embed"].data[2])
    np.testing.assert_allclose(diff[0], np.broadcast_to(expected, diff[0].shape), atol=1e-12)


def test_embed_rejects_unknown_camera():
    cfg = ModelConfig(**SMALL)
    with pytest.raises(DataError):
        embed(np.zeros((1, 16, 8, 3)), [3], init_params(cfg), cfg)


# ---------------------------------------------------------------- attention


def _rand_block(rng, c, scale=0.5):
    return Tensor(rng.normal(size=(c, 3 * c)) * scale), Tensor(rng.normal(size=(c, c)) * scale)


def test_headsum_equals_concat_on_random_draws():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        heads = int(rng.choice([1, 2, 3, 4, 6]))
        c = heads * int(rng.integers(1, 5))
        z = Tensor(rng.normal(size=(int(rng.integers(1, 9)), c)))
        qkv, proj = _rand_block(rng, c)
        worst = max(worst, np.abs(msa_concat(z, qkv, proj, heads).data - msa_headsum(z, qkv, proj, heads).data).max())
    assert worst < 1e-10


def test_single_head_is_plain_attention():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(5, 4))
    qkv, proj = _rand_block(rng, 4)
    q, k, v = z @ qkv.data[:, :4], z @ qkv.data[:, 4:8], z @ qkv.data[:, 8:]
    logits = q @ k.T / 2.0
    a = np.exp(logits - logits.max(1, keepdims=True))
    a /= a.sum(1, keepdims=True)
    np.testing.assert_allclose(msa_concat(Tensor(z), qkv, proj, 1).data, a @ v @ proj.data, atol=1e-12)


def test_one_token_attention_is_one():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(1, 6))
    qkv, proj = _rand_block(rng, 6, scale=5.0)
    v = z @ qkv.data[:, 12:]
    np.testing.assert_allclose(msa_concat(Tensor(z), qkv, proj, 2).data, v @ proj.data, atol=1e-10)


def test_zero_projection_gives_zero():
    rng = np.random.default_rng(3)
    qkv, _ = _rand_block(rng, 6)
    out = msa_headsum(Tensor(rng.normal(size=(4, 6))), qkv, Tensor(np.zeros((6, 6))), 3)
    np.testing.assert_array_equal(out.data, 0.0)


def test_zeroed_head_block_gates_out_its_qkv():
    rng = np.random.default_rng(4)
    c, heads, d, i = 12, 3, 4, 1
    z = Tensor(rng.normal(size=(2, 5, c)))
    qkv, proj = _rand_block(rng, c)
    proj.data[i * d : (i + 1) * d] = 0.0
    ref = msa_concat(z, qkv, proj, heads).data
    cols = np.r_[i * d : (i + 1) * d, c + i * d : c + (i + 1) * d, 2 * c + i * d : 2 * c + (i + 1) * d]
    for _ in range(5):
        w = qkv.data.copy()
        w[:, cols] = rng.normal(size=(c, cols.size)) * 10
        assert np.array_equal(msa_concat(z, Tensor(w), proj, heads).data, ref)


# ---------------------------------------------------------------- blocks


def test_block_with_zero_weights_is_identity():
    cfg = ModelConfig(**SMALL)
    p = {k: Tensor(np.zeros_like(v.data)) for k, v in init_params(cfg).items()}
    z = Tensor(np.random.default_rng(0).normal(size=(2, 9, 12)))
    out = transformer_block(z, p, "blocks.0", 3)
    assert out.shape == z.shape
    np.testing.assert_array_equal(out.data, z.data)


def test_block_gradient_matches_finite_differences():
    cfg = ModelConfig(**SMALL)
    p = init_params(cfg, seed=0)
    for k, v in p.items():
        v.data = v.data + np.random.default_rng(len(k)).normal(scale=0.3, size=v.shape)
    z = Tensor(np.random.default_rng(1).normal(size=(2, 5, 12)))
    assert T.grad_check(lambda z: transformer_block(z, p, "blocks.0", 3).mean(), z) < 1e-5


# ---------------------------------------------------------------- head disentangling block


def _hdb_setup(seed=0, **kw):
    cfg = ModelConfig(**{**SMALL, **kw})
    p = init_params(cfg, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for k in p:
        if k.startswith("hdb."):
            p[k].data = p[k].data + rng.normal(scale=0.4, size=p[k].shape)
    z = Tensor(rng.normal(size=(2, cfg.num_patches + 1, cfg.embed_dim)))
    return cfg, p, z


def test_attention_rows_on_simplex():
    cfg, p, z = _hdb_setup()
    rows = hdb_forward(z, p, cfg).attn_rows.data
    assert rows.shape == (2, 3, cfg.num_patches)
    assert np.all(rows >= 0)
    np.testing.assert_allclose(rows.sum(-1), 1.0, atol=1e-12)


def test_shared_attention_parts_differ_only_by_projection():
    cfg, p, z = _hdb_setup()
    c, N, d = 12, 3, 4
    w = p["hdb.qkv"].data
    for j in range(3):
        blk = w[:, j * c : j * c + d]
        for i in range(N):
            w[:, j * c + i * d : j * c + (i + 1) * d] = blk
    fs = hdb_forward(z, p, cfg)
    rows = fs.attn_rows.data
    np.testing.assert_allclose(rows[:, 0], rows[:, 1], atol=1e-15)
    # with a shared projection too, every part is the same vector
    p["hdb.part_proj"].data[:] = p["hdb.part_proj"].data[0]
    parts = hdb_forward(z, p, cfg).parts.data
    np.testing.assert_allclose(parts[:, 0], parts[:, 2], atol=1e-12)


def test_part_sensitivity_tracks_attention_weight():
    # with q, k fixed the part is linear in the token values, so the Jacobian
    # column for token t scales with a_i[t]
    cfg, p, z = _hdb_setup(seed=3)
    c, d = 12, 4
    fs = hdb_forward(z, p, cfg)
    a = fs.attn_rows.data[0]  # (N, M)
    # probe through the value rows of the normed tokens
    eps = 1e-6
    x = T.layernorm(z, p["hdb.norm.gain"], p["hdb.norm.bias"]).data[0]
    v = x @ p["hdb.qkv"].data[:, 2 * c :]
    for i in range(3):
        vi = v[1:, i * d : (i + 1) * d]
        w_i = p["hdb.part_proj"].data[i]
        base = a[i] @ vi @ w_i
        norms, weights = [], []
        for t in range(cfg.num_patches):
            bumped = vi.copy()
            bumped[t] += eps
            norms.append(np.linalg.norm(a[i] @ bumped @ w_i - base) / eps)
            weights.append(a[i, t])
        ratio = np.array(norms) / np.array(weights)
        np.testing.assert_allclose(ratio, ratio[0], rtol=1e-6)
        np.testing.assert_allclose(base, fs.parts.data[0, i], atol=1e-12)


def test_part_sensitivity_ordering_end_to_end():
    # a token the head attends to more moves that head's part more (finite differences on the input)
    cfg, p, z = _hdb_setup(seed=4)
    base = hdb_forward(z, p, cfg)
    a = base.attn_rows.data[0, 0]
    hi, lo = int(a.argmax()) + 1, int(a.argmin()) + 1
    rng = np.random.default_rng(0)
    direction = rng.normal(size=12)
    eps = 1e-6

    def moved(t):
        zz = z.data.copy()
        zz[0, t] += eps * direction
        return np.linalg.norm(hdb_forward(Tensor(zz), p, cfg).parts.data[0, 0] - base.parts.data[0, 0]) / eps

    assert a.max() > 2 * a.min()
    assert moved(hi) > moved(lo)


def test_hdb_parameter_census():
    cfg = ModelConfig()
    c, N = cfg.embed_dim, cfg.hdb_heads
    d = c // N
    expected = N * (3 * c * d + d * c) + 2 * c
    assert hdb_param_count(init_params(cfg)) == expected == 37056


def test_hdb_ffn_flag_adds_parameters():
    cfg = ModelConfig(hdb_ffn=True)
    assert hdb_param_count(init_params(cfg)) > 37056


def test_part_gradient_stays_in_its_head():
    cfg, p, z = _hdb_setup(seed=5)
    c, d, i = 12, 4, 1
    fs = hdb_forward(z, p, cfg)
    fs.parts[:, i, :].sum().backward()
    g_v = p["hdb.qkv"].grad[:, 2 * c :]
    others = [j for j in range(3) if j != i]
    for j in others:
        assert np.all(g_v[:, j * d : (j + 1) * d] == 0.0)
        assert np.all(p["hdb.part_proj"].grad[j] == 0.0)
    assert np.abs(g_v[:, i * d : (i + 1) * d]).max() > 0
    assert np.abs(p["hdb.part_proj"].grad[i]).max() > 0


def test_hdb_residual_flag_adds_class_token():
    cfg, p, z = _hdb_setup(seed=6)
    plain = hdb_forward(z, p, cfg)
    res = hdb_forward(z, p, ModelConfig(**{**SMALL, "hdb_residual": True}))
    np.testing.assert_allclose(res.global_feat.data - plain.global_feat.data, z.data[:, 0], atol=1e-12)


# ---------------------------------------------------------------- whole model


def test_desk_config_shapes():
    cfg = ModelConfig()
    fs = model_forward(np.zeros((64, 32, 3)), 1, PartFormer(cfg, seed=0))
    assert fs.global_feat.shape == (1, 96)
    assert fs.parts.shape == (1, 6, 96)
    assert fs.attn_rows.shape == (1, 6, 32)


def test_forward_is_deterministic():
    cfg = ModelConfig(**SMALL)
    img = rand_images(np.random.default_rng(0), 2, cfg)
    a, b = PartFormer(cfg, seed=9).forward(img, [0, 1]), PartFormer(cfg, seed=9).forward(img, [0, 1])
    for x, y in [(a.global_feat, b.global_feat), (a.parts, b.parts), (a.attn_rows, b.attn_rows)]:
        assert np.array_equal(x.data, y.data)


def test_camera_changes_output_unless_lambda_zero():
    rng = np.random.default_rng(1)
    for lam, same in [(3.0, False), (0.0, True)]:
        cfg = ModelConfig(**{**SMALL, "sie_lambda": lam})
        m = PartFormer(cfg, seed=0)
        m.params["sie_embed"].data = rng.normal(size=(3, 12))
        img = rand_images(rng, 1, cfg)
        a, b = m.forward(img, [0]), m.forward(img, [2])
        assert a.attn_rows.shape == b.attn_rows.shape
        assert np.array_equal(a.parts.data, b.parts.data) == same


def test_plain_vit_variant():
    cfg = ModelConfig(**{**SMALL, "enable_hdb": False})
    m = PartFormer(cfg, seed=0)
    assert not any(k.startswith("hdb.") for k in m.params)
    fs = m.forward(rand_images(np.random.default_rng(2), 2, cfg), [0, 1])
    assert fs.parts is None and fs.global_feat.shape == (2, 12)
    np.testing.assert_allclose(fs.attn_rows.data.sum(-1), 1.0, atol=1e-12)


def test_config_rejects_indivisible_heads():
    with pytest.raises(ConfigError):
        ModelConfig(embed_dim=10, hdb_heads=3)
