import numpy as np
import pytest

from vindit import dit
from vindit import numcore as nc
from helpers import fd_check, loop_mha

rng = np.random.default_rng(21)


def attn_params(d, prefix="a", zero_out=False):
    return dit.init_attention(np.random.default_rng(0), d, prefix, zero_out=zero_out)


def test_mha_matches_loop_reference():
    p = attn_params(8)
    q, kv = rng.standard_normal((3, 8)), rng.standard_normal((5, 8))
    got = dit.multi_head_attention(q, kv, p, "a", heads=2).data
    np.testing.assert_allclose(got, loop_mha(q, kv, p, "a", 2), rtol=0, atol=1e-10)


def test_single_key_returns_its_value_projection():
    p = attn_params(8)
    kv = rng.standard_normal((1, 8))
    got = dit.multi_head_attention(rng.standard_normal((4, 8)), kv, p, "a", heads=4).data
    expected = kv @ p["a.wv"].data @ p["a.wo"].data
    np.testing.assert_allclose(got, np.repeat(expected, 4, axis=0), rtol=0, atol=1e-13)


def test_duplicate_keys_do_not_change_output():
    p = attn_params(8)
    q, kv = rng.standard_normal((2, 8)), rng.standard_normal((1, 8))
    one = dit.multi_head_attention(q, kv, p, "a", 2).data
    three = dit.multi_head_attention(q, np.repeat(kv, 3, axis=0), p, "a", 2).data
    np.testing.assert_allclose(one, three, rtol=0, atol=1e-13)


def test_mha_width_mismatch():
    with pytest.raises(nc.ShapeError):
        dit.multi_head_attention(np.ones((2, 8)), np.ones((2, 6)), attn_params(8), "a", 2)


def test_heads_must_divide_width():
    with pytest.raises(ValueError):
        dit.DiTConfig(d=10, heads=4)


def small_model(L=2, d=8, n_text=2, voxel=4):
    cfg = dit.DiTConfig(L=L, d=d, heads=2, d_text=4, n_text=n_text, n_classes=3)
    return cfg, dit.init_dit(np.random.default_rng(3), cfg, voxel)


def test_block_is_identity_at_init():
    cfg, p = small_model()
    x = rng.standard_normal((5, 8))
    cond = dit.condition(1, 7, p, cfg)
    out = dit.transformer_block(x, cond.text, p, "dit.0", cfg.heads, cfg.ln_eps).data
    assert np.array_equal(out, x)


def test_block_without_text_is_plain_self_attention():
    cfg, p = small_model()
    for k in ("attn.wo", "ff.w2"):
        p[f"dit.0.{k}"].data = rng.standard_normal(p[f"dit.0.{k}"].shape) * 0.3
    x = rng.standard_normal((4, 8))
    with_none = dit.transformer_block(x, None, p, "dit.0", 2, cfg.ln_eps).data
    h = dit.layer_norm(x, p, "dit.0.ln1", cfg.ln_eps)
    y = x + dit.multi_head_attention(h, h, p, "dit.0.attn", 2).data
    ref = y + dit.feed_forward(dit.layer_norm(y, p, "dit.0.ln2", cfg.ln_eps), p, "dit.0.ff").data
    np.testing.assert_allclose(with_none, ref, rtol=0, atol=1e-13)


def perturbed_model(**kw):
    cfg, p = small_model(**kw)
    r = np.random.default_rng(9)
    for name, t in p.items():
        if name.endswith(("wo", "ff.w2", "head.w")):
            t.data = r.standard_normal(t.shape) * 0.3
    return cfg, p


def test_block_gradients_match_finite_differences():
    cfg, p = perturbed_model()
    text = dit.text_embedding(2, p, cfg).data
    names = ["dit.0.attn.wq", "dit.0.attn.wo", "dit.0.ff.w1", "dit.0.ln1.g"]
    x0 = rng.standard_normal((3, 8))

    def fn(ts):
        q = dict(p)
        q.update(zip(names, ts[1:]))
        out = dit.transformer_block(ts[0], text, q, "dit.0", 2, cfg.ln_eps)
        return nc.sum(nc.square(out))

    err, n = fd_check(fn, [x0] + [p[k].data for k in names], coords=64)
    assert n == 64 and err < 1e-6


def test_text_rows_are_order_free():
    cfg, p = perturbed_model(n_text=3)
    x = rng.standard_normal((4, 8))
    text = dit.text_embedding(0, p, cfg).data
    a = dit.transformer_block(x, text, p, "dit.1", 2, cfg.ln_eps).data
    b = dit.transformer_block(x, text[::-1], p, "dit.1", 2, cfg.ln_eps).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-13)


@pytest.mark.parametrize("n_local", [0, 8, 12])
def test_denoise_chunk_row_count(n_local):
    cfg, p = small_model()
    cond = dit.condition(0, 3, p, cfg)
    out = dit.denoise_chunk(rng.standard_normal((16, 8)), rng.standard_normal((n_local, 8)),
                            rng.standard_normal((4, 8)), cond, p, cfg)
    assert out.shape == (n_local + 16, 4)


def test_denoise_reduces_to_plain_forward_without_context():
    cfg, p = perturbed_model()
    cond = dit.condition(1, 5, p, cfg)
    x = rng.standard_normal((6, 8))
    a = dit.denoise_chunk(x, None, None, cond, p, cfg).data
    b = dit.denoise_chunk(x, np.zeros((0, 8)), np.zeros((0, 8)), cond, p, cfg).data
    h = nc.as_tensor(x)
    for l in range(cfg.L):
        h = dit.dit_block(h, cond, p, l, cfg)
    ref = nc.matmul(dit.layer_norm(h, p, "head.ln", cfg.ln_eps), p["head.w"]).data + p["head.b"].data
    assert np.array_equal(a, b)
    np.testing.assert_allclose(a, ref, rtol=0, atol=1e-13)


def test_denoise_rejects_wrong_global_width():
    cfg, p = small_model()
    with pytest.raises(nc.ShapeError):
        dit.denoise_chunk(np.ones((2, 8)), None, np.ones((2, 6)), dit.condition(0, 1, p, cfg), p, cfg)


def test_local_context_gradient_is_zero_after_stop_gradient():
    cfg, p = perturbed_model()
    cond = dit.condition(0, 4, p, cfg)
    local = nc.Tensor(rng.standard_normal((3, 8)), requires_grad=True)
    chunk = nc.Tensor(rng.standard_normal((5, 8)), requires_grad=True)
    with nc.Tape():
        out = dit.denoise_chunk(chunk, nc.stop_gradient(local), None, cond, p, cfg)
        loss = nc.sum(nc.square(out))
    g_local, g_chunk = nc.grad(loss, [local, chunk])
    assert not g_local.any() and g_chunk.any()


def test_time_embedding_is_deterministic_and_varies():
    cfg, p = small_model()
    a, b = dit.time_embedding(3, p, 8).data, dit.time_embedding(3, p, 8).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, dit.time_embedding(4, p, 8).data)


def test_unknown_class_rejected():
    cfg, p = small_model()
    with pytest.raises(ValueError):
        dit.text_embedding(3, p, cfg)
