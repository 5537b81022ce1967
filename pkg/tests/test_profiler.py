import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vindit import profiler as P


def test_attention_flops_examples():
    assert P.attention_flops(1, 1, 1) == 4
    assert P.attention_flops(64, 32, 64) == 524288


def test_attention_linear_in_each_length():
    base = P.attention_flops(10, 7, 16)
    assert P.attention_flops(20, 7, 16) == 2 * base
    assert P.attention_flops(10, 21, 16) == 3 * base


def test_full_attention_quadratic_term_quadruples():
    a = P.block_cost(100, 8, 4).attention
    b = P.block_cost(200, 8, 4).attention
    assert b == 4 * a


def test_block_cost_hand_computed():
    c = P.block_cost(3, 2, 4)
    assert (c.qkv, c.scores, c.values, c.out_proj, c.ffn) == (72, 36, 36, 24, 192)
    assert c.total == 360


def test_cross_attention_uses_key_count():
    c = P.block_cost(4, 2, 1, n_kv=9)
    assert c.scores == 2 * 4 * 9 * 2 and c.qkv == 6 * 4 * 4


shapes = st.builds(
    lambda N, frac, local, g, text, d, L, M, keys: P.ShapeConfig(
        N=N, N_s=max(1, N * frac // 10), N_local=local, N_global=g, n_text=text,
        d=d * 2, heads=2, L=L, M=M, N_keys=keys),
    st.integers(1, 4000), st.integers(1, 10), st.integers(0, 500), st.integers(0, 64),
    st.integers(0, 40), st.integers(1, 64), st.integers(1, 8), st.integers(0, 4), st.integers(0, 800),
)


@settings(max_examples=200, deadline=None)
@given(shapes)
def test_degenerate_reduction_is_exact(cfg):
    red = P.degenerate(cfg)
    assert P.vin_flops(red) == P.full_flops(red)
    assert P.vin_flops(red).total == P.full_flops(cfg).total
    assert P.savings(red) == 0.0


@settings(max_examples=100, deadline=None)
@given(shapes)
def test_totals_are_category_sums_and_integers(cfg):
    for cost in (P.full_flops(cfg), P.vin_flops(cfg)):
        parts = cost.as_dict()
        assert all(isinstance(v, int) for v in parts.values())
        assert parts.pop("total") == sum(parts.values())


def test_encode_cost_linear_in_keyframes():
    cfg = P.ShapeConfig(N=1000, N_s=100, N_global=32, d=16, N_keys=50)
    one = P.vin_encode_flops(cfg)
    for k in (2, 3, 7):
        assert P.vin_encode_flops(P.ShapeConfig(**{**cfg.__dict__, "N_keys": 50 * k})) == k * one


def test_no_global_tokens_means_no_vin_cost():
    cfg = P.ShapeConfig(N=100, N_s=50, N_global=0, M=3, N_keys=20)
    assert P.vin_encode_flops(cfg) == 0 and P.vin_process_flops(cfg) == 0


def test_savings_grow_with_length():
    s = [row.savings for row in P.sweep()]
    assert all(b > a for a, b in zip(s, s[1:]))


def test_toy_config_spreadsheet_oracle():
    # N=8 tokens, chunks of 4 with 2 local rows, 2 latents, 1 text row, d=2, L=1, M=1, 3 keys.
    cfg = P.ShapeConfig(N=8, N_s=4, N_local=2, N_global=2, n_text=1, d=2, heads=1, L=1, M=1, N_keys=3, ffn_mult=1)
    per_block = lambda n, m: 6 * n * 4 + 4 * n * m * 2 + 2 * n * 4 + 4 * n * 4
    assert P.full_flops(cfg).total == per_block(9, 9) == 1080
    encode = 4 * 3 * 4 + 4 * 2 * 3 * 2
    process = 4 * 2 * 4 + per_block(3, 3)
    chunks = 2 * per_block(9, 9)
    assert P.vin_encode_flops(cfg) == encode == 96
    assert P.vin_process_flops(cfg) == process
    assert P.vin_flops(cfg).total == chunks + encode + process


@pytest.mark.parametrize("kw", [{"N": 0, "N_s": 1}, {"N": 4, "N_s": 8}, {"N": 4, "N_s": 2, "M": -1},
                                {"N": 4.0, "N_s": 2}])
def test_shape_validation(kw):
    with pytest.raises(P.ProfilerError):
        P.ShapeConfig(**kw)


def test_proxy_shapes():
    cfg = P.LARGE_PROXY.shape(128)
    assert cfg.N == 40 * 240 and cfg.N_s == 20 * 240 and cfg.N_keys == 8 * 240
    with pytest.raises(P.ProfilerError):
        P.LARGE_PROXY.shape(100)


def test_sweep_csv_and_report():
    rows = P.sweep(frames=(64, 128))
    text = P.sweep_csv(rows)
    assert text.splitlines()[0] == "frames,full_total,vin_total,savings"
    assert len(text.splitlines()) == 3
    report = P.cost_report(P.LARGE_PROXY.shape(64))
    assert "full.total" in report and report.rstrip().splitlines()[-1].startswith("savings = ")


def test_band_check_looks_at_longest_settings():
    rows = [P.SweepRow(64, 100, 200), P.SweepRow(128, 100, 70), P.SweepRow(256, 100, 65)]
    assert P.savings_band_holds(rows)
    assert not P.savings_band_holds(rows, longest=3)
    assert np.isclose(rows[1].savings, 0.3)
