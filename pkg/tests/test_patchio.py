import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vindit import numcore as nc
from vindit import patchio as pio

rng = np.random.default_rng(7)


def zero_positions(spec, H, W, F, d):
    gh, gw, gf = spec.grid(H, W, F)
    return pio.PositionalTables(nc.Tensor(np.zeros((gh, d))), nc.Tensor(np.zeros((gw, d))), nc.Tensor(np.zeros((gf, d))))


def test_token_count():
    spec = pio.PatchSpec(2, 2, 2, 16)
    v = pio.VideoTensor(rng.standard_normal((8, 8, 4, 1)))
    ts = pio.patchify(v, spec, rng.standard_normal((8, 16)))
    assert ts.tokens.shape == (32, 16)
    assert len(ts) == 4 * 4 * 2


def test_single_voxel_is_pixel_plus_position():
    spec = pio.PatchSpec(1, 1, 1, 1)
    pos = pio.PositionalTables(nc.Tensor([[0.25]]), nc.Tensor([[0.5]]), nc.Tensor([[-1.0]]))
    ts = pio.patchify(pio.VideoTensor(np.full((1, 1, 1, 1), 3.0)), spec, np.eye(1), pos)
    assert ts.tokens.data.item() == 3.0 + 0.25 + 0.5 - 1.0


def test_identity_round_trip():
    spec = pio.PatchSpec(2, 2, 1, 4)
    v = pio.VideoTensor(rng.standard_normal((4, 4, 2, 1)))
    ts = pio.patchify(v, spec, np.eye(4), zero_positions(spec, 4, 4, 2, 4))
    back = pio.unpatchify(ts, spec, np.eye(4))
    assert np.array_equal(back.values, v.values)


def test_unpatchify_matches_voxel_loop():
    spec = pio.PatchSpec(2, 2, 2, 6)
    H, W, F, C = 4, 6, 4, 2
    proj_out = rng.standard_normal((6, spec.voxel * C))
    gh, gw, gf = spec.grid(H, W, F)
    index_map = pio.grid_index(gh, gw, gf)
    tokens = rng.standard_normal((len(index_map), 6))
    out = pio.unpatchify(pio.TokenSequence(nc.Tensor(tokens), index_map, (gh, gw, gf), 2), spec, proj_out).values
    ref = np.zeros((H, W, F, C))
    for row, (h, w, f) in enumerate(index_map):
        vox = tokens[row] @ proj_out
        k = 0
        for a in range(2):
            for b in range(2):
                for c in range(2):
                    for ch in range(C):
                        ref[2 * h + a, 2 * w + b, 2 * f + c, ch] = vox[k]
                        k += 1
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_unpatchify_zero_tokens_give_zero_video():
    spec = pio.PatchSpec(2, 2, 1, 3)
    idx = pio.grid_index(2, 2, 3)
    ts = pio.TokenSequence(nc.Tensor(np.zeros((12, 3))), idx, (2, 2, 3))
    assert not pio.unpatchify(ts, spec, rng.standard_normal((3, 4))).values.any()


def test_unpatchify_rejects_incomplete_index_map():
    spec = pio.PatchSpec(2, 2, 1, 3)
    idx = pio.grid_index(2, 2, 3)[:-1]
    ts = pio.TokenSequence(nc.Tensor(np.zeros((11, 3))), idx, (2, 2, 3))
    with pytest.raises(pio.PatchError, match="covers"):
        pio.unpatchify(ts, spec, np.zeros((3, 4)))


def test_non_divisible_extents():
    with pytest.raises(pio.PatchError):
        pio.PatchSpec(2, 2, 3, 8).grid(4, 4, 5)


def test_tokens_are_frame_major():
    idx = pio.grid_index(3, 2, 4)
    assert np.all(np.diff(idx[:, 2]) >= 0)
    assert len({tuple(r) for r in idx}) == 24


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 2))
def test_voxel_rows_round_trip(p1, p2, p3, C):
    spec = pio.PatchSpec(p1, p2, p3, 4)
    values = np.random.default_rng(p1 * 100 + p2 * 10 + p3).standard_normal((2 * p1, 3 * p2, 2 * p3, C))
    rows = pio.voxel_rows(values, spec)
    assert rows.shape == (12, spec.voxel * C)
    assert np.array_equal(pio.video_from_rows(rows, spec, *values.shape[:3]), values)


# --- keyframes ----------------------------------------------------------------


def frames_kept(F, fps, T_s, p3=1):
    idx = pio.grid_index(1, 1, F // p3)
    return sorted(idx[pio.keyframe_rows(idx, p3, fps, T_s), 2] * p3)


def test_keyframes_every_second_at_16fps():
    assert frames_kept(32, 16.0, 1.0) == [0, 16]


def test_keyframes_half_second():
    assert frames_kept(40, 16.0, 0.5) == [0, 8, 16, 24, 32]


def test_keyframe_stride_clamps_to_one():
    assert frames_kept(5, 16.0, 0.01) == [0, 1, 2, 3, 4]
    with pytest.raises(pio.KeyframeError):
        pio.keyframe_stride(16.0, 0.0)


def test_keyframes_count_from_window_start():
    idx = pio.grid_index(2, 2, 40)[4 * 20 :]  # frames 20..39
    rows = pio.keyframe_rows(idx, 1, 16.0, 1.0)
    assert sorted(set(idx[rows, 2])) == [20, 36]


# --- synthetic clips ------------------------------------------------------------


def test_rightward_sprite_centroid_moves_one_pixel():
    spec = pio.DatasetSpec(clips=8, H=8, W=8, F=4, directions=("right",), speeds=(1,), shapes=("square",))
    video, class_id, _ = pio.generate_synthetic(spec, 0)
    assert spec.motion(class_id) == (1, 0)
    fg = video.values[..., 0] != spec.background
    # Sprites wrap on the torus, so track the column shift by circular correlation.
    for f in range(3):
        shifts = [np.array_equal(np.roll(fg[:, :, f], s, axis=1), fg[:, :, f + 1]) for s in range(8)]
        assert shifts.index(True) == 1


def test_generation_is_deterministic():
    spec = pio.DatasetSpec()
    a, ca, _ = pio.generate_synthetic(spec, 11)
    b, cb, _ = pio.generate_synthetic(spec, 11)
    assert ca == cb and np.array_equal(a.values, b.values)


def test_ground_truth_flow_magnitude_equals_speed_on_shapes():
    spec = pio.DatasetSpec()
    for i in (1, 3):  # speed-2 classes
        video, class_id, flows = pio.generate_synthetic(spec, i)
        speed = np.hypot(*spec.motion(class_id))
        fg = video.values[:, :, 0, 0] != spec.background
        mag = flows[0].magnitude
        assert np.all(mag[fg] == speed) and np.all(mag[~fg] == 0)


def test_synthetic_values_are_normalized():
    video, _, _ = pio.generate_synthetic(pio.DatasetSpec(), 5)
    assert video.values.min() >= -1 and video.values.max() <= 1


# --- file format ----------------------------------------------------------------


def test_video_file_round_trip(tmp_path):
    v = pio.VideoTensor(rng.standard_normal((3, 5, 7, 2)), fps=12.5)
    pio.write_video(tmp_path / "a.vinv", v)
    back = pio.read_video(tmp_path / "a.vinv")
    assert back.fps == 12.5 and np.array_equal(back.values, v.values)


def test_corrupt_magic(tmp_path):
    path = tmp_path / "a.vinv"
    pio.write_video(path, pio.VideoTensor(np.zeros((1, 1, 1, 1))))
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(pio.VideoFormatError, match="magic"):
        pio.read_video(path)


def test_payload_length_mismatch(tmp_path):
    path = tmp_path / "a.vinv"
    pio.write_video(path, pio.VideoTensor(np.zeros((2, 2, 2, 1))))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(pio.VideoLengthError):
        pio.read_video(path)


def test_png_export(tmp_path):
    pytest.importorskip("PIL")
    v = pio.VideoTensor(np.linspace(-1, 1, 2 * 3 * 4).reshape(2, 3, 4, 1))
    paths = pio.export_png_frames(v, tmp_path / "png")
    assert len(paths) == 4 and all(p.exists() for p in paths)
