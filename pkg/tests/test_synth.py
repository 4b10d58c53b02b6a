import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgvos.synth import (
    Shape,
    SynthConfig,
    VideoClip,
    augment,
    flow_decode,
    flow_encode,
    generate_clip,
    generate_dataset,
    load_clip,
    load_dataset,
    quantize,
    render_shapes,
    save_dataset,
)


def test_generation_is_deterministic():
    cfg = SynthConfig(height=64, width=96, length=5, seed=7)
    a, b = generate_clip(cfg), generate_clip(cfg)
    for xs, ys in [(a.frames, b.frames), (a.flows, b.flows), (a.masks, b.masks)]:
        for x, y in zip(xs, ys):
            np.testing.assert_array_equal(x, y)
    c = generate_clip(SynthConfig(height=64, width=96, length=5, seed=8))
    assert not np.array_equal(a.frames[0], c.frames[0])


@pytest.mark.parametrize("background", ["flat", "gradient", "noise"])
@pytest.mark.parametrize("n_fg", [1, 2, 3])
def test_clip_invariants(background, n_fg):
    cfg = SynthConfig(height=64, width=96, length=6, n_foreground=n_fg, background=background, seed=n_fg)
    clip = generate_clip(cfg)
    assert len(clip.frames) == len(clip.flows) == len(clip.masks) == len(clip) == 6
    for f, fl, m, uv in zip(clip.frames, clip.flows, clip.masks, clip.flow_uv):
        assert f.shape == fl.shape == (3, 64, 96)
        assert m.shape == (64, 96) and set(np.unique(m)) <= {0, 1}
        assert 0 <= f.min() and f.max() <= 1
        assert m.sum() > 0
        # flow lives only on the moving shapes
        assert not uv[:, m == 0].any()
        u, v = flow_decode(fl, cfg.u_max)
        assert np.abs(u[m == 0]).max() < 1e-5 and np.abs(v[m == 0]).max() < 1e-5


def test_foreground_never_leaves_frame():
    for seed in range(10):
        cfg = SynthConfig(height=64, width=64, length=30, speed_range=(3, 3), seed=seed)
        clip = generate_clip(cfg)
        for m in clip.masks:
            assert m.sum() > 0


def test_static_scene():
    cfg = SynthConfig(height=64, width=64, length=4, speed_range=(0, 0), rotation_range=(0, 0), seed=3)
    clip = generate_clip(cfg)
    for fl in clip.flows:
        np.testing.assert_array_equal(fl, flow_encode(np.zeros((64, 64)), np.zeros((64, 64))))
    for m in clip.masks[1:]:
        np.testing.assert_array_equal(m, clip.masks[0])


def test_translating_circle_has_exact_flow():
    bg = np.full((3, 40, 60), 0.3)
    circle = Shape("circle", 5.0, (0.9, 0.1, 0.1), [(15.0 + 2 * t, 20.0) for t in range(5)], [0.0] * 5, True)
    frames, masks, flow_uv = render_shapes([circle], bg, 4)
    for m, uv in zip(masks, flow_uv):
        np.testing.assert_allclose(uv[0][m == 1], 2.0, atol=1e-12)
        np.testing.assert_allclose(uv[1][m == 1], 0.0, atol=1e-12)
        u, v = flow_decode(flow_encode(uv[0], uv[1]))
        np.testing.assert_allclose(u[m == 1], 2.0, atol=1e-6)
        np.testing.assert_allclose(v[m == 1], 0.0, atol=1e-6)


def test_rotating_flow_is_rigid():
    bg = np.zeros((3, 48, 48))
    sq = Shape("rectangle", 10.0, (1, 1, 1), [(24.0, 24.0)] * 3, [0.0, 0.1, 0.2], True)
    _, masks, flow_uv = render_shapes([sq], bg, 2)
    ys, xs = np.nonzero(masks[0])
    u, v = flow_uv[0][0][ys, xs], flow_uv[0][1][ys, xs]
    px, py = xs - 24.0, ys - 24.0
    np.testing.assert_allclose(u, math.cos(0.1) * px - math.sin(0.1) * py - px, atol=1e-12)
    np.testing.assert_allclose(v, math.sin(0.1) * px + math.cos(0.1) * py - py, atol=1e-12)


@pytest.mark.parametrize("center", [(20.0, 20.0), (20.5, 19.25), (17.3, 22.8)])
def test_circle_pixel_count_matches_rasterization_oracle(center):
    bg = np.zeros((3, 40, 40))
    circle = Shape("circle", 5.0, (1, 1, 1), [center] * 2, [0.0] * 2, True)
    _, masks, _ = render_shapes([circle], bg, 1)
    count = sum(
        1 for y in range(40) for x in range(40) if (x - center[0]) ** 2 + (y - center[1]) ** 2 <= 25.0
    )
    assert masks[0].sum() == count
    if center == (20.0, 20.0):
        assert count == 81  # lattice points with x^2 + y^2 <= 25


def test_distractors_are_static_lookalikes():
    clip = generate_clip(SynthConfig(height=64, width=96, length=3, n_distractors=2, seed=11))
    shapes = clip.metadata["shapes"]
    assert sum(not s["moving"] for s in shapes) == 2
    assert len({s["kind"] for s in shapes}) == 1
    for s in shapes:
        if not s["moving"]:
            assert all(c == s["centers"][0] for c in s["centers"])


def test_infeasible_config():
    with pytest.raises(ValueError):
        SynthConfig(height=16, width=64, size_range=(7, 12))
    with pytest.raises(ValueError):
        SynthConfig(n_foreground=4)
    with pytest.raises(ValueError):
        SynthConfig(background="plaid")


def test_flow_encoding_examples():
    z = flow_encode(np.zeros((2, 2)), np.zeros((2, 2)))
    np.testing.assert_array_equal(z[:, 0, 0], [0.5, 0.5, 0.0])
    s = flow_encode(np.full((1, 1), 20.0), np.zeros((1, 1)), 20.0)
    np.testing.assert_allclose(s[:, 0, 0], [1.0, 0.5, 1.0])


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_flow_round_trip_within_quantization(seed):
    rng = np.random.default_rng(seed)
    u, v = rng.uniform(-20, 20, (2, 6, 7))
    du, dv = flow_decode(quantize(flow_encode(u, v)))
    # one 8-bit level of the (u, v) channels spans 2 * u_max / 255 px
    assert np.abs(du - u).max() <= 20.0 / 255 + 1e-6
    assert np.abs(dv - v).max() <= 20.0 / 255 + 1e-6


def _sample(seed=0, size=(48, 64)):
    rng = np.random.default_rng(seed)
    frame = rng.random((3, *size)).astype(np.float32)
    u, v = rng.uniform(-5, 5, (2, *size))
    mask = np.zeros(size, dtype=np.uint8)
    mask[10:30, 20:44] = 1
    return frame, flow_encode(u, v), mask


def test_augment_flip_twice_is_identity():
    frame, flow, mask = _sample()
    rng = np.random.default_rng(0)
    once = augment(frame, flow, mask, rng, flip=True, angle=0.0, scale=1.0)
    twice = augment(*once, rng, flip=True, angle=0.0, scale=1.0)
    np.testing.assert_array_equal(twice[0], frame)
    np.testing.assert_allclose(twice[1], flow, atol=1e-6)
    np.testing.assert_array_equal(twice[2], mask)


def test_augment_no_op_is_identity():
    frame, flow, mask = _sample(1)
    out = augment(frame, flow, mask, np.random.default_rng(0), flip=False, angle=0.0, scale=1.0)
    np.testing.assert_array_equal(out[0], frame)
    np.testing.assert_allclose(out[1], flow, atol=1e-6)
    np.testing.assert_array_equal(out[2], mask)


def test_augment_flip_negates_u():
    size = (16, 16)
    flow = flow_encode(np.full(size, 2.0), np.zeros(size))
    _, out, _ = augment(np.zeros((3, *size)), flow, np.zeros(size, np.uint8), np.random.default_rng(0),
                        flip=True, angle=0.0, scale=1.0)
    u, v = flow_decode(out)
    np.testing.assert_allclose(u, -2.0, atol=1e-5)
    np.testing.assert_allclose(v, 0.0, atol=1e-5)


def test_augment_rotates_flow_vectors():
    size = (33, 33)
    flow = flow_encode(np.full(size, 4.0), np.zeros(size))
    _, out, _ = augment(np.zeros((3, *size)), flow, np.zeros(size, np.uint8), np.random.default_rng(0),
                        flip=False, angle=30.0, scale=1.0)
    u, v = flow_decode(out)
    c = (16, 16)
    assert u[c] == pytest.approx(4 * math.cos(math.radians(30)), abs=1e-3)
    assert v[c] == pytest.approx(4 * math.sin(math.radians(30)), abs=1e-3)


@pytest.mark.parametrize("angle", [-10.0, -4.0, 3.0, 10.0])
def test_augment_rotation_preserves_mask_area(angle):
    size = (64, 64)
    yy, xx = np.mgrid[0:64, 0:64]
    mask = ((yy - 31.5) ** 2 + (xx - 31.5) ** 2 <= 12**2).astype(np.uint8)
    _, _, out = augment(np.zeros((3, *size)), flow_encode(np.zeros(size), np.zeros(size)), mask,
                        np.random.default_rng(0), flip=True, angle=angle, scale=1.0)
    assert abs(int(out.sum()) - int(mask.sum())) / mask.sum() <= 0.02


def test_augment_random_draws_are_seeded():
    frame, flow, mask = _sample(2)
    a = augment(frame, flow, mask, np.random.default_rng(5), out_size=(32, 32))
    b = augment(frame, flow, mask, np.random.default_rng(5), out_size=(32, 32))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    assert a[0].shape == (3, 32, 32) and a[2].shape == (32, 32)
    assert set(np.unique(a[2])) <= {0, 1}


def test_disk_round_trip(tmp_path):
    clips = generate_dataset(SynthConfig(height=32, width=48, length=3, seed=4), 2)
    save_dataset(clips, tmp_path / "ds")
    loaded = load_dataset(tmp_path / "ds")
    assert [c.name for c in loaded] == [c.name for c in clips]
    for a, b in zip(clips, loaded):
        for x, y in zip(a.frames, b.frames):
            np.testing.assert_allclose(y, quantize(x), atol=1e-6)
        for x, y in zip(a.flows, b.flows):
            np.testing.assert_allclose(y, quantize(x), atol=1e-6)
        for x, y in zip(a.masks, b.masks):
            np.testing.assert_array_equal(x, y)
        assert b.metadata["u_max"] == 20.0
    assert sorted(p.name for p in (tmp_path / "ds" / clips[0].name).iterdir()) == ["clip.json", "flows", "frames", "masks"]
    assert (tmp_path / "ds" / clips[0].name / "masks" / "00000.pgm").exists()


def test_loader_errors(tmp_path):
    with pytest.raises(FileNotFoundError, match="nowhere"):
        load_dataset(tmp_path / "nowhere")
    (tmp_path / "bad" / "c0" / "frames").mkdir(parents=True)
    with pytest.raises(FileNotFoundError, match="no images in .*frames"):
        load_clip(tmp_path / "bad" / "c0")
    clip = generate_dataset(SynthConfig(height=32, width=32, size_range=(4, 6), length=2), 1)[0]
    save_dataset([clip], tmp_path / "ok")
    d = tmp_path / "ok" / clip.name
    for p in (d / "flows").iterdir():
        p.unlink()
    (d / "flows").rmdir()
    with pytest.raises(FileNotFoundError, match=f"missing directory .*{clip.name}/flows"):
        load_clip(d)


def test_clip_length_mismatch():
    with pytest.raises(ValueError):
        VideoClip("x", [np.zeros((3, 4, 4))], [], [np.zeros((4, 4))])
