import os
import struct
import tempfile

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from segstereo import data as D
from segstereo import tensor as T
from segstereo.stereo import warp_horizontal


def test_pfm_golden_bytes(tmp_path):
    # 2x2 gray map, little-endian, rows stored bottom-up
    golden = b"Pf\n2 2\n-1\n" + struct.pack("<4f", 3.0, 4.0, 1.0, 2.5)
    p = tmp_path / "g.pfm"
    p.write_bytes(golden)
    data, scale = D.read_pfm(p)
    np.testing.assert_array_equal(data, [[1.0, 2.5], [3.0, 4.0]])
    assert scale == 1.0
    out = tmp_path / "o.pfm"
    D.write_pfm(out, data)
    assert out.read_bytes() == golden


def test_pfm_big_endian_and_rgb(tmp_path):
    a = np.random.default_rng(0).normal(size=(3, 5, 3)).astype(np.float32)
    D.write_pfm(tmp_path / "c.pfm", a, scale=2.0, little_endian=False)
    b, scale = D.read_pfm(tmp_path / "c.pfm")
    assert b.tobytes() == a.tobytes() and scale == 2.0


def test_pfm_rejects_garbage(tmp_path):
    (tmp_path / "x.pfm").write_bytes(b"P6\n2 2\n255\n")
    with pytest.raises(ValueError):
        D.read_pfm(tmp_path / "x.pfm")
    (tmp_path / "t.pfm").write_bytes(b"Pf\n2 2\n-1\n" + b"\0" * 7)
    with pytest.raises(ValueError):
        D.read_pfm(tmp_path / "t.pfm")


@given(st.integers(0, 2**31 - 1))
def test_pfm_round_trip_bit_exact(seed):
    a = np.random.default_rng(seed).normal(scale=100, size=(4, 7)).astype(np.float32)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "a.pfm")
        D.write_pfm(path, a)
        assert D.read_pfm(path)[0].tobytes() == a.tobytes()


def test_kitti_png_encoding(tmp_path):
    d = np.array([[1.0, 0.0], [2.5, 255.99]])
    D.write_kitti_disparity(tmp_path / "d.png", d)
    raw = np.array(Image.open(tmp_path / "d.png"))
    assert raw[0, 0] == 256 and raw[0, 1] == 0 and raw[1, 0] == 640
    back, valid = D.read_kitti_disparity(tmp_path / "d.png")
    np.testing.assert_array_equal(valid, [[True, False], [True, True]])
    assert np.max(np.abs(back - d)) <= 1 / 512


def test_kitti_png_round_trip_tolerance(tmp_path):
    d = np.random.default_rng(1).uniform(0.01, 200, size=(20, 30))
    valid = np.random.default_rng(2).random(d.shape) > 0.2
    D.write_kitti_disparity(tmp_path / "d.png", d, valid)
    back, v = D.read_kitti_disparity(tmp_path / "d.png")
    np.testing.assert_array_equal(v, valid)
    assert np.max(np.abs(back - d)[valid]) <= 1 / 512


def test_kitti_png_errors(tmp_path):
    with pytest.raises(ValueError):
        D.write_kitti_disparity(tmp_path / "a.png", np.full((2, 2), 300.0))
    with pytest.raises(ValueError):
        D.write_kitti_disparity(tmp_path / "a.png", np.full((2, 2), -1.0))
    Image.fromarray(np.zeros((2, 2, 3), np.uint8)).save(tmp_path / "rgb.png")
    with pytest.raises(ValueError):
        D.read_kitti_disparity(tmp_path / "rgb.png")


def two_plane_scene(front=8.0, back=2.0):
    planes = [D.Plane(-64, 0, 128, 32, back, 0, "noise", seed=1),
              D.Plane(40, 4, 60, 28, front, 1, "noise", seed=2)]
    return D.render_planes(planes, 32, 64)


def test_occlusion_width_matches_disparity_jump():
    s = two_plane_scene()
    row = s.noc_mask[10]
    # 2 px leave the frame on the left; 6 px are hidden behind the front plane
    assert not row[:2].any() and row[2:34].all()
    assert not row[34:40].any() and row[40:].all()
    assert (~s.noc_mask[0]).sum() == 2


def test_gt_warp_reconstructs_left_on_noc():
    s = D.gen_scene(D.SceneConfig(seed=3, disparity_range=(1, 9)))
    out, valid = warp_horizontal(T.Tensor(s.right[None]), T.Tensor(s.gt_disparity[None, None]))
    m = s.noc_mask
    assert valid[0, 0][m].all()
    np.testing.assert_allclose(out.data[0][:, m], s.left[:, m], atol=1e-9)


def test_half_integer_planes_warp_exactly():
    cfg = D.SceneConfig(seed=5, disparity_step=0.5, textures=("gradient",), disparity_range=(1, 9))
    s = D.gen_scene(cfg)
    out, _ = warp_horizontal(T.Tensor(s.right[None]), T.Tensor(s.gt_disparity[None, None]))
    np.testing.assert_allclose(out.data[0][:, s.noc_mask], s.left[:, s.noc_mask], atol=1e-6)


def test_generation_is_deterministic_and_labelled():
    a = D.gen_dataset(3, D.SceneConfig(), seed=4)
    b = D.gen_dataset(3, D.SceneConfig(), seed=4)
    for x, y in zip(a, b):
        assert x.left.tobytes() == y.left.tobytes() and x.gt_disparity.tobytes() == y.gt_disparity.tobytes()
    s = a[0]
    assert s.left.shape == (3, 64, 128)
    assert set(np.unique(s.left_labels)) <= set(range(4))
    assert s.gt_disparity.min() >= 1 and s.gt_disparity.max() <= 8


def test_scene_config_validation():
    with pytest.raises(ValueError):
        D.gen_scene(D.SceneConfig(disparity_range=(2, 30)))
    with pytest.raises(ValueError):
        D.gen_scene(D.SceneConfig(num_planes=9))
    with pytest.raises(ValueError):
        D.gen_scene(D.SceneConfig(textures=("marble",)))


def test_uncovered_planes_raise():
    with pytest.raises(ValueError):
        D.render_planes([D.Plane(0, 0, 4, 4, 1.0, 0)], 8, 8)


def test_augmentation_scales_disparity():
    s = two_plane_scene()
    big = D.scale_sample(s, 2.0)
    assert big.shape == (64, 128)
    assert set(np.unique(big.gt_disparity)) == {4.0, 16.0}
    small = D.scale_sample(s, 0.5)
    assert set(np.unique(small.gt_disparity)) == {1.0, 4.0}
    assert D.scale_sample(s, 1.0) is s


def test_batches_are_reproducible_and_resumable():
    samples = D.gen_dataset(4, D.SceneConfig(height=32, width=64))
    a = D.batch_iterator(samples, 2, (16, 32), (0.8, 1.2), seed=9)
    first = [next(a) for _ in range(5)]
    b = D.batch_iterator(samples, 2, (16, 32), (0.8, 1.2), seed=9, start_step=3)
    again = next(b)
    assert again.left.tobytes() == first[3].left.tobytes()
    assert again.gt.tobytes() == first[3].gt.tobytes()
    assert first[0].left.shape == (2, 3, 16, 32) and first[0].gt.shape == (2, 1, 16, 32)
    with pytest.raises(ValueError):
        next(D.batch_iterator(samples, 2, (64, 64)))
    with pytest.raises(ValueError):
        next(D.batch_iterator([], 2, (8, 8)))


def test_sample_directory_round_trip(tmp_path):
    s = D.gen_scene(D.SceneConfig(height=16, width=32, disparity_range=(1, 9), seed=2))
    d = D.write_sample(tmp_path / "scene", s)
    D.write_manifest(tmp_path / "manifest.txt", [d])
    (back,) = D.load_dataset(tmp_path)
    np.testing.assert_array_equal(back.left, np.rint(s.left))
    np.testing.assert_array_equal(back.gt_disparity, s.gt_disparity)
    np.testing.assert_array_equal(back.left_labels, s.left_labels)
    np.testing.assert_array_equal(back.noc_mask, s.noc_mask)
    assert back.name == "scene"
