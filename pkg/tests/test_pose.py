import numpy as np
import pytest

from poseswap.errors import ShapeError
from poseswap.media import Keypoints
from poseswap.pose import pad_pose_channels, render_heatmaps, soft_init


def kp(points):
    return Keypoints(np.asarray(points, dtype=np.float64))


def test_single_keypoint_gaussian_closed_form():
    poses = [kp([[10.0, 10.0, 1.0]])]
    maps = render_heatmaps(poses, [], 32, 32, sigma_heat=1.5)
    assert maps.shape == (1, 2, 32, 32)
    assert maps[0, 0, 10, 10] == pytest.approx(1.0)
    # value at (x=10, y=13): squared distance 9 -> exp(-9 / (2*1.5^2)) = exp(-2)
    assert maps[0, 0, 13, 10] == pytest.approx(np.exp(-2.0), abs=1e-12)
    peak = np.unravel_index(np.argmax(maps[0, 0]), maps[0, 0].shape)
    assert abs(peak[0] - 10) <= 1 and abs(peak[1] - 10) <= 1


def test_invisible_keypoints_zero_channels():
    poses = [kp([[5.0, 5.0, 0.0], [8.0, 8.0, 0.0]])]
    maps = render_heatmaps(poses, [(0, 1)], 16, 16)
    assert maps[0, 0].max() == 0.0
    assert maps[0, 1].max() == 0.0
    assert maps[0, 2].max() == 0.0  # edge needs both joints visible


def test_edge_channel_along_segment():
    poses = [kp([[2.0, 8.0, 1.0], [13.0, 8.0, 1.0]])]
    maps = render_heatmaps(poses, [(0, 1)], 16, 16)
    edge = maps[0, 2]
    assert edge[8, 7] == pytest.approx(1.0)   # on the segment
    assert edge[14, 7] == 0.0                 # far from it
    assert edge[8, 1] == 0.0                  # beyond the endpoint cap


def test_heatmaps_translation_equivariant():
    rng = np.random.default_rng(3)
    pts = np.array([[10.0, 12.0, 1.0], [14.0, 9.0, 1.0]])
    base = render_heatmaps([kp(pts)], [(0, 1)], 32, 32)
    shifted = pts.copy()
    shifted[:, 0] += 3
    shifted[:, 1] += 2
    moved = render_heatmaps([kp(shifted)], [(0, 1)], 32, 32)
    np.testing.assert_allclose(moved[0, :, 6:28, 7:29], base[0, :, 4:26, 4:26],
                               atol=1e-12)


def test_soft_init_lambda_zero_is_identity(rng):
    noise = rng.standard_normal((2, 3, 16, 16))
    maps = rng.random((2, 5, 16, 16))
    out = soft_init(noise, maps, 0.0)
    np.testing.assert_array_equal(out, noise)


def test_soft_init_zero_heatmaps_scales_noise(rng):
    noise = rng.standard_normal((2, 3, 16, 16))
    out = soft_init(noise, np.zeros((2, 5, 16, 16)), 0.3)
    np.testing.assert_allclose(out, np.sqrt(0.7) * noise, atol=1e-12)
    assert out.var() == pytest.approx(0.7, abs=0.05)


def test_soft_init_variance_preserving(rng):
    noise = rng.standard_normal((4, 3, 32, 32))
    maps = rng.random((4, 10, 32, 32))  # generic non-degenerate heatmaps
    out = soft_init(noise, maps, 0.3)
    assert out.size >= 10_000
    assert 0.9 <= out.var() <= 1.1


def test_soft_init_deterministic(rng):
    noise = rng.standard_normal((2, 3, 16, 16))
    maps = rng.random((2, 4, 16, 16))
    np.testing.assert_array_equal(soft_init(noise, maps, 0.3),
                                  soft_init(noise, maps, 0.3))


def test_soft_init_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        soft_init(rng.standard_normal((2, 3, 16, 16)), rng.random((2, 4, 8, 8)), 0.3)


def test_pad_pose_channels():
    maps = np.random.default_rng(0).random((2, 10, 8, 8))  # K=9 + edge
    out = pad_pose_channels(maps, 17)
    assert out.shape == (2, 18, 8, 8)
    np.testing.assert_array_equal(out[:, :9], maps[:, :9])
    np.testing.assert_array_equal(out[:, -1], maps[:, -1])
    assert out[:, 9:17].max() == 0.0
    with pytest.raises(ShapeError):
        pad_pose_channels(np.zeros((1, 19, 8, 8)), 17)
    same = pad_pose_channels(maps, 9)
    np.testing.assert_array_equal(same, maps)
