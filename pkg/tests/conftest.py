import numpy as np
import pytest

from poseswap.media import Frame, Keypoints, SubjectMask, VideoClip


def random_frame(rng, h=32, w=56):
    return Frame(rng.random((h, w, 3)))


def blob_mask(h, w, cy, cx, ry, rx):
    """Soft elliptical blob mask with anti-aliased edge."""
    yy, xx = np.mgrid[0:h, 0:w]
    d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    return SubjectMask(np.clip(1.5 - d, 0.0, 1.0).clip(0, 1))


def make_clip(rng, t=8, h=32, w=56, k=9, species_id="longbird", clip_id="clip_000"):
    frames, masks, poses = [], [], []
    for i in range(t):
        frames.append(random_frame(rng, h, w))
        masks.append(blob_mask(h, w, h / 2 + i * 0.3, w / 2, h / 5, w / 6))
        pts = np.zeros((k, 3))
        pts[:, 0] = rng.uniform(1, w - 2, size=k)
        pts[:, 1] = rng.uniform(1, h - 2, size=k)
        pts[:, 2] = 1.0
        poses.append(Keypoints(pts))
    return VideoClip(frames=tuple(frames), masks=tuple(masks), poses=tuple(poses),
                     species_id=species_id, clip_id=clip_id)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
