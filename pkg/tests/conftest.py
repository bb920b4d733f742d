import numpy as np
import pytest

from vadfusion.data import SPEAKING, VideoSegment


def make_frame(value=128, size=8, seed=None):
    """Tiny uint8 frame; constant-valued unless a seed is given."""
    if seed is None:
        return np.full((size, size, 3), value, dtype=np.uint8)
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)


def make_segment(frames=None, label=SPEAKING, person="p0", seg_id="seg0", padded=False):
    if frames is None:
        frames = [make_frame(value=10 * i) for i in range(10)]
    return VideoSegment(segment_id=seg_id, person_id=person, label=label,
                        frames=list(frames), padded=padded, video_id="vid0",
                        frame_indices=list(range(len(frames))))


@pytest.fixture
def segment():
    return make_segment()
