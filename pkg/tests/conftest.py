import numpy as np
import pytest

from mexflow import synthetic


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Tiny deterministic corpus shared across tests: 4 subjects x 3 videos."""
    root = tmp_path_factory.mktemp("corpus")
    spec = synthetic.SyntheticSpec(
        subjects=4,
        videos_per_subject=3,
        frames_per_video=12,
        image_size=64,
        motion_amplitude=2.0,
        noise_sigma=0.005,
        seed=3,
    )
    records, truth = synthetic.generate_synthetic_corpus(spec, root)
    return root, records, truth


def blob_texture(size=64, seed=3, shift=(0.0, 0.0)):
    """Smooth analytic multi-blob image; exact subpixel shifts for flow tests."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size].astype(float)
    img = np.zeros((size, size))
    for _ in range(30):
        cx, cy = rng.uniform(5, size - 5, 2)
        sig = rng.uniform(2.5, 9.0)
        amp = rng.uniform(-1.0, 1.0)
        img += amp * np.exp(
            -(((xs - shift[0]) - cx) ** 2 + ((ys - shift[1]) - cy) ** 2) / (2 * sig * sig)
        )
    lo, hi = img.min(), img.max()
    return 0.25 + 0.5 * (img - lo) / (hi - lo + 1e-12)
