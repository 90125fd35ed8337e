import hashlib
from pathlib import Path

import numpy as np
import pytest

from mexflow import synthetic


def tree_hash(root):
    digest = hashlib.sha256()
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            digest.update(str(path.relative_to(root)).encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


def test_counts_and_balance(small_corpus):
    _, records, _ = small_corpus
    assert len(records) == 12
    counts = np.bincount([r.emotion for r in records], minlength=3)
    assert list(counts) == [4, 4, 4]


def test_records_valid_and_apex_in_middle_quarters(small_corpus):
    _, records, truth = small_corpus
    n = 12
    for rec in records:
        assert rec.onset_index == 0
        assert n // 4 <= rec.apex_index < (3 * n) // 4
        assert truth.videos[rec.video_id].apex_index == rec.apex_index


def test_truth_unimodal_peak_at_apex(small_corpus):
    _, records, truth = small_corpus
    for rec in records:
        mags = truth.mean_magnitude(rec.video_id)
        apex = truth.videos[rec.video_id].apex_index
        assert int(np.argmax(mags)) == apex
        assert np.all(np.diff(mags[: apex + 1]) > 0)
        assert np.all(np.diff(mags[apex:]) < 0)


def test_zero_amplitude_static_frames(tmp_path):
    spec = synthetic.SyntheticSpec(
        subjects=1, videos_per_subject=1, frames_per_video=6,
        image_size=32, motion_amplitude=0.0, noise_sigma=0.0, seed=1,
    )
    records, truth = synthetic.generate_synthetic_corpus(spec, tmp_path)
    frames = [records[0].load_frame(i) for i in range(6)]
    for f in frames[1:]:
        np.testing.assert_array_equal(frames[0], f)
    assert truth.videos[records[0].video_id].apex_index is not None


def test_determinism_bit_identical(tmp_path):
    spec = synthetic.SyntheticSpec(
        subjects=2, videos_per_subject=3, frames_per_video=6,
        image_size=32, motion_amplitude=1.0, noise_sigma=0.01, seed=99,
    )
    synthetic.generate_synthetic_corpus(spec, tmp_path / "a")
    synthetic.generate_synthetic_corpus(spec, tmp_path / "b")
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")


def test_amplitude_cap_enforced():
    with pytest.raises(ValueError, match="amplitude"):
        synthetic.SyntheticSpec(image_size=32, motion_amplitude=5.0).validate()


def test_truth_round_trip(tmp_path, small_corpus):
    root, records, truth = small_corpus
    loaded = synthetic.load_truth(root)
    assert set(loaded.videos) == set(truth.videos)
    vid = records[0].video_id
    assert loaded.videos[vid].apex_index == truth.videos[vid].apex_index
    np.testing.assert_allclose(
        loaded.videos[vid].profile, truth.videos[vid].profile, atol=1e-12
    )
    p0, q0 = truth.displacement(vid, 3)
    p1, q1 = loaded.displacement(vid, 3)
    np.testing.assert_allclose(p0, p1, atol=1e-5)
    np.testing.assert_allclose(q0, q1, atol=1e-5)
