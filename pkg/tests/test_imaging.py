import json

import numpy as np
import pytest

from mexflow import imaging


class TestPgm:
    def test_pixel_definition(self, tmp_path):
        path = tmp_path / "t.pgm"
        path.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 128, 255, 64]))
        img = imaging.load_pgm(path)
        np.testing.assert_allclose(
            img, np.array([[0, 128 / 255], [1.0, 64 / 255]]), atol=1e-12
        )

    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, size=(17, 23)).astype(np.float64) / 255.0
        path = tmp_path / "r.pgm"
        imaging.save_pgm(img, path)
        again = imaging.load_pgm(path)
        np.testing.assert_array_equal(img, again)
        imaging.save_pgm(again, tmp_path / "r2.pgm")
        assert path.read_bytes() == (tmp_path / "r2.pgm").read_bytes()

    def test_maxval_rejected(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P5\n2 2\n65535\n" + bytes(8))
        with pytest.raises(imaging.PgmFormatError, match="maxval"):
            imaging.load_pgm(path)

    def test_truncated_payload_names_offset(self, tmp_path):
        path = tmp_path / "short.pgm"
        path.write_bytes(b"P5\n4 4\n255\n" + bytes(7))
        with pytest.raises(imaging.PgmFormatError, match="byte"):
            imaging.load_pgm(path)

    def test_comments_in_header(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# a comment\n2 1\n255\n" + bytes([10, 20]))
        img = imaging.load_pgm(path)
        assert img.shape == (1, 2)


class TestManifest:
    def _write_frames(self, tmp_path, n=4):
        paths = []
        for i in range(n):
            p = tmp_path / f"f{i}.pgm"
            imaging.save_pgm(np.full((4, 4), i / 10.0), p)
            paths.append(p.name)
        return paths

    def test_valid_two_records(self, tmp_path):
        frames = self._write_frames(tmp_path)
        doc = {
            "samples": [
                {
                    "subject_id": "s1",
                    "video_id": "v1",
                    "emotion": 0,
                    "frames": frames,
                    "onset_index": 0,
                    "apex_index": 2,
                    "source_db": "dbA",
                },
                {
                    "subject_id": "s1",
                    "video_id": "v2",
                    "emotion": 2,
                    "frames": frames,
                    "onset_index": 0,
                    "apex_index": None,
                    "source_db": "dbA",
                },
            ]
        }
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps(doc))
        records = imaging.load_manifest(path)
        assert len(records) == 2
        assert records[0].subject_key == "dbA:s1"
        assert records[1].apex_index is None

    def test_apex_equal_onset_rejected_by_video_id(self, tmp_path):
        frames = self._write_frames(tmp_path)
        doc = {
            "samples": [
                {
                    "subject_id": "s1",
                    "video_id": "vbad",
                    "emotion": 1,
                    "frames": frames,
                    "onset_index": 1,
                    "apex_index": 1,
                    "source_db": "dbA",
                }
            ]
        }
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(imaging.ManifestError, match="vbad"):
            imaging.load_manifest(path)

    def test_composite_subject_namespacing(self, tmp_path):
        # same raw subject id in two source databases must not collide
        frames = self._write_frames(tmp_path)
        doc = {
            "samples": [
                {
                    "subject_id": "01",
                    "video_id": f"v{i}",
                    "emotion": 0,
                    "frames": frames,
                    "onset_index": 0,
                    "apex_index": 2,
                    "source_db": db,
                }
                for i, db in enumerate(["smic", "casme2", "samm", "smic"])
            ]
        }
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps(doc))
        records = imaging.load_manifest(path)
        keys = {r.subject_key for r in records}
        assert keys == {"smic:01", "casme2:01", "samm:01"}

    def test_missing_frame_file_rejected(self, tmp_path):
        doc = {
            "samples": [
                {
                    "subject_id": "s",
                    "video_id": "v",
                    "emotion": 0,
                    "frames": ["nope.pgm", "nope2.pgm"],
                    "onset_index": 0,
                    "apex_index": 1,
                }
            ]
        }
        path = tmp_path / "m.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(imaging.ManifestError, match="not found"):
            imaging.load_manifest(path)


def naive_bilinear(src, out_h, out_w):
    h, w = src.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            y = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1.0)
            x = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1.0)
            y0 = min(int(y), h - 2) if h > 1 else 0
            x0 = min(int(x), w - 2) if w > 1 else 0
            fy, fx = y - y0, x - x0
            out[i, j] = (
                src[y0, x0] * (1 - fx) * (1 - fy)
                + src[y0, x0 + 1] * fx * (1 - fy)
                + src[y0 + 1, x0] * (1 - fx) * fy
                + src[y0 + 1, x0 + 1] * fx * fy
            )
    return out


class TestNormalizeToInput:
    def test_constant_maps_to_zeros(self):
        out = imaging.normalize_to_input(np.full((40, 40), 3.7))
        assert out.shape == (28, 28, 1)
        np.testing.assert_array_equal(out, 0.0)

    def test_28_identity_resize(self):
        rng = np.random.default_rng(1)
        field = rng.normal(size=(28, 28))
        out = imaging.normalize_to_input(field)[:, :, 0]
        lo, hi = field.min(), field.max()
        np.testing.assert_allclose(out, (field - lo) / (hi - lo) * 2 - 1, atol=1e-12)

    def test_checkerboard_matches_bilinear_oracle(self):
        checker = np.indices((56, 56)).sum(axis=0) % 2 * 1.0
        resized = naive_bilinear(checker, 28, 28)
        lo, hi = resized.min(), resized.max()
        expected = (
            np.zeros_like(resized) if hi - lo < 1e-300 else (resized - lo) / (hi - lo) * 2 - 1
        )
        out = imaging.normalize_to_input(checker)[:, :, 0]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_range_and_affine_invariance(self):
        rng = np.random.default_rng(2)
        field = rng.normal(size=(50, 33))
        out = imaging.normalize_to_input(field)
        assert out.min() >= -1.0 - 1e-12 and out.max() <= 1.0 + 1e-12
        out2 = imaging.normalize_to_input(field * 7.5 - 3.0)
        np.testing.assert_allclose(out, out2, atol=1e-9)

    def test_rejects_empty_and_nonfinite(self):
        with pytest.raises(ValueError):
            imaging.normalize_to_input(np.zeros((0, 4)))
        with pytest.raises(ValueError):
            imaging.normalize_to_input(np.array([[np.inf, 1.0], [0.0, 2.0]]))

    def test_resize_matches_oracle_odd_sizes(self):
        rng = np.random.default_rng(3)
        src = rng.normal(size=(13, 9))
        np.testing.assert_allclose(
            imaging.bilinear_resize(src, 7, 5), naive_bilinear(src, 7, 5), atol=1e-12
        )
