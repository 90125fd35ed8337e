"""Grayscale image carrier, PGM I/O, dataset manifests, and network-input prep.

Images are 2-D float64 arrays, row-major, intensities in [0, 1]. On disk they
are binary PGM (P5, maxval 255); an 8-bit round trip is exact.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EMOTIONS = {"negative": 0, "positive": 1, "surprise": 2}
NUM_CLASSES = 3


class PgmFormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------

def _next_token(raw, pos):
    """Scan one whitespace-delimited header token, skipping '#' comments."""
    n = len(raw)
    while pos < n:
        ch = raw[pos : pos + 1]
        if ch == b"#":
            while pos < n and raw[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not raw[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise PgmFormatError(f"truncated header at byte {start}")
    return raw[start:pos], pos


def load_pgm(path):
    """Read a binary P5 PGM with maxval 255 into a [0, 1] float image."""
    raw = Path(path).read_bytes()
    magic, pos = _next_token(raw, 0)
    if magic != b"P5":
        raise PgmFormatError(f"{path}: not a binary PGM (magic {magic!r} at byte 0)")
    width, pos = _next_token(raw, pos)
    height, pos = _next_token(raw, pos)
    maxval, pos = _next_token(raw, pos)
    try:
        width, height, maxval = int(width), int(height), int(maxval)
    except ValueError as exc:
        raise PgmFormatError(f"{path}: non-numeric header field near byte {pos}") from exc
    if maxval != 255:
        raise PgmFormatError(f"{path}: maxval must be 255, got {maxval}")
    if width <= 0 or height <= 0:
        raise PgmFormatError(f"{path}: bad dimensions {width}x{height}")
    pos += 1  # single whitespace byte after maxval
    payload = raw[pos : pos + width * height]
    if len(payload) != width * height:
        raise PgmFormatError(
            f"{path}: payload truncated at byte {pos + len(payload)} "
            f"(need {width * height} pixels)"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return pixels.astype(np.float64) / 255.0


def save_pgm(image, path):
    """Write a [0, 1] float image as binary P5, rounding to 8 bits."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"save_pgm: need a non-empty 2-D image, got shape {img.shape}")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


# ---------------------------------------------------------------------------
# sample records and manifests
# ---------------------------------------------------------------------------

@dataclass
class SampleRecord:
    """One video's metadata; frame_paths point at PGM files on disk."""

    subject_id: str
    video_id: str
    emotion: int
    frame_paths: list = field(default_factory=list)
    onset_index: int = 0
    apex_index: int | None = None
    source_db: str = "synthetic"

    @property
    def subject_key(self):
        """Namespaced subject identity, collision-safe across source databases."""
        return f"{self.source_db}:{self.subject_id}"

    def validate(self):
        if self.emotion not in (0, 1, 2):
            raise ManifestError(f"{self.video_id}: emotion {self.emotion} not in 0..2")
        if len(self.frame_paths) < 2:
            raise ManifestError(f"{self.video_id}: needs at least 2 frames")
        if not 0 <= self.onset_index < len(self.frame_paths):
            raise ManifestError(f"{self.video_id}: onset_index {self.onset_index} out of range")
        if self.apex_index is not None:
            if not self.onset_index < self.apex_index < len(self.frame_paths):
                raise ManifestError(
                    f"{self.video_id}: apex_index {self.apex_index} must satisfy "
                    f"onset {self.onset_index} < apex < {len(self.frame_paths)}"
                )
        return self

    def load_frame(self, index):
        return load_pgm(self.frame_paths[index])


def load_manifest(path):
    """Parse a manifest JSON into validated SampleRecords.

    Relative frame paths resolve against the manifest's directory; every frame
    file must exist. Any invalid record aborts the load with its video_id.
    """
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    if "samples" not in doc:
        raise ManifestError(f"{path}: missing top-level 'samples'")
    base = path.parent
    records = []
    problems = []
    for i, entry in enumerate(doc["samples"]):
        vid = entry.get("video_id", f"<record {i}>")
        try:
            missing = [k for k in ("subject_id", "video_id", "emotion", "frames", "onset_index") if k not in entry]
            if missing:
                raise ManifestError(f"{vid}: missing fields {missing}")
            frames = [str(base / p) for p in entry["frames"]]
            for p in frames:
                if not Path(p).is_file():
                    raise ManifestError(f"{vid}: frame file not found: {p}")
            rec = SampleRecord(
                subject_id=str(entry["subject_id"]),
                video_id=str(entry["video_id"]),
                emotion=int(entry["emotion"]),
                frame_paths=frames,
                onset_index=int(entry["onset_index"]),
                apex_index=None if entry.get("apex_index") is None else int(entry["apex_index"]),
                source_db=str(entry.get("source_db", "unknown")),
            ).validate()
            records.append(rec)
        except ManifestError as exc:
            problems.append(str(exc))
    if problems:
        raise ManifestError(f"{path}: {len(problems)} invalid record(s): " + "; ".join(problems))
    return records


def save_manifest(records, path):
    """Write records as manifest JSON with frame paths relative to it."""
    path = Path(path)
    base = path.parent
    samples = []
    for rec in records:
        samples.append(
            {
                "subject_id": rec.subject_id,
                "video_id": rec.video_id,
                "emotion": rec.emotion,
                "frames": [str(Path(p).relative_to(base)) for p in rec.frame_paths],
                "onset_index": rec.onset_index,
                "apex_index": rec.apex_index,
                "source_db": rec.source_db,
            }
        )
    with open(path, "w") as fh:
        json.dump({"samples": samples}, fh, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# resizing / input normalization
# ---------------------------------------------------------------------------

def bilinear_resize(field, out_h, out_w):
    """Resize a 2-D field with pixel-center alignment and edge clamping."""
    src = np.asarray(field, dtype=np.float64)
    h, w = src.shape
    if h == out_h and w == out_w:
        return src.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.minimum(ys.astype(np.int64), max(h - 2, 0))
    x0 = np.minimum(xs.astype(np.int64), max(w - 2, 0))
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    top = src[np.ix_(y0, x0)] * (1 - fx) + src[np.ix_(y0, x1)] * fx
    bot = src[np.ix_(y1, x0)] * (1 - fx) + src[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def normalize_to_input(field, size=28):
    """Bilinear-resize a 2-D field to size x size and min-max map to [-1, 1].

    Constant fields map to all zeros. Output shape is (size, size, 1).
    """
    src = np.asarray(field, dtype=np.float64)
    if src.ndim != 2 or src.size == 0:
        raise ValueError(f"normalize_to_input: need a non-empty 2-D field, got {src.shape}")
    if not np.all(np.isfinite(src)):
        raise ValueError("normalize_to_input: non-finite input field")
    resized = bilinear_resize(src, size, size)
    lo = resized.min()
    hi = resized.max()
    if hi - lo < 1e-300:
        return np.zeros((size, size, 1))
    out = (resized - lo) / (hi - lo) * 2.0 - 1.0
    return out[:, :, None]
