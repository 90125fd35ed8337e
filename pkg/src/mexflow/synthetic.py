"""Synthetic micro-expression corpus with exact motion ground truth.

Stands in for the licensed recording databases: each subject gets a smooth
procedural face texture (a pile of Gaussian blobs), and each video warps one
class-specific region with a displacement that ramps from zero at the onset to
its peak at the apex and decays to a small residual. The generator also
records the exact displacement parameterization, so flow, apex, and
classification stages can all be verified quantitatively.

Class regions: 0 (negative) moves a brow patch vertically, 1 (positive) pulls
a lip-corner patch diagonally, 2 (surprise) widens the upper face with two
opposed horizontal lobes. Each video jitters its region center a little, so
videos of one class differ by more than texture and noise.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mexflow import _kernels
from mexflow.imaging import SampleRecord, save_manifest, save_pgm

RESIDUAL_FRACTION = 0.15  # displacement left at the last frame, as a share of peak
JITTER_FRACTION = 0.05  # per-video region-center offset, as a share of image size


@dataclass(frozen=True)
class SyntheticSpec:
    subjects: int = 6
    videos_per_subject: int = 3
    frames_per_video: int = 40
    image_size: int = 64
    motion_amplitude: float = 1.5
    noise_sigma: float = 0.005
    nuisance_drift: float = 0.0  # peak rigid whole-frame drift in pixels (head motion stand-in)
    seed: int = 7

    def validate(self):
        if self.subjects < 1 or self.videos_per_subject < 1:
            raise ValueError("SyntheticSpec: need at least one subject and one video")
        if self.frames_per_video < 4:
            raise ValueError("SyntheticSpec: frames_per_video must be >= 4")
        if self.motion_amplitude > self.image_size / 8:
            raise ValueError(
                f"SyntheticSpec: amplitude {self.motion_amplitude} exceeds "
                f"image_size/8 = {self.image_size / 8}"
            )
        if self.motion_amplitude < 0 or self.noise_sigma < 0 or self.nuisance_drift < 0:
            raise ValueError("SyntheticSpec: amplitude, noise and drift must be non-negative")
        return self


@dataclass
class VideoTruth:
    apex_index: int
    region_id: int
    profile: np.ndarray  # per-frame peak displacement in pixels
    jitter: tuple = (0.0, 0.0)  # region-center offset in pixels
    drift: tuple = (0.0, 0.0)  # rigid whole-frame displacement at the last frame


@dataclass
class SyntheticTruth:
    image_size: int
    videos: dict = field(default_factory=dict)  # video id -> VideoTruth

    def unit_field(self, video_id):
        """Displacement field (peak 1 px) of the video's jittered region."""
        info = self.videos[video_id]
        return region_field(self.image_size, info.region_id, info.jitter)

    def displacement(self, video_id, frame_index):
        """True displacement of the moving region (nuisance drift excluded)."""
        up, uq = self.unit_field(video_id)
        s = self.videos[video_id].profile[frame_index]
        return s * up, s * uq

    def drift_at(self, video_id, frame_index):
        """Rigid nuisance displacement of the whole frame, linear in time."""
        info = self.videos[video_id]
        n = len(info.profile)
        f = frame_index / (n - 1) if n > 1 else 0.0
        return f * info.drift[0], f * info.drift[1]

    def mean_magnitude(self, video_id):
        """Per-frame mean true displacement magnitude (unimodal, peak at apex)."""
        up, uq = self.unit_field(video_id)
        unit_mean = float(np.mean(np.sqrt(up * up + uq * uq)))
        return self.videos[video_id].profile * unit_mean


def _gaussian(size, cx, cy, sigma):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma * sigma))


def region_lobes(size):
    """Per class: lobes of (center x, center y, sigma, direction p, direction q).

    Window widths are generous so the mean displacement over the frame sits
    well above the flow noise floor that pixel noise induces.
    """
    s = float(size)
    return {
        0: [(0.50 * s, 0.30 * s, 0.15 * s, 0.0, -1.0)],
        1: [(0.70 * s, 0.72 * s, 0.14 * s, 0.8, -0.6)],
        2: [
            (0.28 * s, 0.38 * s, 0.125 * s, -1.0, 0.0),
            (0.72 * s, 0.38 * s, 0.125 * s, 1.0, 0.0),
        ],
    }


def region_field(size, region_id, jitter=(0.0, 0.0)):
    """Unit displacement field (peak 1 px) for one class region."""
    up = np.zeros((size, size))
    uq = np.zeros((size, size))
    for cx, cy, sigma, dp, dq in region_lobes(size)[region_id]:
        window = _gaussian(size, cx + jitter[0], cy + jitter[1], sigma)
        up += dp * window
        uq += dq * window
    return up, uq


def _base_texture(rng, size):
    img = np.zeros((size, size))
    for _ in range(40):
        cx, cy = rng.uniform(0, size, size=2)
        sigma = rng.uniform(0.05 * size, 0.18 * size)
        img += rng.uniform(-1.0, 1.0) * _gaussian(size, cx, cy, sigma)
    lo, hi = img.min(), img.max()
    if hi - lo < 1e-12:
        return np.full((size, size), 0.5)
    return 0.25 + 0.5 * (img - lo) / (hi - lo)


def _motion_profile(n_frames, apex, amplitude):
    # piecewise-linear ramp: strictly unimodal with a sharp peak at the apex,
    # so the per-frame contrast near the apex stays above flow-estimation noise
    t = np.arange(n_frames, dtype=np.float64)
    profile = np.empty(n_frames)
    profile[: apex + 1] = t[: apex + 1] / apex
    tail = n_frames - 1 - apex
    if tail > 0:
        fall = (t[apex + 1 :] - apex) / tail
        profile[apex + 1 :] = 1.0 - (1.0 - RESIDUAL_FRACTION) * fall
    return amplitude * profile


def _warp_backward(base, dp, dq):
    # I_t(x) = base(x - d(x)): for smooth small d this realizes flow ~ d.
    return _kernels.warp_bilinear(base, -dp, -dq)


def generate_synthetic_corpus(spec, out_dir):
    """Write frames (PGM), manifest.json and truth.json; return (records, truth).

    Fully deterministic: every subject/video derives its own generator from the
    spec seed, so corpora are bit-identical across runs and call orders.
    """
    spec = spec.validate()
    out_dir = Path(out_dir)
    frames_dir = out_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    truth = SyntheticTruth(image_size=spec.image_size)
    records = []
    max_jitter = JITTER_FRACTION * spec.image_size
    subject_seeds = np.random.SeedSequence(spec.seed).spawn(spec.subjects)
    for si in range(spec.subjects):
        subject_id = f"s{si:02d}"
        texture_seed, *video_seeds = subject_seeds[si].spawn(1 + spec.videos_per_subject)
        base = _base_texture(np.random.default_rng(texture_seed), spec.image_size)
        for vi in range(spec.videos_per_subject):
            rng = np.random.default_rng(video_seeds[vi])
            video_id = f"{subject_id}_v{vi:02d}"
            emotion = vi % 3
            n = spec.frames_per_video
            apex = int(rng.integers(n // 4, (3 * n) // 4))
            jitter = tuple(rng.uniform(-max_jitter, max_jitter, size=2))
            angle = rng.uniform(0.0, 2.0 * np.pi)
            drift_mag = rng.uniform(0.5, 1.0) * spec.nuisance_drift
            drift = (drift_mag * np.cos(angle), drift_mag * np.sin(angle))
            profile = _motion_profile(n, apex, spec.motion_amplitude)
            up, uq = region_field(spec.image_size, emotion, jitter)
            video_dir = frames_dir / video_id
            video_dir.mkdir(exist_ok=True)
            paths = []
            for t in range(n):
                f = t / (n - 1) if n > 1 else 0.0
                frame = _warp_backward(
                    base, profile[t] * up + f * drift[0], profile[t] * uq + f * drift[1]
                )
                if spec.noise_sigma > 0:
                    frame = frame + rng.normal(0.0, spec.noise_sigma, frame.shape)
                path = video_dir / f"f{t:03d}.pgm"
                save_pgm(np.clip(frame, 0.0, 1.0), path)
                paths.append(str(path))
            records.append(
                SampleRecord(
                    subject_id=subject_id,
                    video_id=video_id,
                    emotion=emotion,
                    frame_paths=paths,
                    onset_index=0,
                    apex_index=apex,
                    source_db="synthetic",
                ).validate()
            )
            truth.videos[video_id] = VideoTruth(
                apex_index=apex, region_id=emotion, profile=profile,
                jitter=jitter, drift=drift,
            )
    save_manifest(records, out_dir / "manifest.json")
    save_truth(truth, out_dir)
    return records, truth


def save_truth(truth, out_dir):
    doc = {
        "image_size": truth.image_size,
        "videos": {
            vid: {
                "apex_index": info.apex_index,
                "region_id": info.region_id,
                "jitter": [float(j) for j in info.jitter],
                "drift": [float(j) for j in info.drift],
                "profile": [float(x) for x in info.profile],
            }
            for vid, info in sorted(truth.videos.items())
        },
    }
    with open(Path(out_dir) / "truth.json", "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_truth(corpus_dir):
    with open(Path(corpus_dir) / "truth.json") as fh:
        doc = json.load(fh)
    videos = {
        vid: VideoTruth(
            apex_index=int(info["apex_index"]),
            region_id=int(info["region_id"]),
            profile=np.asarray(info["profile"], dtype=np.float64),
            jitter=tuple(info.get("jitter", (0.0, 0.0))),
            drift=tuple(info.get("drift", (0.0, 0.0))),
        )
        for vid, info in doc["videos"].items()
    }
    return SyntheticTruth(image_size=int(doc["image_size"]), videos=videos)
