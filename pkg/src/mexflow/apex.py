"""Apex frame spotting by divide & conquer over a per-frame motion signal.

The signal is the mean optical-flow magnitude of every frame against the
onset frame. Local peaks are detected once over the whole signal; the frame
range is then halved repeatedly, keeping the half whose peaks carry the larger
summed magnitude (a peakless half competes with its maximum value), until a
single frame remains. A brute-force argmax oracle is kept alongside for
verification.
"""

from dataclasses import dataclass

import numpy as np

from mexflow.flow import FlowConfig, estimate_flow


@dataclass
class MotionSignal:
    values: np.ndarray  # one non-negative float per frame
    onset_index: int = 0

    def __len__(self):
        return len(self.values)


@dataclass
class ApexResult:
    apex_index: int
    signal: MotionSignal
    visited_ranges: list  # (lo, hi) half retained at each recursion level


def motion_signal(frames, config=None, onset_index=0, smooth_window=1):
    """Mean flow magnitude of each frame against the onset frame.

    frames: list of 2-D [0,1] images. smooth_window > 1 applies a centered
    moving average (window truncated at the ends).
    """
    if len(frames) < 2:
        raise ValueError(f"motion_signal: need >= 2 frames, got {len(frames)}")
    config = config or FlowConfig()
    onset = frames[onset_index]
    values = np.zeros(len(frames))
    for i, frame in enumerate(frames):
        if i == onset_index:
            continue
        try:
            field = estimate_flow(onset, frame, config)
        except Exception as exc:
            raise RuntimeError(f"motion_signal: flow failed at frame {i}: {exc}") from exc
        values[i] = float(np.mean(field.magnitude()))
    if smooth_window > 1:
        half = smooth_window // 2
        padded = np.pad(values, half, mode="edge")
        kernel = np.ones(smooth_window) / smooth_window
        values = np.convolve(padded, kernel, mode="valid")
    return MotionSignal(values=values, onset_index=onset_index)


def detect_local_peaks(signal):
    """Interior strict local maxima as (index, magnitude); plateaus take the
    leftmost index, endpoints are excluded."""
    v = signal.values
    if len(v) < 3:
        return []
    peaks = []
    for i in range(1, len(v) - 1):
        if v[i] > v[i - 1]:
            # scan over a potential plateau starting at i
            j = i
            while j + 1 < len(v) and v[j + 1] == v[i]:
                j += 1
            if j < len(v) - 1 and v[j + 1] < v[i]:
                peaks.append((i, float(v[i])))
    return peaks


def spot_apex_bruteforce(signal):
    """Global argmax of the signal, leftmost on ties."""
    if len(signal.values) < 1:
        raise ValueError("spot_apex_bruteforce: empty signal")
    return int(np.argmax(signal.values))


def spot_apex_dc(signal):
    """Divide & conquer apex search (five-step procedure, see module docstring)."""
    v = signal.values
    if len(v) < 1:
        raise ValueError("spot_apex_dc: empty signal")
    peaks = detect_local_peaks(signal)
    lo, hi = 0, len(v) - 1
    visited = []

    def half_score(a, b):
        total = sum(mag for idx, mag in peaks if a <= idx <= b)
        if total > 0.0:
            return total
        return float(np.max(v[a : b + 1]))  # peakless half: fall back to its maximum

    while lo < hi:
        length = hi - lo + 1
        mid = lo + -(-length // 2) - 1  # left half gets ceil(length/2) frames
        left_score = half_score(lo, mid)
        right_score = half_score(mid + 1, hi)
        if left_score >= right_score:  # ties keep the left half
            hi = mid
        else:
            lo = mid + 1
        visited.append((lo, hi))
    return ApexResult(apex_index=lo, signal=signal, visited_ranges=visited)
