"""Dense optical flow between onset and apex frames.

Three estimators live behind one registry: Horn-Schunck (quadratic energy,
block-Jacobi sweeps), Lucas-Kanade (windowed least squares with an eigenvalue
gate), and TV-L1 (duality-based with iterative warping). External estimators
such as Farneback or RLOF can be registered by name.

Flow convention: a pixel at (x, y) in the onset frame appears at
(x + p, y + q) in the apex frame; p and q are in pixels.
"""

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from mexflow import _kernels
from mexflow.imaging import bilinear_resize

# Horn-Schunck and TV-L1 defaults follow the methods' published settings,
# which assume 8-bit intensity ranges; [0,1] images are scaled up internally.
_INTENSITY_SCALE = 255.0


@dataclass
class FlowField:
    p: np.ndarray  # horizontal displacement, (H, W)
    q: np.ndarray  # vertical displacement, (H, W)
    valid: np.ndarray | None = None  # LK conditioning mask, None for dense methods

    @property
    def height(self):
        return self.p.shape[0]

    @property
    def width(self):
        return self.p.shape[1]

    def magnitude(self):
        return np.sqrt(self.p * self.p + self.q * self.q)


@dataclass(frozen=True)
class FlowConfig:
    method: str = "tvl1"
    hs_alpha: float = 15.0
    hs_iterations: int = 200
    lk_radius: int = 7
    lk_eig_floor: float = 1e-4
    tvl1_lambda: float = 0.15
    tvl1_theta: float = 0.3
    tvl1_tau: float = 0.25
    tvl1_warps: int = 5
    tvl1_inner: int = 30
    pyramid_levels: int = 3
    pyramid_scale: float = 0.5

    def validate(self):
        numeric = {
            "hs_alpha": self.hs_alpha,
            "hs_iterations": self.hs_iterations,
            "lk_radius": self.lk_radius,
            "lk_eig_floor": self.lk_eig_floor,
            "tvl1_lambda": self.tvl1_lambda,
            "tvl1_theta": self.tvl1_theta,
            "tvl1_tau": self.tvl1_tau,
            "tvl1_warps": self.tvl1_warps,
            "tvl1_inner": self.tvl1_inner,
            "pyramid_scale": self.pyramid_scale,
        }
        for name, value in numeric.items():
            if value <= 0:
                raise ValueError(f"FlowConfig.{name} must be positive, got {value}")
        if self.pyramid_levels < 1:
            raise ValueError("FlowConfig.pyramid_levels must be >= 1")
        if not self.pyramid_scale < 1.0:
            raise ValueError("FlowConfig.pyramid_scale must be < 1")
        return self


def central_gradients(img):
    """Central differences with replicate borders: returns (d/dx, d/dy)."""
    padded = np.pad(img, 1, mode="edge")
    gx = 0.5 * (padded[1:-1, 2:] - padded[1:-1, :-2])
    gy = 0.5 * (padded[2:, 1:-1] - padded[:-2, 1:-1])
    return gx, gy


_BLUR = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _blur(img):
    padded = np.pad(img, 2, mode="edge")
    tmp = sum(w * padded[:, k : k + img.shape[1]] for k, w in enumerate(_BLUR))
    tmp = np.pad(tmp[2:-2, :], ((2, 2), (0, 0)), mode="edge")
    return sum(w * tmp[k : k + img.shape[0], :] for k, w in enumerate(_BLUR))


def build_pyramid(img, levels, scale, min_size=8):
    """Coarse pyramid by blur + bilinear decimation; trims levels so the
    coarsest extent stays >= min_size."""
    pyr = [img]
    for _ in range(levels - 1):
        h, w = pyr[-1].shape
        nh, nw = int(round(h * scale)), int(round(w * scale))
        if min(nh, nw) < min_size:
            break
        pyr.append(bilinear_resize(_blur(pyr[-1]), nh, nw))
    return pyr[::-1]  # coarsest first


def _upsample_flow(u, v, new_h, new_w):
    su = new_w / u.shape[1]
    sv = new_h / u.shape[0]
    return bilinear_resize(u, new_h, new_w) * su, bilinear_resize(v, new_h, new_w) * sv


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------

def _horn_schunck(onset, apex, config):
    pyr0 = build_pyramid(onset * _INTENSITY_SCALE, config.pyramid_levels, config.pyramid_scale)
    pyr1 = build_pyramid(apex * _INTENSITY_SCALE, config.pyramid_levels, config.pyramid_scale)
    u = np.zeros_like(pyr0[0])
    v = np.zeros_like(pyr0[0])
    for i0, i1 in zip(pyr0, pyr1):
        if u.shape != i0.shape:
            u, v = _upsample_flow(u, v, *i0.shape)
        g0x, g0y = central_gradients(i0)
        g1x, g1y = central_gradients(i1)
        ix = 0.5 * (g0x + g1x)
        iy = 0.5 * (g0y + g1y)
        it = i1 - i0
        u, v, _ = _kernels.hs_solve(ix, iy, it, config.hs_alpha, config.hs_iterations, u, v)
    return FlowField(p=u, q=v)


def _lucas_kanade(onset, apex, config):
    # No warping step, so coarse levels cannot inform the solve: single scale.
    g0x, g0y = central_gradients(onset)
    g1x, g1y = central_gradients(apex)
    ix = 0.5 * (g0x + g1x)
    iy = 0.5 * (g0y + g1y)
    it = apex - onset
    u, v, valid = _kernels.lk_flow(ix, iy, it, config.lk_radius, config.lk_eig_floor)
    return FlowField(p=u, q=v, valid=valid)


def _tvl1(onset, apex, config):
    pyr0 = build_pyramid(onset * _INTENSITY_SCALE, config.pyramid_levels, config.pyramid_scale)
    pyr1 = build_pyramid(apex * _INTENSITY_SCALE, config.pyramid_levels, config.pyramid_scale)
    u = np.zeros_like(pyr0[0])
    v = np.zeros_like(pyr0[0])
    for i0, i1 in zip(pyr0, pyr1):
        if u.shape != i0.shape:
            u, v = _upsample_flow(u, v, *i0.shape)
        i1x, i1y = central_gradients(i1)
        u, v = _kernels.tvl1_level(
            i0,
            i1,
            i1x,
            i1y,
            u,
            v,
            config.tvl1_lambda,
            config.tvl1_theta,
            config.tvl1_tau,
            config.tvl1_warps,
            config.tvl1_inner,
        )
    return FlowField(p=u, q=v)


_BUILTINS = {
    "horn_schunck": _horn_schunck,
    "lucas_kanade": _lucas_kanade,
    "tvl1": _tvl1,
}
_registry = dict(_BUILTINS)


def available_methods():
    return sorted(_registry)


def register_external_estimator(name, estimator):
    """Add a pluggable estimator callable(onset, apex, config) -> FlowField."""
    if name in _registry:
        raise ValueError(f"flow method {name!r} already registered")
    _registry[name] = estimator


def estimate_flow(onset, apex, config=None):
    """Dense displacement field between two same-sized [0,1] images."""
    config = (config or FlowConfig()).validate()
    onset = np.asarray(onset, dtype=np.float64)
    apex = np.asarray(apex, dtype=np.float64)
    if onset.shape != apex.shape:
        raise ValueError(f"estimate_flow: extents differ, {onset.shape} vs {apex.shape}")
    if not (np.all(np.isfinite(onset)) and np.all(np.isfinite(apex))):
        raise ValueError("estimate_flow: non-finite input image")
    if config.method not in _registry:
        raise ValueError(
            f"estimate_flow: unknown method {config.method!r}; have {available_methods()}"
        )
    return _registry[config.method](onset, apex, config)


def fast_config(method="tvl1"):
    """Reduced-effort settings for per-frame motion signals (apex spotting)."""
    return FlowConfig(
        method=method, tvl1_warps=3, tvl1_inner=15, hs_iterations=80, pyramid_levels=3
    )


def config_from_dict(doc):
    """Build a FlowConfig from a JSON-style dict, rejecting unknown keys."""
    known = set(FlowConfig.__dataclass_fields__)
    extra = set(doc) - known
    if extra:
        raise ValueError(f"unknown flow config keys: {sorted(extra)}")
    return replace(FlowConfig(), **doc).validate()


# ---------------------------------------------------------------------------
# flow file format (MEFL)
# ---------------------------------------------------------------------------

FLOW_MAGIC = b"MEFL"


class FlowFormatError(ValueError):
    pass


def save_flow(field, path):
    """Write interleaved (p, q) float32 little-endian with an MEFL header."""
    h, w = field.p.shape
    inter = np.empty((h, w, 2), dtype="<f4")
    inter[:, :, 0] = field.p
    inter[:, :, 1] = field.q
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<BII", 1, w, h))
        fh.write(inter.tobytes())


def load_flow(path):
    raw = Path(path).read_bytes()
    if raw[:4] != FLOW_MAGIC:
        raise FlowFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, w, h = struct.unpack("<BII", raw[4:13])
    if version != 1:
        raise FlowFormatError(f"{path}: unsupported version {version}")
    payload = raw[13:]
    if len(payload) != w * h * 8:
        raise FlowFormatError(f"{path}: payload is {len(payload)} bytes, expected {w * h * 8}")
    inter = np.frombuffer(payload, dtype="<f4").reshape(h, w, 2)
    return FlowField(p=inter[:, :, 0].astype(np.float64), q=inter[:, :, 1].astype(np.float64))
