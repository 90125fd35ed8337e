"""Per-pixel channels derived from a displacement field.

From (p, q) this produces the polar pair (rho, theta) and the optical strain
tensor: normal components eps_xx = dp/dx, eps_yy = dq/dy, the shared shear
component eps_xy = eps_yx = (dp/dy + dq/dx)/2, and the tensor Frobenius norm
as the scalar strain magnitude. Spatial derivatives are central differences
with replicate borders, so affine flow is reproduced exactly at interior
pixels and rigid translation yields strain of exactly zero.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mexflow.flow import central_gradients
from mexflow.imaging import save_pgm

CHANNEL_NAMES = ("p", "q", "rho", "theta", "eps_mag", "eps_xx", "eps_yy", "eps_xy", "eps_yx")


@dataclass
class DerivedChannels:
    p: np.ndarray
    q: np.ndarray
    rho: np.ndarray
    theta: np.ndarray
    eps_mag: np.ndarray
    eps_xx: np.ndarray
    eps_yy: np.ndarray
    eps_xy: np.ndarray  # eps_yx is the same array by construction

    @property
    def eps_yx(self):
        return self.eps_xy

    def channel(self, name):
        if name not in CHANNEL_NAMES:
            raise KeyError(f"unknown channel {name!r}; have {CHANNEL_NAMES}")
        return getattr(self, name)


def to_polar(field):
    """Magnitude and full-quadrant orientation of the flow; theta(0,0) = 0."""
    rho = np.sqrt(field.p**2 + field.q**2)
    theta = np.arctan2(field.q, field.p)
    theta[rho == 0.0] = 0.0
    theta[theta == -np.pi] = np.pi  # q = -0.0 lands on the open end of (-pi, pi]
    return rho, theta


def compute_strain(field):
    """Strain components and tensor magnitude from the displacement field."""
    if field.height < 3 or field.width < 3:
        raise ValueError(
            f"compute_strain: field {field.height}x{field.width} too small for "
            "central differences (need >= 3 per axis)"
        )
    dp_dx, dp_dy = central_gradients(field.p)
    dq_dx, dq_dy = central_gradients(field.q)
    eps_xx = dp_dx
    eps_yy = dq_dy
    eps_xy = 0.5 * (dp_dy + dq_dx)
    eps_mag = np.sqrt(eps_xx**2 + eps_yy**2 + 2.0 * eps_xy**2)
    return eps_xx, eps_yy, eps_xy, eps_mag


def derive_channels(field):
    rho, theta = to_polar(field)
    eps_xx, eps_yy, eps_xy, eps_mag = compute_strain(field)
    return DerivedChannels(
        p=field.p,
        q=field.q,
        rho=rho,
        theta=theta,
        eps_mag=eps_mag,
        eps_xx=eps_xx,
        eps_yy=eps_yy,
        eps_xy=eps_xy,
    )


# ---------------------------------------------------------------------------
# channel export
# ---------------------------------------------------------------------------

CHANNEL_MAGIC = b"MECH"


class ChannelFormatError(ValueError):
    pass


def save_channel(values, path):
    """Single-channel float32 dump with a MECH header (MEFL layout, one plane)."""
    arr = np.asarray(values, dtype="<f4")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(CHANNEL_MAGIC)
        fh.write(struct.pack("<BII", 1, w, h))
        fh.write(arr.tobytes())


def load_channel(path):
    raw = Path(path).read_bytes()
    if raw[:4] != CHANNEL_MAGIC:
        raise ChannelFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, w, h = struct.unpack("<BII", raw[4:13])
    if version != 1:
        raise ChannelFormatError(f"{path}: unsupported version {version}")
    payload = raw[13:]
    if len(payload) != w * h * 4:
        raise ChannelFormatError(f"{path}: payload is {len(payload)} bytes, expected {w * h * 4}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float64)


def export_channel_pgm(values, path):
    """Min-max normalized 8-bit view of a channel, for visual inspection."""
    arr = np.asarray(values, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi - lo < 1e-300:
        save_pgm(np.full(arr.shape, 0.5), path)
    else:
        save_pgm((arr - lo) / (hi - lo), path)
