"""NumPy implementations of the flow-solver hot loops.

These mirror the compiled kernels in ``_native.pyx`` one-to-one; the shim in
``__init__`` picks whichever is available. Everything here works on C-contiguous
float64 2-D arrays and is pure (inputs never mutated).
"""

import numpy as np

BACKEND_NAME = "python"

_GRAD_EPS = 1e-8


def warp_bilinear(img, u, v):
    """Sample img at (x + u, y + v) with bilinear weights, clamping to the border."""
    h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w]
    x = np.clip(xs + u, 0.0, w - 1.0)
    y = np.clip(ys + v, 0.0, h - 1.0)
    x0 = np.minimum(x.astype(np.int64), w - 2) if w > 1 else np.zeros_like(x, np.int64)
    y0 = np.minimum(y.astype(np.int64), h - 2) if h > 1 else np.zeros_like(y, np.int64)
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def _neighbor_sums(a):
    s = np.zeros_like(a)
    s[1:, :] += a[:-1, :]
    s[:-1, :] += a[1:, :]
    s[:, 1:] += a[:, :-1]
    s[:, :-1] += a[:, 1:]
    return s


def _neighbor_count(shape):
    h, w = shape
    deg = np.full(shape, 4.0)
    deg[0, :] -= 1.0
    deg[-1, :] -= 1.0
    deg[:, 0] -= 1.0
    deg[:, -1] -= 1.0
    return deg


def hs_energy(ix, iy, it, u, v, alpha):
    """Discrete Horn-Schunck energy: data term plus alpha^2 times the
    squared forward differences of the flow over the 4-neighbor grid."""
    data = ix * u + iy * v + it
    e = float(np.sum(data * data))
    du_x = u[:, 1:] - u[:, :-1]
    du_y = u[1:, :] - u[:-1, :]
    dv_x = v[:, 1:] - v[:, :-1]
    dv_y = v[1:, :] - v[:-1, :]
    smooth = (
        np.sum(du_x * du_x)
        + np.sum(du_y * du_y)
        + np.sum(dv_x * dv_x)
        + np.sum(dv_y * dv_y)
    )
    return e + alpha * alpha * float(smooth)


def hs_solve(ix, iy, it, alpha, iterations, u0, v0, record_energy=False):
    """Block-Jacobi iteration for the quadratic brightness+smoothness energy.

    Each sweep solves the per-pixel 2x2 system exactly with neighbor values
    frozen, which keeps the energy non-increasing. Returns (u, v, energies):
    energies has iterations+1 entries when record_energy, else None.
    """
    u = u0.copy()
    v = v0.copy()
    deg = _neighbor_count(u.shape)
    s = alpha * alpha * deg
    denom_base = ix * ix + iy * iy
    energies = [hs_energy(ix, iy, it, u, v, alpha)] if record_energy else None
    for _ in range(iterations):
        ubar = _neighbor_sums(u) / deg
        vbar = _neighbor_sums(v) / deg
        t = (ix * ubar + iy * vbar + it) / (s + denom_base)
        u = ubar - ix * t
        v = vbar - iy * t
        if record_energy:
            energies.append(hs_energy(ix, iy, it, u, v, alpha))
    if record_energy:
        return u, v, np.asarray(energies)
    return u, v, None


def _box_sum(a, radius):
    """Sum of a over a (2*radius+1)^2 window cropped at the image border."""
    h, w = a.shape
    c = np.zeros((h + 1, w + 1))
    c[1:, 1:] = np.cumsum(np.cumsum(a, axis=0), axis=1)
    ys, xs = np.mgrid[0:h, 0:w]
    y0 = np.maximum(ys - radius, 0)
    y1 = np.minimum(ys + radius + 1, h)
    x0 = np.maximum(xs - radius, 0)
    x1 = np.minimum(xs + radius + 1, w)
    return c[y1, x1] - c[y0, x1] - c[y1, x0] + c[y0, x0]


def lk_flow(ix, iy, it, radius, eig_floor):
    """Per-pixel least squares over a box window (mean structure tensor).

    Pixels whose smaller tensor eigenvalue falls below eig_floor are flagged
    invalid and get zero flow. Returns (u, v, valid-mask).
    """
    n = _box_sum(np.ones_like(ix), radius)
    a = _box_sum(ix * ix, radius) / n
    b = _box_sum(ix * iy, radius) / n
    c = _box_sum(iy * iy, radius) / n
    r1 = -_box_sum(ix * it, radius) / n
    r2 = -_box_sum(iy * it, radius) / n
    half_tr = 0.5 * (a + c)
    root = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    lam_min = half_tr - root
    valid = lam_min >= eig_floor
    det = a * c - b * b
    safe = np.where(valid, det, 1.0)
    u = np.where(valid, (c * r1 - b * r2) / safe, 0.0)
    v = np.where(valid, (a * r2 - b * r1) / safe, 0.0)
    return u, v, valid


def _forward_grad(a):
    gx = np.zeros_like(a)
    gy = np.zeros_like(a)
    gx[:, :-1] = a[:, 1:] - a[:, :-1]
    gy[:-1, :] = a[1:, :] - a[:-1, :]
    return gx, gy


def _divergence(p1, p2):
    div = np.zeros_like(p1)
    div[1:, 1:] = p2[1:, 1:] - p2[:-1, 1:] + p1[1:, 1:] - p1[1:, :-1]
    div[1:, 0] = p2[1:, 0] - p2[:-1, 0] + p1[1:, 0]
    div[0, 1:] = p2[0, 1:] + p1[0, 1:] - p1[0, :-1]
    div[0, 0] = p1[0, 0] + p2[0, 0]
    return div


def tvl1_level(i0, i1, i1x, i1y, u0, v0, lam, theta, tau, warps, inner):
    """One pyramid level of the duality-based TV-L1 solver.

    Outer loop re-warps the target image and its gradients by the current
    flow and re-linearizes the residual; the inner loop alternates the
    pointwise data threshold with the dual total-variation update.
    """
    u = u0.copy()
    v = v0.copy()
    p11 = np.zeros_like(u)
    p12 = np.zeros_like(u)
    p21 = np.zeros_like(u)
    p22 = np.zeros_like(u)
    lt = lam * theta
    taut = tau / theta
    for _ in range(warps):
        uw = u.copy()
        vw = v.copy()
        i1w = warp_bilinear(i1, uw, vw)
        i1wx = warp_bilinear(i1x, uw, vw)
        i1wy = warp_bilinear(i1y, uw, vw)
        grad = i1wx * i1wx + i1wy * i1wy
        rho_c = i1w - i1wx * uw - i1wy * vw - i0
        thresh = lt * grad
        proj = grad > _GRAD_EPS
        for _ in range(inner):
            rho = rho_c + i1wx * u + i1wy * v
            scale = np.where(
                rho < -thresh,
                lt,
                np.where(rho > thresh, -lt, np.where(proj, -rho / np.maximum(grad, _GRAD_EPS), 0.0)),
            )
            v1 = u + scale * i1wx
            v2 = v + scale * i1wy
            u = v1 + theta * _divergence(p11, p12)
            v = v2 + theta * _divergence(p21, p22)
            ux, uy = _forward_grad(u)
            vx, vy = _forward_grad(v)
            ng1 = 1.0 + taut * np.sqrt(ux * ux + uy * uy)
            ng2 = 1.0 + taut * np.sqrt(vx * vx + vy * vy)
            p11 = (p11 + taut * ux) / ng1
            p12 = (p12 + taut * uy) / ng1
            p21 = (p21 + taut * vx) / ng2
            p22 = (p22 + taut * vy) / ng2
    return u, v
