# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled flow-solver kernels; contract-identical to ``_py``.

The solvers spend their time in short per-pixel sweeps repeated hundreds of
times, which is exactly where interpreter and temporary-array overhead hurts,
so these loops are compiled. Results agree with the numpy backend to float64
rounding (same formulas, same sweep order).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt, floor

cnp.import_array()

BACKEND_NAME = "c"


def warp_bilinear(img, u, v):
    """Sample img at (x + u, y + v) with bilinear weights, clamping to the border."""
    cdef double[:, ::1] im = np.ascontiguousarray(img, dtype=np.float64)
    cdef double[:, ::1] uu = np.ascontiguousarray(u, dtype=np.float64)
    cdef double[:, ::1] vv = np.ascontiguousarray(v, dtype=np.float64)
    cdef Py_ssize_t h = im.shape[0], w = im.shape[1]
    out_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, x0, y0, x1, y1
    cdef double x, y, fx, fy, top, bot
    for i in range(h):
        for j in range(w):
            x = j + uu[i, j]
            y = i + vv[i, j]
            if x < 0.0:
                x = 0.0
            elif x > w - 1.0:
                x = w - 1.0
            if y < 0.0:
                y = 0.0
            elif y > h - 1.0:
                y = h - 1.0
            x0 = <Py_ssize_t>floor(x)
            y0 = <Py_ssize_t>floor(y)
            if x0 > w - 2:
                x0 = w - 2 if w > 1 else 0
            if y0 > h - 2:
                y0 = h - 2 if h > 1 else 0
            fx = x - x0
            fy = y - y0
            x1 = x0 + 1 if x0 + 1 < w else w - 1
            y1 = y0 + 1 if y0 + 1 < h else h - 1
            top = im[y0, x0] * (1.0 - fx) + im[y0, x1] * fx
            bot = im[y1, x0] * (1.0 - fx) + im[y1, x1] * fx
            out[i, j] = top * (1.0 - fy) + bot * fy
    return out_arr


cdef double _hs_energy_c(double[:, ::1] ix, double[:, ::1] iy, double[:, ::1] it,
                         double[:, ::1] u, double[:, ::1] v, double alpha) nogil:
    cdef Py_ssize_t h = ix.shape[0], w = ix.shape[1]
    cdef Py_ssize_t i, j
    cdef double e = 0.0, d, du, dv
    for i in range(h):
        for j in range(w):
            d = ix[i, j] * u[i, j] + iy[i, j] * v[i, j] + it[i, j]
            e += d * d
            if j + 1 < w:
                du = u[i, j + 1] - u[i, j]
                dv = v[i, j + 1] - v[i, j]
                e += alpha * alpha * (du * du + dv * dv)
            if i + 1 < h:
                du = u[i + 1, j] - u[i, j]
                dv = v[i + 1, j] - v[i, j]
                e += alpha * alpha * (du * du + dv * dv)
    return e


def hs_energy(ix, iy, it, u, v, double alpha):
    cdef double[:, ::1] cix = np.ascontiguousarray(ix, dtype=np.float64)
    cdef double[:, ::1] ciy = np.ascontiguousarray(iy, dtype=np.float64)
    cdef double[:, ::1] cit = np.ascontiguousarray(it, dtype=np.float64)
    cdef double[:, ::1] cu = np.ascontiguousarray(u, dtype=np.float64)
    cdef double[:, ::1] cv = np.ascontiguousarray(v, dtype=np.float64)
    return _hs_energy_c(cix, ciy, cit, cu, cv, alpha)


def hs_solve(ix, iy, it, double alpha, Py_ssize_t iterations, u0, v0, record_energy=False):
    """Block-Jacobi sweeps on the quadratic flow energy (see numpy twin)."""
    cdef double[:, ::1] cix = np.ascontiguousarray(ix, dtype=np.float64)
    cdef double[:, ::1] ciy = np.ascontiguousarray(iy, dtype=np.float64)
    cdef double[:, ::1] cit = np.ascontiguousarray(it, dtype=np.float64)
    cdef Py_ssize_t h = cix.shape[0], w = cix.shape[1]
    u_arr = np.ascontiguousarray(u0, dtype=np.float64).copy()
    v_arr = np.ascontiguousarray(v0, dtype=np.float64).copy()
    un_arr = np.empty_like(u_arr)
    vn_arr = np.empty_like(v_arr)
    cdef double[:, ::1] u = u_arr
    cdef double[:, ::1] v = v_arr
    cdef double[:, ::1] un = un_arr
    cdef double[:, ::1] vn = vn_arr
    cdef double a2 = alpha * alpha
    cdef Py_ssize_t i, j, k, deg
    cdef double nsu, nsv, s, ubar, vbar, t
    energies = [] if record_energy else None
    if record_energy:
        energies.append(_hs_energy_c(cix, ciy, cit, u, v, alpha))
    for k in range(iterations):
        for i in range(h):
            for j in range(w):
                nsu = 0.0
                nsv = 0.0
                deg = 0
                if i > 0:
                    nsu += u[i - 1, j]; nsv += v[i - 1, j]; deg += 1
                if i + 1 < h:
                    nsu += u[i + 1, j]; nsv += v[i + 1, j]; deg += 1
                if j > 0:
                    nsu += u[i, j - 1]; nsv += v[i, j - 1]; deg += 1
                if j + 1 < w:
                    nsu += u[i, j + 1]; nsv += v[i, j + 1]; deg += 1
                ubar = nsu / deg
                vbar = nsv / deg
                s = a2 * deg
                t = (cix[i, j] * ubar + ciy[i, j] * vbar + cit[i, j]) / (
                    s + cix[i, j] * cix[i, j] + ciy[i, j] * ciy[i, j]
                )
                un[i, j] = ubar - cix[i, j] * t
                vn[i, j] = vbar - ciy[i, j] * t
        u_arr, un_arr = un_arr, u_arr
        v_arr, vn_arr = vn_arr, v_arr
        u = u_arr; un = un_arr
        v = v_arr; vn = vn_arr
        if record_energy:
            energies.append(_hs_energy_c(cix, ciy, cit, u, v, alpha))
    if record_energy:
        return u_arr, v_arr, np.asarray(energies)
    return u_arr, v_arr, None


def lk_flow(ix, iy, it, Py_ssize_t radius, double eig_floor):
    """Windowed least squares with an eigenvalue gate (see numpy twin)."""
    cdef double[:, ::1] cix = np.ascontiguousarray(ix, dtype=np.float64)
    cdef double[:, ::1] ciy = np.ascontiguousarray(iy, dtype=np.float64)
    cdef double[:, ::1] cit = np.ascontiguousarray(it, dtype=np.float64)
    cdef Py_ssize_t h = cix.shape[0], w = cix.shape[1]
    cdef Py_ssize_t r = radius
    u_arr = np.zeros((h, w), dtype=np.float64)
    v_arr = np.zeros((h, w), dtype=np.float64)
    valid_arr = np.zeros((h, w), dtype=np.uint8)
    cdef double[:, ::1] u = u_arr
    cdef double[:, ::1] v = v_arr
    cdef unsigned char[:, ::1] valid = valid_arr
    # integral images over the products, with a zero top row/left column
    cdef double[:, ::1] sxx = np.zeros((h + 1, w + 1))
    cdef double[:, ::1] sxy = np.zeros((h + 1, w + 1))
    cdef double[:, ::1] syy = np.zeros((h + 1, w + 1))
    cdef double[:, ::1] sxt = np.zeros((h + 1, w + 1))
    cdef double[:, ::1] syt = np.zeros((h + 1, w + 1))
    cdef Py_ssize_t i, j, i0, i1, j0, j1
    cdef double gx, gy, gt
    for i in range(h):
        for j in range(w):
            gx = cix[i, j]; gy = ciy[i, j]; gt = cit[i, j]
            sxx[i + 1, j + 1] = gx * gx + sxx[i, j + 1] + sxx[i + 1, j] - sxx[i, j]
            sxy[i + 1, j + 1] = gx * gy + sxy[i, j + 1] + sxy[i + 1, j] - sxy[i, j]
            syy[i + 1, j + 1] = gy * gy + syy[i, j + 1] + syy[i + 1, j] - syy[i, j]
            sxt[i + 1, j + 1] = gx * gt + sxt[i, j + 1] + sxt[i + 1, j] - sxt[i, j]
            syt[i + 1, j + 1] = gy * gt + syt[i, j + 1] + syt[i + 1, j] - syt[i, j]
    cdef double n, a, b, c, r1, r2, half_tr, disc, root, lam_min, det
    for i in range(h):
        i0 = i - r if i - r > 0 else 0
        i1 = i + r + 1 if i + r + 1 < h else h
        for j in range(w):
            j0 = j - r if j - r > 0 else 0
            j1 = j + r + 1 if j + r + 1 < w else w
            n = <double>((i1 - i0) * (j1 - j0))
            a = (sxx[i1, j1] - sxx[i0, j1] - sxx[i1, j0] + sxx[i0, j0]) / n
            b = (sxy[i1, j1] - sxy[i0, j1] - sxy[i1, j0] + sxy[i0, j0]) / n
            c = (syy[i1, j1] - syy[i0, j1] - syy[i1, j0] + syy[i0, j0]) / n
            r1 = -(sxt[i1, j1] - sxt[i0, j1] - sxt[i1, j0] + sxt[i0, j0]) / n
            r2 = -(syt[i1, j1] - syt[i0, j1] - syt[i1, j0] + syt[i0, j0]) / n
            half_tr = 0.5 * (a + c)
            disc = 0.25 * (a - c) * (a - c) + b * b
            root = sqrt(disc) if disc > 0.0 else 0.0
            lam_min = half_tr - root
            if lam_min >= eig_floor:
                det = a * c - b * b
                u[i, j] = (c * r1 - b * r2) / det
                v[i, j] = (a * r2 - b * r1) / det
                valid[i, j] = 1
    return u_arr, v_arr, valid_arr.astype(bool)


def tvl1_level(i0, i1, i1x, i1y, u0, v0, double lam, double theta,
               double tau, Py_ssize_t warps, Py_ssize_t inner):
    """One pyramid level of the duality-based solver (see numpy twin)."""
    cdef double[:, ::1] c0 = np.ascontiguousarray(i0, dtype=np.float64)
    cdef Py_ssize_t h = c0.shape[0], w = c0.shape[1]
    i1_arr = np.ascontiguousarray(i1, dtype=np.float64)
    i1x_arr = np.ascontiguousarray(i1x, dtype=np.float64)
    i1y_arr = np.ascontiguousarray(i1y, dtype=np.float64)
    u_arr = np.ascontiguousarray(u0, dtype=np.float64).copy()
    v_arr = np.ascontiguousarray(v0, dtype=np.float64).copy()
    cdef double[:, ::1] u = u_arr
    cdef double[:, ::1] v = v_arr
    cdef double[:, ::1] p11 = np.zeros((h, w))
    cdef double[:, ::1] p12 = np.zeros((h, w))
    cdef double[:, ::1] p21 = np.zeros((h, w))
    cdef double[:, ::1] p22 = np.zeros((h, w))
    cdef double[:, ::1] i1w, i1wx, i1wy
    cdef double[:, ::1] grad = np.empty((h, w))
    cdef double[:, ::1] rho_c = np.empty((h, w))
    cdef double[:, ::1] v1 = np.empty((h, w))
    cdef double[:, ::1] v2 = np.empty((h, w))
    cdef double lt = lam * theta
    cdef double taut = tau / theta
    cdef double th = theta
    cdef double grad_eps = 1e-8
    cdef Py_ssize_t wi, ii, i, j
    cdef double rho, sc, thresh, d1, d2, ux, uy, vx, vy, ng
    for wi in range(warps):
        i1w = warp_bilinear(i1_arr, u_arr, v_arr)
        i1wx = warp_bilinear(i1x_arr, u_arr, v_arr)
        i1wy = warp_bilinear(i1y_arr, u_arr, v_arr)
        for i in range(h):
            for j in range(w):
                grad[i, j] = i1wx[i, j] * i1wx[i, j] + i1wy[i, j] * i1wy[i, j]
                rho_c[i, j] = (
                    i1w[i, j] - i1wx[i, j] * u[i, j] - i1wy[i, j] * v[i, j] - c0[i, j]
                )
        for ii in range(inner):
            for i in range(h):
                for j in range(w):
                    rho = rho_c[i, j] + i1wx[i, j] * u[i, j] + i1wy[i, j] * v[i, j]
                    thresh = lt * grad[i, j]
                    if rho < -thresh:
                        sc = lt
                    elif rho > thresh:
                        sc = -lt
                    elif grad[i, j] > grad_eps:
                        sc = -rho / grad[i, j]
                    else:
                        sc = 0.0
                    v1[i, j] = u[i, j] + sc * i1wx[i, j]
                    v2[i, j] = v[i, j] + sc * i1wy[i, j]
            # u = v + theta * div(p); divergence is the adjoint of the
            # forward-difference gradient with Neumann borders
            for i in range(h):
                for j in range(w):
                    d1 = p11[i, j]
                    if j > 0:
                        d1 -= p11[i, j - 1]
                    d2 = p12[i, j]
                    if i > 0:
                        d2 -= p12[i - 1, j]
                    u[i, j] = v1[i, j] + th * (d1 + d2)
                    d1 = p21[i, j]
                    if j > 0:
                        d1 -= p21[i, j - 1]
                    d2 = p22[i, j]
                    if i > 0:
                        d2 -= p22[i - 1, j]
                    v[i, j] = v2[i, j] + th * (d1 + d2)
            for i in range(h):
                for j in range(w):
                    ux = u[i, j + 1] - u[i, j] if j + 1 < w else 0.0
                    uy = u[i + 1, j] - u[i, j] if i + 1 < h else 0.0
                    ng = 1.0 + taut * sqrt(ux * ux + uy * uy)
                    p11[i, j] = (p11[i, j] + taut * ux) / ng
                    p12[i, j] = (p12[i, j] + taut * uy) / ng
                    vx = v[i, j + 1] - v[i, j] if j + 1 < w else 0.0
                    vy = v[i + 1, j] - v[i, j] if i + 1 < h else 0.0
                    ng = 1.0 + taut * sqrt(vx * vx + vy * vy)
                    p21[i, j] = (p21[i, j] + taut * vx) / ng
                    p22[i, j] = (p22[i, j] + taut * vy) / ng
    return u_arr, v_arr
