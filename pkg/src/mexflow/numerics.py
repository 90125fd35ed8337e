"""Dense-array building blocks for the flow-stream networks.

Single-sample operations follow the pipeline's layer contracts (channels-last,
"same" padding with ceil output sizing); batched variants carry a leading N
axis and are what the network classes actually call. Training math is float64
throughout so the finite-difference checks have headroom.
"""

from dataclasses import dataclass, field

import numpy as np


class ShapeMismatchError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(FloatingPointError):
    """A value that must be finite is NaN or infinite."""


def _as_batch(x, rank):
    """Add a singleton batch axis when x has `rank` dims; flag if it had one."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == rank:
        return x[None, ...], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeMismatchError(f"expected rank {rank} or {rank + 1}, got shape {x.shape}")


def same_pad_amount(extent, kernel, stride):
    """TF-style SAME: output = ceil(extent/stride), split padding begin/end."""
    out = -(-extent // stride)
    total = max((out - 1) * stride + kernel - extent, 0)
    begin = total // 2
    return out, begin, total - begin


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _pad_input(x, ph0, ph1, pw0, pw1):
    if ph0 == ph1 == pw0 == pw1 == 0:
        return x
    n, h, w, c = x.shape
    xpad = np.zeros((n, h + ph0 + ph1, w + pw0 + pw1, c), dtype=x.dtype)
    xpad[:, ph0 : ph0 + h, pw0 : pw0 + w, :] = x
    return xpad


def _gather_cols(xpad, kh, kw, out_h, out_w, stride):
    """(N*out_h*out_w, C*kh*kw) patch matrix; channel-major within a patch."""
    n = xpad.shape[0]
    view = np.lib.stride_tricks.sliding_window_view(xpad, (kh, kw), axis=(1, 2))
    view = view[:, ::stride, ::stride]  # (N, out_h, out_w, C, kh, kw)
    return view.reshape(n * out_h * out_w, -1)


def _kernel_matrix(kernels):
    """(kh,kw,C,F) -> (C*kh*kw, F), matching _gather_cols ordering."""
    kh, kw, c, f = kernels.shape
    return np.ascontiguousarray(kernels.transpose(2, 0, 1, 3)).reshape(-1, f)


def conv2d_batch(x, kernels, biases, stride=1):
    """Cross-correlation with SAME padding. x: (N,H,W,C), kernels: (kh,kw,C,F)."""
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    kh, kw, in_c, out_c = kernels.shape
    if x.shape[3] != in_c:
        raise ShapeMismatchError(
            f"conv2d: input channels {x.shape} do not match kernels {kernels.shape}"
        )
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    n, h, w, _ = x.shape
    out_h, ph0, ph1 = same_pad_amount(h, kh, stride)
    out_w, pw0, pw1 = same_pad_amount(w, kw, stride)
    xpad = _pad_input(x, ph0, ph1, pw0, pw1)
    cols = _gather_cols(xpad, kh, kw, out_h, out_w, stride)
    y = cols @ _kernel_matrix(kernels) + biases
    return y.reshape(n, out_h, out_w, out_c)


def conv2d_backward_batch(x, kernels, dy, stride=1):
    """Gradients of conv2d_batch: returns (dx, dkernels, dbiases)."""
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    kh, kw, in_c, out_c = kernels.shape
    n, h, w, _ = x.shape
    _, out_h, out_w, _ = dy.shape
    _, ph0, ph1 = same_pad_amount(h, kh, stride)
    _, pw0, pw1 = same_pad_amount(w, kw, stride)
    xpad = _pad_input(x, ph0, ph1, pw0, pw1)
    cols = _gather_cols(xpad, kh, kw, out_h, out_w, stride)
    pad_shape = xpad.shape
    dy_mat = dy.reshape(-1, out_c)
    dk_mat = cols.T @ dy_mat  # (C*kh*kw, F)
    dk = dk_mat.reshape(in_c, kh, kw, out_c).transpose(1, 2, 0, 3)
    db = dy_mat.sum(axis=0)
    dxpad = np.zeros(pad_shape)
    for i in range(kh):
        for j in range(kw):
            contrib = dy_mat @ kernels[i, j].T  # (N*out, C)
            dxpad[
                :, i : i + out_h * stride : stride, j : j + out_w * stride : stride, :
            ] += contrib.reshape(n, out_h, out_w, in_c)
    dx = dxpad[:, ph0 : ph0 + h, pw0 : pw0 + w, :]
    return dx, np.ascontiguousarray(dk), db


def conv2d(x, kernels, biases, stride=1):
    """Single-sample convolution: (H,W,C) -> (H',W',F), SAME padding."""
    xb, squeeze = _as_batch(x, 3)
    y = conv2d_batch(xb, kernels, biases, stride)
    return y[0] if squeeze else y


# ---------------------------------------------------------------------------
# max pooling (2x2 window, stride 2, SAME/ceil sizing)
# ---------------------------------------------------------------------------

def maxpool2d_batch(x):
    x = np.asarray(x, dtype=np.float64)
    n, h, w, c = x.shape
    if h < 2 or w < 2:
        raise ShapeMismatchError(f"maxpool2d: spatial extents {h}x{w} smaller than window")
    out_h = -(-h // 2)
    out_w = -(-w // 2)
    if h % 2 or w % 2:
        xpad = np.full((n, out_h * 2, out_w * 2, c), -np.inf)
        xpad[:, :h, :w, :] = x
    else:
        xpad = x
    windows = xpad.reshape(n, out_h, 2, out_w, 2, c)
    flat = windows.transpose(0, 1, 3, 2, 4, 5).reshape(n, out_h, out_w, 4, c)
    arg = flat.argmax(axis=3)
    y = np.take_along_axis(flat, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return y, arg


def maxpool2d_backward_batch(x, arg, dy):
    n, h, w, c = x.shape
    _, out_h, out_w, _ = dy.shape
    dflat = np.zeros((n, out_h, out_w, 4, c))
    np.put_along_axis(dflat, arg[:, :, :, None, :], dy[:, :, :, None, :], axis=3)
    dxpad = dflat.reshape(n, out_h, out_w, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    dxpad = dxpad.reshape(n, out_h * 2, out_w * 2, c)
    return dxpad[:, :h, :w, :]


def maxpool2d(x):
    """Single-sample 2x2/stride-2 max pool; output extents are ceil(half)."""
    xb, squeeze = _as_batch(x, 3)
    y, _ = maxpool2d_batch(xb)
    return y[0] if squeeze else y


# ---------------------------------------------------------------------------
# dense, activations, softmax cross-entropy
# ---------------------------------------------------------------------------

def dense_batch(x, weights, biases):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != weights.shape[0]:
        raise ShapeMismatchError(
            f"dense: input length {x.shape[1]} does not match weights {weights.shape}"
        )
    return x @ weights + biases


def dense_backward_batch(x, weights, dy):
    dw = x.T @ dy
    db = dy.sum(axis=0)
    dx = dy @ weights.T
    return dx, dw, db


def dense(x, weights, biases):
    """y = W.x + b for a flat input vector."""
    xb, squeeze = _as_batch(x, 1)
    y = dense_batch(xb, weights, biases)
    return y[0] if squeeze else y


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, dy):
    return dy * (x > 0.0)


def leaky_relu(x, slope=0.2):
    return np.where(x > 0.0, x, slope * x)


def leaky_relu_backward(x, dy, slope=0.2):
    return dy * np.where(x > 0.0, 1.0, slope)


def softmax_batch(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits, label):
    """Stabilized softmax + negative log-likelihood for one sample.

    Returns (loss, probs); probs sums to one within 1e-12.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.shape[0] < 2:
        raise ShapeMismatchError(f"softmax_xent: need a K>=2 vector, got {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("softmax_xent: non-finite logits")
    k = logits.shape[0]
    if not 0 <= label < k:
        raise ValueError(f"softmax_xent: label {label} outside [0, {k})")
    z = logits - logits.max()
    loss = float(np.log(np.sum(np.exp(z))) - z[label])
    probs = np.exp(z)
    probs /= probs.sum()
    return loss, probs


def softmax_xent_batch(logits, labels):
    """Mean loss over a batch plus the ready-to-use dlogits."""
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("softmax_xent: non-finite logits")
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(z), axis=1))
    loss = float(np.mean(log_norm - z[np.arange(n), labels]))
    probs = softmax_batch(logits)
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, probs, dlogits


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter-set first/second moment accumulators plus step counter."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def init(self, params):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        return self


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place on params and state."""
    if not state.m:
        state.init(params)
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatchError("adam_step: params/grads/state length mismatch")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("adam_step: non-finite gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(loss_fn, params, grad_fn, epsilon=1e-5, samples_per_param=25, seed=0):
    """Max relative error between analytic gradients and central differences.

    loss_fn() evaluates the scalar objective from the current (mutable) params;
    grad_fn() returns the analytic gradient arrays at that point. A random
    subset of entries per parameter is probed.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"grad_check: epsilon {epsilon} outside [1e-7, 1e-3]")
    rng = np.random.default_rng(seed)
    analytic = grad_fn()
    worst = 0.0
    for p, g in zip(params, analytic):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        count = min(samples_per_param, flat_p.size)
        idx = rng.choice(flat_p.size, size=count, replace=False)
        for i in idx:
            orig = flat_p[i]
            flat_p[i] = orig + epsilon
            hi = loss_fn()
            flat_p[i] = orig - epsilon
            lo = loss_fn()
            flat_p[i] = orig
            numeric = (hi - lo) / (2.0 * epsilon)
            err = abs(flat_g[i] - numeric) / max(abs(flat_g[i]), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# weight init
# ---------------------------------------------------------------------------

def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def spawn_rngs(seed, count):
    """Independent per-layer generators from one splittable seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

@dataclass
class PcaModel:
    mean: np.ndarray
    basis: np.ndarray  # (D, k), orthonormal columns
    variances: np.ndarray  # (k,), non-increasing
    degenerate: bool = False


def pca_fit(samples, k):
    """Principal axes of an (N, D) sample matrix via SVD of the centered data.

    Column signs are fixed (largest-magnitude entry positive) so repeated fits
    are identical. Zero-variance input is flagged degenerate and still yields
    an orthonormal basis.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ShapeMismatchError(f"pca_fit: need an (N>=2, D) matrix, got {x.shape}")
    n, d = x.shape
    if not 1 <= k <= min(n - 1, d):
        raise ValueError(f"pca_fit: k={k} outside [1, min(N-1, D)={min(n - 1, d)}]")
    mean = x.mean(axis=0)
    centered = x - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:k].T.copy()
    variances = (s[:k] ** 2) / (n - 1)
    for j in range(k):
        col = basis[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            basis[:, j] = -col
    degenerate = bool(np.sum(s**2) < 1e-24)
    return PcaModel(mean=mean, basis=basis, variances=variances, degenerate=degenerate)


def pca_transform(model, x):
    return (np.asarray(x, dtype=np.float64) - model.mean) @ model.basis


def pca_reconstruct(model, projected):
    return projected @ model.basis.T + model.mean
