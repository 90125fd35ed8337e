"""Block-grid oriented flow features with dual weighting, plus a linear SVM.

Each block of a BxB partition accumulates an orientation histogram over theta
(uniform bins on (-pi, pi]); every pixel's vote is weighted locally by its flow
magnitude, and the finished block histogram is weighted globally by the
block's mean optical strain. Blocks concatenate row-major and the full vector
is L2-normalized. The classifier is a one-vs-rest linear SVM trained by a
seeded deterministic Pegasos-style subgradient descent.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mexflow.imaging import NUM_CLASSES


@dataclass(frozen=True)
class BiwoofConfig:
    blocks_per_side: int = 5
    orientation_bins: int = 8

    def validate(self):
        if self.blocks_per_side < 1:
            raise ValueError("BiwoofConfig: blocks_per_side must be >= 1")
        if self.orientation_bins < 2:
            raise ValueError("BiwoofConfig: orientation_bins must be >= 2")
        return self

    @property
    def feature_length(self):
        return self.blocks_per_side**2 * self.orientation_bins


def _block_edges(extent, blocks):
    """Equal blocks of floor(extent/blocks); remainder joins the last block."""
    base = extent // blocks
    edges = [i * base for i in range(blocks)] + [extent]
    return edges


def extract_biwoof(channels, config=None):
    """Feature vector of length blocks^2 * bins from derived flow channels."""
    config = (config or BiwoofConfig()).validate()
    theta = channels.theta
    rho = channels.rho
    strain = channels.eps_mag
    if not (theta.shape == rho.shape == strain.shape):
        raise ValueError(
            f"extract_biwoof: channel extents differ: {theta.shape}, {rho.shape}, {strain.shape}"
        )
    h, w = theta.shape
    b = config.blocks_per_side
    bins = config.orientation_bins
    width = 2.0 * np.pi / bins
    bin_idx = np.minimum(((theta + np.pi) / width).astype(np.int64), bins - 1)
    rows = _block_edges(h, b)
    cols = _block_edges(w, b)
    feature = np.zeros(b * b * bins)
    for bi in range(b):
        for bj in range(b):
            sl = (slice(rows[bi], rows[bi + 1]), slice(cols[bj], cols[bj + 1]))
            hist = np.bincount(bin_idx[sl].ravel(), weights=rho[sl].ravel(), minlength=bins)
            start = (bi * b + bj) * bins
            feature[start : start + bins] = hist * float(np.mean(strain[sl]))
    norm = np.linalg.norm(feature)
    if norm > 0.0:
        feature /= norm
    return feature


# ---------------------------------------------------------------------------
# linear SVM (one-vs-rest, primal subgradient)
# ---------------------------------------------------------------------------

@dataclass
class SvmModel:
    weights: np.ndarray  # (classes, D)
    biases: np.ndarray  # (classes,)
    regularization: float
    epochs: int
    seed: int


def train_svm(features, labels, regularization=1e-4, epochs=120, seed=0):
    """Pegasos-style hinge-loss training, one binary model per class.

    Deterministic for a given seed: samples are visited in a seeded shuffled
    order with step size 1/(lambda * t).
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"train_svm: bad shapes {x.shape} vs {y.shape}")
    if len(np.unique(y)) < 2:
        raise ValueError("train_svm: need at least two classes in the training set")
    n, d = x.shape
    weights = np.zeros((NUM_CLASSES, d))
    biases = np.zeros(NUM_CLASSES)
    rng = np.random.default_rng(seed)
    lam = regularization
    for c in range(NUM_CLASSES):
        target = np.where(y == c, 1.0, -1.0)
        w = np.zeros(d)
        b = 0.0
        t = 0
        for _ in range(epochs):
            order = rng.permutation(n)
            for i in order:
                t += 1
                eta = 1.0 / (lam * t)
                margin = target[i] * (w @ x[i] + b)
                w *= 1.0 - eta * lam
                if margin < 1.0:
                    w += eta * target[i] * x[i]
                    b += eta * target[i]
        weights[c] = w
        biases[c] = b
    return SvmModel(
        weights=weights, biases=biases, regularization=lam, epochs=epochs, seed=seed
    )


def predict_svm(model, feature):
    """Argmax of one-vs-rest scores; ties resolve to the lowest class id."""
    f = np.asarray(feature, dtype=np.float64)
    if f.shape[0] != model.weights.shape[1]:
        raise ValueError(
            f"predict_svm: feature length {f.shape[0]} does not match model "
            f"dimension {model.weights.shape[1]}"
        )
    scores = model.weights @ f + model.biases
    return int(np.argmax(scores)), scores


# ---------------------------------------------------------------------------
# model and feature files
# ---------------------------------------------------------------------------

SVM_MAGIC = b"MSVM"


class SvmFormatError(ValueError):
    pass


def save_svm(model, path):
    """MSVM file: magic, u8 version, u8 classes, u32 dim, then per class the
    float32 little-endian weights followed by the bias."""
    classes, dim = model.weights.shape
    with open(path, "wb") as fh:
        fh.write(SVM_MAGIC)
        fh.write(struct.pack("<BBI", 1, classes, dim))
        fh.write(struct.pack("<fff", model.regularization, float(model.epochs), float(model.seed)))
        for c in range(classes):
            fh.write(model.weights[c].astype("<f4").tobytes())
            fh.write(struct.pack("<f", model.biases[c]))


def load_svm(path):
    raw = Path(path).read_bytes()
    if raw[:4] != SVM_MAGIC:
        raise SvmFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, classes, dim = struct.unpack("<BBI", raw[4:10])
    if version != 1:
        raise SvmFormatError(f"{path}: unsupported version {version}")
    lam, epochs, seed = struct.unpack("<fff", raw[10:22])
    weights = np.empty((classes, dim))
    biases = np.empty(classes)
    pos = 22
    stride = 4 * dim
    for c in range(classes):
        weights[c] = np.frombuffer(raw[pos : pos + stride], dtype="<f4")
        pos += stride
        (biases[c],) = struct.unpack("<f", raw[pos : pos + 4])
        pos += 4
    return SvmModel(
        weights=weights,
        biases=biases,
        regularization=float(lam),
        epochs=int(epochs),
        seed=int(seed),
    )


def save_features_csv(rows, path):
    """rows: (video_id, label, feature vector); one CSV line per sample."""
    with open(path, "w") as fh:
        first = rows[0][2] if rows else []
        header = ["video_id", "label"] + [f"f{i}" for i in range(len(first))]
        fh.write(",".join(header) + "\n")
        for video_id, label, feat in rows:
            fh.write(f"{video_id},{label}," + ",".join(repr(float(v)) for v in feat) + "\n")
