"""Flow-stream CNN: per-stream conv/pool stacks with a fused dense head.

Each stream consumes one 28x28x1 flow channel and runs Conv(5x5, 6 kernels) ->
pool -> Conv(5x5, 16 kernels) -> pool, giving 7x7x16. Streams fuse either by
concatenation (head input 784 per stream) or elementwise multiplication of the
7x7x16 maps (head input 784 regardless of stream count), then FC 1024 ->
FC 1024 -> 3 logits. The second FC activation is the penultimate feature used
for scatter visualization.
"""

from dataclasses import dataclass

import numpy as np

from mexflow import numerics as nx
from mexflow import tensorio
from mexflow.imaging import NUM_CLASSES

INPUT_SIZE = 28
FC_WIDTH = 1024
STREAM_FLAT = 7 * 7 * 16

VALID_CHANNELS = ("p", "q", "rho", "theta", "eps_mag", "eps_xx", "eps_xy", "eps_yx")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class StreamSpec:
    channels: tuple
    fusion: str = "concat"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if not 1 <= len(self.channels) <= 3:
            raise ValueError(f"StreamSpec: stream count must be 1..3, got {len(self.channels)}")
        if len(set(self.channels)) != len(self.channels):
            raise ValueError(f"StreamSpec: duplicate stream selectors {self.channels}")
        for name in self.channels:
            if name not in VALID_CHANNELS:
                raise ValueError(f"StreamSpec: unknown channel {name!r}; have {VALID_CHANNELS}")
        if self.fusion not in ("concat", "multiply"):
            raise ValueError(f"StreamSpec: fusion must be concat or multiply, got {self.fusion!r}")
        if self.fusion == "multiply" and len(self.channels) < 2:
            raise ValueError("StreamSpec: multiply fusion needs at least 2 streams")

    @property
    def head_input(self):
        if self.fusion == "multiply":
            return STREAM_FLAT
        return STREAM_FLAT * len(self.channels)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    learning_rate: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    checkpoint_epochs: tuple = ()

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("TrainConfig: epochs must be >= 1")


class OffApexNet:
    """Parameter container plus forward/backward for one StreamSpec."""

    def __init__(self, spec, seed=0):
        self.spec = spec
        self.seed = seed
        self.params = {}
        n_streams = len(spec.channels)
        rngs = nx.spawn_rngs(seed, 2 * n_streams + 3)
        for s in range(n_streams):
            r1, r2 = rngs[2 * s], rngs[2 * s + 1]
            self.params[f"stream{s}.conv1.k"] = nx.glorot_uniform(
                r1, (5, 5, 1, 6), fan_in=5 * 5 * 1, fan_out=5 * 5 * 6
            )
            self.params[f"stream{s}.conv1.b"] = np.zeros(6)
            self.params[f"stream{s}.conv2.k"] = nx.glorot_uniform(
                r2, (5, 5, 6, 16), fan_in=5 * 5 * 6, fan_out=5 * 5 * 16
            )
            self.params[f"stream{s}.conv2.b"] = np.zeros(16)
        head_in = spec.head_input
        r_fc1, r_fc2, r_out = rngs[2 * n_streams :]
        self.params["fc1.w"] = nx.glorot_uniform(r_fc1, (head_in, FC_WIDTH), head_in, FC_WIDTH)
        self.params["fc1.b"] = np.zeros(FC_WIDTH)
        self.params["fc2.w"] = nx.glorot_uniform(r_fc2, (FC_WIDTH, FC_WIDTH), FC_WIDTH, FC_WIDTH)
        self.params["fc2.b"] = np.zeros(FC_WIDTH)
        self.params["out.w"] = nx.glorot_uniform(r_out, (FC_WIDTH, NUM_CLASSES), FC_WIDTH, NUM_CLASSES)
        self.params["out.b"] = np.zeros(NUM_CLASSES)

    # -- forward / backward -------------------------------------------------

    def _check_inputs(self, inputs):
        if len(inputs) != len(self.spec.channels):
            raise ValueError(
                f"forward: got {len(inputs)} stream inputs for "
                f"{len(self.spec.channels)} streams"
            )

    def forward(self, inputs, want_cache=False):
        """inputs: one (N,28,28,1) array per stream. Returns (logits, penultimate)."""
        self._check_inputs(inputs)
        cache = {"streams": []}
        flats = []
        maps = []
        for s, x in enumerate(inputs):
            x = np.asarray(x, dtype=np.float64)
            if x.ndim == 3:
                x = x[None]
            c1 = nx.conv2d_batch(x, self.params[f"stream{s}.conv1.k"], self.params[f"stream{s}.conv1.b"])
            r1 = nx.relu(c1)
            p1, a1 = nx.maxpool2d_batch(r1)
            c2 = nx.conv2d_batch(p1, self.params[f"stream{s}.conv2.k"], self.params[f"stream{s}.conv2.b"])
            r2 = nx.relu(c2)
            p2, a2 = nx.maxpool2d_batch(r2)
            cache["streams"].append({"x": x, "c1": c1, "r1": r1, "p1": p1, "a1": a1, "c2": c2, "r2": r2, "a2": a2, "p2": p2})
            maps.append(p2)
            flats.append(p2.reshape(p2.shape[0], -1))
        if self.spec.fusion == "multiply" and len(maps) > 1:
            fused_map = maps[0].copy()
            for m in maps[1:]:
                fused_map *= m
            fused = fused_map.reshape(fused_map.shape[0], -1)
        else:
            fused = np.concatenate(flats, axis=1) if len(flats) > 1 else flats[0]
        z1 = nx.dense_batch(fused, self.params["fc1.w"], self.params["fc1.b"])
        h1 = nx.relu(z1)
        z2 = nx.dense_batch(h1, self.params["fc2.w"], self.params["fc2.b"])
        h2 = nx.relu(z2)
        logits = nx.dense_batch(h2, self.params["out.w"], self.params["out.b"])
        cache.update(fused=fused, z1=z1, h1=h1, z2=z2, h2=h2, maps=maps)
        if want_cache:
            return logits, h2, cache
        return logits, h2

    def loss_and_grads(self, inputs, labels):
        """Mean batch loss, gradient dict, and the batch logits."""
        labels = np.asarray(labels, dtype=np.int64)
        logits, _, cache = self.forward(inputs, want_cache=True)
        loss, _, dlogits = nx.softmax_xent_batch(logits, labels)
        grads = {}
        dh2, grads["out.w"], grads["out.b"] = nx.dense_backward_batch(
            cache["h2"], self.params["out.w"], dlogits
        )
        dz2 = nx.relu_backward(cache["z2"], dh2)
        dh1, grads["fc2.w"], grads["fc2.b"] = nx.dense_backward_batch(
            cache["h1"], self.params["fc2.w"], dz2
        )
        dz1 = nx.relu_backward(cache["z1"], dh1)
        dfused, grads["fc1.w"], grads["fc1.b"] = nx.dense_backward_batch(
            cache["fused"], self.params["fc1.w"], dz1
        )
        maps = cache["maps"]
        n = maps[0].shape[0]
        if self.spec.fusion == "multiply" and len(maps) > 1:
            dmap = dfused.reshape(maps[0].shape)
            dmaps = []
            for i in range(len(maps)):
                others = np.ones_like(maps[0])
                for j, m in enumerate(maps):
                    if j != i:
                        others *= m
                dmaps.append(dmap * others)
        else:
            dmaps = [
                d.reshape(maps[0].shape)
                for d in np.split(dfused, len(maps), axis=1)
            ]
        for s, st in enumerate(cache["streams"]):
            dp2 = dmaps[s]
            dr2 = nx.maxpool2d_backward_batch(st["r2"], st["a2"], dp2)
            dc2 = nx.relu_backward(st["c2"], dr2)
            dp1, grads[f"stream{s}.conv2.k"], grads[f"stream{s}.conv2.b"] = nx.conv2d_backward_batch(
                st["p1"], self.params[f"stream{s}.conv2.k"], dc2
            )
            dr1 = nx.maxpool2d_backward_batch(st["r1"], st["a1"], dp1)
            dc1 = nx.relu_backward(st["c1"], dr1)
            _, grads[f"stream{s}.conv1.k"], grads[f"stream{s}.conv1.b"] = nx.conv2d_backward_batch(
                st["x"], self.params[f"stream{s}.conv1.k"], dc1
            )
        return loss, grads, logits

    # -- training -----------------------------------------------------------

    def train(self, inputs, labels, config, checkpoint_hook=None):
        """Adam training loop; returns a list of (epoch, loss, train_acc).

        checkpoint_hook(epoch, net) fires for every epoch in
        config.checkpoint_epochs (0 means the untrained state).
        """
        labels = np.asarray(labels, dtype=np.int64)
        if len(np.unique(labels)) < 1 or any(
            np.sum(labels == c) == 0 for c in np.unique(labels)
        ):
            raise ValueError("train: empty class in training data")
        n = labels.shape[0]
        names = sorted(self.params)
        plist = [self.params[k] for k in names]
        state = nx.AdamState(lr=config.learning_rate).init(plist)
        rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
        if checkpoint_hook and 0 in config.checkpoint_epochs:
            checkpoint_hook(0, self)
        trace = []
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(n)
            total_loss = 0.0
            correct = 0
            for start in range(0, n, config.batch_size):
                idx = order[start : start + config.batch_size]
                batch_inputs = [x[idx] for x in inputs]
                batch_labels = labels[idx]
                loss, grads, logits = self.loss_and_grads(batch_inputs, batch_labels)
                if not np.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}")
                correct += int(np.sum(np.argmax(logits, axis=1) == batch_labels))
                total_loss += loss * len(idx)
                glist = [grads[k] for k in names]
                try:
                    nx.adam_step(plist, glist, state)
                except nx.NonFiniteError as exc:
                    raise TrainingError(f"non-finite gradient at epoch {epoch}") from exc
            trace.append((epoch, total_loss / n, correct / n))
            if checkpoint_hook and epoch in config.checkpoint_epochs:
                checkpoint_hook(epoch, self)
        return trace

    def predict(self, inputs):
        """Class ids for a batch; argmax with ties to the lowest id."""
        logits, _ = self.forward(inputs)
        return np.argmax(logits, axis=1)

    def extract_features(self, inputs, batch_size=64):
        """Penultimate activations, one row per sample, order preserved."""
        n = inputs[0].shape[0]
        rows = []
        for start in range(0, n, batch_size):
            batch = [x[start : start + batch_size] for x in inputs]
            _, h2 = self.forward(batch)
            rows.append(h2)
        return np.concatenate(rows, axis=0)

    # -- persistence ----------------------------------------------------------

    def save_checkpoint(self, directory):
        meta = dict(self.params)
        tensorio.save_params(directory, meta, dtype=np.float64)

    def load_checkpoint(self, directory):
        loaded = tensorio.load_params(directory)
        for name in self.params:
            if name not in loaded:
                raise KeyError(f"checkpoint missing parameter {name}")
            if loaded[name].shape != self.params[name].shape:
                raise ValueError(
                    f"checkpoint parameter {name} has shape {loaded[name].shape}, "
                    f"expected {self.params[name].shape}"
                )
            self.params[name] = loaded[name].astype(np.float64)
        return self

    def clone_params(self):
        return {k: v.copy() for k, v in self.params.items()}

    def set_params(self, params):
        for k in self.params:
            self.params[k] = params[k].copy()


def build_network(spec, seed=0):
    return OffApexNet(spec, seed=seed)


def kink_margin(net, inputs):
    """Distance from the probe point to the nearest loss non-smoothness.

    Finite-difference checks are only meaningful where the net is
    differentiable; the hazards are rectifier crossings that can change a
    pooled maximum and rectifier crossings in the dense head. Returns the
    smallest such distance: probe perturbations well below it cannot cross a
    kink.
    """
    batch = [np.asarray(x)[None] if np.asarray(x).ndim == 3 else np.asarray(x) for x in inputs]
    _, _, cache = net.forward(batch, want_cache=True)
    margin = np.inf

    def pool_margin(pre, post):
        n, h, w, c = post.shape
        oh, ow = -(-h // 2), -(-w // 2)
        if h % 2 or w % 2:
            padded_post = np.full((n, oh * 2, ow * 2, c), -np.inf)
            padded_post[:, :h, :w, :] = post
            padded_pre = np.full((n, oh * 2, ow * 2, c), -np.inf)
            padded_pre[:, :h, :w, :] = pre
        else:
            padded_post, padded_pre = post, pre
        win_post = padded_post.reshape(n, oh, 2, ow, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, oh, ow, 4, c)
        win_pre = padded_pre.reshape(n, oh, 2, ow, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, oh, ow, 4, c)
        top = win_post.max(axis=3)
        m = np.inf
        zero_max = top <= 0.0
        if np.any(zero_max):
            # nearest negative pre-activation that could surface as a new max
            nearest = np.where(np.isfinite(win_pre), win_pre, -np.inf).max(axis=3)
            m = min(m, float(np.min(-nearest[zero_max])))
        pos_max = ~zero_max
        if np.any(pos_max):
            runner = np.sort(win_post, axis=3)[:, :, :, 2, :]
            gap = (top - np.maximum(runner, 0.0))[pos_max]
            m = min(m, float(np.min(gap)))
        return m

    for st in cache["streams"]:
        margin = min(margin, pool_margin(st["c1"], st["r1"]))
        margin = min(margin, pool_margin(st["c2"], st["r2"]))
    margin = min(margin, float(np.min(np.abs(cache["z1"]))))
    margin = min(margin, float(np.min(np.abs(cache["z2"]))))
    return margin


def grad_check_network(net, inputs, label, epsilon=1e-5, samples_per_param=8, seed=0):
    """Spec-level gradient check: max relative error analytic vs central diff."""
    batch = [np.asarray(x)[None] if np.asarray(x).ndim == 3 else x for x in inputs]
    labels = [label]
    names = sorted(net.params)
    plist = [net.params[k] for k in names]

    def loss_fn():
        logits, _ = net.forward(batch)
        loss, _, _ = nx.softmax_xent_batch(logits, np.asarray(labels))
        return loss

    def grad_fn():
        _, grads, _ = net.loss_and_grads(batch, labels)
        return [grads[k] for k in names]

    return nx.grad_check(loss_fn, plist, grad_fn, epsilon=epsilon,
                         samples_per_param=samples_per_param, seed=seed)


def save_trace_csv(trace, path):
    with open(path, "w") as fh:
        fh.write("epoch,loss,train_acc\n")
        for epoch, loss, acc in trace:
            fh.write(f"{epoch},{loss!r},{acc!r}\n")
