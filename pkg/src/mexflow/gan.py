"""Class-conditional adversarial training for 28x28 flow-channel images.

The discriminator scores every image twice: a logistic source score (real vs
generated) and a 3-way class head. Training maximizes L_S + L_C for the
discriminator and L_C - L_S for the generator, alternating k updates of each
per outer round until the iteration budget is exhausted. Both log-likelihoods
clamp probabilities to [1e-7, 1 - 1e-7] before taking logs.

Generator: noise + one-hot class -> dense to 7x7x32 -> two rounds of nearest
2x upsampling + 3x3 conv -> tanh, so outputs always land in [-1, 1].
Discriminator: two stride-2 5x5 convs (1->16->32) -> dense 256 -> two heads.
"""

from dataclasses import dataclass

import numpy as np

from mexflow import numerics as nx
from mexflow import tensorio
from mexflow.derivatives import derive_channels
from mexflow.flow import FlowField
from mexflow.imaging import NUM_CLASSES

PROB_CLAMP = 1e-7


class GanTrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class GanConfig:
    noise_dim: int = 100
    disc_steps: int = 1  # k in the alternating loop
    iterations: int = 2000  # K outer rounds (the stopping criterion)
    batch_size: int = 32  # m
    lr_generator: float = 1e-3
    lr_discriminator: float = 1e-4
    seed: int = 0

    def validate(self):
        if self.disc_steps < 1:
            raise ValueError("GanConfig: disc_steps must be >= 1")
        if self.batch_size < 2:
            raise ValueError("GanConfig: batch_size must be >= 2")
        if self.noise_dim < 1:
            raise ValueError("GanConfig: noise_dim must be >= 1")
        return self


def _one_hot(labels, k=NUM_CLASSES):
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _upsample2(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _upsample2_backward(dy):
    n, h, w, c = dy.shape
    return dy.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


class Generator:
    """Maps (z, class id) to a 28x28x1 image in [-1, 1]."""

    def __init__(self, noise_dim=100, seed=0):
        self.noise_dim = noise_dim
        rngs = nx.spawn_rngs(seed, 3)
        d_in = noise_dim + NUM_CLASSES
        self.params = {
            "fc.w": nx.glorot_uniform(rngs[0], (d_in, 7 * 7 * 32), d_in, 7 * 7 * 32),
            "fc.b": np.zeros(7 * 7 * 32),
            "conv1.k": nx.glorot_uniform(rngs[1], (3, 3, 32, 16), 3 * 3 * 32, 3 * 3 * 16),
            "conv1.b": np.zeros(16),
            "conv2.k": nx.glorot_uniform(rngs[2], (3, 3, 16, 1), 3 * 3 * 16, 3 * 3 * 1),
            "conv2.b": np.zeros(1),
        }

    def forward(self, z, labels, want_cache=False):
        zin = np.concatenate([z, _one_hot(labels)], axis=1)
        a0 = nx.dense_batch(zin, self.params["fc.w"], self.params["fc.b"])
        h0 = nx.relu(a0).reshape(-1, 7, 7, 32)
        u1 = _upsample2(h0)
        a1 = nx.conv2d_batch(u1, self.params["conv1.k"], self.params["conv1.b"])
        h1 = nx.relu(a1)
        u2 = _upsample2(h1)
        a2 = nx.conv2d_batch(u2, self.params["conv2.k"], self.params["conv2.b"])
        img = np.tanh(a2)
        if want_cache:
            return img, {"zin": zin, "a0": a0, "h0": h0, "u1": u1, "a1": a1, "h1": h1, "u2": u2, "a2": a2}
        return img

    def backward(self, cache, dimg):
        grads = {}
        da2 = dimg * (1.0 - np.tanh(cache["a2"]) ** 2)
        du2, grads["conv2.k"], grads["conv2.b"] = nx.conv2d_backward_batch(
            cache["u2"], self.params["conv2.k"], da2
        )
        dh1 = _upsample2_backward(du2)
        da1 = nx.relu_backward(cache["a1"], dh1)
        du1, grads["conv1.k"], grads["conv1.b"] = nx.conv2d_backward_batch(
            cache["u1"], self.params["conv1.k"], da1
        )
        dh0 = _upsample2_backward(du1).reshape(len(dimg), -1)
        da0 = nx.relu_backward(cache["a0"], dh0)
        _, grads["fc.w"], grads["fc.b"] = nx.dense_backward_batch(
            cache["zin"], self.params["fc.w"], da0
        )
        return grads


class Discriminator:
    """Maps an image to (source score in (0,1), class logits)."""

    def __init__(self, seed=0):
        rngs = nx.spawn_rngs(seed, 5)
        self.params = {
            "conv1.k": nx.glorot_uniform(rngs[0], (5, 5, 1, 16), 5 * 5 * 1, 5 * 5 * 16),
            "conv1.b": np.zeros(16),
            "conv2.k": nx.glorot_uniform(rngs[1], (5, 5, 16, 32), 5 * 5 * 16, 5 * 5 * 32),
            "conv2.b": np.zeros(32),
            "fc.w": nx.glorot_uniform(rngs[2], (7 * 7 * 32, 256), 7 * 7 * 32, 256),
            "fc.b": np.zeros(256),
            "src.w": nx.glorot_uniform(rngs[3], (256, 1), 256, 1),
            "src.b": np.zeros(1),
            "cls.w": nx.glorot_uniform(rngs[4], (256, NUM_CLASSES), 256, NUM_CLASSES),
            "cls.b": np.zeros(NUM_CLASSES),
        }

    def forward(self, images, want_cache=False):
        x = np.asarray(images, dtype=np.float64)
        a1 = nx.conv2d_batch(x, self.params["conv1.k"], self.params["conv1.b"], stride=2)
        h1 = nx.leaky_relu(a1)
        a2 = nx.conv2d_batch(h1, self.params["conv2.k"], self.params["conv2.b"], stride=2)
        h2 = nx.leaky_relu(a2)
        flat = h2.reshape(len(x), -1)
        a3 = nx.dense_batch(flat, self.params["fc.w"], self.params["fc.b"])
        h3 = nx.leaky_relu(a3)
        src_logit = nx.dense_batch(h3, self.params["src.w"], self.params["src.b"])[:, 0]
        source = 1.0 / (1.0 + np.exp(-src_logit))
        class_logits = nx.dense_batch(h3, self.params["cls.w"], self.params["cls.b"])
        if want_cache:
            return source, class_logits, {
                "x": x, "a1": a1, "h1": h1, "a2": a2, "h2": h2,
                "flat": flat, "a3": a3, "h3": h3, "source": source,
            }
        return source, class_logits

    def backward(self, cache, dsrc_logit, dclass_logits):
        """dsrc_logit: dLoss/d(source logit); returns (grads, dimages)."""
        grads = {}
        dh3_src, grads["src.w"], grads["src.b"] = nx.dense_backward_batch(
            cache["h3"], self.params["src.w"], dsrc_logit[:, None]
        )
        dh3_cls, grads["cls.w"], grads["cls.b"] = nx.dense_backward_batch(
            cache["h3"], self.params["cls.w"], dclass_logits
        )
        da3 = nx.leaky_relu_backward(cache["a3"], dh3_src + dh3_cls)
        dflat, grads["fc.w"], grads["fc.b"] = nx.dense_backward_batch(
            cache["flat"], self.params["fc.w"], da3
        )
        dh2 = dflat.reshape(cache["h2"].shape)
        da2 = nx.leaky_relu_backward(cache["a2"], dh2)
        dh1, grads["conv2.k"], grads["conv2.b"] = nx.conv2d_backward_batch(
            cache["h1"], self.params["conv2.k"], da2, stride=2
        )
        da1 = nx.leaky_relu_backward(cache["a1"], dh1)
        dx, grads["conv1.k"], grads["conv1.b"] = nx.conv2d_backward_batch(
            cache["x"], self.params["conv1.k"], da1, stride=2
        )
        return grads, dx


def _clamp(p):
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def acgan_losses(source_real, class_probs_real, labels_real,
                 source_fake, class_probs_fake, labels_fake):
    """Log-likelihood of the correct source (L_S) and correct class (L_C).

    All four expectations are batch means; the discriminator's objective is
    L_S + L_C and the generator's is L_C - L_S.
    """
    if len(source_real) == 0 or len(source_fake) == 0:
        raise ValueError("acgan_losses: empty batch")
    ls = float(
        np.mean(np.log(_clamp(source_real))) + np.mean(np.log(_clamp(1.0 - source_fake)))
    )
    p_real = _clamp(class_probs_real[np.arange(len(labels_real)), labels_real])
    p_fake = _clamp(class_probs_fake[np.arange(len(labels_fake)), labels_fake])
    lc = float(np.mean(np.log(p_real)) + np.mean(np.log(p_fake)))
    return ls, lc


def _inside_clamp(p):
    return (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)


def _class_grad(class_logits, labels, sign, m):
    """Gradient of -sign * mean(log p_label) w.r.t. the class logits."""
    probs = nx.softmax_batch(class_logits)
    g = probs.copy()
    g[np.arange(len(labels)), labels] -= 1.0
    return sign * g / m


def train_gan(images, labels, config=None):
    """Alternating AC-GAN training; returns (generator, discriminator, trace).

    images: (N, 28, 28, 1) in [-1, 1]; labels: class ids. The trace records
    one row per outer round: (round, L_S, L_C, mean real score, mean fake
    score), measured at the final discriminator step of the round.
    """
    config = (config or GanConfig()).validate()
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(images)
    m = config.batch_size
    if n < m:
        raise ValueError(f"train_gan: need at least batch_size={m} real samples, got {n}")
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    gen = Generator(noise_dim=config.noise_dim, seed=config.seed * 2 + 1)
    disc = Discriminator(seed=config.seed * 2 + 2)
    rng = np.random.default_rng(seeds[0])
    g_names = sorted(gen.params)
    d_names = sorted(disc.params)
    g_state = nx.AdamState(lr=config.lr_generator).init([gen.params[k] for k in g_names])
    d_state = nx.AdamState(lr=config.lr_discriminator).init([disc.params[k] for k in d_names])
    trace = []
    for it in range(config.iterations):
        ls = lc = s_real_mean = s_fake_mean = 0.0
        for _ in range(config.disc_steps):
            idx = rng.integers(0, n, size=m)
            z = rng.standard_normal((m, config.noise_dim))
            fake_labels = rng.integers(0, NUM_CLASSES, size=m)
            fake = gen.forward(z, fake_labels)
            s_real, cl_real, cache_r = disc.forward(images[idx], want_cache=True)
            s_fake, cl_fake, cache_f = disc.forward(fake, want_cache=True)
            ls, lc = acgan_losses(s_real, nx.softmax_batch(cl_real), labels[idx],
                                  s_fake, nx.softmax_batch(cl_fake), fake_labels)
            if not (np.isfinite(ls) and np.isfinite(lc)):
                raise GanTrainingError(f"non-finite discriminator loss at iteration {it}")
            # maximize L_S + L_C == minimize the negation
            dsrc_r = -np.where(_inside_clamp(s_real), 1.0 - s_real, 0.0) / m
            dsrc_f = np.where(_inside_clamp(1.0 - s_fake), s_fake, 0.0) / m
            dcls_r = _class_grad(cl_real, labels[idx], 1.0, m)
            dcls_f = _class_grad(cl_fake, fake_labels, 1.0, m)
            gr, _ = disc.backward(cache_r, dsrc_r, dcls_r)
            gf, _ = disc.backward(cache_f, dsrc_f, dcls_f)
            nx.adam_step(
                [disc.params[k] for k in d_names],
                [gr[k] + gf[k] for k in d_names],
                d_state,
            )
            s_real_mean = float(np.mean(s_real))
            s_fake_mean = float(np.mean(s_fake))
        for _ in range(config.disc_steps):
            z = rng.standard_normal((m, config.noise_dim))
            fake_labels = rng.integers(0, NUM_CLASSES, size=m)
            fake, g_cache = gen.forward(z, fake_labels, want_cache=True)
            s_fake, cl_fake, d_cache = disc.forward(fake, want_cache=True)
            # minimize log(1 - s_fake) - log p_c(fake)
            dsrc = -np.where(_inside_clamp(1.0 - s_fake), s_fake, 0.0) / m
            dcls = _class_grad(cl_fake, fake_labels, 1.0, m)
            _, dimg = disc.backward(d_cache, dsrc, dcls)
            g_grads = gen.backward(g_cache, dimg)
            if any(not np.all(np.isfinite(g)) for g in g_grads.values()):
                raise GanTrainingError(f"non-finite generator gradient at iteration {it}")
            nx.adam_step(
                [gen.params[k] for k in g_names],
                [g_grads[k] for k in g_names],
                g_state,
            )
        trace.append((it, ls, lc, s_real_mean, s_fake_mean))
    return gen, disc, trace


def generate_samples(gen, class_id, count, seed):
    """count conditioned samples from distinct z draws; deterministic per seed."""
    rng = np.random.default_rng(seed)
    if count == 0:
        return np.zeros((0, 28, 28, 1))
    z = rng.standard_normal((count, gen.noise_dim))
    labels = np.full(count, class_id, dtype=np.int64)
    return gen.forward(z, labels)


def fake_channel_set(p_img, q_img):
    """All nine derived channels from a generated (p, q) image pair."""
    field = FlowField(p=np.asarray(p_img)[:, :, 0], q=np.asarray(q_img)[:, :, 0])
    ch = derive_channels(field)
    return {name: ch.channel(name)[:, :, None] for name in
            ("p", "q", "rho", "theta", "eps_mag", "eps_xx", "eps_xy", "eps_yx")}


def balance_dataset(items, generators, seed=0):
    """Append generated samples until every class matches the max real count.

    items: list of (channel dict, label, is_fake) or (channel dict, label);
    generators: {"p": Generator, "q": Generator}. Fakes are flagged True so
    evaluation can keep them out of test folds.
    """
    for ch in ("p", "q"):
        if ch not in generators:
            raise KeyError(f"balance_dataset: missing generator for channel {ch!r}")
    norm = []
    for item in items:
        ch, label = item[0], item[1]
        flag = item[2] if len(item) > 2 else False
        norm.append((ch, int(label), bool(flag)))
    counts = np.zeros(NUM_CLASSES, dtype=int)
    for _, label, _ in norm:
        counts[label] += 1
    target = counts.max()
    out = list(norm)
    seeds = np.random.SeedSequence(seed).spawn(NUM_CLASSES)
    for c in range(NUM_CLASSES):
        need = int(target - counts[c])
        if need <= 0:
            continue
        sub = seeds[c].spawn(2)
        fake_p = generate_samples(generators["p"], c, need, sub[0])
        fake_q = generate_samples(generators["q"], c, need, sub[1])
        for i in range(need):
            out.append((fake_channel_set(fake_p[i], fake_q[i]), c, True))
    return out


def save_gan(gen, disc, directory):
    tensorio.save_params(
        directory,
        {f"gen.{k}": v for k, v in gen.params.items()}
        | {f"disc.{k}": v for k, v in disc.params.items()},
        dtype=np.float64,
    )


def load_gan(directory, noise_dim=100):
    params = tensorio.load_params(directory)
    gen = Generator(noise_dim=noise_dim)
    disc = Discriminator()
    for k in gen.params:
        gen.params[k] = params[f"gen.{k}"]
    for k in disc.params:
        disc.params[k] = params[f"disc.{k}"]
    return gen, disc
