"""LOSOCV protocol, metrics, and experiment orchestration.

One fold per subject: that subject's videos are the test set and everything
else trains. Predictions pool into a single 3x3 confusion matrix (rows true,
columns predicted); accuracy is the pooled trace ratio and the headline F1 is
the macro average of per-class one-vs-rest F1 scores, with zero-denominator
precision/recall/F1 defined as 0. Per-fold accuracies are kept alongside so
the subject-averaged reading stays available.
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mexflow import biwoof as bw
from mexflow import cnn as cnnmod
from mexflow import gan as ganmod
from mexflow.derivatives import derive_channels
from mexflow.flow import FlowConfig, estimate_flow
from mexflow.imaging import NUM_CLASSES, load_pgm, normalize_to_input


@dataclass
class FoldPlan:
    folds: list  # (test subject key, train video ids, test video ids)

    def __iter__(self):
        return iter(self.folds)

    def __len__(self):
        return len(self.folds)


def losocv_split(samples):
    """One fold per distinct subject, ordered lexicographically by subject key."""
    subjects = sorted({s.subject_key for s in samples})
    if len(subjects) < 2:
        raise ValueError(f"losocv_split: need >= 2 subjects, got {len(subjects)}")
    folds = []
    for subj in subjects:
        test = [s.video_id for s in samples if s.subject_key == subj]
        train = [s.video_id for s in samples if s.subject_key != subj]
        folds.append((subj, train, test))
    return FoldPlan(folds=folds)


def accumulate(predictions):
    """(true, predicted) pairs -> 3x3 count matrix."""
    cm = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    for true, pred in predictions:
        if not (0 <= true < NUM_CLASSES and 0 <= pred < NUM_CLASSES):
            raise ValueError(f"accumulate: class pair ({true}, {pred}) out of range")
        cm[true, pred] += 1
    return cm


@dataclass
class MetricsReport:
    accuracy: float
    precision: list
    recall: list
    f1: list
    macro_f1: float
    confusion: np.ndarray
    per_fold: dict = field(default_factory=dict)  # subject -> fold accuracy

    @property
    def subject_averaged_accuracy(self):
        if not self.per_fold:
            return self.accuracy
        return float(np.mean(list(self.per_fold.values())))


def compute_metrics(cm, per_fold=None):
    """Accuracy, one-vs-rest precision/recall/F1, macro-F1 from a confusion matrix."""
    cm = np.asarray(cm)
    total = cm.sum()
    if total == 0:
        raise ValueError("compute_metrics: empty confusion matrix")
    accuracy = float(np.trace(cm) / total)
    precision, recall, f1 = [], [], []
    for c in range(cm.shape[0]):
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c, :].sum() - tp
        prec = float(tp / (tp + fp)) if tp + fp > 0 else 0.0
        rec = float(tp / (tp + fn)) if tp + fn > 0 else 0.0
        f = 2.0 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        precision.append(prec)
        recall.append(rec)
        f1.append(f)
    return MetricsReport(
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        f1=f1,
        macro_f1=float(np.mean(f1)),
        confusion=cm,
        per_fold=dict(per_fold or {}),
    )


def silhouette_score(points, labels):
    """Mean silhouette over samples (euclidean); clusters of one score 0."""
    x = np.asarray(points, dtype=np.float64)
    y = np.asarray(labels)
    n = len(x)
    d = np.sqrt(np.maximum(
        np.sum(x * x, axis=1)[:, None] + np.sum(x * x, axis=1)[None, :] - 2.0 * (x @ x.T),
        0.0,
    ))
    scores = np.zeros(n)
    classes = np.unique(y)
    for i in range(n):
        own = y[i]
        same = y == own
        n_same = same.sum() - 1
        if n_same == 0:
            continue
        a = d[i][same].sum() / n_same
        b = np.inf
        for c in classes:
            if c == own:
                continue
            mask = y == c
            if mask.any():
                b = min(b, d[i][mask].mean())
        scores[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# experiment pipeline
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    flow: FlowConfig = field(default_factory=FlowConfig)
    extractor: str = "cnn"  # "cnn" | "biwoof_svm" | "oracle"
    stream_spec: cnnmod.StreamSpec | None = None
    train: cnnmod.TrainConfig | None = None
    biwoof: bw.BiwoofConfig | None = None
    svm_regularization: float = 1e-4
    svm_epochs: int = 120
    augment: bool = False
    gan: ganmod.GanConfig | None = None
    input_size: int = 28
    seed: int = 0
    oracle_labels: dict | None = None  # video id -> class, for the leak oracle

    def resolved(self):
        if self.extractor not in ("cnn", "biwoof_svm", "oracle"):
            raise ValueError(f"unknown extractor {self.extractor!r}")
        if self.extractor == "cnn" and self.stream_spec is None:
            raise ValueError("cnn extractor needs a stream_spec")
        if self.extractor == "oracle" and self.oracle_labels is None:
            raise ValueError("oracle extractor needs oracle_labels")
        return self


@dataclass
class ExperimentReport:
    config_echo: dict
    metrics: MetricsReport
    predictions: list  # (video_id, subject, true, predicted)
    failures: list  # (subject, message)
    fold_audit: dict  # subject -> {"train_fakes": int, "test_fakes": int}
    epoch_metrics: dict = field(default_factory=dict)  # checkpoint epoch -> MetricsReport

    @property
    def ok(self):
        return not self.failures


def _sample_channels(record, flow_config):
    """Onset->apex flow and its derived channels for one sample."""
    if record.apex_index is None:
        raise ValueError(f"{record.video_id}: no apex index; spot it first")
    onset = load_pgm(record.frame_paths[record.onset_index])
    apex = load_pgm(record.frame_paths[record.apex_index])
    field_ = estimate_flow(onset, apex, flow_config)
    return derive_channels(field_)


def _channel_job(args):
    record, flow_config = args
    try:
        return record.video_id, _sample_channels(record, flow_config), None
    except Exception as exc:
        return record.video_id, None, f"flow failed: {exc}"


def build_channel_cache(samples, flow_config, jobs=1):
    """Per-sample derived channels, keyed by video id; failures listed apart.

    Flow jobs share nothing and may run in worker processes (jobs > 1); the
    merge is keyed so results are identical regardless of completion order.
    """
    tasks = [(r, flow_config) for r in samples]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_channel_job, tasks))
    else:
        results = [_channel_job(t) for t in tasks]
    cache = {}
    failures = []
    for vid, channels, error in results:
        if error is None:
            cache[vid] = channels
        else:
            failures.append((vid, error))
    return cache, failures


def _channel_dict(channels, names, size):
    return {name: normalize_to_input(channels.channel(name), size) for name in names}


def run_experiment(samples, config, channel_cache=None, prior_failures=()):
    """Full LOSOCV experiment; flow is computed once per sample and folds train
    independently (GAN augmentation, when enabled, trains only on each fold's
    training items). Per-sample and per-fold failures are recorded and the run
    continues; CNN checkpoint epochs additionally yield per-epoch metrics."""
    config = config.resolved()
    plan = losocv_split(samples)
    by_id = {s.video_id: s for s in samples}
    failures = list(prior_failures)
    if config.extractor == "oracle":
        cache = {rec.video_id: None for rec in samples}
    elif channel_cache is not None:
        cache = channel_cache
    else:
        cache, flow_failures = build_channel_cache(samples, config.flow)
        failures.extend(flow_failures)
    predictions = []
    epoch_predictions = {}
    per_fold = {}
    fold_audit = {}
    fold_seeds = np.random.SeedSequence(config.seed).spawn(len(plan))
    for fold_i, (subject, train_ids, test_ids) in enumerate(plan):
        train_ids = [v for v in train_ids if v in cache]
        test_ids = [v for v in test_ids if v in cache]
        if not test_ids:
            continue
        try:
            fold_preds, audit, fold_epoch_preds = _run_fold(
                by_id, cache, train_ids, test_ids, config, fold_seeds[fold_i]
            )
        except Exception as exc:
            failures.append((subject, f"fold failed: {exc}"))
            continue
        fold_audit[subject] = audit
        correct = 0
        for vid, pred in fold_preds:
            true = by_id[vid].emotion
            predictions.append((vid, subject, true, pred))
            correct += int(pred == true)
        per_fold[subject] = correct / len(fold_preds)
        for epoch, preds in fold_epoch_preds.items():
            epoch_predictions.setdefault(epoch, []).extend(
                (by_id[vid].emotion, pred) for vid, pred in preds
            )
    if not predictions:
        raise RuntimeError(f"run_experiment: no fold produced predictions; failures: {failures}")
    cm = accumulate([(t, p) for _, _, t, p in predictions])
    metrics = compute_metrics(cm, per_fold=per_fold)
    epoch_metrics = {
        epoch: compute_metrics(accumulate(pairs))
        for epoch, pairs in sorted(epoch_predictions.items())
    }
    return ExperimentReport(
        config_echo=config_echo(config),
        metrics=metrics,
        predictions=sorted(predictions),
        failures=failures,
        fold_audit=fold_audit,
        epoch_metrics=epoch_metrics,
    )


def _run_fold(by_id, cache, train_ids, test_ids, config, seed_seq):
    fold_seed = int(seed_seq.generate_state(1)[0] % (2**31))
    audit = {"train_fakes": 0, "test_fakes": 0, "train_total": 0}
    if config.extractor == "oracle":
        preds = [(vid, int(config.oracle_labels[vid])) for vid in test_ids]
        audit["train_total"] = len(train_ids)
        return preds, audit, {}

    if config.extractor == "cnn":
        names = tuple(config.stream_spec.channels)
        train_items = [
            (_channel_dict(cache[vid], names, config.input_size), by_id[vid].emotion, False)
            for vid in train_ids
        ]
        if config.augment:
            train_items = _augment(train_items, config, fold_seed)
        audit["train_total"] = len(train_items)
        audit["train_fakes"] = sum(1 for _, _, fake in train_items if fake)
        inputs = [np.stack([item[0][ch] for item in train_items]) for ch in names]
        labels = np.asarray([item[1] for item in train_items])
        net = cnnmod.build_network(config.stream_spec, seed=fold_seed)
        tc = config.train or cnnmod.TrainConfig()
        test_inputs = [
            np.stack([_channel_dict(cache[vid], names, config.input_size)[ch] for vid in test_ids])
            for ch in names
        ]
        checkpoints = tuple(e for e in (tc.checkpoint_epochs or ()) if 0 < e <= tc.epochs)
        epoch_preds = {}

        def hook(epoch, model):
            if epoch > 0:
                epoch_preds[epoch] = [
                    (vid, int(p)) for vid, p in zip(test_ids, model.predict(test_inputs))
                ]

        net.train(
            inputs, labels,
            cnnmod.TrainConfig(
                epochs=tc.epochs, learning_rate=tc.learning_rate,
                batch_size=tc.batch_size, seed=fold_seed,
                checkpoint_epochs=checkpoints,
            ),
            checkpoint_hook=hook if checkpoints else None,
        )
        pred = net.predict(test_inputs)
        return list(zip(test_ids, (int(p) for p in pred))), audit, epoch_preds

    # biwoof + svm
    bw_config = config.biwoof or bw.BiwoofConfig()
    if config.augment:
        names = ("p", "q")
        train_items = [
            (_channel_dict(cache[vid], names, config.input_size), by_id[vid].emotion, False)
            for vid in train_ids
        ]
        train_items = _augment(train_items, config, fold_seed)
        audit["train_total"] = len(train_items)
        audit["train_fakes"] = sum(1 for _, _, fake in train_items if fake)
        feats, labels = [], []
        for channels, label, _ in train_items:
            feats.append(bw.extract_biwoof(_as_channelset(channels), bw_config))
            labels.append(label)
        test_feats = {
            vid: bw.extract_biwoof(
                _as_channelset(_channel_dict(cache[vid], names, config.input_size)), bw_config
            )
            for vid in test_ids
        }
    else:
        audit["train_total"] = len(train_ids)
        feats = [bw.extract_biwoof(cache[vid], bw_config) for vid in train_ids]
        labels = [by_id[vid].emotion for vid in train_ids]
        test_feats = {vid: bw.extract_biwoof(cache[vid], bw_config) for vid in test_ids}
    model = bw.train_svm(
        feats, labels,
        regularization=config.svm_regularization,
        epochs=config.svm_epochs,
        seed=fold_seed,
    )
    preds = [(vid, bw.predict_svm(model, test_feats[vid])[0]) for vid in test_ids]
    return preds, audit, {}


def _augment(train_items, config, fold_seed):
    """Train per-channel generators on this fold's items only, then balance."""
    gc = config.gan or ganmod.GanConfig()
    generators = {}
    for ci, ch in enumerate(("p", "q")):
        images = np.stack([item[0][ch] for item in train_items])
        labels = np.asarray([item[1] for item in train_items])
        cfg = ganmod.GanConfig(
            noise_dim=gc.noise_dim, disc_steps=gc.disc_steps,
            iterations=gc.iterations, batch_size=min(gc.batch_size, len(images)),
            lr_generator=gc.lr_generator, lr_discriminator=gc.lr_discriminator,
            seed=fold_seed + ci,
        )
        gen, _, _ = ganmod.train_gan(images, labels, cfg)
        generators[ch] = gen
    return ganmod.balance_dataset(train_items, generators, seed=fold_seed)


class _FakeChannelSet:
    def __init__(self, mapping):
        self._m = mapping

    def channel(self, name):
        return self._m[name][:, :, 0]

    @property
    def theta(self):
        return self._m["theta"][:, :, 0]

    @property
    def rho(self):
        return self._m["rho"][:, :, 0]

    @property
    def eps_mag(self):
        return self._m["eps_mag"][:, :, 0]


def _as_channelset(channel_dict):
    if len(channel_dict) == 2:  # only p, q present: derive the rest
        channel_dict = ganmod.fake_channel_set(channel_dict["p"], channel_dict["q"])
    return _FakeChannelSet(channel_dict)


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

def config_echo(config):
    doc = {
        "extractor": config.extractor,
        "seed": config.seed,
        "input_size": config.input_size,
        "augment": config.augment,
        "flow": {k: getattr(config.flow, k) for k in FlowConfig.__dataclass_fields__},
    }
    if config.stream_spec is not None:
        doc["streams"] = list(config.stream_spec.channels)
        doc["fusion"] = config.stream_spec.fusion
    if config.train is not None:
        doc["train"] = {
            "epochs": config.train.epochs,
            "learning_rate": config.train.learning_rate,
            "batch_size": config.train.batch_size,
        }
    if config.biwoof is not None:
        doc["biwoof"] = {
            "blocks_per_side": config.biwoof.blocks_per_side,
            "orientation_bins": config.biwoof.orientation_bins,
        }
    if config.extractor == "biwoof_svm":
        doc["svm"] = {"regularization": config.svm_regularization, "epochs": config.svm_epochs}
    if config.augment and config.gan is not None:
        doc["gan"] = {
            "iterations": config.gan.iterations,
            "disc_steps": config.gan.disc_steps,
            "batch_size": config.gan.batch_size,
            "noise_dim": config.gan.noise_dim,
            "lr_generator": config.gan.lr_generator,
            "lr_discriminator": config.gan.lr_discriminator,
        }
    return doc


def emit_report(report, out_dir):
    """Write metrics.csv, confusion.csv, folds.csv, predictions.csv, config.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    m = report.metrics
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        w.writerow(["accuracy", repr(m.accuracy)])
        w.writerow(["macro_f1", repr(m.macro_f1)])
        w.writerow(["subject_averaged_accuracy", repr(m.subject_averaged_accuracy)])
        for c in range(NUM_CLASSES):
            w.writerow([f"precision_{c}", repr(m.precision[c])])
            w.writerow([f"recall_{c}", repr(m.recall[c])])
            w.writerow([f"f1_{c}", repr(m.f1[c])])
    with open(out / "confusion.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred"] + [str(c) for c in range(NUM_CLASSES)])
        for c in range(NUM_CLASSES):
            w.writerow([str(c)] + [str(int(v)) for v in m.confusion[c]])
    with open(out / "folds.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "accuracy", "train_fakes", "train_total"])
        for subj in sorted(m.per_fold):
            audit = report.fold_audit.get(subj, {})
            w.writerow([
                subj, repr(m.per_fold[subj]),
                str(audit.get("train_fakes", 0)), str(audit.get("train_total", 0)),
            ])
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["video_id", "subject", "true", "predicted"])
        for vid, subj, true, pred in report.predictions:
            w.writerow([vid, subj, str(true), str(pred)])
    if report.epoch_metrics:
        with open(out / "epochs.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "accuracy", "macro_f1"])
            for epoch, em in report.epoch_metrics.items():
                w.writerow([str(epoch), repr(em.accuracy), repr(em.macro_f1)])
    with open(out / "config.json", "w") as fh:
        json.dump(report.config_echo, fh, indent=1, sort_keys=True)
    if report.failures:
        with open(out / "failures.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scope", "message"])
            for scope, message in report.failures:
                w.writerow([scope, message])


def write_sweep_table(rows, columns, path):
    """Table-style CSV: one row per sweep key, (Acc, F1) pair per column group."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["key"]
        for col in columns:
            header += [f"{col}_acc", f"{col}_f1"]
        w.writerow(header)
        for key, cells in rows:
            line = [str(key)]
            for col in columns:
                acc, f1 = cells.get(col, ("", ""))
                line += [repr(acc) if acc != "" else "", repr(f1) if f1 != "" else ""]
            w.writerow(line)


def write_pca_scatter(ids, labels, projected, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "class", "pc1", "pc2"])
        for sid, label, row in zip(ids, labels, projected):
            w.writerow([sid, str(int(label)), repr(float(row[0])), repr(float(row[1]))])
