"""Command-line front door: reproducible batch runs over JSON configs.

Every subcommand reads one JSON config, writes into --out, and echoes the
resolved config (seed included) to <out>/config.json so a run directory always
records exactly what produced it. Outputs are staged in a temporary sibling
directory and moved in on success, so failed runs leave nothing behind.
Fixed seeds give byte-identical output trees.
"""

import argparse
import csv
import json
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from mexflow import apex as apexmod
from mexflow import biwoof as bw
from mexflow import cnn as cnnmod
from mexflow import evaluation as ev
from mexflow import gan as ganmod
from mexflow import synthetic
from mexflow.derivatives import derive_channels, export_channel_pgm, save_channel
from mexflow.flow import config_from_dict, estimate_flow, save_flow
from mexflow.imaging import load_manifest, load_pgm, normalize_to_input, save_pgm
from mexflow.numerics import pca_fit, pca_transform


def _resolve_seed(args, config):
    if args.seed is not None:
        return args.seed
    if "seed" in config:
        return int(config["seed"])
    env = os.environ.get("MEXFLOW_SEED")
    if env is not None:
        return int(env)
    return 0


def _flow_config(config):
    return config_from_dict(config.get("flow", {}))


def _echo_config(config, out_dir):
    with open(Path(out_dir) / "config.json", "w") as fh:
        json.dump(config, fh, indent=1, sort_keys=True)


def _sample_channel_job(args):
    """Worker: one sample's onset->apex derived channels (parallel-safe)."""
    video_id, onset_path, apex_path, flow_dict = args
    cfg = config_from_dict(flow_dict)
    field = estimate_flow(load_pgm(onset_path), load_pgm(apex_path), cfg)
    return video_id, field


def _compute_flows(records, flow_dict, jobs):
    tasks = []
    for rec in records:
        if rec.apex_index is None:
            raise ValueError(f"{rec.video_id}: manifest has no apex_index; run `spot` first")
        tasks.append(
            (rec.video_id, rec.frame_paths[rec.onset_index], rec.frame_paths[rec.apex_index], flow_dict)
        )
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sample_channel_job, tasks))
    else:
        results = [_sample_channel_job(t) for t in tasks]
    return dict(results)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_generate(args, config, out_dir):
    seed = _resolve_seed(args, config)
    spec = synthetic.SyntheticSpec(
        subjects=int(config.get("subjects", 6)),
        videos_per_subject=int(config.get("videos_per_subject", 3)),
        frames_per_video=int(config.get("frames_per_video", 40)),
        image_size=int(config.get("image_size", 64)),
        motion_amplitude=float(config.get("motion_amplitude", 1.5)),
        noise_sigma=float(config.get("noise_sigma", 0.005)),
        seed=seed,
    )
    records, _ = synthetic.generate_synthetic_corpus(spec, out_dir)
    config["seed"] = seed
    print(f"generated {len(records)} videos ({spec.subjects} subjects)")
    return 0


def _cmd_flow(args, config, out_dir):
    records = load_manifest(config["manifest"])
    flow_dict = config.get("flow", {})
    fields = _compute_flows(records, flow_dict, args.jobs)
    channels = config.get("channels", [])
    preview = bool(config.get("pgm_preview", False))
    for rec in records:
        field = fields[rec.video_id]
        save_flow(field, out_dir / f"{rec.video_id}.mefl")
        if channels or preview:
            derived = derive_channels(field)
            for name in channels:
                save_channel(derived.channel(name), out_dir / f"{rec.video_id}.{name}.mech")
                if preview:
                    export_channel_pgm(derived.channel(name), out_dir / f"{rec.video_id}.{name}.pgm")
    config["seed"] = _resolve_seed(args, config)
    print(f"wrote flow for {len(records)} videos")
    return 0


def _spot_job(task):
    video_id, frame_paths, onset, truth_apex, flow_dict, smooth = task
    frames = [load_pgm(p) for p in frame_paths]
    cfg = config_from_dict(flow_dict)
    signal = apexmod.motion_signal(frames, cfg, onset_index=onset, smooth_window=smooth)
    result = apexmod.spot_apex_dc(signal)
    return video_id, result.apex_index, truth_apex


def _cmd_spot(args, config, out_dir):
    records = load_manifest(config["manifest"])
    flow_dict = config.get("flow", {"tvl1_warps": 3, "tvl1_inner": 15})
    smooth = int(config.get("smooth_window", 1))
    tasks = [
        (r.video_id, r.frame_paths, r.onset_index, r.apex_index, flow_dict, smooth)
        for r in records
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_spot_job, tasks))
    else:
        rows = [_spot_job(t) for t in tasks]
    with open(out_dir / "spotted.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["video_id", "spotted_apex", "truth_apex", "abs_error"])
        for video_id, spotted, truth in sorted(rows):
            if truth is None:
                w.writerow([video_id, str(spotted), "", ""])
            else:
                w.writerow([video_id, str(spotted), str(truth), str(abs(spotted - truth))])
    config["seed"] = _resolve_seed(args, config)
    print(f"spotted {len(rows)} videos")
    return 0


def _biwoof_features(records, config, jobs):
    fields = _compute_flows(records, config.get("flow", {}), jobs)
    bw_config = bw.BiwoofConfig(
        blocks_per_side=int(config.get("biwoof", {}).get("blocks_per_side", 5)),
        orientation_bins=int(config.get("biwoof", {}).get("orientation_bins", 8)),
    )
    rows = []
    for rec in records:
        channels = derive_channels(fields[rec.video_id])
        rows.append((rec.video_id, rec.emotion, bw.extract_biwoof(channels, bw_config)))
    return rows, bw_config


def _cmd_extract(args, config, out_dir):
    records = load_manifest(config["manifest"])
    rows, _ = _biwoof_features(records, config, args.jobs)
    bw.save_features_csv(rows, out_dir / "features.csv")
    config["seed"] = _resolve_seed(args, config)
    print(f"extracted {len(rows)} feature vectors")
    return 0


def _read_features_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for line in reader:
            rows.append((line[0], int(line[1]), np.asarray([float(v) for v in line[2:]])))
    return rows


def _cmd_train_svm(args, config, out_dir):
    seed = _resolve_seed(args, config)
    if "features" in config:
        rows = _read_features_csv(config["features"])
    else:
        records = load_manifest(config["manifest"])
        rows, _ = _biwoof_features(records, config, args.jobs)
    feats = [r[2] for r in rows]
    labels = [r[1] for r in rows]
    model = bw.train_svm(
        feats, labels,
        regularization=float(config.get("regularization", 1e-4)),
        epochs=int(config.get("epochs", 120)),
        seed=seed,
    )
    bw.save_svm(model, out_dir / "model.msvm")
    correct = sum(1 for f, y in zip(feats, labels) if bw.predict_svm(model, f)[0] == y)
    with open(out_dir / "train_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["samples", "train_accuracy"])
        w.writerow([str(len(feats)), repr(correct / len(feats))])
    config["seed"] = seed
    print(f"trained SVM on {len(feats)} samples, train accuracy {correct / len(feats):.3f}")
    return 0


def _stack_inputs(records, fields, names, size):
    per_channel = {name: [] for name in names}
    for rec in records:
        derived = derive_channels(fields[rec.video_id])
        for name in names:
            per_channel[name].append(normalize_to_input(derived.channel(name), size))
    return [np.stack(per_channel[name]) for name in names]


def _cmd_train_cnn(args, config, out_dir):
    seed = _resolve_seed(args, config)
    records = load_manifest(config["manifest"])
    fields = _compute_flows(records, config.get("flow", {}), args.jobs)
    spec = cnnmod.StreamSpec(
        channels=tuple(config.get("streams", ["p", "q"])),
        fusion=config.get("fusion", "concat"),
    )
    size = int(config.get("input_size", 28))
    inputs = _stack_inputs(records, fields, spec.channels, size)
    labels = np.asarray([r.emotion for r in records])
    tc = config.get("train", {})
    train_config = cnnmod.TrainConfig(
        epochs=int(tc.get("epochs", 500)),
        learning_rate=float(tc.get("learning_rate", 1e-4)),
        batch_size=int(tc.get("batch_size", 32)),
        seed=seed,
        checkpoint_epochs=tuple(config.get("checkpoints", [])),
    )
    net = cnnmod.build_network(spec, seed=seed)
    want_pca = bool(config.get("pca", False))
    ids = [r.video_id for r in records]

    def hook(epoch, model):
        model.save_checkpoint(out_dir / "checkpoints" / f"epoch_{epoch}")
        if want_pca:
            feats = model.extract_features(inputs)
            pca = pca_fit(feats, 2)
            ev.write_pca_scatter(
                ids, labels, pca_transform(pca, feats), out_dir / f"pca_epoch_{epoch}.csv"
            )

    trace = net.train(inputs, labels, train_config, checkpoint_hook=hook)
    cnnmod.save_trace_csv(trace, out_dir / "trace.csv")
    net.save_checkpoint(out_dir / "checkpoints" / "final")
    config["seed"] = seed
    print(f"trained CNN for {train_config.epochs} epochs; final train acc {trace[-1][2]:.3f}")
    return 0


def _cmd_train_gan(args, config, out_dir):
    seed = _resolve_seed(args, config)
    records = load_manifest(config["manifest"])
    fields = _compute_flows(records, config.get("flow", {}), args.jobs)
    channel = config.get("channel", "p")
    size = int(config.get("input_size", 28))
    images = []
    labels = []
    for rec in records:
        derived = derive_channels(fields[rec.video_id])
        images.append(normalize_to_input(derived.channel(channel), size))
        labels.append(rec.emotion)
    gc = config.get("gan", {})
    gan_config = ganmod.GanConfig(
        noise_dim=int(gc.get("noise_dim", 100)),
        disc_steps=int(gc.get("disc_steps", 1)),
        iterations=int(gc.get("iterations", 2000)),
        batch_size=min(int(gc.get("batch_size", 32)), len(images)),
        lr_generator=float(gc.get("lr_generator", 1e-3)),
        lr_discriminator=float(gc.get("lr_discriminator", 1e-4)),
        seed=seed,
    )
    gen, disc, trace = ganmod.train_gan(np.stack(images), np.asarray(labels), gan_config)
    ganmod.save_gan(gen, disc, out_dir / "checkpoint")
    with open(out_dir / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "l_s", "l_c", "mean_source_real", "mean_source_fake"])
        for row in trace:
            w.writerow([str(row[0])] + [repr(v) for v in row[1:]])
    dump = int(config.get("sample_dump", 0))
    if dump:
        samples_dir = out_dir / "samples"
        samples_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "samples.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "class", "seed", "z_index"])
            for c in range(3):
                fakes = ganmod.generate_samples(gen, c, dump, seed + c)
                for i in range(dump):
                    name = f"fake_c{c}_{i:03d}.pgm"
                    save_pgm((fakes[i, :, :, 0] + 1.0) / 2.0, samples_dir / name)
                    w.writerow([f"samples/{name}", str(c), str(seed + c), str(i)])
    config["seed"] = seed
    print(f"trained GAN on channel {channel} for {gan_config.iterations} iterations")
    return 0


def _experiment_config(config, seed):
    extractor = config.get("extractor", "cnn")
    spec = None
    if extractor == "cnn":
        spec = cnnmod.StreamSpec(
            channels=tuple(config.get("streams", ["p", "q"])),
            fusion=config.get("fusion", "concat"),
        )
    tc = config.get("train", {})
    train_config = cnnmod.TrainConfig(
        epochs=int(tc.get("epochs", 300)),
        learning_rate=float(tc.get("learning_rate", 1e-4)),
        batch_size=int(tc.get("batch_size", 32)),
        seed=seed,
        checkpoint_epochs=tuple(tc.get("checkpoints", ())),
    )
    bw_conf = config.get("biwoof", {})
    gan_conf = config.get("gan", {})
    return ev.ExperimentConfig(
        flow=_flow_config(config),
        extractor=extractor,
        stream_spec=spec,
        train=train_config,
        biwoof=bw.BiwoofConfig(
            blocks_per_side=int(bw_conf.get("blocks_per_side", 5)),
            orientation_bins=int(bw_conf.get("orientation_bins", 8)),
        ),
        svm_regularization=float(config.get("svm", {}).get("regularization", 1e-4)),
        svm_epochs=int(config.get("svm", {}).get("epochs", 120)),
        augment=bool(config.get("augment", False)),
        gan=ganmod.GanConfig(
            noise_dim=int(gan_conf.get("noise_dim", 100)),
            disc_steps=int(gan_conf.get("disc_steps", 1)),
            iterations=int(gan_conf.get("iterations", 300)),
            batch_size=int(gan_conf.get("batch_size", 16)),
            lr_generator=float(gan_conf.get("lr_generator", 1e-3)),
            lr_discriminator=float(gan_conf.get("lr_discriminator", 1e-4)),
            seed=seed,
        ),
        input_size=int(config.get("input_size", 28)),
        seed=seed,
    )


def _cmd_evaluate(args, config, out_dir):
    seed = _resolve_seed(args, config)
    records = load_manifest(config["manifest"])
    sweep = config.get("sweep")
    if not sweep:
        exp_config = _experiment_config(config, seed)
        cache = None
        flow_failures = []
        if exp_config.extractor != "oracle":
            ok_records = [r for r in records if r.apex_index is not None]
            flow_failures = [
                (r.video_id, "no apex index; run `spot` first")
                for r in records
                if r.apex_index is None
            ]
            cache, failed = ev.build_channel_cache(ok_records, exp_config.flow, jobs=args.jobs)
            flow_failures.extend(failed)
        report = ev.run_experiment(
            records, exp_config, channel_cache=cache, prior_failures=flow_failures
        )
        ev.emit_report(report, out_dir)
        config["seed"] = seed
        print(
            f"accuracy {report.metrics.accuracy:.4f} macro-F1 {report.metrics.macro_f1:.4f} "
            f"({len(report.predictions)} predictions, {len(report.failures)} failures)"
        )
        return 0 if report.ok else 1
    methods = sweep.get("flow_methods", ["tvl1"])
    blocks = sweep.get("blocks_per_side", [5])
    rows = []
    long_rows = []
    any_failed = False
    caches = {}
    for method in methods:
        flow_cfg = config_from_dict(dict(config.get("flow", {}), method=method))
        caches[method], _ = ev.build_channel_cache(records, flow_cfg, jobs=args.jobs)
    for b in blocks:
        cells = {}
        for method in methods:
            cell_config = dict(config)
            cell_config.pop("sweep", None)
            cell_config["extractor"] = "biwoof_svm"
            cell_config["flow"] = dict(cell_config.get("flow", {}), method=method)
            cell_config["biwoof"] = dict(cell_config.get("biwoof", {}), blocks_per_side=b)
            report = ev.run_experiment(
                records, _experiment_config(cell_config, seed), channel_cache=caches[method]
            )
            any_failed = any_failed or not report.ok
            cells[method] = (report.metrics.accuracy, report.metrics.macro_f1)
            long_rows.append((method, b, report.metrics.accuracy, report.metrics.macro_f1))
            ev.emit_report(report, out_dir / f"run_b{b}_{method}")
        rows.append((f"{b}x{b}", cells))
    ev.write_sweep_table(rows, methods, out_dir / "table.csv")
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["flow_method", "blocks_per_side", "accuracy", "macro_f1"])
        for method, b, acc, f1 in long_rows:
            w.writerow([method, str(b), repr(acc), repr(f1)])
    config["seed"] = seed
    print(f"sweep table with {len(rows)} rows x {len(methods)} methods")
    return 1 if any_failed else 0


def _cmd_report(args, config, out_dir):
    runs = config["runs"]
    row_key = config.get("row_key", "biwoof.blocks_per_side")
    column_key = config.get("column_key", "flow.method")

    def dig(doc, dotted):
        cur = doc
        for part in dotted.split("."):
            cur = cur[part]
        return cur

    cells_by_row = {}
    columns = []
    for run in runs:
        run = Path(run)
        with open(run / "config.json") as fh:
            run_config = json.load(fh)
        metrics = {}
        with open(run / "metrics.csv", newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for name, value in reader:
                metrics[name] = float(value)
        row = str(dig(run_config, row_key))
        col = str(dig(run_config, column_key))
        if col not in columns:
            columns.append(col)
        cells_by_row.setdefault(row, {})[col] = (metrics["accuracy"], metrics["macro_f1"])
    rows = [(k, cells_by_row[k]) for k in sorted(cells_by_row)]
    ev.write_sweep_table(rows, columns, out_dir / "table.csv")
    config["seed"] = _resolve_seed(args, config)
    print(f"aggregated {len(runs)} runs into table.csv")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "flow": _cmd_flow,
    "spot": _cmd_spot,
    "extract": _cmd_extract,
    "train-svm": _cmd_train_svm,
    "train-cnn": _cmd_train_cnn,
    "train-gan": _cmd_train_gan,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mexflow",
        description="Micro-expression pipeline: synthetic corpora, optical flow, "
        "apex spotting, Bi-WOOF/SVM and CNN classification, GAN augmentation, LOSOCV.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=(name != "generate"), help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--jobs", type=int, default=1, help="parallel worker limit")
        p.add_argument("--verbose", "-v", action="store_true")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            with open(args.config) as fh:
                config = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"mexflow {args.command}: cannot read config: {exc}", file=sys.stderr)
            return 2
    else:
        config = {}
    out_dir = Path(args.out)
    staging = Path(tempfile.mkdtemp(prefix=".mexflow-", dir=out_dir.parent if out_dir.parent.exists() else None))
    try:
        code = _COMMANDS[args.command](args, config, staging)
        if not (staging / "config.json").exists():
            # evaluate/report write richer resolved echoes themselves
            _echo_config(config, staging)
    except Exception as exc:
        shutil.rmtree(staging, ignore_errors=True)
        print(f"mexflow {args.command}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1
    out_dir.mkdir(parents=True, exist_ok=True)
    for item in staging.iterdir():
        target = out_dir / item.name
        if target.exists():
            if target.is_dir():
                shutil.rmtree(target)
            else:
                target.unlink()
        shutil.move(str(item), str(target))
    staging.rmdir()
    return code


if __name__ == "__main__":
    sys.exit(main())
