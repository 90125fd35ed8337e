import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mexflow import evaluation as ev
from mexflow.imaging import SampleRecord


def fake_records(subject_videos):
    """subject_videos: {subject: n_videos}; no frames on disk needed."""
    records = []
    for subj, n in subject_videos.items():
        for i in range(n):
            records.append(
                SampleRecord(
                    subject_id=subj,
                    video_id=f"{subj}_v{i}",
                    emotion=i % 3,
                    frame_paths=["a", "b"],
                    onset_index=0,
                    apex_index=1,
                )
            )
    return records


class TestLosocvSplit:
    def test_sixty_eight_subjects_sixty_eight_folds(self):
        records = fake_records({f"s{i:02d}": 2 for i in range(68)})
        plan = ev.losocv_split(records)
        assert len(plan) == 68

    def test_two_subjects_three_videos(self):
        records = fake_records({"a": 3, "b": 3})
        plan = ev.losocv_split(records)
        assert len(plan) == 2
        for _, train, test in plan:
            assert len(train) == 3 and len(test) == 3

    def test_partition_laws_exhaustive(self):
        records = fake_records({f"s{i}": (i % 4) + 1 for i in range(10)})
        plan = ev.losocv_split(records)
        all_ids = {r.video_id for r in records}
        seen_test = []
        for subj, train, test in plan:
            assert set(train) & set(test) == set()
            assert set(train) | set(test) == all_ids
            seen_test.extend(test)
            for vid in test:
                rec = next(r for r in records if r.video_id == vid)
                assert rec.subject_key == subj
        assert sorted(seen_test) == sorted(all_ids)

    def test_single_subject_rejected(self):
        with pytest.raises(ValueError, match="subjects"):
            ev.losocv_split(fake_records({"only": 4}))

    @given(st.dictionaries(st.text("abcdef", min_size=1, max_size=3),
                           st.integers(1, 4), min_size=2, max_size=8))
    @settings(max_examples=40, deadline=None)
    def test_partition_property(self, subject_videos):
        records = fake_records(subject_videos)
        plan = ev.losocv_split(records)
        assert len(plan) == len(subject_videos)
        covered = []
        for _, train, test in plan:
            covered.extend(test)
            assert not (set(train) & set(test))
        assert sorted(covered) == sorted(r.video_id for r in records)


class TestConfusion:
    def test_perfect_predictions_diagonal(self):
        cm = ev.accumulate([(0, 0), (1, 1), (2, 2), (1, 1)])
        np.testing.assert_array_equal(cm, [[1, 0, 0], [0, 2, 0], [0, 0, 1]])

    def test_hand_counted(self):
        pairs = [(0, 1), (0, 0), (1, 2), (2, 2), (2, 0), (1, 1)]
        cm = ev.accumulate(pairs)
        np.testing.assert_array_equal(cm, [[1, 1, 0], [0, 1, 1], [1, 0, 1]])

    def test_empty_is_zero_matrix(self):
        np.testing.assert_array_equal(ev.accumulate([]), np.zeros((3, 3)))

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            ev.accumulate([(0, 3)])


def recount_metrics(cm):
    """Independent one-vs-rest recount from first principles."""
    total = cm.sum()
    acc = sum(cm[i, i] for i in range(3)) / total
    precision, recall, f1 = [], [], []
    for c in range(3):
        tp = cm[c, c]
        fp = sum(cm[r, c] for r in range(3)) - tp
        fn = sum(cm[c, r] for r in range(3)) - tp
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        precision.append(p)
        recall.append(r)
        f1.append(2 * p * r / (p + r) if p + r else 0.0)
    return acc, precision, recall, f1, float(np.mean(f1))


class TestMetrics:
    def test_diagonal_perfect(self):
        report = ev.compute_metrics(np.diag([4, 5, 6]))
        assert report.accuracy == 1.0
        assert report.macro_f1 == 1.0
        assert report.f1 == [1.0, 1.0, 1.0]

    def test_absent_class_zero_denominator_rule(self):
        cm = np.array([[5, 0, 0], [0, 0, 0], [0, 0, 5]])
        report = ev.compute_metrics(cm)
        assert report.accuracy == 1.0
        assert report.f1[1] == 0.0
        assert abs(report.macro_f1 - 2.0 / 3.0) < 1e-12

    def test_random_matrices_match_recount(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            cm = rng.integers(0, 20, size=(3, 3))
            if cm.sum() == 0:
                continue
            report = ev.compute_metrics(cm)
            acc, precision, recall, f1, macro = recount_metrics(cm)
            assert report.accuracy == acc
            assert report.precision == precision
            assert report.recall == recall
            assert report.f1 == f1
            assert report.macro_f1 == macro

    def test_macro_f1_permutation_invariance(self):
        rng = np.random.default_rng(1)
        cm = rng.integers(0, 15, size=(3, 3))
        cm[0, 0] += 1
        base = ev.compute_metrics(cm)
        for perm in ([1, 2, 0], [2, 0, 1], [0, 2, 1]):
            p = np.asarray(perm)
            permuted = cm[np.ix_(p, p)]
            report = ev.compute_metrics(permuted)
            np.testing.assert_allclose(sorted(report.f1), sorted(base.f1), atol=1e-15)
            assert abs(report.macro_f1 - base.macro_f1) < 1e-15

    def test_bounds(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            cm = rng.integers(0, 9, size=(3, 3))
            if cm.sum() == 0:
                continue
            report = ev.compute_metrics(cm)
            values = [report.accuracy, report.macro_f1] + report.precision + report.recall + report.f1
            assert all(0.0 <= v <= 1.0 for v in values)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            ev.compute_metrics(np.zeros((3, 3)))


class TestSilhouette:
    def test_well_separated_near_one(self):
        rng = np.random.default_rng(3)
        pts = np.concatenate([
            rng.normal(0, 0.05, (20, 2)) + [10, 0],
            rng.normal(0, 0.05, (20, 2)) + [-10, 0],
            rng.normal(0, 0.05, (20, 2)) + [0, 10],
        ])
        labels = np.repeat([0, 1, 2], 20)
        assert ev.silhouette_score(pts, labels) > 0.9

    def test_mixed_near_zero(self):
        rng = np.random.default_rng(4)
        pts = rng.normal(size=(60, 2))
        labels = np.repeat([0, 1, 2], 20)
        assert abs(ev.silhouette_score(pts, labels)) < 0.12


class TestExperiment:
    def test_oracle_pipeline_perfect(self, small_corpus):
        _, records, _ = small_corpus
        config = ev.ExperimentConfig(
            extractor="oracle",
            oracle_labels={r.video_id: r.emotion for r in records},
            seed=1,
        )
        report = ev.run_experiment(records, config)
        assert report.metrics.accuracy == 1.0
        assert report.ok
        assert len(report.predictions) == len(records)

    def test_biwoof_experiment_runs(self, small_corpus):
        from mexflow.biwoof import BiwoofConfig
        from mexflow.flow import FlowConfig

        _, records, _ = small_corpus
        config = ev.ExperimentConfig(
            flow=FlowConfig(tvl1_warps=3, tvl1_inner=10),
            extractor="biwoof_svm",
            biwoof=BiwoofConfig(blocks_per_side=5),
            seed=2,
        )
        report = ev.run_experiment(records, config)
        assert report.ok
        assert report.metrics.accuracy > 0.5
        assert set(report.metrics.per_fold) == {r.subject_key for r in records}

    def test_emit_report_files(self, small_corpus, tmp_path):
        _, records, _ = small_corpus
        config = ev.ExperimentConfig(
            extractor="oracle",
            oracle_labels={r.video_id: r.emotion for r in records},
            seed=1,
        )
        report = ev.run_experiment(records, config)
        ev.emit_report(report, tmp_path / "run")
        for name in ("metrics.csv", "confusion.csv", "folds.csv", "predictions.csv", "config.json"):
            assert (tmp_path / "run" / name).is_file()
        lines = (tmp_path / "run" / "predictions.csv").read_text().splitlines()
        assert len(lines) == 1 + len(records)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError, match="stream_spec"):
            ev.ExperimentConfig(extractor="cnn").resolved()
        with pytest.raises(ValueError, match="unknown extractor"):
            ev.ExperimentConfig(extractor="magic").resolved()


class TestAugmentationHygiene:
    def test_fakes_only_in_training_and_tests_unchanged(self, small_corpus):
        from mexflow.flow import FlowConfig
        from mexflow.gan import GanConfig
        from mexflow import cnn as cnnmod

        _, records, _ = small_corpus
        # drop two class-2 videos so folds actually need synthesized samples
        subset = [
            r for r in records
            if r.subject_id in ("s00", "s01", "s02")
            and not (r.emotion == 2 and r.subject_id in ("s01", "s02"))
        ]
        flow_config = FlowConfig(tvl1_warps=2, tvl1_inner=8, pyramid_levels=2)
        base = dict(
            flow=flow_config,
            extractor="cnn",
            stream_spec=cnnmod.StreamSpec(channels=("p", "q")),
            train=cnnmod.TrainConfig(epochs=8, learning_rate=1e-3, batch_size=16),
            seed=4,
        )
        cache, _ = ev.build_channel_cache(subset, flow_config)
        plain = ev.run_experiment(subset, ev.ExperimentConfig(**base), channel_cache=cache)
        augmented = ev.run_experiment(
            subset,
            ev.ExperimentConfig(
                **base, augment=True,
                gan=GanConfig(iterations=10, batch_size=6, seed=4),
            ),
            channel_cache=cache,
        )
        assert augmented.ok, augmented.failures
        # fakes entered every fold's training set, never its test side
        for subj, audit in augmented.fold_audit.items():
            assert audit["train_fakes"] > 0
            assert audit["test_fakes"] == 0
            assert audit["train_total"] > plain.fold_audit[subj]["train_total"]
        # class counts balanced within each fold's training set
        # (train_total = max class count x 3 for this balanced corpus + fakes)
        # and the tested videos are identical to the unaugmented run
        assert [p[0] for p in augmented.predictions] == [p[0] for p in plain.predictions]


class TestEpochCheckpointMetrics:
    def test_table_five_shape(self, small_corpus, tmp_path):
        from mexflow import cnn as cnnmod
        from mexflow.flow import FlowConfig

        _, records, _ = small_corpus
        config = ev.ExperimentConfig(
            flow=FlowConfig(tvl1_warps=2, tvl1_inner=8),
            extractor="cnn",
            stream_spec=cnnmod.StreamSpec(channels=("p", "q")),
            train=cnnmod.TrainConfig(
                epochs=6, learning_rate=1e-3, batch_size=16, checkpoint_epochs=(2, 4, 6)
            ),
            seed=3,
        )
        report = ev.run_experiment(records, config)
        assert sorted(report.epoch_metrics) == [2, 4, 6]
        # headline metrics equal the final checkpoint's metrics
        assert report.epoch_metrics[6].accuracy == report.metrics.accuracy
        ev.emit_report(report, tmp_path / "run")
        lines = (tmp_path / "run" / "epochs.csv").read_text().splitlines()
        assert lines[0] == "epoch,accuracy,macro_f1"
        assert len(lines) == 4  # one row per checkpoint, Table-5 style
