"""Splitting, metrics, config parsing, training contracts, inference, model file."""

import numpy as np
import pytest

from tractscl import nn
from tractscl.geometry import NormStats
from tractscl.pipeline import (ConfigError, DatasetError, EmptyTractogram,
                               LengthMismatch, Metrics, Model, ModelFileError,
                               NonFiniteLoss, SingleClassTrainingData,
                               SubjectData, TooFewSubjects, TrainConfig,
                               evaluate, load_augment_config, load_dataset_dir,
                               load_model, load_synth_config, load_train_config,
                               predict, read_labels_tsv, save_model,
                               save_subject, split_dataset, train,
                               write_labels_tsv)
from tractscl.synth import SynthConfig, generate
from tractscl.tract_io import Streamline, Tractogram


def tiny_subjects(seed, n_target=8, n_nontarget=16):
    cfg = SynthConfig(n_target=n_target, n_nontarget=n_nontarget,
                      points_min=40, points_max=60, seed=seed)
    t, labels = generate(cfg)
    return SubjectData(f"s{seed}", t, labels)


def tiny_config(**over):
    base = dict(P=8, batch_size=16, lr=0.01, epochs_stage1=2, epochs_stage2=2,
                loss_mode="micro", augment_mode="subsampling", augment_factor=2,
                seed=0, min_length_mm=0.0)
    base.update(over)
    return TrainConfig(**base)


class TestSplitDataset:
    def make_subjects(self, n):
        return [SubjectData(f"s{i:02d}", Tractogram(), np.zeros(0, dtype=np.int64))
                for i in range(n)]

    def test_paper_scale_split(self):
        subs = self.make_subjects(62)
        tr, va, te = split_dataset(subs, (40 / 62, 10 / 62, 12 / 62), seed=1)
        assert (len(tr), len(va), len(te)) == (40, 10, 12)

    def test_three_subjects_equal(self):
        tr, va, te = split_dataset(self.make_subjects(3), (1, 1, 1), seed=0)
        assert (len(tr), len(va), len(te)) == (1, 1, 1)

    def test_partition_property(self):
        subs = self.make_subjects(17)
        groups = split_dataset(subs, (0.5, 0.25, 0.25), seed=3)
        names = [s.name for g in groups for s in g]
        assert sorted(names) == sorted(s.name for s in subs)
        assert len(set(names)) == len(names)

    def test_deterministic(self):
        subs = self.make_subjects(10)
        a = split_dataset(subs, (0.6, 0.2, 0.2), seed=5)
        b = split_dataset(subs, (0.6, 0.2, 0.2), seed=5)
        assert [[s.name for s in g] for g in a] == [[s.name for s in g] for g in b]

    def test_too_few_subjects(self):
        with pytest.raises(TooFewSubjects):
            split_dataset(self.make_subjects(2), (1, 1, 1))


class TestEvaluate:
    def test_worked_example(self):
        pred = [1] * 8 + [1] * 2 + [0] * 2 + [0] * 88
        truth = [1] * 8 + [0] * 2 + [1] * 2 + [0] * 88
        m = evaluate(pred, truth)
        assert (m.tp, m.fp, m.fn, m.tn) == (8, 2, 2, 88)
        assert m.accuracy == pytest.approx(0.96)
        assert m.precision == pytest.approx(0.8)
        assert m.recall == pytest.approx(0.8)
        assert m.f1 == pytest.approx(0.8)

    def test_perfect(self):
        m = evaluate([0, 1, 1, 0], [0, 1, 1, 0])
        assert m.accuracy == m.precision == m.recall == m.f1 == 1.0

    def test_zero_denominator_convention(self):
        m = evaluate([0, 0, 0, 0], [1, 1, 0, 0])
        assert m.recall == 0.0 and m.precision == 0.0 and m.f1 == 0.0
        assert m.accuracy == 0.5

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            evaluate([0, 1], [0, 1, 1])

    def test_binary_enforced(self):
        with pytest.raises(ValueError):
            evaluate([0, 2], [0, 1])

    def test_permutation_symmetric(self):
        rng = np.random.default_rng(0)
        pred = rng.integers(0, 2, 50)
        truth = rng.integers(0, 2, 50)
        perm = rng.permutation(50)
        assert evaluate(pred, truth) == evaluate(pred[perm], truth[perm])


class TestConfigParsing:
    def test_train_defaults_and_overrides(self):
        cfg = load_train_config("P = 30\nlr=0.005\nfa_channel = true\n"
                                "augment_factor = auto\nfloat_mode = 32-bit\n")
        assert cfg.P == 30 and cfg.lr == 0.005 and cfg.fa_channel is True
        assert cfg.augment_factor == "auto" and cfg.dtype == np.float32
        assert cfg.batch_size == 512 and cfg.tau == 0.1 and cfg.t_fa == 0.1

    def test_comments_and_blanks(self):
        cfg = load_train_config("# a comment\n\nseed = 9   # trailing\n")
        assert cfg.seed == 9

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            load_train_config("momentum = 0.9\n")

    def test_duplicate_key(self):
        with pytest.raises(ConfigError):
            load_train_config("P = 30\nP = 40\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            load_train_config("P = sixty\n")
        with pytest.raises(ConfigError):
            load_train_config("loss_mode = contrastive\n")
        with pytest.raises(ConfigError):
            load_train_config("float_mode = 16-bit\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigError):
            load_train_config("just a line\n")

    def test_synth_config(self):
        cfg = load_synth_config("n_target = 5\nn_nontarget = 7\n"
                                "geometry_overlap = 1.0\nseed = 3\n")
        assert cfg.n_target == 5 and cfg.geometry_overlap == 1.0

    def test_augment_config(self):
        cfg = load_augment_config("mode = repetition\nfactor = 4\nP = 12\nseed = 2\n")
        assert cfg.mode == "repetition" and cfg.factor == 4


class TestTrainContracts:
    def test_zero_epochs_returns_init(self):
        subj = tiny_subjects(1)
        cfg = tiny_config(epochs_stage1=0, epochs_stage2=0)
        model, log = train([subj], [tiny_subjects(2)], cfg)
        assert log == []
        init = nn.init_params(cfg.seed, in_dim=3)
        for (_, a), (_, b) in zip(model.params.param_items(), init.param_items()):
            assert np.array_equal(a, b)

    def test_deterministic_training(self):
        subj_tr, subj_va = tiny_subjects(3), tiny_subjects(4)
        cfg = tiny_config()
        m1, log1 = train([subj_tr], [subj_va], cfg)
        m2, log2 = train([subj_tr], [subj_va], cfg)
        assert log1 == log2
        assert save_model(m1) == save_model(m2)

    def test_stage2_freezes_encoder(self):
        subj_tr, subj_va = tiny_subjects(5), tiny_subjects(6)
        m_short, _ = train([subj_tr], [subj_va], tiny_config(epochs_stage2=0))
        m_full, _ = train([subj_tr], [subj_va], tiny_config(epochs_stage2=3))
        for name, arr in m_full.params.param_items():
            if name.startswith(("encoder.", "proj.")):
                ref = dict(m_short.params.param_items())[name]
                assert np.array_equal(arr, ref)

    def test_model_selection_no_worse_than_stage2_start(self):
        subj_tr, subj_va = tiny_subjects(7), tiny_subjects(8)
        m_start, _ = train([subj_tr], [subj_va], tiny_config(epochs_stage2=0))
        m_sel, _ = train([subj_tr], [subj_va], tiny_config(epochs_stage2=4))

        def val_f1(model):
            t, labels = subj_va.tractogram, subj_va.labels
            idx, pred, _ = predict(model, t)
            return evaluate(pred, labels[idx]).f1

        assert val_f1(m_sel) >= val_f1(m_start)

    def test_baseline_single_phase(self):
        subj_tr, subj_va = tiny_subjects(9), tiny_subjects(10)
        cfg = tiny_config(loss_mode="baseline", epochs_stage1=1, epochs_stage2=2,
                          augment_mode="none")
        model, log = train([subj_tr], [subj_va], cfg)
        assert len(log) == 3  # joint phase runs stage1+stage2 epochs
        assert all(line.split("\t")[1] == "0" for line in log)

    def test_two_stage_log_structure(self):
        subj_tr, subj_va = tiny_subjects(11), tiny_subjects(12)
        model, log = train([subj_tr], [subj_va], tiny_config())
        stages = [line.split("\t")[1] for line in log]
        assert stages == ["1", "1", "2", "2"]
        assert all(len(line.split("\t")) == 7 for line in log)

    def test_single_class_rejected(self):
        t, labels = generate(SynthConfig(n_target=5, n_nontarget=5,
                                         points_min=30, points_max=40, seed=13))
        subj = SubjectData("s", t, np.ones_like(labels))
        with pytest.raises(SingleClassTrainingData):
            train([subj], [tiny_subjects(14)], tiny_config())

    def test_non_finite_loss_aborts(self):
        subj_tr, subj_va = tiny_subjects(15), tiny_subjects(16)
        cfg = tiny_config(loss_mode="baseline", augment_mode="none",
                          lr=1e25, float_mode="32-bit", epochs_stage1=0,
                          epochs_stage2=4)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NonFiniteLoss):
                train([subj_tr], [subj_va], cfg)

    def test_length_filter_applied(self):
        # all training streamlines shorter than the threshold -> error
        subj_tr, subj_va = tiny_subjects(17), tiny_subjects(18)
        with pytest.raises(DatasetError):
            train([subj_tr], [subj_va], tiny_config(min_length_mm=500.0))


@pytest.fixture(scope="module")
def trained():
    model, _ = train([tiny_subjects(20)], [tiny_subjects(21)], tiny_config())
    return model


class TestPredict:
    def test_output_contracts(self, trained):
        t, labels = generate(SynthConfig(n_target=6, n_nontarget=6,
                                         points_min=40, points_max=60, seed=22))
        idx, pred, probs = predict(trained, t)
        assert len(idx) == len(t.streamlines)  # all pass min_length_mm=0
        assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-9
        assert set(np.unique(pred)).issubset({0, 1})

    def test_duplicate_streamline_same_prediction(self, trained):
        t, _ = generate(SynthConfig(n_target=2, n_nontarget=2,
                                    points_min=40, points_max=60, seed=23))
        dup = Tractogram(t.streamlines + [t.streamlines[0]], t.scalar_names)
        _, pred, probs = predict(trained, dup)
        assert pred[0] == pred[-1]
        assert np.array_equal(probs[0], probs[-1])

    def test_order_invariance(self, trained):
        t, _ = generate(SynthConfig(n_target=3, n_nontarget=3,
                                    points_min=40, points_max=60, seed=24))
        rev = Tractogram(t.streamlines[::-1], t.scalar_names)
        _, pred_f, probs_f = predict(trained, t)
        _, pred_r, probs_r = predict(trained, rev)
        assert np.array_equal(pred_f, pred_r[::-1])
        assert np.array_equal(probs_f, probs_r[::-1])

    def test_empty_tractogram(self, trained):
        with pytest.raises(EmptyTractogram):
            predict(trained, Tractogram([], ["FA"]))

    def test_length_filter_indices(self, trained):
        t, _ = generate(SynthConfig(n_target=3, n_nontarget=3,
                                    points_min=40, points_max=60, seed=25))
        short = Streamline(np.array([[0.0, 0, 0], [1.0, 0, 0]]),
                           np.full((2, 1), 0.5))
        mixed = Tractogram([short] + t.streamlines, t.scalar_names)
        model = Model(trained.params, trained.norm, trained.P,
                      trained.scalar_channel, trained.fa_channel,
                      min_length_mm=80.0, float_mode=trained.float_mode)
        idx, pred, _ = predict(model, mixed)
        assert 0 not in idx
        assert len(idx) == len(t.streamlines)


class TestModelFile:
    def test_roundtrip(self):
        model, _ = train([tiny_subjects(30)], [tiny_subjects(31)], tiny_config())
        blob = save_model(model)
        assert blob[:4] == b"FCK1"
        back = load_model(blob)
        assert back.P == model.P
        assert back.scalar_channel == model.scalar_channel
        assert back.fa_channel == model.fa_channel
        assert back.min_length_mm == model.min_length_mm
        assert back.float_mode == model.float_mode
        assert np.array_equal(back.norm.mean, model.norm.mean)
        assert back.norm.scale == model.norm.scale
        for (na, a), (nb, b) in zip(model.params.param_items(),
                                    back.params.param_items()):
            assert na == nb
            assert np.array_equal(a, b)

    def test_fa_channel_roundtrip(self):
        params = nn.init_params(0, in_dim=4, encoder_widths=(4, 8),
                                projection_widths=(4, 4),
                                classifier_widths=(4, 4, 2))
        model = Model(params, NormStats(np.zeros(3), 2.0), 16, "FA",
                      fa_channel=True, min_length_mm=40.0, float_mode="32-bit")
        back = load_model(save_model(model))
        assert back.fa_channel is True
        assert back.params.dtype == np.float32
        assert back.params.in_dim == 4

    def test_bad_magic(self):
        with pytest.raises(ModelFileError):
            load_model(b"NOPE" + b"\x00" * 100)

    def test_truncated(self):
        model, _ = train([tiny_subjects(32)], [tiny_subjects(33)],
                         tiny_config(epochs_stage1=1, epochs_stage2=1))
        blob = save_model(model)
        with pytest.raises(ModelFileError):
            load_model(blob[:len(blob) // 2])


class TestDatasetDir:
    def test_save_load_roundtrip(self, tmp_path):
        subj = tiny_subjects(40)
        save_subject(tmp_path, subj.name, subj.tractogram, subj.labels)
        loaded = load_dataset_dir(tmp_path)
        assert len(loaded) == 1
        assert loaded[0].name == subj.name
        assert loaded[0].tractogram == subj.tractogram
        assert np.array_equal(loaded[0].labels, subj.labels)

    def test_multiple_subjects_sorted(self, tmp_path):
        for seed in (43, 41, 42):
            subj = tiny_subjects(seed, n_target=2, n_nontarget=2)
            save_subject(tmp_path, subj.name, subj.tractogram, subj.labels)
        names = [s.name for s in load_dataset_dir(tmp_path)]
        assert names == sorted(names)

    def test_missing_label_rejected(self, tmp_path):
        subj = tiny_subjects(44, n_target=2, n_nontarget=2)
        save_subject(tmp_path, subj.name, subj.tractogram, subj.labels)
        table = read_labels_tsv(tmp_path / "labels.tsv")
        del table[(subj.name, 0)]
        write_labels_tsv(tmp_path / "labels.tsv", table)
        with pytest.raises(DatasetError):
            load_dataset_dir(tmp_path)

    def test_missing_labels_file(self, tmp_path):
        (tmp_path / "a.txt").write_text('{"scalar_names": []}\n')
        with pytest.raises(DatasetError):
            load_dataset_dir(tmp_path)

    def test_empty_dir(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset_dir(tmp_path)
