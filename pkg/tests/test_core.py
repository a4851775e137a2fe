#!/usr/bin/env python3
"""
Tests for PyAVSep core functionality
"""

import csv
import filecmp
import os
import tempfile

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from pyavsep.config import TrainConfig, sidecar_path
from pyavsep.core import (AVDataset, LossReport, PyAVSep, TrainingDivergedError, checkpoint_io, dump_separation,
                          evaluate_classification, evaluate_losses, evaluate_separation, make_mixed_item, oracle,
                          prepare_batch, sample_mix_pair, seen_samples, separate, train_step,
                          write_classification_table, write_separation_report, write_train_log)
from pyavsep.corpus import CorpusConfig, make_sample
from pyavsep.dsp import Waveform
from pyavsep.model import AVSeparationModel, load_model, save_model
from pyavsep.tensor import SGD, CheckpointError


def _config(**kwargs):
    defaults = dict(preset="tiny", num_classes=4, batch_size=2, eval_pairs=2, filter_len=4, dropout=0.0)
    defaults.update(kwargs)
    return TrainConfig(**defaults).validate()


def _solos(count=8, num_classes=4, seed=0):
    corpus = CorpusConfig(preset="tiny", num_classes=num_classes, seed=seed)
    return [make_sample(i, "train", i % num_classes, corpus) for i in range(count)]


def _corpus_config(num_classes=2):
    return CorpusConfig(preset="tiny", num_classes=num_classes, solos_per_class={"train": 3, "val": 1, "test": 2},
                        duets={"train": 0, "val": 0, "test": 0}, seed=1)


class TestMixing:
    def test_pairs_are_class_disjoint(self):
        samples = _solos()
        rng = np.random.default_rng(0)
        for _ in range(30):
            item = sample_mix_pair(samples, rng)
            assert not set(item.clips[0].labels) & set(item.clips[1].labels)
            assert item.clips[0].clip_id != item.clips[1].clip_id

    def test_mixture_is_sum_of_scaled_stems(self):
        samples = _solos()
        item = make_mixed_item(samples[0], samples[1])
        assert_allclose(item.mixture.samples, item.stems[0].samples + item.stems[1].samples)
        assert np.max(np.abs(item.mixture.samples)) <= 1.0 + 1e-12
        assert item.gain <= 1.0
        assert item.objects == [(0, 0), (1, 1)]
        assert item.class_pair == "0+1"

    def test_shared_class_rejected(self):
        samples = _solos()
        with pytest.raises(ValueError, match="share"):
            make_mixed_item(samples[0], samples[4])

    def test_gives_up_after_retries(self):
        samples = [s for s in _solos() if s.labels == (0,)]
        with pytest.raises(ValueError, match="disjoint"):
            sample_mix_pair(samples, np.random.default_rng(0), retries=5)

    def test_too_few_clips(self):
        with pytest.raises(ValueError):
            sample_mix_pair(_solos()[:1], np.random.default_rng(0))

    def test_duet_fraction_uses_duets(self):
        corpus = CorpusConfig(preset="tiny", num_classes=4)
        duets = [make_sample(i, "train", None, corpus) for i in range(30)]
        pair = next((a, b) for a in duets for b in duets if not set(a.labels) & set(b.labels))
        samples = _solos() + list(pair)
        rng = np.random.default_rng(1)
        items = [sample_mix_pair(samples, rng, duet_fraction=1.0) for _ in range(10)]
        assert all(len(item.objects) == 4 for item in items)


class TestBatch:
    def test_shapes_and_order(self):
        config = _config()
        model = AVSeparationModel(config)
        samples = _solos()
        items = [make_mixed_item(samples[0], samples[1]), make_mixed_item(samples[2], samples[3])]
        batch = prepare_batch(model, items, "ratio")
        spec = config.spec
        assert batch.frames.shape == (4, 3, spec.frame_size, spec.frame_size)
        assert batch.labels.shape == (4, 4)
        assert batch.log_specs.shape == (2, spec.warped_bins, spec.frames)
        assert batch.objects == [(0, 0, 0), (1, 1, 0), (2, 2, 1), (3, 3, 1)]
        assert batch.gt.shape == (4, spec.warped_bins, spec.frames)
        assert_array_equal(batch.labels[3], [0, 0, 0, 1])

    def test_binary_gt(self):
        model = AVSeparationModel(_config(mask_kind="binary"))
        samples = _solos()
        batch = prepare_batch(model, [make_mixed_item(samples[0], samples[1])], "binary")
        assert np.all((batch.gt.values == 0) | (batch.gt.values == 1))
        assert np.all(batch.gt.values.sum(axis=0) >= 1)


class TestTraining:
    def _batch(self, model):
        samples = _solos()
        items = [make_mixed_item(samples[0], samples[1]), make_mixed_item(samples[2], samples[3])]
        return prepare_batch(model, items, model.config.mask_kind)

    def test_step_reports_finite_losses(self):
        config = _config()
        model = AVSeparationModel(config)
        optimizer = SGD(model.params, config.learning_rate, config.momentum)
        report = train_step(model, optimizer, self._batch(model), config)
        values = [report.c_loss_1, report.c_loss_2, report.sep_loss, report.total]
        assert all(np.isfinite(v) for v in values)
        assert report.total == pytest.approx(report.sep_loss + 0.5 * (report.c_loss_1 + report.c_loss_2), rel=1e-5)

    def test_overfit_loss_strictly_decreases(self):
        config = _config(momentum=0.0)
        model = AVSeparationModel(config)
        optimizer = SGD(model.params, config.learning_rate, config.momentum)
        batch = self._batch(model)
        history = [train_step(model, optimizer, batch, config, step).total for step in range(50)]
        assert np.all(np.diff(history) < 0), history

    def test_identical_runs_match(self):
        config = _config(dropout=0.5)
        runs = []
        for _ in range(2):
            model = AVSeparationModel(config)
            optimizer = SGD(model.params, config.learning_rate, config.momentum)
            batch = self._batch(model)
            history = [train_step(model, optimizer, batch, config, step).total for step in range(5)]
            runs.append((history, model.state()))
        assert runs[0][0] == runs[1][0]
        for name, values in runs[0][1].items():
            assert_array_equal(runs[1][1][name], values)

    def test_divergence_dumps_tensors(self):
        config = _config()
        model = AVSeparationModel(config)
        name, tensor = model.params.items()[0]
        tensor.values[...] = np.nan
        optimizer = SGD(model.params, config.learning_rate)
        with tempfile.TemporaryDirectory() as tmp:
            with pytest.raises(TrainingDivergedError, match="step 7"):
                train_step(model, optimizer, self._batch(model), config, step=7, dump_dir=tmp)
            dumped = np.load(os.path.join(tmp, "diverged_step000007.npz"))
            assert f"param/{name}" in dumped.files

    def test_evaluate_keeps_mode(self):
        config = _config()
        model = AVSeparationModel(config).train()
        report = evaluate_losses(model, self._batch(model), config)
        assert model.training
        assert np.isfinite(report.sep_loss)

    def test_write_train_log(self):
        history = [LossReport(1.0, 2.0, 3.0, 4.5), LossReport(0.5, 1.0, 2.0, 2.75, val_sep_loss=2.5)]
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "train_log.csv")
            write_train_log(path, history)
            with open(path, newline="", encoding="utf-8") as f:
                rows = list(csv.reader(f))
            assert rows[0] == ["step", "c_loss_1", "c_loss_2", "sep_loss", "total", "val_sep_loss"]
            assert rows[1][0] == "1" and rows[1][-1] == ""
            assert rows[2][-1] == "2.500000"


class TestCheckpoint:
    def test_round_trip(self):
        model = AVSeparationModel(_config(seed=1))
        other = AVSeparationModel(_config(seed=2))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "m.ckpt")
            assert checkpoint_io(model, path, "save") == "saved"
            assert os.path.exists(sidecar_path(path))
            assert checkpoint_io(other, path, "load") == "loaded"
        for name, values in model.state().items():
            assert_array_equal(other.state()[name], values)

    def test_resave_is_byte_identical(self):
        model = AVSeparationModel(_config(seed=4))
        with tempfile.TemporaryDirectory() as tmp:
            first, second = os.path.join(tmp, "a.ckpt"), os.path.join(tmp, "b.ckpt")
            save_model(model, first)
            save_model(load_model(first), second)
            assert filecmp.cmp(first, second, shallow=False)

    def test_separation_bit_exact_after_load(self):
        model = AVSeparationModel(_config(seed=5)).eval()
        item = make_mixed_item(*_solos()[:2])
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "m.ckpt")
            save_model(model, path)
            loaded = load_model(path)
        before = separate(model, list(item.frames), item.mixture, 0.3, class_ids=[[0], [1]])
        after = separate(loaded, list(item.frames), item.mixture, 0.3, class_ids=[[0], [1]])
        for a, b in zip(before.sources, after.sources):
            assert_array_equal(a.waveform.samples, b.waveform.samples)
            assert_array_equal(a.linear_mask, b.linear_mask)

    def test_load_model_from_sidecar(self):
        model = AVSeparationModel(_config(num_bases=3))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "m.ckpt")
            save_model(model, path)
            loaded = load_model(path)
        assert loaded.config.num_bases == 3
        assert not loaded.training

    def test_architecture_mismatch(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "m.ckpt")
            checkpoint_io(AVSeparationModel(_config()), path, "save")
            with pytest.raises(CheckpointError):
                checkpoint_io(AVSeparationModel(_config(num_classes=3)), path, "load")

    def test_bad_direction_and_missing_file(self):
        model = AVSeparationModel(_config())
        with tempfile.TemporaryDirectory() as tmp:
            with pytest.raises(ValueError):
                checkpoint_io(model, os.path.join(tmp, "m.ckpt"), "copy")
            with pytest.raises(FileNotFoundError):
                checkpoint_io(model, os.path.join(tmp, "m.ckpt"), "load")


class TestSeparate:
    def test_one_source_per_object(self):
        config = _config()
        model = AVSeparationModel(config)
        samples = _solos()
        item = make_mixed_item(samples[0], samples[1])
        calls = model.basis_calls
        result = separate(model, list(item.frames), item.mixture, config.tau, class_ids=[[0], [1]])
        assert model.basis_calls == calls + 1
        assert result.status == "ok"
        assert [(s.frame_index, s.class_id) for s in result.sources] == [(0, 0), (1, 1)]
        for source in result.sources:
            assert len(source.waveform) == len(item.mixture)
            assert source.linear_mask.shape == (config.spec.linear_bins, config.spec.frames)
            assert np.all((source.linear_mask >= 0) & (source.linear_mask <= 1))
        assert result.bases.shape == (config.num_bases, config.spec.warped_bins, config.spec.frames)

    def test_single_frame_with_flat_ids(self):
        model = AVSeparationModel(_config())
        sample = _solos()[0]
        result = separate(model, sample.frame, sample.mixture, 0.3, class_ids=[0, 2])
        assert [s.class_id for s in result.sources] == [0, 2]

    def test_no_objects(self):
        model = AVSeparationModel(_config())
        sample = _solos()[0]
        result = separate(model, sample.frame, sample.mixture, 0.3, class_ids=[])
        assert result.status == "no_objects"
        assert result.sources == []

    def test_wrong_clip_length(self):
        model = AVSeparationModel(_config())
        sample = _solos()[0]
        with pytest.raises(ValueError, match="samples"):
            separate(model, sample.frame, Waveform(sample.mixture.samples[:-1], sample.mixture.sample_rate),
                     0.3, class_ids=[0])

    @pytest.mark.parametrize("bad", [1.5, -0.1, np.nan])
    def test_frames_outside_unit_range(self, bad):
        model = AVSeparationModel(_config())
        size = model.config.spec.frame_size
        frames = np.full((1, 3, size, size), 0.5)
        frames[0, 1, 2, 3] = bad
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            model.vision_forward(frames)

    def test_dump_files(self):
        config = _config()
        model = AVSeparationModel(config)
        sample = _solos()[0]
        result = separate(model, sample.frame, sample.mixture, 0.3, class_ids=[1])
        with tempfile.TemporaryDirectory() as tmp:
            written = dump_separation(result, tmp)
            names = {os.path.basename(p) for p in written}
            assert {"frame0_class1.wav", "frame0_class1_mask.spec", "frame0_class1_mask_warped.spec"} <= names
            assert "attention_frame0_class3.spec" in names
            assert f"basis{config.num_bases - 1:02d}.spec" in names
            assert all(os.path.exists(p) for p in written)


class TestEvaluation:
    def test_classification_table(self):
        model = AVSeparationModel(_config())
        table = evaluate_classification({"m": model}, _solos(), taus=(0.2, 0.5), chunk=3)
        assert set(table["m"]) == {0.2, 0.5}
        assert all(0.0 <= v <= 1.0 for v in table["m"].values())
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "classification.csv")
            write_classification_table(path, table)
            with open(path, newline="", encoding="utf-8") as f:
                rows = list(csv.reader(f))
            assert rows[0] == ["model", "0.2", "0.5"]

    def test_separation_report(self):
        config = _config()
        model = AVSeparationModel(config)
        report = evaluate_separation({"m": model}, _solos(), config, progress=False)
        assert set(report.rows) == {"mixture", "m/protocol", "m/deployment"}
        assert len(report.rows["mixture"]) == 2 * config.eval_pairs
        assert all(len(rows) == 2 * config.eval_pairs for rows in report.rows.values())
        assert 0.0 <= report.detection_recall["m"] <= 1.0
        with tempfile.TemporaryDirectory() as tmp:
            names = {os.path.basename(p) for p in write_separation_report(report, tmp)}
            assert {"sep_mixture.csv", "sep_m_protocol.csv", "sep_pairs_m_deployment.csv", "sep_summary.csv",
                    "detection_recall.csv"} <= names

    def test_held_out_rows(self):
        config = _config(eval_pairs=4, held_out_classes=[0, 1])
        report = evaluate_separation({"m": AVSeparationModel(_config())}, _solos(), config, progress=False)
        assert {"mixture/held_out", "m/protocol/held_out", "m/deployment/held_out"} <= set(report.rows)
        for key in ("mixture", "m/protocol", "m/deployment"):
            held = report.rows[f"{key}/held_out"]
            assert held and all(r.source_class in (0, 1) for r in held)
            assert held == [r for r in report.rows[key] if r.source_class in (0, 1)]
        assert "m/protocol/held_out" in report.summary()

    def test_no_held_out_rows_by_default(self):
        report = evaluate_separation({"m": AVSeparationModel(_config())}, _solos(), _config(), progress=False)
        assert not any(key.endswith("/held_out") for key in report.rows)

    def test_same_pairs_for_every_model(self):
        config = _config()
        models = {"a": AVSeparationModel(_config(seed=1)), "b": AVSeparationModel(_config(seed=2))}
        report = evaluate_separation(models, _solos(), config, progress=False)
        ids = {key: [r.clip_id for r in rows] for key, rows in report.rows.items()}
        assert ids["a/protocol"] == ids["b/protocol"] == ids["mixture"]

    def test_oracle_keys(self):
        report = oracle(_solos(), _config(), progress=False)
        assert set(report.rows) == {"mixture", "ibm", "irm", "ibm_warped", "irm_warped"}
        assert all(len(rows) == 4 for rows in report.rows.values())

    def test_ideal_binary_mask_beats_mixture(self):
        config = _config(preset="desk", eval_pairs=4, filter_len=512)
        corpus = CorpusConfig(preset="desk", num_classes=4, seed=3)
        samples = [make_sample(i, "test", i % 4, corpus) for i in range(8)]
        summary = oracle(samples, config, progress=False).summary()
        assert summary["ibm"]["SDR"] > summary["mixture"]["SDR"] + 10.0
        assert summary["irm"]["SDR"] > summary["mixture"]["SDR"]

    def test_empty_split(self):
        with pytest.raises(ValueError):
            evaluate_classification({"m": AVSeparationModel(_config())}, [])


class TestDataset:
    def test_seen_samples_drop_held_out_classes(self):
        corpus = CorpusConfig(preset="tiny", num_classes=4)
        samples = _solos() + [make_sample(i, "train", None, corpus) for i in range(20, 26)]
        seen = seen_samples(samples, [1, 3])
        assert seen and all(not {1, 3} & set(s.labels) for s in seen)
        assert len(seen) == sum(1 for s in samples if not {1, 3} & set(s.labels))
        assert seen_samples(samples, []) == samples

    def test_missing_manifest(self):
        with tempfile.TemporaryDirectory() as tmp:
            with pytest.raises(FileNotFoundError):
                AVDataset(tmp, 4000)


class TestPyAVSep:
    def test_synth_train_and_evaluate(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = TrainConfig(preset="tiny", num_classes=2, batch_size=2, steps=3, log_every=1, eval_pairs=2,
                                 filter_len=4, corpus_dir=os.path.join(tmp, "corpus"),
                                 checkpoint=os.path.join(tmp, "model.ckpt"),
                                 output_dir=os.path.join(tmp, "results")).validate()
            app = PyAVSep(config)
            entries = app.synthesize(corpus_config=_corpus_config(), progress=False)
            assert len(entries) == 12

            dataset = app.load_dataset()
            assert len(dataset) == 12
            assert len(dataset.split("test")) == 4
            first = dataset.split("train")[0]
            assert dataset.sample(first) is dataset.sample(first)

            model, history = app.train(progress=False)
            assert len(history) == 3
            assert history[-1].val_sep_loss is not None
            assert os.path.exists(config.checkpoint)
            assert os.path.exists(os.path.join(config.output_dir, "train_log.csv"))

            table = app.evaluate_classification({"m": config.checkpoint}, taus=(0.3,))
            assert 0.0 <= table["m"][0.3] <= 1.0
            assert os.path.exists(os.path.join(config.output_dir, "classification.csv"))

            report = app.evaluate_separation({"m": config.checkpoint}, progress=False)
            assert "m/deployment" in report.rows
            assert os.path.exists(os.path.join(config.output_dir, "sep_summary.csv"))

            app.oracle(progress=False)
            assert os.path.exists(os.path.join(config.output_dir, "oracle", "sep_ibm.csv"))

            test_entry = dataset.split("test")[0]
            out_dir = os.path.join(tmp, "sep")
            result = app.separate_files(config.checkpoint, [os.path.join(config.corpus_dir, test_entry.frame_path)],
                                        os.path.join(config.corpus_dir, test_entry.mixture_path), out_dir, tau=0.01)
            assert result.status == "ok"
            assert any(name.endswith(".wav") for name in os.listdir(out_dir))

    def test_unseen_classes_from_checkpoint(self):
        with tempfile.TemporaryDirectory() as tmp:
            base = dict(preset="tiny", num_classes=3, batch_size=2, steps=2, log_every=1, eval_pairs=3, filter_len=4,
                        corpus_dir=os.path.join(tmp, "corpus"), checkpoint=os.path.join(tmp, "unseen.ckpt"),
                        output_dir=os.path.join(tmp, "results"))
            trainer = PyAVSep(TrainConfig(held_out_classes=(2,), **base).validate())
            trainer.synthesize(corpus_config=_corpus_config(num_classes=3), progress=False)
            trainer.train(progress=False)
            assert load_model(trainer.config.checkpoint).config.held_out_classes == (2,)

            evaluator = PyAVSep(TrainConfig(**base).validate())
            report = evaluator.evaluate_separation({"m": trainer.config.checkpoint}, progress=False)
            assert "m/protocol/held_out" in report.rows
            assert all(r.source_class == 2 for r in report.rows["m/protocol/held_out"])
            assert os.path.exists(os.path.join(base["output_dir"], "sep_m_protocol_held_out.csv"))

    def test_preset_mismatch(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "m.ckpt")
            save_model(AVSeparationModel(_config()), path)
            app = PyAVSep(TrainConfig(preset="desk"))
            with pytest.raises(CheckpointError, match="preset"):
                app.load_models({"m": path})


if __name__ == "__main__":
    pytest.main([__file__])
