import struct

import numpy as np
import pytest

import resunetpp.trainer as trainer_mod
from resunetpp.data import DatasetSplit
from resunetpp.errors import CheckpointError, NonFiniteLossError, ValidationError
from resunetpp.losses import LossConfig
from resunetpp.model import ResUnetPPConfig, build_model
from resunetpp.optim import LRSchedule, MomentOptimizer
from resunetpp.synthetic import make_blob_dataset
from resunetpp.trainer import (TrainConfig, TrainHistory, checkpoint_load,
                               checkpoint_save, evaluate, read_checkpoint,
                               restore_optimizer, train)


def model_config(**kwargs):
    defaults = dict(input_channels=3, base_channels=4, depth=3,
                    input_size=(32, 32), seed=1)
    defaults.update(kwargs)
    return ResUnetPPConfig(**defaults)


def flat_schedule(lr=1e-3):
    return LRSchedule(initial_lr=lr, cycle_length_epochs=10 ** 6,
                      plateau_patience=10 ** 6)


@pytest.fixture(scope="module")
def blob_split():
    samples = make_blob_dataset(count=6, size=32, seed=3)
    return DatasetSplit(train=samples[:4], val=samples[4:], test=[], split_seed=0)


class TestCheckpointCodec:
    def test_roundtrip_bitwise(self, tmp_path, blob_split):
        model = build_model(model_config())
        opt = MomentOptimizer(model.parameters(), lr=1e-3)
        cfg = TrainConfig(epochs=2, batch_size=2, seed=0, early_stop_patience=10)
        model, _ = train(model, blob_split, cfg, schedule=flat_schedule(), optimizer=opt)

        path = tmp_path / "m.ckpt"
        checkpoint_save(model, opt, path, epoch=1)
        loaded, snap = checkpoint_load(path)

        for (name, var), (_, var2) in zip(model.parameters(), loaded.parameters()):
            assert np.array_equal(var.value, var2.value), name
        for (name, arr), (_, arr2) in zip(model.state_tensors(), loaded.state_tensors()):
            assert np.array_equal(arr, arr2), name
        assert snap.t == opt.t and snap.epoch == 1
        for name in snap.m:
            assert np.array_equal(snap.m[name], opt.m[name])
            assert np.array_equal(snap.v[name], opt.v[name])

    def test_roundtrip_predictions_bitwise(self, tmp_path, blob_split):
        model = build_model(model_config(seed=9))
        path = tmp_path / "m.ckpt"
        checkpoint_save(model, None, path)
        loaded, snap = checkpoint_load(path)
        assert snap is None
        x = blob_split.train[0].image[None]
        assert np.array_equal(model.predict(x), loaded.predict(x))

    def test_truncated_file_names_tensor(self, tmp_path):
        model = build_model(model_config())
        path = tmp_path / "m.ckpt"
        checkpoint_save(model, None, path)
        data = path.read_bytes()
        path.write_bytes(data[:len(data) - 40])
        with pytest.raises(CheckpointError, match="unexpected end of file.*tensor"):
            read_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            read_checkpoint(path)

    def test_unsupported_version_rejected(self, tmp_path):
        path = tmp_path / "v9.ckpt"
        path.write_bytes(b"RUPP" + struct.pack("<I", 9) + struct.pack("<I", 0))
        with pytest.raises(CheckpointError, match="version 9"):
            read_checkpoint(path)

    def test_architecture_mismatch_lists_names(self, tmp_path):
        model = build_model(model_config(depth=3))
        path = tmp_path / "m.ckpt"
        checkpoint_save(model, None, path)
        with pytest.raises(CheckpointError, match="missing"):
            checkpoint_load(path, config=model_config(depth=4))

    def test_config_reconstructed_from_checkpoint(self, tmp_path):
        config = model_config(base_channels=8, input_size=(32, 64))
        path = tmp_path / "m.ckpt"
        checkpoint_save(build_model(config), None, path)
        loaded, _ = checkpoint_load(path)
        assert loaded.config.base_channels == 8
        assert loaded.config.input_size == (32, 64)

    def test_conf_extras_roundtrip(self, tmp_path):
        model = build_model(model_config())
        path = tmp_path / "m.ckpt"
        checkpoint_save(model, None, path, conf_extras={"split_seed": 42})
        assert int(read_checkpoint(path)["conf/split_seed"][0]) == 42


class TestTrainLoop:
    def test_single_epoch_single_record(self, blob_split):
        model = build_model(model_config())
        _, history = train(model, blob_split,
                           TrainConfig(epochs=1, batch_size=2, seed=0),
                           schedule=flat_schedule())
        assert len(history.records) == 1
        assert history.records[0].epoch == 0

    def test_empty_train_split_rejected(self, blob_split):
        with pytest.raises(ValidationError, match="train"):
            train(build_model(model_config()),
                  DatasetSplit([], blob_split.val, []), TrainConfig(epochs=1))

    def test_empty_val_split_rejected(self, blob_split):
        with pytest.raises(ValidationError, match="val"):
            train(build_model(model_config()),
                  DatasetSplit(blob_split.train, [], []), TrainConfig(epochs=1))

    def test_early_stop_restores_best_weights(self, blob_split, monkeypatch):
        # scripted val losses [0.5, 0.5, 0.5] with patience 2: the run stops
        # after the third epoch and keeps the first epoch's weights
        scripted = iter([0.5, 0.5, 0.5, 0.5, 0.5])
        monkeypatch.setattr(trainer_mod, "_validation_pass",
                            lambda *a, **k: (next(scripted), 0.0))

        cfg = TrainConfig(epochs=10, batch_size=2, seed=0, early_stop_patience=2)
        model = build_model(model_config())
        model, history = train(model, blob_split, cfg, schedule=flat_schedule())
        assert len(history.records) == 3

        # an identical 1-epoch run ends in exactly the epoch-0 state
        ref = build_model(model_config())
        ref, _ = train(ref, blob_split,
                       TrainConfig(epochs=1, batch_size=2, seed=0),
                       schedule=flat_schedule())
        for (name, var), (_, var2) in zip(model.parameters(), ref.parameters()):
            assert np.array_equal(var.value, var2.value), name

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_loss_aborts_with_location(self, blob_split):
        model = build_model(model_config())
        cfg = TrainConfig(epochs=6, batch_size=2, seed=0, initial_lr=1e18,
                          early_stop_patience=10)
        sched = LRSchedule(initial_lr=1e18, cycle_length_epochs=10 ** 6,
                           plateau_patience=10 ** 6)
        with pytest.raises(NonFiniteLossError, match="epoch"):
            train(model, blob_split, cfg, schedule=sched)

    def test_val_loss_matches_independent_recompute(self, blob_split):
        model = build_model(model_config())
        cfg = TrainConfig(epochs=3, batch_size=2, seed=0, early_stop_patience=10)
        model, history = train(model, blob_split, cfg, schedule=flat_schedule())
        best = min(r.val_loss for r in history.records)
        recomputed, _ = trainer_mod._validation_pass(model, blob_split.val, 2, LossConfig())
        # the returned model is the restored best checkpoint
        assert abs(recomputed - best) <= 1e-9
        assert all(best <= r.val_loss + 1e-9 for r in history.records)

    def test_training_reduces_loss(self, blob_split):
        model = build_model(model_config())
        cfg = TrainConfig(epochs=15, batch_size=2, seed=0, early_stop_patience=50)
        _, history = train(model, blob_split, cfg, schedule=flat_schedule())
        assert history.records[-1].train_loss < history.records[0].train_loss

    def test_deterministic_repeat(self, blob_split):
        def run():
            model = build_model(model_config())
            cfg = TrainConfig(epochs=3, batch_size=2, seed=4, early_stop_patience=10)
            return train(model, blob_split, cfg, schedule=flat_schedule())[1]

        a, b = run(), run()
        for ra, rb in zip(a.records, b.records):
            assert (ra.train_loss, ra.val_loss, ra.val_iou, ra.lr) == \
                   (rb.train_loss, rb.val_loss, rb.val_iou, rb.lr)

    def test_resume_reproduces_next_epoch(self, tmp_path, blob_split):
        sched = flat_schedule

        full = build_model(model_config())
        _, h_full = train(full, blob_split,
                          TrainConfig(epochs=4, batch_size=2, seed=5,
                                      early_stop_patience=100),
                          schedule=sched())

        last = tmp_path / "last.ckpt"
        part = build_model(model_config())
        train(part, blob_split,
              TrainConfig(epochs=3, batch_size=2, seed=5, early_stop_patience=100,
                          last_checkpoint_path=str(last)),
              schedule=sched())

        resumed, snap = checkpoint_load(last)
        opt = MomentOptimizer(resumed.parameters(), kind="nadam", lr=1e-3, eps=1e-8)
        restore_optimizer(opt, snap)
        _, h_resumed = train(resumed, blob_split,
                             TrainConfig(epochs=4, batch_size=2, seed=5,
                                         early_stop_patience=100),
                             schedule=sched(), optimizer=opt,
                             start_epoch=snap.epoch + 1)
        assert abs(h_resumed.records[0].train_loss
                   - h_full.records[3].train_loss) <= 1e-9


class TestHistoryCsv:
    def test_header_and_rows(self, tmp_path):
        history = TrainHistory()
        from resunetpp.trainer import EpochRecord
        history.records.append(EpochRecord(0, 0.5, 0.6, 0.4, 1e-3, 1.25))
        path = tmp_path / "history.csv"
        history.to_csv(path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "epoch,train_loss,val_loss,val_iou,lr,seconds"
        assert lines[1].startswith("0,0.5,0.6,0.4,0.001,")


class TestEvaluate:
    def test_constant_half_probability_scores_zero_iou(self, blob_split):
        model = build_model(model_config())
        model.head.weight.value[...] = 0.0
        model.head.bias.value[...] = 0.0
        report = evaluate(model, blob_split.train)
        # output is exactly 0.5; strict > 0.5 binarization leaves an empty mask
        assert all(r.iou == 0.0 for r in report.rows)

    def test_saturated_negative_head_predicts_empty(self, blob_split):
        model = build_model(model_config())
        model.head.weight.value[...] = 0.0
        model.head.bias.value[...] = -100.0
        report = evaluate(model, blob_split.train)
        assert all(r.iou == 0.0 for r in report.rows)
        empty = [s for s in blob_split.train if s.mask.sum() == 0]
        assert not empty  # blob masks are nonempty, so IoU 0 is meaningful

    def test_means_are_arithmetic(self, blob_split):
        model = build_model(model_config())
        report = evaluate(model, blob_split.train)
        assert report.mean_iou == pytest.approx(np.mean([r.iou for r in report.rows]))
        assert report.mean_loss == pytest.approx(np.mean([r.loss for r in report.rows]))

    def test_empty_sample_list_rejected(self):
        with pytest.raises(ValidationError):
            evaluate(build_model(model_config()), [])

    def test_csv_row_count(self, tmp_path, blob_split):
        model = build_model(model_config())
        report = evaluate(model, blob_split.train)
        path = tmp_path / "eval.csv"
        report.to_csv(path)
        lines = path.read_text().strip().split("\n")
        assert len(lines) == 1 + len(blob_split.train)
