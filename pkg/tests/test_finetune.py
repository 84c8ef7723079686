import math

import numpy as np
import pytest
import torch

from voxbench import finetune
from voxbench.encoder import Encoder, EncoderConfig, ParameterSet, init_parameters, save_model_checkpoint
from voxbench.finetune import (
    SegmentorConfig,
    Segmentor,
    build_segmentor,
    evaluate_mean_dice,
    finetune_run,
    sample_crops,
    seg_loss,
    select_shots,
    sliding_window_infer,
    sliding_window_logits,
    window_starts,
)
from voxbench.gradcheck import finite_difference_check

TINY = EncoderConfig(depths=(1, 1, 1, 1), heads=(2, 2, 2, 2), embed_dim=8,
                     input_shape=(16, 16, 16))
TINY_SEG = SegmentorConfig(encoder_cfg=TINY, num_classes=3)


def tiny_data(n, num_classes=3, seed=0, shape=(16, 16, 16)):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        vox = rng.random(shape).astype(np.float32)
        lab = rng.integers(0, num_classes, size=shape).astype(np.int64)
        out.append((vox, lab))
    return out


class TestSegmentorConfig:
    def test_minimum_classes(self):
        with pytest.raises(ValueError, match="2 classes"):
            SegmentorConfig(encoder_cfg=TINY, num_classes=1)

    def test_tumor_mode_binary(self):
        with pytest.raises(ValueError, match="binary"):
            SegmentorConfig(encoder_cfg=TINY, num_classes=5, mode="tumor")
        cfg = SegmentorConfig(encoder_cfg=TINY, num_classes=2, mode="tumor")
        assert cfg.out_channels == 1


class TestBuildSegmentor:
    def test_same_seed_identical(self):
        m1 = build_segmentor(TINY_SEG, rng=np.random.default_rng(3))
        m2 = build_segmentor(TINY_SEG, rng=np.random.default_rng(3))
        for (k, a), (_, b) in zip(m1.state_dict().items(), m2.state_dict().items()):
            assert torch.equal(a, b), k

    def test_checkpoint_sets_encoder_only(self, tmp_path):
        pretrained = Encoder(TINY)
        init_parameters(pretrained, np.random.default_rng(9))
        wrapper = torch.nn.Module()
        wrapper.encoder = pretrained
        save_model_checkpoint(tmp_path / "pre.ckpt", wrapper, TINY, step=10,
                              extra={"kind": "pretext"})

        loaded = build_segmentor(TINY_SEG, tmp_path / "pre.ckpt",
                                 rng=np.random.default_rng(4))
        fresh = build_segmentor(TINY_SEG, rng=np.random.default_rng(4))
        pre = ParameterSet.from_module(pretrained)
        for name, tensor in loaded.encoder.state_dict().items():
            assert np.array_equal(tensor.numpy(), pre[name]), name
        # decoder freshly initialized, identical to the random build
        for (k, a), (_, b) in zip(loaded.head.state_dict().items(),
                                  fresh.head.state_dict().items()):
            assert torch.equal(a, b), k

    def test_architecture_unchanged_by_checkpoint(self, tmp_path):
        pretrained = Encoder(TINY)
        init_parameters(pretrained, np.random.default_rng(1))
        wrapper = torch.nn.Module()
        wrapper.encoder = pretrained
        save_model_checkpoint(tmp_path / "pre.ckpt", wrapper, TINY)
        loaded = build_segmentor(TINY_SEG, tmp_path / "pre.ckpt")
        fresh = build_segmentor(TINY_SEG)
        shapes = lambda m: [(k, tuple(v.shape)) for k, v in m.state_dict().items()]
        assert shapes(loaded) == shapes(fresh)

    def test_config_hash_mismatch_rejected(self, tmp_path):
        other = EncoderConfig(depths=(1, 1, 1, 1), heads=(2, 2, 2, 2),
                              embed_dim=16, input_shape=(16, 16, 16))
        model = Encoder(other)
        wrapper = torch.nn.Module()
        wrapper.encoder = model
        save_model_checkpoint(tmp_path / "pre.ckpt", wrapper, other)
        with pytest.raises(ValueError, match="incompatible"):
            build_segmentor(TINY_SEG, tmp_path / "pre.ckpt")

    def test_logit_shape(self):
        model = build_segmentor(TINY_SEG)
        out = model(torch.randn(2, 1, 16, 16, 16))
        assert tuple(out.shape) == (2, 3, 16, 16, 16)


class TestSegLoss:
    def test_one_hot_limit(self):
        labels = torch.randint(0, 3, (1, 4, 4, 4))
        logits = torch.full((1, 3, 4, 4, 4), -60.0, dtype=torch.float64)
        logits.scatter_(1, labels.unsqueeze(1), 60.0)
        assert float(seg_loss(logits, labels)) == pytest.approx(0.0, abs=1e-7)

    def test_uniform_ce_part_is_ln2(self):
        logits = torch.zeros(1, 2, 4, 4, 4, dtype=torch.float64)
        labels = (torch.arange(64).reshape(1, 4, 4, 4) % 2).long()
        ce = torch.nn.functional.cross_entropy(logits, labels)
        assert float(ce) == pytest.approx(math.log(2), abs=1e-12)
        # the combined loss is 0.5 * CE + 0.5 * (1 - dice)
        total = float(seg_loss(logits, labels))
        dice_part = 1.0 - (total - 0.5 * math.log(2)) / 0.5
        assert 0.0 <= dice_part <= 1.0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        logits = torch.from_numpy(rng.normal(size=(1, 3, 2, 2, 2)))
        labels = torch.from_numpy(rng.integers(0, 3, size=(1, 2, 2, 2)))
        perm = rng.permutation(8)
        l2 = logits.reshape(1, 3, -1)[:, :, perm].reshape(1, 3, 2, 2, 2)
        y2 = labels.reshape(1, -1)[:, perm].reshape(1, 2, 2, 2)
        assert float(seg_loss(logits, labels)) == pytest.approx(
            float(seg_loss(l2, y2)), abs=1e-12
        )

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            seg_loss(torch.zeros(1, 3, 2, 2, 2), torch.full((1, 2, 2, 2), 3))

    def test_tumor_mode_binary_path(self):
        logits = torch.full((1, 1, 4, 4, 4), -50.0, dtype=torch.float64)
        labels = torch.zeros(1, 4, 4, 4, dtype=torch.long)
        assert float(seg_loss(logits, labels, "tumor")) < 1e-6
        with pytest.raises(ValueError, match="binary"):
            seg_loss(torch.zeros(1, 1, 2, 2, 2), torch.full((1, 2, 2, 2), 2), "tumor")

    def test_gradient_matches_finite_differences(self):
        model = Segmentor(TINY_SEG).double()
        init_parameters(model, np.random.default_rng(2))
        model.eval()  # freeze batch-norm stats so the loss is a pure function
        rng = np.random.default_rng(3)
        x = torch.from_numpy(rng.random((2, 1, 16, 16, 16)))
        y = torch.from_numpy(rng.integers(0, 3, size=(2, 16, 16, 16)))

        def loss_fn():
            return seg_loss(model(x), y)

        err = finite_difference_check(loss_fn, list(model.parameters()),
                                      n_samples=10, rng=np.random.default_rng(4))
        assert err < 1e-4, err


class TestSampleCrops:
    def _phantomish(self, shape=(24, 24, 24)):
        vox = np.random.default_rng(0).random(shape).astype(np.float32)
        lab = np.zeros(shape, dtype=np.int64)
        lab[10:14, 10:14, 10:14] = 1
        return vox, lab

    def test_one_to_one_ratio(self):
        vox, lab = self._phantomish()
        batch = sample_crops(vox, lab, (8, 8, 8), 10, 0.5, np.random.default_rng(1))
        flags = [fg for _, _, fg in batch.crops]
        assert sum(flags) >= 5  # background crops may incidentally touch labels

    def test_foreground_crops_contain_foreground(self):
        vox, lab = self._phantomish()
        rng = np.random.default_rng(2)
        batch = sample_crops(vox, lab, (8, 8, 8), 1000, 1.0, rng)
        assert all(l.any() for _, l, _ in batch.crops)

    def test_whole_volume_crop(self):
        vox, lab = self._phantomish((16, 16, 16))
        batch = sample_crops(vox, lab, (16, 16, 16), 2, 0.5,
                             np.random.default_rng(0))
        assert np.array_equal(batch.crops[0][0], vox)

    def test_empty_labels_warns(self):
        vox = np.zeros((16, 16, 16), dtype=np.float32)
        lab = np.zeros((16, 16, 16), dtype=np.int64)
        with pytest.warns(UserWarning, match="no foreground"):
            batch = sample_crops(vox, lab, (8, 8, 8), 4, 0.5,
                                 np.random.default_rng(0))
        assert all(not fg for _, _, fg in batch.crops)

    def test_oversized_crop_rejected(self):
        vox, lab = self._phantomish((16, 16, 16))
        with pytest.raises(ValueError, match="exceeds"):
            sample_crops(vox, lab, (32, 32, 32), 1, 0.5, np.random.default_rng(0))


class TestSlidingWindow:
    def test_double_length_overlap_half_gives_three_starts(self):
        assert window_starts(32, 16, 0.5) == [0, 8, 16]

    def test_coverage_always_complete(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            length = int(rng.integers(16, 64))
            window = int(rng.integers(8, 33))
            overlap = float(rng.uniform(0, 0.9))
            starts = window_starts(length, window, overlap)
            cover = np.zeros(max(length, window))
            for s in starts:
                cover[s:s + window] += 1
            assert cover[:length].min() >= 1

    def test_matches_direct_forward_when_volume_equals_window(self):
        model = build_segmentor(TINY_SEG, rng=np.random.default_rng(0))
        vox = np.random.default_rng(1).random((16, 16, 16)).astype(np.float32)
        tiled = sliding_window_logits(model, vox, 0.5)
        model.eval()
        with torch.no_grad():
            direct = model(torch.from_numpy(vox)[None, None])[0].numpy()
        assert np.array_equal(tiled, direct.astype(np.float64))

    def test_constant_model_uniform_labels(self):
        model = build_segmentor(TINY_SEG, rng=np.random.default_rng(0))
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.copy_(torch.tensor([0.0, 5.0, -1.0]))
        vox = np.random.default_rng(2).random((24, 20, 18)).astype(np.float32)
        pred = sliding_window_infer(model, vox, 0.5)
        assert np.all(pred == 1)

    def test_small_volume_reflect_padded(self):
        model = build_segmentor(TINY_SEG, rng=np.random.default_rng(0))
        vox = np.random.default_rng(3).random((10, 16, 12)).astype(np.float32)
        pred = sliding_window_infer(model, vox, 0.5)
        assert pred.shape == (10, 16, 12)

    def test_bad_overlap_rejected(self):
        with pytest.raises(ValueError, match="overlap"):
            window_starts(32, 16, 1.0)


class TestFinetuneRun:
    def test_shot_sets_nested(self):
        five = select_shots(40, 5, seed=11)
        ten = select_shots(40, 10, seed=11)
        assert set(five) <= set(ten)

    def test_shots_exceeding_pool_rejected(self):
        with pytest.raises(ValueError, match="shots"):
            select_shots(4, 5, seed=0)

    def test_zero_epochs_returns_init(self):
        model = build_segmentor(TINY_SEG, rng=np.random.default_rng(7))
        before = ParameterSet.from_module(model)
        params, record = finetune_run(model, tiny_data(4), tiny_data(2),
                                      shots=2, epochs=0, seed=0)
        assert record.train_loss == [] and record.val_epochs == []
        for k in before:
            assert np.array_equal(before[k], params[k])

    def test_empty_validation_rejected(self):
        model = build_segmentor(TINY_SEG)
        with pytest.raises(ValueError, match="validation"):
            finetune_run(model, tiny_data(4), [], shots=2, epochs=1, seed=0)

    def test_record_and_determinism(self):
        def one_run():
            model = build_segmentor(TINY_SEG, rng=np.random.default_rng(1))
            return finetune_run(
                model, tiny_data(4, seed=5), tiny_data(2, seed=6),
                shots=3, epochs=4, seed=2, eval_every=2, batch_size=2,
            )

        p1, r1 = one_run()
        p2, r2 = one_run()
        assert r1.train_loss == r2.train_loss
        assert r1.val_dsc == r2.val_dsc
        assert r1.val_epochs == [1, 3]
        assert r1.best_epoch is not None
        for k in p1:
            assert np.array_equal(p1[k], p2[k]), k

    def test_early_stopping_triggers(self):
        model = build_segmentor(TINY_SEG, rng=np.random.default_rng(1))
        # random labels cannot be learned; patience 1 with eval every epoch
        # stops as soon as validation fails to improve
        _, record = finetune_run(
            model, tiny_data(2, seed=5), tiny_data(2, seed=6),
            shots=2, epochs=30, seed=2, eval_every=1, early_stop_patience=1,
            base_lr=0.0,
        )
        assert record.early_stop_epoch is not None
        assert len(record.train_loss) < 30

    def test_write_record(self, tmp_path):
        model = build_segmentor(TINY_SEG, rng=np.random.default_rng(1))
        _, record = finetune_run(model, tiny_data(2), tiny_data(1),
                                 shots=2, epochs=2, seed=0, eval_every=1)
        finetune.write_train_record(tmp_path / "rec.csv", record)
        lines = (tmp_path / "rec.csv").read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,val_dsc"
        assert len(lines) == len(record.train_loss) + 1


class TestEvaluate:
    def test_perfect_prediction_scores_one(self):
        labels = np.zeros((16, 16, 16), dtype=np.int64)
        labels[4:8] = 1
        labels[10:12] = 2

        class Oracle:
            cfg = TINY_SEG

            def eval(self):
                return self

        # bypass the model: evaluate dice directly on ground truth
        from voxbench.finetune import mean_foreground_dice

        assert mean_foreground_dice(labels, labels, 3) == 1.0
