import dataclasses

import numpy as np
import pytest

from facedet.data import SynthConfig, gen_synthetic
from facedet.net import BackboneSpec
from facedet.pipeline import (FULL_SCALE_REFERENCE, TABLE2_ROWS, FaceDetector,
                              PipelineConfig, TrainerConfig, TrainState,
                              config_for_row, config_from_dict, config_to_dict,
                              detect_dataset, detect_image, load_config,
                              save_config, stage_mine, stage_pretrain,
                              train_step)
from facedet.scaling import ScalePolicy


def tiny_config(**overrides):
    base = PipelineConfig(
        backbone=BackboneSpec(channels=(4, 6, 8), downsamples=(4, 2, 2)),
        trainer=TrainerConfig(pretrain_iterations=5, finetune_iterations=5,
                              pretrain_lr=0.01, finetune_lr=0.01, head_hidden=16),
        pretrain_policy=ScalePolicy(targets=(64.0,), cap=107.0),
        finetune_policy=ScalePolicy(targets=(51.0, 64.0), cap=107.0),
        test_policy=ScalePolicy(targets=(64.0,), cap=107.0),
        synth=SynthConfig(num_images=6, image_size=64, max_face=40),
    )
    return dataclasses.replace(base, **overrides) if overrides else base


def tiny_dataset(n=4, seed=0):
    return gen_synthetic(SynthConfig(num_images=n, image_size=64, max_face=40), seed)


class TestConfig:
    def test_reference_values_recorded(self):
        assert FULL_SCALE_REFERENCE["pretrain_iterations"] == 110_000
        assert FULL_SCALE_REFERENCE["mining_iterations"] == 100_000
        assert FULL_SCALE_REFERENCE["finetune_iterations"] == 40_000
        assert FULL_SCALE_REFERENCE["pretrain_lr"] == 0.0001
        assert FULL_SCALE_REFERENCE["mining_lr"] == 0.0001
        assert FULL_SCALE_REFERENCE["finetune_lr"] == 0.001
        assert FULL_SCALE_REFERENCE["anchor_sizes"] == [64, 128, 256, 512]
        assert FULL_SCALE_REFERENCE["blob_norm"] == 4700.0

    def test_default_detection_thresholds(self):
        cfg = PipelineConfig()
        assert cfg.detection.score_thr == 0.8
        assert cfg.detection.nms_thr == 0.3
        assert cfg.detection.export_floor == 0.001
        assert cfg.detection.pre_nms_test == 300
        assert cfg.detection.post_nms_test == 100
        assert cfg.sampling.fg_fraction == 0.25
        assert cfg.concat.target_norm == 4700.0

    def test_json_round_trip(self, tmp_path):
        cfg = tiny_config()
        path = tmp_path / "cfg.json"
        save_config(cfg, path)
        assert load_config(path) == cfg

    def test_dict_round_trip(self):
        cfg = PipelineConfig()
        assert config_from_dict(config_to_dict(cfg)) == cfg

    def test_unknown_top_level_key(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            config_from_dict({"nonsense": 1})

    def test_unknown_nested_key(self):
        with pytest.raises(ValueError, match="detection"):
            config_from_dict({"detection": {"bogus": 1}})

    def test_invalid_value_rejected(self):
        with pytest.raises(ValueError):
            config_from_dict({"detection": {"score_thr": 1.5}})


class TestAblationGrid:
    def test_seven_rows(self):
        assert len(TABLE2_ROWS) == 7
        assert [r.id for r in TABLE2_ROWS] == [1, 2, 3, 4, 5, 6, 7]

    def test_row_flag_matrix(self):
        flags = [(r.n_anchors, r.pretrain, r.mining, r.concat, r.multiscale)
                 for r in TABLE2_ROWS]
        assert flags == [
            (9, False, False, False, False),
            (12, False, False, False, False),
            (12, False, False, True, False),
            (12, True, False, False, False),
            (12, True, True, False, False),
            (12, True, True, True, False),
            (12, True, True, True, True),
        ]

    def test_nine_anchor_row_drops_smallest_size(self):
        base = PipelineConfig()
        cfg = config_for_row(base, TABLE2_ROWS[0])
        assert cfg.anchors.sizes == base.anchors.sizes[1:]
        assert cfg.anchors.per_location == 9

    def test_final_row_enables_everything(self):
        cfg = config_for_row(PipelineConfig(), TABLE2_ROWS[6])
        assert cfg.use_pretrain and cfg.use_mining
        assert cfg.use_concat and cfg.use_multiscale
        assert cfg.anchors.per_location == 12

    def test_rejects_odd_anchor_count(self):
        from facedet.pipeline import AblationRow
        with pytest.raises(ValueError):
            config_for_row(PipelineConfig(), AblationRow(8, 6, True, True, True, True))


class TestModel:
    def test_rpn_output_matches_anchor_grid(self, rng):
        cfg = tiny_config()
        model = FaceDetector(cfg, rng)
        from facedet.tensor import Tensor
        taps = model.taps(Tensor(rng.uniform(0, 1, (1, 1, 64, 64))))
        logits, deltas, (w, h) = model.rpn_forward(taps)
        a = cfg.anchors.per_location
        assert logits.shape == (h * w * a, 2)
        assert deltas.shape == (h * w * a, 4)

    def test_plain_head_when_concat_disabled(self, rng):
        model = FaceDetector(tiny_config(use_concat=False), rng)
        assert model.concat_head is None

    def test_save_load_bit_identical(self, tmp_path, rng):
        cfg = tiny_config()
        model = FaceDetector(cfg, rng)
        path = tmp_path / "m.fdw"
        model.save(path)
        other = FaceDetector(cfg, np.random.default_rng(999))
        other.load(path)
        for k, v in model.parameters().items():
            assert np.array_equal(v.data, other.parameters()[k].data)

    def test_load_rejects_mismatched_architecture(self, tmp_path, rng):
        model = FaceDetector(tiny_config(), rng)
        path = tmp_path / "m.fdw"
        model.save(path)
        other = FaceDetector(tiny_config(use_concat=False), np.random.default_rng(0))
        with pytest.raises(ValueError):
            other.load(path)


class TestTraining:
    def test_train_step_returns_finite_loss(self, rng):
        cfg = tiny_config()
        model = FaceDetector(cfg, rng)
        rec, img = tiny_dataset(1)[0]
        value = train_step(model, rec, img, cfg.pretrain_policy, rng, lr=0.01)
        assert np.isfinite(value) and value > 0

    def test_stage_pretrain_records_losses(self, rng):
        cfg = tiny_config()
        state = TrainState()
        stage_pretrain(cfg, tiny_dataset(3), rng, state=state)
        assert len(state.losses) == cfg.trainer.pretrain_iterations
        assert all(np.isfinite(v) for v in state.losses)

    def test_checkpoint_resume_bit_identical(self, tmp_path):
        cfg = tiny_config()
        data = tiny_dataset(3)
        path = tmp_path / "ckpt.fdw"
        rng = np.random.default_rng(cfg.seed)
        model = stage_pretrain(cfg, data, rng, checkpoint_path=path)
        resumed = FaceDetector(cfg, np.random.default_rng(42))
        resumed.load(path)
        for k, v in model.parameters().items():
            assert np.array_equal(v.data, resumed.parameters()[k].data)

    def test_mining_uses_thresholds(self, rng):
        cfg = tiny_config()
        model = FaceDetector(cfg, rng)
        data = tiny_dataset(2)
        store = stage_mine(model, data)
        for image_id, hards in store.items():
            assert all(h.score > cfg.mining.score_thr for h in hards)
            assert all(h.image_id == image_id for h in hards)


class TestDetection:
    def test_detections_in_original_frame(self, rng):
        cfg = tiny_config()
        model = FaceDetector(cfg, rng)
        rec, img = tiny_dataset(1)[0]
        dets = detect_image(model, img, rec, export=True)
        for d in dets:
            b = d.region
            assert 0 <= b.x1 <= b.x2 <= rec.width
            assert 0 <= b.y1 <= b.y2 <= rec.height
            assert d.score > cfg.detection.export_floor

    def test_export_floor_vs_score_threshold(self, rng):
        cfg = tiny_config()
        model = FaceDetector(cfg, rng)
        rec, img = tiny_dataset(1)[0]
        strict = detect_image(model, img, rec, export=False)
        assert all(d.score > cfg.detection.score_thr for d in strict)

    def test_detect_dataset_sorted_and_deterministic(self, rng):
        cfg = tiny_config()
        model = FaceDetector(cfg, rng)
        data = tiny_dataset(3)
        a = detect_dataset(model, list(reversed(data)), export=True)
        b = detect_dataset(model, data, export=True)
        assert [name for name, _ in a] == sorted(name for name, _ in a)
        assert a == b
