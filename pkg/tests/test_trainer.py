import dataclasses

import numpy as np
import pytest
import torch

from unicir.config import load_config
from unicir.errors import (
    ConfigError,
    CorruptCheckpointError,
    IncompatibleCheckpointError,
    PreprocessingIncompleteError,
    ValidationError,
)
from unicir.fusion import FusionParams, LossConfig, composed_loss, fused_queries
from unicir.pipeline import PreprocessedStore, load_records, make_backend
from unicir.trainer import (
    Checkpoint,
    TrainConfig,
    apply_backbone_state,
    backbone_state_of,
    load_checkpoint,
    save_checkpoint,
    train,
)


@pytest.fixture()
def toy_setup(toy_ws):
    cfg = load_config(toy_ws / "config.yaml", overrides=["backend.dim=24"])
    records = load_records(cfg)
    store = PreprocessedStore(cfg.cache_root, cfg.image_root, records)
    return cfg, records, store


def quick_cfg(**kw):
    defaults = dict(lr_backbone=1e-3, lr_head=1e-3, batch_size=16, tau=0.1, epochs=3, seed=0)
    defaults.update(kw)
    return TrainConfig(**defaults)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.lr_backbone == 1e-6
        assert cfg.lr_head == 1e-4
        assert cfg.batch_size == 16
        assert cfg.tau == 0.1

    def test_shoes_profile_overrides_learning_rates(self):
        cfg = TrainConfig(shoes_profile=True)
        assert cfg.lr_backbone == 5e-6
        assert cfg.lr_head == 5e-5

    def test_validation(self):
        with pytest.raises(ValidationError):
            TrainConfig(lr_head=0.0)
        with pytest.raises(ValidationError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValidationError):
            TrainConfig(epochs=-1)
        with pytest.raises(ConfigError):
            TrainConfig(optimizer="sgd")


class TestTraining:
    def test_same_seed_reproduces_loss_trajectory(self, toy_setup):
        cfg, records, store = toy_setup
        runs = []
        for _ in range(2):
            backend = make_backend(cfg)
            ckpt = train(records, backend, quick_cfg(), store)
            runs.append(ckpt.history)
        assert runs[0] == runs[1]  # exact equality, not approx

    def test_different_seed_changes_trajectory(self, toy_setup):
        cfg, records, store = toy_setup
        a = train(records, make_backend(cfg), quick_cfg(seed=0), store).history
        b = train(records, make_backend(cfg), quick_cfg(seed=1), store).history
        assert a != b

    def test_epochs_zero_returns_initialization(self, toy_setup):
        cfg, records, store = toy_setup
        backend = make_backend(cfg)
        init_state = backbone_state_of(backend)
        ckpt = train(records, backend, quick_cfg(epochs=0), store)
        assert ckpt.epoch == 0
        assert ckpt.history == []
        expected = FusionParams.initialize(backend.dim, seed=0)
        assert torch.equal(ckpt.fusion_params.W1, expected.W1)
        for k, v in ckpt.backbone_state.items():
            assert np.array_equal(v, init_state[k])

    def test_frozen_backbone_is_bit_identical(self, toy_setup):
        cfg, records, store = toy_setup
        backend = make_backend(cfg)
        before = backbone_state_of(backend)
        train(records, backend, quick_cfg(lr_backbone=0.0, epochs=2), store)
        after = backbone_state_of(backend)
        for k in before:
            assert np.array_equal(before[k], after[k]), f"{k} moved despite lr 0"

    def test_head_moves_even_with_frozen_backbone(self, toy_setup):
        cfg, records, store = toy_setup
        backend = make_backend(cfg)
        ckpt = train(records, backend, quick_cfg(lr_backbone=0.0, epochs=2), store)
        init = FusionParams.initialize(backend.dim, seed=0)
        assert not torch.equal(ckpt.fusion_params.W1, init.W1)

    def test_single_step_descends_on_its_batch(self, toy_setup):
        cfg, records, store = toy_setup
        batch = records[:8]
        lr = 1e-3
        for _ in range(12):  # halve until descent, per the sanity contract
            backend = make_backend(cfg)
            fusion = FusionParams.initialize(backend.dim, seed=0).requires_grad_(True)
            opt = torch.optim.AdamW(
                [
                    {"params": backend.parameter_groups()["backbone"], "lr": lr},
                    {"params": fusion.parameters(), "lr": lr},
                ]
            )

            def batch_loss():
                texts = [store.unified_text(r.triplet_id) for r in batch]
                ft = backend.encode_texts(texts)
                fv = backend.encode_images([store.visual_image(r.triplet_id) for r in batch])
                tg = backend.encode_images([store.target_image(r.target_image_id) for r in batch])
                loss, _ = composed_loss(fusion, ft, fv, tg, LossConfig(tau=0.1))
                return loss

            before = batch_loss()
            opt.zero_grad()
            before.backward()
            opt.step()
            with torch.no_grad():
                after = float(batch_loss())
            if after < float(before.detach()):
                return
            lr /= 2.0
        pytest.fail("no learning rate in the halving ladder decreased the batch loss")

    def test_missing_preprocessing_fails_before_any_step(self, toy_setup, tmp_path):
        cfg, records, store = toy_setup

        class EmptyStore:
            def unified_text(self, tid):
                raise KeyError(tid)

            def visual_image(self, tid):
                raise KeyError(tid)

            def target_image(self, iid):
                raise KeyError(iid)

        backend = make_backend(cfg)
        before = backbone_state_of(backend)
        with pytest.raises(PreprocessingIncompleteError):
            train(records, backend, quick_cfg(), EmptyStore())
        after = backbone_state_of(backend)
        for k in before:
            assert np.array_equal(before[k], after[k])

    def test_empty_manifest_rejected(self, toy_setup):
        cfg, _, store = toy_setup
        with pytest.raises(ValidationError):
            train([], make_backend(cfg), quick_cfg(), store)

    def test_partial_final_batch_kept(self, toy_setup):
        cfg, records, store = toy_setup
        # 32 records, batch 20 -> batches of 20 and 12; must not crash and
        # the epoch mean weights both
        ckpt = train(records, make_backend(cfg), quick_cfg(batch_size=20, epochs=1), store)
        assert len(ckpt.history) == 1

    def test_val_fn_selects_best_epoch(self, toy_setup):
        cfg, records, store = toy_setup
        scores = iter([1.0, 3.0, 2.0])

        def val_fn(ckpt):
            return next(scores)

        ckpt = train(records, make_backend(cfg), quick_cfg(epochs=3), store, val_fn=val_fn)
        assert ckpt.epoch == 2  # the 3.0-scoring snapshot after epoch 2


class TestCheckpointIO:
    def probe(self, backend, params, store, records):
        texts = [store.unified_text(r.triplet_id) for r in records[:4]]
        with torch.no_grad():
            ft = backend.encode_texts(texts)
            fv = backend.encode_images([store.visual_image(r.triplet_id) for r in records[:4]])
            fq, _ = fused_queries(params, ft, fv)
        return fq.numpy()

    def test_round_trip_forward_identical(self, toy_setup, tmp_path):
        cfg, records, store = toy_setup
        backend = make_backend(cfg)
        ckpt = train(records, backend, quick_cfg(epochs=1), store)
        before = self.probe(backend, ckpt.fusion_params, store, records)

        path = save_checkpoint(ckpt, tmp_path / "model.bin")
        loaded = load_checkpoint(path)
        fresh = make_backend(cfg)
        apply_backbone_state(fresh, loaded.backbone_state)
        after = self.probe(fresh, loaded.fusion_params, store, records)
        assert np.max(np.abs(before - after)) == 0.0

    def test_round_trip_metadata(self, toy_setup, tmp_path):
        cfg, records, store = toy_setup
        ckpt = train(records, make_backend(cfg), quick_cfg(epochs=2), store)
        loaded = load_checkpoint(save_checkpoint(ckpt, tmp_path / "m.bin"))
        assert loaded.epoch == 2
        assert loaded.history == ckpt.history
        assert loaded.config_snapshot == ckpt.config_snapshot
        assert loaded.rng_state == ckpt.rng_state

    def test_truncated_file_is_corrupt(self, toy_setup, tmp_path):
        cfg, records, store = toy_setup
        ckpt = train(records, make_backend(cfg), quick_cfg(epochs=0), store)
        path = save_checkpoint(ckpt, tmp_path / "m.bin")
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 64])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)

    def test_bad_magic_is_corrupt(self, tmp_path):
        p = tmp_path / "m.bin"
        p.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(p)

    def test_dim_mismatch_is_incompatible(self, toy_setup, tmp_path):
        cfg, records, store = toy_setup
        ckpt = train(records, make_backend(cfg), quick_cfg(epochs=0), store)
        path = save_checkpoint(ckpt, tmp_path / "m.bin")
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(path, expected_dim=999)

    def test_backbone_shape_mismatch_is_incompatible(self, toy_setup, tmp_path):
        cfg, records, store = toy_setup
        ckpt = train(records, make_backend(cfg), quick_cfg(epochs=0), store)
        other = make_backend(dataclasses.replace(cfg, backend_dim=16))
        with pytest.raises(IncompatibleCheckpointError):
            apply_backbone_state(other, ckpt.backbone_state)
