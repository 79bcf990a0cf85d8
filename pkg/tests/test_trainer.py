from dataclasses import replace

import numpy as np
import pytest

from cdnet import dataset as ds
from cdnet import model, trainer
from cdnet import nn_core as nn
from cdnet.evaluator import stress


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    recs = ds.make_synthetic_dataset(root, n_contents=10, pairs_per_content=4, size=20, seed=3)
    return root, recs


def small_cfg(**kw):
    base = dict(crop=16, epochs=3, batch_size=4, seed=0)
    base.update(kw)
    return trainer.TrainConfig(**base)


def test_mse_loss_examples():
    assert float(trainer.mse_loss([1.0, 2.0], [1.0, 2.0]).data) == 0.0
    assert float(trainer.mse_loss([3.0], [1.0]).data) == 4.0
    assert float(trainer.mse_loss([0.0, 2.0], [0.0, 0.0]).data) == 2.0
    assert float(trainer.mse_loss([0.0, 2.0], [0.0, 0.0], kind="mae").data) == 1.0
    with pytest.raises(ValueError):
        trainer.mse_loss([], [])
    with pytest.raises(ValueError):
        trainer.mse_loss([1.0], [1.0, 2.0])


def test_lr_schedule():
    cfg = trainer.TrainConfig()
    assert trainer.lr_at(0, cfg) == 1e-3
    assert trainer.lr_at(49, cfg) == 1e-3
    assert trainer.lr_at(50, cfg) == 5e-4
    assert trainer.lr_at(100, cfg) == 2.5e-4


def test_config_validation_and_text(tmp_path):
    with pytest.raises(ValueError):
        trainer.TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        trainer.TrainConfig(train_fraction=0.5)
    with pytest.raises(ValueError):
        trainer.TrainConfig(loss="huber")
    cfg = trainer.TrainConfig(epochs=7, learning_rate=2e-3, checkpoint_dir="x")
    assert trainer.TrainConfig.from_text(cfg.to_text()) == cfg
    f = tmp_path / "c.txt"
    f.write_text("# comment\nepochs = 4  # trailing\ncrop=64\n")
    got = trainer.TrainConfig.from_file(f)
    assert got.epochs == 4 and got.crop == 64 and got.batch_size == 8
    with pytest.raises(ValueError, match="unknown key"):
        trainer.TrainConfig.from_text("epoch = 3\n")
    with pytest.raises(ValueError, match="expects int"):
        trainer.TrainConfig.from_text("epochs = many\n")


def test_train_history_and_selection(tiny):
    _, recs = tiny
    ckpt, hist = trainer.train(small_cfg(epochs=4), recs)
    assert len(hist) == 4
    vs = hist.val_stress
    assert hist.best_epoch == int(np.argmin(vs))
    # the returned checkpoint reproduces the best validation STRESS
    split = trainer.assign_splits(recs, small_cfg())
    val = [r for r in split if r.split == "val"]
    cache = ds.ImageCache()
    e = [model.overall_cd(*cache(r), ckpt.params)[0] for r in val]
    assert stress(e, [r.delta_v for r in val]) == pytest.approx(min(vs), rel=1e-9)
    assert ckpt.metadata["best_epoch"] == hist.best_epoch


def test_training_reduces_loss(tiny):
    _, recs = tiny
    _, hist = trainer.train(small_cfg(epochs=5), recs)
    assert min(hist.train_loss[1:]) < hist.train_loss[0]


def test_train_deterministic(tiny, tmp_path):
    _, recs = tiny
    c1, h1 = trainer.train(small_cfg(checkpoint_dir=str(tmp_path / "a")), recs)
    c2, h2 = trainer.train(small_cfg(checkpoint_dir=str(tmp_path / "b")), recs)
    assert h1.same_values(h2)
    assert (tmp_path / "a" / "best.ckpt").read_bytes() == (tmp_path / "b" / "best.ckpt").read_bytes()
    text = (tmp_path / "a" / "history.csv").read_text().splitlines()
    assert text[0] == "epoch,train_loss,val_stress,val_plcc,val_srcc,lr,train_stress,train_stress_full"
    assert len(text) == 4
    cfg = trainer.TrainConfig.from_file(tmp_path / "a" / "config.txt")
    assert cfg.epochs == 3


def test_one_step_changes_every_layer(tiny):
    _, recs = tiny
    before = model.build(0).arrays()
    ckpt, _ = trainer.train(small_cfg(epochs=1, batch_size=64), recs)
    after = ckpt.params.arrays()
    for k in before:
        assert not np.array_equal(before[k], after[k]), k


def test_batch_accumulation_equals_mean_loss(tiny):
    # per-pair backward with 1/B scaling gives the batch-mean gradient
    _, recs = tiny
    cache = ds.ImageCache()
    pairs = [cache(r) for r in recs[:3]]
    targets = [r.delta_v for r in recs[:3]]
    p1 = model.build(0, dtype=np.float64)
    vals = [model.overall_cd_tensor(model.as_input(a, np.float64), model.as_input(b, np.float64),
                                    p1, eps=model.TRAIN_EPS)[0] for a, b in pairs]
    nn.backward(trainer.mse_loss(vals, targets))
    p2 = model.build(0, dtype=np.float64)
    for (a, b), t in zip(pairs, targets):
        v, _ = model.overall_cd_tensor(model.as_input(a, np.float64), model.as_input(b, np.float64),
                                       p2, eps=model.TRAIN_EPS)
        nn.backward(nn.mul(trainer.mse_loss([v], [t]), np.float64(1 / 3)))
    for k, t in p1.named().items():
        np.testing.assert_allclose(p2.named()[k].grad, t.grad, rtol=1e-10, atol=1e-14)


def test_non_finite_loss_aborts(tiny):
    _, recs = tiny
    split = trainer.assign_splits(recs, small_cfg())
    first = next(i for i, r in enumerate(split) if r.split == "train")
    split[first] = replace(split[first], delta_v=float("inf"))
    with pytest.raises(trainer.TrainingAbort, match="epoch 0, batch"):
        trainer.train(small_cfg(epochs=1), split)


def test_crop_larger_than_image_errors(tiny):
    _, recs = tiny
    with pytest.raises(ValueError, match="smaller"):
        trainer.train(small_cfg(crop=64, epochs=1), recs)


def test_cross_validate(tiny):
    _, recs = tiny
    cfg = small_cfg(epochs=1)
    res = trainer.cross_validate(cfg, recs, repeats=2)
    assert len(res.per_repeat) == 2
    all_mean = [r for r in res.mean if r.subset == "all"][0]
    per = [[r for r in rep if r.subset == "all"][0].stress for rep in res.per_repeat]
    assert all_mean.stress == pytest.approx(np.mean(per), abs=1e-9)
    # repeats=1 equals a direct train + evaluate
    one = trainer.cross_validate(cfg, recs, repeats=1)
    split = ds.split_content_independent(recs, cfg.fractions, cfg.seed)
    ckpt, _ = trainer.train(cfg, split)
    test = [r for r in split if r.split == "test"]
    cache = ds.ImageCache()
    e = [model.overall_cd(*cache(r), ckpt.params)[0] for r in test]
    assert [r for r in one.per_repeat[0] if r.subset == "all"][0].stress == pytest.approx(
        stress(e, [r.delta_v for r in test]), abs=1e-12)
    with pytest.raises(ValueError):
        trainer.cross_validate(cfg, recs, repeats=0)


def test_early_stop_returns_model_meeting_targets(tiny):
    _, recs = tiny
    cfg = small_cfg(epochs=5, target_train_stress=1e3, target_val_stress=1e3)
    ckpt, hist = trainer.train(cfg, recs)
    assert len(hist) == 1 and hist.best_epoch == 0
    split = trainer.assign_splits(recs, cfg)
    tr = [r for r in split if r.split == "train"]
    cache = ds.ImageCache()
    e = [model.overall_cd(*cache(r), ckpt.params)[0] for r in tr]
    assert stress(e, [r.delta_v for r in tr]) == pytest.approx(hist.epochs[0].train_stress_full)


def test_unmet_targets_run_all_epochs(tiny):
    _, recs = tiny
    _, hist = trainer.train(small_cfg(epochs=2, target_train_stress=1e-9,
                                      target_val_stress=1e3), recs)
    assert len(hist) == 2
    assert all(np.isfinite(e.train_stress_full) for e in hist.epochs)


def test_no_targets_skips_full_train_pass(tiny):
    _, recs = tiny
    _, hist = trainer.train(small_cfg(epochs=1), recs)
    assert np.isnan(hist.epochs[0].train_stress_full)


def test_shared_reference_gradient_matches_separate_pairs(tiny):
    _, recs = tiny
    cache = ds.ImageCache()
    batch = [r for r in recs if r.content_id == recs[0].content_id][:3]
    # full-size crops, so all three references coincide
    groups = trainer._group_by_reference(batch, cache, 20, np.random.default_rng(0))
    assert [len(m) for _, m in groups] == [3]
    a, members = groups[0]
    separate = [(a.copy(), [m]) for m in members]
    p1 = model.build(0, dtype=np.float64)
    p2 = model.build(0, dtype=np.float64)
    l1, v1 = trainer._accumulate_batch(p1, groups, 3)
    l2, v2 = trainer._accumulate_batch(p2, separate, 3)
    assert l1 == pytest.approx(l2, rel=1e-12)
    np.testing.assert_allclose(v1, v2, rtol=1e-12)
    for k, t in p1.named().items():
        np.testing.assert_allclose(t.grad, p2.named()[k].grad, rtol=1e-10, atol=1e-14)


def test_distinct_reference_crops_are_not_grouped(tiny):
    _, recs = tiny
    batch = [r for r in recs if r.content_id == recs[0].content_id][:4]
    groups = trainer._group_by_reference(batch, ds.ImageCache(), 8, np.random.default_rng(1))
    assert sum(len(m) for _, m in groups) == 4
    keys = {a.tobytes() for a, _ in groups}
    assert len(keys) == len(groups)
