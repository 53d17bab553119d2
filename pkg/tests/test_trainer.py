import csv

import numpy as np
import pytest

from hierinv import trainer
from hierinv.config import Config
from hierinv.io import load_checkpoint, render_synthetic
from hierinv.objectives import overall_loss
from hierinv import augment as aug
from hierinv.trainer import SGD, build_model, lr_at, pretrain, sgd_step, stage_losses

TINY = {"model.width": "4", "model.embed_dim": "4", "model.proj_dim": "8", "model.pred_hidden": "4",
        "train.batch_size": "8", "train.epochs": "1"}


def tiny_config(**extra):
    sets = dict(TINY)
    sets.update({k.replace("__", "."): str(v) for k, v in extra.items()})
    return Config().with_overrides(sets)


def tiny_images(n=16, seed=0):
    return render_synthetic(n, 10, seed)[0].astype(np.float32) / 255


def test_lr_schedule_values():
    assert lr_at(0, 100, 0.05, 256) == pytest.approx(0.05)
    assert lr_at(100, 100, 0.05, 256) == pytest.approx(0.0, abs=1e-15)
    assert lr_at(50, 100, 0.05, 64) == pytest.approx(0.00625)
    with pytest.raises(ValueError):
        lr_at(101, 100)


def test_sgd_matches_recurrence_oracle():
    rng = np.random.default_rng(0)
    p0 = rng.standard_normal(5)
    grads = [rng.standard_normal(5) for _ in range(3)]
    p, v = p0.copy(), np.zeros(5)
    for g in grads:
        sgd_step([p], [g], [v], lr=0.1, momentum=0.9, weight_decay=0.01)
    q, u = p0.copy(), np.zeros(5)
    for g in grads:
        for k in range(5):
            u[k] = 0.9 * u[k] + g[k] + 0.01 * q[k]
            q[k] = q[k] - 0.1 * u[k]
    np.testing.assert_allclose(p, q, rtol=0, atol=1e-15)
    np.testing.assert_allclose(v, u, rtol=0, atol=1e-15)


def test_weight_decay_only_on_weights():
    model = build_model(tiny_config())
    opt = SGD(list(model.named_parameters()), weight_decay=0.5)
    by_name = dict(zip(opt.names, opt.weight_decay))
    assert by_name["backbone.stage1.conv0.weight"] == 0.5
    assert by_name["backbone.stage1.bn0.gamma"] == 0.0
    assert by_name["head.1.fc0.bias"] == 0.0
    assert by_name["adapter.1.block0.conv.weight"] == 0.5


def test_overall_gradient_on_stage2_only_parameter_equals_stage2_backward():
    cfg = tiny_config()
    model = build_model(cfg).train()
    pairs = aug.generate_pairs(tiny_images(16)[:8], cfg.pipelines(), np.random.default_rng(0))
    params = dict(model.named_parameters())
    probe = ["head.2.fc0.weight", "adapter.2.block0.conv.weight", "predictor.2.fc1.bias"]

    def grads_of(which):
        model.zero_grad()
        losses = stage_losses(model, pairs)
        target = overall_loss(losses).tensor if which == "all" else losses[1]
        target.backward()
        return {n: params[n].grad.copy() for n in probe}, losses

    total, losses = grads_of("all")
    alone, _ = grads_of("L2")
    for n in probe:
        assert total[n].tobytes() == alone[n].tobytes(), n
    report = overall_loss(losses)
    vals = [l.data.reshape(()) for l in losses]
    assert report.overall.tobytes() == (((vals[0] + vals[1]) + vals[2]) + vals[3]).tobytes()


def test_pretrain_writes_metrics_and_checkpoints(tmp_path):
    cfg = tiny_config(train__epochs=2, train__ckpt_every=1)
    result = pretrain(tiny_images(16), cfg, tmp_path)
    rows = list(csv.reader(open(result.metrics)))
    assert rows[0] == trainer.METRICS_HEADER
    assert len(rows) == 1 + 2 * 2
    assert float(rows[-1][2]) == pytest.approx(lr_at(3, 4, 0.05, 8))
    assert (tmp_path / "epoch001.haug").exists() and (tmp_path / "epoch002.haug").exists()
    model, optim, stored = load_checkpoint(result.checkpoint)
    assert stored.to_text() == cfg.to_text()
    assert set(optim) == {n for n, _ in model.named_parameters()}


def test_pretrain_is_deterministic(tmp_path):
    cfg = tiny_config()
    a = pretrain(tiny_images(16), cfg, tmp_path / "a")
    b = pretrain(tiny_images(16), cfg, tmp_path / "b")
    assert a.final.overall.tobytes() == b.final.overall.tobytes()
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    c = pretrain(tiny_images(16), tiny_config(train__seed=1), tmp_path / "c")
    assert c.checkpoint.read_bytes() != a.checkpoint.read_bytes()


def test_shuffle_order_depends_on_seed_and_epoch():
    a = trainer.shuffle_order(0, 0, 20)
    assert sorted(a) == list(range(20))
    assert np.array_equal(a, trainer.shuffle_order(0, 0, 20))
    assert not np.array_equal(a, trainer.shuffle_order(0, 1, 20))
    assert not np.array_equal(a, trainer.shuffle_order(1, 0, 20))


def test_non_finite_loss_saves_snapshot(tmp_path, monkeypatch):
    real = trainer.stage_losses

    def poisoned(*args, **kw):
        losses = real(*args, **kw)
        return [losses[0] * float("nan")] + losses[1:]

    monkeypatch.setattr(trainer, "stage_losses", poisoned)
    with pytest.raises(FloatingPointError):
        pretrain(tiny_images(16), tiny_config(), tmp_path)
    assert (tmp_path / "nan_snapshot.haug").exists()


def test_pretrain_needs_one_full_batch():
    with pytest.raises(ValueError):
        pretrain(tiny_images(16)[:4], tiny_config())


def test_barlow_objective_runs():
    result = pretrain(tiny_images(16), tiny_config(train__objective="barlow"))
    assert np.isfinite(result.final.overall)
    assert result.final.kind == "barlow"
