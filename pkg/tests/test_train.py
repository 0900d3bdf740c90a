import json

import numpy as np
import pytest

from mdfn.checkpoint import load_checkpoint
from mdfn.data import ImageDataset, SceneSpec, SyntheticDataset
from mdfn.train import RunConfig, Trainer, TrainingDiverged, learning_rate, load_model, train

TINY = dict(train_count=4, batch_size=2, iterations=4, warmup_iterations=2, milestones=(3,), eval_count=4,
            checkpoint_every=2, final_eval=False)


def tiny(**kw) -> RunConfig:
    return RunConfig(**{**TINY, **kw})


def test_learning_rate_schedule():
    cfg = RunConfig(lr=0.1, warmup_iterations=4, milestones=(10, 20), gamma=0.1)
    assert [learning_rate(cfg, i) for i in range(4)] == pytest.approx([0.025, 0.05, 0.075, 0.1])
    assert learning_rate(cfg, 9) == pytest.approx(0.1)
    assert learning_rate(cfg, 10) == pytest.approx(0.01)
    assert learning_rate(cfg, 25) == pytest.approx(0.001)


def test_config_roundtrip_and_unknown_keys():
    cfg = tiny(seed=3, scene={"small_fraction": 0.5})
    again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    assert again.scene_spec().small_fraction == 0.5
    with pytest.raises(ValueError):
        RunConfig.from_dict({"learning_rate": 0.1})


def test_one_iteration_checkpoint_loads_bit_exactly(tmp_path):
    tr = Trainer(tiny(iterations=1))
    tr.run()
    path = tr.save(tmp_path / "one.ckpt")
    model = load_model(path)
    for k, v in tr.model.state_dict().items():
        assert np.array_equal(model.state_dict()[k], v)
    arrays, meta = load_checkpoint(path)
    assert meta["iteration"] == 1
    names = list(tr.model.named_parameters())
    for k, v in zip(names, tr.opt.velocity):
        assert np.array_equal(arrays[f"velocity/{k}"], v)


def test_variant_mismatch_on_load(tmp_path):
    tr = Trainer(tiny(iterations=0))
    path = tr.save(tmp_path / "i2.ckpt")
    with pytest.raises(ValueError, match="variant"):
        load_model(path, "mdfn-i1")
    assert load_model(path, "MDFN-I2").spec.variant == "mdfn-i2"


def test_loss_falls_on_a_tiny_set():
    tr = Trainer(tiny(iterations=60, warmup_iterations=5, milestones=()))
    losses = [r["total"] for r in tr.run()]
    assert np.mean(losses[-5:]) < 0.5 * np.mean(losses[:5])


def test_resume_reproduces_uninterrupted_run(tmp_path):
    cfg = tiny(iterations=6, flip=True)
    straight = Trainer(cfg)
    ref_log = straight.run()

    first = Trainer(cfg)
    head = first.run(until=3)
    first.save(tmp_path / "mid.ckpt")
    resumed = Trainer.resume(tmp_path / "mid.ckpt")
    tail = resumed.run()
    assert head + tail == ref_log
    for k, v in straight.model.state_dict().items():
        assert np.array_equal(resumed.model.state_dict()[k], v)


def test_nan_loss_aborts_with_diagnostics():
    spec = SceneSpec(seed=1)
    img, ann = SyntheticDataset(spec, 1)[0]
    bad = ImageDataset([(np.full_like(img, np.nan), ann)], spec)
    tr = Trainer(tiny(), dataset=bad)
    with pytest.raises(TrainingDiverged) as info:
        tr.step()
    err = info.value
    assert err.iteration == 0 and err.lr == pytest.approx(learning_rate(tr.cfg, 0))
    assert "grad-norm" in str(err) and "iteration 0" in str(err)


def test_identical_runs_give_identical_checkpoints(tmp_path):
    cfg = tiny(iterations=3, flip=True)
    train(cfg, tmp_path / "a")
    train(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()
    assert (tmp_path / "a" / "train_log.jsonl").read_text() == (tmp_path / "b" / "train_log.jsonl").read_text()


def test_train_writes_log_checkpoints_and_summary(tmp_path):
    cfg = tiny(final_eval=True)
    tr = train(cfg, tmp_path)
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(line)["iteration"] for line in lines] == list(range(cfg.iterations))
    assert sorted(p.name for p in tmp_path.glob("checkpoint_*.ckpt")) == ["checkpoint_000002.ckpt",
                                                                          "checkpoint_000004.ckpt"]
    summary = json.loads((tmp_path / "eval_summary.json").read_text())
    assert summary["iteration"] == tr.iteration == 4
    assert set(summary["train"]["mAP"]) == {f"{t:.2f}" for t in cfg.iou_thresholds}
    assert "held_out" in summary
