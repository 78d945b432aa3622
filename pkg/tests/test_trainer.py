import json

import numpy as np
import pytest
import torch

from vfisr.loss import TABLE1_MASKS, LossWeights
from vfisr.synthdata import build_dataset, random_scene_specs
from vfisr.trainer import (
    AblationVariant,
    NonFiniteLossError,
    TrainConfig,
    ablation_grid,
    batch_loss,
    batches_for,
    build_network,
    evaluate_model,
    format_table,
    grad_audit,
    lr_at,
    overlap_disagreement,
    prepare,
    run_ablation,
    train,
)


@pytest.fixture(scope="module")
def samples():
    specs = random_scene_specs(2, seed=11, canvas=(48, 48), frame_count=19, max_disp=2.0)
    return build_dataset(specs, patch=32, frame_stride=10, seed=0)[1]


def tiny(**kw):
    base = dict(epochs=2, batch_size=2, base_channels=4, unet_depth=1, flow="zero", dtype="float64", lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_full_scale_schedule():
    cfg = TrainConfig.full_scale()
    assert (cfg.epochs, cfg.batch_size, cfg.base_channels) == (100, 8, 64)
    assert [lr_at(cfg, e) for e in (1, 79, 80, 89, 90, 100)] == pytest.approx([1e-4, 1e-4, 1e-5, 1e-5, 1e-6, 1e-6])


def test_config_validation():
    for bad in (dict(lr=0), dict(batch_size=0), dict(lr_drops=(5, 3)), dict(lr_drops=(30,)), dict(mask="z")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_batching_covers_each_sample_once():
    b = batches_for(2, 4, seed=0, epoch=1)
    assert len(b) == 1 and sorted(b[0].tolist()) == [0, 1]
    b = batches_for(10, 4, seed=0, epoch=3)
    assert [len(x) for x in b] == [4, 4, 2]
    assert sorted(np.concatenate(b).tolist()) == list(range(10))
    assert not np.array_equal(np.concatenate(b), np.concatenate(batches_for(10, 4, 0, 4)))


def test_prepare_layout(samples):
    data = prepare(samples, tiny())
    assert data.stacks.shape == (len(samples), 4, 29, 16, 16)
    assert sorted(data.truths) == [1, 2, 3]
    assert data.truths[3].shape == (len(samples), 7, 3, 32, 32)
    assert data.truths[1].shape[-2:] == (8, 8)
    assert prepare(samples, tiny(stack="frames", multi_scale=False)).stacks.shape[2] == 9


def test_one_step_per_batch_and_log(samples, tmp_path):
    data = prepare(samples, tiny())
    res = train(tiny(), data, out_dir=tmp_path)
    n_batches = 2 * int(np.ceil(len(samples) / 2))
    assert res.steps == res.batches == n_batches
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == res.steps
    rec = json.loads(lines[0])
    assert {"step", "epoch", "lr", "total", "L3_R1", "L1_TD2"} <= set(rec)


def test_training_is_deterministic(samples):
    data = prepare(samples, tiny())
    a = train(tiny(), data).records
    b = train(tiny(), data).records
    assert a == b


def test_resume_matches_uninterrupted(samples, tmp_path):
    cfg = tiny(epochs=3)
    data = prepare(samples, cfg)
    full = train(cfg, data).records
    train(cfg, data, out_dir=tmp_path, stop_after_epoch=1)
    resumed = train(cfg, data, out_dir=tmp_path, resume=tmp_path / "checkpoint.pt")
    assert [r["total"] for r in resumed.records] == [r["total"] for r in full if r["epoch"] > 1]
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(l) for l in lines] == full


def test_nan_loss_aborts_with_dump(samples, tmp_path):
    data = prepare(samples, tiny())
    data.stacks[0, 0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError) as e:
        train(tiny(), data, out_dir=tmp_path)
    assert e.value.dump_path is not None and e.value.dump_path.exists()


def test_patch_size_must_fit_network(samples):
    data = prepare(samples, tiny())
    with pytest.raises(ValueError):
        train(tiny(unet_depth=3), data)


def test_grad_audit_full_loss(samples):
    cfg = tiny()
    data = prepare(samples[:1], cfg)
    model = build_network(cfg.network_config(), seed=0, dtype=torch.float64)
    idx = torch.tensor([0])
    err = grad_audit(lambda m: batch_loss(m, data, idx, LossWeights(), "f").total, model)
    assert err < 1e-4


def test_grad_audit_masked_loss(samples):
    cfg = tiny()
    data = prepare(samples[:1], cfg)
    model = build_network(cfg.network_config(), seed=1, dtype=torch.float64)
    idx = torch.tensor([0])
    err = grad_audit(lambda m: batch_loss(m, data, idx, LossWeights(), "b").total, model, n_params=50)
    assert err < 1e-4


def test_evaluate_and_overlap(samples):
    cfg = tiny()
    data = prepare(samples, cfg)
    res = train(cfg, data)
    rep = evaluate_model(res.model, data, samples)
    assert (rep.vfisr_count, rep.sr_count) == (6 * len(samples), 3 * len(samples))
    assert overlap_disagreement(res.model, data) > 0


def test_ablation_presets():
    t1 = ablation_grid("table1")
    assert [v.mask for v in t1] == list("abcdef")
    assert all(v.multi_scale and v.stack == "frames" for v in t1)
    assert all(not v.multi_scale for v in ablation_grid("table4_1"))
    t2 = ablation_grid("table2")
    assert [(v.mask, v.multi_scale, v.stack) for v in t2] == [
        ("a", False, "frames"),
        ("f", False, "frames"),
        ("f", True, "frames"),
        ("f", True, "flow"),
        ("f", True, "full"),
    ]
    with pytest.raises(ValueError):
        ablation_grid("table9")


def test_run_ablation_rows_and_determinism(samples):
    grid = [AblationVariant("(a)", "a", False, "frames"), AblationVariant("(f)", "f", False, "frames")]
    base = tiny(epochs=1)
    rows = run_ablation(grid, base, samples, samples)
    again = run_ablation(grid, base, samples, samples)
    assert len(rows) == 2 and rows == again
    assert rows[0]["terms"] == ["R1"] and set(rows[1]["terms"]) == TABLE1_MASKS["f"]
    assert "(f)" in format_table(rows)
