from dataclasses import asdict, replace

import pytest

from ordloc import experiments
from ordloc.config import RunConfig

from test_data import fake_source


@pytest.fixture
def small_cfg():
    cfg = RunConfig()
    return replace(cfg, data=replace(cfg.data, train_count=6, test_count=4, adapt_count=8, exemplary_size=2))


@pytest.fixture
def fake_data(monkeypatch):
    src = fake_source(per_digit=12)
    monkeypatch.setattr(experiments, "source", lambda root=None: src)
    return src


def test_transfer_adapts_on_unlabeled_training_images(monkeypatch, small_cfg, fake_data):
    seen = {}

    def fake_adapt(policy, model, pool, crops, cfg):
        seen["pool"] = pool
        return policy, []

    monkeypatch.setattr(experiments, "adapt_policy", fake_adapt)
    monkeypatch.setattr(experiments, "evaluate_corloc", lambda *a, **k: 0.0)
    experiments.transfer(small_cfg, None, "policy", 7, "random_patch", 0, fine_tune=False)
    pool = seen["pool"]
    assert len(pool) == small_cfg.data.adapt_count
    assert all(s.gt_box is None for s in pool)
    assert all(s.id.startswith("train-") for s in pool)
    assert len({s.id for s in pool}) == len(pool)


def test_reward_comparison_shares_iou_entropy_weight(monkeypatch, small_cfg, fake_data):
    configs = []

    def fake_stage2(cfg, train, model, seed):
        configs.append(cfg)
        return None, []

    monkeypatch.setattr(experiments, "train_stage2", fake_stage2)
    monkeypatch.setattr(experiments, "evaluate_corloc", lambda *a, **k: 0.5)
    cfg = replace(small_cfg, eval=replace(small_cfg.eval, iou_lambda2=0.25))
    out = experiments.reward_comparison(cfg, 0, model="model")
    assert set(out) == {"iou_signed", "iou_unsigned"}
    assert [c.reward for c in configs] == ["iou_signed", "iou_unsigned"]
    assert all(c.lambda2 == 0.25 for c in configs)
    signed, unsigned = (asdict(c) for c in configs)
    signed.pop("reward"), unsigned.pop("reward")
    assert signed == unsigned


def test_selective_trains_two_class_embedding(monkeypatch, small_cfg, fake_data):
    seen = {}

    def fake_stage1(cfg, train, seed):
        seen["stage1"], seen["train"] = cfg, train
        return "model", []

    def fake_stage2(cfg, train, model, seed):
        seen["queries"] = train
        return "policy", []

    monkeypatch.setattr(experiments, "train_stage1", fake_stage1)
    monkeypatch.setattr(experiments, "train_stage2", fake_stage2)
    monkeypatch.setattr(experiments, "evaluate_corloc", lambda *a, **k: 0.5)
    cfg = replace(small_cfg, eval=replace(small_cfg.eval, selective_epochs=7))
    experiments.selective(cfg, 160.0, 0)
    s1 = seen["stage1"]
    assert s1.selective and s1.margin2 == 160.0 and s1.epochs == 7
    assert all(set(s.boxes) == {3, 4} for s in seen["train"])
    assert all(q.label == cfg.data.query_digit for q in seen["queries"])
