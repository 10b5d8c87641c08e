import numpy as np
import pytest
import torch

from ordloc import adapt, agent, checkpoint
from ordloc.data import ExemplaryMode, build_exemplary_set, strip_boxes, synth_cmnist
from ordloc.embed import EmbedArch, EmptySet, OrdinalEmbedder

from test_data import fake_source

SMALL = EmbedArch(channels=(4, 8, 8), hidden=16, embed_dim=8)
SMALL_POLICY = agent.PolicyArch(input_dim=8 * 7 * 7, hidden=16)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return OrdinalEmbedder(SMALL).eval()


@pytest.fixture(scope="module")
def samples():
    return synth_cmnist(2, 8, "clutter", "train", seed=1, source=fake_source(5))


@pytest.fixture
def policy():
    torch.manual_seed(1)
    return agent.Policy(SMALL_POLICY)


def small(**kw):
    return adapt.AdaptConfig(**{"epochs": 2, "batch_size": 4, "rollouts_per_image": 2, "horizon": 3, **kw})


def test_zero_epochs_is_identity(model, samples, policy):
    crops = build_exemplary_set(samples, 3, ExemplaryMode.TEST_CROPS, seed=0)
    out, history = adapt.adapt_policy(policy, model, strip_boxes(samples), crops, small(epochs=0))
    assert history == []
    assert agent.param_digest(out) == agent.param_digest(policy)


def test_adaptation_updates_a_copy_only(model, samples, policy):
    crops = build_exemplary_set(samples, 3, ExemplaryMode.TEST_CROPS, seed=0)
    before_policy, before_model = agent.param_digest(policy), agent.param_digest(model)
    out, history = adapt.adapt_policy(policy, model, strip_boxes(samples), crops, small())
    assert len(history) == 2 and history[0]["stage"] == "stage3"
    assert agent.param_digest(out) != before_policy
    assert agent.param_digest(policy) == before_policy
    assert agent.param_digest(model) == before_model


def test_adaptation_never_reads_boxes(model, samples, policy):
    crops = build_exemplary_set(samples, 3, ExemplaryMode.TEST_CROPS, seed=0)
    a, _ = adapt.adapt_policy(policy, model, samples, crops, small())
    b, _ = adapt.adapt_policy(policy, model, [s.image for s in samples], crops, small())
    assert agent.param_digest(a) == agent.param_digest(b)


def test_adapt_warns_on_pair_exemplars(model, samples, policy):
    pairs = build_exemplary_set(samples, 3, ExemplaryMode.TRAIN_PAIRS, seed=0)
    with pytest.warns(adapt.ModeMismatch):
        adapt.adapt_policy(policy, model, strip_boxes(samples), pairs, small(epochs=0))


def test_adapt_rejects_empty_pool(model, samples, policy):
    crops = build_exemplary_set(samples, 3, ExemplaryMode.TEST_CROPS, seed=0)
    with pytest.raises(EmptySet):
        adapt.adapt_policy(policy, model, [], crops, small())


def test_fine_tune_needs_pairs_and_keeps_model(model, samples, policy):
    crops = build_exemplary_set(samples, 3, ExemplaryMode.TEST_CROPS, seed=0)
    with pytest.raises(ValueError):
        adapt.fine_tune_policy(policy, model, crops, small())
    pairs = build_exemplary_set(samples, 3, ExemplaryMode.TRAIN_PAIRS, seed=0)
    before = agent.param_digest(model)
    tuned, history = adapt.fine_tune_policy(policy, model, pairs, small())
    assert history[0]["stage"] == "finetune"
    assert agent.param_digest(model) == before
    assert agent.param_digest(tuned) != agent.param_digest(policy)


def test_adaptation_report(tmp_path, model, samples, policy):
    crops = build_exemplary_set(samples, 3, ExemplaryMode.TEST_CROPS, seed=0)
    cfg = small()
    out, history = adapt.adapt_policy(policy, model, strip_boxes(samples), crops, cfg)
    report = adapt.write_adaptation_report(tmp_path, policy, out, model, {"clutter": samples}, cfg, history)
    entry = report["sets"]["clutter"]
    assert entry["gain"] == pytest.approx(entry["after"] - entry["before"])
    assert 0.0 <= entry["before"] <= 1.0 and entry["count"] == len(samples)
    loaded = checkpoint.load_policy(tmp_path / "policy-after")
    assert agent.param_digest(loaded) == agent.param_digest(out)
    assert (tmp_path / "adaptation.json").exists()


def test_train_config_carries_stage3_values(policy):
    tc = adapt.AdaptConfig(lambda2=0.5, lr=1e-4).train_config(policy)
    assert tc.lambda2 == 0.5 and tc.reward == "ordinal" and tc.arch == policy.arch
    assert np.isclose(tc.lr, 1e-4)
