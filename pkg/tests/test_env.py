import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ordloc import env
from ordloc.embed import EmbedArch, OrdinalEmbedder, ShapeMismatch
from ordloc.geom import Action, NUM_ACTIONS, iou_many

SMALL = EmbedArch(channels=(4, 8, 8), hidden=16, embed_dim=8)


class WidthEmbedder:
    """Embeds a box as its width divided by 8.4, so distances are easy to work out by hand."""

    def encode(self, images):
        return images

    def embed_boxes(self, features, boxes):
        return ((boxes[:, 2] - boxes[:, 0]) / 8.4)[:, None]


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return OrdinalEmbedder(SMALL).eval()


@pytest.fixture(scope="module")
def images():
    r = np.random.default_rng(7)
    return r.integers(0, 256, size=(6, 84, 84), dtype=np.uint8)


def random_walk(model, images, actions, spec):
    state = env.reset(model, images)
    rewards = []
    for a in actions:
        state, r = env.step(state, a, spec, model)
        rewards.append(r)
    return state, np.array(rewards)


def test_reset_starts_from_whole_image(model, images):
    state = env.reset(model, images)
    assert state.t == 0 and state.size == 6
    np.testing.assert_array_equal(state.boxes, np.tile([0, 0, 84, 84], (6, 1)))
    assert state.features.shape[0] == 6


def test_reset_accepts_single_image(model, images):
    assert env.reset(model, images[0]).size == 1


def test_reset_rejects_bad_shape(model):
    with pytest.raises(ShapeMismatch):
        env.reset(model, torch.zeros(2, 3, 84, 84))


def test_ordinal_reward_is_distance_decrease():
    stub = WidthEmbedder()
    state = env.reset(stub, torch.zeros(1, 1, 84, 84))
    # width 84 embeds to 10, width 67.2 to 8; with the prototype at 5 the distance goes 5 -> 3
    spec = env.OrdinalReward(torch.tensor([5.0]))
    nxt, r = env.step(state, [Action.SCALE_CENTER], spec, stub)
    assert nxt.box().width == pytest.approx(67.2)
    assert r[0] == pytest.approx(2.0, abs=1e-5)


def test_stay_gives_zero_reward(model, images):
    proto = torch.randn(SMALL.embed_dim)
    state = env.reset(model, images)
    acts = np.full(6, int(Action.STAY))
    for spec in (env.OrdinalReward(proto), env.IoUSigned(np.tile([20, 20, 48, 48], (6, 1))),
                 env.IoUUnsigned(np.tile([20, 20, 48, 48], (6, 1))), None):
        nxt, r = env.step(state, acts, spec, model)
        np.testing.assert_array_equal(r, 0.0)
        np.testing.assert_array_equal(nxt.boxes, state.boxes)


def test_iou_rewards_examples(model, images):
    gt = np.tile([0, 0, 42, 42], (1, 1))
    state = env.reset(model, images[:1])
    _, signed = env.step(state, [Action.SCALE_TOP_LEFT], env.IoUSigned(gt), model)
    _, unsigned = env.step(state, [Action.SCALE_TOP_LEFT], env.IoUUnsigned(gt), model)
    before, after = 42 ** 2 / 84 ** 2, 42 ** 2 / (0.8 * 84) ** 2
    assert signed[0] == 1.0
    assert unsigned[0] == pytest.approx(after - before)
    _, worse = env.step(state, [Action.SCALE_BOTTOM_RIGHT], env.IoUSigned(gt), model)
    assert worse[0] == -1.0


def test_episode_exhausts_after_horizon(model, images):
    state = env.reset(model, images[:2], horizon=3)
    for _ in range(3):
        state, _ = env.step(state, [0, 1], None)
    assert state.t == 3
    with pytest.raises(env.EpisodeExhausted):
        env.step(state, [0, 1], None)


def test_action_count_must_match(model, images):
    with pytest.raises(ShapeMismatch):
        env.step(env.reset(model, images[:2]), [0], None)


def test_unknown_spec_rejected(model, images):
    with pytest.raises(TypeError):
        env.step(env.reset(model, images[:1]), [0], object(), model)


actions_strategy = st.lists(st.lists(st.integers(0, NUM_ACTIONS - 1), min_size=6, max_size=6),
                            min_size=1, max_size=10)


@settings(max_examples=30)
@given(actions_strategy, st.integers(0, 2 ** 16))
def test_ordinal_rewards_telescope(model, images, actions, proto_seed):
    proto = torch.randn(SMALL.embed_dim, generator=torch.Generator().manual_seed(proto_seed))
    state, rewards = random_walk(model, images, actions, env.OrdinalReward(proto))
    start = np.tile([0.0, 0.0, 84.0, 84.0], (6, 1))
    gap = env.endpoint_distance_gap(model, images, start, state.boxes, proto)
    np.testing.assert_allclose(env.rollout_rewards_total(rewards), gap, atol=1e-5)


@settings(max_examples=30)
@given(actions_strategy)
def test_iou_rewards_signs_and_sum(model, images, actions):
    gt = np.tile([30.0, 10.0, 58.0, 38.0], (6, 1))
    _, signed = random_walk(model, images, actions, env.IoUSigned(gt))
    state, unsigned = random_walk(model, images, actions, env.IoUUnsigned(gt))
    assert set(np.unique(signed)) <= {-1.0, 0.0, 1.0}
    np.testing.assert_array_equal(signed, np.sign(unsigned))
    start = np.tile([0.0, 0.0, 84.0, 84.0], (6, 1))
    np.testing.assert_allclose(unsigned.sum(0), iou_many(state.boxes, gt) - iou_many(start, gt), atol=1e-12)


def test_step_is_deterministic(model, images):
    proto = torch.randn(SMALL.embed_dim, generator=torch.Generator().manual_seed(3))
    acts = [[i % NUM_ACTIONS for i in range(k, k + 6)] for k in range(10)]
    a = random_walk(model, images, acts, env.OrdinalReward(proto))
    b = random_walk(model, images, acts, env.OrdinalReward(proto))
    np.testing.assert_array_equal(a[0].boxes, b[0].boxes)
    np.testing.assert_array_equal(a[1], b[1])


def test_rollout_total_shapes():
    assert env.rollout_rewards_total([1.0, 2.0]) == 3.0
    np.testing.assert_array_equal(env.rollout_rewards_total([[1, 2], [3, 4]]), [4, 6])
