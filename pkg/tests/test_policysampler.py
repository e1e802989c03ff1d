"""強化学習バッチサンプラのテスト"""
import numpy as np
import pytest

from lossprofile import ndgrad
from lossprofile.errors import ConfigurationError
from lossprofile.imagefeat import FusedMap, HistoryMap, SamplerInput
from lossprofile.models import Rect, RewardBreakdown, Trajectory, TrajectoryStep
from lossprofile.policysampler import (
    NUM_ACTIONS,
    Action,
    PolicyNet,
    RewardContext,
    action_log_probs,
    apply_action,
    beta_at,
    compute_reward,
    policy_forward,
    policy_gradient,
    reinforce_update,
    reward_weights,
    run_episode,
    sample_action,
    valid_center_range,
)


@pytest.fixture
def net(small_config):
    return PolicyNet.build(small_config, np.random.default_rng(0))


def _sampler_input(rng, size=64):
    return SamplerInput(
        image_id="img",
        rgb=rng.random((3, size, size)).astype(np.float32),
        fused=FusedMap(values=rng.random((size, size))),
        history=HistoryMap.fresh("img", size, size),
        prev_are=rng.random((size, size)),
    )


def _trajectory(states, actions, rewards):
    traj = Trajectory("img")
    for state, action, reward in zip(states, actions, rewards):
        traj.append(TrajectoryStep(
            center=(16, 16),
            action=int(action),
            log_prob=-1.0,
            reward=RewardBreakdown.compose(float(reward), 0.0, 0.0, 0.0),
            state=state,
        ))
    return traj


class TestPolicyForward:
    """方策ネットの出力"""

    def test_probabilities(self, net, rng):
        probs = policy_forward(rng.random((6, 32, 32)), net)
        assert probs.shape == (NUM_ACTIONS,)
        assert probs.sum() == pytest.approx(1.0, abs=1e-6)
        assert np.all(probs > 0)

    def test_batch(self, net, rng):
        assert policy_forward(rng.random((3, 6, 32, 32)), net).shape == (3, NUM_ACTIONS)

    def test_wrong_channels(self, net, rng):
        with pytest.raises(ConfigurationError):
            policy_forward(rng.random((3, 32, 32)), net)

    def test_log_prob_gradient(self, small_config, rng, gradcheck):
        net64 = PolicyNet.build(small_config, np.random.default_rng(0), dtype=np.float64)
        crops = rng.random((3, 6, 32, 32))
        actions = [0, 4, 8]
        weights = np.array([0.5, -1.0, 2.0])

        def loss():
            return ndgrad.weighted_sum(action_log_probs(crops, actions, net64), weights)

        leaves = [net64.params["fc1.w"], net64.params["fc0.b"], net64.params["conv3.b"]]
        assert max(gradcheck(loss, leaves)) < 1e-4


class TestMovement:
    """行動による中心の移動"""

    def test_moves_by_shift(self, rng):
        assert apply_action((32, 32), Action.N, (64, 64), 32, rng, shift=8) == (24, 32)
        assert apply_action((32, 32), Action.SE, (64, 64), 32, rng, shift=8) == (40, 40)
        assert apply_action((32, 32), Action.W, (64, 64), 32, rng, shift=8) == (32, 24)

    def test_clamped_to_valid_range(self, rng):
        lo, hi = valid_center_range(64, 32)
        assert apply_action((lo, lo), Action.NW, (64, 64), 32, rng, shift=24) == (lo, lo)
        assert apply_action((hi, hi), Action.SE, (64, 64), 32, rng, shift=24) == (hi, hi)

    def test_skip_jumps_inside(self, rng):
        lo, hi = valid_center_range(64, 32)
        for _ in range(50):
            row, col = apply_action((32, 32), Action.SKIP, (64, 64), 32, rng)
            assert lo <= row <= hi and lo <= col <= hi

    def test_crop_larger_than_image(self):
        with pytest.raises(ConfigurationError):
            valid_center_range(16, 32)

    def test_sample_action_follows_distribution(self, rng):
        probs = np.zeros(NUM_ACTIONS)
        probs[3] = 1.0
        assert all(sample_action(probs, rng) == 3 for _ in range(20))


class TestReward:
    """報酬と β スケジュール"""

    def test_beta_schedule_exact(self):
        for j in range(0, 41):
            assert beta_at(j, 20, 0.15) == max(0.15, 1.0 - j / 20)

    def test_beta_invalid(self):
        with pytest.raises(ConfigurationError):
            beta_at(0, 0)
        with pytest.raises(ConfigurationError):
            beta_at(-1, 10)

    def test_clone_zero_on_constant_patch(self):
        history = HistoryMap.fresh("a", 32, 32)
        reward = compute_reward(np.full((3, 16, 16), 0.5), history, Rect(0, 0, 16, 16), 0.3, 0, 10)
        assert reward.r_clone == 0.0
        assert reward.r_cover == 0.0
        assert reward.r_pred == -0.3
        assert reward.beta == 1.0

    def test_cover_decreases_under_revisits(self, rng):
        history = HistoryMap.fresh("a", 32, 32)
        sampler = SamplerInput("a", rng.random((3, 32, 32)), FusedMap(rng.random((32, 32))), history, rng.random((32, 32)))
        rect = Rect(8, 8, 16, 16)
        covers = []
        for _ in range(4):
            covers.append(compute_reward(sampler.rgb[:, 8:24, 8:24], history, rect, 0.1, 5, 10).r_cover)
            history.counts[rect.slices()] += 1
        assert all(b < a for a, b in zip(covers, covers[1:]))


class TestReinforce:
    """方策勾配"""

    def test_reward_weights_literal_and_discounted(self):
        traj = _trajectory([None] * 3, [0, 1, 2], [1.0, 0.0, 2.0])
        np.testing.assert_allclose(reward_weights([traj]), [1.0, 0.0, 2.0])
        np.testing.assert_allclose(reward_weights([traj], discount=0.5), [1.5, 1.0, 2.0])
        np.testing.assert_allclose(reward_weights([traj], use_baseline=True), [0.0, -1.0, 1.0])

    def test_empty_trajectory_is_noop(self, net):
        before = net.params.digest()
        assert reinforce_update(net, Trajectory("img")) == 0.0
        assert net.params.digest() == before

    def test_zero_rewards_is_noop(self, net, rng):
        crops = rng.random((3, 6, 32, 32)).astype(np.float32)
        before = net.params.digest()
        reinforce_update(net, _trajectory(crops, [0, 1, 2], [0.0, 0.0, 0.0]))
        assert net.params.digest() == before

    def test_opposite_rewards_cancel(self, net, rng):
        crop = rng.random((6, 32, 32)).astype(np.float32)
        traj = _trajectory([crop, crop], [2, 2], [1.0, -1.0])
        _, grads = policy_gradient(net, [traj])
        assert all(np.allclose(g, 0.0, atol=1e-5) for g in grads.values())

    def test_positive_reward_raises_probability(self, net, rng):
        crop = rng.random((6, 32, 32)).astype(np.float32)
        before = policy_forward(crop, net)[5]
        reinforce_update(net, _trajectory([crop], [5], [1.0]))
        assert policy_forward(crop, net)[5] > before

    def test_missing_state_rejected(self, net):
        with pytest.raises(ConfigurationError):
            policy_gradient(net, [_trajectory([None], [0], [1.0])])

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_bandit_converges(self, config_factory, seed):
        config = config_factory(image_size=32, patch_size=16, crop_size=16, policy_lr=1e-2)
        net = PolicyNet.build(config, np.random.default_rng(seed))
        rng = np.random.default_rng(100 + seed)
        crop = rng.random((6, 16, 16)).astype(np.float32)
        target = int(Action.NE)
        for _ in range(2000):
            probs = policy_forward(crop, net)
            if probs[target] > 0.9:
                break
            actions = [sample_action(probs.astype(np.float64), rng) for _ in range(16)]
            rewards = [1.0 if a == target else 0.0 for a in actions]
            reinforce_update(net, _trajectory([crop] * 16, actions, rewards))
        assert policy_forward(crop, net)[target] > 0.9


class TestEpisode:
    """run_episode"""

    def test_collects_patches_and_updates_history(self, net, rng):
        image = _sampler_input(rng)
        context = RewardContext(pred_loss=0.2, policy_step=0, beta_horizon=10)
        traj, patches = run_episode(image, net, 5, rng, context, crop_size=32, patch_size=16, shift=8)
        assert len(traj) == 5 and len(patches) == 5
        assert all(p.shape == (3, 16, 16) for p in patches)
        assert image.history.counts.sum() == 5 * 16 * 16
        assert all(s.state.shape == (6, 32, 32) for s in traj.steps)
        lo, hi = valid_center_range(64, 32)
        assert all(lo <= r <= hi and lo <= c <= hi for r, c in (s.center for s in traj.steps))

    def test_patch_is_centered_on_center(self, net, rng):
        image = _sampler_input(rng)
        context = RewardContext(pred_loss=0.2, policy_step=0, beta_horizon=10)
        traj, patches = run_episode(image, net, 3, rng, context, crop_size=32, patch_size=16, shift=8)
        for step, patch in zip(traj.steps, patches):
            rows, cols = Rect.centered(step.center, 16).slices()
            np.testing.assert_array_equal(patch, image.rgb[:, rows, cols])

    def test_random_mode(self, rng):
        image = _sampler_input(rng)
        context = RewardContext(pred_loss=0.2, policy_step=0, beta_horizon=10)
        traj, _ = run_episode(image, None, 4, rng, context, crop_size=32, patch_size=16, mode="random")
        assert all(s.state is None for s in traj.steps)
        assert all(s.log_prob == pytest.approx(np.log(1 / 9)) for s in traj.steps)

    def test_rewards_use_context(self, net, rng):
        image = _sampler_input(rng)
        context = RewardContext(pred_loss=0.5, policy_step=20, beta_horizon=10, beta_floor=0.15)
        traj, _ = run_episode(image, net, 2, rng, context, crop_size=32, patch_size=16)
        assert all(s.reward.beta == 0.15 and s.reward.r_pred == -0.5 for s in traj.steps)

    def test_same_seed_same_episode(self, net):
        runs = []
        for _ in range(2):
            rng = np.random.default_rng(5)
            image = _sampler_input(np.random.default_rng(9))
            traj, _ = run_episode(image, net, 4, rng, RewardContext(0.1, 0, 10), crop_size=32, patch_size=16)
            runs.append([(s.center, s.action) for s in traj.steps])
        assert runs[0] == runs[1]

    def test_invalid_length(self, net, rng):
        with pytest.raises(ConfigurationError):
            run_episode(_sampler_input(rng), net, 0, rng, RewardContext(0.1, 0, 10), crop_size=32, patch_size=16)
