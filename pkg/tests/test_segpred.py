"""損失プロファイル上の予測器と α スケジュールのテスト"""
import numpy as np
import pytest

from lossprofile import segpred
from lossprofile.errors import ConfigurationError
from lossprofile.recon import LossProfile
from lossprofile.segpred import DILATIONS, AlphaSchedule, PredictorNet, alpha_at, pred_forward, predict_map


@pytest.fixture
def net(small_config):
    return PredictorNet.build(small_config, np.random.default_rng(0))


class TestForward:
    """出力の形状と値域"""

    @pytest.mark.parametrize("shape", [(8, 8), (1, 8, 8)])
    def test_single_profile(self, net, rng, shape):
        out = pred_forward(rng.random(shape), net).data
        assert out.shape == (1, 1, 8, 8)
        assert np.all(out > 0) and np.all(out < 1)

    def test_loss_profile_object(self, net, rng):
        profile = LossProfile("a", rng.random((16, 16)).astype(np.float32))
        assert predict_map(profile, net).shape == (16, 16)

    def test_batch(self, net, rng):
        assert pred_forward(rng.random((3, 1, 8, 8)), net).shape == (3, 1, 8, 8)

    def test_multi_channel_rejected(self, net, rng):
        with pytest.raises(ConfigurationError):
            pred_forward(rng.random((3, 8, 8)), net)
        with pytest.raises(ConfigurationError):
            pred_forward(rng.random((2, 3, 8, 8)), net)

    def test_dilations(self):
        assert DILATIONS == (1, 2, 4, 8)


class TestAlphaSchedule:
    """α = max(floor, initial (1 − step / horizon))"""

    def test_exact_values(self):
        schedule = AlphaSchedule(horizon=20, floor=0.15)
        for step in range(41):
            assert alpha_at(step, schedule) == max(0.15, 1.0 - step / 20)

    def test_initial_scale(self):
        assert alpha_at(5, AlphaSchedule(horizon=10, initial=0.8, floor=0.1)) == pytest.approx(0.4)

    def test_from_config_defaults_to_beta_horizon(self, small_config):
        assert AlphaSchedule.from_config(small_config).horizon == small_config.beta_horizon
        custom = small_config.model_copy(update={"alpha_horizon": 7})
        assert AlphaSchedule.from_config(custom).horizon == 7

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            alpha_at(-1, AlphaSchedule(horizon=10))
        with pytest.raises(ConfigurationError):
            alpha_at(0, AlphaSchedule(horizon=0))


class TestTraining:
    """重み付き BCE での学習"""

    def test_learns_bright_region(self, small_config, rng):
        net = PredictorNet.build(small_config.model_copy(update={"pred_lr": 1e-2}), rng)
        masks = np.zeros((2, 1, 16, 16), dtype=np.uint8)
        masks[:, :, 4:9, 4:9] = 1
        profiles = rng.random((2, 1, 16, 16)).astype(np.float32) * 0.1 + masks * 0.8
        first = segpred.train_step(net, profiles, masks, alpha=1.0)
        for _ in range(60):
            last = segpred.train_step(net, profiles, masks, alpha=1.0)
        assert last < first
        prob = predict_map(profiles[0, 0], net)
        assert prob[masks[0, 0] == 1].mean() > prob[masks[0, 0] == 0].mean()

    def test_evaluate_loss_does_not_update(self, net, rng):
        profiles = rng.random((2, 1, 8, 8))
        masks = (rng.random((2, 1, 8, 8)) > 0.7).astype(np.uint8)
        before = net.params.digest()
        a = segpred.evaluate_loss(net, profiles, masks, 0.5)
        assert a == segpred.evaluate_loss(net, profiles, masks, 0.5)
        assert net.params.digest() == before

    def test_smaller_alpha_lowers_loss(self, net, rng):
        profiles = rng.random((1, 1, 8, 8))
        masks = np.zeros((1, 1, 8, 8), dtype=np.uint8)
        masks[0, 0, 0, 0] = 1
        assert segpred.evaluate_loss(net, profiles, masks, 0.2) < segpred.evaluate_loss(net, profiles, masks, 0.9)
