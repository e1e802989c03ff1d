import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pytest

# Ensure project root is importable regardless of current working dir
ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from lossprofile.datapipe import synth_generate
from lossprofile.ndgrad import Tensor
from lossprofile.settings import SynthSpec, TrainConfig, disable_console_log, enable_console_log
from lossprofile.train_logger import train_logger


@pytest.fixture(autouse=True)
def quiet_console():
    """テスト中はコンソール出力と tqdm を止める"""
    disable_console_log()
    yield
    train_logger.detach()
    train_logger.clear_logs()
    enable_console_log()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


SMALL_SPEC = SynthSpec(
    category="synthetic",
    image_size=64,
    n_train_normal=4,
    n_test_normal=2,
    n_test_defective=4,
    defect_families=["blob", "scratch"],
    intensity_offset=0.3,
    area_min=30,
    area_max=150,
    seed=7,
)


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory) -> Path:
    """64px の小さな合成データセット（セッション内で 1 回だけ生成）"""
    root = tmp_path_factory.mktemp("data")
    synth_generate(SMALL_SPEC, root)
    return root


def make_small_config(data_root: Path, **overrides) -> TrainConfig:
    values = dict(
        data_root=str(data_root),
        category=SMALL_SPEC.category,
        image_size=64,
        patch_size=16,
        crop_size=32,
        shift=8,
        ae_channels=(4, 4, 4, 4),
        pred_channels=4,
        policy_channels=(4, 4, 4, 4),
        policy_hidden=8,
        batch_size=4,
        episode_len=3,
        pool_crops_per_image=4,
        ae_pretrain_epochs=1,
        ae_pretrain_max_steps=2,
        labeled_per_group=1,
        normal_subset_size=2,
        warm_steps=2,
        joint_steps=6,
        freeze_window=2,
        feedback_delay=3,
        regen_period=2,
        beta_horizon=10,
    )
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture
def small_config(synthetic_root) -> TrainConfig:
    return make_small_config(synthetic_root)


@pytest.fixture
def config_factory(synthetic_root) -> Callable[..., TrainConfig]:
    return lambda **overrides: make_small_config(synthetic_root, **overrides)


def _numeric_grad(loss_fn: Callable[[], Tensor], leaf: Tensor, eps: float) -> np.ndarray:
    grad = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        up = loss_fn().item()
        flat[i] = original - eps
        down = loss_fn().item()
        flat[i] = original
        grad.reshape(-1)[i] = (up - down) / (2 * eps)
    return grad


@pytest.fixture
def gradcheck():
    """解析勾配と中心差分の相対誤差（ノルム比）を葉ごとに返す関数"""

    def check(loss_fn: Callable[[], Tensor], leaves: Sequence[Tensor], eps: float = 1e-6):
        for leaf in leaves:
            leaf.zero_grad()
        loss_fn().backward()
        analytic = [leaf.grad.copy() for leaf in leaves]
        errors = []
        for leaf, a in zip(leaves, analytic):
            n = _numeric_grad(loss_fn, leaf, eps)
            denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)
            errors.append(float(np.linalg.norm(a - n) / denom))
        return errors

    return check
