"""損失プロファイルによる画素単位の異常検知パッケージ。"""

from .orchestrator import (
    RunState,
    TrainingData,
    joint_loop,
    pretrain_autoencoder,
    warm_predictor,
)
from .evaluation import evaluate
from .settings import TrainConfig, SynthSpec, load_config, settings

__version__ = "0.1.0"

__all__ = [
    "RunState",
    "TrainingData",
    "joint_loop",
    "pretrain_autoencoder",
    "warm_predictor",
    "evaluate",
    "TrainConfig",
    "SynthSpec",
    "load_config",
    "settings",
    "__version__",
]
