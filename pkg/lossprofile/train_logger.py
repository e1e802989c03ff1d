"""学習ステージと進捗のログ管理。

各ステージ(pretrain, warm, joint, eval ...)の開始・終了・エラーと、
ステップごとの進捗（l_MSE, l_pred, 報酬内訳, β, α）を記録する。
"""
from __future__ import annotations

import json
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, IO, List, Optional

from .models import utc_now
from .settings import settings


@dataclass
class StageLog:
    """個々のステージログエントリ"""
    timestamp: str
    stage: str  # "pretrain", "warm", "joint", "eval" ...
    action: str  # "start", "end", "error", "step"
    duration_ms: Optional[float] = None
    error: Optional[str] = None
    details: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class TrainLogger:
    """ステージログの管理クラス（シングルトン）"""

    _instance = None
    _lock = threading.Lock()

    def __new__(cls):
        if cls._instance is None:
            with cls._lock:
                if cls._instance is None:
                    cls._instance = super().__new__(cls)
                    cls._instance._initialized = False
        return cls._instance

    def __init__(self, max_logs: int = 1000):
        if self._initialized:
            return
        self._initialized = True
        self.logs: deque = deque(maxlen=max_logs)
        self._start_times: Dict[str, float] = {}
        self._progress_file: Optional[IO[str]] = None

    @property
    def console(self) -> bool:
        return settings.console_log

    def attach(self, path: Path) -> None:
        """進捗を JSON Lines で書き出すファイルを設定する。"""
        self.detach()
        path.parent.mkdir(parents=True, exist_ok=True)
        self._progress_file = path.open("a", encoding="utf-8")

    def detach(self) -> None:
        if self._progress_file is not None:
            self._progress_file.close()
            self._progress_file = None

    def _write(self, log: StageLog) -> None:
        self.logs.append(log)
        if self._progress_file is not None:
            self._progress_file.write(json.dumps(log.to_dict(), ensure_ascii=False) + "\n")
            self._progress_file.flush()

    def start_stage(self, stage: str, details: Optional[Dict[str, Any]] = None) -> None:
        """ステージ開始のログ"""
        self._start_times[stage] = time.time()
        self._write(StageLog(timestamp=utc_now(), stage=stage, action="start", details=details or {}))
        if self.console:
            print(f"[{stage.upper()}] 開始 | {self._summarize(details)}")

    def end_stage(self, stage: str, details: Optional[Dict[str, Any]] = None) -> None:
        """ステージ完了のログ"""
        start = self._start_times.pop(stage, time.time())
        duration_ms = (time.time() - start) * 1000
        self._write(StageLog(
            timestamp=utc_now(),
            stage=stage,
            action="end",
            duration_ms=round(duration_ms, 2),
            details=details or {},
        ))
        if self.console:
            print(f"[{stage.upper()}] 完了 | 所要時間: {duration_ms:.0f}ms | {self._summarize(details)}")

    def error_stage(self, stage: str, error: Exception, details: Optional[Dict[str, Any]] = None) -> None:
        """ステージエラーのログ"""
        start = self._start_times.pop(stage, time.time())
        duration_ms = (time.time() - start) * 1000
        log = StageLog(
            timestamp=utc_now(),
            stage=stage,
            action="error",
            duration_ms=round(duration_ms, 2),
            error=f"{type(error).__name__}: {error}",
            details=details or {},
        )
        self._write(log)
        if self.console:
            print(f"[{stage.upper()}] エラー | {log.error}")

    def record_step(self, stage: str, **fields: Any) -> None:
        """1 ステップ分の進捗（step, l_mse, l_pred, 報酬, beta, alpha など）"""
        self._write(StageLog(timestamp=utc_now(), stage=stage, action="step", details=fields))

    def get_logs_by_stage(self, stage: str, action: Optional[str] = None, limit: int = 1000) -> List[Dict[str, Any]]:
        """特定ステージのログを取得"""
        filtered = [
            log for log in self.logs
            if log.stage == stage and (action is None or log.action == action)
        ]
        return [log.to_dict() for log in filtered[-limit:]]

    def clear_logs(self) -> None:
        """ログをクリア"""
        self.logs.clear()
        self._start_times.clear()

    def _summarize(self, data: Optional[Dict[str, Any]], max_len: int = 160) -> str:
        if not data:
            return "-"
        parts = []
        for k, v in data.items():
            parts.append(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}")
        return ", ".join(parts)[:max_len]


# グローバルインスタンス
train_logger = TrainLogger()
