"""例外クラス定義。

CLI はここで定義した種類ごとに終了コードを切り替える
（2: 設定エラー, 3: データエラー, 4: 内部不変条件違反）。
"""
from __future__ import annotations


class LossProfileError(Exception):
    """パッケージ共通の基底例外"""


class ConfigurationError(LossProfileError, ValueError):
    """設定値・形状の不整合"""

    def __init__(self, message: str, fields: tuple[str, ...] = ()):
        super().__init__(message)
        self.fields = fields


class IngestionError(LossProfileError, RuntimeError):
    """データセット読み込み・画像デコードの失敗"""


class PersistenceError(LossProfileError, RuntimeError):
    """配列コンテナ・チェックポイントの読み書き失敗"""


class UnsupportedVersionError(PersistenceError):
    """未対応（将来）のフォーマットバージョン"""


class UndefinedMetricError(LossProfileError, ValueError):
    """正例または負例が無く指標が定義できない"""


class InternalInvariantError(LossProfileError, RuntimeError):
    """内部ロジックの不変条件違反（呼び出し側のバグ）"""
