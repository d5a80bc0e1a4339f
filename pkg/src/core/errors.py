class MeshLedgerError(ValueError):
    """シミュレータ全体の基底例外"""


class InvalidInputError(MeshLedgerError):
    """入力値が前提条件を満たさない"""


class NumericalError(MeshLedgerError):
    """数値計算の破綻（DFT残差、学習の発散など）"""


class ClusteringError(MeshLedgerError):
    """クラスタリングゲームがスロット上限内に収束しない"""


class ConfigError(MeshLedgerError):
    """
    シナリオ設定の検証エラー
    - issues にはフィールド単位の診断メッセージを格納する
    """

    def __init__(self, issues: list[str]):
        self.issues = list(issues)
        super().__init__("設定エラー: " + "; ".join(self.issues))


class PhaseError(MeshLedgerError):
    """ラウンドとフェーズ名を付けてモジュールのエラーを包む"""

    def __init__(self, round_index: int, phase: str, cause: Exception):
        self.round_index = round_index
        self.phase = phase
        self.cause = cause
        super().__init__(f"round={round_index} phase={phase}: {cause}")


class ChainError(MeshLedgerError):
    """ハッシュチェーンの検証失敗 (失敗したブロックの高さを保持)"""

    def __init__(self, height: int, reason: str):
        self.height = height
        self.reason = reason
        super().__init__(f"height={height}: {reason}")
