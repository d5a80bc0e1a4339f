#!/usr/bin/env python3

import logging
from dataclasses import dataclass, field

logger = logging.getLogger(__name__)

SCHEMES = ("litechain", "flc_model", "flc_hash")
MODEL_KINDS = ("softmax-linear", "mlp")
UTILITY_MODES = ("per_device", "per_cluster")
ATTACK_KINDS = ("none", "replay", "label_flip", "committee_vote_no")


def _positive(name: str, value: float) -> list[str]:
    return [] if value > 0 else [f"{name}: 正の値が必要です ({value})"]


def _unit(name: str, value: float) -> list[str]:
    return [] if 0.0 <= value <= 1.0 else [f"{name}: [0,1] の範囲外です ({value})"]


@dataclass
class ChannelParams:
    """
    - 自由空間パスロスと Shannon 容量による通信モデルのパラメータ
    - デフォルト値は既定パラメータ表 (θ, A_d, f_c, d_e, v^l, タイムアウト) に合わせる
    """

    bandwidth: float = 1.0e6  # 帯域幅 b (Hz)
    noise_power: float = 1.0e-13  # 雑音電力 σ² (W)
    antenna_gain: float = 4.11  # アンテナ利得 A_d
    carrier_freq: float = 915.0e6  # 搬送波周波数 f_c (Hz)
    pathloss_exp: float = 2.8  # パスロス指数 d_e
    light_speed: float = 3.0e8  # 光速 v^l (m/s)
    broadcast_coef: float = 0.5  # ブロードキャスト係数 θ (秒 / サイズ単位)
    broadcast_timeout: float = 300.0  # ブロードキャストのタイムアウト (秒)
    broadcast_unit_bytes: float = 1000.0  # θ のサイズ単位 (バイト)

    def check(self) -> list[str]:
        issues: list[str] = []
        for name in (
            "bandwidth",
            "noise_power",
            "antenna_gain",
            "carrier_freq",
            "light_speed",
            "broadcast_coef",
            "broadcast_timeout",
            "broadcast_unit_bytes",
        ):
            issues += _positive(f"channel.{name}", getattr(self, name))
        if self.pathloss_exp < 2:
            issues.append(f"channel.pathloss_exp: 2 以上が必要です ({self.pathloss_exp})")
        return issues


@dataclass
class SizeProfile:
    """
    メッセージサイズと演算コストのプロファイル
    - model_size が 0 のときはグローバルモデルの直列化サイズから導出する
    """

    model_size: float = 0.0  # モデルサイズ Λ^size (バイト)
    block_size: float = 1024.0  # ブロックサイズ B^info (バイト)
    msg_size: float = 256.0  # 投票メッセージサイズ B^info' (バイト)
    commit_cost: float = 1.0e5  # コミット処理 B^com (FLOP)
    gen_cost: float = 1.0e5  # ブロック生成 B^gen (FLOP)
    train_cost: float = 1.0e6  # 1サンプル当たりの学習 Λ^comp (FLOP)
    agg_cost: float = 1.0e6  # 1モデル当たりの集約 Λ^agg (FLOP)
    verify_cost: float = 1.0e7  # モデル検証 Λ^veri (FLOP)

    def check(self) -> list[str]:
        issues = [
            f"sizes.{name}: 負の値は使用できません ({getattr(self, name)})"
            for name in (
                "model_size",
                "block_size",
                "msg_size",
                "commit_cost",
                "gen_cost",
                "train_cost",
                "agg_cost",
                "verify_cost",
            )
            if getattr(self, name) < 0
        ]
        if self.msg_size > self.block_size:
            issues.append("sizes.msg_size: block_size 以下が必要です")
        return issues


@dataclass
class FLSettings:
    """デスクスケールの連合学習タスク設定"""

    learning_rate: float = 0.001  # 学習率 η
    local_epochs: int = 1  # ローカルエポック数
    local_steps: int | None = None  # Φ を直接指定する場合のステップ数
    batch_size: int = 128  # ミニバッチサイズ
    dirichlet_alpha: float = 5.0  # Dirichlet 分割の集中度 (5: IID, 0.2: 非IID)
    model_kind: str = "softmax-linear"  # softmax-linear / mlp
    input_dim: int = 20  # 特徴次元 d
    num_classes: int = 10  # ラベル数 L
    hidden: int = 32  # MLP の隠れ層幅
    init_seed: int = 0  # 初期重みのシード
    dataset_samples: int = 4000  # 合成データセットのサンプル数
    blob_separation: float = 3.0  # クラス中心の広がり
    blob_spread: float = 1.0  # クラス内の標準偏差
    test_fraction: float = 0.2  # グローバルテスト分割の比率
    verify_sample: int = 64  # 検証に使うサンプル数
    dataset_path: str | None = None  # CSV データセット (未指定なら合成)

    def check(self) -> list[str]:
        issues = _positive("fl.learning_rate", self.learning_rate)
        issues += _positive("fl.local_epochs", self.local_epochs)
        issues += _positive("fl.batch_size", self.batch_size)
        issues += _positive("fl.dirichlet_alpha", self.dirichlet_alpha)
        issues += _positive("fl.input_dim", self.input_dim)
        issues += _positive("fl.hidden", self.hidden)
        issues += _positive("fl.verify_sample", self.verify_sample)
        if self.local_steps is not None and self.local_steps < 1:
            issues.append("fl.local_steps: 1 以上が必要です")
        if self.num_classes < 2:
            issues.append("fl.num_classes: 2 以上が必要です")
        if self.model_kind not in MODEL_KINDS:
            issues.append(f"fl.model_kind: {MODEL_KINDS} のいずれかです")
        if not 0.0 < self.test_fraction < 1.0:
            issues.append("fl.test_fraction: (0,1) の範囲外です")
        return issues


@dataclass
class ProtocolSettings:
    """
    コンセンサス・報酬・陳腐化重みのプロトコル設定
    - None のフィールドは実行時に導出 (𝒜=1/L, s=1/K, スキーム既定のフィルタ)
    """

    chi: int = 20  # 更新コンセンサスの周期 χ (ラウンド)
    accuracy_threshold: float | None = None  # 品質閾値 𝒜
    reward_block: float = 100.0  # ブロック報酬 R^{b+}
    reward_consensus: float = 1.0  # 合意参加報酬 R^{b−}
    staleness_base: float | None = None  # 陳腐化重みの基数 s
    staleness_exp: float = 0.5  # 陳腐化指数 q
    reliability_floor: float = 0.1  # 正規化後の信頼度下限
    reliability_ceiling: float = 0.99  # 正規化後の信頼度上限
    prior_reliability: float = 0.8  # 評判が全てゼロのときの事前信頼度
    retry_cap: int = 10  # 更新コンセンサスの再試行上限
    quality_filter: bool | None = None  # オフチェーン品質検査の有無
    duplicate_detection: bool = True  # 識別子の重複検出の有無
    fragment_payload: int = 1024  # flc_model のフラグメント当たりのペイロード (バイト)

    def check(self) -> list[str]:
        issues = _positive("protocol.chi", self.chi)
        issues += _positive("protocol.staleness_exp", self.staleness_exp)
        issues += _positive("protocol.retry_cap", self.retry_cap)
        issues += _positive("protocol.fragment_payload", self.fragment_payload)
        issues += _unit("protocol.reliability_floor", self.reliability_floor)
        issues += _unit("protocol.reliability_ceiling", self.reliability_ceiling)
        issues += _unit("protocol.prior_reliability", self.prior_reliability)
        if self.reliability_floor > self.reliability_ceiling:
            issues.append("protocol.reliability_floor: ceiling 以下が必要です")
        if self.reward_block < 0 or self.reward_consensus < 0:
            issues.append("protocol.reward_*: 負の報酬は使用できません")
        if self.accuracy_threshold is not None:
            issues += _unit("protocol.accuracy_threshold", self.accuracy_threshold)
        if self.staleness_base is not None:
            issues += _positive("protocol.staleness_base", self.staleness_base)
        return issues


@dataclass
class ClusteringSettings:
    """分散クラスタリングゲームの設定"""

    utility: str = "per_device"  # per_device: 各端末が S/T_k を得る / per_cluster
    min_rate_bps: float = 0.0  # 近傍判定の最低通信レート (0 なら全クラスタが近傍)
    slot_cap: int = 10_000  # スロット数の安全上限
    penalty_factor: float = 1.0e6  # PENALTY = penalty_factor × 観測最大 u

    def check(self) -> list[str]:
        issues = _positive("clustering.slot_cap", self.slot_cap)
        issues += _positive("clustering.penalty_factor", self.penalty_factor)
        if self.utility not in UTILITY_MODES:
            issues.append(f"clustering.utility: {UTILITY_MODES} のいずれかです")
        if self.min_rate_bps < 0:
            issues.append("clustering.min_rate_bps: 負の値は使用できません")
        return issues


@dataclass
class AttackConfig:
    """
    攻撃注入の設定
    - flip_map が None のときは (ℓ+1) mod L を使う
    """

    kind: str = "none"  # replay / label_flip / committee_vote_no / none
    attacker_rate: float = 0.0  # 攻撃者の割合
    replay_rate: float = 0.5  # ラウンド毎のリプレイ確率
    flip_map: list[int] | None = None  # ラベル置換
    seed: int = 7  # 攻撃用シード

    def check(self, num_classes: int | None = None) -> list[str]:
        issues = _unit("attack.attacker_rate", self.attacker_rate)
        issues += _unit("attack.replay_rate", self.replay_rate)
        if self.kind not in ATTACK_KINDS:
            issues.append(f"attack.kind: {ATTACK_KINDS} のいずれかです")
        if self.flip_map is not None:
            size = num_classes if num_classes is not None else len(self.flip_map)
            if sorted(self.flip_map) != list(range(size)):
                issues.append("attack.flip_map: [0, L) の置換ではありません")
        return issues


@dataclass
class StopSettings:
    """停止条件"""

    target_accuracy: float = 0.73  # 目標精度
    max_rounds: int = 200  # 最大ラウンド数

    def check(self) -> list[str]:
        return _unit("stop.target_accuracy", self.target_accuracy) + _positive(
            "stop.max_rounds", self.max_rounds
        )


@dataclass
class Scenario:
    """
    - 1回のシミュレーション実行を完全に決める設定
    - 端末配置・計算能力・信頼度範囲・各モジュールの設定とシードをまとめる
    """

    num_devices: int = 20  # 端末数 N
    area: float = 1000.0  # 配置領域の一辺 (m)
    min_distance: float = 1.0  # 端末間の最小距離 (m)
    tx_power: float = 0.1  # 送信電力 (W)
    compute_tiers: list[float] = field(
        default_factory=lambda: [1.0e8, 2.0e8, 4.0e8, 8.0e8]
    )  # 計算能力の階層 (FLOP/s)、ラウンドロビンで割当
    reliability: str = "high"  # 信頼度範囲の名前
    reliability_ranges: dict[str, list[float]] = field(
        default_factory=lambda: {"medium": [0.33, 0.66], "high": [0.66, 0.99]}
    )
    channel: ChannelParams = field(default_factory=ChannelParams)
    sizes: SizeProfile = field(default_factory=SizeProfile)
    fl: FLSettings = field(default_factory=FLSettings)
    protocol: ProtocolSettings = field(default_factory=ProtocolSettings)
    clustering: ClusteringSettings = field(default_factory=ClusteringSettings)
    attack: AttackConfig = field(default_factory=AttackConfig)
    stop: StopSettings = field(default_factory=StopSettings)
    scheme: str = "litechain"  # litechain / flc_model / flc_hash
    seed: int = 42  # シード

    def check(self) -> list[str]:
        issues: list[str] = []
        if self.num_devices < 4:
            issues.append(f"num_devices: 4 以上が必要です ({self.num_devices})")
        issues += _positive("area", self.area)
        issues += _positive("min_distance", self.min_distance)
        issues += _positive("tx_power", self.tx_power)
        if not self.compute_tiers or any(c <= 0 for c in self.compute_tiers):
            issues.append("compute_tiers: 正の値のリストが必要です")
        if self.scheme not in SCHEMES:
            issues.append(f"scheme: {SCHEMES} のいずれかです ({self.scheme})")
        bounds = self.reliability_ranges.get(self.reliability)
        if bounds is None:
            issues.append(f"reliability: 未定義の範囲です ({self.reliability})")
        elif len(bounds) != 2 or not 0.0 <= bounds[0] <= bounds[1] <= 1.0:
            issues.append(f"reliability_ranges.{self.reliability}: 不正な範囲です")
        issues += self.channel.check()
        issues += self.sizes.check()
        issues += self.fl.check()
        issues += self.protocol.check()
        issues += self.clustering.check()
        issues += self.attack.check(self.fl.num_classes)
        issues += self.stop.check()
        return issues

    def quality_filter_enabled(self) -> bool:
        """スキーム既定のオフチェーン品質検査 (FLC は検査なしの FedAvg)"""
        if self.protocol.quality_filter is not None:
            return self.protocol.quality_filter
        return self.scheme == "litechain"
