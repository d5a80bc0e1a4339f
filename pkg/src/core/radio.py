"""
通信レート・遅延・通信量モデル

サイズはバイト、レートは bit/s。θ の項は ChannelParams.broadcast_unit_bytes
を単位としたサイズに掛ける。
"""

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from core.errors import InvalidInputError
from core.settings import ChannelParams, SizeProfile
from core.types import Device, Partition

logger = logging.getLogger(__name__)

BFT_MINIMUM = 4


def channel_gain(d: float, cp: ChannelParams) -> float:
    """自由空間パスロス h = A_d (v^l / 4π f_c d)^{d_e}"""
    if d <= 0:
        raise InvalidInputError(f"coincident devices: 距離 {d} m では利得を定義できません")
    return cp.antenna_gain * (cp.light_speed / (4.0 * math.pi * cp.carrier_freq * d)) ** cp.pathloss_exp


def shannon_rate(power: float, gain: float, cp: ChannelParams) -> float:
    """r = b log2(1 + p h / σ²)"""
    return cp.bandwidth * math.log2(1.0 + power * gain / cp.noise_power)


def comm_rate(i: Device, j: Device, cp: ChannelParams) -> float:
    if i.id == j.id:
        raise InvalidInputError("comm_rate: 同一端末間のレートは定義されません")
    return shannon_rate(i.tx_power, channel_gain(i.distance_to(j), cp), cp)


def rate_matrix(devices: Sequence[Device], cp: ChannelParams) -> np.ndarray:
    """
    全端末間のレート行列 R[i, j] (i → j)
    - 対角成分は自分自身への送信として inf
    """
    positions = np.array([d.position for d in devices], dtype=np.float64)
    power = np.array([d.tx_power for d in devices], dtype=np.float64)
    distance = np.hypot(
        positions[:, None, 0] - positions[None, :, 0],
        positions[:, None, 1] - positions[None, :, 1],
    )
    off_diagonal = ~np.eye(len(devices), dtype=bool)
    if np.any(distance[off_diagonal] <= 0):
        raise InvalidInputError("coincident devices: 同じ座標の端末があります")
    np.fill_diagonal(distance, 1.0)
    gain = cp.antenna_gain * (cp.light_speed / (4.0 * np.pi * cp.carrier_freq * distance)) ** cp.pathloss_exp
    rates = cp.bandwidth * np.log2(1.0 + power[:, None] * gain / cp.noise_power)
    np.fill_diagonal(rates, np.inf)
    return rates


def upload_latency(rate: float, sp: SizeProfile) -> float:
    if rate <= 0:
        raise InvalidInputError("unreachable committee member: 通信レートが 0 です")
    if math.isinf(rate):
        return 0.0
    return 8.0 * sp.model_size / rate


def train_latency(
    i: Device,
    committee_member: Device,
    sp: SizeProfile,
    cp: ChannelParams,
    rate: float | None = None,
) -> float:
    """
    クラスタ内学習遅延 Λ^comp |D_i| / c_i + Λ^size / r_{i,j}
    - コミッティ自身はアップロード不要
    """
    compute = sp.train_cost * i.dataset.size / i.compute
    if i.id == committee_member.id:
        return compute
    if rate is None:
        rate = comm_rate(i, committee_member, cp)
    return compute + upload_latency(rate, sp)


def broadcast_term(num_committee: int, sp: SizeProfile, cp: ChannelParams) -> float:
    units = (sp.block_size + sp.model_size + 2.0 * sp.msg_size) / cp.broadcast_unit_bytes
    return cp.broadcast_coef * (num_committee - 1) * units


@dataclass(frozen=True)
class VerifyTerms:
    """式 (8) の5項"""

    generate: float
    broadcast: float
    verify: float
    commit: float
    reply: float

    @property
    def total(self) -> float:
        return self.generate + self.broadcast + self.verify + self.commit + self.reply


def verify_terms_arrays(
    requester_index: int,
    compute: np.ndarray,
    rates_to_requester: np.ndarray,
    sp: SizeProfile,
    cp: ChannelParams,
    *,
    allow_single: bool = False,
) -> VerifyTerms:
    """
    コミッティを配列で受け取る式 (8)
    - compute[k]: 各メンバーの c、rates_to_requester[k]: r_{k, j}
    - allow_single: 1台だけのコミッティ (中央集約) を許す。検証と応答の項は 0
    """
    size = compute.shape[0]
    if size < BFT_MINIMUM and not (allow_single and size == 1):
        raise InvalidInputError(f"BFT minimum violated: コミッティ {size} 台 (< {BFT_MINIMUM})")
    others = np.ones(size, dtype=bool)
    others[requester_index] = False
    if np.any(rates_to_requester[others] <= 0):
        raise InvalidInputError("unreachable committee member: 応答経路のレートが 0 です")
    return VerifyTerms(
        generate=sp.gen_cost / compute[requester_index],
        broadcast=broadcast_term(size, sp, cp),
        verify=float(np.max(sp.verify_cost / compute[others], initial=0.0)),
        commit=float(np.max(sp.commit_cost / compute)),
        reply=float(np.max(8.0 * sp.msg_size / rates_to_requester[others], initial=0.0)),
    )


def verify_terms(
    requester: Device,
    committee: Sequence[Device],
    sp: SizeProfile,
    cp: ChannelParams,
) -> VerifyTerms:
    members = sorted(committee, key=lambda d: d.id)
    ids = [d.id for d in members]
    if requester.id not in ids:
        raise InvalidInputError("verify_latency: 要求者がコミッティに含まれていません")
    index = ids.index(requester.id)
    compute = np.array([d.compute for d in members], dtype=np.float64)
    rates = np.array(
        [np.inf if d.id == requester.id else comm_rate(d, requester, cp) for d in members],
        dtype=np.float64,
    )
    return verify_terms_arrays(index, compute, rates, sp, cp)


def verify_latency(
    requester: Device,
    committee: Sequence[Device],
    sp: SizeProfile,
    cp: ChannelParams,
    K: int | None = None,
) -> float:
    """ブロックチェーン検証遅延 T^bc (式 8)"""
    if K is not None and K != len(committee):
        raise InvalidInputError(f"K={K} がコミッティ数 {len(committee)} と一致しません")
    return verify_terms(requester, committee, sp, cp).total


def sync_latency(members: Sequence[Device], head: Device, sp: SizeProfile, cp: ChannelParams) -> float:
    """クラスタ内へのブロック同期 max B^info' / r_{i',j}"""
    waits = [8.0 * sp.msg_size / comm_rate(head, m, cp) for m in members if m.id != head.id]
    return max(waits, default=0.0)


def update_consensus_latency(committee: Sequence[Device], sp: SizeProfile, cp: ChannelParams) -> float:
    """更新コンセンサスの2段階投票 2θ(K−1)B^info' + max B^com / c"""
    size = len(committee)
    if size < BFT_MINIMUM:
        raise InvalidInputError(f"BFT minimum violated: コミッティ {size} 台 (< {BFT_MINIMUM})")
    votes = 2.0 * cp.broadcast_coef * (size - 1) * sp.msg_size / cp.broadcast_unit_bytes
    return votes + max(sp.commit_cost / d.compute for d in committee)


@dataclass(frozen=True)
class RoundLatency:
    """
    式 (1) の端末別遅延
    - training: 学習タスク (ローカル学習 + アップロード + 集約)
    - verification: 検証タスク T^bc
    """

    per_device: dict[int, float]
    training: dict[int, float]
    verification: dict[int, float]

    @property
    def max(self) -> float:
        return max(self.per_device.values())

    @property
    def max_training(self) -> float:
        return max(self.training.values())

    @property
    def max_verification(self) -> float:
        return max(self.verification.values())


def cluster_terms(
    members: Sequence[Device],
    head: Device,
    committee: Sequence[Device],
    sp: SizeProfile,
    cp: ChannelParams,
) -> tuple[float, float, float]:
    """クラスタの (max 学習遅延, 集約遅延, 検証遅延)"""
    train = max(train_latency(m, head, sp, cp) for m in members)
    aggregate = sp.agg_cost * len(members) / head.compute
    if len(committee) == 1:
        verify = verify_terms_arrays(
            0, np.array([head.compute], dtype=np.float64), np.array([np.inf]), sp, cp, allow_single=True
        ).total
    else:
        verify = verify_latency(head, committee, sp, cp)
    return train, aggregate, verify


def round_latency(
    partition: Partition,
    devices: Sequence[Device] | Mapping[int, Device],
    sp: SizeProfile,
    cp: ChannelParams,
) -> RoundLatency:
    """
    1ラウンドの端末別遅延 T_i
    - T_i = クラスタ内の max 学習遅延 + コミッティの T^agg + T^bc
    - 最大値がシミュレーション時計の進み幅になる
    - K=1 (全端末が1クラスタ) は中央集約の基準として許す
    """
    by_id = dict(devices) if isinstance(devices, Mapping) else {d.id: d for d in devices}
    problems = partition.issues()
    if partition.num_clusters == 1:
        problems = [p for p in problems if not p.startswith("クラスタ数 K=")]
    if problems:
        raise InvalidInputError("BFT minimum violated: " + "; ".join(problems))
    committee = [by_id[d] for d in partition.committee_ids()]
    per_device: dict[int, float] = {}
    training: dict[int, float] = {}
    verification: dict[int, float] = {}
    for cluster_id, member_ids in partition.clusters().items():
        members = [by_id[d] for d in member_ids]
        head = by_id[partition.committee[cluster_id]]
        train, aggregate, verify = cluster_terms(members, head, committee, sp, cp)
        for member_id in member_ids:
            training[member_id] = train + aggregate
            verification[member_id] = verify
            per_device[member_id] = train + aggregate + verify
    return RoundLatency(per_device, training, verification)


@dataclass(frozen=True)
class CommComplexity:
    one_tier: float
    clustered: float

    @property
    def reduction(self) -> float:
        return self.one_tier - self.clustered


def comm_complexity(N: int, K: int, sp: SizeProfile) -> CommComplexity:
    """
    1ラウンドの期待通信量
    - E[C^o] = (N²−N)Λ + (2N²+N−2)B̄、E[C^lc] = 2NΛ/K + (2K²+K−2)B̄
    - B̄ は sp.block_size
    """
    if N < BFT_MINIMUM or not BFT_MINIMUM <= K <= N:
        raise InvalidInputError(f"comm_complexity: 4 ≤ K ≤ N が必要です (N={N}, K={K})")
    model, block = sp.model_size, sp.block_size
    one_tier = (N * N - N) * model + (2 * N * N + N - 2) * block
    clustered = Fraction(2 * N, K) * model + (2 * K * K + K - 2) * block
    return CommComplexity(one_tier, clustered)


def max_comm_reduction(N: int, sp: SizeProfile) -> float:
    """K=4 での最大削減量 Λ(N² − 3N/2) + B̄(2N² + N − 36)"""
    if N < BFT_MINIMUM:
        raise InvalidInputError(f"comm_complexity: N ≥ 4 が必要です (N={N})")
    return (N * N - Fraction(3 * N, 2)) * sp.model_size + (2 * N * N + N - 36) * sp.block_size
