"""
分散クラスタリングゲーム

フラットな端末群を、セキュリティ / 遅延 の社会的厚生を最大化する
2層構成 (クラスタ + コミッティ) へ組み替える。
- 利得 u_k = S / T_k (per_device では所属端末数を掛ける)
- 値 v_k = u_k − c (制約違反の分割は全クラスタに PENALTY)
- 切替利得 G は切替による社会的厚生 Σv の変化量
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from core import radio, secmetric
from core.errors import ClusteringError, InvalidInputError
from core.settings import ChannelParams, ClusteringSettings, SizeProfile
from core.types import Device, Partition

logger = logging.getLogger(__name__)

AVAILABLE = "available"
OCCUPIED = "occupied"
GAIN_EPS = 1e-12


@dataclass(frozen=True)
class SwitchOp:
    device: int
    from_cluster: int
    to_cluster: int
    gain: float = 0.0

    def __post_init__(self):
        if self.from_cluster == self.to_cluster:
            raise InvalidInputError("SwitchOp: 移動元と移動先が同じクラスタです")


@dataclass(frozen=True)
class Evaluation:
    """分割1つの評価結果 (クラスタIDの昇順に並ぶ)"""

    cluster_ids: tuple[int, ...]
    latency: np.ndarray
    utility: np.ndarray
    value: np.ndarray
    security: float
    feasible: bool

    @property
    def welfare(self) -> float:
        return float(self.value.sum())

    def _position(self, cluster_id: int) -> int:
        return self.cluster_ids.index(cluster_id)

    def utility_of(self, cluster_id: int) -> float:
        return float(self.utility[self._position(cluster_id)])

    def value_of(self, cluster_id: int) -> float:
        if cluster_id not in self.cluster_ids:
            return 0.0
        return float(self.value[self._position(cluster_id)])


@dataclass(frozen=True)
class SlotRecord:
    slot: int
    executed: tuple[SwitchOp, ...]
    regrets: int
    welfare: float
    num_clusters: int


@dataclass
class GameState:
    """
    ゲームの進行状態
    - labels[pos]: device_ids[pos] の所属クラスタID
    - heads: クラスタID → コミッティ端末ID
    """

    device_ids: tuple[int, ...]
    labels: np.ndarray
    heads: dict[int, int]
    visit_counts: dict[int, int] = field(default_factory=dict)
    preference_lists: dict[int, list[SwitchOp]] = field(default_factory=dict)
    cluster_states: dict[int, str] = field(default_factory=dict)
    pending_ops: list[SwitchOp] = field(default_factory=list)
    last_gain: dict[int, float] = field(default_factory=dict)
    slot: int = 0
    welfare: float = 0.0

    @property
    def partition(self) -> Partition:
        return Partition(
            assignments={d: int(c) for d, c in zip(self.device_ids, self.labels)},
            committee=dict(sorted(self.heads.items())),
        )

    def cluster_of(self, device_id: int) -> int:
        return int(self.labels[self.device_ids.index(device_id)])

    def members(self, cluster_id: int) -> list[int]:
        return [d for d, c in zip(self.device_ids, self.labels) if c == cluster_id]


@dataclass(frozen=True)
class GameResult:
    partition: Partition
    welfare: float
    slots: int
    trace: tuple[SlotRecord, ...]


class WelfareModel:
    """
    分割の評価器
    - 端末ごとの配列とレート行列を前計算し、評価は numpy のベクトル演算で行う
    - 観測した最大の u を保持し PENALTY = penalty_factor × 最大 u とする
    """

    def __init__(
        self,
        devices: Sequence[Device],
        sp: SizeProfile,
        cp: ChannelParams,
        settings: ClusteringSettings,
    ):
        ordered = sorted(devices, key=lambda d: d.id)
        self.sp = sp
        self.cp = cp
        self.settings = settings
        self.device_ids = tuple(d.id for d in ordered)
        self.index = {d: pos for pos, d in enumerate(self.device_ids)}
        self.compute = np.array([d.compute for d in ordered], dtype=np.float64)
        self.reliability = np.array([d.reliability for d in ordered], dtype=np.float64)
        self.data_sizes = np.array([d.dataset.size for d in ordered], dtype=np.float64)
        self.rates = radio.rate_matrix(ordered, cp)
        self.train_compute = sp.train_cost * self.data_sizes / self.compute
        self.max_utility = 0.0

    @property
    def penalty(self) -> float:
        return self.settings.penalty_factor * self.max_utility

    def evaluate_arrays(self, labels: np.ndarray, heads: dict[int, int]) -> Evaluation:
        sp = self.sp
        cluster_ids = np.array(sorted(heads), dtype=np.int64)
        K = cluster_ids.shape[0]
        dense = np.searchsorted(cluster_ids, labels)
        head_pos = np.array([self.index[heads[int(c)]] for c in cluster_ids], dtype=np.int64)
        counts = np.bincount(dense, minlength=K).astype(np.float64)

        upload = 8.0 * sp.model_size / self.rates[np.arange(labels.shape[0]), head_pos[dense]]
        train = self.train_compute + upload
        train_max = np.zeros(K)
        np.maximum.at(train_max, dense, train)

        head_compute = self.compute[head_pos]
        verify = sp.verify_cost / head_compute
        if K > 1:
            order = np.argsort(verify)
            verify_others = np.full(K, verify[order[-1]])
            verify_others[order[-1]] = verify[order[-2]]
        else:
            verify_others = np.zeros(K)
        reply = (8.0 * sp.msg_size / self.rates[np.ix_(head_pos, head_pos)]).max(axis=0)
        latency = (
            train_max
            + sp.agg_cost * counts / head_compute
            + sp.gen_cost / head_compute
            + radio.broadcast_term(K, sp, self.cp)
            + verify_others
            + sp.commit_cost / head_compute.min()
            + reply
        )

        security = secmetric.security_score(self.reliability[head_pos])
        utility = security / latency
        if self.settings.utility == "per_device":
            utility = utility * counts
        self.max_utility = max(self.max_utility, float(utility.max()))
        feasible = radio.BFT_MINIMUM <= K <= labels.shape[0]
        value = utility if feasible else utility - self.penalty
        return Evaluation(
            tuple(int(c) for c in cluster_ids), latency, utility, value, security, feasible
        )

    def evaluate(self, partition: Partition) -> Evaluation:
        labels = np.array([partition.assignments[d] for d in self.device_ids], dtype=np.int64)
        return self.evaluate_arrays(labels, dict(partition.committee))

    def elect(self, labels: np.ndarray, heads: dict[int, int], cluster_id: int) -> tuple[int, Evaluation]:
        """
        クラスタ内のコミッティ選出
        - 他クラスタのコミッティを固定し、そのクラスタの u を最大化する端末
        - 同点は端末IDの小さい方
        """
        best_id, best_eval, best_u = -1, None, -np.inf
        for pos in np.flatnonzero(labels == cluster_id):
            candidate = self.device_ids[pos]
            evaluation = self.evaluate_arrays(labels, {**heads, cluster_id: candidate})
            u = evaluation.utility_of(cluster_id)
            if u > best_u:
                best_id, best_eval, best_u = candidate, evaluation, u
        if best_eval is None:
            raise InvalidInputError(f"クラスタ {cluster_id} にメンバーがいません")
        return best_id, best_eval


def one_tier_partition(devices: Sequence[Device]) -> Partition:
    """FLC 用: 全端末が単独クラスタかつコミッティ"""
    ids = sorted(d.id for d in devices)
    return Partition(assignments={d: d for d in ids}, committee={d: d for d in ids})


class ClusterGame:
    """
    提案 / 受理 (regret 付き) / 実行 のスロットを繰り返す提携形成ゲーム
    - クラスタはID昇順に処理
    - 各クラスタは訪問回数最小の端末を候補にする
    - 実行前に現在の分割で利得を再評価し、正のものだけ実行する
    """

    def __init__(
        self,
        devices: Sequence[Device],
        sp: SizeProfile,
        cp: ChannelParams,
        settings: ClusteringSettings | None = None,
    ):
        if len(devices) < radio.BFT_MINIMUM:
            raise InvalidInputError(f"BFT minimum violated: 端末数 {len(devices)} (< 4)")
        self.settings = settings or ClusteringSettings()
        self.model = WelfareModel(devices, sp, cp, self.settings)
        self.trace: list[SlotRecord] = []

    def initial_state(self) -> GameState:
        ids = self.model.device_ids
        state = GameState(
            device_ids=ids,
            labels=np.array(ids, dtype=np.int64),
            heads={d: d for d in ids},
            visit_counts={d: 0 for d in ids},
        )
        state.welfare = self.model.evaluate_arrays(state.labels, state.heads).welfare
        return state

    def state_from(self, partition: Partition) -> GameState:
        ids = self.model.device_ids
        state = GameState(
            device_ids=ids,
            labels=np.array([partition.assignments[d] for d in ids], dtype=np.int64),
            heads=dict(partition.committee),
            visit_counts={d: 0 for d in ids},
        )
        state.welfare = self.model.evaluate_arrays(state.labels, state.heads).welfare
        return state

    def cluster_value(self, state: GameState, cluster_id: int) -> float:
        """v = u − c (空クラスタは 0)"""
        if cluster_id not in state.heads:
            return 0.0
        return self.model.evaluate_arrays(state.labels, state.heads).value_of(cluster_id)

    def _trial(self, op: SwitchOp, state: GameState) -> tuple[np.ndarray, dict[int, int], Evaluation]:
        pos = self.model.index[op.device]
        labels = state.labels.copy()
        labels[pos] = op.to_cluster
        heads = dict(state.heads)
        remaining = np.flatnonzero(labels == op.from_cluster)
        if remaining.size == 0:
            del heads[op.from_cluster]
        elif heads[op.from_cluster] == op.device:
            heads[op.from_cluster] = self.model.device_ids[remaining[0]]
        heads[op.to_cluster], evaluation = self.model.elect(labels, heads, op.to_cluster)
        if op.from_cluster in heads:
            heads[op.from_cluster], evaluation = self.model.elect(labels, heads, op.from_cluster)
        return labels, heads, evaluation

    def switch_gain(self, op: SwitchOp, state: GameState) -> float:
        """切替後と切替前の社会的厚生の差 (影響を受けるクラスタはコミッティを再選出)"""
        _, _, evaluation = self._trial(op, state)
        return evaluation.welfare - state.welfare

    def neighbors(self, device_id: int, state: GameState) -> list[int]:
        own = state.cluster_of(device_id)
        floor = self.settings.min_rate_bps
        pos = self.model.index[device_id]
        result = []
        for cluster_id in sorted(state.heads):
            if cluster_id == own:
                continue
            members = np.flatnonzero(state.labels == cluster_id)
            if floor <= 0 or np.any(self.model.rates[pos, members] >= floor):
                result.append(cluster_id)
        return result

    def _improves(self, gain: float, state: GameState) -> bool:
        return gain > GAIN_EPS * max(1.0, abs(state.welfare))

    def update_preferences(self, device_id: int, state: GameState) -> tuple[list[SwitchOp], SwitchOp | None]:
        """
        端末の選好リスト 𝒫_i を更新し、提案する切替を返す
        - 正の利得だけを降順 (同点は移動先IDの小さい方) に並べる
        - 移動先が available で、前スロットの未実行提案の利得を上回るものを提案
        """
        own = state.cluster_of(device_id)
        ops = []
        for target in self.neighbors(device_id, state):
            gain = self.switch_gain(SwitchOp(device_id, own, target), state)
            if self._improves(gain, state):
                ops.append(SwitchOp(device_id, own, target, gain))
        ops.sort(key=lambda op: (-op.gain, op.to_cluster))
        state.preference_lists[device_id] = ops
        previous = state.last_gain.get(device_id, 0.0)
        for op in ops:
            if state.cluster_states.get(op.to_cluster, AVAILABLE) == AVAILABLE and op.gain > previous:
                return ops, op
        return ops, None

    def _receive(self, op: SwitchOp, state: GameState, accepted: dict[int, SwitchOp]) -> int:
        """
        提案の受理
        - 移動元が他の受理済み操作の移動先 (occupied) なら利得の大きい方を残す
        - 戻り値は regret した操作の数
        """
        rival = next((a for a in accepted.values() if a.to_cluster == op.from_cluster), None)
        if rival is None:
            accepted[op.from_cluster] = op
            state.cluster_states[op.to_cluster] = OCCUPIED
            return 0
        if op.gain > rival.gain:
            del accepted[rival.from_cluster]
            state.cluster_states[rival.to_cluster] = AVAILABLE
            state.last_gain[rival.device] = rival.gain
            accepted[op.from_cluster] = op
            state.cluster_states[op.to_cluster] = OCCUPIED
        else:
            state.last_gain[op.device] = op.gain
        return 1

    def _execute(self, op: SwitchOp, state: GameState) -> SwitchOp | None:
        if state.cluster_of(op.device) != op.from_cluster or op.to_cluster not in state.heads:
            return None
        labels, heads, evaluation = self._trial(op, state)
        gain = evaluation.welfare - state.welfare
        if not self._improves(gain, state):
            return None
        state.labels, state.heads, state.welfare = labels, heads, evaluation.welfare
        return SwitchOp(op.device, op.from_cluster, op.to_cluster, gain)

    def step(self, state: GameState) -> SlotRecord:
        """1スロット (提案 → 受理 → 実行)"""
        state.slot += 1
        memory = state.last_gain
        state.last_gain = {}
        state.cluster_states = {cid: AVAILABLE for cid in state.heads}
        state.pending_ops = []
        accepted: dict[int, SwitchOp] = {}
        regrets = 0
        for cluster_id in sorted(state.heads):
            members = state.members(cluster_id)
            candidate = min(members, key=lambda d: (state.visit_counts[d], d))
            state.visit_counts[candidate] += 1
            state.last_gain[candidate] = memory.get(candidate, 0.0)
            _, proposal = self.update_preferences(candidate, state)
            state.last_gain.pop(candidate, None)
            if proposal is None:
                continue
            state.pending_ops.append(proposal)
            regrets += self._receive(proposal, state, accepted)

        before = state.welfare
        executed = []
        for source in sorted(accepted):
            done = self._execute(accepted[source], state)
            if done is not None:
                executed.append(done)
        if executed and not state.welfare > before:
            raise ClusteringError(f"社会的厚生が増加していません (slot={state.slot})")
        record = SlotRecord(state.slot, tuple(executed), regrets, state.welfare, len(state.heads))
        self.trace.append(record)
        logger.debug(
            f"slot={state.slot} 実行={len(executed)} regret={regrets} K={len(state.heads)} 厚生={state.welfare:.6g}"
        )
        return record

    def nash_audit(self, state: GameState) -> list[SwitchOp]:
        """
        全端末の単独切替を調べ、正の利得を持つものを返す
        - 候補は提案と同じ近傍 (min_rate_bps が 0 なら N·(K−1) 通り全て)
        """
        found = []
        for device_id in state.device_ids:
            own = state.cluster_of(device_id)
            for target in self.neighbors(device_id, state):
                gain = self.switch_gain(SwitchOp(device_id, own, target), state)
                if self._improves(gain, state):
                    found.append(SwitchOp(device_id, own, target, gain))
        return found

    def run(self, state: GameState | None = None) -> GameResult:
        state = state or self.initial_state()
        seen = {self._state_key(state)}
        while True:
            if state.slot >= self.settings.slot_cap:
                raise ClusteringError(
                    f"クラスタリングが slot_cap={self.settings.slot_cap} 以内に収束しませんでした "
                    f"(K={len(state.heads)}, 厚生={state.welfare:.6g})"
                )
            record = self.step(state)
            if record.executed:
                key = self._state_key(state)
                if key in seen:
                    raise ClusteringError(f"同じ分割を再訪しました (slot={state.slot})")
                seen.add(key)
                continue
            if not self.nash_audit(state):
                break
        partition = state.partition
        if not partition.is_feasible():
            raise ClusteringError("収束した分割が制約を満たしていません: " + "; ".join(partition.issues()))
        logger.info(
            f"クラスタリング収束: slot={state.slot} K={partition.num_clusters} 厚生={state.welfare:.6g}"
        )
        return GameResult(partition, state.welfare, state.slot, tuple(self.trace))

    @staticmethod
    def _state_key(state: GameState) -> tuple:
        return (state.partition.key(), tuple(sorted(state.heads.values())))


def run_game(
    devices: Sequence[Device],
    sp: SizeProfile,
    cp: ChannelParams,
    settings: ClusteringSettings | None = None,
) -> Partition:
    """単独クラスタから開始してナッシュ安定な分割を返す"""
    return ClusterGame(devices, sp, cp, settings).run().partition


def elect_committee(
    partition: Partition,
    devices: Sequence[Device],
    sp: SizeProfile,
    cp: ChannelParams,
    settings: ClusteringSettings | None = None,
) -> Partition:
    """
    所属を固定したままコミッティを再選出 (更新コンセンサス後)
    - クラスタID昇順に、そのクラスタの u を最大化する端末を選ぶ
    """
    model = WelfareModel(devices, sp, cp, settings or ClusteringSettings())
    labels = np.array([partition.assignments[d] for d in model.device_ids], dtype=np.int64)
    heads = dict(partition.committee)
    for cluster_id in sorted(heads):
        heads[cluster_id], _ = model.elect(labels, heads, cluster_id)
    return Partition(assignments=dict(partition.assignments), committee=heads)
