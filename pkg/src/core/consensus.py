"""
台帳・CBFT ブロック合意・更新コンセンサス

Block の正準レイアウト (リトルエンディアン):
    u64 height | 32B prev_hash | 32B model_id | i64 proposer | i64 round | f64 timestamp | u8 kind
    | u32 n | n × (i64 device | i64 |D_i| | u8 verified | 32B update_id)
    | u32 m | m × i64 voter
    | u32 len | payload
    | u32 r | r × (i64 device | f64 reputation)
block_hash はこの列の SHA-256。シリアライズ時は末尾に block_hash を付ける。
"""

import json
import logging
import struct
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from core import clustering, radio
from core.codec import HASH_SIZE, ZERO_HASH, digest, from_hex, to_hex, weights_bytes
from core.errors import ChainError, InvalidInputError
from core.rng import SeededStream
from core.settings import ChannelParams, ClusteringSettings, ProtocolSettings, SizeProfile
from core.types import COMMITTEE, MEMBER, Device, ModelUpdate, Partition

logger = logging.getLogger(__name__)

GENESIS = "genesis"
MODEL = "model"
FRAGMENT = "fragment"
CHECKPOINT = "checkpoint"
BLOCK_KINDS = (GENESIS, MODEL, FRAGMENT, CHECKPOINT)

_HEADER = struct.Struct("<Q32s32sqqdB")
_PARTICIPANT = struct.Struct("<qqB32s")
_COUNT = struct.Struct("<I")
_VOTER = struct.Struct("<q")
_SCORE = struct.Struct("<qd")


def bft_threshold(K: int) -> int:
    """⌈(2K+1)/3⌉"""
    return -(-(2 * K + 1) // 3)


@dataclass(frozen=True)
class Participation:
    device: int
    data_size: int
    verified: bool
    update_id: bytes = ZERO_HASH


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    model_id: bytes
    proposer: int
    round: int
    participation: tuple[Participation, ...] = ()
    timestamp: float = 0.0
    kind: str = MODEL
    voters: tuple[int, ...] = ()
    payload: bytes = b""
    reputation: tuple[tuple[int, float], ...] = ()
    block_hash: bytes = b""

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise InvalidInputError(f"未知のブロック種別です: {self.kind}")
        if not self.block_hash:
            object.__setattr__(self, "block_hash", self.compute_hash())

    def body_bytes(self) -> bytes:
        parts = [
            _HEADER.pack(
                self.height,
                self.prev_hash,
                self.model_id,
                self.proposer,
                self.round,
                self.timestamp,
                BLOCK_KINDS.index(self.kind),
            ),
            _COUNT.pack(len(self.participation)),
        ]
        parts += [
            _PARTICIPANT.pack(p.device, p.data_size, int(p.verified), p.update_id) for p in self.participation
        ]
        parts.append(_COUNT.pack(len(self.voters)))
        parts += [_VOTER.pack(v) for v in self.voters]
        parts.append(_COUNT.pack(len(self.payload)) + self.payload)
        parts.append(_COUNT.pack(len(self.reputation)))
        parts += [_SCORE.pack(d, s) for d, s in self.reputation]
        return b"".join(parts)

    def compute_hash(self) -> bytes:
        return digest([self.body_bytes()])

    def to_bytes(self) -> bytes:
        return self.body_bytes() + self.block_hash

    @property
    def size_bytes(self) -> int:
        return len(self.body_bytes()) + HASH_SIZE

    @classmethod
    def from_bytes(cls, data: bytes) -> "Block":
        height, prev_hash, model_id, proposer, round_index, timestamp, kind = _HEADER.unpack_from(data, 0)
        offset = _HEADER.size

        def count() -> int:
            nonlocal offset
            (value,) = _COUNT.unpack_from(data, offset)
            offset += _COUNT.size
            return value

        participation = []
        for _ in range(count()):
            device, size, verified, update_id = _PARTICIPANT.unpack_from(data, offset)
            offset += _PARTICIPANT.size
            participation.append(Participation(device, size, bool(verified), update_id))
        voters = []
        for _ in range(count()):
            voters.append(_VOTER.unpack_from(data, offset)[0])
            offset += _VOTER.size
        length = count()
        payload = data[offset : offset + length]
        offset += length
        reputation = []
        for _ in range(count()):
            reputation.append(_SCORE.unpack_from(data, offset))
            offset += _SCORE.size
        return cls(
            height,
            prev_hash,
            model_id,
            proposer,
            round_index,
            tuple(participation),
            timestamp,
            BLOCK_KINDS[kind],
            tuple(voters),
            payload,
            tuple(reputation),
            block_hash=data[offset : offset + HASH_SIZE],
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "height": self.height,
            "kind": self.kind,
            "prev_hash": to_hex(self.prev_hash),
            "model_id": to_hex(self.model_id),
            "proposer": self.proposer,
            "round": self.round,
            "timestamp": self.timestamp,
            "participation": [[p.device, p.data_size, p.verified, to_hex(p.update_id)] for p in self.participation],
            "voters": list(self.voters),
            "payload": to_hex(self.payload),
            "reputation": [[d, s] for d, s in self.reputation],
            "block_hash": to_hex(self.block_hash),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Block":
        return cls(
            height=int(data["height"]),
            prev_hash=from_hex(data["prev_hash"]),
            model_id=from_hex(data["model_id"]),
            proposer=int(data["proposer"]),
            round=int(data["round"]),
            participation=tuple(
                Participation(int(d), int(s), bool(v), from_hex(u)) for d, s, v, u in data["participation"]
            ),
            timestamp=float(data["timestamp"]),
            kind=str(data["kind"]),
            voters=tuple(int(v) for v in data["voters"]),
            payload=from_hex(data["payload"]),
            reputation=tuple((int(d), float(s)) for d, s in data["reputation"]),
            block_hash=from_hex(data["block_hash"]),
        )


class Ledger:
    """
    追記専用のハッシュチェーン
    - prune 後も anchor_hash (最初の生存ブロックの prev_hash) から検証できる
    - reward_cursor より後のブロックが次の更新コンセンサスの報酬対象
    """

    def __init__(self, duplicate_detection: bool = True):
        self.blocks: list[Block] = []
        self.reputation: dict[int, float] = {}
        self.epoch = 0
        self.anchor_hash = ZERO_HASH
        self.reward_cursor = 0
        self.duplicate_detection = duplicate_detection
        self._identifiers: set[bytes] = set()
        self._slots: set[tuple[int, int]] = set()

    @classmethod
    def create(cls, timestamp: float = 0.0, duplicate_detection: bool = True) -> "Ledger":
        ledger = cls(duplicate_detection)
        ledger.blocks.append(Block(0, ZERO_HASH, ZERO_HASH, -1, -1, timestamp=timestamp, kind=GENESIS))
        return ledger

    @property
    def head(self) -> Block:
        return self.blocks[-1]

    @property
    def next_height(self) -> int:
        return self.head.height + 1 if self.blocks else 0

    @property
    def tip_hash(self) -> bytes:
        return self.head.block_hash if self.blocks else self.anchor_hash

    def _index(self, block: Block) -> None:
        if block.kind == MODEL:
            self._identifiers.add(block.model_id)
            self._slots.add((block.proposer, block.round))
        for p in block.participation:
            if p.verified and p.update_id != ZERO_HASH:
                self._identifiers.add(p.update_id)

    def _reindex(self) -> None:
        self._identifiers.clear()
        self._slots.clear()
        for block in self.blocks:
            self._index(block)

    def contains(self, identifier: bytes) -> bool:
        """生存チェーン上のモデルIDまたは検証済み参加者の更新IDか"""
        return identifier in self._identifiers

    def duplicate_of(self, block: Block) -> bool:
        if not self.duplicate_detection:
            return False
        if self.contains(block.model_id):
            return True
        return any(p.verified and p.update_id != ZERO_HASH and self.contains(p.update_id) for p in block.participation)

    def draft(self, **fields) -> Block:
        """次の高さと prev_hash を埋めたブロックを作る"""
        return Block(height=self.next_height, prev_hash=self.tip_hash, **fields)

    def append(self, block: Block) -> Block:
        if block.height != self.next_height or block.prev_hash != self.tip_hash:
            raise ChainError(block.height, "高さまたは prev_hash がチェーンの先頭と一致しません")
        if block.kind == MODEL:
            if (block.proposer, block.round) in self._slots:
                raise InvalidInputError(
                    f"同じ (proposer={block.proposer}, round={block.round}) のブロックが既にあります"
                )
            if self.duplicate_detection and self.contains(block.model_id):
                raise InvalidInputError("replay: model_id が既にチェーン上にあります")
        self.blocks.append(block)
        self._index(block)
        return block

    def append_fragments(self, update: ModelUpdate, proposer: int, round_index: int, timestamp: float, chunk: int) -> list[Block]:
        """モデル本体を chunk バイトずつ fragment ブロックとして格納 (FLC-model)"""
        payload = weights_bytes(update.weights)
        blocks = []
        for start in range(0, len(payload), chunk):
            piece = payload[start : start + chunk]
            blocks.append(
                self.append(
                    self.draft(
                        model_id=digest([update.identifier, struct.pack("<Q", start)]),
                        proposer=proposer,
                        round=round_index,
                        timestamp=timestamp,
                        kind=FRAGMENT,
                        payload=piece,
                    )
                )
            )
        return blocks

    def model_blocks(self) -> list[Block]:
        return [b for b in self.blocks if b.kind == MODEL]

    def blocks_since_cursor(self) -> list[Block]:
        return [b for b in self.blocks if b.height > self.reward_cursor and b.kind == MODEL]

    def prune(self, keep_after_round: int) -> int:
        """
        round > keep_after_round のブロックと最新のチェックポイントだけを残す
        - 戻り値は削除したブロック数
        """
        latest_checkpoint = max(
            (b.height for b in self.blocks if b.kind == CHECKPOINT), default=None
        )
        cut = 0
        for position, block in enumerate(self.blocks):
            keep = block.height == latest_checkpoint or (block.kind != CHECKPOINT and block.round > keep_after_round)
            if keep:
                break
            cut = position + 1
        if cut == 0:
            return 0
        self.anchor_hash = self.blocks[cut].prev_hash if cut < len(self.blocks) else self.blocks[-1].block_hash
        del self.blocks[:cut]
        self._reindex()
        logger.debug(f"prune: {cut} ブロックを削除 (残り {len(self.blocks)})")
        return cut

    def verify_chain(self) -> None:
        """ハッシュと prev_hash の連結を最初の生存ブロックから検証 (失敗時 ChainError)"""
        previous = self.anchor_hash
        expected_height = self.blocks[0].height if self.blocks else 0
        model_ids: set[bytes] = set()
        for block in self.blocks:
            if block.height != expected_height:
                raise ChainError(block.height, f"高さが連続していません (期待値 {expected_height})")
            if block.compute_hash() != block.block_hash:
                raise ChainError(block.height, "block_hash が内容と一致しません")
            if block.prev_hash != previous:
                raise ChainError(block.height, "prev_hash が直前のブロックと一致しません")
            if block.kind == MODEL and self.duplicate_detection:
                if block.model_id in model_ids:
                    raise ChainError(block.height, "model_id が重複しています")
                model_ids.add(block.model_id)
            previous = block.block_hash
            expected_height += 1

    def live_bytes(self) -> int:
        return sum(b.size_bytes for b in self.blocks)

    def export_jsonl(self, path: str | Path) -> Path:
        """1行目にチェーンのメタ情報、以降1行1ブロック"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {
            "anchor_hash": to_hex(self.anchor_hash),
            "epoch": self.epoch,
            "reward_cursor": self.reward_cursor,
            "duplicate_detection": self.duplicate_detection,
            "reputation": [[d, s] for d, s in sorted(self.reputation.items())],
        }
        lines = [json.dumps(header, ensure_ascii=False)]
        lines += [json.dumps(b.to_dict(), ensure_ascii=False) for b in self.blocks]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def import_jsonl(cls, path: str | Path) -> "Ledger":
        lines = [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
        if not lines:
            raise ChainError(0, "空のファイルです")
        try:
            header = json.loads(lines[0])
            ledger = cls(bool(header.get("duplicate_detection", True)))
            ledger.anchor_hash = from_hex(header["anchor_hash"])
            ledger.epoch = int(header["epoch"])
            ledger.reward_cursor = int(header["reward_cursor"])
            ledger.reputation = {int(d): float(s) for d, s in header["reputation"]}
        except (ValueError, KeyError, TypeError) as e:
            raise ChainError(-1, f"ヘッダを読み込めません: {e}") from e
        height = -1
        for number, line in enumerate(lines[1:], start=1):
            try:
                block = Block.from_dict(json.loads(line))
            except (ValueError, KeyError, TypeError) as e:
                raise ChainError(height + 1, f"{number + 1} 行目を読み込めません: {e}") from e
            height = block.height
            ledger.blocks.append(block)
        ledger._reindex()
        return ledger


@dataclass
class ConsensusRound:
    """1回の CBFT の進行状態 (フェーズは前進のみ)"""

    requester: int
    committee: tuple[int, ...]
    threshold: int
    phase: str = "prepare"
    votes: dict[str, dict[int, bool]] = field(default_factory=dict)

    PHASES = ("prepare", "verify", "commit", "reply", "done")

    def advance(self, phase: str) -> None:
        if phase == "aborted":
            if self.phase == "done":
                raise InvalidInputError("完了したラウンドは中断できません")
        elif self.phase == "aborted" or self.PHASES.index(phase) <= self.PHASES.index(self.phase):
            raise InvalidInputError(f"フェーズを戻すことはできません: {self.phase} → {phase}")
        self.phase = phase

    def record(self, phase: str, member: int, vote: bool) -> None:
        if member not in self.committee:
            raise InvalidInputError(f"コミッティ外の端末 {member} の投票です")
        self.votes.setdefault(phase, {})[member] = vote

    def tally(self, phase: str) -> int:
        return sum(self.votes.get(phase, {}).values())


@dataclass(frozen=True)
class CommitResult:
    committed: bool
    reason: str | None
    latency: float
    block: Block | None
    round: ConsensusRound


QualityFn = Callable[[ModelUpdate, Device], float]


def _cast(member: Device, honest: bool, rng: SeededStream, forced_no: Iterable[int]) -> bool:
    """信頼度の確率で正直に投票し、それ以外は反対の票を投じる"""
    draw = rng.random()
    if member.id in forced_no:
        return False
    return honest if draw < member.reliability else not honest


def cbft_commit(
    block: Block,
    model: ModelUpdate,
    committee: Sequence[Device],
    ledger: Ledger,
    quality_fn: QualityFn | None,
    *,
    rng: SeededStream,
    sp: SizeProfile,
    cp: ChannelParams,
    accuracy_threshold: float,
    forced_no: frozenset[int] = frozenset(),
) -> CommitResult:
    """
    CBFT (prepare → verify → commit → reply)
    - 各メンバーの検証: 署名 ∧ 品質 ≥ 𝒜 (重複は台帳側で決定的に拒否)
    - verify と commit の票がそれぞれ ⌈(2K+1)/3⌉ 以上でブロックを追記
    """
    members = sorted(committee, key=lambda d: d.id)
    if len(members) < radio.BFT_MINIMUM:
        raise InvalidInputError(f"BFT minimum violated: コミッティ {len(members)} 台 (< 4)")
    if model.identifier != block.model_id:
        raise InvalidInputError("model.identifier と block.model_id が一致しません")
    state = ConsensusRound(block.proposer, tuple(m.id for m in members), bft_threshold(len(members)))
    by_id = {m.id: m for m in members}
    proposer = by_id.get(block.proposer)
    latency = radio.verify_latency(proposer, members, sp, cp) if proposer is not None else 0.0

    def abort(reason: str) -> CommitResult:
        state.advance("aborted")
        logger.debug(f"CBFT 中断: proposer={block.proposer} round={block.round} 理由={reason}")
        return CommitResult(False, reason, latency, None, state)

    if radio.broadcast_term(len(members), sp, cp) > cp.broadcast_timeout:
        return abort("timeout")
    if ledger.duplicate_of(block):
        return abort("replay")

    state.advance("verify")
    verdicts = {}
    for member in members:
        quality_ok = quality_fn is None or quality_fn(model, member) >= accuracy_threshold
        verdicts[member.id] = model.signature_valid and quality_ok
        state.record("verify", member.id, _cast(member, verdicts[member.id], rng, forced_no))
    if state.tally("verify") < state.threshold:
        if not model.signature_valid:
            return abort("signature")
        if sum(verdicts.values()) < state.threshold:
            return abort("quality")
        return abort("votes")

    state.advance("commit")
    for member in members:
        state.record("commit", member.id, _cast(member, True, rng, forced_no))
    if state.tally("commit") < state.threshold:
        return abort("votes")

    state.advance("reply")
    committed = ledger.append(replace(block, voters=state.committee, block_hash=b""))
    state.advance("done")
    return CommitResult(True, None, latency, committed, state)


@dataclass(frozen=True)
class RewardSummary:
    granted: dict[int, float]
    blocks: int
    participations: int
    block_total: float
    consensus_total: float


def assign_rewards(ledger: Ledger, reward_block: float, reward_consensus: float) -> RewardSummary:
    """
    前回の更新コンセンサス以降のブロックに対する報酬 (式 17)
    - R^{b+} を検証済み参加者で |D_i| 比で分配
    - 各ブロックの投票者に R^{b−}
    """
    granted: dict[int, float] = {}
    blocks = participations = 0
    block_total = consensus_total = 0.0
    for block in ledger.blocks_since_cursor():
        blocks += 1
        verified = [p for p in block.participation if p.verified]
        total_size = sum(p.data_size for p in verified)
        if total_size > 0:
            for p in verified:
                share = reward_block * p.data_size / total_size
                granted[p.device] = granted.get(p.device, 0.0) + share
            block_total += reward_block
        for voter in block.voters:
            granted[voter] = granted.get(voter, 0.0) + reward_consensus
            participations += 1
            consensus_total += reward_consensus
    return RewardSummary(granted, blocks, participations, block_total, consensus_total)


def normalize_reputation(
    reputation: Mapping[int, float],
    floor: float = 0.1,
    ceiling: float = 0.99,
    prior: float = 0.8,
) -> dict[int, float]:
    """
    min-max 正規化で [floor, ceiling] に写す
    - 全てゼロなら事前信頼度、全て同じ正の値なら ceiling
    """
    if any(score < 0 for score in reputation.values()):
        raise InvalidInputError("reputation は非負が必要です")
    if not reputation:
        return {}
    low, high = min(reputation.values()), max(reputation.values())
    if high == 0:
        return {d: prior for d in reputation}
    if high == low:
        return {d: ceiling for d in reputation}
    span = ceiling - floor
    return {d: floor + (score - low) / (high - low) * span for d, score in reputation.items()}


@dataclass(frozen=True)
class EpochResult:
    success: bool
    attempts: int
    partition: Partition
    devices: list[Device]
    rewards: RewardSummary
    pruned: int
    checkpoint: Block | None
    latency: float


def _random_committee(partition: Partition, rng: SeededStream) -> Partition:
    """各クラスタから1台を一様に選び直す"""
    committee = {}
    for cluster_id, members in partition.clusters().items():
        committee[cluster_id] = int(members[int(rng.integers(0, len(members)))])
    return Partition(dict(partition.assignments), committee)


def update_consensus(
    ledger: Ledger,
    partition: Partition,
    devices: Sequence[Device],
    protocol: ProtocolSettings,
    sp: SizeProfile,
    cp: ChannelParams,
    *,
    rng: SeededStream,
    round_index: int,
    timestamp: float,
    global_model_id: bytes,
    clustering_settings: ClusteringSettings | None = None,
    forced_no: frozenset[int] = frozenset(),
) -> EpochResult:
    """
    χ ラウンドごとの更新コンセンサス
    - 報酬計算 → 2段階投票 (失敗時はコミッティを無作為に組み直して再試行)
    - 成功時: チェックポイント追記 → prune → 信頼度の再計算 → コミッティ再選出
    """
    by_id = {d.id: d for d in devices}
    rewards = assign_rewards(ledger, protocol.reward_block, protocol.reward_consensus)
    current = partition
    latency = 0.0
    for attempt in range(1, protocol.retry_cap + 1):
        committee = [by_id[d] for d in current.committee_ids()]
        latency += radio.update_consensus_latency(committee, sp, cp)
        threshold = bft_threshold(len(committee))
        passed = True
        for _phase in ("prepare", "commit"):
            votes = sum(_cast(member, True, rng, forced_no) for member in committee)
            if votes < threshold:
                passed = False
                break
        if passed:
            break
        logger.warning(f"更新コンセンサス失敗 (試行 {attempt}/{protocol.retry_cap})、コミッティを組み直します")
        current = _random_committee(current, rng)
    else:
        logger.warning(f"更新コンセンサスが {protocol.retry_cap} 回失敗しました。このエポックをスキップします")
        return EpochResult(False, protocol.retry_cap, partition, list(devices), rewards, 0, None, latency)

    reputation = dict(ledger.reputation)
    for device in devices:
        reputation.setdefault(device.id, 0.0)
    for device_id, score in rewards.granted.items():
        reputation[device_id] = reputation.get(device_id, 0.0) + score
    ledger.reputation = reputation
    checkpoint = ledger.append(
        ledger.draft(
            model_id=global_model_id,
            proposer=-1,
            round=round_index,
            timestamp=timestamp,
            kind=CHECKPOINT,
            voters=tuple(current.committee_ids()),
            reputation=tuple(sorted(reputation.items())),
        )
    )
    pruned = ledger.prune(round_index - protocol.chi)
    ledger.reward_cursor = checkpoint.height
    ledger.epoch += 1

    reliability = normalize_reputation(
        {d.id: reputation[d.id] for d in devices},
        protocol.reliability_floor,
        protocol.reliability_ceiling,
        protocol.prior_reliability,
    )
    refreshed = [replace(d, reliability=reliability[d.id], reputation=reputation[d.id]) for d in devices]
    elected = clustering.elect_committee(current, refreshed, sp, cp, clustering_settings)
    heads = set(elected.committee_ids())
    refreshed = [replace(d, role=COMMITTEE if d.id in heads else MEMBER) for d in refreshed]
    logger.info(
        f"更新コンセンサス完了: epoch={ledger.epoch} 試行={attempt} prune={pruned} "
        f"生存ブロック={len(ledger.blocks)}"
    )
    return EpochResult(True, attempt, elected, refreshed, rewards, pruned, checkpoint, latency)
