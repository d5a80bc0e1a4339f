"""
攻撃の注入

- label_flip: 攻撃者のデータのラベルを置換 (既定は (ℓ+1) mod L)
- replay: 過去にチェーンへ記録された自分の更新を再提出
- committee_vote_no: コミッティに入った攻撃者が常に反対票を投じる
"""

import logging
from collections.abc import Callable, Iterable, Sequence

import numpy as np

from core.errors import InvalidInputError
from core.rng import SeededStream
from core.settings import AttackConfig
from core.types import DatasetShard, ModelUpdate

logger = logging.getLogger(__name__)


def default_flip_map(num_classes: int) -> list[int]:
    return [(label + 1) % num_classes for label in range(num_classes)]


def apply_poison(shard: DatasetShard, flip_map: Sequence[int] | None = None) -> DatasetShard:
    """ラベルだけを置換し、特徴量はそのまま"""
    mapping = np.asarray(
        flip_map if flip_map is not None else default_flip_map(shard.num_classes), dtype=np.int64
    )
    if sorted(mapping.tolist()) != list(range(shard.num_classes)):
        raise InvalidInputError("flip_map は [0, L) の置換が必要です")
    return DatasetShard(shard.features, mapping[shard.labels], shard.num_classes)


def select_attackers(device_ids: Iterable[int], rate: float, rng: SeededStream) -> frozenset[int]:
    """攻撃者を非復元で一様に選ぶ (攻撃用ストリームのみ消費)"""
    ids = sorted(device_ids)
    count = int(round(rate * len(ids)))
    if count <= 0:
        return frozenset()
    chosen = rng.choice(np.array(ids), size=count, replace=False)
    return frozenset(int(d) for d in chosen)


def maybe_replay(
    attacker: int,
    fresh: ModelUpdate,
    history: Sequence[ModelUpdate],
    rng: SeededStream,
    replay_rate: float = 0.5,
) -> ModelUpdate:
    """
    確率 replay_rate で過去の更新をそのまま返す (識別子も署名も過去のまま)
    - 履歴が空なら常に新しい更新
    """
    draw = rng.random()
    if not history or draw >= replay_rate:
        return fresh
    chosen = history[int(rng.integers(0, len(history)))]
    logger.debug(f"端末 {attacker} がラウンド {chosen.round} の更新を再提出します")
    return chosen


class Adversary:
    """
    1回の実行における攻撃状態
    - 攻撃者集合・リプレイ履歴・攻撃用乱数ストリームを持つ
    """

    def __init__(self, config: AttackConfig, device_ids: Iterable[int], rng: SeededStream):
        self.config = config
        self.rng = rng
        rate = config.attacker_rate if config.kind != "none" else 0.0
        self.attackers = select_attackers(device_ids, rate, rng.split("select"))
        self._replay_rng = rng.split("replay")
        self.history: dict[int, list[ModelUpdate]] = {}
        if self.attackers:
            logger.info(f"攻撃 {config.kind}: 攻撃者 {sorted(self.attackers)}")

    def is_attacker(self, device_id: int) -> bool:
        return device_id in self.attackers

    def poison(self, device_id: int, shard: DatasetShard) -> DatasetShard:
        if self.config.kind != "label_flip" or device_id not in self.attackers:
            return shard
        return apply_poison(shard, self.config.flip_map)

    def submit(self, device_id: int, fresh: ModelUpdate) -> ModelUpdate:
        if self.config.kind != "replay" or device_id not in self.attackers:
            return fresh
        return maybe_replay(
            device_id, fresh, self.history.get(device_id, []), self._replay_rng, self.config.replay_rate
        )

    def remember(self, update: ModelUpdate) -> None:
        """チェーンに記録された攻撃者自身の更新を履歴へ"""
        if update.owner in self.attackers and self.config.kind == "replay":
            entries = self.history.setdefault(update.owner, [])
            if all(e.identifier != update.identifier for e in entries):
                entries.append(update)

    def retain(self, is_live: Callable[[bytes], bool]) -> None:
        """prune されたチェーン外の更新を履歴から外す"""
        for device_id, entries in self.history.items():
            self.history[device_id] = [e for e in entries if is_live(e.identifier)]

    def forced_no(self, committee: Iterable[int]) -> frozenset[int]:
        """committee_vote_no: コミッティに入った攻撃者"""
        if self.config.kind != "committee_vote_no":
            return frozenset()
        return forced_no_voters(self.attackers, committee)


def forced_no_voters(attackers: Iterable[int], committee: Iterable[int]) -> frozenset[int]:
    members = set(committee)
    return frozenset(d for d in attackers if d in members)
