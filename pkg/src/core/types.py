#!/usr/bin/env python3

import logging
import struct
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from core.codec import canonical_hash, from_hex, to_hex, weights_bytes, weights_from_bytes
from core.errors import InvalidInputError

logger = logging.getLogger(__name__)

MEMBER = "member"
COMMITTEE = "committee"


@dataclass(frozen=True, eq=False)
class DatasetShard:
    """端末が保持するデータ断片 (特徴量 |D_i|×d とラベル)"""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise InvalidInputError("ラベルがクラス数 L 以上です")
        if self.features.shape[0] != self.labels.shape[0]:
            raise InvalidInputError("特徴量とラベルの行数が一致しません")

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetShard):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "features": self.features.tolist(),
            "labels": self.labels.tolist(),
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DatasetShard":
        features = np.asarray(data["features"], dtype=np.float64)
        if features.ndim == 1:
            features = features.reshape(0, 0) if features.size == 0 else features[None, :]
        return cls(features, np.asarray(data["labels"], dtype=np.int64), int(data["num_classes"]))


@dataclass(frozen=True)
class Device:
    """
    エッジ端末
    - reliability は合意成功確率、reputation はその正規化元となる生スコア
    - tx_power (送信電力) と reliability は別フィールドとして保持する
    """

    id: int
    position: tuple[float, float]  # (x, y) メートル
    compute: float  # c_i (FLOP/s)
    tx_power: float  # p_i (W)
    dataset: DatasetShard
    reliability: float  # [0,1]
    reputation: float = 0.0  # r_i
    role: str = MEMBER

    def __post_init__(self):
        if not 0.0 <= self.reliability <= 1.0:
            raise InvalidInputError(f"reliability が [0,1] の範囲外です: {self.reliability}")
        if self.compute <= 0 or self.tx_power <= 0:
            raise InvalidInputError("compute と tx_power は正の値が必要です")
        if self.reputation < 0:
            raise InvalidInputError("reputation は非負が必要です")

    def distance_to(self, other: "Device") -> float:
        return float(np.hypot(self.position[0] - other.position[0], self.position[1] - other.position[1]))

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "position": list(self.position),
            "compute": self.compute,
            "tx_power": self.tx_power,
            "dataset": self.dataset.to_dict(),
            "reliability": self.reliability,
            "reputation": self.reputation,
            "role": self.role,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Device":
        return cls(
            id=int(data["id"]),
            position=(float(data["position"][0]), float(data["position"][1])),
            compute=float(data["compute"]),
            tx_power=float(data["tx_power"]),
            dataset=DatasetShard.from_dict(data["dataset"]),
            reliability=float(data["reliability"]),
            reputation=float(data["reputation"]),
            role=str(data["role"]),
        )


@dataclass(frozen=True)
class Partition:
    """
    クラスタ割当 α とコミッティ選出 β
    - assignments: 端末ID → クラスタID
    - committee: クラスタID → 端末ID (クラスタ内の1台)
    """

    assignments: dict[int, int]
    committee: dict[int, int]

    @property
    def num_clusters(self) -> int:
        return len(self.committee)

    def clusters(self) -> dict[int, list[int]]:
        groups: dict[int, list[int]] = {cid: [] for cid in sorted(self.committee)}
        for device_id in sorted(self.assignments):
            groups.setdefault(self.assignments[device_id], []).append(device_id)
        return groups

    def members(self, cluster_id: int) -> list[int]:
        return [d for d in sorted(self.assignments) if self.assignments[d] == cluster_id]

    def committee_ids(self) -> list[int]:
        return [self.committee[cid] for cid in sorted(self.committee)]

    def cluster_of(self, device_id: int) -> int:
        return self.assignments[device_id]

    def issues(self) -> list[str]:
        """式 (2)-(4), (12) の制約違反を列挙"""
        problems = []
        groups = self.clusters()
        for cid, members in groups.items():
            if not members:
                problems.append(f"クラスタ {cid} が空です")
            if cid not in self.committee:
                problems.append(f"クラスタ {cid} にコミッティがありません")
            elif self.assignments.get(self.committee[cid]) != cid:
                problems.append(f"クラスタ {cid} のコミッティがメンバーではありません")
        if not 4 <= self.num_clusters <= len(self.assignments):
            problems.append(f"クラスタ数 K={self.num_clusters} は 4 ≤ K ≤ N を満たしません")
        return problems

    def is_feasible(self) -> bool:
        return not self.issues()

    def key(self) -> tuple:
        """クラスタ番号に依存しない分割の正準形"""
        return tuple(sorted(tuple(m) for m in self.clusters().values() if m))

    def to_dict(self) -> dict[str, Any]:
        return {
            "assignments": {str(k): v for k, v in sorted(self.assignments.items())},
            "committee": {str(k): v for k, v in sorted(self.committee.items())},
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Partition":
        return cls(
            assignments={int(k): int(v) for k, v in data["assignments"].items()},
            committee={int(k): int(v) for k, v in data["committee"].items()},
        )


@dataclass(frozen=True, eq=False)
class ModelUpdate:
    """
    重みベクトルと出自
    - identifier は重みの正準直列化の SHA-256 で、誰でも再計算できる
    """

    weights: np.ndarray
    owner: int
    round: int
    local_steps: int = 0
    identifier: bytes = field(default=b"")
    signature_valid: bool = True

    def __post_init__(self):
        vector = np.asarray(self.weights, dtype=np.float64).ravel()
        object.__setattr__(self, "weights", vector)
        if not self.identifier:
            object.__setattr__(self, "identifier", canonical_hash(vector))

    @classmethod
    def create(cls, weights, owner: int, round_index: int, local_steps: int = 0) -> "ModelUpdate":
        return cls(np.array(weights, dtype=np.float64), owner, round_index, local_steps)

    def recompute_identifier(self) -> bytes:
        return canonical_hash(self.weights)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelUpdate):
            return NotImplemented
        return (
            self.identifier == other.identifier
            and self.owner == other.owner
            and self.round == other.round
            and self.local_steps == other.local_steps
            and self.signature_valid == other.signature_valid
            and np.array_equal(self.weights, other.weights)
        )

    def __hash__(self):
        return hash((self.identifier, self.owner, self.round))

    def to_bytes(self) -> bytes:
        return weights_bytes(self.weights) + struct.pack(
            "<qqqB", self.owner, self.round, self.local_steps, int(self.signature_valid)
        )

    @classmethod
    def from_bytes(cls, payload: bytes) -> "ModelUpdate":
        weights, offset = weights_from_bytes(payload)
        owner, round_index, steps, valid = struct.unpack_from("<qqqB", payload, offset)
        return cls(weights, owner, round_index, steps, signature_valid=bool(valid))

    def to_dict(self) -> dict[str, Any]:
        return {
            "weights": self.weights.tolist(),
            "owner": self.owner,
            "round": self.round,
            "local_steps": self.local_steps,
            "identifier": to_hex(self.identifier),
            "signature_valid": self.signature_valid,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelUpdate":
        return cls(
            np.asarray(data["weights"], dtype=np.float64),
            int(data["owner"]),
            int(data["round"]),
            int(data["local_steps"]),
            identifier=from_hex(data["identifier"]),
            signature_valid=bool(data["signature_valid"]),
        )
