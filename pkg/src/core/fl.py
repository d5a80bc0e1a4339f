"""
デスクスケールの連合学習

- 小さな numpy モデル (softmax 線形 / 1隠れ層 MLP) と解析的勾配
- ローカル SGD、オフチェーン検証、FedAvg、陳腐化を考慮した非同期集約
- 合成ガウス分布データと Dirichlet 分割
"""

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from core.errors import InvalidInputError, NumericalError
from core.rng import SeededStream, seeded_rng
from core.settings import FLSettings
from core.types import DatasetShard, Device, ModelUpdate

logger = logging.getLogger(__name__)

DIRICHLET_RETRIES = 20


@dataclass(frozen=True)
class GlobalModelSpec:
    """全端末が共有するモデル構造 (パラメータ数は実行中固定)"""

    kind: str = "softmax-linear"
    input_dim: int = 20
    num_classes: int = 10
    hidden: int = 32
    init_seed: int = 0

    @classmethod
    def from_settings(cls, fl: FLSettings) -> "GlobalModelSpec":
        return cls(fl.model_kind, fl.input_dim, fl.num_classes, fl.hidden, fl.init_seed)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        d, L, h = self.input_dim, self.num_classes, self.hidden
        if self.kind == "mlp":
            return [(d, h), (h,), (h, L), (L,)]
        return [(d, L), (L,)]

    @property
    def num_params(self) -> int:
        return sum(math.prod(s) for s in self.shapes)

    def unpack(self, weights: np.ndarray) -> list[np.ndarray]:
        if weights.shape != (self.num_params,):
            raise InvalidInputError(f"重み数 {weights.shape} がモデルの次元 {self.num_params} と一致しません")
        parts, offset = [], 0
        for shape in self.shapes:
            size = math.prod(shape)
            parts.append(weights[offset : offset + size].reshape(shape))
            offset += size
        return parts

    def init_weights(self) -> np.ndarray:
        rng = seeded_rng(self.init_seed).split("model-init")
        parts = []
        for shape in self.shapes:
            if len(shape) == 1:
                parts.append(np.zeros(shape))
            else:
                scale = math.sqrt(2.0 / shape[0]) if self.kind == "mlp" else 0.01
                parts.append(rng.normal(0.0, scale, shape))
        return np.concatenate([p.ravel() for p in parts])


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def predict_logits(weights: np.ndarray, spec: GlobalModelSpec, features: np.ndarray) -> np.ndarray:
    parts = spec.unpack(weights)
    if spec.kind == "mlp":
        w1, b1, w2, b2 = parts
        return np.maximum(features @ w1 + b1, 0.0) @ w2 + b2
    w, b = parts
    return features @ w + b


def loss_and_grad(
    weights: np.ndarray, spec: GlobalModelSpec, features: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """バッチ平均の交差エントロピーとその解析的勾配"""
    n = labels.shape[0]
    parts = spec.unpack(weights)
    onehot = np.zeros((n, spec.num_classes))
    onehot[np.arange(n), labels] = 1.0
    if spec.kind == "mlp":
        w1, b1, w2, b2 = parts
        pre = features @ w1 + b1
        hidden = np.maximum(pre, 0.0)
        probs = _softmax(hidden @ w2 + b2)
        delta = (probs - onehot) / n
        grad_hidden = (delta @ w2.T) * (pre > 0)
        grads = [features.T @ grad_hidden, grad_hidden.sum(axis=0), hidden.T @ delta, delta.sum(axis=0)]
    else:
        w, b = parts
        probs = _softmax(features @ w + b)
        delta = (probs - onehot) / n
        grads = [features.T @ delta, delta.sum(axis=0)]
    loss = -float(np.mean(np.log(np.clip(probs[np.arange(n), labels], 1e-300, None))))
    return loss, np.concatenate([g.ravel() for g in grads])


def evaluate(weights: np.ndarray, spec: GlobalModelSpec, features: np.ndarray, labels: np.ndarray) -> float:
    """分類精度"""
    if labels.shape[0] == 0:
        return 0.0
    predictions = predict_logits(weights, spec, features).argmax(axis=1)
    return float(np.mean(predictions == labels))


def local_steps(shard_size: int, fl: FLSettings) -> int:
    """Φ (local_steps 指定がなければ エポック数 × バッチ数)"""
    if fl.local_steps is not None:
        return fl.local_steps
    return fl.local_epochs * max(1, math.ceil(shard_size / fl.batch_size))


def local_train(
    device: Device,
    model: ModelUpdate | np.ndarray,
    steps: int,
    learning_rate: float,
    spec: GlobalModelSpec,
    *,
    batch_size: int = 128,
    round_index: int = 0,
    seed: int = 0,
    shard: DatasetShard | None = None,
) -> ModelUpdate:
    """
    Φ ステップのミニバッチ SGD (式 14)
    - バッチ順は (seed, device, round) から決定的に決まる
    - 損失が非有限になったら NumericalError("divergence")
    """
    data = shard if shard is not None else device.dataset
    if steps < 1:
        raise InvalidInputError(f"Φ は 1 以上が必要です ({steps})")
    if data.size == 0:
        raise InvalidInputError(f"端末 {device.id} のデータが空です")
    weights = np.array(model.weights if isinstance(model, ModelUpdate) else model, dtype=np.float64)
    stream = seeded_rng(seed).split(f"batch/{device.id}/{round_index}")
    order = stream.permutation(data.size)
    cursor = 0
    batch = min(batch_size, data.size)
    for step in range(steps):
        if cursor + batch > data.size:
            order = stream.permutation(data.size)
            cursor = 0
        index = order[cursor : cursor + batch]
        cursor += batch
        loss, grad = loss_and_grad(weights, spec, data.features[index], data.labels[index])
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise NumericalError(f"divergence: 端末 {device.id} の step {step} で損失が非有限になりました")
        weights = weights - learning_rate * grad
    if not np.all(np.isfinite(weights)):
        raise NumericalError(f"divergence: 端末 {device.id} の重みが非有限になりました")
    return ModelUpdate.create(weights, device.id, round_index, steps)


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str | None = None
    accuracy: float = 0.0


def offchain_verify(
    update: ModelUpdate,
    verifier: Device,
    threshold: float,
    spec: GlobalModelSpec,
    *,
    holdout: DatasetShard | None = None,
    sample_size: int = 64,
) -> Verdict:
    """
    コミッティによる集約前の検証
    - 署名が無効なら精度に関係なく "signature"
    - 検証用サンプルの精度が 𝒜 未満なら "quality" (境界は ≥ で受理)
    """
    if not update.signature_valid:
        return Verdict(False, "signature")
    data = holdout if holdout is not None else verifier.dataset
    count = min(sample_size, data.size)
    accuracy = evaluate(update.weights, spec, data.features[:count], data.labels[:count])
    if accuracy >= threshold:
        return Verdict(True, None, accuracy)
    return Verdict(False, "quality", accuracy)


def fedavg(updates: Sequence[ModelUpdate], sizes: Sequence[int]) -> np.ndarray:
    """|D_i| 重み付き平均 (所有者ID昇順の逐次和で再現性を保つ)"""
    if not updates:
        raise InvalidInputError("empty aggregation: 受理された更新がありません")
    if len(updates) != len(sizes):
        raise InvalidInputError("updates と sizes の長さが一致しません")
    pairs = sorted(zip(updates, sizes), key=lambda pair: pair[0].owner)
    total = float(sum(sizes))
    if total <= 0:
        raise InvalidInputError("empty aggregation: データ数の合計が 0 です")
    result = np.zeros_like(pairs[0][0].weights)
    for update, size in pairs:
        result = result + (size / total) * update.weights
    return result


def staleness_weight(base: float, t: int, tau: int, exponent: float = 0.5) -> float:
    """s (t − τ + 1)^{−q}"""
    if t < tau:
        raise InvalidInputError(f"t={t} が τ={tau} より前です")
    return base * float(t - tau + 1) ** (-exponent)


@dataclass(frozen=True)
class StalenessRecord:
    cluster: int
    last_round: int
    weight: float
    base: float
    exponent: float = 0.5


class StalenessAggregator:
    """
    クラスタ間の非同期集約 (式 15 の累積和)
    - 全クラスタを共通の初期モデル・重み s で初期化
    - クラスタ k の更新は古い寄与を引き、新しい寄与を足す
    """

    def __init__(self, clusters: Iterable[int], init_weights: np.ndarray, base: float, exponent: float = 0.5):
        self.base = base
        self.exponent = exponent
        self.records: dict[int, StalenessRecord] = {}
        self.models: dict[int, np.ndarray] = {}
        self.total = np.zeros_like(init_weights, dtype=np.float64)
        for cluster in sorted(clusters):
            self.records[cluster] = StalenessRecord(cluster, 0, base, base, exponent)
            self.models[cluster] = np.array(init_weights, dtype=np.float64)
            self.total = self.total + base * self.models[cluster]

    def aggregate(self, cluster: int, model: np.ndarray, tau: int, t: int) -> np.ndarray:
        """w_{k;t} を返し、累積和を更新する"""
        previous = self.records.get(cluster)
        if previous is not None:
            self.total = self.total - previous.weight * self.models[cluster]
        weight = staleness_weight(self.base, t, tau, self.exponent)
        self.models[cluster] = np.array(model, dtype=np.float64)
        self.total = self.total + weight * self.models[cluster]
        self.records[cluster] = StalenessRecord(cluster, tau, weight, self.base, self.exponent)
        return self.total.copy()

    def global_model(self) -> np.ndarray:
        return self.total.copy()

    def reset(self, clusters: Iterable[int], weights: np.ndarray, t: int) -> None:
        """更新コンセンサス後の同期: 全クラスタを同じモデル・鮮度 0 で再初期化"""
        self.records.clear()
        self.models.clear()
        self.total = np.zeros_like(weights, dtype=np.float64)
        for cluster in sorted(clusters):
            self.records[cluster] = StalenessRecord(cluster, t, self.base, self.base, self.exponent)
            self.models[cluster] = np.array(weights, dtype=np.float64)
            self.total = self.total + self.base * self.models[cluster]


def synthetic_dataset(
    input_dim: int,
    num_classes: int,
    samples: int,
    rng: SeededStream,
    separation: float = 3.0,
    spread: float = 1.0,
) -> DatasetShard:
    """クラスごとに中心を持つ等方ガウス分布 (クラスは均等)"""
    centers = rng.normal(0.0, separation, (num_classes, input_dim))
    labels = rng.permutation(np.arange(samples) % num_classes).astype(np.int64)
    features = centers[labels] + rng.normal(0.0, spread, (samples, input_dim))
    return DatasetShard(features, labels, num_classes)


def load_csv_dataset(path: str | Path, num_classes: int | None = None) -> DatasetShard:
    """
    CSV の読み込み
    - 各行は特徴量の列、最後の列が整数ラベル。'#' 始まりの行はコメント
    """
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"データセットが見つかりません: {path}")
    table = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    if table.shape[1] < 2:
        raise InvalidInputError("CSV には特徴量とラベルの列が必要です")
    labels = table[:, -1]
    if np.any(labels != np.round(labels)) or np.any(labels < 0):
        raise InvalidInputError("ラベル列は非負整数が必要です")
    labels = labels.astype(np.int64)
    classes = num_classes if num_classes is not None else int(labels.max()) + 1
    return DatasetShard(table[:, :-1].astype(np.float64), labels, classes)


def train_test_split(dataset: DatasetShard, fraction: float, rng: SeededStream) -> tuple[DatasetShard, DatasetShard]:
    order = rng.permutation(dataset.size)
    cut = dataset.size - max(1, int(round(dataset.size * fraction)))
    train, test = order[:cut], order[cut:]
    return (
        DatasetShard(dataset.features[train], dataset.labels[train], dataset.num_classes),
        DatasetShard(dataset.features[test], dataset.labels[test], dataset.num_classes),
    )


def _dirichlet_split(labels: np.ndarray, num_devices: int, alpha: float, rng: SeededStream) -> list[list[int]]:
    """クラスごとに Dirichlet(α) の比率で端末へ配分 (端数は最大剰余で割当)"""
    shards: list[list[int]] = [[] for _ in range(num_devices)]
    for cls in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == cls))
        proportions = rng.dirichlet(np.full(num_devices, alpha))
        counts = np.floor(proportions * members.size).astype(int)
        remainder = members.size - counts.sum()
        if remainder > 0:
            order = np.argsort(-(proportions * members.size - counts), kind="stable")
            counts[order[:remainder]] += 1
        start = 0
        for device, take in enumerate(counts):
            shards[device].extend(members[start : start + take].tolist())
            start += take
    return shards


def partition_data(
    dataset: DatasetShard, num_devices: int, alpha: float, rng: SeededStream
) -> list[DatasetShard]:
    """
    Dirichlet 分割 (α=5 でほぼ IID、α=0.2 で非IID)
    - 空の端末が出たら引き直し、それでも空なら最大の断片から1件ずつ移す
    """
    if alpha <= 0:
        raise InvalidInputError(f"dirichlet_alpha は正の値が必要です ({alpha})")
    if dataset.size < num_devices:
        raise InvalidInputError(f"データ数 {dataset.size} が端末数 {num_devices} より少ないです")
    shards = _dirichlet_split(dataset.labels, num_devices, alpha, rng)
    for attempt in range(DIRICHLET_RETRIES):
        if all(shards):
            break
        logger.debug(f"空の端末があるため Dirichlet 分割を引き直します ({attempt + 1})")
        shards = _dirichlet_split(dataset.labels, num_devices, alpha, rng)
    for indices in shards:
        if not indices:
            donor = max(range(num_devices), key=lambda d: (len(shards[d]), -d))
            indices.append(shards[donor].pop())
    result = []
    for indices in shards:
        index = np.array(sorted(indices), dtype=np.int64)
        result.append(DatasetShard(dataset.features[index], dataset.labels[index], dataset.num_classes))
    return result
