"""
シナリオ実行 (模擬時間のラウンドループ)

初期化 (配置・データ分割・クラスタリング) の後、ラウンドごとに
ローカル学習 → オフチェーン検証 → FedAvg → CBFT → 陳腐化考慮の集約 を行い、
χ ラウンドごとに更新コンセンサスを実行する (litechain のみ)。
"""

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from core import clustering, fl, radio, secmetric
from core.adversary import Adversary
from core.codec import canonical_hash
from core.consensus import Ledger, Participation, cbft_commit, update_consensus
from core.errors import ConfigError, InvalidInputError, MeshLedgerError, PhaseError
from core.rng import SeededStream, seeded_rng
from core.settings import Scenario, SizeProfile
from core.types import COMMITTEE, MEMBER, DatasetShard, Device, ModelUpdate, Partition

logger = logging.getLogger(__name__)

PLACEMENT_ATTEMPTS = 10_000
OFFCHAIN_REASONS = ("signature", "quality", "replay")
BLOCK_REASONS = ("signature", "quality", "replay", "votes", "timeout", "empty")

CSV_COLUMNS = [
    "sim_time",
    "round",
    "test_accuracy",
    "tt_latency",
    "vt_latency",
    "ledger_bytes",
    "live_blocks",
    "security_score",
    "committed",
    *[f"rejected_{r}" for r in BLOCK_REASONS],
    *[f"offchain_{r}" for r in OFFCHAIN_REASONS],
    "epoch",
]


@dataclass
class MetricsRow:
    sim_time: float
    round: int
    test_accuracy: float
    tt_latency: float
    vt_latency: float
    ledger_bytes: int
    live_blocks: int
    security_score: float
    committed: int
    rejected: dict[str, int]
    offchain: dict[str, int]
    epoch: int

    def as_csv(self) -> list:
        return [
            repr(float(self.sim_time)),
            self.round,
            repr(float(self.test_accuracy)),
            repr(float(self.tt_latency)),
            repr(float(self.vt_latency)),
            self.ledger_bytes,
            self.live_blocks,
            repr(float(self.security_score)),
            self.committed,
            *[self.rejected.get(r, 0) for r in BLOCK_REASONS],
            *[self.offchain.get(r, 0) for r in OFFCHAIN_REASONS],
            self.epoch,
        ]


@dataclass
class MetricsLog:
    """
    実行の計測結果
    - rows: ラウンドごとの時系列 (round 0 は初期状態)
    - trace: クラスタリングのスロット記録
    """

    scenario: Scenario
    rows: list[MetricsRow] = field(default_factory=list)
    trace: tuple[clustering.SlotRecord, ...] = ()
    partition: Partition | None = None
    ledger: Ledger | None = None
    attackers: frozenset[int] = frozenset()
    round_latencies: list[float] = field(default_factory=list)
    consensus_latencies: list[float] = field(default_factory=list)
    epochs: int = 0

    @property
    def sim_time(self) -> float:
        return self.rows[-1].sim_time if self.rows else 0.0

    @property
    def final_accuracy(self) -> float:
        return self.rows[-1].test_accuracy if self.rows else 0.0

    def time_to_accuracy(self, target: float) -> float | None:
        for row in self.rows:
            if row.test_accuracy >= target:
                return row.sim_time
        return None

    def time_reconciled(self) -> bool:
        """模擬時刻 = Σ ラウンド最大遅延 + Σ 合意遅延 (独立に積算した値と照合)"""
        independent = math.fsum(self.round_latencies) + math.fsum(self.consensus_latencies)
        return math.isclose(self.sim_time, independent, rel_tol=1e-9, abs_tol=1e-9)

    def accuracy_grid(self, step: float = 1.0) -> list[tuple[float, float]]:
        """1秒刻みへの再標本化 (各時刻で直近の精度)"""
        grid = []
        cursor = 0
        for tick in np.arange(0.0, self.sim_time + step / 2, step):
            while cursor + 1 < len(self.rows) and self.rows[cursor + 1].sim_time <= tick:
                cursor += 1
            grid.append((float(tick), self.rows[cursor].test_accuracy))
        return grid

    def totals(self) -> dict[str, int]:
        rejected = Counter()
        offchain = Counter()
        for row in self.rows:
            rejected.update(row.rejected)
            offchain.update(row.offchain)
        return {
            "committed": sum(r.committed for r in self.rows),
            **{f"rejected_{r}": rejected.get(r, 0) for r in BLOCK_REASONS},
            **{f"offchain_{r}": offchain.get(r, 0) for r in OFFCHAIN_REASONS},
        }

    def summary(self) -> dict[str, Any]:
        from meshledger import __version__

        s = self.scenario
        reached = self.time_to_accuracy(s.stop.target_accuracy)
        return {
            "version": __version__,
            "scheme": s.scheme,
            "seed": s.seed,
            "num_devices": s.num_devices,
            "num_clusters": self.partition.num_clusters if self.partition else 0,
            "committee": self.partition.committee_ids() if self.partition else [],
            "rounds": self.rows[-1].round if self.rows else 0,
            "final_accuracy": self.final_accuracy,
            "target_accuracy": s.stop.target_accuracy,
            "reached_target": reached is not None,
            "time_to_target": reached,
            "sim_time": self.sim_time,
            "ledger_bytes": self.rows[-1].ledger_bytes if self.rows else 0,
            "live_blocks": self.rows[-1].live_blocks if self.rows else 0,
            "epochs": self.epochs,
            "attackers": sorted(self.attackers),
            "time_reconciled": self.time_reconciled(),
            **self.totals(),
        }

    def metrics_csv(self) -> str:
        lines = [",".join(CSV_COLUMNS)]
        lines += [",".join(str(v) for v in row.as_csv()) for row in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> Path:
        """metrics.csv / summary.json / accuracy_grid.csv / clustering_trace.csv / ledger.jsonl"""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(self.metrics_csv(), encoding="utf-8")
        (out / "summary.json").write_text(
            json.dumps(self.summary(), ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
        )
        with open(out / "accuracy_grid.csv", "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["sim_time", "test_accuracy"])
            writer.writerows((repr(t), repr(float(a))) for t, a in self.accuracy_grid())
        with open(out / "clustering_trace.csv", "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["slot", "executed", "regrets", "welfare", "num_clusters"])
            for record in self.trace:
                ops = ";".join(f"{o.device}:{o.from_cluster}->{o.to_cluster}" for o in record.executed)
                writer.writerow([record.slot, ops, record.regrets, repr(float(record.welfare)), record.num_clusters])
        if self.ledger is not None:
            self.ledger.export_jsonl(out / "ledger.jsonl")
        logger.info(f"計測結果を書き出しました: {out}")
        return out


@dataclass
class Network:
    """スキームに依存しない初期状態 (同じシードなら全スキームで同一)"""

    devices: list[Device]
    clean_shards: dict[int, DatasetShard]
    holdouts: dict[int, DatasetShard]
    test_set: DatasetShard
    spec: fl.GlobalModelSpec
    init_weights: np.ndarray
    sizes: SizeProfile
    adversary: Adversary


def place_devices(scenario: Scenario, rng: SeededStream) -> list[tuple[float, float]]:
    """一辺 area の正方形に一様配置 (端末間距離は min_distance 以上)"""
    positions: list[tuple[float, float]] = []
    for index in range(scenario.num_devices):
        for _ in range(PLACEMENT_ATTEMPTS):
            x, y = rng.uniform(0.0, scenario.area, 2)
            if all(math.hypot(x - px, y - py) >= scenario.min_distance for px, py in positions):
                positions.append((float(x), float(y)))
                break
        else:
            raise InvalidInputError(f"端末 {index} を最小距離 {scenario.min_distance} m で配置できません")
    return positions


def effective_sizes(sizes: SizeProfile, spec: fl.GlobalModelSpec) -> SizeProfile:
    """model_size が 0 ならモデルの直列化サイズ (8 バイト × パラメータ数 + 長さ) を使う"""
    if sizes.model_size > 0:
        return sizes
    return replace(sizes, model_size=float(8 * spec.num_params + 8))


def build_network(scenario: Scenario) -> Network:
    root = seeded_rng(scenario.seed)
    if scenario.fl.dataset_path:
        dataset = fl.load_csv_dataset(scenario.fl.dataset_path, scenario.fl.num_classes)
    else:
        dataset = fl.synthetic_dataset(
            scenario.fl.input_dim,
            scenario.fl.num_classes,
            scenario.fl.dataset_samples,
            root.split("dataset"),
            scenario.fl.blob_separation,
            scenario.fl.blob_spread,
        )
    spec = replace(
        fl.GlobalModelSpec.from_settings(scenario.fl),
        input_dim=int(dataset.features.shape[1]),
        num_classes=dataset.num_classes,
    )
    train, test_set = fl.train_test_split(dataset, scenario.fl.test_fraction, root.split("split"))
    shards = fl.partition_data(train, scenario.num_devices, scenario.fl.dirichlet_alpha, root.split("dirichlet"))
    positions = place_devices(scenario, root.split("placement"))
    low, high = scenario.reliability_ranges[scenario.reliability]
    reliability = root.split("reliability").uniform(low, high, scenario.num_devices)

    adversary = Adversary(scenario.attack, range(scenario.num_devices), seeded_rng(scenario.attack.seed))
    devices, holdouts, clean = [], {}, {}
    for i in range(scenario.num_devices):
        shard = shards[i]
        clean[i] = shard
        order = root.split(f"holdout/{i}").permutation(shard.size)[: scenario.fl.verify_sample]
        # 検証は端末自身のデータで行う (攻撃者はラベル置換後のデータ)
        holdouts[i] = adversary.poison(i, DatasetShard(shard.features[order], shard.labels[order], shard.num_classes))
        devices.append(
            Device(
                id=i,
                position=positions[i],
                compute=scenario.compute_tiers[i % len(scenario.compute_tiers)],
                tx_power=scenario.tx_power,
                dataset=adversary.poison(i, shard),
                reliability=float(reliability[i]),
            )
        )
    init_weights = spec.init_weights()
    sizes = effective_sizes(scenario.sizes, spec)
    return Network(devices, clean, holdouts, test_set, spec, init_weights, sizes, adversary)


def with_roles(devices: list[Device], partition: Partition) -> list[Device]:
    heads = set(partition.committee_ids())
    return [replace(d, role=COMMITTEE if d.id in heads else MEMBER) for d in devices]


class Simulation:
    """1回のシナリオ実行の可変状態"""

    def __init__(self, scenario: Scenario):
        problems = scenario.check()
        if problems:
            raise ConfigError(problems)
        self.scenario = scenario
        self.root = seeded_rng(scenario.seed)
        self.net = build_network(scenario)
        self.quality_filter = scenario.quality_filter_enabled()
        self.duplicate_detection = scenario.protocol.duplicate_detection
        self.threshold = (
            scenario.protocol.accuracy_threshold
            if scenario.protocol.accuracy_threshold is not None
            else 1.0 / self.net.spec.num_classes
        )
        self.ledger = Ledger.create(0.0, self.duplicate_detection)
        self.clock = 0.0
        self.log = MetricsLog(scenario, ledger=self.ledger, attackers=self.net.adversary.attackers)
        # flc_model はモデル本体をブロックに載せる
        self.block_sizes = self.net.sizes
        if scenario.scheme == "flc_model":
            self.block_sizes = replace(
                self.net.sizes, block_size=self.net.sizes.block_size + self.net.sizes.model_size
            )

    def _phase(self, round_index: int, phase: str, func, /, *args, **kwargs):
        try:
            return func(*args, **kwargs)
        except PhaseError:
            raise
        except MeshLedgerError as e:
            logger.error(f"round={round_index} phase={phase} でエラー: {e}")
            raise PhaseError(round_index, phase, e) from e

    def organize(self) -> Partition:
        s = self.scenario
        if s.scheme == "litechain":
            game = clustering.ClusterGame(self.net.devices, self.net.sizes, s.channel, s.clustering)
            result = self._phase(0, "clustering", game.run)
            self.log.trace = result.trace
            return result.partition
        return clustering.one_tier_partition(self.net.devices)

    def _latency(self) -> radio.RoundLatency:
        return radio.round_latency(self.partition, self.devices, self.block_sizes, self.scenario.channel)

    def _security(self) -> float:
        by_id = {d.id: d for d in self.devices}
        return secmetric.security_score([by_id[d].reliability for d in self.partition.committee_ids()])

    def _quality_fn(self):
        if not self.quality_filter:
            return None
        spec, sample = self.net.spec, self.scenario.fl.verify_sample
        holdouts = self.net.holdouts

        def quality(model: ModelUpdate, member: Device) -> float:
            data = holdouts[member.id]
            return fl.evaluate(model.weights, spec, data.features[:sample], data.labels[:sample])

        return quality

    def _screen(self, update: ModelUpdate, head: Device) -> fl.Verdict:
        """コミッティによるオフチェーン検証 (重複 → 署名 → 品質)"""
        if self.duplicate_detection and self.ledger.contains(update.identifier):
            return fl.Verdict(False, "replay")
        if self.quality_filter:
            return fl.offchain_verify(
                update,
                head,
                self.threshold,
                self.net.spec,
                holdout=self.net.holdouts[head.id],
                sample_size=self.scenario.fl.verify_sample,
            )
        if not update.signature_valid:
            return fl.Verdict(False, "signature")
        return fl.Verdict(True)

    def _train_cluster(self, t: int, cluster_id: int, member_ids: list[int], offchain: Counter):
        s = self.scenario
        by_id = {d.id: d for d in self.devices}
        head = by_id[self.partition.committee[cluster_id]]
        start = self.cluster_models[cluster_id]
        accepted, participation = [], []
        for device_id in member_ids:
            device = by_id[device_id]
            steps = fl.local_steps(device.dataset.size, s.fl)
            fresh = self._phase(
                t,
                "local_train",
                fl.local_train,
                device,
                start,
                steps,
                s.fl.learning_rate,
                self.net.spec,
                batch_size=s.fl.batch_size,
                round_index=t,
                seed=s.seed,
            )
            submitted = self.net.adversary.submit(device_id, fresh)
            verdict = self._screen(submitted, head)
            if not verdict.accepted:
                offchain[verdict.reason] += 1
            else:
                accepted.append(submitted)
            participation.append(
                Participation(device_id, device.dataset.size, verdict.accepted, submitted.identifier)
            )
        return head, accepted, tuple(participation)

    def run_round(self, t: int) -> MetricsRow:
        s = self.scenario
        by_id = {d.id: d for d in self.devices}
        committee = [by_id[d] for d in self.partition.committee_ids()]
        forced_no = self.net.adversary.forced_no(self.partition.committee_ids())
        rejected: Counter = Counter()
        offchain: Counter = Counter()
        committed = 0
        quality_fn = self._quality_fn()
        for cluster_id, member_ids in self.partition.clusters().items():
            head, accepted, participation = self._train_cluster(t, cluster_id, member_ids, offchain)
            if not accepted:
                rejected["empty"] += 1
                continue
            sizes = [by_id[u.owner].dataset.size for u in accepted]
            weights = self._phase(t, "fedavg", fl.fedavg, accepted, sizes)
            cluster_update = ModelUpdate.create(weights, cluster_id, t)
            block = self.ledger.draft(
                model_id=cluster_update.identifier,
                proposer=head.id,
                round=t,
                participation=participation,
                timestamp=self.clock,
            )
            result = self._phase(
                t,
                "cbft_commit",
                cbft_commit,
                block,
                cluster_update,
                committee,
                self.ledger,
                quality_fn,
                rng=self.root.split(f"cbft/{t}/{cluster_id}"),
                sp=self.block_sizes,
                cp=s.channel,
                accuracy_threshold=self.threshold,
                forced_no=forced_no,
            )
            if not result.committed:
                rejected[result.reason] += 1
                logger.debug(f"round={t} cluster={cluster_id} ブロック拒否: {result.reason}")
                continue
            committed += 1
            if s.scheme == "flc_model":
                self.ledger.append_fragments(cluster_update, head.id, t, self.clock, s.protocol.fragment_payload)
            for update in accepted:
                self.net.adversary.remember(update)
            # τ は現在のモデル系列の学習が始まったラウンド
            tau = self.synced_round[cluster_id] + 1
            self.cluster_models[cluster_id] = self._phase(
                t, "staleness_aggregate", self.aggregator.aggregate, cluster_id, weights, tau, t
            )
            self.synced_round[cluster_id] = t

        self.log.round_latencies.append(self.latency.max)
        self.clock += self.latency.max
        accuracy = fl.evaluate(
            self.aggregator.global_model(), self.net.spec, self.net.test_set.features, self.net.test_set.labels
        )
        return MetricsRow(
            sim_time=self.clock,
            round=t,
            test_accuracy=accuracy,
            tt_latency=self.latency.max_training,
            vt_latency=self.latency.max_verification,
            ledger_bytes=self.ledger.live_bytes(),
            live_blocks=len(self.ledger.blocks),
            security_score=self.security,
            committed=committed,
            rejected=dict(rejected),
            offchain=dict(offchain),
            epoch=self.ledger.epoch,
        )

    def run_epoch(self, t: int) -> None:
        s = self.scenario
        global_model = self.aggregator.global_model()
        result = self._phase(
            t,
            "update_consensus",
            update_consensus,
            self.ledger,
            self.partition,
            self.devices,
            s.protocol,
            self.net.sizes,
            s.channel,
            rng=self.root.split(f"update/{t}"),
            round_index=t,
            timestamp=self.clock,
            global_model_id=canonical_hash(global_model),
            clustering_settings=s.clustering,
            forced_no=self.net.adversary.forced_no(self.partition.committee_ids()),
        )
        self.log.consensus_latencies.append(result.latency)
        self.clock += result.latency
        if not result.success:
            return
        self.log.epochs += 1
        self.partition = result.partition
        self.devices = result.devices
        self.net.adversary.retain(self.ledger.contains)
        for cluster_id in self.cluster_models:
            self.cluster_models[cluster_id] = global_model.copy()
            self.synced_round[cluster_id] = t
        self.aggregator.reset(self.cluster_models, global_model, t)
        self.latency = self._latency()
        self.security = self._security()

    def run(self, stop_on_target: bool = True) -> MetricsLog:
        s = self.scenario
        self.partition = self.organize()
        self.devices = with_roles(self.net.devices, self.partition)
        self.log.partition = self.partition
        K = self.partition.num_clusters
        base = s.protocol.staleness_base if s.protocol.staleness_base is not None else 1.0 / K
        cluster_ids = sorted(self.partition.committee)
        self.cluster_models = {cid: self.net.init_weights.copy() for cid in cluster_ids}
        self.synced_round = {cid: 0 for cid in cluster_ids}
        self.aggregator = fl.StalenessAggregator(cluster_ids, self.net.init_weights, base, s.protocol.staleness_exp)
        self.latency = self._phase(0, "latency", self._latency)
        self.security = self._security()
        logger.info(
            f"シナリオ開始: scheme={s.scheme} N={s.num_devices} K={K} "
            f"ラウンド遅延={self.latency.max:.3f}s S={self.security:.4f}"
        )

        initial = fl.evaluate(self.net.init_weights, self.net.spec, self.net.test_set.features, self.net.test_set.labels)
        self.log.rows.append(
            MetricsRow(0.0, 0, initial, 0.0, 0.0, self.ledger.live_bytes(), len(self.ledger.blocks), self.security, 0, {}, {}, 0)
        )
        for t in range(1, s.stop.max_rounds + 1):
            row = self.run_round(t)
            done = stop_on_target and row.test_accuracy >= s.stop.target_accuracy
            if s.scheme == "litechain" and (t % s.protocol.chi == 0 or done):
                self.run_epoch(t)
                row.sim_time = self.clock
                row.ledger_bytes = self.ledger.live_bytes()
                row.live_blocks = len(self.ledger.blocks)
                row.epoch = self.ledger.epoch
                row.security_score = self.security
            self.log.rows.append(row)
            if done:
                logger.info(f"目標精度 {s.stop.target_accuracy} に到達: round={t} 時刻={self.clock:.3f}s")
                break
        self.log.partition = self.partition
        if not self.log.time_reconciled():
            logger.warning("模擬時刻と遅延の積算値が一致しません")
        logger.info(
            f"シナリオ完了: scheme={s.scheme} rounds={self.log.rows[-1].round} "
            f"精度={self.log.final_accuracy:.4f} 時刻={self.clock:.3f}s 台帳={self.ledger.live_bytes()}B"
        )
        return self.log


def run_scenario(scenario: Scenario, stop_on_target: bool = True) -> MetricsLog:
    """シナリオを1回実行して計測結果を返す"""
    return Simulation(scenario).run(stop_on_target)
