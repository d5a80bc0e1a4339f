"""
比較レポート
- storage_report: スキームごとのオンチェーン容量の推移
- security_report: 信頼度を無作為に引き直したときのコミッティ安全度の分布
"""

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from core import clustering, fl, secmetric
from core.consensus import Ledger
from core.errors import InvalidInputError
from core.rng import seeded_rng
from core.settings import SCHEMES, Scenario
from core.types import DatasetShard, Device
from meshledger.simulator import effective_sizes, place_devices, run_scenario

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StorageSeries:
    scheme: str
    bytes_per_round: tuple[int, ...]  # round 0 (genesis のみ) から
    epochs: int
    slope: float  # バイト / ラウンド (線形回帰)

    @property
    def final_bytes(self) -> int:
        return self.bytes_per_round[-1]

    def slope_since(self, start_round: int) -> float:
        values = self.bytes_per_round[start_round:]
        if len(values) < 2:
            return 0.0
        return float(stats.linregress(np.arange(len(values)), values).slope)


@dataclass(frozen=True)
class StorageReport:
    rounds: int
    series: dict[str, StorageSeries]

    def final_bytes(self) -> dict[str, int]:
        return {scheme: s.final_bytes for scheme, s in self.series.items()}

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        schemes = list(self.series)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["round", *schemes])
            for t in range(self.rounds + 1):
                writer.writerow([t, *[self.series[s].bytes_per_round[t] for s in schemes]])
        return path


def _series(scheme: str, values: Sequence[int], epochs: int) -> StorageSeries:
    slope = float(stats.linregress(np.arange(len(values)), values).slope) if len(values) >= 2 else 0.0
    return StorageSeries(scheme, tuple(int(v) for v in values), epochs, slope)


def storage_report(
    scenario: Scenario,
    rounds: int,
    schemes: Iterable[str] = SCHEMES,
) -> StorageReport:
    """
    同じシードで各スキームを rounds ラウンド実行し、生存ブロックの容量を記録する
    - 目標精度で止めない (全スキームで同じラウンド数)
    - litechain は prune 後の容量
    """
    if rounds < 0:
        raise InvalidInputError(f"rounds は 0 以上が必要です ({rounds})")
    genesis = Ledger.create(0.0).live_bytes()
    series: dict[str, StorageSeries] = {}
    for scheme in schemes:
        if scheme not in SCHEMES:
            raise InvalidInputError(f"未知のスキームです: {scheme}")
        if rounds == 0:
            series[scheme] = StorageSeries(scheme, (genesis,), 0, 0.0)
            continue
        run = replace(scenario, scheme=scheme, stop=replace(scenario.stop, max_rounds=rounds))
        log = run_scenario(run, stop_on_target=False)
        values = [row.ledger_bytes for row in log.rows]
        series[scheme] = _series(scheme, values, log.epochs)
        logger.info(f"容量レポート: {scheme} {rounds} ラウンド後 {values[-1]} バイト (傾き {series[scheme].slope:.1f} B/round)")
    return StorageReport(rounds, series)


@dataclass(frozen=True)
class SecurityReport:
    scheme: str
    reliability_range: tuple[float, float]
    num_devices: int
    scores: tuple[float, ...]
    committee_sizes: tuple[int, ...]

    @property
    def median(self) -> float:
        return float(np.median(self.scores))

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["trial", "scheme", "committee_size", "security_score"])
            for trial, (size, score) in enumerate(zip(self.committee_sizes, self.scores)):
                writer.writerow([trial, self.scheme, size, repr(float(score))])
        return path


def _resolve_range(scenario: Scenario, reliability_range: str | Sequence[float]) -> tuple[float, float]:
    if isinstance(reliability_range, str):
        bounds = scenario.reliability_ranges.get(reliability_range)
        if bounds is None:
            raise InvalidInputError(f"未定義の信頼度範囲です: {reliability_range}")
        low, high = bounds
    else:
        low, high = reliability_range
    if not 0.0 <= low <= high <= 1.0:
        raise InvalidInputError(f"信頼度範囲が不正です: [{low}, {high}]")
    return float(low), float(high)


def security_report(
    scenario: Scenario,
    reliability_range: str | Sequence[float],
    trials: int,
    num_devices: int | None = None,
    scheme: str = "litechain",
) -> SecurityReport:
    """
    試行ごとに配置と信頼度を引き直し、スキームのコミッティの安全度 S を DFT で求める
    - litechain: クラスタリングゲームで選ばれたコミッティ
    - flc_*: 全端末がコミッティ
    - 試行 i は scheme に依存しない乱数ストリームを使う (スキーム間で対になる)
    """
    if trials < 1:
        raise InvalidInputError(f"trials は 1 以上が必要です ({trials})")
    if scheme not in SCHEMES:
        raise InvalidInputError(f"未知のスキームです: {scheme}")
    low, high = _resolve_range(scenario, reliability_range)
    n = num_devices or scenario.num_devices
    layout = replace(scenario, num_devices=n)
    spec = fl.GlobalModelSpec.from_settings(scenario.fl)
    sizes = effective_sizes(scenario.sizes, spec)
    # 学習遅延の見積もりに使う均等なデータ量
    share = max(1, int(scenario.fl.dataset_samples * (1.0 - scenario.fl.test_fraction)) // n)
    shard = DatasetShard(
        np.zeros((share, spec.input_dim)), np.zeros(share, dtype=np.int64), spec.num_classes
    )

    scores, committee_sizes = [], []
    root = seeded_rng(scenario.seed)
    for trial in range(trials):
        stream = root.split(f"security/{trial}")
        positions = place_devices(layout, stream.split("placement"))
        reliability = stream.split("reliability").uniform(low, high, n)
        devices = [
            Device(
                id=i,
                position=positions[i],
                compute=scenario.compute_tiers[i % len(scenario.compute_tiers)],
                tx_power=scenario.tx_power,
                dataset=shard,
                reliability=float(reliability[i]),
            )
            for i in range(n)
        ]
        if scheme == "litechain":
            committee = clustering.run_game(devices, sizes, scenario.channel, scenario.clustering).committee_ids()
        else:
            committee = [d.id for d in devices]
        values = [devices[d].reliability for d in committee]
        scores.append(secmetric.security_dft(values))
        committee_sizes.append(len(committee))
    report = SecurityReport(scheme, (low, high), n, tuple(scores), tuple(committee_sizes))
    logger.info(f"安全度レポート: {scheme} [{low}, {high}] N={n} 試行={trials} 中央値={report.median:.4f}")
    return report
