import logging
from pathlib import Path
from typing import Sequence

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from meshledger.reports import SecurityReport, StorageReport
from meshledger.simulator import MetricsLog

logger = logging.getLogger(__name__)


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    FigureCanvasAgg(fig).print_png(str(path))
    logger.info(f"図を保存しました: {path}")
    return path


def plot_accuracy(logs: Sequence[MetricsLog], path: str | Path) -> Path:
    """模擬時間に対するテスト精度 (1秒グリッド)"""
    fig = Figure(figsize=(6, 4), dpi=100)
    fig.subplots_adjust(left=0.12, right=0.95, top=0.9, bottom=0.14)
    ax = fig.subplots()
    for log in logs:
        grid = log.accuracy_grid()
        ax.plot([t for t, _ in grid], [a for _, a in grid], linewidth=1.5, label=log.scenario.scheme)
    if logs:
        ax.axhline(logs[0].scenario.stop.target_accuracy, color="gray", linestyle="--", linewidth=1)
    ax.set_xlabel("Simulated time (s)")
    ax.set_ylabel("Test accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right")
    return _save(fig, path)


def plot_storage(report: StorageReport, path: str | Path) -> Path:
    fig = Figure(figsize=(6, 4), dpi=100)
    fig.subplots_adjust(left=0.15, right=0.95, top=0.9, bottom=0.14)
    ax = fig.subplots()
    for scheme, series in report.series.items():
        ax.plot(range(len(series.bytes_per_round)), [b / 1024 for b in series.bytes_per_round], label=scheme)
    ax.set_xlabel("Round")
    ax.set_ylabel("Live ledger size (KiB)")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="upper left")
    return _save(fig, path)


def plot_security(reports: Sequence[SecurityReport], path: str | Path) -> Path:
    """スキーム・信頼度範囲ごとの安全度の箱ひげ図"""
    fig = Figure(figsize=(6, 4), dpi=100)
    fig.subplots_adjust(left=0.12, right=0.95, top=0.9, bottom=0.18)
    ax = fig.subplots()
    ax.boxplot([list(r.scores) for r in reports])
    ax.set_xticks(
        range(1, len(reports) + 1),
        [f"{r.scheme}\n[{r.reliability_range[0]:.2f}, {r.reliability_range[1]:.2f}]" for r in reports],
    )
    ax.set_ylabel("Consensus security")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(True, axis="y", alpha=0.3)
    return _save(fig, path)
