"""
コマンドラインインターフェース

終了コード: 0 成功 / 1 実行・検証の失敗 / 2 設定や引数の誤り
"""

import argparse
import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from core.consensus import Ledger
from core.errors import ChainError, ConfigError, MeshLedgerError
from core.settings import SCHEMES, Scenario
from meshledger import __version__
from meshledger.config_store import ConfigStore, parse_value, with_override
from meshledger.simulator import MetricsLog, run_scenario

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
OUT_DIR_ENV = "MESHLEDGER_OUT_DIR"
DEFAULT_OUT_DIR = "results"


def _out_dir(value: str | None) -> Path:
    """--out > 環境変数 > 既定値"""
    return Path(value or os.environ.get(OUT_DIR_ENV) or DEFAULT_OUT_DIR)


def _load(config: str | None, seed: int | None) -> Scenario:
    scenario = ConfigStore(Path(config)).load() if config else Scenario()
    if seed is not None:
        scenario = replace(scenario, seed=seed)
    return scenario


def _schemes(text: str) -> list[str]:
    schemes = [s.strip() for s in text.split(",") if s.strip()]
    unknown = [s for s in schemes if s not in SCHEMES]
    if unknown or not schemes:
        raise ConfigError([f"schemes: {SCHEMES} から選んでください ({text})"])
    return schemes


def _report(log: MetricsLog) -> None:
    summary = log.summary()
    reached = f"{summary['time_to_target']:.2f}s" if summary["reached_target"] else "未到達"
    print(
        f"{summary['scheme']}: rounds={summary['rounds']} 精度={summary['final_accuracy']:.4f} "
        f"目標到達={reached} 台帳={summary['ledger_bytes']}B"
    )


def cmd_run(args: argparse.Namespace) -> int:
    scenario = _load(args.config, args.seed)
    if args.scheme:
        scenario = replace(scenario, scheme=args.scheme)
    log = run_scenario(scenario)
    out = log.write(_out_dir(args.out))
    if args.plot:
        from meshledger.plotting import plot_accuracy

        plot_accuracy([log], out / "accuracy.png")
    _report(log)
    return EXIT_OK


def _sweep_one(scenario: Scenario, field: str, value, out: Path) -> dict:
    log = run_scenario(with_override(scenario, field, value))
    log.write(out / f"{field}={value}")
    summary = log.summary()
    return {
        "field": field,
        "value": value,
        "final_accuracy": summary["final_accuracy"],
        "reached_target": summary["reached_target"],
        "time_to_target": summary["time_to_target"],
        "sim_time": summary["sim_time"],
        "ledger_bytes": summary["ledger_bytes"],
        "committed": summary["committed"],
    }


def cmd_sweep(args: argparse.Namespace) -> int:
    scenario = _load(args.config, args.seed)
    values = [parse_value(v.strip()) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError(["--values: 値がありません"])
    # 実行前に全ての値を検証する
    for value in values:
        with_override(scenario, args.field, value)
    out = _out_dir(args.out)
    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        rows = list(pool.map(lambda v: _sweep_one(scenario, args.field, v, out), values))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    for row in rows:
        print(f"{row['field']}={row['value']}: 精度={row['final_accuracy']:.4f} 時刻={row['sim_time']:.2f}s")
    return EXIT_OK


def _reliability_range(text: str) -> str | list[float]:
    """"high" などの名前、または "lo,hi" の数値ペア"""
    if "," not in text:
        return text
    parts = [v.strip() for v in text.split(",")]
    try:
        values = [float(v) for v in parts]
    except ValueError:
        raise ConfigError([f"--range: 数値ペア lo,hi を指定してください ({text})"]) from None
    if len(values) != 2 or not 0.0 <= values[0] <= values[1] <= 1.0:
        raise ConfigError([f"--range: 0 ≤ lo ≤ hi ≤ 1 を満たしません ({text})"])
    return values


def cmd_security(args: argparse.Namespace) -> int:
    from meshledger.plotting import plot_security
    from meshledger.reports import security_report

    scenario = _load(args.config, args.seed)
    reliability_range = _reliability_range(args.range)
    out = _out_dir(args.out)
    reports = []
    for scheme in _schemes(args.schemes):
        report = security_report(scenario, reliability_range, args.trials, args.devices, scheme)
        report.write_csv(out / f"security_{scheme}.csv")
        reports.append(report)
        print(f"{scheme}: 中央値={report.median:.4f} 最小={min(report.scores):.4f} 最大={max(report.scores):.4f}")
    plot_security(reports, out / "security.png")
    return EXIT_OK


def cmd_storage(args: argparse.Namespace) -> int:
    from meshledger.plotting import plot_storage
    from meshledger.reports import storage_report

    scenario = _load(args.config, args.seed)
    report = storage_report(scenario, args.rounds, _schemes(args.schemes))
    out = _out_dir(args.out)
    report.write_csv(out / "storage.csv")
    plot_storage(report, out / "storage.png")
    for scheme, series in report.series.items():
        print(f"{scheme}: {series.final_bytes}B (傾き {series.slope:.1f} B/round, エポック {series.epochs})")
    return EXIT_OK


def cmd_verify_ledger(args: argparse.Namespace) -> int:
    path = Path(args.ledger)
    if not path.is_file():
        raise ConfigError([f"ledger: ファイルが見つかりません: {path}"])
    ledger = Ledger.import_jsonl(path)
    ledger.verify_chain()
    print(f"OK: {len(ledger.blocks)} ブロック (epoch={ledger.epoch}, {ledger.live_bytes()}B)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meshledger", description="階層型ブロックチェーン連合学習シミュレータ")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="シナリオ JSON (未指定なら既定値)")
        p.add_argument("--seed", type=int, help="シナリオのシードを上書き")
        p.add_argument("--out", help=f"出力ディレクトリ (既定: ${OUT_DIR_ENV} または {DEFAULT_OUT_DIR})")

    run = sub.add_parser("run", help="シナリオを1回実行")
    scenario_args(run)
    run.add_argument("--scheme", choices=SCHEMES, help="スキームを上書き")
    run.add_argument("--plot", action="store_true", help="accuracy.png を出力")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="1つのフィールドを変えて複数回実行")
    scenario_args(sweep)
    sweep.add_argument("--field", required=True, help="ドット区切りのフィールド (例: fl.dirichlet_alpha)")
    sweep.add_argument("--values", required=True, help="カンマ区切りの値")
    sweep.add_argument("--workers", type=int, default=1)
    sweep.set_defaults(func=cmd_sweep)

    security = sub.add_parser("security", help="コミッティ安全度の分布")
    scenario_args(security)
    security.add_argument("--range", default="medium", help="範囲名 (medium/high) または low,high")
    security.add_argument("--trials", type=int, default=100)
    security.add_argument("--devices", type=int, help="端末数 N")
    security.add_argument("--schemes", default="litechain,flc_hash")
    security.set_defaults(func=cmd_security)

    storage = sub.add_parser("storage", help="スキームごとのオンチェーン容量")
    scenario_args(storage)
    storage.add_argument("--rounds", type=int, default=100)
    storage.add_argument("--schemes", default=",".join(SCHEMES))
    storage.set_defaults(func=cmd_storage)

    verify = sub.add_parser("verify-ledger", help="書き出した台帳を検証")
    verify.add_argument("ledger", help="ledger.jsonl")
    verify.set_defaults(func=cmd_verify_ledger)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG
    logging.getLogger().setLevel(args.log_level)
    try:
        return args.func(args)
    except ConfigError as e:
        logger.error(f"設定エラー: {e}")
        for issue in e.issues:
            print(f"config error: {issue}")
        return EXIT_CONFIG
    except ChainError as e:
        logger.error(f"台帳の検証に失敗しました: {e}")
        print(f"ledger error: block height={e.height}: {e.reason}")
        return EXIT_FAILURE
    except MeshLedgerError as e:
        logger.error(f"実行エラー: {e}", exc_info=True)
        print(f"error: {e}")
        return EXIT_FAILURE
    except OSError as e:
        logger.error(f"入出力エラー: {e}")
        print(f"error: {e}")
        return EXIT_FAILURE
