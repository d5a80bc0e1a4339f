import dataclasses
import json
import logging
import threading
import types
import typing
from pathlib import Path
from typing import Any

from core.errors import ConfigError
from core.settings import Scenario

logger = logging.getLogger(__name__)


def _coerce(name: str, hint: Any, value: Any, issues: list[str]) -> Any:
    """型ヒントに沿って JSON 値を検査・変換 (問題は issues に積む)"""
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
        origin = typing.get_origin(hint)

    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            issues.append(f"{name}: オブジェクトが必要です")
            return hint()
        return _build(hint, value, f"{name}.", issues)
    if hint is bool:
        if not isinstance(value, bool):
            issues.append(f"{name}: true/false が必要です ({value!r})")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            issues.append(f"{name}: 整数が必要です ({value!r})")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            issues.append(f"{name}: 数値が必要です ({value!r})")
            return value
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            issues.append(f"{name}: 文字列が必要です ({value!r})")
        return value
    if origin is list:
        if not isinstance(value, list):
            issues.append(f"{name}: 配列が必要です")
            return value
        (item,) = typing.get_args(hint)
        return [_coerce(f"{name}[{i}]", item, v, issues) for i, v in enumerate(value)]
    if origin is dict:
        if not isinstance(value, dict):
            issues.append(f"{name}: オブジェクトが必要です")
            return value
        _, item = typing.get_args(hint)
        return {k: _coerce(f"{name}.{k}", item, v, issues) for k, v in value.items()}
    return value


def _build(cls: type, data: dict[str, Any], prefix: str, issues: list[str]) -> Any:
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            issues.append(f"{prefix}{key}: 未知のフィールドです")
    values = {
        key: _coerce(f"{prefix}{key}", hints[key], value, issues)
        for key, value in data.items()
        if key in known
    }
    try:
        return cls(**values)
    except TypeError as e:
        issues.append(f"{prefix.rstrip('.') or 'scenario'}: {e}")
        return cls()


def scenario_from_dict(data: dict[str, Any]) -> Scenario:
    """
    デフォルト値の上に JSON の値を重ねてシナリオを作る
    - 型の誤り・未知のフィールド・範囲外の値はまとめて ConfigError
    """
    if not isinstance(data, dict):
        raise ConfigError(["scenario: JSON オブジェクトが必要です"])
    issues: list[str] = []
    scenario = _build(Scenario, data, "", issues)
    if not issues:
        issues = scenario.check()
    if issues:
        raise ConfigError(issues)
    return scenario


def scenario_to_dict(scenario: Scenario) -> dict[str, Any]:
    return dataclasses.asdict(scenario)


def parse_value(text: str) -> Any:
    """CLI 引数の値 (JSON として解釈できなければ文字列)"""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def with_override(scenario: Scenario, dotted: str, value: Any) -> Scenario:
    """ドット区切りのパス (例: fl.learning_rate) の値を差し替えたシナリオ"""
    data = scenario_to_dict(scenario)
    node = data
    *parents, leaf = dotted.split(".")
    for key in parents:
        if not isinstance(node.get(key), dict):
            raise ConfigError([f"{dotted}: 存在しないフィールドです"])
        node = node[key]
    if leaf not in node:
        raise ConfigError([f"{dotted}: 存在しないフィールドです"])
    node[leaf] = value
    return scenario_from_dict(data)


class ConfigStore:
    """
    シナリオ JSON の読み書き
    - 変更時刻によるキャッシュ
    - 一時ファイル経由のアトミックな保存
    - スレッドセーフ (sweep のワーカーから共有される)
    """

    def __init__(self, filepath: Path):
        logger.debug(f"ConfigStore初期化: {filepath}")
        self.filepath = Path(filepath)
        self._cache: dict[str, Any] | None = None
        self._cache_lock = threading.RLock()
        self._file_mtime: float | None = None

    def load_raw(self) -> dict[str, Any]:
        with self._cache_lock:
            if not self.filepath.exists():
                raise ConfigError([f"config: ファイルが見つかりません: {self.filepath}"])
            current_mtime = self.filepath.stat().st_mtime
            if self._cache is not None and current_mtime == self._file_mtime:
                logger.debug("キャッシュからシナリオを返却")
                return json.loads(json.dumps(self._cache))
            try:
                with open(self.filepath, encoding="utf-8") as f:
                    data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError([f"config: JSON として読み込めません (行 {e.lineno}): {e.msg}"]) from e
            except OSError as e:
                raise ConfigError([f"config: 読み込みに失敗しました: {e}"]) from e
            self._cache = data
            self._file_mtime = current_mtime
            logger.info(f"シナリオ読み込み完了: {self.filepath}")
            return json.loads(json.dumps(data))

    def load(self) -> Scenario:
        return scenario_from_dict(self.load_raw())

    def save(self, scenario: Scenario) -> None:
        data = scenario_to_dict(scenario)
        with self._cache_lock:
            temp_filepath = self.filepath.with_suffix(".tmp")
            try:
                self.filepath.parent.mkdir(parents=True, exist_ok=True)
                with open(temp_filepath, "w", encoding="utf-8") as f:
                    json.dump(data, f, ensure_ascii=False, indent=2, separators=(",", ": "))
                temp_filepath.replace(self.filepath)
                self._cache = data
                self._file_mtime = self.filepath.stat().st_mtime
                logger.info(f"シナリオ保存完了: {self.filepath}")
            except OSError as e:
                logger.error(f"シナリオ保存エラー: {e}")
                if temp_filepath.exists():
                    try:
                        temp_filepath.unlink()
                    except OSError:
                        logger.warning("一時ファイルクリーンアップ失敗")
                raise
