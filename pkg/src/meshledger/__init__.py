import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path

logger = logging.getLogger(__name__)

PROJECT_ROOT = Path(__file__).resolve().parent.parent.parent
ASSETS_DIR = PROJECT_ROOT / "src" / "assets"


def get_project_version() -> str:
    """
    pyproject.toml の [project] version を返す
    - 見つからない場合は 0.0.0
    """
    toml_path = PROJECT_ROOT / "pyproject.toml"
    if not toml_path.is_file():
        logger.error(f"pyproject.tomlが見つかりません: {toml_path}")
        return "0.0.0"
    try:
        with open(toml_path, "rb") as f:
            version = tomllib.load(f).get("project", {}).get("version")
    except (OSError, tomllib.TOMLDecodeError) as e:
        logger.error(f"バージョンの取得に失敗しました: {e}", exc_info=True)
        return "0.0.0"
    if not version:
        logger.error("[project]テーブルにversionが見つかりません")
        return "0.0.0"
    return version


__version__ = get_project_version()
