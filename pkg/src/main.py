#!/usr/bin/env python3
import logging
import sys

from meshledger.cli import main as cli_main

logging.basicConfig(
    level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(__name__)


def main() -> int:
    """
    シミュレータのエントリーポイント
    - ログを初期化してからサブコマンドを実行
    """
    try:
        return cli_main()
    except KeyboardInterrupt:
        logger.warning("中断されました")
        return 130


if __name__ == "__main__":
    sys.exit(main())
