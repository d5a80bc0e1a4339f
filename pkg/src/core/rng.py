import hashlib
import logging

import numpy as np

logger = logging.getLogger(__name__)

SEED_MASK = (1 << 64) - 1


def _label_key(label: str) -> int:
    """ラベル文字列をプラットフォーム非依存の 64bit キーへ変換"""
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class SeededStream:
    """
    分割可能な決定的乱数ストリーム
    - Philox (カウンタ型) を SeedSequence で初期化
    - split(label) は親の状態を消費せず、(seed, パス) だけで子ストリームを決める
    - 所有者は1つ。共有する前に split すること
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if not 0 <= seed <= SEED_MASK:
            raise ValueError(f"シードは 64bit 非負整数が必要です: {seed}")
        self.seed = seed
        self.path = path
        sequence = np.random.SeedSequence(entropy=seed, spawn_key=path)
        self.gen = np.random.Generator(np.random.Philox(sequence))

    def split(self, label: str) -> "SeededStream":
        return SeededStream(self.seed, self.path + (_label_key(label),))

    def random(self, size=None):
        return self.gen.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)

    def permutation(self, x):
        return self.gen.permutation(x)

    def dirichlet(self, alpha, size=None):
        return self.gen.dirichlet(alpha, size)


def seeded_rng(seed: int) -> SeededStream:
    """シードから決定的ストリームを生成"""
    return SeededStream(int(seed) & SEED_MASK)


def split(parent: SeededStream, label: str) -> SeededStream:
    return parent.split(label)
