"""
正準バイト列と識別子

ModelUpdate のレイアウト (すべてリトルエンディアン):
    u64 重み数 n | f64 × n 重み | i64 owner | i64 round | i64 local_steps | u8 signature_valid
識別子は重み部分 (u64 n | f64 × n) の SHA-256。
"""

import hashlib
import logging
import struct
from collections.abc import Iterable

import numpy as np

from core.errors import InvalidInputError

logger = logging.getLogger(__name__)

HASH_SIZE = 32
ZERO_HASH = b"\x00" * HASH_SIZE


def weights_bytes(weights) -> bytes:
    """長さ接頭辞付きのリトルエンディアン f64 列"""
    vector = np.asarray(weights, dtype="<f8").ravel()
    return struct.pack("<Q", vector.size) + vector.tobytes()


def weights_from_bytes(payload: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    (count,) = struct.unpack_from("<Q", payload, offset)
    offset += 8
    end = offset + 8 * count
    vector = np.frombuffer(payload[offset:end], dtype="<f8").astype(np.float64)
    return vector, end


def canonical_hash(weights) -> bytes:
    """
    重みベクトルの 32 バイト識別子
    - 非有限値は台帳への NaN 持ち込みを防ぐため拒否
    """
    vector = np.asarray(weights, dtype=np.float64).ravel()
    if vector.size == 0:
        raise InvalidInputError("zero-dimension model: 重みベクトルが空です")
    if not np.all(np.isfinite(vector)):
        bad = int(np.flatnonzero(~np.isfinite(vector))[0])
        raise InvalidInputError(f"non-finite weight at index {bad}: 識別子を計算できません")
    return hashlib.sha256(weights_bytes(vector)).digest()


def digest(chunks: Iterable[bytes]) -> bytes:
    hasher = hashlib.sha256()
    for chunk in chunks:
        hasher.update(chunk)
    return hasher.digest()


def to_hex(value: bytes) -> str:
    return value.hex()


def from_hex(value: str) -> bytes:
    return bytes.fromhex(value)
