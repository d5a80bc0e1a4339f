"""
合意セキュリティ指標

故障 (信頼度 p_j の補数 q_j = 1 − p_j) の台数が ⌊(K−1)/3⌋ 以下である確率。
列挙による厳密値と、特性関数の DFT (DFT-CF) による高速計算を持つ。
"""

import itertools
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from core.errors import InvalidInputError, NumericalError

logger = logging.getLogger(__name__)

ENUM_GUARD = 25
ENUM_DISPATCH = 12
IMAG_TOLERANCE = 1e-8


@dataclass(frozen=True)
class Committee:
    reliabilities: tuple[float, ...]

    def __post_init__(self):
        if not self.reliabilities:
            raise InvalidInputError("コミッティが空です (K ≥ 1 が必要)")
        if any(not 0.0 <= p <= 1.0 for p in self.reliabilities):
            raise InvalidInputError("信頼度は [0,1] の範囲が必要です")

    @property
    def K(self) -> int:
        return len(self.reliabilities)

    @classmethod
    def of(cls, value: "Committee | Sequence[float]") -> "Committee":
        if isinstance(value, Committee):
            return value
        return cls(tuple(float(p) for p in value))


def fault_tolerance(K: int) -> int:
    """BFT の許容故障数 ⌊(K−1)/3⌋"""
    return (K - 1) // 3


@lru_cache(maxsize=64)
def _failure_masks(K: int, m: int) -> np.ndarray:
    """K 台中 m 台が故障する全パターン (行 = パターン)"""
    combos = list(itertools.combinations(range(K), m))
    masks = np.zeros((len(combos), K), dtype=bool)
    for row, combo in enumerate(combos):
        masks[row, list(combo)] = True
    return masks


def security_enum(c: "Committee | Sequence[float]", fault_budget: int | None = None) -> float:
    """
    全故障パターンの列挙による厳密値
    - 故障台数 m ≤ fault_budget の部分集合それぞれで ∏q ∏p を足し合わせる
    """
    committee = Committee.of(c)
    K = committee.K
    if K > ENUM_GUARD:
        raise InvalidInputError(f"K={K} は列挙の上限 {ENUM_GUARD} を超えています。security_dft を使ってください")
    budget = fault_tolerance(K) if fault_budget is None else fault_budget
    p = np.asarray(committee.reliabilities, dtype=np.float64)
    q = 1.0 - p
    total = 0.0
    for m in range(0, min(budget, K) + 1):
        masks = _failure_masks(K, m)
        total += float(np.where(masks, q, p).prod(axis=1).sum())
    return min(max(total, 0.0), 1.0)


def _characteristic(q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """ω = 2π/(K+1) の格子上の故障数特性関数"""
    K = q.shape[0]
    omega = 2.0 * np.pi / (K + 1)
    z = np.exp(1j * omega * np.arange(K + 1))
    cf = np.prod(1.0 - q[None, :] + q[None, :] * z[:, None], axis=1)
    return cf, omega


def security_dft(c: "Committee | Sequence[float]", fault_budget: int | None = None) -> float:
    """
    DFT-CF による P(故障数 ≤ fault_budget)
    - S = 1/(K+1) Σ_k Σ_{M ≤ budget} e^{−iωkM} ∏_j (1 − q_j + q_j e^{iωk})
    - 虚部の残差が 1e-8 を超えると NumericalError
    """
    committee = Committee.of(c)
    K = committee.K
    budget = fault_tolerance(K) if fault_budget is None else fault_budget
    if budget >= K:
        return 1.0
    if budget < 0:
        return 0.0
    q = 1.0 - np.asarray(committee.reliabilities, dtype=np.float64)
    cf, omega = _characteristic(q)
    k = np.arange(K + 1)
    kernel = np.exp(-1j * omega * np.outer(k, np.arange(budget + 1))).sum(axis=1)
    value = np.sum(cf * kernel) / (K + 1)
    if abs(value.imag) > IMAG_TOLERANCE:
        raise NumericalError(f"numerical instability: 虚部の残差 {value.imag:.3e} (K={K})")
    return float(min(max(value.real, 0.0), 1.0))


def failure_pmf(c: "Committee | Sequence[float]") -> np.ndarray:
    """故障台数 0..K の確率質量関数 (同じ特性関数の逆 DFT)"""
    committee = Committee.of(c)
    q = 1.0 - np.asarray(committee.reliabilities, dtype=np.float64)
    cf, _ = _characteristic(q)
    pmf = np.fft.fft(cf) / (committee.K + 1)
    if np.max(np.abs(pmf.imag)) > IMAG_TOLERANCE:
        raise NumericalError("numerical instability: PMF の虚部が残っています")
    return np.clip(pmf.real, 0.0, 1.0)


def security_score(c: "Committee | Sequence[float]", fault_budget: int | None = None) -> float:
    """小さなコミッティは列挙、それ以外は DFT-CF"""
    committee = Committee.of(c)
    if committee.K <= ENUM_DISPATCH:
        return security_enum(committee, fault_budget)
    return security_dft(committee, fault_budget)
