"""
同时可信带与变量选择

流程：
1. 对 ψᶜ 样本构造 sup-t 同时可信带
2. 区间不含 0 的变量入选
3. 与真实集合 A₀ 比较得到 FDR / power
"""

import json
import math
from dataclasses import dataclass
from typing import Iterable, List, Tuple

import numpy as np

from .errors import ConfigError, InsufficientDrawsError
from .importance import ImportanceDraws


# 后验退化时的尺度下限（相对 1+|center|）
SCALE_FLOOR = 1e-12
# q·scale 与 |ψ - center| 之间的舍入余量，保证分位点所在样本落在带内
QUANTILE_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class CredibleBand:
    """水平 1-α 的同时可信带"""
    level: float
    center: np.ndarray
    half_width: np.ndarray

    def __post_init__(self):
        if not 0.0 < self.level < 1.0:
            raise ConfigError(f"level must lie in (0, 1), got {self.level}")
        center = np.asarray(self.center, dtype=float).ravel()
        half_width = np.asarray(self.half_width, dtype=float).ravel()
        if center.shape != half_width.shape:
            raise ConfigError("center and half_width must have the same length")
        if np.any(half_width < 0):
            raise ConfigError("half_width must be nonnegative")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "half_width", half_width)

    @property
    def P(self) -> int:
        return self.center.shape[0]

    @property
    def lower(self) -> np.ndarray:
        return self.center - self.half_width

    @property
    def upper(self) -> np.ndarray:
        return self.center + self.half_width

    def covers(self, values) -> bool:
        """values 是否同时落在所有闭区间内"""
        values = np.asarray(values, dtype=float).ravel()
        if values.shape[0] != self.P:
            raise ConfigError(f"expected {self.P} values, got {values.shape[0]}")
        return bool(np.all((self.lower <= values) & (values <= self.upper)))

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "center": self.center.tolist(),
            "half_width": self.half_width.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CredibleBand":
        return cls(level=data["level"], center=data["center"], half_width=data["half_width"])


def simultaneous_band(draws: ImportanceDraws, alpha: float = 0.05) -> CredibleBand:
    """
    sup-t 同时可信带

    t_m = max_p |ψᶜ_{m,p} - center_p| / scale_p，
    q 取 {t_m} 的经验 (1-α) 下分位数，half_width = q·scale。

    Args:
        draws: M×P 重要性样本（M ≥ 2）
        alpha: 显著性水平

    Returns:
        CredibleBand
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    values = draws.values
    M = values.shape[0]
    if M < 2:
        raise InsufficientDrawsError(f"simultaneous band needs at least 2 draws, got {M}", M=M)

    center = values.mean(axis=0)
    sd = values.std(axis=0, ddof=1)
    scale = np.maximum(sd, SCALE_FLOOR * (1.0 + np.abs(center)))
    t = np.max(np.abs(values - center) / scale, axis=1)

    # 最小的次序统计量使累计频率 ≥ 1-α；1e-9 吸收 (1-α)M 的浮点误差
    k = max(1, math.ceil((1.0 - alpha) * M - 1e-9))
    q = float(np.sort(t)[k - 1]) * (1.0 + QUANTILE_SLACK)
    return CredibleBand(level=1.0 - alpha, center=center, half_width=q * scale)


@dataclass(frozen=True, eq=False)
class SelectionResult:
    """入选变量（0 起始下标）与对应可信带"""
    selected: Tuple[int, ...]
    band: CredibleBand

    def __contains__(self, p: int) -> bool:
        return p in self.selected

    def to_dict(self) -> dict:
        chosen = set(self.selected)
        return {
            "level": self.band.level,
            "selected": selected_names(self),
            "variables": [
                {
                    "variable": f"x{p + 1}",
                    "center": float(self.band.center[p]),
                    "lower": float(self.band.lower[p]),
                    "upper": float(self.band.upper[p]),
                    "selected": p in chosen,
                }
                for p in range(self.band.P)
            ],
        }

    def save(self, filepath: str):
        with open(filepath, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, ensure_ascii=False, indent=2)


def select_variables(band: CredibleBand) -> SelectionResult:
    """闭区间不含 0 即入选；下界恰为 0 不入选"""
    chosen = np.flatnonzero((band.lower > 0) | (band.upper < 0))
    return SelectionResult(selected=tuple(int(p) for p in chosen), band=band)


@dataclass(frozen=True)
class SelectionQuality:
    fdr: float
    power: float
    exact_recovery: bool

    def to_dict(self) -> dict:
        return {"fdr": self.fdr, "power": self.power, "exact_recovery": self.exact_recovery}


def selection_metrics(result: SelectionResult, truth: Iterable[int]) -> SelectionQuality:
    """
    FDR = |选中 \\ A₀| / max(1, |选中|)
    power = |选中 ∩ A₀| / |A₀|，A₀ 为空时记为 1
    """
    truth = {int(p) for p in truth}
    P = result.band.P
    for p in truth:
        if not 0 <= p < P:
            raise ConfigError(f"true variable index {p} out of range [0, {P})")
    selected = set(result.selected)
    fdr = len(selected - truth) / max(1, len(selected))
    power = len(selected & truth) / len(truth) if truth else 1.0
    return SelectionQuality(fdr=fdr, power=power, exact_recovery=selected == truth)


def selected_names(result: SelectionResult) -> List[str]:
    return [f"x{p + 1}" for p in result.selected]
