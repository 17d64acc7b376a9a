"""
经验验证统计量

- std_MSE：1 - R² 型的标准化误差
- CvM：标准化后验样本与标准正态的 L₂ 距离，以及蒙特卡洛零分布
- BvM 参照：√n(ψᶜₚ - ψ̂ᶜₚ) 的渐近标准差与协方差
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import stats

from .errors import ConfigError, DegenerateVarianceError, InsufficientDrawsError
from .importance import ImportanceDraws
from .net_core import FeatureBundle
from .rng import stream_rng

logger = logging.getLogger(__name__)

DEFAULT_NULL_LEVELS = (0.05, 0.5, 0.95)
MIN_NULL_REPS = 100


def std_mse(f_hat, f_star) -> float:
    """Σ(f̂ - f*)² / Σ(f* - mean f*)²"""
    f_hat = np.asarray(f_hat, dtype=float).ravel()
    f_star = np.asarray(f_star, dtype=float).ravel()
    if f_hat.shape != f_star.shape:
        raise ConfigError(f"length mismatch: {f_hat.shape[0]} vs {f_star.shape[0]}")
    denom = float(np.sum((f_star - f_star.mean()) ** 2))
    if denom <= 0.0:
        raise DegenerateVarianceError("std_mse needs a non-constant truth")
    return float(np.sum((f_hat - f_star) ** 2)) / denom


def standardize(z) -> np.ndarray:
    """减去样本均值，除以样本标准差（除数 M-1）"""
    z = np.asarray(z, dtype=float).ravel()
    if z.shape[0] < 2:
        raise InsufficientDrawsError(f"standardize needs at least 2 values, got {z.shape[0]}")
    mean = z.mean()
    sd = z.std(ddof=1)
    if sd <= 1e-12 * (1.0 + abs(mean)):
        raise DegenerateVarianceError("sample standard deviation is zero", mean=float(mean))
    return (z - mean) / sd


def cvm_statistic(z) -> float:
    """
    (1/M) Σ [F̂(z_m) - Φ(z_m)]²

    F̂ 为样本自身的经验分布函数，F̂(z_m) = #{j: z_j ≤ z_m} / M。
    并列值取最大秩（不是平均秩），全部相等时 F̂ ≡ 1；无并列时即 rank/M。
    """
    z = np.asarray(z, dtype=float).ravel()
    M = z.shape[0]
    if M < 2:
        raise InsufficientDrawsError(f"cvm statistic needs at least 2 values, got {M}")
    ecdf = stats.rankdata(z, method="max") / M
    return float(np.mean((ecdf - stats.norm.cdf(z)) ** 2))


def cvm_per_variable(draws: ImportanceDraws, variables: Sequence[int]) -> List[float]:
    """每个指定变量的 CvM；后验退化时记为 nan"""
    result = []
    for p in variables:
        try:
            result.append(cvm_statistic(standardize(draws.column(p))))
        except DegenerateVarianceError:
            logger.warning("variable x%d: degenerate posterior, cvm undefined", p + 1)
            result.append(float("nan"))
    return result


# ========== CvM 零分布 ==========

@dataclass(frozen=True)
class CvmNullBand:
    """标准正态样本下 CvM 统计量的经验分位数"""
    quantiles: Dict[float, float]
    M: int
    n_rep: int
    seed: int = 0

    def __post_init__(self):
        levels = sorted(self.quantiles)
        values = [self.quantiles[q] for q in levels]
        if any(b < a for a, b in zip(values, values[1:])):
            raise ConfigError("null band quantiles must be nondecreasing in level")

    def upper(self, level: float = 0.95) -> float:
        if level not in self.quantiles:
            raise ConfigError(f"level {level} not in null band {sorted(self.quantiles)}")
        return self.quantiles[level]

    def contains(self, statistic: float, low: float = 0.05, high: float = 0.95) -> bool:
        return self.quantiles[low] <= statistic <= self.quantiles[high]

    def to_dict(self) -> dict:
        return {
            "M": self.M,
            "n_rep": self.n_rep,
            "seed": self.seed,
            "quantiles": {str(q): v for q, v in sorted(self.quantiles.items())},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CvmNullBand":
        return cls(
            quantiles={float(q): float(v) for q, v in data["quantiles"].items()},
            M=data["M"],
            n_rep=data["n_rep"],
            seed=data.get("seed", 0),
        )


def _null_replication(M: int, seed: int, rep: int) -> float:
    z = stream_rng(seed, "cvm-null", rep).standard_normal(M)
    return cvm_statistic(standardize(z))


def cvm_null_band(
    M: int,
    n_rep: int = 1000,
    levels: Sequence[float] = DEFAULT_NULL_LEVELS,
    seed: int = 0,
    workers: int = 1,
) -> CvmNullBand:
    """
    蒙特卡洛零分布：每次抽 M 个标准正态，标准化后算 CvM

    每次重复使用 (seed, 序号) 派生的独立流，结果与 workers 无关。

    Args:
        M: 每次重复的样本量
        n_rep: 重复次数（≥ 100）
        levels: 分位水平

    Returns:
        CvmNullBand
    """
    if M < 2:
        raise ConfigError(f"M must be >= 2, got {M}")
    if n_rep < MIN_NULL_REPS:
        raise ConfigError(f"n_rep must be >= {MIN_NULL_REPS}, got {n_rep}")
    levels = sorted(float(q) for q in levels)
    if not levels or any(not 0.0 <= q <= 1.0 for q in levels):
        raise ConfigError(f"levels must lie in [0, 1], got {levels}")

    if workers <= 1:
        values = [_null_replication(M, seed, r) for r in range(n_rep)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            values = list(executor.map(lambda r: _null_replication(M, seed, r), range(n_rep)))

    qs = np.quantile(np.asarray(values), levels)
    return CvmNullBand(
        quantiles={q: float(v) for q, v in zip(levels, np.maximum.accumulate(qs))},
        M=M,
        n_rep=n_rep,
        seed=seed,
    )


# ========== BvM 参照 ==========

def _bvm_vectors(bundle: FeatureBundle, beta0, noise_sd: float) -> np.ndarray:
    """每列 v_p = Φ G Aₚ β₀，n×P"""
    beta0 = np.asarray(beta0, dtype=float).ravel()
    if beta0.shape[0] != bundle.K:
        raise ConfigError(f"beta0 has length {beta0.shape[0]}, expected K={bundle.K}")
    if noise_sd < 0:
        raise ConfigError(f"noise_sd must be nonnegative, got {noise_sd}")
    if bundle.rank_deficient:
        logger.warning("bvm reference on rank-deficient Gram (rank %d < K=%d)",
                       bundle.gram_rank, bundle.K)
    dphi = bundle.dPhi                                     # P×n×K
    a_beta = np.einsum("pik,pil,l->pk", dphi, dphi, beta0)  # Aₚ β₀
    return bundle.Phi @ (bundle.gram_inv @ a_beta.T)


def bvm_reference_sd(bundle: FeatureBundle, beta0, p: int, noise_sd: float) -> float:
    """
    √n(ψᶜₚ - ψ̂ᶜₚ) 的参照标准差 √(4 s² ‖Φ G Aₚ β₀‖² / n)

    Args:
        bundle: 真值网络（或投影所用网络）在样本点上的特征
        beta0: 真值的输出层系数
    """
    if not 0 <= p < bundle.P:
        raise ConfigError(f"variable index {p} out of range [0, {bundle.P})")
    v = _bvm_vectors(bundle, beta0, noise_sd)[:, p]
    return float(np.sqrt(4.0 * noise_sd ** 2 * float(v @ v) / bundle.n))


def bvm_reference_sds(bundle: FeatureBundle, beta0, noise_sd: float) -> np.ndarray:
    return np.sqrt(np.clip(np.diag(bvm_covariance(bundle, beta0, noise_sd)), 0.0, None))


def bvm_covariance(bundle: FeatureBundle, beta0, noise_sd: float) -> np.ndarray:
    """V[p₁, p₂] = 4 s² ⟨v_{p₁}, v_{p₂}⟩ / n，P×P 对称半正定"""
    V = _bvm_vectors(bundle, beta0, noise_sd)
    cov = 4.0 * noise_sd ** 2 * (V.T @ V) / bundle.n
    return 0.5 * (cov + cov.T)


def projected_beta(bundle: FeatureBundle, f_star) -> np.ndarray:
    """真值不在网络类中时的替代系数 β₀ = G Φᵀ f*"""
    f_star = np.asarray(f_star, dtype=float).ravel()
    if f_star.shape[0] != bundle.n:
        raise ConfigError(f"f_star has length {f_star.shape[0]}, expected n={bundle.n}")
    return bundle.gram_inv @ (bundle.Phi.T @ f_star)


def spread_std_mse(draws: ImportanceDraws, bvm_sd, n: int) -> float:
    """后验标准差（√n 尺度）相对 BvM 参照标准差的 std_MSE"""
    bvm_sd = np.asarray(bvm_sd, dtype=float).ravel()
    if bvm_sd.shape[0] != draws.P:
        raise ConfigError(f"bvm_sd has length {bvm_sd.shape[0]}, expected P={draws.P}")
    if draws.M < 2:
        raise InsufficientDrawsError(f"spread needs at least 2 draws, got {draws.M}")
    posterior_sd = np.sqrt(n) * draws.values.std(axis=0, ddof=1)
    return std_mse(posterior_sd, bvm_sd)


# ========== 报告 ==========

@dataclass
class DiagnosticsReport:
    """单个实验单元的诊断汇总"""
    std_mse_f: float
    std_mse_psi: float
    std_mse_sd: float = float("nan")
    cvm: List[float] = field(default_factory=list)
    null_band: Optional[CvmNullBand] = None
    bvm_sd: List[float] = field(default_factory=list)
    indicative: bool = False

    def cvm_in_band(self, level: float = 0.95) -> List[bool]:
        if self.null_band is None:
            return []
        cut = self.null_band.upper(level)
        return [bool(c <= cut) for c in self.cvm]

    def to_dict(self) -> dict:
        return {
            "std_mse_f": self.std_mse_f,
            "std_mse_psi": self.std_mse_psi,
            "std_mse_sd": self.std_mse_sd,
            "cvm": list(self.cvm),
            "null_band": self.null_band.to_dict() if self.null_band else None,
            "bvm_sd": list(self.bvm_sd),
            "indicative": self.indicative,
        }

    def save(self, filepath: str):
        with open(filepath, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, ensure_ascii=False, indent=2)
