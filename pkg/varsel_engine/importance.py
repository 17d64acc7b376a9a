"""
变量重要性 (Variable Importance)

ψₚ(f)  = ‖∂ₚf‖²ₙ                       原始重要性
ηₚ     = s²·tr(∂ₚΦ G ∂ₚΦᵀ)             噪声带来的偏差
ψᶜₚ(f) = ψₚ - ηₚ                        中心化重要性

其中 G 为 ΦᵀΦ 行空间上的 (ΦᵀΦ + λI)⁻¹（见 net_core.regularized_inverse）。ψᶜ 有三条等价算法：
- 直接计算（逐变量）
- Ω 二次型：ψᶜₚ = w_pᵀ Ω w_p，Ω 与 p 无关
- 分块并行：ψᶜₚ = tr(Λₚ (ββᵀ - s²G))

内部一律不归一化，normalized=True 时两项同除以 n。
"""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from .errors import ConfigError, NumericError
from .net_core import (
    DEFAULT_RIDGE,
    FeatureBundle,
    build_feature_bundle,
    read_numeric_csv,
    regularized_inverse,
)

logger = logging.getLogger(__name__)

# 并行路线的观测分块大小；与线程数无关，保证任意线程数下结果逐位一致
BLOCK_SIZE = 256


def _scale(normalized: bool, n: int) -> float:
    return 1.0 / n if normalized else 1.0


def _check_beta(bundle: FeatureBundle, beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=float).ravel()
    if beta.shape[0] != bundle.K:
        raise ConfigError(f"beta has length {beta.shape[0]}, expected K={bundle.K}")
    return beta


def psi_raw(bundle: FeatureBundle, beta, p: int, normalized: bool = True) -> float:
    """c·‖∂ₚΦ β‖²"""
    beta = _check_beta(bundle, beta)
    v = bundle.grad_features(p) @ beta
    return _scale(normalized, bundle.n) * float(v @ v)


def trace_correction(
    bundle: FeatureBundle, p: int, noise_sd: float, normalized: bool = True
) -> float:
    """c·s²·tr(Aₚ G)，Aₚ = ∂ₚΦᵀ∂ₚΦ"""
    if noise_sd < 0:
        raise ConfigError(f"noise_sd must be nonnegative, got {noise_sd}")
    dphi = bundle.grad_features(p)
    value = float(np.sum((dphi @ bundle.gram_inv) * dphi))
    # G 半正定，舍入误差以外不会为负
    return _scale(normalized, bundle.n) * noise_sd ** 2 * max(value, 0.0)


def psi_centered_direct(
    bundle: FeatureBundle, beta, p: int, noise_sd: float, normalized: bool = True
) -> float:
    """ψᶜₚ = ψₚ - ηₚ，可以为负"""
    return psi_raw(bundle, beta, p, normalized) - trace_correction(bundle, p, noise_sd, normalized)


# ========== Ω 路线 ==========

@dataclass(frozen=True, eq=False)
class OmegaMatrix:
    """K×K 对称矩阵 Σᵢ D̃ᵢᵀ (ββᵀ - s²G) D̃ᵢ"""
    omega: np.ndarray
    built_from: str = ""

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=float)
        if omega.ndim != 2 or omega.shape[0] != omega.shape[1]:
            raise ConfigError(f"omega must be square, got shape {omega.shape}")
        object.__setattr__(self, "omega", omega)

    @property
    def K(self) -> int:
        return self.omega.shape[0]

    def is_symmetric(self, rtol: float = 1e-10) -> bool:
        scale = max(1.0, float(np.max(np.abs(self.omega))))
        return float(np.max(np.abs(self.omega - self.omega.T))) <= rtol * scale


def _meat(bundle: FeatureBundle, beta: np.ndarray, noise_sd: float) -> np.ndarray:
    return np.outer(beta, beta) - noise_sd ** 2 * bundle.gram_inv


def omega_matrix(
    bundle: FeatureBundle, beta, noise_sd: float, built_from: str = ""
) -> OmegaMatrix:
    """
    计算 Ω，每个后验样本只需一次

    Args:
        bundle: 特征矩阵
        beta: 输出层权重
        noise_sd: 噪声标准差
        built_from: 样本/数据标识

    Returns:
        OmegaMatrix
    """
    beta = _check_beta(bundle, beta)
    M = _meat(bundle, beta, noise_sd)
    D = bundle.Dtilde
    omega = np.einsum("ika,kl,ilb->ab", D, M, D, optimize=True)
    omega = 0.5 * (omega + omega.T)
    return OmegaMatrix(omega=omega, built_from=built_from)


def psi_centered_omega(omega: OmegaMatrix, w_p, normalized: bool = True, n: int = 1) -> float:
    """c·w_pᵀ Ω w_p"""
    w_p = np.asarray(w_p, dtype=float).ravel()
    if w_p.shape[0] != omega.K:
        raise ConfigError(f"w_p has length {w_p.shape[0]}, expected K={omega.K}")
    if normalized and n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    return _scale(normalized, n) * float(w_p @ omega.omega @ w_p)


def psi_centered_all(
    bundle: FeatureBundle, beta, noise_sd: float, normalized: bool = True
) -> np.ndarray:
    """用同一个 Ω 计算全部 P 个变量"""
    omega = omega_matrix(bundle, beta, noise_sd).omega
    W1 = bundle.W1
    values = np.einsum("kp,kl,lp->p", W1, omega, W1)
    return _scale(normalized, bundle.n) * values


# ========== 分块并行路线 ==========

def _block_partial(bundle: FeatureBundle, start: int, stop: int) -> Tuple[np.ndarray, np.ndarray]:
    """一个观测块的 (Λ 部分和 P×K×K, ΦᵀΦ 部分和 K×K)"""
    G = bundle.Dtilde[start:stop] @ bundle.W1          # b×K×P
    Gt = np.ascontiguousarray(G.transpose(2, 1, 0))    # P×K×b
    # matmul 执行时释放 GIL
    lam = Gt @ Gt.transpose(0, 2, 1)
    phi = bundle.Phi[start:stop]
    return lam, phi.T @ phi


def psi_centered_parallel(
    bundle: FeatureBundle,
    beta,
    noise_sd: float,
    shards: int = 1,
    normalized: bool = True,
) -> np.ndarray:
    """
    分块并行计算全部 ψᶜₚ

    观测切成固定大小的连续块，由 shards 个线程计算部分和，
    再按块序号升序合并。

    Args:
        shards: 工作线程数 T

    Returns:
        长度 P 的向量
    """
    if shards < 1:
        raise ConfigError(f"shards must be >= 1, got {shards}")
    beta = _check_beta(bundle, beta)
    n = bundle.n
    bounds = [(s, min(s + BLOCK_SIZE, n)) for s in range(0, n, BLOCK_SIZE)]

    if shards == 1 or len(bounds) == 1:
        partials = [_block_partial(bundle, a, b) for a, b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=shards) as executor:
            partials = list(executor.map(lambda ab: _block_partial(bundle, *ab), bounds))

    lam, gram = partials[0]
    lam, gram = lam.copy(), gram.copy()
    for lam_b, gram_b in partials[1:]:
        lam += lam_b
        gram += gram_b

    gram = 0.5 * (gram + gram.T)
    gram_inv, _, _ = regularized_inverse(gram, bundle.ridge)
    M = np.outer(beta, beta) - noise_sd ** 2 * gram_inv
    # tr(Λₚ M) = Σ Λₚ∘M（M 对称）
    values = np.einsum("pkl,kl->p", lam, M)
    return _scale(normalized, n) * values


# ========== 后验样本上的重要性 ==========

@dataclass(frozen=True, eq=False)
class ImportanceDraws:
    """M×P 中心化重要性样本，第 m 行对应第 m 个后验样本"""
    values: np.ndarray
    normalized: bool = True
    noise_sd: Optional[float] = None
    n: Optional[int] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] < 1:
            raise ConfigError(f"importance draws must be a nonempty M×P matrix, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise NumericError("importance draws contain non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def M(self) -> int:
        return self.values.shape[0]

    @property
    def P(self) -> int:
        return self.values.shape[1]

    def column(self, p: int) -> np.ndarray:
        if not 0 <= p < self.P:
            raise ConfigError(f"variable index {p} out of range [0, {self.P})")
        return self.values[:, p]

    def metadata(self) -> dict:
        return {
            "normalized": self.normalized,
            "noise_sd": self.noise_sd,
            "n": self.n,
            "M": self.M,
            "P": self.P,
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.values, columns=[f"psi_{p + 1}" for p in range(self.P)])

    @staticmethod
    def sidecar_path(filepath: str) -> str:
        root, _ = os.path.splitext(filepath)
        return root + ".meta.json"

    def to_csv(self, filepath: str):
        """CSV（表头 psi_1..psi_P）加一个元数据 JSON"""
        self.to_frame().to_csv(filepath, index=False, float_format="%.17g")
        with open(self.sidecar_path(filepath), "w", encoding="utf-8") as f:
            json.dump(self.metadata(), f, ensure_ascii=False, indent=2)

    @classmethod
    def from_csv(cls, filepath: str) -> "ImportanceDraws":
        frame = read_numeric_csv(filepath)
        meta = {}
        sidecar = cls.sidecar_path(filepath)
        if os.path.exists(sidecar):
            with open(sidecar, "r", encoding="utf-8") as f:
                try:
                    meta = json.load(f)
                except json.JSONDecodeError as exc:
                    raise ConfigError(f"{sidecar}: invalid JSON: {exc}") from exc
            if not isinstance(meta, dict):
                raise ConfigError(f"{sidecar}: metadata must be a JSON object")
        return cls(
            values=frame.to_numpy(dtype=float),
            normalized=meta.get("normalized", True),
            noise_sd=meta.get("noise_sd"),
            n=meta.get("n"),
        )


def importance_draws(
    chain,
    X,
    noise_sd: float,
    normalized: bool = True,
    shards: int = 1,
    ridge: float = DEFAULT_RIDGE,
) -> ImportanceDraws:
    """
    对链上每个样本计算 ψᶜ

    Args:
        chain: PosteriorChain
        X: n×P 输入
        shards: 并行路线的线程数

    Returns:
        ImportanceDraws
    """
    if chain.M == 0:
        raise ConfigError("chain is empty")
    X = np.asarray(X, dtype=float)
    rows = []
    for m, weights in enumerate(chain.draws):
        try:
            bundle = build_feature_bundle(weights, X, ridge)
            if bundle.rank_deficient:
                logger.debug("draw %d: rank-deficient Gram (rank %d < K=%d)",
                             m, bundle.gram_rank, bundle.K)
            rows.append(psi_centered_parallel(bundle, weights.beta, noise_sd, shards, normalized))
        except NumericError as exc:
            raise exc.with_index(m) from exc
    return ImportanceDraws(
        values=np.vstack(rows),
        normalized=normalized,
        noise_sd=noise_sd,
        n=X.shape[0],
    )
