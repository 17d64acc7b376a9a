"""
ReLU 网络核心 (Deep ReLU Network Core)

深度 ReLU 网络的表示与求值：

    f(x) = b0 + βᵀ σ(W_L σ(... σ(W_1 x)))

以及变量重要性计算所需的矩阵对象：
- Φ      隐藏层输出特征 (n×K)
- ∂ₚΦ    梯度特征 (n×K)，第 i 行为 (D̃ᵢ w_p)ᵀ
- D̃ᵢ     链矩阵 diag(s_L)·W_L·…·W_2·diag(s_1) (K×K)
- K_𝒲    核矩阵 ΦΦᵀ

激活约定：s_l[k] = 1 当且仅当预激活严格大于 0，
因此 ReLU 在 0 处的导数取 0。
"""

import json
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg

from .errors import ConfigError, NumericError, VarselError

logger = logging.getLogger(__name__)

# Gram 矩阵的默认相对岭参数
DEFAULT_RIDGE = 1e-8

# 数值秩阈值：特征值 ≤ RANK_RTOL·最大特征值 的方向算作零空间
RANK_RTOL = 1e-10


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


@dataclass(frozen=True)
class NetworkArch:
    """
    网络结构 ℱ(L, K, S, B)

    sparsity_bound / norm_bound 为 None 表示无约束。
    约束只做检查和报告，不参与构造。
    """
    depth: int                              # L: 隐藏层数
    width: int                              # K: 每层宽度
    input_dim: int                          # P: 输入维度
    sparsity_bound: Optional[int] = None    # S
    norm_bound: Optional[float] = None      # B

    def __post_init__(self):
        if self.depth < 1 or self.width < 1 or self.input_dim < 1:
            raise ConfigError(
                f"depth, width and input_dim must be >= 1, got "
                f"L={self.depth}, K={self.width}, P={self.input_dim}"
            )
        if self.sparsity_bound is not None and self.sparsity_bound < 0:
            raise ConfigError(f"sparsity_bound must be >= 0, got {self.sparsity_bound}")
        if self.norm_bound is not None and self.norm_bound <= 0:
            raise ConfigError(f"norm_bound must be > 0, got {self.norm_bound}")
        if self.norm_bound is not None and self.norm_bound > 1:
            logger.warning("norm_bound %.3g exceeds 1; constraint checks still use it", self.norm_bound)

    @property
    def n_params(self) -> int:
        """参数总数（含 β 与 b0）"""
        K, P = self.width, self.input_dim
        return K * P + (self.depth - 1) * K * K + K + 1

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "width": self.width,
            "input_dim": self.input_dim,
            "sparsity_bound": self.sparsity_bound,
            "norm_bound": self.norm_bound,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkArch":
        return cls(**data)


def _as_matrix(value, name: str) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.ndim != 2:
        raise ConfigError(f"{name} must be a matrix, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def read_numeric_csv(filepath: str) -> pd.DataFrame:
    """读取全数值列的 CSV，解析失败或出现非数值列时抛 ConfigError"""
    try:
        frame = pd.read_csv(filepath)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{filepath}: cannot parse CSV: {exc}") from exc
    non_numeric = [str(c) for c in frame.columns if not pd.api.types.is_numeric_dtype(frame[c])]
    if non_numeric or frame.empty:
        raise ConfigError(f"{filepath}: expected numeric rows, bad columns {non_numeric}")
    return frame


@dataclass(frozen=True, eq=False)
class NetworkWeights:
    """
    一个 ReLU 网络的全部权重，即一个后验样本

    W1:     K×P 输入层
    hidden: W_2..W_L，各为 K×K
    beta:   长度 K 的输出权重
    b0:     输出偏置
    """
    W1: np.ndarray
    hidden: Tuple[np.ndarray, ...] = ()
    beta: Optional[np.ndarray] = None
    b0: float = 0.0

    def __post_init__(self):
        W1 = _as_matrix(self.W1, "W1")
        K = W1.shape[0]
        hidden = tuple(_as_matrix(W, f"W{l + 2}") for l, W in enumerate(self.hidden))
        for l, W in enumerate(hidden):
            if W.shape != (K, K):
                raise ConfigError(f"W{l + 2} must be {K}x{K}, got {W.shape}")
        beta = np.zeros(K) if self.beta is None else np.array(self.beta, dtype=float).ravel()
        if beta.shape != (K,):
            raise ConfigError(f"beta must have length {K}, got {beta.shape}")
        beta.setflags(write=False)
        object.__setattr__(self, "W1", W1)
        object.__setattr__(self, "hidden", hidden)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "b0", float(self.b0))

    @property
    def depth(self) -> int:
        return len(self.hidden) + 1

    @property
    def width(self) -> int:
        return self.W1.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def layers(self) -> List[np.ndarray]:
        """[W1, W2, ..., WL]"""
        return [self.W1, *self.hidden]

    @property
    def arch(self) -> NetworkArch:
        return NetworkArch(self.depth, self.width, self.input_dim)

    def is_finite(self) -> bool:
        return (
            all(np.all(np.isfinite(W)) for W in self.layers)
            and bool(np.all(np.isfinite(self.beta)))
            and bool(np.isfinite(self.b0))
        )

    def check_finite(self):
        if not self.is_finite():
            raise NumericError("network weights contain non-finite entries", draw=self)

    def check_arch(self, arch: NetworkArch):
        if (self.depth, self.width, self.input_dim) != (arch.depth, arch.width, arch.input_dim):
            raise ConfigError(
                f"weights shaped (L={self.depth}, K={self.width}, P={self.input_dim}) "
                f"do not match arch (L={arch.depth}, K={arch.width}, P={arch.input_dim})"
            )

    # ---------- 扁平化（HMC 在扁平参数向量上运行） ----------

    def flatten(self) -> np.ndarray:
        """按 W1, W2..WL, β, b0 的顺序展平"""
        return np.concatenate(
            [W.ravel() for W in self.layers] + [self.beta, [self.b0]]
        )

    @classmethod
    def unflatten(cls, theta: np.ndarray, arch: NetworkArch) -> "NetworkWeights":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (arch.n_params,):
            raise ConfigError(f"expected {arch.n_params} parameters, got {theta.shape}")
        K, P = arch.width, arch.input_dim
        pos = K * P
        W1 = theta[:pos].reshape(K, P)
        hidden = []
        for _ in range(arch.depth - 1):
            hidden.append(theta[pos:pos + K * K].reshape(K, K))
            pos += K * K
        beta = theta[pos:pos + K]
        return cls(W1=W1, hidden=tuple(hidden), beta=beta, b0=theta[pos + K])

    @classmethod
    def zeros(cls, arch: NetworkArch, b0: float = 0.0) -> "NetworkWeights":
        theta = np.zeros(arch.n_params)
        theta[-1] = b0
        return cls.unflatten(theta, arch)

    @classmethod
    def sample_prior(
        cls, arch: NetworkArch, weight_sd: float, rng: np.random.Generator
    ) -> "NetworkWeights":
        """从 iid N(0, weight_sd²) 先验抽取一个网络"""
        return cls.unflatten(rng.normal(0.0, weight_sd, size=arch.n_params), arch)

    # ---------- 序列化 ----------

    def to_dict(self) -> dict:
        return {
            "L": self.depth,
            "K": self.width,
            "P": self.input_dim,
            "W1": self.W1.tolist(),
            "W": [W.tolist() for W in self.hidden],
            "beta": self.beta.tolist(),
            "b0": self.b0,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkWeights":
        if not isinstance(data, dict):
            raise ConfigError(f"network weights must be a JSON object, got {type(data).__name__}")
        try:
            weights = cls(
                W1=data["W1"],
                hidden=tuple(data.get("W", [])),
                beta=data["beta"],
                b0=float(data.get("b0", 0.0)),
            )
        except VarselError:
            raise
        except KeyError as exc:
            raise ConfigError(f"network weights missing field {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"malformed network weights: {exc}") from exc
        declared = (data.get("L", weights.depth), data.get("K", weights.width), data.get("P", weights.input_dim))
        if declared != (weights.depth, weights.width, weights.input_dim):
            raise ConfigError(f"declared shape {declared} does not match matrices")
        return weights

    def save(self, filepath: str):
        with open(filepath, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, ensure_ascii=False, indent=2)

    @classmethod
    def load(cls, filepath: str) -> "NetworkWeights":
        with open(filepath, "r", encoding="utf-8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{filepath}: invalid JSON: {exc}") from exc
        return cls.from_dict(data)

    def __repr__(self) -> str:
        return (f"NetworkWeights(L={self.depth}, K={self.width}, P={self.input_dim}, "
                f"b0={self.b0:.3f})")


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    回归数据 y = f(x) + e，e ~ N(0, s²)，s 已知
    """
    X: np.ndarray
    y: np.ndarray
    noise_sd: float = 1.0

    def __post_init__(self):
        X = _as_matrix(self.X, "X")
        y = np.array(self.y, dtype=float).ravel()
        if X.shape[0] < 1:
            raise ConfigError("dataset must contain at least one observation")
        if y.shape != (X.shape[0],):
            raise ConfigError(f"y must have length {X.shape[0]}, got {y.shape}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ConfigError("dataset contains non-finite entries")
        if X.min() < 0.0 or X.max() > 1.0:
            raise ConfigError("covariates must lie in [0, 1]")
        if not self.noise_sd >= 0:
            raise ConfigError(f"noise_sd must be nonnegative, got {self.noise_sd}")
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "noise_sd", float(self.noise_sd))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def P(self) -> int:
        return self.X.shape[1]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.X, columns=[f"x{p + 1}" for p in range(self.P)])
        frame["y"] = self.y
        return frame

    @classmethod
    def from_csv(cls, filepath: str, noise_sd: float) -> "Dataset":
        """读取 x1..xP, y 列的 CSV"""
        frame = read_numeric_csv(filepath)
        if "y" not in frame.columns:
            raise ConfigError(f"{filepath}: missing column 'y'")
        x_cols = [c for c in frame.columns if c != "y"]
        return cls(X=frame[x_cols].to_numpy(dtype=float),
                   y=frame["y"].to_numpy(dtype=float),
                   noise_sd=noise_sd)


# ========== 前向传播 ==========

def _check_inputs(weights: NetworkWeights, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != weights.input_dim:
        raise ConfigError(
            f"inputs must have {weights.input_dim} columns, got shape {X.shape}"
        )
    return X


def propagate(weights: NetworkWeights, X) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """
    逐层前向传播

    Returns:
        (预激活列表, 激活列表)，每个元素为 n×K
    """
    X = _check_inputs(weights, X)
    pre_acts, acts = [], []
    h = X
    for W in weights.layers:
        z = h @ W.T
        h = relu(z)
        pre_acts.append(z)
        acts.append(h)
    return pre_acts, acts


def forward_batch(weights: NetworkWeights, X) -> np.ndarray:
    """批量求值，返回长度 n 的向量"""
    _, acts = propagate(weights, X)
    return weights.b0 + acts[-1] @ weights.beta


def forward(weights: NetworkWeights, x) -> float:
    """
    单点求值 f(x) = b0 + βᵀ h_L

    Args:
        weights: 网络权重
        x: 长度 P 的输入

    Returns:
        网络输出
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (weights.input_dim,):
        raise ConfigError(f"x must have length {weights.input_dim}, got {x.shape}")
    return float(forward_batch(weights, x)[0])


@dataclass(frozen=True, eq=False)
class ActivationPattern:
    """单个输入点的逐层激活模式 s_1..s_L"""
    masks: Tuple[np.ndarray, ...]

    @property
    def depth(self) -> int:
        return len(self.masks)

    def chain_matrix(self, weights: NetworkWeights) -> np.ndarray:
        """D̃ = diag(s_L)·W_L·…·W_2·diag(s_1)"""
        D = np.diag(self.masks[0].astype(float))
        for W, s in zip(weights.hidden, self.masks[1:]):
            D = s.astype(float)[:, None] * (W @ D)
        return D

    def linearized_forward(self, weights: NetworkWeights, x) -> float:
        """按激活模式线性化后的网络 b0 + βᵀ D̃ W1 x"""
        return float(weights.b0 + weights.beta @ (self.chain_matrix(weights) @ (weights.W1 @ np.asarray(x, dtype=float))))


def activation_pattern(weights: NetworkWeights, x) -> ActivationPattern:
    x = np.asarray(x, dtype=float)
    if x.shape != (weights.input_dim,):
        raise ConfigError(f"x must have length {weights.input_dim}, got {x.shape}")
    pre_acts, _ = propagate(weights, x)
    return ActivationPattern(masks=tuple(z[0] > 0 for z in pre_acts))


def chain_matrices(weights: NetworkWeights, masks: Sequence[np.ndarray]) -> np.ndarray:
    """
    所有观测的链矩阵 D̃ᵢ

    Args:
        masks: 每层 n×K 的激活指示

    Returns:
        n×K×K 数组
    """
    K = weights.width
    m = [np.asarray(s, dtype=float) for s in masks]
    if weights.depth == 1:
        return np.eye(K)[None, :, :] * m[0][:, None, :]
    # W_2·diag(s_1) 只需按列缩放
    D = weights.hidden[0][None, :, :] * m[0][:, None, :]
    D *= m[1][:, :, None]
    for W, s in zip(weights.hidden[1:], m[2:]):
        D = np.matmul(W, D)
        D *= s[:, :, None]
    return D


def gradient_batch(weights: NetworkWeights, X) -> np.ndarray:
    """
    所有观测、所有变量的偏导 ∂f/∂x_p

    Returns:
        n×P 梯度矩阵
    """
    pre_acts, _ = propagate(weights, X)
    delta = (pre_acts[-1] > 0) * weights.beta[None, :]
    for W, z in zip(reversed(weights.hidden), reversed(pre_acts[:-1])):
        delta = (delta @ W) * (z > 0)
    return delta @ weights.W1


def gradient(weights: NetworkWeights, x, p: int) -> float:
    """
    弱偏导 ∂f/∂x_p = βᵀ D̃(x) w_p

    Args:
        x: 长度 P 的输入
        p: 变量下标（从 0 开始）
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (weights.input_dim,):
        raise ConfigError(f"x must have length {weights.input_dim}, got {x.shape}")
    if not 0 <= p < weights.input_dim:
        raise ConfigError(f"variable index {p} out of range [0, {weights.input_dim})")
    return float(gradient_batch(weights, x)[0, p])


def embed_inputs(weights: NetworkWeights, input_dim: int) -> NetworkWeights:
    """在 W1 右侧补零列，使网络作用于更高维输入（新增坐标无影响）"""
    if input_dim < weights.input_dim:
        raise ConfigError(f"cannot embed P={weights.input_dim} network into {input_dim} inputs")
    W1 = np.zeros((weights.width, input_dim))
    W1[:, :weights.input_dim] = weights.W1
    return NetworkWeights(W1=W1, hidden=weights.hidden, beta=weights.beta, b0=weights.b0)


# ========== 特征矩阵 ==========

def regularized_inverse(gram: np.ndarray, ridge: float) -> Tuple[np.ndarray, float, int]:
    """
    行空间上的 (ΦᵀΦ + λ_eff I)⁻¹，λ_eff = ridge·tr(ΦᵀΦ)/K

    对 ΦᵀΦ 做特征分解：特征值不超过 RANK_RTOL·最大特征值的方向算作零空间，
    逆在这些方向上取 0，其余方向取 1/(e + λ_eff)。ridge → 0 时即伪逆 (ΦᵀΦ)⁺。
    满秩时与 (ΦᵀΦ + λ_eff I)⁻¹ 相同。
    tr(ΦᵀΦ) = 0（全死网络）时 λ_eff = ridge，返回 I/λ_eff。

    Returns:
        (逆矩阵, λ_eff, 数值秩)
    """
    if ridge < 0:
        raise ConfigError(f"ridge must be nonnegative, got {ridge}")
    K = gram.shape[0]
    trace = float(np.trace(gram))
    if trace <= 0:
        if ridge == 0:
            return np.zeros((K, K)), 0.0, 0
        return np.eye(K) / ridge, ridge, 0
    lam = ridge * trace / K
    try:
        eig, vec = linalg.eigh(gram)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NumericError(f"Gram eigendecomposition failed: {exc}") from exc
    keep = eig > RANK_RTOL * eig[-1]
    V = vec[:, keep]
    inv = (V / (eig[keep] + lam)) @ V.T
    return 0.5 * (inv + inv.T), lam, int(np.count_nonzero(keep))


@dataclass(frozen=True, eq=False)
class FeatureBundle:
    """
    由一个网络和一批输入派生的矩阵

    Phi:      n×K 隐藏特征
    Dtilde:   n×K×K 链矩阵
    gram_inv: K×K 正则化 Gram 逆
    W1:       输入层权重（∂ₚΦ 由 D̃ᵢ w_p 按需生成）
    """
    Phi: np.ndarray
    Dtilde: np.ndarray
    W1: np.ndarray
    gram: np.ndarray
    gram_inv: np.ndarray
    gram_rank: int
    ridge: float
    ridge_eff: float

    @property
    def n(self) -> int:
        return self.Phi.shape[0]

    @property
    def K(self) -> int:
        return self.Phi.shape[1]

    @property
    def P(self) -> int:
        return self.W1.shape[1]

    @property
    def rank_deficient(self) -> bool:
        return self.gram_rank < self.K

    def grad_features(self, p: int) -> np.ndarray:
        """∂ₚΦ：第 i 行为 (D̃ᵢ w_p)ᵀ，n×K"""
        if not 0 <= p < self.P:
            raise ConfigError(f"variable index {p} out of range [0, {self.P})")
        return self.Dtilde @ self.W1[:, p]

    @cached_property
    def dPhi(self) -> np.ndarray:
        """全部梯度特征，P×n×K（大数据时内存较大）"""
        return np.stack([self.grad_features(p) for p in range(self.P)])

    def augmented(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        带偏置列的特征：Φ 末尾补一列 1，∂ₚΦ 对应补零列

        Returns:
            (n×(K+1) 特征, P×n×(K+1) 梯度特征)
        """
        Phi_aug = np.hstack([self.Phi, np.ones((self.n, 1))])
        dPhi_aug = np.concatenate([self.dPhi, np.zeros((self.P, self.n, 1))], axis=2)
        return Phi_aug, dPhi_aug


def build_feature_bundle(
    weights: NetworkWeights, X, ridge: float = DEFAULT_RIDGE
) -> FeatureBundle:
    """
    构建特征矩阵

    Args:
        weights: 网络权重
        X: n×P 输入
        ridge: Gram 矩阵的相对岭参数

    Returns:
        FeatureBundle
    """
    weights.check_finite()
    X = _check_inputs(weights, X)
    if X.shape[0] < 1:
        raise ConfigError("feature bundle needs at least one observation")
    pre_acts, acts = propagate(weights, X)
    Phi = acts[-1]
    Dtilde = chain_matrices(weights, [z > 0 for z in pre_acts])
    gram = Phi.T @ Phi
    gram = 0.5 * (gram + gram.T)
    gram_inv, lam, rank = regularized_inverse(gram, ridge)
    return FeatureBundle(
        Phi=Phi,
        Dtilde=Dtilde,
        W1=weights.W1,
        gram=gram,
        gram_inv=gram_inv,
        gram_rank=rank,
        ridge=ridge,
        ridge_eff=lam,
    )


def kernel_matrix(bundle: FeatureBundle) -> np.ndarray:
    """核矩阵 K_𝒲 = ΦΦᵀ (n×n)"""
    return bundle.Phi @ bundle.Phi.T


# ========== 约束检查 ==========

@dataclass(frozen=True)
class ConstraintReport:
    sparsity_total: int      # Σ_l ||W_l||_0
    max_inf_norm: float      # max_l 最大绝对元素
    sparsity_ok: bool
    norm_ok: bool

    def to_dict(self) -> dict:
        return {
            "sparsity_total": self.sparsity_total,
            "max_inf_norm": self.max_inf_norm,
            "sparsity_ok": self.sparsity_ok,
            "norm_ok": self.norm_ok,
        }


def check_constraints(weights: NetworkWeights, arch: NetworkArch) -> ConstraintReport:
    """
    检查稀疏约束 S 与范数约束 B（只统计隐藏层权重 W_1..W_L）
    """
    layers = weights.layers
    sparsity = int(sum(np.count_nonzero(W) for W in layers))
    max_norm = float(max(np.max(np.abs(W)) if W.size else 0.0 for W in layers))
    sparsity_ok = arch.sparsity_bound is None or sparsity <= arch.sparsity_bound
    norm_ok = arch.norm_bound is None or max_norm <= arch.norm_bound
    return ConstraintReport(sparsity, max_norm, sparsity_ok, norm_ok)
