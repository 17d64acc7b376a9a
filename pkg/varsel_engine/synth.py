"""
模拟数据生成 (Synthetic Generators)

三种真值函数，都只依赖前 5 个坐标：
- linear:  f*(x) = Σ β_p x_p
- neural:  一个固定的随机 ReLU 网络
- complex: 非线性、带 max 与交互项的解析函数

协变量 iid Uniform(0,1)，y = f*(x) + N(0, s²)。
每一类随机量有自己的命名流，先填真坐标再填无关坐标，
因此同一种子下增大 P 不会改变前 5 列和 y。
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import stats

from .errors import ConfigError
from .net_core import (
    Dataset,
    NetworkArch,
    NetworkWeights,
    forward_batch,
    gradient_batch,
)
from .rng import stream_rng

logger = logging.getLogger(__name__)

KINDS = ("linear", "neural", "complex")
TRUE_DIM = 5
TRUE_SET = tuple(range(TRUE_DIM))

# 真实重要性的蒙特卡洛点数
MC_POINTS = 100_000
HELDOUT_SIZE = 2000

# 生成网络权重：N(0, 0.5²) 截断到 [-1, 1]
GENERATOR_WEIGHT_SD = 0.5
GENERATOR_WEIGHT_BOUND = 1.0
DEFAULT_GENERATOR_ARCH = NetworkArch(depth=2, width=8, input_dim=TRUE_DIM)


@dataclass(frozen=True)
class GeneratorSpec:
    """
    数据生成配置

    P 为环境维度（≥ 5），真维度固定为 5。
    """
    kind: str
    n: int
    P: int = 25
    noise_sd: float = 1.0
    seed: int = 0
    linear_beta: Tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0)
    neural_arch: NetworkArch = DEFAULT_GENERATOR_ARCH
    description: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.P < TRUE_DIM:
            raise ConfigError(f"P must be >= {TRUE_DIM}, got {self.P}")
        if self.noise_sd < 0:
            raise ConfigError(f"noise_sd must be nonnegative, got {self.noise_sd}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        beta = tuple(float(b) for b in self.linear_beta)
        if len(beta) != TRUE_DIM:
            raise ConfigError(f"linear_beta must have length {TRUE_DIM}, got {len(beta)}")
        object.__setattr__(self, "linear_beta", beta)
        if self.neural_arch.input_dim != TRUE_DIM:
            raise ConfigError(f"neural_arch must use input_dim {TRUE_DIM}")

    @property
    def true_dim(self) -> int:
        return TRUE_DIM

    def with_(self, **changes) -> "GeneratorSpec":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["linear_beta"] = list(self.linear_beta)
        data["neural_arch"] = self.neural_arch.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorSpec":
        data = dict(data)
        if isinstance(data.get("neural_arch"), dict):
            data["neural_arch"] = NetworkArch.from_dict(data["neural_arch"])
        if "linear_beta" in data:
            data["linear_beta"] = tuple(data["linear_beta"])
        return cls(**data)

    def __repr__(self) -> str:
        return f"GeneratorSpec({self.kind}, n={self.n}, P={self.P}, s={self.noise_sd}, seed={self.seed})"


# ========== 真值函数 ==========

def _true_coords(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    X = x[None, :] if x.ndim == 1 else x
    if X.ndim != 2 or X.shape[1] < TRUE_DIM:
        raise ConfigError(f"inputs need at least {TRUE_DIM} coordinates, got shape {x.shape}")
    return X[:, :TRUE_DIM]


def _complex_batch(X: np.ndarray) -> np.ndarray:
    x1, x2, x3, x4, x5 = X.T
    ratio = (np.sin(np.maximum(x1, x2)) + np.arctan(x2)) / (1.0 + x1 + x5)
    return ratio + np.sin(0.5 * x3) * (1.0 + np.exp(x4 - 0.5 * x3)) + x3 ** 2 + 2.0 * np.sin(x4) + 4.0 * x5


def _complex_grad(X: np.ndarray) -> np.ndarray:
    """解析梯度，max 在相等处取 x₁ 分支"""
    x1, x2, x3, x4, x5 = X.T
    top = np.maximum(x1, x2)
    numer = np.sin(top) + np.arctan(x2)
    denom = 1.0 + x1 + x5
    first = x1 >= x2
    e = np.exp(x4 - 0.5 * x3)
    grad = np.empty_like(X)
    grad[:, 0] = np.cos(top) * first / denom - numer / denom ** 2
    grad[:, 1] = (np.cos(top) * ~first + 1.0 / (1.0 + x2 ** 2)) / denom
    grad[:, 2] = 0.5 * np.cos(0.5 * x3) * (1.0 + e) - 0.5 * np.sin(0.5 * x3) * e + 2.0 * x3
    grad[:, 3] = np.sin(0.5 * x3) * e + 2.0 * np.cos(x4)
    grad[:, 4] = -numer / denom ** 2 + 4.0
    return grad


def f_complex(x):
    """
    f*(x) = [sin(max(x₁,x₂)) + arctan x₂] / (1 + x₁ + x₅)
            + sin(x₃/2)(1 + exp(x₄ - x₃/2)) + x₃² + 2 sin x₄ + 4 x₅

    一维输入返回标量，二维输入返回向量。
    """
    values = _complex_batch(_true_coords(x))
    return float(values[0]) if np.ndim(x) == 1 else values


def f_linear(x, beta5=(1.0, 1.0, 1.0, 1.0, 1.0)):
    """Σ_{p≤5} β_p x_p"""
    beta5 = np.asarray(beta5, dtype=float).ravel()
    if beta5.shape[0] != TRUE_DIM:
        raise ConfigError(f"beta5 must have length {TRUE_DIM}, got {beta5.shape[0]}")
    values = _true_coords(x) @ beta5
    return float(values[0]) if np.ndim(x) == 1 else values


def f_neural(spec: GeneratorSpec) -> NetworkWeights:
    """
    抽取生成网络（输入维度 5）

    权重 iid N(0, 0.5²) 截断到 [-1, 1]；只依赖种子，与 n、P 无关。
    """
    arch = spec.neural_arch
    bound = GENERATOR_WEIGHT_BOUND / GENERATOR_WEIGHT_SD
    law = stats.truncnorm(-bound, bound, loc=0.0, scale=GENERATOR_WEIGHT_SD)
    theta = law.rvs(size=arch.n_params, random_state=stream_rng(spec.seed, "generator"))
    return NetworkWeights.unflatten(np.asarray(theta, dtype=float), arch)


class TruthFunction:
    """f* 及其梯度，作用于任意 P ≥ 5 维输入"""

    def __init__(self, spec: GeneratorSpec, generator: Optional[NetworkWeights] = None):
        self.spec = spec
        self.generator = generator
        if spec.kind == "neural" and generator is None:
            self.generator = f_neural(spec)

    def __call__(self, X) -> np.ndarray:
        X5 = _true_coords(X)
        if self.spec.kind == "linear":
            return X5 @ np.asarray(self.spec.linear_beta)
        if self.spec.kind == "complex":
            return _complex_batch(X5)
        return forward_batch(self.generator, X5)

    def grad(self, X) -> np.ndarray:
        """n×5 梯度（只含真坐标）"""
        X5 = _true_coords(X)
        if self.spec.kind == "linear":
            return np.tile(np.asarray(self.spec.linear_beta), (X5.shape[0], 1))
        if self.spec.kind == "complex":
            return _complex_grad(X5)
        return gradient_batch(self.generator, X5)


def true_importance(truth: TruthFunction, P: int, n_points: int = MC_POINTS) -> np.ndarray:
    """
    Ψₚ(f*) = E‖∂ₚf*‖²，长度 P，p ≥ 5 处恰为 0

    linear 为 β² 精确值，其余用均匀点上的蒙特卡洛平均。
    """
    result = np.zeros(P)
    if truth.spec.kind == "linear":
        result[:TRUE_DIM] = np.asarray(truth.spec.linear_beta) ** 2
        return result
    points = stream_rng(truth.spec.seed, "true-importance").uniform(size=(n_points, TRUE_DIM))
    result[:TRUE_DIM] = np.mean(truth.grad(points) ** 2, axis=0)
    return result


# ========== 数据集 ==========

@dataclass(frozen=True, eq=False)
class SynthDataset:
    """带真值的模拟数据"""
    data: Dataset
    f_star_values: np.ndarray
    true_importance: np.ndarray
    spec: GeneratorSpec
    A0: Tuple[int, ...] = TRUE_SET
    truth: Optional[TruthFunction] = field(default=None, repr=False)

    @property
    def generator(self) -> Optional[NetworkWeights]:
        return self.truth.generator if self.truth else None

    def sidecar(self, fstar_file: str) -> dict:
        return {
            "kind": self.spec.kind,
            "seed": self.spec.seed,
            "noise_sd": self.spec.noise_sd,
            "A0": [p + 1 for p in self.A0],
            "true_importance": self.true_importance.tolist(),
            "f_star_values": fstar_file,
        }

    def export(self, filepath: str):
        """CSV（x1..xP, y）+ f* 值 CSV + JSON 元数据"""
        root, _ = os.path.splitext(filepath)
        fstar_path = root + ".fstar.csv"
        self.data.to_frame().to_csv(filepath, index=False, float_format="%.17g")
        np.savetxt(fstar_path, self.f_star_values, fmt="%.17g", header="f_star", comments="")
        with open(root + ".json", "w", encoding="utf-8") as f:
            json.dump(self.sidecar(os.path.basename(fstar_path)), f, ensure_ascii=False, indent=2)


def _covariates(spec: GeneratorSpec, n: int, stream: str) -> np.ndarray:
    X = np.empty((n, spec.P))
    X[:, :TRUE_DIM] = stream_rng(spec.seed, stream, "true").uniform(size=(n, TRUE_DIM))
    if spec.P > TRUE_DIM:
        X[:, TRUE_DIM:] = stream_rng(spec.seed, stream, "irrelevant").uniform(size=(n, spec.P - TRUE_DIM))
    return X


def gen_dataset(spec: GeneratorSpec, n_mc_points: int = MC_POINTS) -> SynthDataset:
    """
    生成一份模拟数据

    Args:
        spec: 生成配置
        n_mc_points: 真实重要性的蒙特卡洛点数

    Returns:
        SynthDataset
    """
    truth = TruthFunction(spec)
    X = _covariates(spec, spec.n, "covariates")
    f_star = truth(X)
    noise = stream_rng(spec.seed, "noise").standard_normal(spec.n)
    y = f_star + spec.noise_sd * noise
    logger.debug("generated %r", spec)
    return SynthDataset(
        data=Dataset(X=X, y=y, noise_sd=spec.noise_sd),
        f_star_values=f_star,
        true_importance=true_importance(truth, spec.P, n_mc_points),
        spec=spec,
        truth=truth,
    )


def heldout_inputs(spec: GeneratorSpec, size: int = HELDOUT_SIZE) -> np.ndarray:
    """独立流上的新均匀点，用于样本外 std_MSE"""
    if size < 1:
        raise ConfigError(f"size must be >= 1, got {size}")
    return _covariates(spec, size, "heldout")


# 预定义生成器
PREDEFINED_GENERATORS: Dict[str, GeneratorSpec] = {}


def _init_generators():
    """初始化预定义生成器"""
    PREDEFINED_GENERATORS["linear"] = GeneratorSpec(
        kind="linear", n=500, P=25,
        description="线性真值，五个真变量系数均为 1",
    )
    PREDEFINED_GENERATORS["neural"] = GeneratorSpec(
        kind="neural", n=500, P=25,
        description="随机 ReLU 网络真值，L=2, K=8",
    )
    PREDEFINED_GENERATORS["complex"] = GeneratorSpec(
        kind="complex", n=500, P=25,
        description="含 max、指数与交互项的非线性真值",
    )
    PREDEFINED_GENERATORS["neural-coverage"] = GeneratorSpec(
        kind="neural", n=500, P=10,
        description="可信带覆盖率实验的小规模单元",
    )
    PREDEFINED_GENERATORS["complex-wide"] = GeneratorSpec(
        kind="complex", n=2000, P=200,
        description="高维无关变量，检验选择的 FDR",
    )


_init_generators()


def get_generator(name: str, **overrides) -> GeneratorSpec:
    """按名称取预定义生成器，可覆盖字段"""
    if name not in PREDEFINED_GENERATORS:
        raise ConfigError(f"unknown generator {name!r}; known: {sorted(PREDEFINED_GENERATORS)}")
    return PREDEFINED_GENERATORS[name].with_(**overrides)

