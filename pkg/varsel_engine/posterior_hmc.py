"""
HMC 后验采样 (Hamiltonian Monte Carlo over Network Weights)

目标分布：
    log π(θ) = -(1/2s²) Σᵢ (yᵢ - f_θ(xᵢ))² - (1/2σ²) ||θ||²

- 单位质量矩阵的蛙跳积分
- warmup 阶段用 Nesterov 对偶平均自适应步长
- 精确哈密顿量做 Metropolis 校正
- 给定种子完全可复现
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from .errors import ConfigError, NumericError, SamplerFailure
from .net_core import (
    Dataset,
    NetworkArch,
    NetworkWeights,
    forward_batch,
    propagate,
)
from .rng import derive_seed, stream_rng

logger = logging.getLogger(__name__)

GradFn = Callable[[np.ndarray], np.ndarray]
LogProbFn = Callable[[np.ndarray], Tuple[float, np.ndarray]]


@dataclass(frozen=True)
class PriorSpec:
    """iid 高斯先验 N(0, weight_sd²)，作用于所有权重与偏置"""
    weight_sd: float = math.sqrt(0.1)

    def __post_init__(self):
        if not self.weight_sd > 0:
            raise ConfigError(f"weight_sd must be positive, got {self.weight_sd}")

    @classmethod
    def from_variance(cls, variance: float) -> "PriorSpec":
        if not variance > 0:
            raise ConfigError(f"prior variance must be positive, got {variance}")
        return cls(weight_sd=math.sqrt(variance))


@dataclass(frozen=True)
class HmcConfig:
    """
    采样配置

    warmup 为 None 时取总迭代数的一半（即 n_draws × thin）。
    """
    n_draws: int = 2000
    warmup: Optional[int] = None
    leapfrog_steps: int = 20
    target_accept: float = 0.75
    init_step: float = 0.01
    seed: int = 0
    thin: int = 1
    jitter: float = 0.5         # 每次迭代步长乘以 U(1-jitter, 1+jitter)

    def __post_init__(self):
        if self.n_draws < 1:
            raise ConfigError(f"n_draws must be >= 1, got {self.n_draws}")
        if self.warmup is not None and self.warmup < 0:
            raise ConfigError(f"warmup must be >= 0, got {self.warmup}")
        if self.leapfrog_steps < 1:
            raise ConfigError(f"leapfrog_steps must be >= 1, got {self.leapfrog_steps}")
        if not 0.0 < self.target_accept < 1.0:
            raise ConfigError(f"target_accept must lie in (0, 1), got {self.target_accept}")
        if not self.init_step > 0:
            raise ConfigError(f"init_step must be positive, got {self.init_step}")
        if self.thin < 1:
            raise ConfigError(f"thin must be >= 1, got {self.thin}")
        if not 0.0 <= self.jitter < 1.0:
            raise ConfigError(f"jitter must lie in [0, 1), got {self.jitter}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    @property
    def n_warmup(self) -> int:
        return self.n_draws * self.thin if self.warmup is None else self.warmup

    @property
    def total_iterations(self) -> int:
        return self.n_warmup + self.n_draws * self.thin

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "HmcConfig":
        return cls(**data)


# ========== 目标分布 ==========

class NetworkPosterior:
    """
    网络权重的对数后验及其梯度（反向传播，ReLU 在 0 处导数取 0）

    data 为 None 时只保留先验项。
    """

    def __init__(self, arch: NetworkArch, data: Optional[Dataset], prior: PriorSpec):
        if data is not None and data.P != arch.input_dim:
            raise ConfigError(f"data has P={data.P}, network expects {arch.input_dim}")
        if data is not None and data.noise_sd == 0:
            raise ConfigError("posterior sampling needs noise_sd > 0")
        self.arch = arch
        self.data = data
        self.prior = prior
        self._prior_precision = 1.0 / prior.weight_sd ** 2

    def __call__(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        weights = NetworkWeights.unflatten(theta, self.arch)
        log_prior = -0.5 * self._prior_precision * float(theta @ theta)
        grad = -self._prior_precision * theta
        if self.data is not None:
            log_lik, grad_lik = self._likelihood(weights)
            log_post = log_lik + log_prior
            grad = grad + grad_lik
        else:
            log_post = log_prior
        if not (np.isfinite(log_post) and np.all(np.isfinite(grad))):
            raise NumericError("non-finite log posterior or gradient", draw=weights)
        return log_post, grad

    def _likelihood(self, weights: NetworkWeights) -> Tuple[float, np.ndarray]:
        X, y = self.data.X, self.data.y
        pre_acts, acts = propagate(weights, X)
        f = weights.b0 + acts[-1] @ weights.beta
        resid = y - f
        precision = 1.0 / self.data.noise_sd ** 2
        log_lik = -0.5 * precision * float(resid @ resid)

        r = precision * resid
        g_b0 = r.sum()
        g_beta = acts[-1].T @ r
        delta = r[:, None] * weights.beta[None, :] * (pre_acts[-1] > 0)
        layers = weights.layers
        grads = [None] * len(layers)
        for l in range(len(layers) - 1, -1, -1):
            h_prev = acts[l - 1] if l > 0 else X
            grads[l] = delta.T @ h_prev
            if l > 0:
                delta = (delta @ layers[l]) * (pre_acts[l - 1] > 0)
        grad = np.concatenate([g.ravel() for g in grads] + [g_beta, [g_b0]])
        return log_lik, grad


class OutputLayerPosterior:
    """
    隐藏层固定时 (β, b0) 的对数后验

    特征 Φ 不随参数变化，模型对 (β, b0) 线性，后验是精确的高斯分布
    （贝叶斯线性回归），可用 gaussian_posterior() 得到闭式解。
    参数顺序为 (β, b0)，与 NetworkWeights.flatten 的末尾一致。
    """

    def __init__(self, base: NetworkWeights, data: Optional[Dataset], prior: PriorSpec):
        base.check_finite()
        if data is not None and data.P != base.input_dim:
            raise ConfigError(f"data has P={data.P}, network expects {base.input_dim}")
        if data is not None and data.noise_sd == 0:
            raise ConfigError("posterior sampling needs noise_sd > 0")
        self.base = base
        self.data = data
        self.prior = prior
        self._prior_precision = 1.0 / prior.weight_sd ** 2
        self.Phi = propagate(base, data.X)[1][-1] if data is not None else None

    @property
    def dim(self) -> int:
        return self.base.width + 1

    def initial_theta(self) -> np.ndarray:
        return np.concatenate([self.base.beta, [self.base.b0]])

    def weights(self, theta: np.ndarray) -> NetworkWeights:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ConfigError(f"expected {self.dim} output parameters, got {theta.shape}")
        return NetworkWeights(W1=self.base.W1, hidden=self.base.hidden,
                              beta=theta[:-1], b0=theta[-1])

    def __call__(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        log_post = -0.5 * self._prior_precision * float(theta @ theta)
        grad = -self._prior_precision * theta
        if self.data is not None:
            precision = 1.0 / self.data.noise_sd ** 2
            resid = self.data.y - theta[-1] - self.Phi @ theta[:-1]
            log_post += -0.5 * precision * float(resid @ resid)
            r = precision * resid
            grad = grad + np.concatenate([self.Phi.T @ r, [r.sum()]])
        if not (np.isfinite(log_post) and np.all(np.isfinite(grad))):
            raise NumericError("non-finite log posterior or gradient")
        return log_post, grad

    def gaussian_posterior(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        (β, b0) 的精确后验 N(m, S)

        S = (ZᵀZ/s² + I/σ²)⁻¹，m = S Zᵀy/s²，Z = [Φ, 1]
        """
        d = self.dim
        if self.data is None:
            return np.zeros(d), np.eye(d) / self._prior_precision
        Z = np.hstack([self.Phi, np.ones((self.data.n, 1))])
        precision = 1.0 / self.data.noise_sd ** 2
        A = precision * (Z.T @ Z) + self._prior_precision * np.eye(d)
        cov = linalg.solve(A, np.eye(d), assume_a="pos")
        cov = 0.5 * (cov + cov.T)
        return cov @ (precision * (Z.T @ self.data.y)), cov


def log_posterior_and_grad(
    weights: NetworkWeights, data: Optional[Dataset], prior: PriorSpec
) -> Tuple[float, np.ndarray]:
    """
    对数后验（去掉常数）与扁平梯度

    梯度顺序与 NetworkWeights.flatten 一致。
    """
    weights.check_finite()
    return NetworkPosterior(weights.arch, data, prior)(weights.flatten())


# ========== 积分器与步长自适应 ==========

def leapfrog(
    position: np.ndarray,
    momentum: np.ndarray,
    step: float,
    n_steps: int,
    grad_fn: GradFn,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    蛙跳积分（单位质量矩阵）

    Args:
        grad_fn: 对数密度的梯度

    Returns:
        (position', momentum')；轨迹出现非有限值时提前返回
    """
    if not step > 0:
        raise ConfigError(f"step must be positive, got {step}")
    if n_steps < 0:
        raise ConfigError(f"n_steps must be >= 0, got {n_steps}")
    q = np.array(position, dtype=float)
    p = np.array(momentum, dtype=float)
    if n_steps == 0:
        return q, p
    g = grad_fn(q)
    p = p + 0.5 * step * g
    for i in range(n_steps):
        q = q + step * p
        g = grad_fn(q)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(g))):
            return q, np.full_like(p, np.nan)
        if i != n_steps - 1:
            p = p + step * g
    p = p + 0.5 * step * g
    return q, p


@dataclass(frozen=True)
class DualAveragingState:
    """Nesterov 对偶平均的状态"""
    target_accept: float
    mu: float
    log_step: float
    log_step_bar: float = 0.0
    h_bar: float = 0.0
    iteration: int = 0

    GAMMA = 0.05
    T0 = 10.0
    KAPPA = 0.75

    @classmethod
    def start(cls, init_step: float, target_accept: float) -> "DualAveragingState":
        return cls(
            target_accept=target_accept,
            mu=math.log(10.0 * init_step),
            log_step=math.log(init_step),
        )

    @property
    def step(self) -> float:
        return math.exp(self.log_step)

    @property
    def averaged_step(self) -> float:
        """warmup 结束后使用的平均步长"""
        if self.iteration == 0:
            return self.step
        return math.exp(self.log_step_bar)


def adapt_step(state: DualAveragingState, accept_prob: float) -> Tuple[DualAveragingState, float]:
    """
    对偶平均一步：接受率高于目标则放大步长，反之缩小

    Returns:
        (新状态, 新步长)
    """
    if not 0.0 <= accept_prob <= 1.0:
        raise ConfigError(f"accept_prob must lie in [0, 1], got {accept_prob}")
    t = state.iteration + 1
    eta = 1.0 / (t + state.T0)
    h_bar = (1.0 - eta) * state.h_bar + eta * (state.target_accept - accept_prob)
    log_step = state.mu - math.sqrt(t) / state.GAMMA * h_bar
    weight = t ** (-state.KAPPA)
    log_step_bar = weight * log_step + (1.0 - weight) * state.log_step_bar
    new_state = replace(
        state, h_bar=h_bar, log_step=log_step, log_step_bar=log_step_bar, iteration=t
    )
    return new_state, math.exp(log_step)


# ========== 采样器 ==========

class _CachedTarget:
    """记住最近一次求值，避免轨迹端点重复计算"""

    def __init__(self, log_prob_fn: LogProbFn):
        self.log_prob_fn = log_prob_fn
        self.last_q: Optional[np.ndarray] = None
        self.last_logp = -np.inf
        self.last_grad: Optional[np.ndarray] = None

    def evaluate(self, q: np.ndarray) -> Tuple[float, np.ndarray]:
        if self.last_q is None or not np.array_equal(q, self.last_q):
            self.last_logp, self.last_grad = self.log_prob_fn(q)
            self.last_q = q
        return self.last_logp, self.last_grad

    def grad(self, q: np.ndarray) -> np.ndarray:
        return self.evaluate(q)[1]


@dataclass
class SamplerResult:
    """扁平参数空间上的采样结果"""
    draws: np.ndarray          # M×d
    log_posts: np.ndarray      # M
    accept_rate: float
    final_step: float
    n_divergent: int           # 只统计 warmup 之后
    n_iterations: int
    n_warmup: int = 0

    @property
    def divergent_fraction(self) -> float:
        return self.n_divergent / max(1, self.n_iterations - self.n_warmup)


class HamiltonianSampler:
    """
    HMC 采样器

    核心循环：
    1. 抽取动量，蛙跳积分得到提议
    2. 精确哈密顿量做 Metropolis 校正
    3. warmup 阶段对偶平均调步长，之后固定为平均步长；每次迭代步长按 jitter 随机缩放
    4. 每 thin 步保留一个样本
    """

    # |ΔH| 超过此值视为发散
    DIVERGENCE_THRESHOLD = 1000.0
    # DEBUG 日志的间隔
    LOG_EVERY = 500

    def __init__(self, log_prob_fn: LogProbFn, config: HmcConfig):
        self.target = _CachedTarget(log_prob_fn)
        self.config = config

    def run(self, theta0: np.ndarray, rng: Optional[np.random.Generator] = None) -> SamplerResult:
        cfg = self.config
        rng = rng if rng is not None else stream_rng(cfg.seed, "hmc")
        theta = np.array(theta0, dtype=float)
        try:
            logp, _ = self.target.evaluate(theta)
        except NumericError as exc:
            raise SamplerFailure("initial state has non-finite log posterior",
                                 reason=exc.message) from exc

        adapt = DualAveragingState.start(cfg.init_step, cfg.target_accept)
        step = cfg.init_step
        warmup = cfg.n_warmup
        total = cfg.total_iterations

        draws = np.empty((cfg.n_draws, theta.size))
        log_posts = np.empty(cfg.n_draws)
        kept = 0
        n_failed = 0            # 全部迭代中的发散次数
        n_divergent = 0         # 采样阶段的发散次数
        n_accepted_post = 0

        for it in range(total):
            p0 = rng.standard_normal(theta.size)
            scale = rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter)
            step_it = step * scale
            h0 = -logp + 0.5 * float(p0 @ p0)
            accept_prob = 0.0
            diverged = True
            proposal, logp_new = None, -np.inf
            try:
                proposal, p1 = leapfrog(theta, p0, step_it, cfg.leapfrog_steps, self.target.grad)
                if np.all(np.isfinite(proposal)) and np.all(np.isfinite(p1)):
                    logp_new, _ = self.target.evaluate(proposal)
                    delta_h = (-logp_new + 0.5 * float(p1 @ p1)) - h0
                    if np.isfinite(delta_h) and abs(delta_h) <= self.DIVERGENCE_THRESHOLD:
                        accept_prob = min(1.0, math.exp(-delta_h))
                        diverged = False
            except NumericError:
                pass            # 数值异常按发散处理
            n_failed += int(diverged)

            # 每次迭代都消耗一个均匀数，保证随机流对齐
            u = rng.uniform()
            accepted = u < accept_prob
            if accepted:
                theta, logp = proposal, logp_new

            if it < warmup:
                adapt, step = adapt_step(adapt, accept_prob)
                if it == warmup - 1:
                    step = adapt.averaged_step
                    logger.info("warmup done after %d iterations, step size %.4g", warmup, step)
            else:
                n_accepted_post += int(accepted)
                n_divergent += int(diverged)
                if (it - warmup + 1) % cfg.thin == 0:
                    draws[kept] = theta
                    log_posts[kept] = logp
                    kept += 1

            if (it + 1) % self.LOG_EVERY == 0:
                logger.debug("iteration %d/%d, step %.4g, divergent %d", it + 1, total, step, n_divergent)

        if total > 0 and n_failed == total:
            raise SamplerFailure(
                "all HMC proposals diverged",
                n_iterations=total,
                final_step=step,
                init_step=cfg.init_step,
            )

        post_iters = total - warmup
        accept_rate = n_accepted_post / post_iters if post_iters else 0.0
        logger.info("hmc finished: accept rate %.3f, step %.4g, divergent %d/%d",
                    accept_rate, step, n_divergent, post_iters)
        return SamplerResult(
            draws=draws,
            log_posts=log_posts,
            accept_rate=accept_rate,
            final_step=step,
            n_divergent=n_divergent,
            n_iterations=total,
            n_warmup=warmup,
        )


# ========== 网络后验链 ==========

@dataclass
class PosteriorChain:
    """保留下来的后验样本序列及采样统计"""
    draws: List[NetworkWeights]
    accept_rate: float
    final_step: float
    log_posts: np.ndarray
    n_divergent: int = 0       # 只统计 warmup 之后
    n_iterations: int = 0
    n_warmup: int = 0
    seed: int = 0
    config: Optional[HmcConfig] = None

    def __post_init__(self):
        self.log_posts = np.asarray(self.log_posts, dtype=float)
        if len(self.draws) != self.log_posts.shape[0]:
            raise ConfigError("draws and log_posts must have the same length")
        if not 0.0 <= self.accept_rate <= 1.0:
            raise ConfigError(f"accept_rate must lie in [0, 1], got {self.accept_rate}")

    def __len__(self) -> int:
        return len(self.draws)

    @property
    def M(self) -> int:
        return len(self.draws)

    @property
    def divergent_fraction(self) -> float:
        return self.n_divergent / max(1, self.n_iterations - self.n_warmup)

    def flat_draws(self) -> np.ndarray:
        """M×d 参数矩阵"""
        return np.stack([w.flatten() for w in self.draws])

    @classmethod
    def merge(cls, chains: Sequence["PosteriorChain"]) -> "PosteriorChain":
        """按链序号拼接多条链"""
        if not chains:
            raise ConfigError("cannot merge an empty list of chains")
        total = sum(len(c) for c in chains)
        return cls(
            draws=[w for c in chains for w in c.draws],
            accept_rate=sum(c.accept_rate * len(c) for c in chains) / total,
            final_step=chains[-1].final_step,
            log_posts=np.concatenate([c.log_posts for c in chains]),
            n_divergent=sum(c.n_divergent for c in chains),
            n_iterations=sum(c.n_iterations for c in chains),
            n_warmup=sum(c.n_warmup for c in chains),
            seed=chains[0].seed,
            config=chains[0].config,
        )

    def header(self) -> dict:
        return {
            "seed": self.seed,
            "config": self.config.to_dict() if self.config else None,
            "accept_rate": self.accept_rate,
            "final_step": self.final_step,
            "n_divergent": self.n_divergent,
            "n_iterations": self.n_iterations,
            "n_warmup": self.n_warmup,
            "log_posts": self.log_posts.tolist(),
        }

    def save(self, filepath: str):
        """检查点：首行为 JSON 头，其后每行一个样本"""
        with open(filepath, "w", encoding="utf-8") as f:
            f.write(json.dumps(self.header(), ensure_ascii=False) + "\n")
            for w in self.draws:
                f.write(json.dumps(w.to_dict(), ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, filepath: str) -> "PosteriorChain":
        with open(filepath, "r", encoding="utf-8") as f:
            lines = [line for line in f if line.strip()]
        if not lines:
            raise ConfigError(f"{filepath}: empty checkpoint")
        try:
            header = json.loads(lines[0])
            draws = [NetworkWeights.from_dict(json.loads(line)) for line in lines[1:]]
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{filepath}: invalid checkpoint line: {exc}") from exc
        if not isinstance(header, dict) or "accept_rate" not in header or "log_posts" not in header:
            raise ConfigError(f"{filepath}: checkpoint header is malformed")
        config = header.get("config")
        return cls(
            draws=draws,
            accept_rate=header["accept_rate"],
            final_step=header.get("final_step", float("nan")),
            log_posts=header["log_posts"],
            n_divergent=header.get("n_divergent", 0),
            n_iterations=header.get("n_iterations", 0),
            n_warmup=header.get("n_warmup", 0),
            seed=header.get("seed", 0),
            config=HmcConfig.from_dict(config) if config else None,
        )

    def __repr__(self) -> str:
        return (f"PosteriorChain(M={self.M}, accept={self.accept_rate:.2f}, "
                f"step={self.final_step:.3g}, divergent={self.n_divergent})")


def initial_weights(arch: NetworkArch, prior: PriorSpec, seed: int) -> NetworkWeights:
    """用链种子从先验抽取初始网络"""
    return NetworkWeights.sample_prior(arch, prior.weight_sd, stream_rng(seed, "init"))


def hmc_sample(
    init: Optional[NetworkWeights],
    data: Optional[Dataset],
    prior: PriorSpec,
    config: HmcConfig,
    arch: Optional[NetworkArch] = None,
    train_hidden: bool = True,
) -> PosteriorChain:
    """
    网络权重的 HMC 采样

    Args:
        init: 初始网络；为 None 时从先验抽取（需要 arch）
        data: 数据；为 None 时只对先验采样
        prior: 先验
        config: 采样配置
        train_hidden: 为 False 时隐藏层固定在 init，只采样 (β, b0)

    Returns:
        PosteriorChain
    """
    if init is None:
        if arch is None:
            raise ConfigError("either init or arch must be given")
        init = initial_weights(arch, prior, config.seed)
    elif arch is not None:
        init.check_arch(arch)
    init.check_finite()
    arch = init.arch
    if train_hidden:
        target = NetworkPosterior(arch, data, prior)
        result = HamiltonianSampler(target, config).run(init.flatten())
        draws = [NetworkWeights.unflatten(theta, arch) for theta in result.draws]
    else:
        target = OutputLayerPosterior(init, data, prior)
        result = HamiltonianSampler(target, config).run(target.initial_theta())
        draws = [target.weights(theta) for theta in result.draws]
    return PosteriorChain(
        draws=draws,
        accept_rate=result.accept_rate,
        final_step=result.final_step,
        log_posts=result.log_posts,
        n_divergent=result.n_divergent,
        n_iterations=result.n_iterations,
        n_warmup=result.n_warmup,
        seed=config.seed,
        config=config,
    )


def sample_chains(
    arch: NetworkArch,
    data: Optional[Dataset],
    prior: PriorSpec,
    config: HmcConfig,
    n_chains: int,
    workers: int = 1,
) -> List[PosteriorChain]:
    """
    并行运行多条独立链，每条链有自己的种子和随机流

    Returns:
        按链序号排列的链列表
    """
    if n_chains < 1:
        raise ConfigError(f"n_chains must be >= 1, got {n_chains}")
    configs = [replace(config, seed=derive_seed(config.seed, "chain", c)) for c in range(n_chains)]

    def run_one(cfg: HmcConfig) -> PosteriorChain:
        return hmc_sample(None, data, prior, cfg, arch=arch)

    if workers <= 1:
        return [run_one(cfg) for cfg in configs]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(run_one, configs))


def posterior_mean_prediction(chain: PosteriorChain, X) -> np.ndarray:
    """后验预测均值 E[f(x)]"""
    if chain.M == 0:
        raise ConfigError("chain is empty")
    total = np.zeros(np.asarray(X).shape[0])
    for w in chain.draws:
        total += forward_batch(w, X)
    return total / chain.M
