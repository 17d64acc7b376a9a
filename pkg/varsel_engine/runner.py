"""
实验编排 (Experiment Runner)

网格 (kind × n × P) × 重复次数，每个单元：
    生成数据 → HMC → 重要性样本 → 同时可信带 → 变量选择 → 诊断

输出：
    report.csv        每个单元一行
    cells/*.json      单元记录 + 诊断
    manifest.json     配置、配置哈希、文件清单
"""

import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import yaml

from . import __version__
from .diagnostics import (
    DiagnosticsReport,
    bvm_reference_sds,
    cvm_null_band,
    cvm_per_variable,
    projected_beta,
    spread_std_mse,
    std_mse,
)
from .errors import ConfigError, DegenerateVarianceError, NumericError, SamplerFailure
from .importance import ImportanceDraws, importance_draws
from .net_core import NetworkArch, build_feature_bundle, embed_inputs
from .posterior_hmc import HmcConfig, PosteriorChain, PriorSpec, hmc_sample, posterior_mean_prediction
from .rng import derive_seed
from .selection import select_variables, selected_names, selection_metrics, simultaneous_band
from .synth import (
    DEFAULT_GENERATOR_ARCH,
    HELDOUT_SIZE,
    MC_POINTS,
    GeneratorSpec,
    SynthDataset,
    gen_dataset,
    get_generator,
    heldout_inputs,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)


# ========== 配置 ==========

@dataclass(frozen=True)
class GridSpec:
    """数据生成网格；kinds 为预定义生成器名（linear、neural、complex、neural-coverage 等）"""
    kinds: Tuple[str, ...] = ("neural",)
    ns: Tuple[int, ...] = (100, 400, 1000, 2000)
    Ps: Tuple[int, ...] = (25,)
    noise_sd: float = 1.0
    linear_beta: Tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0)
    neural_arch: NetworkArch = DEFAULT_GENERATOR_ARCH

    def __post_init__(self):
        for name in ("kinds", "ns", "Ps", "linear_beta"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not (self.kinds and self.ns and self.Ps):
            raise ConfigError("empty grid")
        for name in self.kinds:
            get_generator(name)

    @property
    def size(self) -> int:
        return len(self.kinds) * len(self.ns) * len(self.Ps)

    def to_dict(self) -> dict:
        data = asdict(self)
        data.update({k: list(getattr(self, k)) for k in ("kinds", "ns", "Ps", "linear_beta")})
        data["neural_arch"] = self.neural_arch.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "GridSpec":
        data = dict(data)
        if isinstance(data.get("neural_arch"), dict):
            data["neural_arch"] = NetworkArch.from_dict(data["neural_arch"])
        return cls(**data)


@dataclass(frozen=True)
class ModelConfig:
    """拟合网络的结构与先验"""
    depth: int = 2
    width: int = 50
    prior_variance: float = 0.1
    train_hidden: bool = True   # False：隐藏层固定在初始值，只采样输出层

    def arch(self, input_dim: int) -> NetworkArch:
        return NetworkArch(depth=self.depth, width=self.width, input_dim=input_dim)

    @property
    def prior(self) -> PriorSpec:
        return PriorSpec.from_variance(self.prior_variance)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ExperimentConfig:
    """
    实验配置

    文件（JSON / TOML）的键与字段名一致，generator / model / hmc 为嵌套表。
    """
    generator: GridSpec = field(default_factory=GridSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    hmc: HmcConfig = field(default_factory=lambda: HmcConfig(n_draws=2000, warmup=2000))
    alpha: float = 0.05
    replications: int = 20
    output_dir: str = "results"
    seed: int = 0
    threads: int = 1            # 并行单元数
    shards: int = 1             # 单元内分块并行的线程数
    normalized: bool = True
    null_reps: int = 1000
    heldout_size: int = HELDOUT_SIZE
    mc_points: int = MC_POINTS

    def __post_init__(self):
        if self.replications < 1:
            raise ConfigError(f"replications must be >= 1, got {self.replications}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.threads < 1 or self.shards < 1:
            raise ConfigError("threads and shards must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def cells(self) -> List["CellConfig"]:
        """网格 × 重复，顺序为 kind, n, P, replication"""
        grid = self.generator
        return [
            CellConfig.build(self, kind, n, P, rep)
            for kind in grid.kinds
            for n in grid.ns
            for P in grid.Ps
            for rep in range(self.replications)
        ]

    def to_dict(self) -> dict:
        return {
            "generator": self.generator.to_dict(),
            "model": self.model.to_dict(),
            "hmc": self.hmc.to_dict(),
            "alpha": self.alpha,
            "replications": self.replications,
            "output_dir": self.output_dir,
            "seed": self.seed,
            "threads": self.threads,
            "shards": self.shards,
            "normalized": self.normalized,
            "null_reps": self.null_reps,
            "heldout_size": self.heldout_size,
            "mc_points": self.mc_points,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "generator" in data:
            data["generator"] = GridSpec.from_dict(data["generator"])
        if "model" in data:
            data["model"] = ModelConfig(**data["model"])
        if "hmc" in data:
            data["hmc"] = HmcConfig.from_dict(data["hmc"])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, filepath: str) -> "ExperimentConfig":
        """读取 .json / .toml / .yaml 配置"""
        ext = os.path.splitext(filepath)[1].lower()
        try:
            if ext == ".toml":
                with open(filepath, "rb") as f:
                    data = tomllib.load(f)
            elif ext == ".json":
                with open(filepath, "r", encoding="utf-8") as f:
                    data = json.load(f)
            elif ext in (".yaml", ".yml"):
                with open(filepath, "r", encoding="utf-8") as f:
                    data = yaml.safe_load(f)
            else:
                raise ConfigError(f"unsupported config format {ext!r}; use .json, .toml or .yaml")
        except (tomllib.TOMLDecodeError, json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse {filepath}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{filepath} must contain a key-value table")
        return cls.from_dict(data)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class CellConfig:
    """一个网格单元的一次重复"""
    kind: str
    n: int
    P: int
    replication: int
    seed: int
    generator: GeneratorSpec
    arch: NetworkArch
    prior: PriorSpec
    hmc: HmcConfig
    alpha: float = 0.05
    shards: int = 1
    normalized: bool = True
    null_reps: int = 1000
    heldout_size: int = HELDOUT_SIZE
    mc_points: int = MC_POINTS
    train_hidden: bool = True

    @classmethod
    def build(cls, config: ExperimentConfig, kind: str, n: int, P: int, rep: int) -> "CellConfig":
        """
        单元种子只由 (基础种子, 单元坐标) 派生。
        数据种子不含 n、P：同一次重复下各 n 共享同一个真值网络。
        """
        grid = config.generator
        seed = derive_seed(config.seed, kind, n, P, rep)
        generator = get_generator(
            kind,
            n=n,
            P=P,
            noise_sd=grid.noise_sd,
            seed=derive_seed(config.seed, "data", kind, rep),
            linear_beta=grid.linear_beta,
            neural_arch=grid.neural_arch,
        )
        return cls(
            kind=kind,
            n=n,
            P=P,
            replication=rep,
            seed=seed,
            generator=generator,
            arch=config.model.arch(P),
            prior=config.model.prior,
            hmc=replace(config.hmc, seed=derive_seed(seed, "hmc")),
            alpha=config.alpha,
            shards=config.shards,
            normalized=config.normalized,
            null_reps=config.null_reps,
            heldout_size=config.heldout_size,
            mc_points=config.mc_points,
            train_hidden=config.model.train_hidden,
        )

    @property
    def cell_id(self) -> str:
        return f"{self.kind}-n{self.n}-P{self.P}-r{self.replication}"


# ========== 记录 ==========

@dataclass
class CellRecord:
    """单元结果；失败单元 status="failed" 并带错误信息"""
    kind: str
    n: int
    P: int
    replication: int
    seed: int
    status: str = "ok"
    error: Optional[dict] = None
    std_mse_f: float = float("nan")
    std_mse_psi: float = float("nan")
    std_mse_sd: float = float("nan")
    psi_mean: List[float] = field(default_factory=list)
    psi_sd: List[float] = field(default_factory=list)
    cvm: List[float] = field(default_factory=list)
    cvm_null: Dict[str, float] = field(default_factory=dict)
    coverage: bool = False
    fdr: float = float("nan")
    power: float = float("nan")
    exact_recovery: bool = False
    selected: List[str] = field(default_factory=list)
    accept_rate: float = float("nan")
    divergent_fraction: float = float("nan")
    indicative: bool = False
    wall_clock: float = 0.0
    diagnostics: Optional[DiagnosticsReport] = field(default=None, repr=False)

    @property
    def cell_id(self) -> str:
        return f"{self.kind}-n{self.n}-P{self.P}-r{self.replication}"

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_log(self) -> str:
        """一行摘要"""
        if not self.ok:
            return f"[{self.cell_id}] failed: {self.error.get('message') if self.error else '?'}"
        return (
            f"[{self.cell_id}] std_mse_f={self.std_mse_f:.3f} "
            f"std_mse_psi={self.std_mse_psi:.3f} "
            f"fdr={self.fdr:.2f} power={self.power:.2f} "
            f"{'✓' if self.exact_recovery else '✗'} "
            f"cover={'✓' if self.coverage else '✗'} "
            f"({self.wall_clock:.1f}s)"
        )

    def to_dict(self) -> dict:
        data = asdict(self)
        data["diagnostics"] = self.diagnostics.to_dict() if self.diagnostics else None
        return data

    def to_row(self) -> dict:
        """CSV 行：列表字段展开成列"""
        row = {k: v for k, v in self.to_dict().items()
               if k not in ("cvm", "cvm_null", "psi_mean", "psi_sd", "selected",
                             "error", "diagnostics")}
        row["error"] = self.error.get("message") if self.error else ""
        row["selected"] = " ".join(self.selected)
        for p, value in enumerate(self.cvm):
            row[f"cvm_x{p + 1}"] = value
        for level, value in self.cvm_null.items():
            row[f"cvm_null_{level}"] = value
        return row

    def save(self, filepath: str):
        with open(filepath, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, ensure_ascii=False, indent=2)


# ========== 单元 ==========

def _reference_network(cell: CellConfig, synth: SynthDataset, chain: PosteriorChain):
    """
    BvM 参照所用的 (特征, β₀, 是否仅供参考)

    neural 真值就是网络本身；其余用后验最高密度样本的特征做投影。
    """
    X = synth.data.X
    if cell.generator.kind == "neural":
        f0 = embed_inputs(synth.generator, cell.P)
        return build_feature_bundle(f0, X), f0.beta, False
    best = chain.draws[int(np.argmax(chain.log_posts))]
    bundle = build_feature_bundle(best, X)
    return bundle, projected_beta(bundle, synth.f_star_values - np.mean(synth.f_star_values)), True


def _std_mse_or_nan(estimate, truth, label: str) -> float:
    """真值为常数时 std_MSE 无定义，记 NaN，单元其余结果照常保留"""
    try:
        return std_mse(estimate, truth)
    except DegenerateVarianceError as exc:
        logger.warning("std_mse_%s undefined: %s", label, exc.message)
        return float("nan")


def _diagnose(
    cell: CellConfig, synth: SynthDataset, chain: PosteriorChain, draws: ImportanceDraws
) -> DiagnosticsReport:
    n = synth.data.n
    scale = 1.0 if cell.normalized else float(n)

    X_out = heldout_inputs(cell.generator, cell.heldout_size)
    std_mse_f = _std_mse_or_nan(posterior_mean_prediction(chain, X_out), synth.truth(X_out), "f")
    std_mse_psi = _std_mse_or_nan(draws.values.mean(axis=0) / scale, synth.true_importance, "psi")

    null_band = cvm_null_band(draws.M, cell.null_reps, seed=derive_seed(cell.seed, "cvm-null"))
    cvm = cvm_per_variable(draws, synth.A0)

    bundle, beta0, indicative = _reference_network(cell, synth, chain)
    bvm_sd = bvm_reference_sds(bundle, beta0, synth.data.noise_sd)
    normalized = ImportanceDraws(draws.values / scale, normalized=True,
                                 noise_sd=draws.noise_sd, n=n)
    try:
        std_mse_sd = spread_std_mse(normalized, bvm_sd, n)
    except DegenerateVarianceError:
        std_mse_sd = float("nan")

    return DiagnosticsReport(
        std_mse_f=std_mse_f,
        std_mse_psi=std_mse_psi,
        std_mse_sd=std_mse_sd,
        cvm=cvm,
        null_band=null_band,
        bvm_sd=bvm_sd.tolist(),
        indicative=indicative,
    )


def run_cell(cell: CellConfig) -> CellRecord:
    """
    运行一个单元

    采样失败或数值错误记为失败记录，不向上抛出。
    """
    record = CellRecord(kind=cell.kind, n=cell.n, P=cell.P,
                        replication=cell.replication, seed=cell.seed)
    logger.info("[%s] start", cell.cell_id)
    start = time.perf_counter()
    try:
        synth = gen_dataset(cell.generator, cell.mc_points)
        chain = hmc_sample(None, synth.data, cell.prior, cell.hmc, arch=cell.arch,
                            train_hidden=cell.train_hidden)
        draws = importance_draws(chain, synth.data.X, synth.data.noise_sd,
                                 normalized=cell.normalized, shards=cell.shards)
        band = simultaneous_band(draws, cell.alpha)
        result = select_variables(band)
        quality = selection_metrics(result, synth.A0)
        diag = _diagnose(cell, synth, chain, draws)
        scale = 1.0 if cell.normalized else float(cell.n)

        record.std_mse_f = diag.std_mse_f
        record.std_mse_psi = diag.std_mse_psi
        record.std_mse_sd = diag.std_mse_sd
        record.psi_mean = (draws.values.mean(axis=0) / scale).tolist()
        record.psi_sd = (draws.values.std(axis=0, ddof=1) / scale).tolist() if draws.M > 1 else []
        record.cvm = list(diag.cvm)
        record.cvm_null = {str(q): v for q, v in sorted(diag.null_band.quantiles.items())}
        record.coverage = band.covers(synth.true_importance * scale)
        record.fdr = quality.fdr
        record.power = quality.power
        record.exact_recovery = quality.exact_recovery
        record.selected = selected_names(result)
        record.accept_rate = chain.accept_rate
        record.divergent_fraction = chain.divergent_fraction
        record.indicative = diag.indicative
        record.diagnostics = diag
    except (SamplerFailure, NumericError, DegenerateVarianceError) as exc:
        record.status = "failed"
        record.error = exc.to_dict()
        logger.warning("[%s] %s", cell.cell_id, exc.message)
    record.wall_clock = time.perf_counter() - start
    logger.info("%s", record.to_log())
    return record


# ========== 实验 ==========

@dataclass
class ExperimentReport:
    records: List[CellRecord]
    config: Optional[ExperimentConfig] = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def failed(self) -> List[CellRecord]:
        return [r for r in self.records if not r.ok]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.to_row() for r in self.records])

    def to_csv(self, filepath: str):
        self.to_frame().to_csv(filepath, index=False)


def summarize(report: ExperimentReport) -> pd.DataFrame:
    """
    按 (kind, n, P) 汇总：std_MSE 取中位数，覆盖率/精确恢复率取均值
    """
    frame = report.to_frame()
    if frame.empty:
        return frame
    ok = frame[frame["status"] == "ok"]
    grouped = ok.groupby(["kind", "n", "P"], sort=True)
    summary = grouped.agg(
        std_mse_f=("std_mse_f", "median"),
        std_mse_psi=("std_mse_psi", "median"),
        std_mse_sd=("std_mse_sd", "median"),
        coverage=("coverage", "mean"),
        fdr=("fdr", "mean"),
        power=("power", "mean"),
        exact_recovery=("exact_recovery", "mean"),
        replications=("replication", "count"),
    )
    return summary.reset_index()


def _write_manifest(out_dir: str, payload: dict):
    path = os.path.join(out_dir, "manifest.json")
    tmp = path + ".partial"
    try:
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(payload, f, ensure_ascii=False, indent=2)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """
    运行整个网格

    单元由大小为 config.threads 的进程池执行，结果按网格顺序写出。
    同一配置重复运行会确定性地覆盖原有文件。
    """
    cells = config.cells()
    if not cells:
        raise ConfigError("empty grid")
    out_dir = config.output_dir
    cell_dir = os.path.join(out_dir, "cells")
    os.makedirs(cell_dir, exist_ok=True)
    logger.info("running %d cells (%d grid points × %d replications) into %s",
                len(cells), config.generator.size, config.replications, out_dir)

    if config.threads <= 1:
        records = [run_cell(cell) for cell in cells]
    else:
        with ProcessPoolExecutor(max_workers=config.threads) as executor:
            records = list(executor.map(run_cell, cells))

    report = ExperimentReport(records=records, config=config)
    manifest_path = os.path.join(out_dir, "manifest.json")
    if os.path.exists(manifest_path):
        os.remove(manifest_path)
    try:
        files = []
        for record in records:
            name = os.path.join("cells", record.cell_id + ".json")
            record.save(os.path.join(out_dir, name))
            files.append(name)
        report.to_csv(os.path.join(out_dir, "report.csv"))
        files.append("report.csv")
        _write_manifest(out_dir, {
            "version": __version__,
            "config": config.to_dict(),
            "config_hash": config.config_hash(),
            "n_records": len(records),
            "n_failed": len(report.failed),
            "files": files,
        })
    except OSError:
        logger.error("writing results to %s failed", out_dir)
        raise
    logger.info("experiment done: %d records, %d failed", len(records), len(report.failed))
    return report
