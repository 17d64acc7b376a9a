"""
随机数流 (RNG Streams)

基于计数器的 Philox 生成器，按 (seed, stream...) 派生独立流，
保证列生成顺序、重复实验、并行副本之间互不干扰。
"""

import hashlib
from typing import Union

import numpy as np


StreamKey = Union[int, str]


def _entropy(key: StreamKey) -> int:
    """流标识转为非负整数"""
    if isinstance(key, str):
        # SHA-256 摘要，与 Python 的 hash 随机化无关
        return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest(), "little")
    if key < 0:
        raise ValueError(f"stream id must be nonnegative, got {key}")
    return int(key)


def seed_sequence(seed: int, *stream: StreamKey) -> np.random.SeedSequence:
    return np.random.SeedSequence([_entropy(seed), *[_entropy(s) for s in stream]])


def stream_rng(seed: int, *stream: StreamKey) -> np.random.Generator:
    """
    获取命名随机流

    Args:
        seed: 基础种子 (64位无符号)
        stream: 流标识，如 ("covariates", 0)

    Returns:
        Philox 生成器
    """
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *stream)))


def derive_seed(seed: int, *coords: StreamKey) -> int:
    """由基础种子和坐标派生子种子（64位）"""
    state = seed_sequence(seed, *coords).generate_state(1, dtype=np.uint64)
    return int(state[0])
