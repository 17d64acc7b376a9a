import numpy as np
import pytest

from varsel_engine.rng import derive_seed, stream_rng


def test_same_stream_same_draws():
    a = stream_rng(5, "covariates", 0).uniform(size=4)
    b = stream_rng(5, "covariates", 0).uniform(size=4)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("left, right", [
    (("covariates", 0), ("covariates", 1)),
    (("noise",), ("covariates",)),
    (("replication-0001",), ("replication-0002",)),
    (("hmc-chain-a-long-name",), ("hmc-chain-b-long-name",)),
])
def test_distinct_streams(left, right):
    assert not np.array_equal(stream_rng(5, *left).uniform(size=4), stream_rng(5, *right).uniform(size=4))
    assert derive_seed(5, *left) != derive_seed(5, *right)


def test_derived_seed_is_64_bit():
    seed = derive_seed(2 ** 64 - 1, "data", "neural", 3)
    assert 0 <= seed < 2 ** 64


def test_negative_stream_id():
    with pytest.raises(ValueError):
        stream_rng(0, -1)
