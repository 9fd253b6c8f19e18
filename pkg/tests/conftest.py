import numpy as np
import pytest
from hypothesis import settings

from mergeguard.activations import Kind
from mergeguard.layers import Conv2d, Dense, ParametricActivation
from mergeguard.merge import MergeableBlock

settings.register_profile("repo", deadline=None, max_examples=40)
settings.load_profile("repo")


def random_dense_block(rng, n_in, n_hidden, n_out, alpha=1.0, kind=Kind.PRELU, dtype=np.float64, zero_bias=False):
    first = Dense(rng.standard_normal((n_hidden, n_in)).astype(dtype) / np.sqrt(n_in),
                  np.zeros(n_hidden, dtype) if zero_bias else rng.standard_normal(n_hidden).astype(dtype))
    second = Dense(rng.standard_normal((n_out, n_hidden)).astype(dtype) / np.sqrt(n_hidden),
                   rng.standard_normal(n_out).astype(dtype))
    act = ParametricActivation(kind, pinned=alpha)
    return MergeableBlock(first, act, second, 0)


def random_conv_block(rng, c_in, c_hidden, c_out, k1, k2, padding=0, alpha=1.0, dtype=np.float64):
    first = Conv2d(rng.standard_normal((c_hidden, c_in, k1, k1)).astype(dtype) / k1,
                   rng.standard_normal(c_hidden).astype(dtype), padding=padding)
    second = Conv2d(rng.standard_normal((c_out, c_hidden, k2, k2)).astype(dtype) / k2,
                    rng.standard_normal(c_out).astype(dtype))
    return MergeableBlock(first, ParametricActivation(Kind.PRELU, pinned=alpha), second, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
