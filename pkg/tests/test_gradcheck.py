from __future__ import annotations

import pytest

from dst_lab.neural.gradcheck import grad_check
from dst_lab.neural.pipeline import CompressorConfig

CONFIG = CompressorConfig(d_model=8, n_heads=2, n_queries=2, seed=0)


def test_linear_readout_gradients_tight():
    # finite-difference oracle; a linear map should agree almost exactly
    result = grad_check("readout", (5, 8), 1e-5, CONFIG)
    assert result.max_relative_error < 1e-7


def test_compressor_gradients_within_tolerance():
    result = grad_check("compressor", (5, 8), 1e-5, CONFIG)
    assert result.max_relative_error < 1e-4


def test_connector_gradients_within_tolerance():
    result = grad_check("connector", (4, 6), 1e-5, CONFIG)
    assert result.max_relative_error < 1e-4


def test_eps_zero_rejected():
    with pytest.raises(ValueError, match="eps"):
        grad_check("readout", (3, 8), 0.0, CONFIG)


def test_unknown_module_rejected():
    with pytest.raises(ValueError, match="unknown module"):
        grad_check("encoder", (3, 8), 1e-5, CONFIG)


def test_compressor_requires_matching_dim():
    with pytest.raises(ValueError, match="must equal d_model"):
        grad_check("compressor", (3, 4), 1e-5, CONFIG)
