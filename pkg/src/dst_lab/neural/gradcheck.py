"""Finite-difference verification of the hand-rolled backward passes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pipeline import CompressorConfig, Compressor, Connector, Readout

_CHECKABLE = ("connector", "compressor", "readout")


@dataclass(frozen=True)
class GradCheckResult:
    module: str
    input_shape: tuple[int, int]
    max_relative_error: float
    worst_param: str


def _build(module: str, input_shape: tuple[int, int], config: CompressorConfig):
    rows, cols = input_shape
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 99]))
    if module == "connector":
        net = Connector(cols, config, rng)
        x = rng.standard_normal((1, rows, cols))
    elif module == "compressor":
        if cols != config.d_model:
            raise ValueError(f"compressor input cols {cols} must equal d_model {config.d_model}")
        net = Compressor(config, rng)
        x = rng.standard_normal((1, rows, cols))
    elif module == "readout":
        net = Readout(rows, cols, n_heads=2, n_classes=3, rng=rng)
        x = rng.standard_normal((1, rows, cols))
    else:
        raise ValueError(f"unknown module {module!r}; expected one of {_CHECKABLE}")
    return net, x


def grad_check(
    module: str,
    input_shape: tuple[int, int],
    eps: float = 1e-5,
    config: CompressorConfig | None = None,
) -> GradCheckResult:
    """Max relative error between analytic and central-difference gradients.

    The scalar loss is the sum of the module outputs. The relative error of a
    parameter entry is |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    config = config or CompressorConfig(d_model=8, n_heads=2, n_queries=2, seed=0)
    net, x = _build(module, input_shape, config)

    net.zero_grads()
    out = net.forward(x)
    net.backward(np.ones_like(out))
    analytic = net.grads()

    worst = 0.0
    worst_param = ""
    for name, param in net.params().items():
        flat = param.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            f_plus = float(net.forward(x).sum())
            flat[i] = original - eps
            f_minus = float(net.forward(x).sum())
            flat[i] = original
            numeric[i] = (f_plus - f_minus) / (2.0 * eps)
        a = analytic[name].reshape(-1)
        denom = np.maximum(1e-8, np.abs(a) + np.abs(numeric))
        rel = np.abs(a - numeric) / denom
        idx = int(np.argmax(rel))
        if rel[idx] > worst:
            worst = float(rel[idx])
            worst_param = f"{name}[{idx}]"
    return GradCheckResult(module, input_shape, worst, worst_param)


def grad_check_suite(
    eps: float = 1e-5, config: CompressorConfig | None = None
) -> list[GradCheckResult]:
    """The standard verification battery: three shapes per checkable module."""
    config = config or CompressorConfig(d_model=8, n_heads=2, n_queries=2, seed=0)
    d = config.d_model
    results = []
    for shape in ((3, 4), (5, 8), (7, 6)):
        results.append(grad_check("connector", shape, eps, config))
    for n_queries in (1, 10):
        cfg = CompressorConfig(
            d_model=d, n_heads=config.n_heads, n_queries=n_queries, seed=config.seed
        )
        for shape in ((2, d), (5, d), (9, d)):
            results.append(grad_check("compressor", shape, eps, cfg))
    for shape in ((5, 8), (3, 8), (1, 8)):
        results.append(grad_check("readout", shape, eps, config))
    return results
