"""Central finite-difference checks for every differentiable unit."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import layers as L
from .masking import MaskSpec, generate_mask
from .network import ModelConfig, build_model, cross_entropy, model_backward
from .numkernel import Rng

STEP = 1e-5
TOLERANCE = 1e-6
# |analytic - numeric| is divided by max(|analytic|, |numeric|, SCALE_FLOOR) so
# entries whose true gradient is ~0 are judged on absolute error.
SCALE_FLOOR = 1e-3


def numeric_gradient(f: Callable[[], float], x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of ``f()`` with respect to ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = SCALE_FLOOR) -> float:
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _check(f, analytic: dict, arrays: dict, step: float) -> dict:
    return {name: relative_error(analytic[name], numeric_gradient(f, arr, step)) for name, arr in arrays.items()}


def check_conditional(rng: Rng, features=8, nodes=6, order=2, frames=7, batch=1, mask=None,
                      step: float = STEP) -> dict:
    params = L.ConditionalParams.init(rng, features, nodes, order, mask)
    params.bias[...] = rng.uniform(-0.5, 0.5, nodes)
    params.slope[...] = rng.uniform(0.05, 0.5, nodes)
    x = rng.normal((batch, features, frames))
    out_shape = (batch, nodes, frames - 2 * order)
    r = rng.normal(out_shape)

    def f():
        return float(np.sum(r * L.conditional_forward(x, params)[0]))

    _, cache = L.conditional_forward(x, params)
    grads = L.conditional_backward(params, cache, r)
    # perturbing a masked-out weight changes nothing, so both sides are 0 there
    return _check(f, grads, {"weights": params.weights, "bias": params.bias, "slope": params.slope,
                             "input": x}, step)


def check_dense(rng: Rng, fan_in=7, fan_out=5, batch=3, step: float = STEP) -> dict:
    params = L.DenseParams.init(rng, fan_in, fan_out)
    params.bias[...] = rng.uniform(-0.5, 0.5, fan_out)
    x = rng.normal((batch, fan_in))
    r = rng.normal((batch, fan_out))

    def f():
        return float(np.sum(r * L.dense_forward(x, params)[0]))

    _, cache = L.dense_forward(x, params)
    grads = L.dense_backward(params, cache, r)
    return _check(f, grads, {"weights": params.weights, "bias": params.bias, "slope": params.slope,
                             "input": x}, step)


def check_prelu(rng: Rng, size=20, step: float = STEP) -> dict:
    x = rng.normal(size)
    x[np.abs(x) < 10 * step] += 0.1
    slope = np.array([0.25])
    r = rng.normal(size)

    def f():
        return float(np.sum(r * L.prelu_forward(x, slope[0])))

    gx, gs = L.prelu_backward(x, slope[0], r)
    return _check(f, {"input": gx, "slope": np.atleast_1d(gs)}, {"input": x, "slope": slope}, step)


def check_pool(rng: Rng, mode: str, nodes=5, frames=4, batch=2, step: float = STEP) -> dict:
    x = rng.normal((batch, nodes, frames))
    out, cache = L.temporal_pool(x, mode)
    r = rng.normal(out.shape)

    def f():
        return float(np.sum(r * L.temporal_pool(x, mode)[0]))

    return _check(f, {"input": L.temporal_pool_backward(cache, r)}, {"input": x}, step)


def check_softmax_ce(rng: Rng, classes=4, step: float = STEP) -> dict:
    z = rng.normal(classes)
    target = int(rng.integers(classes))

    def f():
        return cross_entropy(L.softmax(z), target)

    analytic = L.softmax(z)
    analytic[target] -= 1.0
    return _check(f, {"logits": analytic}, {"logits": z}, step)


def tiny_model_config(seed: int = 0, pool: str = "mean", masked: bool = True) -> ModelConfig:
    mask = {"bandwidth": 3, "overlap": 1} if masked else None
    return ModelConfig(input_features=6, layers=[{"width": 5, "order": 1, "mask": mask}], extra_frames=2,
                       classes=3, pool=pool, dense_widths=[7, 6], dropout=[0.0, 0.0], seed=seed)


def check_model(rng: Rng, pool: str = "mean", batch: int = 2, step: float = STEP) -> dict:
    model = build_model(tiny_model_config(pool=pool), rng.spawn(0))
    for name, p in model.parameters().items():
        if not name.endswith("weights"):
            p[...] = rng.uniform(0.05, 0.4, p.shape) if name.endswith("slope") else rng.uniform(-0.3, 0.3, p.shape)
    x = rng.normal((batch, 6, model.geometry.q))
    y = rng.integers(3, batch)

    def f():
        return model_backward(model, x, y)[0]

    _, grads = model_backward(model, x, y)
    return _check(f, grads, model.parameters(), step)


def run_all(seed: int = 0, step: float = STEP) -> dict[str, float]:
    """Max relative error per unit type."""
    rng = Rng(seed)
    mask = generate_mask(MaskSpec(8, 6, 3, 1))
    suites = {
        "clnn": lambda r: check_conditional(r, step=step),
        "mclnn": lambda r: check_conditional(r, mask=mask, step=step),
        "dense": lambda r: check_dense(r, step=step),
        "prelu": lambda r: check_prelu(r, step=step),
        "pool_mean": lambda r: check_pool(r, "mean", step=step),
        "pool_max": lambda r: check_pool(r, "max", step=step),
        "pool_flatten": lambda r: check_pool(r, "flatten", step=step),
        "softmax_cross_entropy": lambda r: check_softmax_ce(r, step=step),
        "model": lambda r: check_model(r, step=step),
    }
    return {name: max(fn(rng.spawn(i)).values()) for i, (name, fn) in enumerate(suites.items())}
