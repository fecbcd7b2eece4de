"""U-Net noise predictor: parameters, forward pass, and gradient substrate."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from ..errors import NumericError, ParameterError
from . import engine
from .engine import Var, backward
from .unet import (
    DenoiserConfig,
    DenoiserParams,
    apply,
    build_denoiser,
    param_shapes,
    sinusoidal_embedding,
)

__all__ = [
    "DenoiserConfig",
    "DenoiserParams",
    "build_denoiser",
    "denoise",
    "gradient",
    "apply",
    "param_shapes",
    "sinusoidal_embedding",
    "engine",
]


def denoise(params: DenoiserParams, x: np.ndarray, t, s) -> np.ndarray:
    """Predict noise for one (C, H, W) sample or a (N, C, H, W) batch at
    timestep(s) `t` of schedule `s`.  Pure inference; no graph is kept."""
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    tv = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if tv.size == 1 and x.shape[0] > 1:
        tv = np.full(x.shape[0], int(tv[0]), dtype=np.int64)
    if tv.min() < 0 or tv.max() >= s.T:
        raise ParameterError(f"timestep out of range [0, {s.T})")
    out = apply(params.tensors, params.config, x, tv).value
    return out[0] if single else out


def gradient(
    params: DenoiserParams | Mapping[str, np.ndarray],
    loss_closure: Callable[[dict[str, Var]], Var],
) -> tuple[dict[str, np.ndarray], float]:
    """Reverse-mode gradients of a scalar loss with respect to every tensor.

    `loss_closure` receives {name: Var} and must build the loss through
    engine ops.  Tensors the closure never touches get exact zero gradients.
    Returns (gradients, loss value).
    """
    tensors = params.tensors if isinstance(params, DenoiserParams) else dict(params)
    pvars = {k: Var(v, requires=True) for k, v in tensors.items()}
    loss = loss_closure(pvars)
    if not isinstance(loss, Var) or loss.value.size != 1:
        raise ParameterError("loss_closure must return a scalar engine Var")
    if not np.isfinite(loss.value):
        for name, v in tensors.items():
            if not np.all(np.isfinite(v)):
                raise NumericError(f"non-finite loss; parameter {name!r} is non-finite")
        raise NumericError("loss is non-finite")
    backward(loss)
    grads = {
        k: (v.grad if v.grad is not None else np.zeros_like(v.value))
        for k, v in pvars.items()
    }
    return grads, float(loss.value)
