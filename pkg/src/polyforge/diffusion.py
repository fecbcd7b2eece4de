"""DDPM training loss, ancestral sampling over step subsequences,
parameterization conversions, and EMA maintenance.

The denoiser enters every function as a callable `denoise_fn(x, t)` acting on
(N, C, H, W) batches, so the same code paths serve plain inference and
gradient tracing (engine Vars pass straight through the loss arithmetic).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .denoiser import engine as eng
from .errors import DataError, NumericError, ParameterError
from .schedule import TERMINAL_CLAMP, NoiseSchedule, StepSubsequence, forward_sample

PREDICTION_KINDS = ("epsilon", "v")

# tolerance on the [-1, 1] input range for the training loss
_RANGE_TOL = 1e-3


def _check_kind(kind: str) -> None:
    if kind not in PREDICTION_KINDS:
        raise ParameterError(f"prediction kind must be one of {PREDICTION_KINDS}, got {kind!r}")


@dataclass
class EmaState:
    """Exponential moving average of a parameter set."""

    shadow: dict[str, np.ndarray]
    decay: float

    def __post_init__(self):
        if not (0.0 <= self.decay <= 1.0):
            raise ParameterError(f"EMA decay must be in [0, 1], got {self.decay}")


def ema_init(params: dict[str, np.ndarray], decay: float = 0.9999) -> EmaState:
    return EmaState({k: v.copy() for k, v in params.items()}, decay)


def ema_update(ema: EmaState, params: dict[str, np.ndarray]) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * params, elementwise."""
    if set(ema.shadow) != set(params):
        raise ParameterError("EMA shadow and parameters name sets differ")
    d = ema.decay
    new = {}
    for k, v in params.items():
        sh = ema.shadow[k]
        if sh.shape != v.shape:
            raise ParameterError(f"EMA shape mismatch for {k!r}: {sh.shape} vs {v.shape}")
        new[k] = d * sh + (1.0 - d) * v
    return EmaState(new, d)


def v_target(s: NoiseSchedule, t, x0: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Velocity mixture v = sqrt(ab)*eps - sqrt(1-ab)*x0."""
    tv = np.asarray(t)
    if tv.ndim == 0:
        a = s.sqrt_alpha_bar[int(tv)]
        b = s.sqrt_one_minus_alpha_bar[int(tv)]
    else:
        extra = (1,) * (x0.ndim - 1)
        a = s.sqrt_alpha_bar[tv].reshape(-1, *extra)
        b = s.sqrt_one_minus_alpha_bar[tv].reshape(-1, *extra)
    return (a * eps - b * x0).astype(x0.dtype, copy=False)


def convert_prediction(
    kind: str, s: NoiseSchedule, t: int, x_t: np.ndarray, model_out, clip_x0: bool = True
):
    """Map the network output to (eps_hat, x0_hat) at timestep t.

    Works on plain arrays only (sampling never needs gradients).  Under the
    epsilon kind a terminal sqrt(alpha_bar) below the schedule clamp is a
    numeric error: the x0 inversion would divide by ~0.
    """
    _check_kind(kind)
    if not (0 <= t < s.T):
        raise ParameterError(f"timestep {t} out of range [0, {s.T})")
    model_out = np.asarray(model_out)
    a = float(s.sqrt_alpha_bar[t])
    b = float(s.sqrt_one_minus_alpha_bar[t])
    if kind == "epsilon":
        if a < TERMINAL_CLAMP:
            raise NumericError(
                f"sqrt(alpha_bar[{t}])={a:.3e} below terminal clamp; "
                "epsilon parameterization cannot invert x0 here"
            )
        eps_hat = model_out
        x0_hat = (x_t - b * eps_hat) / a
    else:
        x0_hat = a * x_t - b * model_out
        eps_hat = b * x_t + a * model_out
    if clip_x0:
        x0_hat = np.clip(x0_hat, -1.0, 1.0)
    return eps_hat, x0_hat


def training_loss(
    denoise_fn: Callable,
    s: NoiseSchedule,
    batch: np.ndarray,
    rng: np.random.Generator,
    kind: str = "epsilon",
):
    """Simplified diffusion loss: MSE between the injected noise (or its
    v-mixture) and the prediction, with t uniform per batch element and the
    noise applied to all channels including the mask channel.

    Returns a float when `denoise_fn` works on arrays, or an engine Var when
    it traces gradients.
    """
    _check_kind(kind)
    batch = np.asarray(batch)
    if batch.ndim != 4:
        raise ParameterError(f"batch must be (N, C, H, W), got {batch.shape}")
    lo, hi = float(batch.min()), float(batch.max())
    if lo < -1.0 - _RANGE_TOL or hi > 1.0 + _RANGE_TOL:
        raise DataError(
            f"batch values span [{lo:.3f}, {hi:.3f}]; inputs must be scaled to [-1, 1]"
        )
    n = batch.shape[0]
    t = rng.integers(0, s.T, size=n)
    eps = rng.standard_normal(batch.shape).astype(batch.dtype)
    x_t = forward_sample(s, batch, t, eps)
    target = eps if kind == "epsilon" else v_target(s, t, batch, eps)
    pred = denoise_fn(x_t, t)
    if isinstance(pred, eng.Var):
        d = eng.sub(pred, target)
        return eng.mean(eng.mul(d, d))
    d = pred - target
    return float((d * d).mean())


def _strided_coeffs(s: NoiseSchedule, sub: StepSubsequence):
    """Treat the subsequence as a shorter schedule: effective alpha between
    consecutive kept indices is the product of the skipped alphas."""
    idx = sub.indices
    ab = s.alpha_bar[idx]
    ab_prev = np.concatenate([[1.0], ab[:-1]])
    alpha_eff = ab / ab_prev
    beta_eff = 1.0 - alpha_eff
    # DDPM posterior variance; zero at the first kept index (final step)
    post_var = beta_eff * (1.0 - ab_prev) / (1.0 - ab)
    post_var[0] = 0.0
    return ab, ab_prev, alpha_eff, beta_eff, post_var


def ddpm_sample_batch(
    denoise_fn: Callable,
    s: NoiseSchedule,
    sub: StepSubsequence,
    n: int,
    channels: int,
    spatial_shape: tuple[int, int],
    cond_mask: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    kind: str = "epsilon",
    clip_x0: bool = True,
    dtype=np.float32,
) -> np.ndarray:
    """Ancestral DDPM sampling of `n` independent chains, advanced together.

    Per-chain noise comes from Generators spawned one per sample off `rng`,
    so sample i depends only on the i-th spawned child: results do not change
    with batch splitting, and sample 0 equals a single-sample run on the same
    rng.  Returns (n, channels, H, W); the last channel is the mask channel.
    When `cond_mask` is given -- (H, W) / (1, H, W) shared, or (n, 1, H, W)
    per sample -- the mask channel is overwritten after every step with the
    forward-noised conditioning mask at the step's timestep, and with the
    clean mask once sampling finishes.
    """
    _check_kind(kind)
    if rng is None:
        raise ParameterError("rng is required for sampling")
    hh, ww = spatial_shape
    if cond_mask is not None:
        cond_mask = np.asarray(cond_mask, dtype=dtype)
        if cond_mask.shape[-2:] != (hh, ww) or cond_mask.size not in (hh * ww, n * hh * ww):
            raise ParameterError(
                f"cond_mask shape {cond_mask.shape} incompatible with "
                f"{n} samples at {spatial_shape}"
            )
        if cond_mask.ndim <= 3:
            cond_mask = np.broadcast_to(cond_mask.reshape(-1, hh, ww), (n, 1, hh, ww))
        else:
            cond_mask = cond_mask.reshape(n, 1, hh, ww)
    idx = sub.indices
    ab, ab_prev, alpha_eff, beta_eff, post_var = _strided_coeffs(s, sub)
    chains = rng.spawn(n)

    def draw(shape_one):
        return np.stack([g.standard_normal(shape_one).astype(dtype) for g in chains])

    x = draw((channels, hh, ww))
    if cond_mask is not None:
        t_hi = int(idx[-1])
        noise = draw((1, hh, ww))
        x[:, -1:] = forward_sample(s, cond_mask, t_hi, noise)

    for k in range(len(idx) - 1, -1, -1):
        t = int(idx[k])
        t_vec = np.full(n, t, dtype=np.int64)
        pred = denoise_fn(x, t_vec)
        _, x0_hat = convert_prediction(kind, s, t, x, pred, clip_x0=clip_x0)
        abk, abp = float(ab[k]), float(ab_prev[k])
        bk = float(beta_eff[k])
        coef_x0 = np.sqrt(abp) * bk / (1.0 - abk)
        coef_xt = np.sqrt(alpha_eff[k]) * (1.0 - abp) / (1.0 - abk)
        x = (coef_x0 * x0_hat + coef_xt * x).astype(dtype, copy=False)
        if k > 0:
            x = x + np.sqrt(post_var[k]).astype(dtype) * draw((channels, hh, ww))
            if cond_mask is not None:
                t_prev = int(idx[k - 1])
                noise = draw((1, hh, ww))
                x[:, -1:] = forward_sample(s, cond_mask, t_prev, noise)
        elif cond_mask is not None:
            x[:, -1:] = cond_mask
    return x


def ddpm_sample(
    denoise_fn: Callable,
    s: NoiseSchedule,
    sub: StepSubsequence,
    channels: int,
    spatial_shape: tuple[int, int],
    cond_mask: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    kind: str = "epsilon",
    clip_x0: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample one image+mask pair; the mask channel is the last channel.

    Returns (image_channels (C-1, H, W), mask_channel (1, H, W)).
    Deterministic given the rng seed.
    """
    out = ddpm_sample_batch(
        denoise_fn, s, sub, 1, channels, spatial_shape, cond_mask, rng, kind, clip_x0
    )[0]
    return out[:-1], out[-1:]
