"""Diffusion noise schedules: linear beta construction, zero-terminal-SNR
rescaling, the exact forward (noising) process, and sampling subsequences.

Schedules are kept in float64 regardless of model precision so cumulative
products do not drift, and are immutable after construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ParameterError, ShapeError

DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02

# Smallest allowed terminal sqrt(alpha_bar) under the epsilon parameterization:
# an exact zero makes the x0-from-epsilon inversion 0/0.  Pass clamp=0.0 to
# rescale_zero_terminal_snr when sampling with the v parameterization.
TERMINAL_CLAMP = 1e-6


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep diffusion coefficients with cached square roots."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sqrt_alpha_bar: np.ndarray
    sqrt_one_minus_alpha_bar: np.ndarray
    zero_terminal: bool = False
    beta_start: float = field(default=DEFAULT_BETA_START, compare=False)
    beta_end: float = field(default=DEFAULT_BETA_END, compare=False)

    def __post_init__(self):
        for arr in (
            self.beta,
            self.alpha,
            self.alpha_bar,
            self.sqrt_alpha_bar,
            self.sqrt_one_minus_alpha_bar,
        ):
            arr.setflags(write=False)


@dataclass(frozen=True)
class StepSubsequence:
    """Strictly increasing timestep indices ending at T-1."""

    indices: np.ndarray

    def __post_init__(self):
        self.indices.setflags(write=False)

    def __len__(self) -> int:
        return int(self.indices.size)


def _schedule_from_alpha_bar(
    alpha_bar: np.ndarray, zero_terminal: bool, beta_start: float, beta_end: float
) -> NoiseSchedule:
    alpha = np.empty_like(alpha_bar)
    alpha[0] = alpha_bar[0]
    alpha[1:] = alpha_bar[1:] / alpha_bar[:-1]
    beta = 1.0 - alpha
    return NoiseSchedule(
        T=int(alpha_bar.size),
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        sqrt_alpha_bar=np.sqrt(alpha_bar),
        sqrt_one_minus_alpha_bar=np.sqrt(1.0 - alpha_bar),
        zero_terminal=zero_terminal,
        beta_start=beta_start,
        beta_end=beta_end,
    )


def make_linear_schedule(
    T: int, beta_start: float = DEFAULT_BETA_START, beta_end: float = DEFAULT_BETA_END
) -> NoiseSchedule:
    """Linearly spaced beta over T steps with all derived coefficients."""
    if T < 2:
        raise ParameterError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(
        T=T,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        sqrt_alpha_bar=np.sqrt(alpha_bar),
        sqrt_one_minus_alpha_bar=np.sqrt(1.0 - alpha_bar),
        zero_terminal=False,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
    )


def rescale_zero_terminal_snr(
    s: NoiseSchedule, clamp: float = TERMINAL_CLAMP
) -> NoiseSchedule:
    """Affinely rescale sqrt(alpha_bar) so the terminal step carries zero
    signal while the first step is preserved, then clamp the terminal value.

    The map is s' = (s - s_T) * s_1 / (s_1 - s_T) applied elementwise; its
    fixed point is s_1 and it sends s_T to exactly 0.  A positive `clamp`
    (default, for the epsilon parameterization) floors the result; pass 0.0
    for the v parameterization, where an exactly-zero terminal is valid.
    """
    if s.zero_terminal:
        raise ParameterError("schedule is already rescaled to zero terminal SNR")
    if clamp < 0.0:
        raise ParameterError("clamp must be >= 0")
    sq = s.sqrt_alpha_bar
    s1, sT = sq[0], sq[-1]
    if s1 == sT:
        raise NumericError("degenerate schedule: first and terminal sqrt(alpha_bar) equal")
    rescaled = (sq - sT) * (s1 / (s1 - sT))
    if clamp > 0.0:
        rescaled = np.maximum(rescaled, clamp)
    alpha_bar = rescaled * rescaled
    return _schedule_from_alpha_bar(alpha_bar, True, s.beta_start, s.beta_end)


def forward_sample(s: NoiseSchedule, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """Exact forward process: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps.

    `t` is a single index or, for a batch, an array of shape (N,) matched
    against leading-axis-N tensors.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ParameterError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    tv = np.asarray(t)
    if np.any(tv < 0) or np.any(tv >= s.T):
        raise ParameterError(f"timestep {t} out of range [0, {s.T})")
    if tv.ndim == 0:
        a = s.sqrt_alpha_bar[int(tv)]
        b = s.sqrt_one_minus_alpha_bar[int(tv)]
    else:
        if tv.shape[0] != x0.shape[0]:
            raise ParameterError("per-sample t must match the batch axis")
        extra = (1,) * (x0.ndim - 1)
        a = s.sqrt_alpha_bar[tv].reshape(tv.shape[0], *extra)
        b = s.sqrt_one_minus_alpha_bar[tv].reshape(tv.shape[0], *extra)
    return (a * x0 + b * eps).astype(x0.dtype, copy=False)


def make_subsequence(s: NoiseSchedule, n: int) -> StepSubsequence:
    """n timestep indices evenly spaced over [0, T-1], terminal included."""
    if not (1 <= n <= s.T):
        raise ParameterError(f"subsequence length {n} out of range [1, {s.T}]")
    if n == 1:
        idx = np.array([s.T - 1], dtype=np.int64)
    else:
        idx = np.round(np.linspace(0.0, s.T - 1, n)).astype(np.int64)
    return StepSubsequence(indices=idx)


# ---------------------------------------------------------------------------
# checkpoint serialization (64-bit little-endian beta + JSON descriptor)


def schedule_descriptor(s: NoiseSchedule) -> dict:
    return {
        "T": s.T,
        "beta_start": s.beta_start,
        "beta_end": s.beta_end,
        "zero_terminal": s.zero_terminal,
    }


def schedule_to_bytes(s: NoiseSchedule) -> bytes:
    return s.beta.astype("<f8").tobytes()


def schedule_from_bytes(desc: dict, raw: bytes) -> NoiseSchedule:
    beta = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if beta.size != desc["T"]:
        raise ShapeError(f"schedule blob has {beta.size} betas, descriptor says {desc['T']}")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(
        T=int(desc["T"]),
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        sqrt_alpha_bar=np.sqrt(alpha_bar),
        sqrt_one_minus_alpha_bar=np.sqrt(1.0 - alpha_bar),
        zero_terminal=bool(desc["zero_terminal"]),
        beta_start=float(desc["beta_start"]),
        beta_end=float(desc["beta_end"]),
    )
