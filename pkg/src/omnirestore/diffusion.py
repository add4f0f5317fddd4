"""Coarse-to-fine diffusion: schedule, forward corruption, reverse sampling.

The reverse process runs from step T down to 1 over a resolution pyramid:
early (large-t) steps operate on area-downsampled tensors, and the state is
bilinearly upsampled whenever the scale factor between neighboring steps
drops. The denoiser predicts the clean image estimate; the reverse-step
mean combines that estimate with the carried state as

    y_{t-1} = sqrt(abar_{t-1}) * f(up(y_t)) + (1-abar_{t-1})/(1-abar_t) * up(y_t)

with variance beta_t * (1-abar_{t-1}) / (1-abar_t) and abar_0 defined as 1
exactly, which makes the final step deterministic and equal to the
denoiser output.

The single-step forward kernel scales by sqrt(1-beta_t) so that iterating
it from a clean image agrees in distribution with the closed form
sqrt(abar_t) * y0 + sqrt(1-abar_t) * eps; both forms are provided.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .engine import Tensor, ops
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step corruption rates and pyramid scale factors, indexed t=1..T."""

    beta: np.ndarray
    alpha_bar: np.ndarray
    scales: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.beta)

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.steps:
            raise ConfigError(f"step {t} outside schedule range 1..{self.steps}")

    def beta_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.beta[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        """abar_t, with abar_0 defined as exactly 1."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bar[t - 1])

    def scale_at(self, t: int) -> int:
        """Resolution divisor r_t, with r_0 = 1 (base resolution)."""
        if t == 0:
            return 1
        self._check_t(t)
        return int(self.scales[t - 1])


def make_schedule(steps: int, beta_start: float, beta_end: float,
                  pyramid_levels: Sequence[tuple[int, int]]) -> NoiseSchedule:
    """Linear beta schedule plus a staircase of resolution factors.

    ``pyramid_levels`` lists (step_count, scale_factor) pairs from the fine
    end (t=1) upward; counts must sum to ``steps``, factors must be
    non-decreasing with consecutive ratios of 1 or 2, and the first factor
    must be 1 or 2 so the last reverse step lands at base resolution.
    """
    if steps < 2:
        raise ConfigError(f"schedule needs at least 2 steps, got {steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(
            f"beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, steps)
    alpha_bar = np.cumprod(1.0 - beta)

    scales: list[int] = []
    for count, factor in pyramid_levels:
        if count < 1:
            raise ConfigError(f"pyramid level count must be positive, got {count}")
        if factor < 1:
            raise ConfigError(f"pyramid factor must be >= 1, got {factor}")
        scales.extend([int(factor)] * int(count))
    if len(scales) != steps:
        raise ConfigError(
            f"pyramid levels cover {len(scales)} steps, schedule has {steps}")
    prev = 1
    for r in scales:
        if r % prev != 0 or r // prev not in (1, 2):
            raise ConfigError(
                f"consecutive scale ratio {r}/{prev} not in {{1, 2}}")
        prev = r

    sched = NoiseSchedule(beta=beta, alpha_bar=alpha_bar, scales=np.asarray(scales))
    _validate_alpha_bar(sched)
    return sched


def _validate_alpha_bar(s: NoiseSchedule) -> None:
    ab = s.alpha_bar
    if np.any(ab <= 0.0) or np.any(ab >= 1.0):
        raise ConfigError("alpha_bar left (0, 1)")
    if np.any(np.diff(ab) >= 0.0):
        raise ConfigError("alpha_bar must be strictly decreasing")


def _match_resolution(name: str, got: tuple, want: tuple) -> None:
    if got != want:
        raise ShapeError(f"{name}: shape {got} does not match expected {want}")


def q_step(y_prev: Tensor, t: int, schedule: NoiseSchedule, noise: Tensor) -> Tensor:
    """One forward corruption step from resolution r_{t-1} to r_t.

    y_t = sqrt(1 - beta_t) * down(y_{t-1}) + sqrt(beta_t) * noise.
    """
    beta_t = schedule.beta_at(t)
    ratio = schedule.scale_at(t) // schedule.scale_at(t - 1)
    y_down = ops.resize_area(y_prev, ratio)
    _match_resolution("q_step noise", noise.shape, y_down.shape)
    return (ops.mul_scalar(y_down, math.sqrt(1.0 - beta_t))
            + ops.mul_scalar(noise, math.sqrt(beta_t)))


def q_sample(y0: Tensor, t: int, schedule: NoiseSchedule, noise: Tensor) -> Tensor:
    """Closed-form corruption of a clean image straight to step t.

    y_t = sqrt(abar_t) * down(y0, r_t) + sqrt(1 - abar_t) * noise.
    """
    ab_t = schedule.alpha_bar_at(t)
    y_down = ops.resize_area(y0, schedule.scale_at(t))
    _match_resolution("q_sample noise", noise.shape, y_down.shape)
    return (ops.mul_scalar(y_down, math.sqrt(ab_t))
            + ops.mul_scalar(noise, math.sqrt(1.0 - ab_t)))


def p_step(y_t: Tensor, t: int, denoise: Callable[[Tensor, int], Tensor],
           schedule: NoiseSchedule, rng: Optional[np.random.Generator] = None,
           deterministic: bool = True) -> Tensor:
    """One reverse step t -> t-1, upsampling across pyramid boundaries."""
    if t < 1:
        raise ConfigError(f"reverse step needs t >= 1, got {t}")
    beta_t = schedule.beta_at(t)
    ab_t = schedule.alpha_bar_at(t)
    ab_prev = schedule.alpha_bar_at(t - 1)
    ratio = schedule.scale_at(t) // schedule.scale_at(t - 1)

    y_up = ops.resize_bilinear(y_t, float(ratio)) if ratio != 1 else y_t
    x0_hat = denoise(y_up, t)
    _match_resolution("denoiser output", x0_hat.shape, y_up.shape)

    carry = (1.0 - ab_prev) / (1.0 - ab_t)
    mean = (ops.mul_scalar(x0_hat, math.sqrt(ab_prev))
            + ops.mul_scalar(y_up, carry))
    variance = beta_t * (1.0 - ab_prev) / (1.0 - ab_t)
    if deterministic or variance == 0.0:
        return mean
    if rng is None:
        raise ConfigError("stochastic reverse step needs a random generator")
    noise = rng.standard_normal(mean.shape).astype(mean.data.dtype)
    return mean + ops.mul_scalar(Tensor(noise), math.sqrt(variance))


@dataclass(frozen=True)
class StepTrace:
    """Shape bookkeeping for one reverse step (state entering the step)."""

    t: int
    scale: int
    shape: tuple


def sample(base_shape: tuple, denoise: Callable[[Tensor, int], Tensor],
           schedule: NoiseSchedule, seed: int,
           deterministic: bool = True,
           dtype=np.float32) -> tuple[Tensor, list[StepTrace]]:
    """Full reverse pass from seeded noise to a restored image.

    ``base_shape`` is the [N, C, H, W] output shape; H and W must be
    divisible by the coarsest pyramid factor. Returns the final tensor,
    clamped to [0, 1], together with the per-step resolution trace.
    """
    n, c, h, w = base_shape
    r_top = schedule.scale_at(schedule.steps)
    if h % r_top or w % r_top:
        raise ShapeError(
            f"base resolution {h}x{w} not divisible by coarsest factor {r_top}")
    rng = np.random.Generator(np.random.PCG64(seed))
    y = Tensor(rng.standard_normal((n, c, h // r_top, w // r_top)).astype(dtype))

    trace: list[StepTrace] = []
    for t in range(schedule.steps, 0, -1):
        r_t = schedule.scale_at(t)
        expected = (n, c, h // r_t, w // r_t)
        _match_resolution(f"state at step {t}", y.shape, expected)
        trace.append(StepTrace(t=t, scale=r_t, shape=y.shape))
        y = p_step(y, t, denoise, schedule, rng=rng, deterministic=deterministic)
    _match_resolution("final state", y.shape, (n, c, h, w))
    return Tensor(np.clip(y.data, 0.0, 1.0)), trace
