"""Diffusion schedule and forward/reverse transition math.

The forward chain corrupts a mel-spectrogram x_0 step by step,

    x_t = sqrt(1 - beta_t) * x_{t-1} + sqrt(beta_t) * eps,

which composes into the closed form x_t = sqrt(abar_t) * x_0 +
sqrt(1 - abar_t) * eps with abar_t = prod_{s<=t} (1 - beta_s).  The
reverse direction samples x_{t-1} from the Gaussian posterior
q(x_{t-1} | x_t, x_0) with x_0 replaced by the generator's clean-mel
prediction.  Timesteps are 1-based: t runs over 1..T and abar_0 == 1.

All randomness is passed in explicitly (noise tensors or a
torch.Generator); nothing here touches global RNG state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ConfigError, NumericalError

DEFAULT_SCHEDULE = "vp:0.1:40"


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step noise levels and reverse-posterior coefficients.

    Arrays have length T and are indexed by t-1.  The posterior mean is
    ``c0[t] * x0 + ct[t] * x_t`` with variance ``var[t]``; the t=1 row is
    (1, 0, 0) exactly, so the final reverse step is deterministic.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_mean_c0: np.ndarray
    posterior_mean_ct: np.ndarray
    posterior_var: np.ndarray

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        # abar_0 := 1 makes the t=1 posterior well-formed
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])


def _parse_spec(spec, T: int) -> np.ndarray:
    """Turn a schedule spec into a beta array of length T.

    Accepts "vp:BETA_MIN:BETA_MAX", "list:b1,b2,...", or a plain
    sequence of floats.
    """
    if isinstance(spec, str):
        parts = spec.split(":")
        if parts[0] == "vp":
            if len(parts) != 3:
                raise ConfigError(f"bad schedule spec {spec!r}, expected vp:BETA_MIN:BETA_MAX")
            bmin, bmax = float(parts[1]), float(parts[2])
            t = np.arange(1, T + 1, dtype=np.float64)
            betas = 1.0 - np.exp(-bmin / T - (bmax - bmin) * (2.0 * t - 1.0) / (2.0 * T * T))
        elif parts[0] == "list":
            if len(parts) != 2:
                raise ConfigError(f"bad schedule spec {spec!r}, expected list:b1,b2,...")
            betas = np.array([float(v) for v in parts[1].split(",")], dtype=np.float64)
        else:
            raise ConfigError(f"unknown schedule family {parts[0]!r}")
    elif isinstance(spec, Sequence):
        betas = np.asarray(spec, dtype=np.float64)
    else:
        raise ConfigError(f"schedule spec must be a string or a sequence, got {type(spec)}")
    if betas.shape != (T,):
        raise ConfigError(f"schedule produced {betas.shape[0]} betas, expected T={T}")
    return betas


def build_schedule(T: int, spec=DEFAULT_SCHEDULE) -> DiffusionSchedule:
    """Build the noise schedule and reverse-posterior coefficients."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    betas = _parse_spec(spec, T)
    if np.any(betas <= 0.0) or np.any(betas >= 1.0):
        raise ConfigError(f"betas must lie in (0, 1), got {betas.tolist()}")

    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    abar_prev = np.concatenate(([1.0], alpha_bars[:-1]))

    c0 = np.sqrt(abar_prev) * betas / (1.0 - alpha_bars)
    ct = np.sqrt(alphas) * (1.0 - abar_prev) / (1.0 - alpha_bars)
    var = (1.0 - abar_prev) * betas / (1.0 - alpha_bars)
    # abar_0 == 1 forces (1, 0, 0) at t=1; pinned so the identity holds to
    # the last ulp rather than up to round-off of beta_1 / (1 - abar_1).
    c0[0], ct[0], var[0] = 1.0, 0.0, 0.0

    return DiffusionSchedule(
        T=T,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        posterior_mean_c0=c0,
        posterior_mean_ct=ct,
        posterior_var=var,
    )


def format_schedule_table(schedule: DiffusionSchedule) -> str:
    """Plain-text table of t, beta, alpha, alpha_bar, posterior variance."""
    lines = [f"{'t':>3} {'beta_t':>14} {'alpha_t':>14} {'alpha_bar_t':>14} {'post_var_t':>14}"]
    for t in range(1, schedule.T + 1):
        lines.append(
            f"{t:>3} {schedule.betas[t - 1]:>14.8f} {schedule.alphas[t - 1]:>14.8f} "
            f"{schedule.alpha_bars[t - 1]:>14.8f} {schedule.posterior_var[t - 1]:>14.8f}"
        )
    return "\n".join(lines)


@dataclass(frozen=True)
class NoisedSample:
    """A forward-process draw: x_t together with the noise that made it."""

    x_t: torch.Tensor
    t: int | torch.Tensor
    epsilon: torch.Tensor


def _check_t(t, T: int) -> None:
    bad = (t < 1 or t > T) if isinstance(t, int) else bool((t < 1).any() or (t > T).any())
    if bad:
        raise ValueError(f"timestep {t} outside [1, {T}]")


def _coef(values: np.ndarray, t, x: torch.Tensor):
    """Coefficient at timestep t, broadcastable against x.

    ``values`` has a leading slot for t=0.  For int t this is an exact
    python float; for a batch of timesteps it is a gathered tensor shaped
    (B, 1, ..., 1).
    """
    if isinstance(t, int):
        return float(values[t])
    gathered = torch.as_tensor(values, dtype=x.dtype, device=x.device)[t]
    return gathered.reshape(-1, *([1] * (x.dim() - 1)))


def _with_t0(arr: np.ndarray, t0: float) -> np.ndarray:
    return np.concatenate(([t0], arr))


def q_step(x_prev: torch.Tensor, t, schedule: DiffusionSchedule, noise: torch.Tensor) -> torch.Tensor:
    """One forward transition: sqrt(1-beta_t)*x_{t-1} + sqrt(beta_t)*noise."""
    if noise.shape != x_prev.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != input shape {tuple(x_prev.shape)}")
    _check_t(t, schedule.T)
    betas = _with_t0(schedule.betas, math.nan)
    b = _coef(betas, t, x_prev)
    if isinstance(b, float):
        return math.sqrt(1.0 - b) * x_prev + math.sqrt(b) * noise
    return torch.sqrt(1.0 - b) * x_prev + torch.sqrt(b) * noise


def q_sample(x0: torch.Tensor, t, schedule: DiffusionSchedule, noise: torch.Tensor) -> NoisedSample:
    """Closed-form forward draw of x_t from x_0.

    Also accepts t=0 entries (identity, noise ignored there), which lets a
    batch mix "clean" and noised samples.
    """
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != input shape {tuple(x0.shape)}")
    if isinstance(t, int):
        if t < 0 or t > schedule.T:
            raise ValueError(f"timestep {t} outside [0, {schedule.T}]")
    elif bool((t < 0).any() or (t > schedule.T).any()):
        raise ValueError(f"timesteps outside [0, {schedule.T}]")
    abars = _with_t0(schedule.alpha_bars, 1.0)
    ab = _coef(abars, t, x0)
    if isinstance(ab, float):
        x_t = math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise
    else:
        x_t = torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * noise
    return NoisedSample(x_t=x_t, t=t, epsilon=noise)


def posterior_sample(
    x_t: torch.Tensor,
    x0_pred: torch.Tensor,
    t,
    schedule: DiffusionSchedule,
    noise: torch.Tensor,
) -> torch.Tensor:
    """Sample x_{t-1} from the reverse posterior given a clean prediction."""
    if x0_pred.shape != x_t.shape or noise.shape != x_t.shape:
        raise ValueError(
            f"shape mismatch: x_t {tuple(x_t.shape)}, x0_pred {tuple(x0_pred.shape)}, "
            f"noise {tuple(noise.shape)}"
        )
    _check_t(t, schedule.T)
    c0 = _coef(_with_t0(schedule.posterior_mean_c0, math.nan), t, x_t)
    ct = _coef(_with_t0(schedule.posterior_mean_ct, math.nan), t, x_t)
    var = _coef(_with_t0(schedule.posterior_var, math.nan), t, x_t)
    sigma = math.sqrt(var) if isinstance(var, float) else torch.sqrt(var)
    return c0 * x0_pred + ct * x_t + sigma * noise


def reverse_rollout(
    x_T: torch.Tensor,
    conditioning,
    schedule: DiffusionSchedule,
    generator: Callable[[torch.Tensor, object, int], torch.Tensor],
    rng: torch.Generator | None = None,
) -> list[torch.Tensor]:
    """Run the full reverse chain, returning [x_T, x_{T-1}, ..., x_0].

    ``generator(x_t, conditioning, t)`` must return a clean-mel prediction
    of x_T's shape.  Noise is drawn at every step (the t=1 draw is scaled
    by zero, so the final transition is deterministic).
    """
    steps = [x_T]
    x = x_T
    for t in range(schedule.T, 0, -1):
        x0_pred = generator(x, conditioning, t)
        if x0_pred.shape != x.shape:
            raise ValueError(
                f"generator returned shape {tuple(x0_pred.shape)} at step t={t}, "
                f"expected {tuple(x.shape)}"
            )
        noise = torch.empty_like(x).normal_(generator=rng)
        x = posterior_sample(x, x0_pred, t, schedule, noise)
        if not torch.isfinite(x).all():
            raise NumericalError(f"non-finite values in reverse transition at step t={t}")
        steps.append(x)
    return steps
