"""Flow-matching timestep schedule and straight-line interpolant.

Convention: sigma = t / 1000 with t in [0, 1000]. The noising path is
x_t = (1 - sigma) * x0 + sigma * noise, so the velocity target is the
constant noise - x0 and x0 can be reconstructed as x_t - sigma * v.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import TacaConfig, gamma_schedule
from .errors import DomainError, ShapeError

T_MAX = 1000.0


@dataclass(frozen=True)
class FlowSchedule:
    """Strictly decreasing denoising timesteps with a shift parameter."""

    steps: int
    shift: float
    timesteps: np.ndarray = field(repr=False)  # (steps,), t_0 = 1000

    def sigmas(self) -> np.ndarray:
        """Noise levels per step plus the terminal 0, length steps + 1."""
        return np.concatenate([self.timesteps / T_MAX, [0.0]])

    def gamma_active(self, t_thresh: float) -> np.ndarray:
        """Boolean mask of steps where the temperature factor applies."""
        return self.timesteps >= t_thresh

    def n_gamma_active(self, t_thresh: float) -> int:
        return int(self.gamma_active(t_thresh).sum())

    def gammas(self, cfg: TacaConfig) -> list[float]:
        return [gamma_schedule(float(t), cfg) for t in self.timesteps]


def make_schedule(steps: int, shift: float) -> FlowSchedule:
    """Shifted schedule t_i = 1000 * shift*s / (1 + (shift-1)*s), s = 1 - i/steps.

    shift=1 collapses to linear spacing; shift>1 concentrates steps at high
    noise levels (steps=30, shift=3 puts exactly the first three steps at
    t >= 970).
    """
    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}")
    if shift <= 0:
        raise DomainError(f"shift must be positive, got {shift}")
    s = 1.0 - np.arange(steps) / steps
    t = T_MAX * (shift * s) / (1.0 + (shift - 1.0) * s)
    # shift/(1 + (shift-1)) can overshoot 1 by an ulp; keep t_0 at exactly T_MAX
    t = np.minimum(t, T_MAX)
    return FlowSchedule(steps=steps, shift=float(shift), timesteps=t)


def flow_interpolate(
    x0: np.ndarray, noise: np.ndarray, t: float
) -> tuple[np.ndarray, np.ndarray]:
    """Noised state and velocity target at timestep t.

    Returns (x_t, v_target) with x_t = (1-sigma)*x0 + sigma*noise and
    v_target = noise - x0.
    """
    if x0.shape != noise.shape:
        raise ShapeError(f"x0 {x0.shape} and noise {noise.shape} must match")
    if not (0.0 <= t <= T_MAX):
        raise DomainError(f"timestep {t} outside [0, {T_MAX}]")
    sigma = t / T_MAX
    x_t = (1.0 - sigma) * x0 + sigma * noise
    v_target = noise - x0
    return x_t, v_target
