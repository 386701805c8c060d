"""Euler sampler over the shifted schedule, with guidance and gamma logging.

Integration runs in sigma space: given the model's velocity estimate v at
(x, t), the state advances by (sigma_next - sigma_cur) * v, ending exactly
at sigma = 0. Classifier-free guidance mixes a conditional and a
null-prompt velocity; cfg_scale = 1 short-circuits to the conditional
branch alone. The temperature factor follows gamma_schedule per step, so
with the default 30-step shift-3 schedule the first three steps run with
gamma0 and the rest with 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import TacaConfig, gamma_schedule
from .errors import DomainError, NumericError
from .flow import make_schedule
from .tensor_math import DEFAULT_SEED, make_rng

SAMPLE_LOG_COLUMNS = ("step", "t", "sigma", "gamma")


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 30
    shift: float = 3.0
    cfg_scale: float = 3.5
    taca: TacaConfig = field(default_factory=TacaConfig)
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if self.cfg_scale < 1.0:
            raise DomainError(f"cfg_scale must be >= 1, got {self.cfg_scale}")


def sample(
    model,
    prompt,
    sampler: SamplerConfig,
    null_prompt=None,
) -> tuple[np.ndarray, list[dict]]:
    """Generate visual tokens from seeded noise; returns (x, per-step log).

    The log has one row per step with (step, t, sigma, gamma); identical
    (weights, prompt, seed, config) give an identical trajectory. The
    null_prompt is only required when cfg_scale != 1.
    """
    if sampler.cfg_scale != 1.0 and null_prompt is None:
        raise DomainError("cfg_scale != 1 needs a null prompt for the unconditional branch")
    schedule = make_schedule(sampler.steps, sampler.shift)
    sigmas = schedule.sigmas()
    rng = make_rng(sampler.seed)
    x = rng.standard_normal((model.cfg.n_vis, model.cfg.d_patch))

    rows = []
    for i, t in enumerate(schedule.timesteps):
        t = float(t)
        gamma = gamma_schedule(t, sampler.taca)
        v_cond = model.forward(prompt, x, t, gamma=gamma, tau=sampler.taca.tau)
        if sampler.cfg_scale != 1.0:
            v_uncond = model.forward(null_prompt, x, t, gamma=gamma, tau=sampler.taca.tau)
            v_hat = v_uncond + sampler.cfg_scale * (v_cond - v_uncond)
        else:
            v_hat = v_cond
        x = x + (sigmas[i + 1] - sigmas[i]) * v_hat
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite sampler state at step {i} (t={t:.3f})")
        rows.append({"step": i, "t": t, "sigma": float(sigmas[i]), "gamma": gamma})
    return x, rows


def gamma_active_steps(rows: list[dict], gamma0: float) -> list[int]:
    """Step indices whose logged gamma equals the base factor (gamma0 != 1)."""
    return [row["step"] for row in rows if row["gamma"] == gamma0 and gamma0 != 1.0]
