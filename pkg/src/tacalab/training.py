"""Flow-matching training: full-weight pretraining, then adapter fine-tuning.

Phase one trains every weight on the synthetic task over the whole timestep
range (this stands in for a released checkpoint). Phase two attaches
low-rank adapters to the attention projections, restricts timesteps to
t >= t_thresh, runs attention with the temperature factor gamma0 active,
and updates only the adapter factors. A fraction of prompts is replaced by
the null prompt in both phases so the model supports classifier-free
guidance at sampling time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import TacaConfig, gamma_schedule
from .data import ConceptSet, SyntheticBatch, default_concepts, synth_dataset
from .errors import DomainError, NumericError
from .flow import T_MAX, flow_interpolate
from .lora import AdamW
from .model import ModelConfig, ToyModel
from .tensor_math import DEFAULT_SEED, make_rng

TRAIN_LOG_COLUMNS = ("phase", "step", "t", "loss", "gamma")


@dataclass(frozen=True)
class TrainConfig:
    pretrain_steps: int = 600
    finetune_steps: int = 200
    batch_size: int = 4
    pretrain_lr: float = 3e-3
    finetune_lr: float = 1e-4
    lora_rank: int = 16
    lora_alpha: float = 16.0
    gamma0: float = 1.2
    t_thresh: float = 970.0
    tau: float = 1.0
    cfg_dropout: float = 0.1
    n_pairs: int = 256
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if self.pretrain_steps < 1 or self.finetune_steps < 1:
            raise DomainError("both training phases need at least one step")
        if self.batch_size < 1:
            raise DomainError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0.0 <= self.cfg_dropout < 1.0):
            raise DomainError(f"cfg_dropout must lie in [0, 1), got {self.cfg_dropout}")

    def taca(self) -> TacaConfig:
        return TacaConfig(gamma0=self.gamma0, t_thresh=self.t_thresh, tau=self.tau)


@dataclass(frozen=True)
class TrainStepInfo:
    """Loss plus the sampled timestep and the gamma it implied."""

    loss: float
    t: float
    gamma: float


def velocity_mse(v_pred: np.ndarray, v_target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean-squared velocity error and its gradient w.r.t. the prediction."""
    err = v_pred - v_target
    loss = float((err * err).mean())
    return loss, 2.0 * err / err.size


def batch_loss_and_grads(
    model: ToyModel,
    batch: list[SyntheticBatch],
    t: float,
    gamma: float,
    rng: np.random.Generator,
    tau: float = 1.0,
    cfg_dropout: float = 0.0,
    concepts: ConceptSet | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Batch-mean loss and trainable-parameter gradients at one timestep.

    Fresh noise is drawn per pair; with cfg_dropout the prompt is replaced
    by the null prompt so the unconditional branch gets trained too.
    """
    if cfg_dropout > 0.0 and concepts is None:
        raise DomainError("cfg_dropout requires the concept set (for its null prompt)")
    total_loss = 0.0
    total_grads: dict[str, np.ndarray] = {}
    for item in batch:
        prompt = item.prompt
        if cfg_dropout > 0.0 and rng.random() < cfg_dropout:
            prompt = concepts.null_prompt()
        noise = rng.standard_normal(item.x0.shape)
        x_t, v_target = flow_interpolate(item.x0, noise, t)
        v_pred, cache = model.forward(prompt, x_t, t, gamma=gamma, tau=tau, want_cache=True)
        loss, g_out = velocity_mse(v_pred, v_target)
        total_loss += loss
        for name, g in model.trainable_grads(cache, g_out).items():
            if name in total_grads:
                total_grads[name] += g
            else:
                total_grads[name] = g.copy()
    scale = 1.0 / len(batch)
    for g in total_grads.values():
        g *= scale
    return total_loss * scale, total_grads


def train_step(
    model: ToyModel,
    batch: list[SyntheticBatch],
    taca: TacaConfig,
    opt: AdamW,
    rng: np.random.Generator,
    t_low: float | None = None,
    t_high: float = T_MAX,
    cfg_dropout: float = 0.0,
    concepts: ConceptSet | None = None,
    step: int = 0,
) -> TrainStepInfo:
    """One optimizer step: sample t, noise the batch, backprop, update.

    t is uniform on [t_low, t_high) with t_low defaulting to the activation
    threshold, so fine-tuning sees exactly the timesteps where the
    temperature factor is live. Only the parameters captured by the
    optimizer move; with adapters attached those are the factors alone.
    """
    if not batch:
        raise DomainError("batch must not be empty")
    low = taca.t_thresh if t_low is None else t_low
    if not (0.0 <= low < t_high <= T_MAX):
        raise DomainError(f"timestep range [{low}, {t_high}) is invalid")
    t = float(rng.uniform(low, t_high))
    gamma = gamma_schedule(t, taca)
    loss, grads = batch_loss_and_grads(
        model, batch, t, gamma, rng, tau=taca.tau, cfg_dropout=cfg_dropout, concepts=concepts
    )
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss} at step {step}, t={t:.3f}")
    opt.step(grads)
    return TrainStepInfo(loss=loss, t=t, gamma=gamma)


def train_phase(
    model: ToyModel,
    data: list[SyntheticBatch],
    concepts: ConceptSet,
    opt: AdamW,
    steps: int,
    rng: np.random.Generator,
    phase: str,
    taca: TacaConfig,
    t_low: float,
    batch_size: int,
    cfg_dropout: float,
    log: list[dict],
) -> None:
    """Run a fixed number of steps, appending one log row per step."""
    for step in range(steps):
        idx = rng.integers(0, len(data), size=batch_size)
        batch = [data[j] for j in idx]
        info = train_step(
            model, batch, taca, opt, rng,
            t_low=t_low, cfg_dropout=cfg_dropout, concepts=concepts, step=step,
        )
        log.append(
            {"phase": phase, "step": step, "t": info.t, "loss": info.loss, "gamma": info.gamma}
        )


def run_training(
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    concepts: ConceptSet | None = None,
) -> tuple[ToyModel, list[dict]]:
    """Both phases end to end; returns the adapted model and the step log.

    Pretraining runs with gamma pinned to 1 (the base model never sees the
    temperature factor); fine-tuning samples t >= t_thresh where
    gamma_schedule always yields gamma0.
    """
    model_cfg = model_cfg if model_cfg is not None else ModelConfig()
    concepts = concepts if concepts is not None else default_concepts(n_txt=model_cfg.n_txt)
    if concepts.codebook_size != model_cfg.n_codes:
        raise DomainError(
            f"concept codebook size {concepts.codebook_size} != model n_codes {model_cfg.n_codes}"
        )
    rng = make_rng(cfg.seed)
    model = ToyModel(model_cfg, rng)
    data = synth_dataset(cfg.n_pairs, rng, concepts, n_vis=model_cfg.n_vis)
    log: list[dict] = []

    # gamma0=1 makes gamma_schedule constant 1, whatever t gets drawn
    pretrain_taca = TacaConfig(gamma0=1.0, t_thresh=cfg.t_thresh, tau=cfg.tau)
    opt = AdamW(model.trainable_params(), lr=cfg.pretrain_lr)
    train_phase(
        model, data, concepts, opt, cfg.pretrain_steps, rng,
        phase="pretrain", taca=pretrain_taca, t_low=0.0,
        batch_size=cfg.batch_size, cfg_dropout=cfg.cfg_dropout, log=log,
    )

    model.attach_lora(cfg.lora_rank, cfg.lora_alpha, rng)
    opt = AdamW(model.trainable_params(), lr=cfg.finetune_lr)
    train_phase(
        model, data, concepts, opt, cfg.finetune_steps, rng,
        phase="taca", taca=cfg.taca(), t_low=cfg.t_thresh,
        batch_size=cfg.batch_size, cfg_dropout=cfg.cfg_dropout, log=log,
    )
    return model, log


def head_tail_means(values, window: int = 20) -> tuple[float, float]:
    """Mean of the first and last `window` entries; a crude trend probe."""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise DomainError("cannot summarize an empty sequence")
    w = min(window, values.size)
    return float(values[:w].mean()), float(values[-w:].mean())
