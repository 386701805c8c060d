"""tacalab: temperature-adjusted cross-modal attention, at desk scale.

A joint text+visual attention stack where the visual-query/text-key logit
block is multiplied by a timestep-gated factor gamma(t) before the unified
softmax, two provably equivalent kernel strategies for it, attention-mass
diagnostics, low-rank adapters, a toy flow-matching diffusion loop with a
guided Euler sampler, and microbenchmarks. Everything is seeded and
deterministic; float64 is the reference precision.
"""

from .attention import (
    STRATEGIES,
    BlockLogits,
    ProjectionWeights,
    TacaConfig,
    TokenLayout,
    attention_baseline,
    attention_by_strategy,
    attention_probs,
    attention_reference,
    attention_selective,
    block_logits,
    gamma_schedule,
    head_merge,
    head_split,
    project_qkv,
    scaled_logits,
    taca_scale,
)
from .analysis import (
    ATTN_DIFF_COLUMNS,
    SUPPRESSION_COLUMNS,
    AttentionMapDiff,
    SuppressionReport,
    attention_map_diff,
    export_stats,
    mc_mean_mass,
    random_blocks,
    suppression_from_blocks,
    suppression_ratio,
    vis_txt_mass,
    vis_txt_mass_from_blocks,
    write_csv,
)
from .bench import BenchRecord, correctness_gate, median_time, run_bench, simulate_run
from .data import ConceptSet, SyntheticBatch, default_concepts, oracle_velocity, synth_dataset
from .errors import DomainError, NumericError, ShapeError
from .flow import T_MAX, FlowSchedule, flow_interpolate, make_schedule
from .lora import (
    AdamW,
    LoraAdapter,
    apply_lora,
    grads_from_weight_grad,
    init_lora,
    load_adapter,
    lora_grads,
    merge,
    save_adapter,
    unmerge,
)
from .model import ModelConfig, ToyModel, timestep_embedding
from .probe import OracleModel, ProbeRow, alignment_probe, concept_alignment, permutation_threshold
from .sampling import SamplerConfig, gamma_active_steps, sample
from .serialization import load_arrays, save_arrays
from .tensor_math import (
    DEFAULT_SEED,
    finite_diff_grad,
    make_rng,
    matmul,
    randn,
    relative_error,
    softmax_rows,
)
from .training import (
    TrainConfig,
    TrainStepInfo,
    batch_loss_and_grads,
    head_tail_means,
    run_training,
    train_step,
    velocity_mse,
)

__version__ = "0.1.0"
