"""Joint text+visual attention with temperature-adjusted cross-modal scaling.

Token ordering is fixed text-first: a joint sequence of N = n_txt + n_vis
tokens has text tokens at indices [0, n_txt) and visual tokens at
[n_txt, N). Q, K, V are held as (heads, N, head_dim) arrays.

The QK^T logit matrix decomposes into four blocks by (query, key) modality:

            keys: text      keys: visual
    q text  [ tt            tv ]
    q vis   [ vt            vv ]

Temperature adjustment multiplies only the vt block (visual queries
attending text keys) by gamma before the unified softmax, which rebalances
the competition between text keys and the much larger population of visual
keys. Two interchangeable kernel strategies implement this:

* ``attention_reference`` scales the vt scores directly (score-mod form).
* ``attention_selective`` scales the text *keys* by gamma, runs plain
  attention twice (scaled and unscaled), and restores text-query rows from
  the unscaled pass. Key scaling also multiplies the tt block, which is why
  the text rows must be recomposed.

Both strategies agree to 1e-12 in double precision; that equivalence is a
hard contract checked by the test suite and by the benchmark gate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError
from .tensor_math import softmax_rows

STRATEGIES = ("reference", "selective")


@dataclass(frozen=True)
class TokenLayout:
    """Partition of the joint sequence plus the head geometry."""

    n_txt: int
    n_vis: int
    heads: int
    head_dim: int

    def __post_init__(self):
        if self.n_txt < 1 or self.n_vis < 1:
            raise DomainError(f"need at least one token per modality, got {self}")
        if self.heads < 1 or self.head_dim < 1:
            raise DomainError(f"heads and head_dim must be positive, got {self}")

    @property
    def total(self) -> int:
        return self.n_txt + self.n_vis

    def check_qkv(self, *arrays: np.ndarray) -> None:
        expect = (self.heads, self.total, self.head_dim)
        for a in arrays:
            if a.shape != expect:
                raise ShapeError(f"expected shape {expect}, got {a.shape}")


@dataclass(frozen=True)
class TacaConfig:
    """Temperature-adjustment knobs: base factor, activation threshold, tau."""

    gamma0: float = 1.2
    t_thresh: float = 970.0
    tau: float = 1.0
    strategy: str = "reference"

    def __post_init__(self):
        if self.gamma0 <= 0:
            raise DomainError(f"gamma0 must be positive, got {self.gamma0}")
        if not (0.0 < self.t_thresh < 1000.0):
            raise DomainError(f"t_thresh must lie in (0, 1000), got {self.t_thresh}")
        if self.tau <= 0:
            raise DomainError(f"tau must be positive, got {self.tau}")
        if self.strategy not in STRATEGIES:
            raise DomainError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")


@dataclass(frozen=True)
class ProjectionWeights:
    """Modality-specific Q/K/V projection matrices (d_model -> heads*head_dim)."""

    wq_txt: np.ndarray
    wk_txt: np.ndarray
    wv_txt: np.ndarray
    wq_vis: np.ndarray
    wk_vis: np.ndarray
    wv_vis: np.ndarray

    def __post_init__(self):
        mats = [self.wq_txt, self.wk_txt, self.wv_txt, self.wq_vis, self.wk_vis, self.wv_vis]
        shapes = {m.shape for m in mats}
        if any(m.ndim != 2 for m in mats) or len(shapes) != 1:
            raise ShapeError(f"projection matrices must share one 2-D shape, got {shapes}")


@dataclass
class BlockLogits:
    """The four-block decomposition of QK^T/sqrt(D), per head.

    Each field is (heads, n_queries, n_keys) for its block. Entries are raw
    scaled dot products; no temperature has been applied.
    """

    tt: np.ndarray
    tv: np.ndarray
    vt: np.ndarray
    vv: np.ndarray
    layout: TokenLayout = field(repr=False)

    def assemble(self) -> np.ndarray:
        """Stitch the four blocks back into the full (heads, N, N) matrix."""
        top = np.concatenate([self.tt, self.tv], axis=-1)
        bottom = np.concatenate([self.vt, self.vv], axis=-1)
        return np.concatenate([top, bottom], axis=-2)


def gamma_schedule(t: float, cfg: TacaConfig) -> float:
    """Piecewise temperature factor: gamma0 at or above t_thresh, else 1."""
    if not (0.0 <= t <= 1000.0):
        raise DomainError(f"timestep {t} outside [0, 1000]")
    return float(cfg.gamma0) if t >= cfg.t_thresh else 1.0


def head_split(x: np.ndarray, heads: int) -> np.ndarray:
    """(N, heads*D) -> (heads, N, D); head h owns columns [h*D, (h+1)*D)."""
    n, width = x.shape
    if width % heads != 0:
        raise ShapeError(f"width {width} not divisible by {heads} heads")
    return x.reshape(n, heads, width // heads).transpose(1, 0, 2)


def head_merge(x: np.ndarray) -> np.ndarray:
    """(heads, N, D) -> (N, heads*D), inverse of head_split."""
    heads, n, d = x.shape
    return x.transpose(1, 0, 2).reshape(n, heads * d)


def project_qkv(
    text: np.ndarray,
    visual: np.ndarray,
    w: ProjectionWeights,
    layout: TokenLayout,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project each modality with its own weights and concatenate text-first.

    Returns (Q, K, V), each (heads, n_txt + n_vis, head_dim).
    """
    if text.ndim != 2 or text.shape[0] != layout.n_txt:
        raise ShapeError(f"text must be ({layout.n_txt}, d_model), got {text.shape}")
    if visual.ndim != 2 or visual.shape[0] != layout.n_vis:
        raise ShapeError(f"visual must be ({layout.n_vis}, d_model), got {visual.shape}")
    if text.shape[1] != w.wq_txt.shape[0] or visual.shape[1] != w.wq_vis.shape[0]:
        raise ShapeError("embedding width does not match projection weights")
    if w.wq_txt.shape[1] != layout.heads * layout.head_dim:
        raise ShapeError(
            f"projection output width {w.wq_txt.shape[1]} != "
            f"heads*head_dim {layout.heads * layout.head_dim}"
        )

    def both(w_txt, w_vis):
        joint = np.concatenate([text @ w_txt, visual @ w_vis], axis=0)
        return head_split(joint, layout.heads)

    q = both(w.wq_txt, w.wq_vis)
    k = both(w.wk_txt, w.wk_vis)
    v = both(w.wv_txt, w.wv_vis)
    return q, k, v


def scaled_logits(q: np.ndarray, k: np.ndarray, layout: TokenLayout) -> np.ndarray:
    """QK^T / sqrt(head_dim) as one (heads, N, N) array."""
    layout.check_qkv(q, k)
    scale = 1.0 / math.sqrt(layout.head_dim)
    return (q @ k.transpose(0, 2, 1)) * scale


def block_logits(q: np.ndarray, k: np.ndarray, layout: TokenLayout) -> BlockLogits:
    """Compute the four-block decomposition of QK^T/sqrt(D)."""
    full = scaled_logits(q, k, layout)
    nt = layout.n_txt
    return BlockLogits(
        tt=full[:, :nt, :nt],
        tv=full[:, :nt, nt:],
        vt=full[:, nt:, :nt],
        vv=full[:, nt:, nt:],
        layout=layout,
    )


def taca_scale(logits: BlockLogits, gamma: float) -> BlockLogits:
    """Multiply the vt block by gamma; the other three blocks pass through."""
    if gamma <= 0:
        raise DomainError(f"gamma must be positive, got {gamma}")
    return BlockLogits(
        tt=logits.tt.copy(),
        tv=logits.tv.copy(),
        vt=logits.vt * gamma,
        vv=logits.vv.copy(),
        layout=logits.layout,
    )


def scale_vt_inplace(logits: np.ndarray, gamma: float, layout: TokenLayout) -> np.ndarray:
    """Apply the vt-block scaling on a full (heads, N, N) logit matrix."""
    logits[:, layout.n_txt:, : layout.n_txt] *= gamma
    return logits


def attention_probs(
    q: np.ndarray,
    k: np.ndarray,
    gamma: float,
    tau: float,
    layout: TokenLayout,
) -> np.ndarray:
    """Row-stochastic attention matrix of the unified, gamma-scaled softmax."""
    if gamma <= 0 or tau <= 0:
        raise DomainError(f"gamma and tau must be positive, got {gamma}, {tau}")
    logits = scaled_logits(q, k, layout)
    scale_vt_inplace(logits, gamma, layout)
    if tau != 1.0:
        logits /= tau
    return softmax_rows(logits)


def attention_reference(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    gamma: float,
    tau: float,
    layout: TokenLayout,
) -> np.ndarray:
    """Score-mod strategy: scale vt logits, one unified softmax, times V.

    Text-query rows only ever see unscaled logits, so they match the
    gamma=1 result; gamma touches visual-query rows alone.
    """
    layout.check_qkv(q, k, v)
    probs = attention_probs(q, k, gamma, tau, layout)
    return probs @ v


def attention_baseline(q: np.ndarray, k: np.ndarray, v: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Plain scaled-dot-product attention, no block bookkeeping.

    Serves as the benchmark baseline and as the unscaled pass inside the
    selective strategy.
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    logits = (q @ k.transpose(0, 2, 1)) * scale
    if tau != 1.0:
        logits /= tau
    return softmax_rows(logits) @ v


def attention_selective(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    gamma: float,
    tau: float,
    layout: TokenLayout,
) -> np.ndarray:
    """Two-pass strategy: scale text keys, then restore text-query rows.

    Scaling K[:n_txt] by gamma multiplies every query's text-key scores,
    i.e. both vt (wanted) and tt (unwanted). A second, unscaled pass
    supplies the correct text-query rows, which overwrite the scaled ones.
    Deliberately performs both full passes so its measured cost reflects
    the real two-pass structure.
    """
    layout.check_qkv(q, k, v)
    if gamma <= 0 or tau <= 0:
        raise DomainError(f"gamma and tau must be positive, got {gamma}, {tau}")
    k_scaled = k.copy()
    k_scaled[:, : layout.n_txt, :] *= gamma
    out = attention_baseline(q, k_scaled, v, tau)
    out_orig = attention_baseline(q, k, v, tau)
    out[:, : layout.n_txt, :] = out_orig[:, : layout.n_txt, :]
    return out


def attention_by_strategy(
    strategy: str,
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    gamma: float,
    tau: float,
    layout: TokenLayout,
) -> np.ndarray:
    if strategy == "reference":
        return attention_reference(q, k, v, gamma, tau, layout)
    if strategy == "selective":
        return attention_selective(q, k, v, gamma, tau, layout)
    raise DomainError(f"unknown strategy {strategy!r}")
