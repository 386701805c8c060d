"""Diagnostics for cross-modal attention suppression.

Measures how much probability mass visual queries place on text keys under
the unified joint softmax, compares it with the typical cross-attention
paradigm (whose softmax runs over text keys only, so its per-query mass is
exactly 1), and reports how the gamma scaling shifts the attention map.
Everything exports to plain CSV; plotting stays outside the package.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .attention import BlockLogits, TokenLayout, attention_probs, block_logits
from .errors import DomainError
from .tensor_math import softmax_rows

SUPPRESSION_COLUMNS = ("head", "gamma", "n_txt", "n_vis", "mean_mass", "ratio")
ATTN_DIFF_COLUMNS = ("head", "query_bucket", "mean_diff", "max_diff")


def _fmt(value) -> str:
    # 17 significant digits: exact round-trip for float64
    return f"{value:.17g}" if isinstance(value, float) else str(value)


@dataclass
class SuppressionReport:
    """Visual-to-text attention mass, unified softmax vs typical cross-attention."""

    unified_mass: np.ndarray  # (heads, n_vis), gamma-scaled unified softmax
    typical_mass: np.ndarray  # (heads, n_vis), softmax over text keys only (== 1)
    gamma: float
    layout: TokenLayout = field(repr=False)

    @property
    def ratio_per_head(self) -> np.ndarray:
        return self.unified_mass.mean(axis=1) / self.typical_mass.mean(axis=1)

    @property
    def ratio(self) -> float:
        return float(self.ratio_per_head.mean())


@dataclass
class AttentionMapDiff:
    """Probability-map change caused by gamma, restricted to the vt block."""

    baseline_probs: np.ndarray  # (heads, N, N) at gamma=1
    taca_probs: np.ndarray  # (heads, N, N) at the requested gamma
    vt_diff: np.ndarray  # (heads, n_vis, n_txt) = taca - baseline
    gamma: float
    layout: TokenLayout = field(repr=False)

    @property
    def mean_diff(self) -> float:
        return float(self.vt_diff.mean())

    @property
    def max_diff(self) -> float:
        return float(np.abs(self.vt_diff).max())

    def bucket_rows(self, n_buckets: int = 16) -> list[dict]:
        """Per (head, visual-query bucket) summary rows for CSV export."""
        if n_buckets < 1:
            raise DomainError(f"bucket count must be >= 1, got {n_buckets}")
        n_vis = self.layout.n_vis
        n_buckets = min(n_buckets, n_vis)
        edges = [round(b * n_vis / n_buckets) for b in range(n_buckets + 1)]
        rows = []
        for h in range(self.layout.heads):
            for b in range(n_buckets):
                chunk = self.vt_diff[h, edges[b] : edges[b + 1], :]
                rows.append(
                    {
                        "head": h,
                        "query_bucket": b,
                        "mean_diff": float(chunk.mean()),
                        "max_diff": float(np.abs(chunk).max()),
                    }
                )
        return rows


def vis_txt_mass_from_blocks(blocks: BlockLogits, gamma: float, tau: float = 1.0) -> np.ndarray:
    """Per-visual-query text mass from the vt/vv logit blocks.

    Visual-query rows of the unified softmax involve only their vt and vv
    scores, so the mass is computable without the text-query blocks.
    """
    if gamma <= 0 or tau <= 0:
        raise DomainError(f"gamma and tau must be positive, got {gamma}, {tau}")
    n_txt = blocks.layout.n_txt
    row = np.concatenate([blocks.vt * gamma, blocks.vv], axis=-1) / tau
    probs = softmax_rows(row)
    return probs[..., :n_txt].sum(axis=-1)


def vis_txt_mass(
    q: np.ndarray, k: np.ndarray, gamma: float, tau: float, layout: TokenLayout
) -> np.ndarray:
    """Per-visual-query mass on text keys under the unified softmax, (heads, n_vis)."""
    probs = attention_probs(q, k, gamma, tau, layout)
    return probs[:, layout.n_txt :, : layout.n_txt].sum(axis=-1)


def typical_cross_mass_from_blocks(blocks: BlockLogits, tau: float = 1.0) -> np.ndarray:
    """Per-query mass when the softmax runs over text keys only (always 1)."""
    return softmax_rows(blocks.vt / tau).sum(axis=-1)


def suppression_ratio(
    q: np.ndarray,
    k: np.ndarray,
    layout: TokenLayout,
    gamma: float = 1.0,
    tau: float = 1.0,
) -> SuppressionReport:
    """Unified-softmax text mass relative to the typical cross-attention mass."""
    blocks = block_logits(q, k, layout)
    return suppression_from_blocks(blocks, gamma=gamma, tau=tau)


def suppression_from_blocks(
    blocks: BlockLogits, gamma: float = 1.0, tau: float = 1.0
) -> SuppressionReport:
    return SuppressionReport(
        unified_mass=vis_txt_mass_from_blocks(blocks, gamma, tau),
        typical_mass=typical_cross_mass_from_blocks(blocks, tau),
        gamma=gamma,
        layout=blocks.layout,
    )


def attention_map_diff(
    q: np.ndarray,
    k: np.ndarray,
    gamma: float,
    tau: float,
    layout: TokenLayout,
) -> AttentionMapDiff:
    """Probability maps at gamma=1 and gamma, with the vt-block difference.

    Text-query rows are identical in both maps (gamma only reaches
    visual-query rows), so the difference is reported for the vt block.
    """
    baseline = attention_probs(q, k, 1.0, tau, layout)
    taca = attention_probs(q, k, gamma, tau, layout)
    nt = layout.n_txt
    vt_diff = taca[:, nt:, :nt] - baseline[:, nt:, :nt]
    return AttentionMapDiff(
        baseline_probs=baseline, taca_probs=taca, vt_diff=vt_diff, gamma=gamma, layout=layout
    )


def random_blocks(
    layout: TokenLayout,
    rng: np.random.Generator,
    mode: str = "iid",
) -> BlockLogits:
    """Synthetic logit blocks for Monte-Carlo studies.

    ``iid`` draws every entry N(0,1), the exchangeable null where the
    expected text mass is n_txt / (n_txt + n_vis). ``nonneg`` additionally
    takes |vt|, the regime where mass is provably monotone in gamma.
    """
    if mode not in ("iid", "nonneg"):
        raise DomainError(f"unknown logits mode {mode!r}")
    h, nt, nv = layout.heads, layout.n_txt, layout.n_vis
    tt = rng.standard_normal((h, nt, nt))
    tv = rng.standard_normal((h, nt, nv))
    vt = rng.standard_normal((h, nv, nt))
    vv = rng.standard_normal((h, nv, nv))
    if mode == "nonneg":
        vt = np.abs(vt)
    return BlockLogits(tt=tt, tv=tv, vt=vt, vv=vv, layout=layout)


def mc_mean_mass(
    layout: TokenLayout,
    gammas: list[float],
    n_trials: int,
    rng: np.random.Generator,
    mode: str = "iid",
    tau: float = 1.0,
) -> np.ndarray:
    """Mean visual-to-text mass per (gamma, head) over seeded random draws.

    All gammas are evaluated on the same draws, so gamma comparisons are
    paired. Returns (len(gammas), heads).
    """
    if n_trials < 1:
        raise DomainError(f"n_trials must be >= 1, got {n_trials}")
    acc = np.zeros((len(gammas), layout.heads))
    for _ in range(n_trials):
        blocks = random_blocks(layout, rng, mode)
        for gi, gamma in enumerate(gammas):
            acc[gi] += vis_txt_mass_from_blocks(blocks, gamma, tau).mean(axis=1)
    return acc / n_trials


def suppression_rows(report: SuppressionReport, head_offset: int = 0) -> list[dict]:
    """One CSV row per head for a suppression report."""
    rows = []
    for h in range(report.layout.heads):
        rows.append(
            {
                "head": head_offset + h,
                "gamma": report.gamma,
                "n_txt": report.layout.n_txt,
                "n_vis": report.layout.n_vis,
                "mean_mass": float(report.unified_mass[h].mean()),
                "ratio": float(report.ratio_per_head[h]),
            }
        )
    return rows


def write_csv(path, columns, rows) -> None:
    """UTF-8 CSV with a fixed column order and round-trippable floats."""
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_fmt(row[c]) for c in columns])
    except OSError as exc:
        raise OSError(f"failed writing CSV to {path}: {exc}") from exc


def export_stats(report, path, n_buckets: int = 16) -> None:
    """Write a report's rows to CSV; accepts either report type or raw rows."""
    if isinstance(report, SuppressionReport):
        write_csv(path, SUPPRESSION_COLUMNS, suppression_rows(report))
    elif isinstance(report, AttentionMapDiff):
        write_csv(path, ATTN_DIFF_COLUMNS, report.bucket_rows(n_buckets))
    elif isinstance(report, list):
        columns = SUPPRESSION_COLUMNS if not report else tuple(report[0].keys())
        write_csv(path, columns, report)
    else:
        raise DomainError(f"cannot export report of type {type(report).__name__}")
