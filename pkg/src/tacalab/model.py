"""Desk-scale joint-attention transformer predicting a velocity field.

The model embeds a discrete prompt through a codebook and visual patches
through a linear map (plus a sinusoidal timestep feature), runs a stack of
blocks, and reads a per-patch velocity off the visual rows. Each block is
joint attention over the concatenated text+visual sequence with
modality-specific Q/K/V projections, followed by a shared output projection
and a ReLU feed-forward, both with residual connections.

All gradients are computed by a hand-written backward pass over the cached
forward intermediates; there is no autodiff anywhere. The backward pass
produces gradients with respect to the *effective* weights, so low-rank
adapters can be chained on top without touching this module's math.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .attention import (
    ProjectionWeights,
    TokenLayout,
    attention_probs,
    head_merge,
    head_split,
    project_qkv,
)
from .errors import DomainError, ShapeError
from .flow import T_MAX
from .lora import LoraAdapter, apply_lora, grads_from_weight_grad, init_lora
from .serialization import load_arrays, save_arrays
from .tensor_math import make_rng

CHECKPOINT_FORMAT = "tacalab-model"
CHECKPOINT_VERSION = 1

PROJ_WEIGHTS = ("wq_txt", "wk_txt", "wv_txt", "wq_vis", "wk_vis", "wv_vis")
BLOCK_WEIGHTS = PROJ_WEIGHTS + ("w_out", "w_ff1", "w_ff2")


@dataclass(frozen=True)
class ModelConfig:
    blocks: int = 2
    d_model: int = 64
    heads: int = 4
    head_dim: int = 16
    n_txt: int = 8
    n_vis: int = 64
    d_patch: int = 2
    d_ff: int = 128
    n_codes: int = 16

    def __post_init__(self):
        for name in ("blocks", "d_model", "heads", "head_dim", "n_txt", "n_vis", "d_patch", "d_ff"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.heads * self.head_dim != self.d_model:
            # residual h + merged attention needs matching widths
            raise DomainError(
                f"heads*head_dim = {self.heads * self.head_dim} must equal d_model = {self.d_model}"
            )
        if self.n_codes < 2:
            raise DomainError(f"need at least two codebook entries, got {self.n_codes}")

    def layout(self) -> TokenLayout:
        return TokenLayout(
            n_txt=self.n_txt, n_vis=self.n_vis, heads=self.heads, head_dim=self.head_dim
        )

    def to_dict(self) -> dict:
        return asdict(self)


def timestep_embedding(t: float, dim: int) -> np.ndarray:
    """Sinusoidal features of the raw timestep, geometric periods up to 1e4."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = t * freqs
    emb = np.concatenate([np.cos(args), np.sin(args)])
    if dim % 2:
        emb = np.append(emb, 0.0)
    return emb


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes, in initialization order."""
    shapes: dict[str, tuple[int, ...]] = {
        "codebook": (cfg.n_codes, cfg.d_model),
        "w_in": (cfg.d_patch, cfg.d_model),
    }
    for i in range(cfg.blocks):
        for name in PROJ_WEIGHTS:
            shapes[f"blk{i}.{name}"] = (cfg.d_model, cfg.d_model)
        shapes[f"blk{i}.w_out"] = (cfg.d_model, cfg.d_model)
        shapes[f"blk{i}.w_ff1"] = (cfg.d_model, cfg.d_ff)
        shapes[f"blk{i}.w_ff2"] = (cfg.d_ff, cfg.d_model)
    shapes["w_head"] = (cfg.d_model, cfg.d_patch)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fan-in-scaled Gaussian weights; the output head starts at zero."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "w_head":
            params[name] = np.zeros(shape)
        elif name == "codebook":
            params[name] = rng.standard_normal(shape)
        else:
            params[name] = rng.standard_normal(shape) / math.sqrt(shape[0])
    return params


class ToyModel:
    """Joint-attention velocity model with cached forward and manual backward."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None, params=None):
        self.cfg = cfg
        self.layout = cfg.layout()
        if params is None:
            params = init_params(cfg, rng if rng is not None else make_rng())
        expected = param_shapes(cfg)
        if set(params) != set(expected):
            raise ShapeError("parameter names do not match the model config")
        for name, arr in params.items():
            if arr.shape != expected[name]:
                raise ShapeError(f"{name}: expected shape {expected[name]}, got {arr.shape}")
        self.params: dict[str, np.ndarray] = params
        self.adapters: dict[str, LoraAdapter] = {}

    # ----- weights and adapters -------------------------------------------------

    def projection_names(self) -> list[str]:
        return [f"blk{i}.{name}" for i in range(self.cfg.blocks) for name in PROJ_WEIGHTS]

    def effective_weight(self, name: str) -> np.ndarray:
        w = self.params[name]
        adapter = self.adapters.get(name)
        return apply_lora(w, adapter) if adapter is not None else w

    def attach_lora(self, rank: int, alpha: float, rng: np.random.Generator, names=None) -> None:
        """Attach fresh adapters; by default every attention projection gets one."""
        names = list(names) if names is not None else self.projection_names()
        for name in names:
            if name not in self.params:
                raise DomainError(f"unknown parameter {name!r}")
            d, k = self.params[name].shape
            self.adapters[name] = init_lora(d, k, rank, alpha, rng)

    def detach_lora(self) -> None:
        self.adapters = {}

    def trainable_params(self) -> dict[str, np.ndarray]:
        """Adapter factors when adapters are attached, else every base weight.

        The returned arrays are the live parameter buffers, so an optimizer
        updating them in place trains the model directly.
        """
        if self.adapters:
            out = {}
            for name in sorted(self.adapters):
                out[f"{name}.lora_a"] = self.adapters[name].a
                out[f"{name}.lora_b"] = self.adapters[name].b
            return out
        return self.params

    # ----- forward / backward ----------------------------------------------------

    def forward(self, prompt, x_t, t: float, gamma: float = 1.0, tau: float = 1.0, want_cache: bool = False):
        """Velocity prediction for one prompt/state pair.

        Returns (n_vis, d_patch), or (prediction, cache) when want_cache is
        set; the cache feeds backward().
        """
        cfg = self.cfg
        prompt = np.asarray(prompt, dtype=np.int64)
        if prompt.shape != (cfg.n_txt,):
            raise ShapeError(f"prompt must have shape ({cfg.n_txt},), got {prompt.shape}")
        if prompt.min() < 0 or prompt.max() >= cfg.n_codes:
            raise DomainError(f"prompt indices must lie in [0, {cfg.n_codes})")
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.shape != (cfg.n_vis, cfg.d_patch):
            raise ShapeError(f"x_t must have shape ({cfg.n_vis}, {cfg.d_patch}), got {x_t.shape}")
        if not (0.0 <= t <= T_MAX):
            raise DomainError(f"timestep {t} outside [0, {T_MAX}]")
        if gamma <= 0 or tau <= 0:
            raise DomainError(f"gamma and tau must be positive, got {gamma}, {tau}")

        nt = cfg.n_txt
        txt0 = self.effective_weight("codebook")[prompt]
        vis0 = x_t @ self.effective_weight("w_in") + timestep_embedding(float(t), cfg.d_model)
        h = np.concatenate([txt0, vis0], axis=0)

        blocks_cache = []
        for i in range(cfg.blocks):
            w = {name: self.effective_weight(f"blk{i}.{name}") for name in BLOCK_WEIGHTS}
            proj = ProjectionWeights(
                wq_txt=w["wq_txt"], wk_txt=w["wk_txt"], wv_txt=w["wv_txt"],
                wq_vis=w["wq_vis"], wk_vis=w["wk_vis"], wv_vis=w["wv_vis"],
            )
            q, k, v = project_qkv(h[:nt], h[nt:], proj, self.layout)
            probs = attention_probs(q, k, gamma, tau, self.layout)
            merged = head_merge(probs @ v)
            h1 = h + merged @ w["w_out"]
            ff_a = h1 @ w["w_ff1"]
            h_next = h1 + np.maximum(ff_a, 0.0) @ w["w_ff2"]
            blocks_cache.append(
                {"h_in": h, "q": q, "k": k, "v": v, "probs": probs,
                 "merged": merged, "h1": h1, "ff_a": ff_a, "w": w}
            )
            h = h_next

        w_head = self.effective_weight("w_head")
        v_pred = h[nt:] @ w_head
        if not want_cache:
            return v_pred
        cache = {
            "prompt": prompt, "x_t": x_t, "t": float(t),
            "gamma": float(gamma), "tau": float(tau),
            "blocks": blocks_cache, "h_final": h, "w_head": w_head,
        }
        return v_pred, cache

    def backward(self, cache: dict, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss w.r.t. every effective weight.

        grad_out is d(loss)/d(prediction), shape (n_vis, d_patch). Keys of
        the result match the parameter names; values are gradients at the
        effective (adapter-included) weights.
        """
        cfg = self.cfg
        nt = cfg.n_txt
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if grad_out.shape != (cfg.n_vis, cfg.d_patch):
            raise ShapeError(f"grad_out must have shape ({cfg.n_vis}, {cfg.d_patch})")

        grads: dict[str, np.ndarray] = {}
        grads["w_head"] = cache["h_final"][nt:].T @ grad_out
        g_h = np.zeros_like(cache["h_final"])
        g_h[nt:] = grad_out @ cache["w_head"].T

        gamma, tau = cache["gamma"], cache["tau"]
        inv_sqrt_d = 1.0 / math.sqrt(cfg.head_dim)
        for i in reversed(range(cfg.blocks)):
            blk = cache["blocks"][i]
            w = blk["w"]

            # feed-forward sublayer: h_next = h1 + relu(h1 @ w_ff1) @ w_ff2
            relu_a = np.maximum(blk["ff_a"], 0.0)
            grads[f"blk{i}.w_ff2"] = relu_a.T @ g_h
            g_a = (g_h @ w["w_ff2"].T) * (blk["ff_a"] > 0.0)
            grads[f"blk{i}.w_ff1"] = blk["h1"].T @ g_a
            g_h1 = g_h + g_a @ w["w_ff1"].T

            # attention sublayer: h1 = h_in + head_merge(P @ V) @ w_out
            grads[f"blk{i}.w_out"] = blk["merged"].T @ g_h1
            g_attn = head_split(g_h1 @ w["w_out"].T, cfg.heads)
            probs, v = blk["probs"], blk["v"]
            g_p = g_attn @ v.transpose(0, 2, 1)
            g_v = probs.transpose(0, 2, 1) @ g_attn
            # softmax backward, then undo the tau and vt-block scalings
            g_z = probs * (g_p - (g_p * probs).sum(axis=-1, keepdims=True))
            g_z /= tau
            g_z[:, nt:, :nt] *= gamma
            g_q = (g_z @ blk["k"]) * inv_sqrt_d
            g_k = (g_z.transpose(0, 2, 1) @ blk["q"]) * inv_sqrt_d

            h_in = blk["h_in"]
            g_h_in = g_h1.copy()
            for g_split, name_t, name_v in (
                (g_q, "wq_txt", "wq_vis"),
                (g_k, "wk_txt", "wk_vis"),
                (g_v, "wv_txt", "wv_vis"),
            ):
                g_joint = head_merge(g_split)
                grads[f"blk{i}.{name_t}"] = h_in[:nt].T @ g_joint[:nt]
                grads[f"blk{i}.{name_v}"] = h_in[nt:].T @ g_joint[nt:]
                g_h_in[:nt] += g_joint[:nt] @ w[name_t].T
                g_h_in[nt:] += g_joint[nt:] @ w[name_v].T
            g_h = g_h_in

        grads["w_in"] = cache["x_t"].T @ g_h[nt:]
        g_code = np.zeros_like(self.params["codebook"])
        np.add.at(g_code, cache["prompt"], g_h[:nt])
        grads["codebook"] = g_code
        return grads

    def trainable_grads(self, cache: dict, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients keyed to match trainable_params().

        With adapters attached, effective-weight gradients are chained into
        factor gradients and base weights receive nothing at all.
        """
        raw = self.backward(cache, grad_out)
        if not self.adapters:
            return raw
        out = {}
        for name in sorted(self.adapters):
            g_a, g_b = grads_from_weight_grad(self.adapters[name], raw[name])
            out[f"{name}.lora_a"] = g_a
            out[f"{name}.lora_b"] = g_b
        return out

    def attention_inputs(self, prompt, x_t, t: float, gamma: float = 1.0, tau: float = 1.0):
        """Per-block (Q, K) tensors for offline attention-mass analysis."""
        _, cache = self.forward(prompt, x_t, t, gamma, tau, want_cache=True)
        return [(blk["q"], blk["k"]) for blk in cache["blocks"]]

    # ----- persistence -------------------------------------------------------------

    def save(self, path) -> None:
        """Versioned single-file checkpoint: config, weights, adapter factors."""
        meta = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "adapters": {
                name: {"rank": ad.rank, "alpha": ad.alpha}
                for name, ad in sorted(self.adapters.items())
            },
        }
        arrays = dict(self.params)
        for name, ad in self.adapters.items():
            arrays[f"{name}.lora_a"] = ad.a
            arrays[f"{name}.lora_b"] = ad.b
        save_arrays(path, meta, arrays)

    @classmethod
    def load(cls, path) -> "ToyModel":
        meta, arrays = load_arrays(path)
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise OSError(f"{path}: not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
        cfg = ModelConfig(**meta["config"])
        adapters = {}
        for name, info in meta.get("adapters", {}).items():
            try:
                a = arrays.pop(f"{name}.lora_a")
                b = arrays.pop(f"{name}.lora_b")
            except KeyError as exc:
                raise OSError(f"{path}: adapter arrays missing for {name}") from exc
            adapters[name] = LoraAdapter(a=a, b=b, alpha=float(info["alpha"]), rank=int(info["rank"]))
        try:
            model = cls(cfg, params=arrays)
        except ShapeError as exc:
            raise OSError(f"{path}: corrupt checkpoint: {exc}") from exc
        model.adapters = adapters
        return model
