"""Multi-head self-attention with an additive gaze bias on the pre-softmax logits.

The bias for key patch ``j`` falls off with squared distance between the gaze
point and the patch centre and is boosted when the patch lies along the
planar gaze direction. It does not depend on the query row, so it is added
as a column bias before the row softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, ContractError, DimensionError
from .gaze_pipeline import DIRECTION_EPS, GazeRecord, project2d
from .numerics import Tensor


@dataclass(frozen=True)
class PatchGrid:
    rows: int
    cols: int
    centers: np.ndarray  # (L, 2) as (x, y), scan order

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols

    def cell_bounds(self) -> np.ndarray:
        """Per-patch ``(x0, y0, x1, y1)`` rectangles in normalised coordinates."""
        half = np.array([0.5 / self.cols, 0.5 / self.rows])
        return np.concatenate([self.centers - half, self.centers + half], axis=1)


def patch_centers(rows: int, cols: int) -> PatchGrid:
    if rows < 1 or cols < 1:
        raise ContractError("grid needs at least one row and column")
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    centers = np.stack([(c.ravel() + 0.5) / cols, (r.ravel() + 0.5) / rows], axis=1)
    return PatchGrid(rows, cols, centers)


@dataclass(frozen=True)
class AttentionConfig:
    n_heads: int
    d_model: int
    alpha: float = 0.7

    def __post_init__(self):
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.alpha < 0:
            raise ConfigurationError("alpha must be non-negative")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class AttentionMaps:
    """Detached per-head maps; leading dims follow the input batch.

    ``weights``: post-softmax ``(..., H, Lq, Lk)``; ``logits``: the matrix fed
    to the softmax (query-key logits plus any gaze bias).
    """

    weights: np.ndarray
    logits: np.ndarray


def base_attention_logits(Q, K) -> Tensor:
    """Scaled dot products ``q_i . k_j / sqrt(d_k)`` for every query/key pair."""
    Q, K = nx.as_tensor(Q), nx.as_tensor(K)
    if Q.shape[-1] != K.shape[-1]:
        raise DimensionError(f"query/key widths differ: {Q.shape} vs {K.shape}")
    return nx.matmul(Q, nx.transpose(K)) * (1.0 / math.sqrt(Q.shape[-1]))


def gaze_bias(rec: GazeRecord, grid: PatchGrid, use_direction: bool = True) -> np.ndarray:
    """Per-patch bias in ``(0, 2]``: distance falloff times ``1 + |g2d . u_j|``."""
    if rec is None or not rec.valid:
        raise ContractError("gaze bias needs a valid gaze record")
    g = np.asarray(rec.g_xy, dtype=np.float64)
    offset = grid.centers - g
    dist = np.hypot(offset[:, 0], offset[:, 1])
    proximity = 1.0 / (1.0 + dist * dist)
    direction = project2d(rec.g_hat) if use_direction else None
    if direction is None:
        return proximity
    unit = offset / np.maximum(dist, DIRECTION_EPS)[:, None]
    factor = 1.0 + np.abs(unit @ direction)
    factor[dist < DIRECTION_EPS] = 1.0
    return proximity * factor


def apply_gaze_bias(logits, bias, alpha: float) -> Tensor:
    """Add ``alpha * bias[j]`` to every row of the logits (last axis indexes keys)."""
    logits = nx.as_tensor(logits)
    bias = np.asarray(bias, dtype=np.float64)
    if bias.shape[-1] != logits.shape[-1]:
        raise DimensionError(f"bias length {bias.shape[-1]} vs {logits.shape[-1]} keys")
    return logits + alpha * bias


def init_attention_weights(cfg: AttentionConfig, rng: np.random.Generator, d_in: int | None = None) -> dict:
    d_in = d_in or cfg.d_model
    scale = 1.0 / math.sqrt(d_in)

    def param(*shape, s=scale):
        return Tensor(rng.normal(0.0, s, size=shape), requires_grad=True)

    return {"wq": param(d_in, cfg.d_model), "wk": param(d_in, cfg.d_model),
            "wv": param(d_in, cfg.d_model), "wo": param(cfg.d_model, cfg.d_model,
                                                        s=1.0 / math.sqrt(cfg.d_model)),
            "bo": Tensor(np.zeros(cfg.d_model), requires_grad=True)}


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, length, width = x.shape
    x = nx.reshape(x, (*lead, length, n_heads, width // n_heads))
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return nx.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, n_heads, length, dk = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return nx.reshape(nx.transpose(x, axes), (*lead, length, n_heads * dk))


def multi_head_attention(x: Tensor, weights: dict, cfg: AttentionConfig, bias: np.ndarray | None = None,
                         memory: Tensor | None = None) -> tuple[Tensor, AttentionMaps]:
    """Batched attention of ``x`` over ``memory`` (self-attention when ``memory`` is None).

    ``bias`` has shape ``(..., Lk)`` matching the batch of ``x``; it is scaled
    by ``cfg.alpha`` and skipped entirely when ``alpha == 0``.
    """
    source = x if memory is None else memory
    q = _split_heads(nx.matmul(x, weights["wq"]), cfg.n_heads)
    k = _split_heads(nx.matmul(source, weights["wk"]), cfg.n_heads)
    v = _split_heads(nx.matmul(source, weights["wv"]), cfg.n_heads)
    logits = base_attention_logits(q, k)
    if bias is not None and cfg.alpha != 0.0:
        bias = np.asarray(bias, dtype=np.float64)
        logits = apply_gaze_bias(logits, bias[..., None, None, :], cfg.alpha)
    attn = nx.softmax_rows(logits)
    out = _merge_heads(nx.matmul(attn, v))
    y = nx.matmul(out, weights["wo"]) + weights["bo"]
    return y, AttentionMaps(weights=attn.data.copy(), logits=logits.data.copy())


def mha_forward(X, weights: dict, rec: GazeRecord | None, cfg: AttentionConfig,
                grid: PatchGrid | None = None, use_direction: bool = True) -> tuple[Tensor, AttentionMaps]:
    """Single-image gaze-biased self-attention over ``L x d_model`` patch tokens.

    Without a gaze record (or with ``alpha == 0``) this is a plain
    multi-head attention layer.
    """
    X = nx.as_tensor(X)
    if X.ndim != 2 or X.shape[1] != cfg.d_model:
        raise DimensionError(f"expected L x {cfg.d_model} tokens, got {X.shape}")
    bias = None
    if rec is not None:
        if grid is None:
            side = int(round(math.sqrt(X.shape[0])))
            if side * side != X.shape[0]:
                raise DimensionError("pass a PatchGrid for non-square token counts")
            grid = patch_centers(side, side)
        if grid.n_patches != X.shape[0]:
            raise DimensionError(f"grid has {grid.n_patches} patches for {X.shape[0]} tokens")
        bias = gaze_bias(rec, grid, use_direction)
    return multi_head_attention(X, weights, cfg, bias)
