"""Head importance scores, gaze alignment weights and the beta/gamma tuning protocol.

All functions work on per-head attention *scores*: the column means of an
``L x L`` attention matrix (how much attention each key patch receives on
average). Under softmax-normalised attention those scores sum to one, which
makes the plain importance average exactly ``1/L`` for every head; the
``pre_softmax`` mode averages the raw logits instead so heads can be told
apart.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import AttentionMaps, PatchGrid
from .errors import ContractError, DimensionError
from .gaze_pipeline import GazeRecord

MODES = ("post_softmax", "pre_softmax")
DEFAULT_BETA = 0.7
DEFAULT_GAMMA = 0.3
DEFAULT_ROI_SIDE = 0.15
TUNING_PAIRS = ((1.0, 0.0), (0.9, 0.1), (0.7, 0.3), (0.5, 0.5))


def attn_score(attn_map) -> np.ndarray:
    """Mean attention each key column receives over all query rows."""
    m = np.asarray(attn_map, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"attention map must be square, got shape {m.shape}")
    return m.mean(axis=0)


def attn_scores(maps) -> np.ndarray:
    """Vectorised :func:`attn_score` over any leading dimensions ``(..., L, L)``."""
    m = np.asarray(maps, dtype=np.float64)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise DimensionError(f"attention maps must be square, got shape {m.shape}")
    return m.mean(axis=-2)


def _stack_maps(maps, mode: str) -> np.ndarray:
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
    if isinstance(maps, AttentionMaps):
        maps = [maps]
    if isinstance(maps, np.ndarray):
        arr = maps.astype(np.float64)
    else:
        if len(maps) == 0:
            raise ContractError("head importance needs at least one attention map")
        picked = []
        for m in maps:
            if isinstance(m, AttentionMaps):
                m = m.weights if mode == "post_softmax" else m.logits
            picked.append(np.asarray(m, dtype=np.float64))
        arr = np.stack(picked)
    if arr.size == 0 or arr.shape[0] == 0:
        raise ContractError("head importance needs at least one attention map")
    if arr.ndim == 3:  # a single head per image
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[-1] != arr.shape[-2]:
        raise DimensionError(f"expected (N, H, L, L) maps, got {arr.shape}")
    return arr


def head_importance_prob(maps, mode: str = "post_softmax") -> np.ndarray:
    """Per-head importance: dataset mean of the patch-averaged attention score.

    ``maps`` is an ``(N, H, L, L)`` array, or a sequence of per-image
    ``(H, L, L)`` arrays or :class:`AttentionMaps`. For ``AttentionMaps`` the
    mode decides whether the softmax weights or the logits are read; plain
    arrays are used as given.
    """
    arr = _stack_maps(maps, mode)
    return attn_scores(arr).mean(axis=(0, 2))


def importance_from_scores(scores) -> np.ndarray:
    """Same reduction as :func:`head_importance_prob` starting from ``(N, ..., L)`` scores."""
    s = np.asarray(scores, dtype=np.float64)
    if s.shape[0] == 0:
        raise ContractError("empty dataset")
    return s.mean(axis=(0, s.ndim - 1))


def gaze_roi_mask(rec: GazeRecord, grid: PatchGrid, roi_side: float = DEFAULT_ROI_SIDE) -> np.ndarray:
    """Boolean patch mask: cells whose rectangle overlaps a square RoI around the gaze.

    Overlap must have positive area, so a cell that only touches the RoI
    along an edge is not counted.
    """
    if not 0.0 < roi_side <= 1.0:
        raise ContractError(f"roi_side must lie in (0, 1], got {roi_side}")
    if rec is None or not rec.valid:
        raise ContractError("gaze RoI needs a valid gaze record")
    gx, gy = rec.g_xy
    half = roi_side / 2
    rx0, ry0 = max(gx - half, 0.0), max(gy - half, 0.0)
    rx1, ry1 = min(gx + half, 1.0), min(gy + half, 1.0)
    cells = grid.cell_bounds()
    ox = np.minimum(cells[:, 2], rx1) - np.maximum(cells[:, 0], rx0)
    oy = np.minimum(cells[:, 3], ry1) - np.maximum(cells[:, 1], ry0)
    return (ox > 0) & (oy > 0)


def gaze_alignment_weight(scores, mask) -> float:
    """Attention mass a head places inside the gaze RoI."""
    s = np.asarray(scores, dtype=np.float64)
    g = np.asarray(mask, dtype=np.float64)
    if s.shape != g.shape:
        raise DimensionError(f"scores {s.shape} and mask {g.shape} differ")
    return float(np.dot(s, g))


def gaze_head_importance(i_prob, mean_w_gaze, beta: float = DEFAULT_BETA, gamma: float = DEFAULT_GAMMA):
    """Blend of plain importance and gaze alignment: ``beta * i_prob + gamma * mean_w``."""
    if beta < 0 or gamma < 0:
        raise ContractError("beta and gamma must be non-negative")
    return beta * np.asarray(i_prob, dtype=np.float64) + gamma * np.asarray(mean_w_gaze, dtype=np.float64)


@dataclass
class HeadReport:
    """Per ``(layer, head)`` importance table for one dataset."""

    i_prob: np.ndarray  # (layers, heads)
    mean_w_gaze: np.ndarray
    i_gaze: np.ndarray
    beta: float
    gamma: float
    n_images: int
    n_patches: int
    mode: str = "post_softmax"

    def rows(self) -> list[dict]:
        out = []
        n_layers, n_heads = self.i_prob.shape
        for layer in range(n_layers):
            for head in range(n_heads):
                out.append({"layer": layer, "head": head,
                            "i_prob": float(self.i_prob[layer, head]),
                            "mean_w_gaze": float(self.mean_w_gaze[layer, head]),
                            "i_gaze": float(self.i_gaze[layer, head])})
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["layer", "head", "i_prob", "mean_w_gaze", "i_gaze"],
                                    lineterminator="\n")
            writer.writeheader()
            for row in self.rows():
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def head_report(post_scores, pre_scores, masks, beta: float = DEFAULT_BETA, gamma: float = DEFAULT_GAMMA,
                mode: str = "post_softmax") -> HeadReport:
    """Build a :class:`HeadReport`.

    ``post_scores``/``pre_scores`` are ``(N, layers, heads, L)`` column means
    of the softmax weights and of the logits; ``masks`` is ``(N, L)``. The
    alignment weight always uses the softmax scores (attention mass), while
    ``mode`` picks which scores feed the plain importance.
    """
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
    post = np.asarray(post_scores, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    if post.ndim != 4 or post.shape[0] == 0:
        raise ContractError(f"expected non-empty (N, layers, heads, L) scores, got {post.shape}")
    if masks.shape != (post.shape[0], post.shape[-1]):
        raise DimensionError(f"masks {masks.shape} do not match scores {post.shape}")
    source = post if mode == "post_softmax" else np.asarray(pre_scores, dtype=np.float64)
    i_prob = importance_from_scores(source)
    w = np.einsum("nlhj,nj->nlh", post, masks)
    mean_w = w.mean(axis=0)
    return HeadReport(i_prob, mean_w, gaze_head_importance(i_prob, mean_w, beta, gamma),
                      beta, gamma, post.shape[0], post.shape[-1], mode)


def threshold_heatmap(heat) -> np.ndarray:
    """Binary mask of patches at or above the heatmap mean."""
    h = np.asarray(heat, dtype=np.float64)
    return h >= h.mean()


def mask_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass
class TuningResult:
    best: tuple[float, float]
    table: list[tuple[float, float, float]] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["beta", "gamma", "mean_iou"])
            for beta, gamma, score in self.table:
                writer.writerow([repr(float(beta)), repr(float(gamma)), repr(float(score))])


def tune_beta_gamma(scores, gaze_masks, reference_masks,
                    candidates: Sequence[tuple[float, float]] = TUNING_PAIRS,
                    i_prob=None) -> TuningResult:
    """Pick the ``(beta, gamma)`` whose importance-weighted heatmaps best match human attention.

    ``scores`` is ``(N, H, L)`` softmax attention scores (heads of several
    layers may be flattened into ``H``), ``gaze_masks`` and
    ``reference_masks`` are ``(N, L)`` booleans. For each pair the per-image
    heatmap ``sum_h I_gaze[h] * scores[n, h]`` is thresholded at its mean and
    compared to the reference by IoU. Ties keep the earlier candidate.
    """
    candidates = list(candidates)
    if not candidates:
        raise ContractError("need at least one (beta, gamma) candidate")
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 3 or s.shape[0] == 0:
        raise ContractError(f"expected non-empty (N, H, L) scores, got {s.shape}")
    gm = np.asarray(gaze_masks, dtype=np.float64)
    ref = np.asarray(reference_masks, dtype=bool)
    if gm.shape != (s.shape[0], s.shape[2]) or ref.shape != gm.shape:
        raise DimensionError("masks must be (N, L) and match the scores")
    base = importance_from_scores(s) if i_prob is None else np.asarray(i_prob, dtype=np.float64)
    mean_w = np.einsum("nhj,nj->nh", s, gm).mean(axis=0)
    table = []
    for beta, gamma in candidates:
        weights = gaze_head_importance(base, mean_w, beta, gamma)
        heat = np.einsum("h,nhj->nj", weights, s)
        ious = [mask_iou(threshold_heatmap(heat[n]), ref[n]) for n in range(s.shape[0])]
        table.append((float(beta), float(gamma), float(np.mean(ious))))
    best = max(range(len(table)), key=lambda k: (table[k][2], -k))
    return TuningResult(best=(table[best][0], table[best][1]), table=table)


def encoder_scores(samples, params, cfg, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Run a detector over ``samples`` and return ``(post, pre)`` encoder scores.

    Both arrays are ``(N, layers, heads, L)``: column means of the softmax
    weights and of the logits fed to the softmax.
    """
    from . import numerics as nx
    from .detector import forward

    post, pre = [], []
    with nx.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            frames = np.stack([s.frame for s in chunk])
            records = [s.gaze if cfg.use_gaze else None for s in chunk]
            out = forward(frames, records, params, cfg)
            post.append(np.stack([attn_scores(m.weights) for m in out.encoder_maps], axis=1))
            pre.append(np.stack([attn_scores(m.logits) for m in out.encoder_maps], axis=1))
    if not post:
        raise ContractError("no samples to score")
    return np.concatenate(post), np.concatenate(pre)
