"""Detection and classification scores plus the ablation sweeps.

Average precision follows the COCO convention: detections are ranked by
confidence, greedily matched to unmatched ground truth of the same class, and
the precision envelope is sampled at 101 recall points.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .boxes import Box, iou
from .detector import Detection, DetectorConfig, LabeledFrame, Prediction, predict, train
from .errors import ContractError, DimensionError, UndefinedSimilarityError
from .gaze_pipeline import GazeRecord
from .importance import TUNING_PAIRS, encoder_scores, gaze_roi_mask, tune_beta_gamma

logger = logging.getLogger(__name__)

__all__ = ["iou", "map_at", "average_precision", "classification_metrics", "gaze_label_assign",
           "attention_alignment", "EvalResult", "evaluate", "ablation_grid", "run_ablation"]

NO_PREDICTION = -1
RECALL_POINTS = np.linspace(0.0, 1.0, 101)

ALPHA_SWEEP = (0.0, 0.1, 0.2, 0.5, 0.7, 1.0, 2.0)
LAMBDA_TRIPLES = ((0.5, 0.2, 0.2), (0.5, 0.2, 0.3), (0.5, 0.2, 0.5), (0.5, 0.3, 0.5),
                  (0.5, 0.5, 0.5), (0.7, 0.3, 0.5), (0.3, 0.3, 0.5))
COMPONENT_ROWS = ("none", "+g_xy", "+g_xy+g_hat", "+g_xy+g_hat+p+d")
ABLATIONS = ("components", "alpha", "lambda", "beta_gamma")


# average precision -----------------------------------------------------------

def _interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return 0.0
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    # precision envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < envelope.size, envelope[np.minimum(idx, envelope.size - 1)], 0.0)
    return float(sampled.mean())


def average_precision(preds: Sequence[Sequence[Detection]], gts: Sequence[Sequence[tuple[int, Box]]],
                      class_id: int, iou_thresh: float) -> tuple[float, int]:
    """AP of one class and its ground-truth count."""
    ranked = []
    for frame, dets in enumerate(preds):
        for d in dets:
            if d.class_id == class_id:
                ranked.append((-d.confidence, frame, d.query_index, d))
    ranked.sort(key=lambda r: r[:3])
    gt_boxes = [[b for c, b in frame_gts if c == class_id] for frame_gts in gts]
    n_gt = sum(len(g) for g in gt_boxes)
    used = [np.zeros(len(g), dtype=bool) for g in gt_boxes]
    tp = np.zeros(len(ranked))
    for k, (_, frame, _, det) in enumerate(ranked):
        best, best_iou = -1, -np.inf
        for j, gt in enumerate(gt_boxes[frame]):
            if used[frame][j]:
                continue
            overlap = iou(det.box, gt)
            if overlap >= iou_thresh and overlap > best_iou:
                best, best_iou = j, overlap
        if best >= 0:
            used[frame][best] = True
            tp[k] = 1.0
    return _interpolated_ap(tp, n_gt), n_gt


def map_at(preds: Sequence[Sequence[Detection]], gts: Sequence[Sequence[tuple[int, Box]]],
           iou_thresh: float = 0.5, per_class: dict | None = None) -> float:
    """Mean AP over classes with at least one ground-truth box.

    ``preds[i]`` are the detections of frame ``i``; ``gts[i]`` its
    ``(class, Box)`` pairs. When ``per_class`` is given it is filled with
    ``class -> AP``.
    """
    if len(preds) != len(gts):
        raise DimensionError(f"{len(preds)} prediction lists for {len(gts)} frames")
    classes = sorted({int(c) for frame in gts for c, _ in frame})
    aps = []
    for c in classes:
        ap, _ = average_precision(preds, gts, c, iou_thresh)
        aps.append(ap)
        if per_class is not None:
            per_class[c] = ap
    return float(np.mean(aps)) if aps else 0.0


# classification --------------------------------------------------------------

def classification_metrics(pred, true) -> tuple[float, float]:
    """Accuracy and macro-F1 (classes absent from both predictions and truth are skipped)."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise DimensionError("prediction and truth lengths differ")
    if pred.size == 0:
        raise ContractError("classification metrics need at least one sample")
    accuracy = float(np.mean(pred == true))
    f1s = []
    for c in np.union1d(pred, true):
        tp = np.sum((pred == c) & (true == c))
        fp = np.sum((pred == c) & (true != c))
        fn = np.sum((pred != c) & (true == c))
        f1s.append(2 * tp / (2 * tp + fp + fn))
    return accuracy, float(np.mean(f1s))


def gaze_label_assign(detections: Sequence[Detection], rec: GazeRecord) -> int:
    """Label of the most confident detection containing the gaze point.

    Falls back to the most confident detection overall, and to
    ``NO_PREDICTION`` when there are no detections.
    """
    if not detections:
        return NO_PREDICTION
    if rec is None or not rec.valid:
        raise ContractError("gaze label assignment needs a valid gaze record")
    gx, gy = rec.g_xy
    containing = [d for d in detections if d.box.contains(gx, gy)]
    pool = containing or list(detections)
    return max(pool, key=lambda d: d.confidence).class_id


def attention_alignment(heat, mask) -> float:
    """Cosine similarity between a per-patch attention vector and a binary mask."""
    a = np.asarray(heat, dtype=np.float64).ravel()
    m = np.asarray(mask, dtype=np.float64).ravel()
    if a.shape != m.shape:
        raise DimensionError(f"heat {a.shape} and mask {m.shape} differ")
    na, nm = np.linalg.norm(a), np.linalg.norm(m)
    if na == 0 or nm == 0:
        raise UndefinedSimilarityError("cosine similarity of a zero vector")
    return float(np.dot(a, m) / (na * nm))


# full evaluation -------------------------------------------------------------

@dataclass
class EvalResult:
    map_50: float
    map_75: float
    accuracy: float
    macro_f1: float
    attention_alignment: float
    mean_iou: float = 0.0
    per_class: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def ground_truth(samples: Sequence[LabeledFrame]) -> list[list[tuple[int, Box]]]:
    out = []
    for s in samples:
        boxes = np.asarray(s.boxes, dtype=np.float64).reshape(-1, 4)
        out.append([(int(c), Box(*b)) for c, b in zip(np.asarray(s.classes).ravel(), boxes)])
    return out


def true_labels(samples: Sequence[LabeledFrame]) -> np.ndarray:
    """Class of the attended object, stored first in every frame's ground truth."""
    return np.array([int(np.asarray(s.classes).ravel()[0]) for s in samples])


def evaluate(predictions: Sequence[Prediction], samples: Sequence[LabeledFrame], grid,
             roi_side: float = 0.15, label_rule: str = "top") -> EvalResult:
    """Score predictions against labelled frames.

    ``label_rule="top"`` classifies by the most confident detection;
    ``"gaze"`` uses :func:`gaze_label_assign` on all detections.
    """
    if len(predictions) != len(samples):
        raise DimensionError("one prediction per sample is required")
    if not samples:
        raise ContractError("nothing to evaluate")
    gts = ground_truth(samples)
    dets = [p.detections for p in predictions]
    per50: dict[int, float] = {}
    per75: dict[int, float] = {}
    m50 = map_at(dets, gts, 0.5, per50)
    m75 = map_at(dets, gts, 0.75, per75)
    if label_rule == "top":
        labels = [p.top.class_id for p in predictions]
    elif label_rule == "gaze":
        labels = [gaze_label_assign(p.detections or [p.top], s.gaze) for p, s in zip(predictions, samples)]
    else:
        raise ContractError(f"unknown label rule {label_rule!r}")
    acc, f1 = classification_metrics(labels, true_labels(samples))
    cos = []
    for p, s in zip(predictions, samples):
        if s.gaze is None or not s.gaze.valid:
            continue
        cos.append(attention_alignment(p.heat, gaze_roi_mask(s.gaze, grid, roi_side)))
    ious = [iou(p.top.box, gt[0][1]) for p, gt in zip(predictions, gts) if gt]
    counts: dict[int, int] = {}
    for frame in gts:
        for c, _ in frame:
            counts[c] = counts.get(c, 0) + 1
    per_class = [{"class_id": c, "n_gt": counts[c], "ap_50": per50[c], "ap_75": per75[c]} for c in sorted(per50)]
    return EvalResult(m50, m75, acc, f1, float(np.mean(cos)) if cos else 0.0,
                      float(np.mean(ious)) if ious else 0.0, per_class)


# ablations -------------------------------------------------------------------

def ablation_grid(which: str) -> list[tuple[dict, dict]]:
    """``(row_labels, config_overrides)`` cells of one sweep, in table order."""
    if which == "components":
        variants = [dict(use_gaze=False, use_direction=False, use_roi_scaling=False),
                    dict(use_gaze=True, use_direction=False, use_roi_scaling=False),
                    dict(use_gaze=True, use_direction=True, use_roi_scaling=False),
                    dict(use_gaze=True, use_direction=True, use_roi_scaling=True)]
        return [({"model": name}, v) for name, v in zip(COMPONENT_ROWS, variants)]
    if which == "alpha":
        return [({"alpha": a}, {"alpha": a}) for a in ALPHA_SWEEP]
    if which == "lambda":
        return [({"lambda1": l1, "lambda2": l2, "lambda3": l3}, {"lambda1": l1, "lambda2": l2, "lambda3": l3})
                for l1, l2, l3 in LAMBDA_TRIPLES]
    if which == "beta_gamma":
        return [({"beta": b, "gamma": g}, {}) for b, g in TUNING_PAIRS]
    raise ContractError(f"unknown ablation {which!r}; choose from {ABLATIONS}")


# Settings that only change inference, so cells differing only in these share a model.
_INFERENCE_ONLY = ("use_roi_scaling", "lambda1", "lambda2", "lambda3", "pupil_direct")


def training_signature(cfg: DetectorConfig) -> str:
    d = cfg.to_dict()
    for k in _INFERENCE_ONLY:
        d.pop(k)
    return json.dumps(d, sort_keys=True)


ABLATION_COLUMNS = {
    "components": ["model", "accuracy", "macro_f1", "map_50", "map_75", "error"],
    "alpha": ["alpha", "accuracy", "attention_alignment", "error"],
    "lambda": ["lambda1", "lambda2", "lambda3", "accuracy", "mean_iou", "error"],
    "beta_gamma": ["beta", "gamma", "mean_iou", "error"],
}


def run_ablation(train_set: Sequence[LabeledFrame], test_set: Sequence[LabeledFrame], which: str,
                 base_cfg: DetectorConfig | None = None, seed: int = 0, epochs: int = 20,
                 batch_size: int = 8, lr: float = 1e-3, roi_side: float = 0.15,
                 cells: list[tuple[dict, dict]] | None = None,
                 trainer: Callable | None = None) -> list[dict]:
    """Train and score one model per grid cell with shared data and seed.

    A failing cell yields a row whose ``error`` field holds the message; the
    sweep carries on. Models are reused across cells whose training settings
    coincide (e.g. the lambda sweep trains a single model).
    """
    base_cfg = base_cfg or DetectorConfig()
    cells = ablation_grid(which) if cells is None else cells
    if not cells:
        raise ContractError("ablation grid is empty")
    trainer = trainer or (lambda tr, cfg: train(tr, cfg, epochs, seed=seed, batch_size=batch_size, lr=lr).params)
    models: dict[str, dict] = {}
    rows = []
    bg_table = None
    for labels, overrides in cells:
        row = dict(labels)
        try:
            cfg = replace(base_cfg, **overrides)
            key = training_signature(cfg)
            if key not in models:
                logger.info("training model for %s", labels)
                models[key] = trainer(train_set, cfg)
            params = models[key]
            if which == "beta_gamma":
                if bg_table is None:
                    bg_table = _beta_gamma_table(test_set, params, cfg, roi_side,
                                                 [(c[0]["beta"], c[0]["gamma"]) for c in cells])
                row["mean_iou"] = bg_table[(labels["beta"], labels["gamma"])]
            else:
                res = evaluate(predict(test_set, params, cfg), test_set, cfg.grid, roi_side)
                row.update(accuracy=res.accuracy, macro_f1=res.macro_f1, map_50=res.map_50, map_75=res.map_75,
                           attention_alignment=res.attention_alignment, mean_iou=res.mean_iou)
            row["error"] = ""
        except Exception as exc:  # recorded per row, the sweep continues
            logger.warning("ablation cell %s failed: %s", labels, exc)
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


def box_patch_mask(box: Box, grid) -> np.ndarray:
    """Patches whose cells overlap ``box`` with positive area."""
    bounds = grid.cell_bounds()
    x0, y0, x1, y1 = box.xyxy()
    return (bounds[:, 0] < x1) & (bounds[:, 2] > x0) & (bounds[:, 1] < y1) & (bounds[:, 3] > y0)


def _beta_gamma_table(samples, params, cfg, roi_side, pairs) -> dict:
    keep = [s for s in samples if s.gaze is not None and s.gaze.valid]
    post, _ = encoder_scores(keep, params, cfg)
    n, layers, heads, length = post.shape
    grid = cfg.grid
    gaze_masks = np.stack([gaze_roi_mask(s.gaze, grid, roi_side) for s in keep])
    refs = np.stack([box_patch_mask(Box(*np.asarray(s.boxes).reshape(-1, 4)[0]), grid) for s in keep])
    result = tune_beta_gamma(post.reshape(n, layers * heads, length), gaze_masks, refs, pairs)
    return {(b, g): score for b, g, score in result.table}


def write_rows_csv(path: str | Path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(c, "")) for c in columns])


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)
