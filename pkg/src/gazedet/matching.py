"""Bipartite assignment of ground-truth objects to prediction slots."""

from __future__ import annotations

import numpy as np

from .boxes import pairwise_giou
from .errors import CapacityError, ContractError


def _assign_rows(cost: np.ndarray) -> np.ndarray:
    """Kuhn-Munkres with row/column potentials for an ``n x m`` matrix, ``n <= m``.

    Rows are inserted one at a time and each insertion grows a shortest
    augmenting path (Dijkstra over reduced costs). Returns the column for
    every row.
    """
    n, m = cost.shape
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j] = 1-based row matched to column j, 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for row in range(1, n + 1):
        owner[0] = row
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    cols = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            cols[owner[j] - 1] = j - 1
    return cols


def hungarian_match(cost) -> np.ndarray:
    """Minimum-cost injective map from ground truth to queries.

    ``cost`` is ``n_queries x n_gt``. Returns ``query_for_gt`` of length
    ``n_gt``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"cost must be a matrix, got shape {cost.shape}")
    n_queries, n_gt = cost.shape
    if n_gt > n_queries:
        raise CapacityError(f"{n_gt} objects cannot fit in {n_queries} queries")
    if n_gt == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.all(np.isfinite(cost)):
        raise ContractError("costs must be finite")
    return _assign_rows(cost.T)


def assignment_cost(cost, query_for_gt) -> float:
    cost = np.asarray(cost, dtype=np.float64)
    return float(sum(cost[q, g] for g, q in enumerate(query_for_gt)))


def match_cost(logits: np.ndarray, boxes: np.ndarray, gt_classes, gt_boxes,
               w_cls: float = 1.0, w_l1: float = 5.0, w_giou: float = 2.0) -> np.ndarray:
    """``n_queries x n_gt`` matching cost: negative class probability, box L1, negative GIoU."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    prob = shifted / shifted.sum(axis=-1, keepdims=True)
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if gt_classes.size == 0:
        return np.zeros((logits.shape[0], 0))
    cls_cost = -prob[:, gt_classes]
    l1_cost = np.abs(np.asarray(boxes)[:, None, :] - gt_boxes[None, :, :]).sum(axis=-1)
    giou_cost = -pairwise_giou(boxes, gt_boxes)
    return w_cls * cls_cost + w_l1 * l1_cost + w_giou * giou_cost
