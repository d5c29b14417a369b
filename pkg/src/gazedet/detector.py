"""A small DETR-style set-prediction detector with a gaze-biased encoder.

Frames are cut into non-overlapping patches, linearly embedded and passed
through pre-norm transformer encoder layers whose self-attention receives the
gaze column bias. Learned object queries cross-attend to the encoder output
(by default with the same bias); each query yields class logits (plus a
no-object class) and a sigmoid box. With ``reference_head`` each query also
picks a reference point by attending over the patch grid: the box centre is
predicted as an offset from it and the pooled patch content feeds the class
head, which makes localisation far easier to learn at this scale.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .attention import AttentionConfig, AttentionMaps, PatchGrid, gaze_bias, multi_head_attention, patch_centers
from .boxes import Box, giou_tensor, roi_scale
from .errors import ConfigurationError, ContractError, DimensionError, DivergenceError
from .gaze_pipeline import GazeRecord
from .matching import hungarian_match, match_cost
from .numerics import Tensor
from .seeding import child_rng

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class DetectorConfig:
    image_size: int = 64
    patch_size: int = 8
    channels: int = 3
    d_model: int = 32
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 1
    n_queries: int = 8
    n_classes: int = 6
    ffn_mult: int = 2
    alpha: float = 0.7
    lambda1: float = 0.5
    lambda2: float = 0.3
    lambda3: float = 0.5
    w_cls: float = 1.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    no_object_weight: float = 0.1
    # gaze components: position bias, direction factor, pupil/depth box scaling
    use_gaze: bool = True
    use_direction: bool = True
    use_roi_scaling: bool = True
    pupil_direct: bool = False
    gaze_layers: tuple[bool, ...] | None = None
    # the gaze bias also steers the decoder's cross-attention and reference point
    gaze_in_decoder: bool = True
    # "patch" measures gaze-to-patch distances in patch widths, "normalized" in frame units
    bias_unit: str = "patch"
    # box centres offset from an attention-weighted reference point; class head reads the pooled content
    reference_head: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigurationError("image_size must be divisible by patch_size")
        if self.d_model % self.n_heads:
            raise ConfigurationError("d_model must be divisible by n_heads")
        if self.alpha < 0:
            raise ConfigurationError("alpha must be non-negative")
        if self.gaze_layers is not None and len(self.gaze_layers) != self.n_encoder_layers:
            raise ConfigurationError("gaze_layers needs one flag per encoder layer")
        if self.bias_unit not in ("normalized", "patch"):
            raise ConfigurationError(f"unknown bias_unit {self.bias_unit!r}")

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_side ** 2

    @property
    def grid(self) -> PatchGrid:
        return patch_centers(self.grid_side, self.grid_side)

    @property
    def lambdas(self) -> tuple[float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3)

    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.n_heads, self.d_model, self.alpha)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["gaze_layers"] is not None:
            d["gaze_layers"] = list(d["gaze_layers"])
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> DetectorConfig:
        known = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in obj.items() if k in known}
        if kwargs.get("gaze_layers") is not None:
            kwargs["gaze_layers"] = tuple(kwargs["gaze_layers"])
        return cls(**kwargs)


@dataclass
class Detection:
    box: Box
    class_id: int
    confidence: float
    query_index: int = 0

    def to_dict(self) -> dict:
        return {"class_id": int(self.class_id), "confidence": float(self.confidence),
                "box": [float(v) for v in self.box.as_list()]}


@dataclass
class LabeledFrame:
    """One training/evaluation example: frame, optional gaze, ground-truth set."""

    frame: np.ndarray
    gaze: GazeRecord | None
    classes: np.ndarray
    boxes: np.ndarray
    frame_id: str = ""


@dataclass
class DetectorOutput:
    logits: Tensor                 # (B, n_queries, n_classes + 1)
    boxes: Tensor                  # (B, n_queries, 4) as cx, cy, w, h
    encoder_maps: list[AttentionMaps]
    decoder_maps: list[AttentionMaps] = field(default_factory=list)

    def attention_heat(self, layer: int = -1) -> np.ndarray:
        """Per-patch attention score averaged over heads, ``(B, L)``."""
        return self.encoder_maps[layer].weights.mean(axis=-2).mean(axis=-2)


# parameters ------------------------------------------------------------------

def init_params(cfg: DetectorConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = child_rng(seed, "init")
    d = cfg.d_model
    hidden = cfg.ffn_mult * d
    params: dict[str, Tensor] = {}

    def put(name, array):
        params[name] = Tensor(np.asarray(array, dtype=np.float64), requires_grad=True, name=name)

    def dense(name, n_in, n_out):
        put(name + ".w", rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out)))
        put(name + ".b", np.zeros(n_out))

    def norm(name):
        put(name + ".g", np.ones(d))
        put(name + ".b", np.zeros(d))

    def attn(name):
        for key in ("wq", "wk", "wv", "wo"):
            put(f"{name}.{key}", rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d)))
        put(name + ".bo", np.zeros(d))

    patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels
    dense("embed", patch_dim, d)
    put("pos", rng.normal(0.0, 0.1, size=(cfg.n_patches, d)))
    for i in range(cfg.n_encoder_layers):
        norm(f"enc{i}.ln1")
        attn(f"enc{i}.attn")
        norm(f"enc{i}.ln2")
        dense(f"enc{i}.ffn1", d, hidden)
        dense(f"enc{i}.ffn2", hidden, d)
    put("query", rng.normal(0.0, 1.0, size=(cfg.n_queries, d)))
    for i in range(cfg.n_decoder_layers):
        norm(f"dec{i}.ln1")
        attn(f"dec{i}.self")
        norm(f"dec{i}.ln2")
        attn(f"dec{i}.cross")
        norm(f"dec{i}.ln3")
        dense(f"dec{i}.ffn1", d, hidden)
        dense(f"dec{i}.ffn2", hidden, d)
    norm("head.ln")
    dense("cls", d, cfg.n_classes + 1)
    dense("box1", d, d)
    dense("box2", d, 4)
    if cfg.reference_head:
        dense("ref.q", d, d)
        # no key bias: it would shift every score of a row equally
        put("ref.k.w", rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d)))
        dense("ref.v", d, d)
    # start boxes near the frame centre with a modest size
    params["box2.b"].data[:] = [0.0, 0.0, -1.4, -1.4]
    return params


def n_parameters(params: dict[str, Tensor]) -> int:
    return sum(p.size for p in params.values())


def _attn_weights(params, prefix):
    return {k: params[f"{prefix}.{k}"] for k in ("wq", "wk", "wv", "wo", "bo")}


def _ln(x, params, prefix):
    return nx.layer_norm(x, params[prefix + ".g"], params[prefix + ".b"])


def _dense(x, params, prefix):
    return nx.matmul(x, params[prefix + ".w"]) + params[prefix + ".b"]


# forward ---------------------------------------------------------------------

def patchify(frames: np.ndarray, patch_size: int) -> np.ndarray:
    """``(B, H, W, C)`` frames to ``(B, L, P*P*C)`` patch vectors in row-major scan order."""
    b, h, w, c = frames.shape
    rows, cols = h // patch_size, w // patch_size
    x = frames.reshape(b, rows, patch_size, cols, patch_size, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, rows * cols, patch_size * patch_size * c)


def _as_batch(frames) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 3:
        frames = frames[None]
    return frames


def patch_embed(frames, params: dict[str, Tensor], cfg: DetectorConfig) -> Tensor:
    """Embed patches and add the learned position embedding; returns ``(B, L, d_model)``."""
    frames = _as_batch(frames)
    expected = (cfg.image_size, cfg.image_size, cfg.channels)
    if frames.shape[1:] != expected:
        raise DimensionError(f"frame shape {frames.shape[1:]} does not match configured {expected}")
    patches = patchify(frames, cfg.patch_size)
    return _dense(Tensor(patches), params, "embed") + params["pos"]


def gaze_bias_batch(records: Sequence[GazeRecord | None], cfg: DetectorConfig) -> np.ndarray | None:
    """Stack per-frame patch biases; ``None`` when gaze is disabled or absent for every frame."""
    if not cfg.use_gaze or all(r is None or not r.valid for r in records):
        return None
    grid = cfg.grid
    if cfg.bias_unit == "patch":
        grid = PatchGrid(grid.rows, grid.cols, grid.centers * cfg.grid_side)
    rows = []
    for rec in records:
        if rec is None or not rec.valid:
            rows.append(np.zeros(cfg.n_patches))
            continue
        if cfg.bias_unit == "patch":
            rec = GazeRecord(tuple(np.asarray(rec.g_xy) * cfg.grid_side), rec.d, rec.p, rec.g_hat, rec.valid)
        rows.append(gaze_bias(rec, grid, use_direction=cfg.use_direction))
    return np.stack(rows)


def forward(frames, records, params: dict[str, Tensor], cfg: DetectorConfig) -> DetectorOutput:
    """Run the detector on a frame or a ``(B, H, W, C)`` batch.

    ``records`` is a single record, ``None`` or a per-frame sequence. Outputs
    always carry the batch axis.
    """
    frames = _as_batch(frames)
    batch = frames.shape[0]
    if records is None or isinstance(records, GazeRecord):
        records = [records] * batch
    if len(records) != batch:
        raise DimensionError(f"{len(records)} gaze records for {batch} frames")
    acfg = cfg.attention()
    bias = gaze_bias_batch(records, cfg)

    x = patch_embed(frames, params, cfg)
    enc_maps = []
    for i in range(cfg.n_encoder_layers):
        layer_bias = bias if cfg.gaze_layers is None or cfg.gaze_layers[i] else None
        a, maps = multi_head_attention(_ln(x, params, f"enc{i}.ln1"), _attn_weights(params, f"enc{i}.attn"),
                                       acfg, layer_bias)
        x = x + a
        h = nx.relu(_dense(_ln(x, params, f"enc{i}.ln2"), params, f"enc{i}.ffn1"))
        x = x + _dense(h, params, f"enc{i}.ffn2")
        enc_maps.append(maps)

    memory = x
    t = params["query"] + np.zeros((batch, cfg.n_queries, cfg.d_model))
    dec_maps = []
    for i in range(cfg.n_decoder_layers):
        a, _ = multi_head_attention(_ln(t, params, f"dec{i}.ln1"), _attn_weights(params, f"dec{i}.self"), acfg)
        t = t + a
        a, maps = multi_head_attention(_ln(t, params, f"dec{i}.ln2"), _attn_weights(params, f"dec{i}.cross"),
                                       acfg, bias if cfg.gaze_in_decoder else None, memory=memory)
        t = t + a
        h = nx.relu(_dense(_ln(t, params, f"dec{i}.ln3"), params, f"dec{i}.ffn1"))
        t = t + _dense(h, params, f"dec{i}.ffn2")
        dec_maps.append(maps)

    t = _ln(t, params, "head.ln")
    if cfg.reference_head:
        # each query points at the patches it looks at: the box centre is an
        # offset from the pointed-at location and the class head also reads
        # the content found there
        q = _dense(t, params, "ref.q")
        k = nx.matmul(memory, params["ref.k.w"])
        ref_scores = nx.matmul(q, nx.transpose(k)) * (1.0 / math.sqrt(cfg.d_model))
        if cfg.gaze_in_decoder and bias is not None and cfg.alpha != 0.0:
            ref_scores = ref_scores + cfg.alpha * bias[:, None, :]
        w = nx.softmax_rows(ref_scores)
        ref = nx.matmul(w, cfg.grid.centers)
        ref_logit = nx.log(ref) - nx.log(1.0 - ref)
        t = t + _dense(nx.matmul(w, memory), params, "ref.v")
    logits = _dense(t, params, "cls")
    box_logits = _dense(nx.relu(_dense(t, params, "box1")), params, "box2")
    if cfg.reference_head:
        zeros = nx.Tensor(np.zeros((batch, cfg.n_queries, 2)))
        box_logits = box_logits + nx.concat([ref_logit, zeros], axis=-1)
    boxes = nx.sigmoid(box_logits)
    return DetectorOutput(logits, boxes, enc_maps, dec_maps)


# loss ------------------------------------------------------------------------

def match_batch(logits: np.ndarray, boxes: np.ndarray, targets, cfg: DetectorConfig) -> list[np.ndarray]:
    """Hungarian assignment per frame; returns ``query_for_gt`` arrays."""
    out = []
    for b, (classes, gt_boxes) in enumerate(targets):
        cost = match_cost(logits[b], boxes[b], classes, gt_boxes, cfg.w_cls, cfg.w_l1, cfg.w_giou)
        out.append(hungarian_match(cost))
    return out


def detr_loss(logits: Tensor, boxes: Tensor, targets, assignments, cfg: DetectorConfig) -> Tensor:
    """Set-prediction loss for matched predictions.

    Weighted cross-entropy over every query (unmatched queries target the
    no-object class, weighted by ``cfg.no_object_weight``) plus
    ``w_l1 * L1 + w_giou * (1 - GIoU)`` summed over matched pairs and divided
    by the number of ground-truth boxes.
    """
    if logits.ndim == 2:
        logits = nx.reshape(logits, (1, *logits.shape))
        boxes = nx.reshape(boxes, (1, *boxes.shape))
    batch, n_queries, n_out = logits.shape
    no_object = n_out - 1
    labels = np.full((batch, n_queries), no_object, dtype=np.int64)
    idx_b, idx_q, matched = [], [], []
    for b, ((classes, gt_boxes), query_for_gt) in enumerate(zip(targets, assignments)):
        classes = np.asarray(classes, dtype=np.int64)
        gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
        if len(query_for_gt) != len(classes):
            raise ContractError("assignment does not cover every ground-truth object")
        for g, q in enumerate(query_for_gt):
            labels[b, q] = classes[g]
            idx_b.append(b)
            idx_q.append(int(q))
            matched.append(gt_boxes[g])
    class_weights = np.ones(n_out)
    class_weights[no_object] = cfg.no_object_weight
    loss = nx.cross_entropy(nx.reshape(logits, (batch * n_queries, n_out)), labels.reshape(-1), class_weights)
    if matched:
        n_boxes = float(len(matched))
        pred = boxes[np.asarray(idx_b), np.asarray(idx_q)]
        target = np.stack(matched)
        l1 = nx.tabs(pred - target).sum() * (1.0 / n_boxes)
        giou_term = (1.0 - giou_tensor(pred, target)).sum() * (1.0 / n_boxes)
        loss = loss + cfg.w_l1 * l1 + cfg.w_giou * giou_term
    return loss


def batch_loss(frames, records, targets, params, cfg: DetectorConfig) -> Tensor:
    out = forward(frames, records, params, cfg)
    if not (np.all(np.isfinite(out.logits.data)) and np.all(np.isfinite(out.boxes.data))):
        # non-finite outputs cannot be matched; surface them as a non-finite loss
        return Tensor(np.array(np.nan))
    assignments = match_batch(out.logits.data, out.boxes.data, targets, cfg)
    return detr_loss(out.logits, out.boxes, targets, assignments, cfg)


# inference -------------------------------------------------------------------

def class_probabilities(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _box_from_array(arr) -> Box:
    cx, cy, w, h = (float(v) for v in arr)
    x0, y0 = max(cx - w / 2, 0.0), max(cy - h / 2, 0.0)
    x1, y1 = min(cx + w / 2, 1.0), min(cy + h / 2, 1.0)
    return Box.from_xyxy(x0, y0, x1, y1)


def select_top_query(logits: np.ndarray) -> tuple[int, int, float]:
    """Pick ``(query, class, confidence)`` for one frame's ``(n_queries, C + 1)`` logits.

    Queries whose arg-max is a real class compete on that probability; ties go
    to the lowest query index. If every query prefers no-object, the largest
    real-class probability over all queries is used instead.
    """
    probs = class_probabilities(np.asarray(logits, dtype=np.float64))
    no_object = probs.shape[-1] - 1
    best = np.argmax(probs, axis=-1)
    candidates = np.flatnonzero(best != no_object)
    if candidates.size:
        conf = probs[candidates, best[candidates]]
        q = int(candidates[int(np.argmax(conf))])
        return q, int(best[q]), float(probs[q, best[q]])
    real = probs[:, :no_object]
    flat = int(np.argmax(real))
    q, c = divmod(flat, no_object)
    return q, c, float(real[q, c])


def attention_in_box(heat: np.ndarray, box: Box, grid: PatchGrid) -> float:
    """Mean per-patch attention over patches whose centres fall inside ``box``."""
    x0, y0, x1, y1 = box.xyxy()
    c = grid.centers
    inside = (c[:, 0] >= x0) & (c[:, 0] <= x1) & (c[:, 1] >= y0) & (c[:, 1] <= y1)
    if not inside.any():
        col = min(int(box.cx * grid.cols), grid.cols - 1)
        row = min(int(box.cy * grid.rows), grid.rows - 1)
        return float(heat[row * grid.cols + col])
    return float(heat[inside].mean())


def refine_box(box: Box, heat: np.ndarray, rec: GazeRecord | None, cfg: DetectorConfig) -> Box:
    """Gaze/depth/pupil box scaling, or the box unchanged when disabled or gaze is missing."""
    if not (cfg.use_gaze and cfg.use_roi_scaling) or rec is None or not rec.valid:
        return box
    score = attention_in_box(heat, box, cfg.grid)
    return roi_scale(box, score, rec.p, rec.d, cfg.lambdas, cfg.pupil_direct)


def select_top_detection(logits: np.ndarray, boxes: np.ndarray, heat: np.ndarray | None = None,
                         rec: GazeRecord | None = None, cfg: DetectorConfig | None = None) -> Detection:
    """Highest-confidence detection of one frame, with its gaze-scaled box when configured."""
    q, c, conf = select_top_query(logits)
    box = _box_from_array(boxes[q])
    if cfg is not None and heat is not None:
        box = refine_box(box, heat, rec, cfg)
    return Detection(box=box, class_id=c, confidence=conf, query_index=q)


def all_detections(logits: np.ndarray, boxes: np.ndarray, heat=None, rec=None, cfg=None) -> list[Detection]:
    """Every query whose arg-max is a real class, in query order."""
    probs = class_probabilities(np.asarray(logits, dtype=np.float64))
    no_object = probs.shape[-1] - 1
    out = []
    for q in range(probs.shape[0]):
        c = int(np.argmax(probs[q]))
        if c == no_object:
            continue
        box = _box_from_array(boxes[q])
        if cfg is not None and heat is not None:
            box = refine_box(box, heat, rec, cfg)
        out.append(Detection(box=box, class_id=c, confidence=float(probs[q, c]), query_index=q))
    return out


@dataclass
class Prediction:
    frame_id: str
    top: Detection
    detections: list[Detection]
    heat: np.ndarray


def predict(samples: Sequence[LabeledFrame], params, cfg: DetectorConfig, batch_size: int = 32) -> list[Prediction]:
    out = []
    with nx.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            frames = np.stack([s.frame for s in chunk])
            records = [s.gaze if cfg.use_gaze else None for s in chunk]
            res = forward(frames, records, params, cfg)
            heat = res.attention_heat()
            for b, s in enumerate(chunk):
                rec = s.gaze
                top = select_top_detection(res.logits.data[b], res.boxes.data[b], heat[b], rec, cfg)
                dets = all_detections(res.logits.data[b], res.boxes.data[b], heat[b], rec, cfg)
                out.append(Prediction(s.frame_id, top, dets, heat[b]))
    return out


# training --------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict[str, Tensor]
    history: list[dict]
    initial_loss: float


def dataset_loss(samples: Sequence[LabeledFrame], params, cfg: DetectorConfig, batch_size: int = 32) -> float:
    total = 0.0
    with nx.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            loss = _chunk_loss(chunk, params, cfg)
            total += loss.item() * len(chunk)
    return total / max(len(samples), 1)


def _chunk_loss(chunk, params, cfg):
    frames = np.stack([s.frame for s in chunk])
    records = [s.gaze if cfg.use_gaze else None for s in chunk]
    targets = [(s.classes, s.boxes) for s in chunk]
    return batch_loss(frames, records, targets, params, cfg)


def train(train_set: Sequence[LabeledFrame], cfg: DetectorConfig, epochs: int, seed: int = 0,
          batch_size: int = 8, lr: float = 1e-3, val_set: Sequence[LabeledFrame] | None = None,
          params: dict[str, Tensor] | None = None) -> TrainResult:
    """Mini-batch Adam on the set-prediction loss; fully determined by ``seed``."""
    if len(train_set) == 0:
        raise ContractError("training split is empty")
    params = init_params(cfg, seed) if params is None else params
    initial = dataset_loss(train_set, params, cfg)
    if not np.isfinite(initial):
        raise DivergenceError(0)
    history: list[dict] = []
    if epochs <= 0:
        return TrainResult(params, history, initial)
    opt = nx.Adam(params.values(), lr=lr)
    order_rng = child_rng(seed, "shuffle")
    step = 0
    for epoch in range(epochs):
        order = order_rng.permutation(len(train_set))
        running = 0.0
        for start in range(0, len(order), batch_size):
            chunk = [train_set[i] for i in order[start:start + batch_size]]
            loss = _chunk_loss(chunk, params, cfg)
            if not np.isfinite(loss.data):
                raise DivergenceError(step)
            opt.zero_grad()
            nx.backward(loss)
            opt.step()
            step += 1
            running += loss.item() * len(chunk)
        row = {"epoch": epoch + 1, "train_loss": running / len(train_set)}
        if val_set:
            row["val_loss"] = dataset_loss(val_set, params, cfg)
        history.append(row)
        logger.info("epoch %d train_loss %.5f", epoch + 1, row["train_loss"])
    return TrainResult(params, history, initial)


# checkpoints -----------------------------------------------------------------

def save_checkpoint(path: str | Path, params: dict[str, Tensor], cfg: DetectorConfig,
                    extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "config": cfg.to_dict(),
        "tensors": {name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
                    for name, t in params.items()},
    }
    if extra:
        payload["extra"] = extra
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], DetectorConfig]:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format_version") != CHECKPOINT_FORMAT:
        raise ContractError(f"unsupported checkpoint format {payload.get('format_version')}")
    cfg = DetectorConfig.from_dict(payload["config"])
    params = {name: Tensor(np.asarray(t["data"], dtype=np.float64).reshape(t["shape"]), requires_grad=True, name=name)
              for name, t in payload["tensors"].items()}
    return params, cfg
