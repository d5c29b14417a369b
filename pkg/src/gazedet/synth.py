"""Deterministic synthetic egocentric scenes with simulated gaze.

Each scene holds a few non-overlapping coloured shapes, one of which is the
attended target. Gaze is simulated as a noisy fixation on the target centre
and pushed through the same raw-sample normalisation path as real tracker
data, so in-memory and on-disk datasets agree exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .attention import patch_centers
from .boxes import Box, iou
from .detector import LabeledFrame
from .errors import ConfigurationError, ContractError, GenerationError
from .gaze_pipeline import (CalibrationRange, GazeRecord, RawGazeSample, read_gaze_csv, read_manifest,
                            to_gaze_record, write_gaze_csv, write_manifest)
from .seeding import child_rng

FRAME_INTERVAL_NS = 33_333_333
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)
PALETTE = np.array([
    [220, 40, 40], [40, 190, 60], [50, 80, 230],
    [225, 210, 40], [200, 60, 210], [40, 200, 210],
    [240, 140, 30], [150, 150, 150],
], dtype=np.float64)
SHAPES = ("rect", "disc", "stripes")


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 64
    patch_size: int = 8
    n_classes: int = 6
    objects_min: int = 1
    objects_max: int = 4
    size_range: tuple[float, float] = (0.16, 0.28)
    distractor: bool = False
    distractor_size: tuple[float, float] = (0.34, 0.44)
    gaze_noise_std: float = 0.02
    depth_range: tuple[float, float] = (0.5, 10.0)
    pupil_range_mm: tuple[float, float] = (2.0, 8.0)
    pupil_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigurationError("need at least two classes")
        if self.n_classes > len(PALETTE):
            raise ConfigurationError(f"at most {len(PALETTE)} classes are renderable")
        if self.gaze_noise_std < 0:
            raise ConfigurationError("gaze noise must be non-negative")
        if not 1 <= self.objects_min <= self.objects_max:
            raise ConfigurationError("objects range must satisfy 1 <= min <= max")

    @property
    def calibration(self) -> CalibrationRange:
        return CalibrationRange(self.pupil_range_mm[0], self.pupil_range_mm[1],
                                self.depth_range[0], self.depth_range[1])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> SceneConfig:
        obj = dict(obj)
        for key in ("size_range", "distractor_size", "depth_range", "pupil_range_mm"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    box: Box
    depth_m: float
    distractor: bool = False


@dataclass
class SceneSample:
    frame: np.ndarray                 # (H, W, 3) floats on the 1/255 lattice
    objects: list[SceneObject]
    target_index: int
    gaze: GazeRecord | None = None
    raw_gaze: RawGazeSample | None = None
    human_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    frame_id: str = ""

    @property
    def target(self) -> SceneObject:
        return self.objects[self.target_index]

    def to_labeled(self) -> LabeledFrame:
        """Training example whose ground truth is the attended object only."""
        t = self.target
        return LabeledFrame(self.frame, self.gaze, np.array([t.class_id]), np.array([t.box.as_list()]),
                            self.frame_id)


def _render(objects: Sequence[SceneObject], size: int, rng: np.random.Generator) -> np.ndarray:
    img = rng.uniform(20, 60, size=(size, size, 1)).repeat(3, axis=2)
    yy, xx = np.meshgrid((np.arange(size) + 0.5) / size, (np.arange(size) + 0.5) / size, indexing="ij")
    for obj in objects:
        x0, y0, x1, y1 = obj.box.xyxy()
        inside = (xx >= x0) & (xx <= x1) & (yy >= y0) & (yy <= y1)
        shape = SHAPES[obj.class_id % len(SHAPES)]
        if shape == "disc":
            rx, ry = obj.box.w / 2, obj.box.h / 2
            inside &= ((xx - obj.box.cx) / rx) ** 2 + ((yy - obj.box.cy) / ry) ** 2 <= 1.0
        elif shape == "stripes":
            inside &= (np.floor((yy - y0) * size / 2) % 2) == 0
        colour = PALETTE[obj.class_id] * (1.0 if obj.distractor else 0.85)
        img[inside] = colour
    return np.round(np.clip(img, 0, 255)) / 255.0


def _place(rng, size_range, placed: list[Box], attempts: int = 100, gap: float = 0.02) -> Box:
    for _ in range(attempts):
        w = rng.uniform(*size_range)
        h = rng.uniform(*size_range)
        cx = rng.uniform(w / 2, 1 - w / 2)
        cy = rng.uniform(h / 2, 1 - h / 2)
        box = Box(cx, cy, w, h)
        grown = Box(cx, cy, min(w + gap, 1.0), min(h + gap, 1.0))
        if all(iou(grown, other) == 0.0 for other in placed):
            return box
    raise GenerationError(f"could not place an object after {attempts} attempts")


def _size_fraction(box: Box, cfg: SceneConfig) -> float:
    lo, hi = cfg.size_range
    return float(np.clip((np.sqrt(box.w * box.h) - lo) / (hi - lo), 0.0, 1.0))


def generate_scene(cfg: SceneConfig, rng: np.random.Generator) -> SceneSample:
    """Place shapes, pick a target, render the frame and simulate gaze on the target."""
    n_objects = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    placed: list[Box] = []
    objects: list[SceneObject] = []
    dmin, dmax = cfg.depth_range
    if cfg.distractor:
        box = _place(rng, cfg.distractor_size, placed)
        placed.append(box)
        objects.append(SceneObject(int(rng.integers(cfg.n_classes)), box, dmin, distractor=True))
    for _ in range(n_objects):
        box = _place(rng, cfg.size_range, placed)
        placed.append(box)
        closeness = _size_fraction(box, cfg)
        depth = dmin + (dmax - dmin) * float(np.clip(1.0 - closeness + rng.normal(0, 0.05), 0.0, 1.0))
        objects.append(SceneObject(int(rng.integers(cfg.n_classes)), box, depth))
    first_real = 1 if cfg.distractor else 0
    target_index = first_real + int(rng.integers(n_objects))
    if cfg.distractor and objects[0].class_id == objects[target_index].class_id:
        shift = 1 + int(rng.integers(cfg.n_classes - 1))
        objects[0] = SceneObject((objects[0].class_id + shift) % cfg.n_classes, objects[0].box,
                                 objects[0].depth_m, distractor=True)
    frame = _render(objects, cfg.image_size, rng)
    sample = SceneSample(frame=frame, objects=objects, target_index=target_index)
    raw = simulate_raw_gaze(sample, cfg, rng)
    sample.raw_gaze = raw
    sample.gaze = to_gaze_record(raw, (cfg.image_size, cfg.image_size), cfg.calibration)
    sample.human_mask = target_mask(sample.target.box, cfg)
    return sample


def target_mask(box: Box, cfg: SceneConfig) -> np.ndarray:
    """Patches whose cells overlap ``box`` with positive area."""
    side = cfg.image_size // cfg.patch_size
    bounds = patch_centers(side, side).cell_bounds()
    x0, y0, x1, y1 = box.xyxy()
    return (bounds[:, 0] < x1) & (bounds[:, 2] > x0) & (bounds[:, 1] < y1) & (bounds[:, 3] > y0)


def simulate_raw_gaze(sample: SceneSample, cfg: SceneConfig, rng: np.random.Generator,
                      timestamp_ns: int = 0) -> RawGazeSample:
    """Tracker-style sample fixating the target centre with truncated Gaussian jitter."""
    target = sample.target
    noise = np.zeros(2)
    if cfg.gaze_noise_std > 0:
        while True:
            noise = rng.normal(0.0, cfg.gaze_noise_std, size=2)
            if np.hypot(*noise) <= 3.0 * cfg.gaze_noise_std:
                break
    gx = float(np.clip(target.box.cx + noise[0], 0.0, 1.0))
    gy = float(np.clip(target.box.cy + noise[1], 0.0, 1.0))
    closeness = _size_fraction(target.box, cfg)
    p = float(np.clip(1.0 - closeness + rng.normal(0.0, cfg.pupil_noise), 0.0, 1.0))
    lo, hi = cfg.pupil_range_mm
    pupil_mm = lo + p * (hi - lo)
    direction = (gx - 0.5, gy - 0.5, 1.0)
    size = cfg.image_size
    return RawGazeSample(timestamp_ns=timestamp_ns, gaze_px=(gx * size, gy * size), depth_m=target.depth_m,
                         pupil_l_mm=pupil_mm, pupil_r_mm=pupil_mm, dir_l=direction, dir_r=direction)


def simulate_gaze(sample: SceneSample, cfg: SceneConfig, rng: np.random.Generator) -> GazeRecord:
    raw = simulate_raw_gaze(sample, cfg, rng)
    return to_gaze_record(raw, (cfg.image_size, cfg.image_size), cfg.calibration)


# datasets --------------------------------------------------------------------

@dataclass
class DatasetSplits:
    train: list[SceneSample]
    val: list[SceneSample]
    test: list[SceneSample]
    cfg: SceneConfig
    regenerations: int = 0

    def split(self, name: str) -> list[SceneSample]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]

    def labeled(self, name: str) -> list[LabeledFrame]:
        return [s.to_labeled() for s in self.split(name)]


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = int(round(n * SPLIT_FRACTIONS[0]))
    n_val = int(round(n * SPLIT_FRACTIONS[1]))
    return n_train, n_val, n - n_train - n_val


def _balanced(splits: Sequence[list[SceneSample]], n_classes: int) -> bool:
    test = splits[2]
    counts = np.bincount([s.target.class_id for s in test], minlength=n_classes)
    if len(test) >= 3 * n_classes and counts.min() < 3:
        return False
    for part in splits:
        if len(part) >= 5 * n_classes:
            present = np.bincount([s.target.class_id for s in part], minlength=n_classes)
            if present.min() == 0:
                return False
    return True


def generate_dataset(cfg: SceneConfig, n_samples: int, max_regenerations: int = 10) -> DatasetSplits:
    """Seeded 70:15:15 split, regenerated until class counts pass validation."""
    if n_samples < 10:
        raise ContractError("need at least 10 samples")
    sizes = split_sizes(n_samples)
    for attempt in range(max_regenerations + 1):
        samples = []
        for i in range(n_samples):
            sample = generate_scene(cfg, child_rng(cfg.seed, f"scene/{attempt}/{i}"))
            sample.frame_id = f"f{i:06d}"
            sample.raw_gaze = _with_timestamp(sample.raw_gaze, i * FRAME_INTERVAL_NS)
            samples.append(sample)
        order = child_rng(cfg.seed, f"split/{attempt}").permutation(n_samples)
        bounds = np.cumsum(sizes)[:-1]
        parts = [[samples[i] for i in sorted(chunk)] for chunk in np.split(order, bounds)]
        if _balanced(parts, cfg.n_classes):
            return DatasetSplits(*parts, cfg=cfg, regenerations=attempt)
    raise GenerationError(f"class balance not reached after {max_regenerations} regenerations")


def _with_timestamp(raw: RawGazeSample, ts: int) -> RawGazeSample:
    return RawGazeSample(ts, raw.gaze_px, raw.depth_m, raw.pupil_l_mm, raw.pupil_r_mm, raw.dir_l, raw.dir_r)


def write_dataset(splits: DatasetSplits, out_dir: str | Path) -> None:
    """PNG frames, per-split manifests, one gaze CSV, calibration and split records."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    every = []
    split_record = {"seed": splits.cfg.seed, "fractions": list(SPLIT_FRACTIONS),
                    "regenerations": splits.regenerations}
    for name in ("train", "val", "test"):
        entries = []
        for s in splits.split(name):
            rel = f"images/{s.frame_id}.png"
            Image.fromarray(np.round(s.frame * 255).astype(np.uint8)).save(out / rel, optimize=False)
            entries.append({"frame_id": s.frame_id, "timestamp_ns": s.raw_gaze.timestamp_ns, "image_path": rel,
                            "label": s.target.class_id, "box": s.target.box.as_list()})
            every.append(s)
        write_manifest(out / f"manifest_{name}.json", entries)
        split_record[name] = [e["frame_id"] for e in entries]
    every.sort(key=lambda s: s.raw_gaze.timestamp_ns)
    write_gaze_csv(out / "gaze.csv", [s.raw_gaze for s in every])
    with open(out / "split.json", "w") as fh:
        json.dump(split_record, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(out / "scene_config.json", "w") as fh:
        json.dump(splits.cfg.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_split(data_dir: str | Path, name: str) -> list[LabeledFrame]:
    """Read one split back through the manifest + gaze CSV ingestion path."""
    from .gaze_pipeline import preprocess

    root = Path(data_dir)
    with open(root / "scene_config.json") as fh:
        cfg = SceneConfig.from_dict(json.load(fh))
    entries = read_manifest(root / f"manifest_{name}.json")
    samples = read_gaze_csv(root / "gaze.csv")
    times = [e["timestamp_ns"] for e in entries]
    records = preprocess(samples, times, (cfg.image_size, cfg.image_size), cfg.calibration,
                         window_ns=FRAME_INTERVAL_NS // 2)
    out = []
    for e, rec in zip(entries, records):
        frame = np.asarray(Image.open(root / e["image_path"]).convert("RGB"), dtype=np.float64) / 255.0
        classes = np.array([e["label"]]) if "label" in e else np.zeros(0, dtype=np.int64)
        boxes = np.array([e["box"]]) if "box" in e else np.zeros((0, 4))
        out.append(LabeledFrame(frame, rec if rec.valid else None, classes, boxes, e["frame_id"]))
    return out


def load_scene_config(data_dir: str | Path) -> SceneConfig:
    with open(Path(data_dir) / "scene_config.json") as fh:
        return SceneConfig.from_dict(json.load(fh))
