"""Eye-tracker stream preprocessing: frame alignment, normalisation, augmentation.

Raw samples arrive at the tracker rate (pixels, metres, millimetres, eye-local
direction vectors). They are averaged onto video frame timestamps and turned
into :class:`GazeRecord` values whose fields all live in ``[0, 1]`` (or on the
unit sphere for the direction).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, ContractError, DegenerateDirectionError

DIRECTION_EPS = 1e-9
DEFAULT_DELTA_MAX = 0.02
CSV_COLUMNS = (
    "timestamp_ns", "gaze_x_px", "gaze_y_px", "depth_m", "pupil_l_mm", "pupil_r_mm",
    "dir_l_x", "dir_l_y", "dir_l_z", "dir_r_x", "dir_r_y", "dir_r_z",
)


@dataclass(frozen=True)
class RawGazeSample:
    """One tracker sample; any field other than the timestamp may be missing (``None``)."""

    timestamp_ns: int
    gaze_px: tuple[float, float] | None = None
    depth_m: float | None = None
    pupil_l_mm: float | None = None
    pupil_r_mm: float | None = None
    dir_l: tuple[float, float, float] | None = None
    dir_r: tuple[float, float, float] | None = None
    valid: bool = True


@dataclass(frozen=True)
class GazeRecord:
    """Per-frame normalised gaze features.

    ``d``, ``p`` and ``g_hat`` are ``None`` when the tracker did not provide
    them (or the direction was degenerate).
    """

    g_xy: tuple[float, float]
    d: float | None = None
    p: float | None = None
    g_hat: tuple[float, float, float] | None = None
    valid: bool = True

    def check(self) -> None:
        """Raise ``ContractError`` if a type invariant is broken."""
        gx, gy = self.g_xy
        if not (0.0 <= gx <= 1.0 and 0.0 <= gy <= 1.0):
            raise ContractError(f"g_xy out of range: {self.g_xy}")
        for name in ("d", "p"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} out of range: {v}")
        if self.valid and self.g_hat is not None:
            norm = math.sqrt(sum(c * c for c in self.g_hat))
            if abs(norm - 1.0) > 1e-9:
                raise ContractError(f"g_hat not unit length: {norm}")

    def to_dict(self) -> dict:
        return {"g_xy": list(self.g_xy), "d": self.d, "p": self.p,
                "g_hat": None if self.g_hat is None else list(self.g_hat), "valid": self.valid}

    @classmethod
    def from_dict(cls, obj: dict) -> GazeRecord:
        g_hat = obj.get("g_hat")
        return cls(tuple(obj["g_xy"]), obj.get("d"), obj.get("p"),
                   None if g_hat is None else tuple(g_hat), obj.get("valid", True))


@dataclass(frozen=True)
class CalibrationRange:
    pupil_min_mm: float
    pupil_max_mm: float
    depth_min_m: float
    depth_max_m: float

    def __post_init__(self):
        if not self.pupil_min_mm < self.pupil_max_mm:
            raise ConfigurationError("pupil range must satisfy min < max")
        if not self.depth_min_m < self.depth_max_m:
            raise ConfigurationError("depth range must satisfy min < max")


def _clamp01(v: float) -> float:
    return min(1.0, max(0.0, v))


def _mean_or_none(values: list) -> object:
    if not values:
        return None
    arr = np.asarray(values, dtype=np.float64)
    m = arr.mean(axis=0)
    return float(m) if m.ndim == 0 else tuple(float(c) for c in m)


def align_gaze_to_frames(samples: Sequence[RawGazeSample], frame_times: Sequence[int],
                         window_ns: int | None = None) -> list[RawGazeSample]:
    """Average all samples within ``±window_ns`` of each frame time.

    The default half-window is half the median frame interval. Frames with no
    sample in their window come back with ``valid=False``.
    """
    times = np.asarray([s.timestamp_ns for s in samples], dtype=np.int64)
    if times.size > 1 and np.any(np.diff(times) < 0):
        raise ContractError("gaze samples must be sorted by timestamp")
    frame_times = [int(t) for t in frame_times]
    if window_ns is None:
        if len(frame_times) > 1:
            window_ns = int(np.median(np.diff(frame_times)) // 2)
        else:
            window_ns = 1
    if window_ns <= 0:
        raise ContractError("window_ns must be positive")

    out = []
    for ft in frame_times:
        lo = int(np.searchsorted(times, ft - window_ns, side="left"))
        hi = int(np.searchsorted(times, ft + window_ns, side="right"))
        window = [s for s in samples[lo:hi] if s.valid]
        if not window:
            out.append(RawGazeSample(timestamp_ns=ft, valid=False))
            continue
        out.append(RawGazeSample(
            timestamp_ns=ft,
            gaze_px=_mean_or_none([s.gaze_px for s in window if s.gaze_px is not None]),
            depth_m=_mean_or_none([s.depth_m for s in window if s.depth_m is not None]),
            pupil_l_mm=_mean_or_none([s.pupil_l_mm for s in window if s.pupil_l_mm is not None]),
            pupil_r_mm=_mean_or_none([s.pupil_r_mm for s in window if s.pupil_r_mm is not None]),
            dir_l=_mean_or_none([s.dir_l for s in window if s.dir_l is not None]),
            dir_r=_mean_or_none([s.dir_r for s in window if s.dir_r is not None]),
        ))
    return out


def normalize_position(gaze_px: tuple[float, float], frame_size: tuple[int, int]) -> tuple[float, float]:
    w, h = frame_size
    if w <= 0 or h <= 0:
        raise ContractError("frame size must be positive")
    return _clamp01(gaze_px[0] / w), _clamp01(gaze_px[1] / h)


def normalize_depth(depth_m: float, calib: CalibrationRange) -> float:
    """Map depth onto [0, 1] with 0 = nearest of the video's fixed depth scale."""
    span = calib.depth_max_m - calib.depth_min_m
    if span <= 0:
        raise ConfigurationError("degenerate depth range")
    return _clamp01((depth_m - calib.depth_min_m) / span)


def normalize_pupil(pupil_l_mm: float | None, pupil_r_mm: float | None, calib: CalibrationRange) -> float:
    span = calib.pupil_max_mm - calib.pupil_min_mm
    if span <= 0:
        raise ConfigurationError("degenerate pupil range")
    eyes = [v for v in (pupil_l_mm, pupil_r_mm) if v is not None]
    if not eyes:
        raise ContractError("no pupil diameter available")
    return _clamp01((sum(eyes) / len(eyes) - calib.pupil_min_mm) / span)


def encode_direction(dir_l, dir_r) -> tuple[float, float, float]:
    """Unit vector along the sum of both eyes' unit directions."""
    left = np.asarray(dir_l, dtype=np.float64)
    right = np.asarray(dir_r, dtype=np.float64)
    nl, nr = np.linalg.norm(left), np.linalg.norm(right)
    if nl == 0 or nr == 0:
        raise ContractError("eye direction vectors must be nonzero")
    total = left / nl + right / nr
    norm = np.linalg.norm(total)
    if norm < DIRECTION_EPS:
        raise DegenerateDirectionError("eye directions cancel")
    u = total / norm
    return float(u[0]), float(u[1]), float(u[2])


def project2d(g_hat) -> np.ndarray | None:
    """Image-plane part of a 3-D direction, renormalised; ``None`` if it vanishes."""
    if g_hat is None:
        return None
    planar = np.asarray(g_hat[:2], dtype=np.float64)
    n = float(np.hypot(planar[0], planar[1]))
    if n < DIRECTION_EPS:
        return None
    return planar / n


def to_gaze_record(agg: RawGazeSample, frame_size: tuple[int, int], calib: CalibrationRange) -> GazeRecord:
    """Normalise one frame-aligned sample. Missing gaze position gives an invalid record."""
    if not agg.valid or agg.gaze_px is None:
        return GazeRecord(g_xy=(0.5, 0.5), valid=False)
    g_xy = normalize_position(agg.gaze_px, frame_size)
    d = None if agg.depth_m is None else normalize_depth(agg.depth_m, calib)
    p = None
    if agg.pupil_l_mm is not None or agg.pupil_r_mm is not None:
        p = normalize_pupil(agg.pupil_l_mm, agg.pupil_r_mm, calib)
    g_hat = None
    dirs = [v for v in (agg.dir_l, agg.dir_r) if v is not None and np.linalg.norm(v) > 0]
    if len(dirs) == 2:
        try:
            g_hat = encode_direction(*dirs)
        except DegenerateDirectionError:
            g_hat = None
    elif len(dirs) == 1:
        g_hat = encode_direction(dirs[0], dirs[0])
    return GazeRecord(g_xy=g_xy, d=d, p=p, g_hat=g_hat, valid=True)


def preprocess(samples: Sequence[RawGazeSample], frame_times: Sequence[int], frame_size: tuple[int, int],
               calib: CalibrationRange, window_ns: int | None = None) -> list[GazeRecord]:
    """Full chain: align to frames, then normalise every field."""
    aligned = align_gaze_to_frames(samples, frame_times, window_ns)
    return [to_gaze_record(a, frame_size, calib) for a in aligned]


# augmentation ----------------------------------------------------------------

def augment_gaze_shift(rec: GazeRecord, rng: np.random.Generator,
                       delta_max: float = DEFAULT_DELTA_MAX) -> GazeRecord:
    """Nudge the gaze point along its planar direction by up to ``delta_max * d``."""
    if not rec.valid:
        raise ContractError("cannot shift an invalid gaze record")
    delta = float(rng.uniform(0.0, delta_max)) if delta_max > 0 else 0.0
    direction = project2d(rec.g_hat)
    if direction is None or rec.d is None or delta == 0.0:
        return rec
    gx = _clamp01(rec.g_xy[0] + delta * rec.d * direction[0])
    gy = _clamp01(rec.g_xy[1] + delta * rec.d * direction[1])
    return replace(rec, g_xy=(gx, gy))


@dataclass(frozen=True)
class FrameTransform:
    """A frame augmentation.

    ``kind`` is ``"crop"`` (``params``: x0, y0, w, h as frame fractions),
    ``"rotate"`` (``params``: angle_deg, counter-clockwise on screen) or
    ``"color_jitter"`` (``params``: brightness, contrast, saturation factors).
    """

    kind: str
    params: tuple[float, ...] = ()


def _warp(frame: np.ndarray, src_of_dst, out_hw: tuple[int, int], order: int = 1) -> np.ndarray:
    """Resample ``frame`` on an output grid; ``src_of_dst`` maps output pixel centres to input pixel centres."""
    oh, ow = out_hw
    yy, xx = np.meshgrid(np.arange(oh, dtype=np.float64), np.arange(ow, dtype=np.float64), indexing="ij")
    sx, sy = src_of_dst(xx, yy)
    out = np.empty((oh, ow) + frame.shape[2:], dtype=np.float64)
    if frame.ndim == 2:
        return ndimage.map_coordinates(frame, [sy, sx], order=order, mode="constant")
    for c in range(frame.shape[2]):
        out[..., c] = ndimage.map_coordinates(frame[..., c], [sy, sx], order=order, mode="constant")
    return out


def _rotate_point(gx: float, gy: float, angle_deg: float, w: int, h: int) -> tuple[float, float]:
    t = math.radians(angle_deg)
    dx, dy = (gx - 0.5) * w, (gy - 0.5) * h
    rx = math.cos(t) * dx + math.sin(t) * dy
    ry = -math.sin(t) * dx + math.cos(t) * dy
    return 0.5 + rx / w, 0.5 + ry / h


def transform_gaze(g_xy: tuple[float, float], transform: FrameTransform,
                   frame_size: tuple[int, int]) -> tuple[float, float]:
    """Apply the geometric part of ``transform`` to a normalised gaze point (no clamping)."""
    gx, gy = g_xy
    if transform.kind == "crop":
        x0, y0, cw, ch = transform.params
        return (gx - x0) / cw, (gy - y0) / ch
    if transform.kind == "rotate":
        return _rotate_point(gx, gy, transform.params[0], *frame_size)
    return gx, gy


def inverse_transform(transform: FrameTransform) -> FrameTransform:
    if transform.kind == "crop":
        x0, y0, cw, ch = transform.params
        return FrameTransform("crop", (-x0 / cw, -y0 / ch, 1.0 / cw, 1.0 / ch))
    if transform.kind == "rotate":
        return FrameTransform("rotate", (-transform.params[0],))
    return transform


def augment_frame(frame: np.ndarray, rec: GazeRecord, transform: FrameTransform,
                  rng: np.random.Generator | None = None, *, min_crop_area: float = 0.6,
                  max_rotation_deg: float = 15.0):
    """Apply one augmentation to a ``H x W x C`` frame and its gaze record consistently.

    Returns ``(frame', rec')``, or ``None`` when the mapped gaze leaves the frame.
    ``rng`` is only consulted by callers that draw parameters; the transform
    itself is fully specified.
    """
    h, w = frame.shape[:2]
    kind = transform.kind
    if kind == "identity":
        return frame.copy(), rec
    if kind == "color_jitter":
        brightness, contrast, saturation = (tuple(transform.params) + (1.0, 1.0, 1.0))[:3]
        out = frame.astype(np.float64) * brightness
        grey = out.mean(axis=-1, keepdims=True) if out.ndim == 3 else out
        out = grey + (out - grey) * saturation
        out = out.mean() + (out - out.mean()) * contrast
        return np.clip(out, 0.0, 1.0), rec
    if kind == "crop":
        x0, y0, cw, ch = transform.params
        if cw * ch < min_crop_area - 1e-12 or cw <= 0 or ch <= 0:
            raise ConfigurationError(f"crop keeps {cw * ch:.3f} of the frame, below {min_crop_area}")
        if x0 < 0 or y0 < 0 or x0 + cw > 1 + 1e-12 or y0 + ch > 1 + 1e-12:
            raise ConfigurationError("crop window must lie inside the frame")

        def src(xx, yy):
            return (x0 * w - 0.5 + (xx + 0.5) * cw), (y0 * h - 0.5 + (yy + 0.5) * ch)

        out = _warp(frame, src, (h, w))
    elif kind == "rotate":
        angle = transform.params[0]
        if abs(angle) > max_rotation_deg:
            raise ConfigurationError(f"rotation {angle} exceeds ±{max_rotation_deg} degrees")
        t = math.radians(angle)
        cx, cy = w / 2.0, h / 2.0

        def src(xx, yy):
            dx, dy = xx + 0.5 - cx, yy + 0.5 - cy
            # inverse of the forward map used for gaze points
            sx = math.cos(t) * dx - math.sin(t) * dy
            sy = math.sin(t) * dx + math.cos(t) * dy
            return sx + cx - 0.5, sy + cy - 0.5

        out = _warp(frame, src, (h, w))
    else:
        raise ConfigurationError(f"unknown transform {kind!r}")

    gx, gy = transform_gaze(rec.g_xy, transform, (w, h))
    if not (0.0 <= gx <= 1.0 and 0.0 <= gy <= 1.0):
        return None
    g_hat = rec.g_hat
    if kind == "rotate" and g_hat is not None:
        t = math.radians(transform.params[0])
        x, y, z = g_hat
        g_hat = (math.cos(t) * x + math.sin(t) * y, -math.sin(t) * x + math.cos(t) * y, z)
        n = math.sqrt(sum(c * c for c in g_hat))
        g_hat = tuple(c / n for c in g_hat)
    return out, replace(rec, g_xy=(gx, gy), g_hat=g_hat)


def resize_with_gaze(frame: np.ndarray, rec: GazeRecord, target: tuple[int, int], letterbox: bool = False):
    """Resize to ``target = (W, H)``.

    Without letterboxing the frame is stretched and normalised gaze is
    unchanged. With letterboxing the content is scaled uniformly, centred and
    padded with zeros; gaze follows the same affine map.
    """
    tw, th = target
    if tw <= 0 or th <= 0:
        raise ContractError("target size must be positive")
    h, w = frame.shape[:2]
    if not letterbox:
        sx, sy = w / tw, h / th
        out = _warp(frame, lambda xx, yy: ((xx + 0.5) * sx - 0.5, (yy + 0.5) * sy - 0.5), (th, tw))
        return out, replace(rec, g_xy=(_clamp01(rec.g_xy[0]), _clamp01(rec.g_xy[1])))
    s = min(tw / w, th / h)
    ox, oy = (tw - w * s) / 2.0, (th - h * s) / 2.0
    out = _warp(frame, lambda xx, yy: ((xx + 0.5 - ox) / s - 0.5, (yy + 0.5 - oy) / s - 0.5), (th, tw))
    gx = (ox + rec.g_xy[0] * w * s) / tw
    gy = (oy + rec.g_xy[1] * h * s) / th
    return out, replace(rec, g_xy=(_clamp01(gx), _clamp01(gy)))


# file formats ----------------------------------------------------------------

def _cell(v) -> str:
    return "" if v is None else repr(float(v)) if not isinstance(v, int) else str(v)


def write_gaze_csv(path: str | Path, samples: Iterable[RawGazeSample]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for s in samples:
            gx, gy = s.gaze_px if s.gaze_px is not None else (None, None)
            dl = s.dir_l if s.dir_l is not None else (None,) * 3
            dr = s.dir_r if s.dir_r is not None else (None,) * 3
            writer.writerow([str(int(s.timestamp_ns)), _cell(gx), _cell(gy), _cell(s.depth_m),
                             _cell(s.pupil_l_mm), _cell(s.pupil_r_mm), *map(_cell, dl), *map(_cell, dr)])


def read_gaze_csv(path: str | Path) -> list[RawGazeSample]:
    def num(row, key):
        v = row[key].strip()
        return None if v == "" else float(v)

    def vec(row, prefix):
        vals = [num(row, f"{prefix}_{axis}") for axis in "xyz"]
        return None if any(v is None for v in vals) else tuple(vals)

    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            gx, gy = num(row, "gaze_x_px"), num(row, "gaze_y_px")
            out.append(RawGazeSample(
                timestamp_ns=int(row["timestamp_ns"]),
                gaze_px=None if gx is None or gy is None else (gx, gy),
                depth_m=num(row, "depth_m"),
                pupil_l_mm=num(row, "pupil_l_mm"),
                pupil_r_mm=num(row, "pupil_r_mm"),
                dir_l=vec(row, "dir_l"),
                dir_r=vec(row, "dir_r"),
            ))
    return out


def write_manifest(path: str | Path, entries: Sequence[dict]) -> None:
    """Frame manifest: a JSON array of ``{frame_id, timestamp_ns, image_path, label?, box?}``."""
    with open(path, "w") as fh:
        json.dump(list(entries), fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_manifest(path: str | Path) -> list[dict]:
    with open(path) as fh:
        entries = json.load(fh)
    for e in entries:
        for key in ("frame_id", "timestamp_ns", "image_path"):
            if key not in e:
                raise ContractError(f"manifest entry missing {key!r}: {e}")
    return entries
