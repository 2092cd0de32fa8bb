"""Frame data: UCSD Ped1/Ped2 loading, preprocessing, splitting and a synthetic generator."""
from __future__ import annotations

import csv
import logging
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DomainError, FormatError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".tif", ".tiff", ".bmp", ".png", ".jpg", ".jpeg", ".pgm"}
SUBSETS = {"ped1": "UCSDped1", "ped2": "UCSDped2"}
SPLITS = ("Train", "Test")


@dataclass
class FrameSequence:
    """One clip: frames stacked as float32 [T, H, W, 1] in [0, 1]."""

    clip_id: str
    frames: np.ndarray
    source_size: tuple[int, int]

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 1:
            raise FormatError(f"clip {self.clip_id}: frames must be [T, H, W, 1], got {self.frames.shape}")
        if len(self.frames) == 0:
            raise FormatError(f"clip {self.clip_id} has no frames")

    def __len__(self):
        return len(self.frames)


@dataclass
class GroundTruth:
    """Per-clip frame labels (1 = anomalous)."""

    labels: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, clip_id):
        return self.labels[clip_id]

    def __contains__(self, clip_id):
        return clip_id in self.labels

    def validate(self, clips):
        for clip in clips:
            if clip.clip_id in self.labels and len(self.labels[clip.clip_id]) != len(clip):
                raise FormatError(f"clip {clip.clip_id}: {len(self.labels[clip.clip_id])} labels "
                                  f"for {len(clip)} frames")


# -- image decoding -----------------------------------------------------------

def read_frame(path) -> np.ndarray:
    """Decode one image file to a float32 [H, W] array in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(img, dtype=np.float64)
                scale = 65535.0 if mode.startswith("I;16") else max(float(arr.max()), 1.0)
                return (arr / scale).astype(np.float32)
            if mode in ("1", "L", "P"):
                arr = np.asarray(img.convert("L"), dtype=np.float32)
            else:
                # colour fallback: plain channel average
                arr = np.asarray(img.convert("RGB"), dtype=np.float32).mean(axis=2)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read frame {path}: {exc}") from exc
    return arr / 255.0


def write_frame(path, frame) -> None:
    arr = np.clip(np.rint(np.asarray(frame).reshape(frame.shape[0], frame.shape[1]) * 255), 0, 255)
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)


def list_frames(directory) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES and not p.name.startswith("."))


# -- preprocessing ------------------------------------------------------------

def _resize_axis(arr, size, axis):
    n = arr.shape[axis]
    if n == size:
        return arr
    # half-pixel centres (align_corners=False), edges clamped
    src = (np.arange(size) + 0.5) * (n / size) - 0.5
    src = np.clip(src, 0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    shape = [1] * arr.ndim
    shape[axis] = size
    frac = frac.reshape(shape)
    return np.take(arr, lo, axis=axis) * (1 - frac) + np.take(arr, hi, axis=axis) * frac


def preprocess(frame, target=(256, 256)) -> np.ndarray:
    """Bilinear resize of an [H, W] or [H, W, 1] frame to [th, tw, 1], clamped to [0, 1]."""
    frame = np.asarray(frame, dtype=np.float32)
    if frame.ndim == 3:
        if frame.shape[2] != 1:
            raise DomainError(f"expected a single-channel frame, got {frame.shape}")
        frame = frame[:, :, 0]
    th, tw = target
    out = _resize_axis(_resize_axis(frame.astype(np.float64), th, 0), tw, 1)
    return np.clip(out, 0, 1).astype(np.float32)[:, :, None]


def _load_clip(clip_dir: Path, size) -> FrameSequence:
    paths = list_frames(clip_dir)
    if not paths:
        raise FormatError(f"clip {clip_dir} contains no frames")
    raw = [read_frame(p) for p in paths]
    src = raw[0].shape
    for p, r in zip(paths, raw):
        if r.shape != src:
            raise FormatError(f"frame {p} has shape {r.shape}, expected {src}")
    target = size or src
    frames = np.stack([preprocess(r, target) for r in raw])
    return FrameSequence(clip_dir.name, frames, (int(src[0]), int(src[1])))


# -- UCSD ---------------------------------------------------------------------

_GT_LINE = re.compile(r"gt\{\s*(\d+)\s*\}\s*=\s*\[([^\]]*)\]")


def parse_frame_ranges(text: str) -> dict[int, list[tuple[int, int]]]:
    """Parse ``TestDataset.gt{k} = [a:b, c:d];`` lines into 1-based inclusive ranges per clip."""
    out = {}
    for m in _GT_LINE.finditer(text):
        ranges = []
        for part in m.group(2).split(","):
            part = part.strip()
            if not part:
                continue
            if ":" in part:
                a, b = part.split(":")
                ranges.append((int(a), int(b)))
            else:
                ranges.append((int(part), int(part)))
        out[int(m.group(1))] = ranges
    return out


def _labels_from_ranges(ranges, n_frames):
    labels = np.zeros(n_frames, dtype=np.int64)
    for a, b in ranges:
        labels[max(a - 1, 0):min(b, n_frames)] = 1
    return labels


def _labels_from_masks(mask_dir: Path, n_frames):
    paths = list_frames(mask_dir)
    if len(paths) != n_frames:
        raise FormatError(f"{mask_dir} has {len(paths)} masks for {n_frames} frames")
    return np.array([int(read_frame(p).max() > 0) for p in paths], dtype=np.int64)


def load_ucsd(root_dir, subset="ped2", split="Test", size=(256, 256)):
    """Load one UCSD subset/split as sorted FrameSequences.

    Returns ``(clips, ground_truth)``; ground truth is None for Train and for
    Test clips without annotations. Expects
    ``root/UCSDped{1,2}/{Train,Test}/{Train,Test}NNN/`` frame folders, with
    optional ``TestNNN_gt/`` mask folders and a ``UCSDped{n}.m`` frame-range file.
    """
    key = subset.lower()
    if key not in SUBSETS:
        raise DomainError(f"subset must be one of {sorted(SUBSETS)}")
    split = split.capitalize()
    if split not in SPLITS:
        raise DomainError(f"split must be one of {SPLITS}")
    base = Path(root_dir) / SUBSETS[key] / split
    if not base.is_dir():
        raise FileNotFoundError(f"UCSD directory not found: expected {base}")
    clip_re = re.compile(rf"^{split}(\d+)$")
    clip_dirs = sorted(p for p in base.iterdir() if p.is_dir() and clip_re.match(p.name))
    clips = [_load_clip(d, size) for d in clip_dirs]
    if split == "Train":
        return clips, None

    ranges = {}
    for mfile in sorted(base.glob("*.m")):
        ranges.update(parse_frame_ranges(mfile.read_text(errors="replace")))
    gt = GroundTruth()
    for clip in clips:
        idx = int(clip_re.match(clip.clip_id).group(1))
        mask_dir = base / f"{clip.clip_id}_gt"
        if mask_dir.is_dir():
            gt.labels[clip.clip_id] = _labels_from_masks(mask_dir, len(clip))
        elif idx in ranges:
            gt.labels[clip.clip_id] = _labels_from_ranges(ranges[idx], len(clip))
    if not gt.labels:
        return clips, None
    gt.validate(clips)
    return clips, gt


def split_train_val(clips, val_fraction=0.15):
    """Hold out the last ceil(fraction * n) clips, by sorted clip id, for validation."""
    if not 0 <= val_fraction < 1:
        raise DomainError("val_fraction must lie in [0, 1)")
    ordered = sorted(clips, key=lambda c: c.clip_id)
    n_val = math.ceil(round(val_fraction * len(ordered), 9))
    if n_val == 0:
        warnings.warn("validation split is empty", stacklevel=2)
        return ordered, []
    if n_val >= len(ordered):
        raise DomainError(f"val_fraction {val_fraction} leaves no training clips out of {len(ordered)}")
    return ordered[:-n_val], ordered[-n_val:]


def stack_frames(clips) -> np.ndarray:
    if not clips:
        return np.empty((0, 0, 0, 1), dtype=np.float32)
    return np.concatenate([c.frames for c in clips])


# -- synthetic data -----------------------------------------------------------

FAST_BLOB = "fast_blob"
LARGE_BLOB = "large_blob"


@dataclass(frozen=True)
class SyntheticConfig:
    """Moving bright blobs over one static textured background (a fixed camera).

    Normal clips carry small, slow blobs. In an anomalous clip one
    extra object appears at the onset frame: either a fast blob (drawn with
    motion blur) or an oversized one. The background depends on ``seed``
    only, so every clip generated from one config shares the scene.
    """

    frame_size: tuple[int, int] = (64, 64)
    clip_length: int = 40
    blob_count: tuple[int, int] = (1, 1)
    blob_radius: tuple[float, float] = (2.5, 3.0)
    blob_speed: tuple[float, float] = (0.3, 1.0)
    fast_speed: tuple[float, float] = (5.0, 8.0)
    fast_radius: tuple[float, float] = (4.0, 5.0)
    large_radius: tuple[float, float] = (10.0, 14.0)
    anomaly_types: tuple[str, ...] = (FAST_BLOB, LARGE_BLOB)
    onset: tuple[float, float] = (0.25, 0.5)
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.clip_length < 2:
            raise DomainError("clip_length must be >= 2")
        if min(self.frame_size) < 8:
            raise DomainError("frame_size must be at least 8x8")
        for t in self.anomaly_types:
            if t not in (FAST_BLOB, LARGE_BLOB):
                raise DomainError(f"unknown anomaly type {t!r}")


def _background(rng, h, w):
    field_ = rng.normal(size=(h // 8 + 2, w // 8 + 2))
    smooth = _resize_axis(_resize_axis(field_, h, 0), w, 1)
    smooth = (smooth - smooth.min()) / max(np.ptp(smooth), 1e-9)
    return 0.1 + 0.15 * smooth


def _disc(yy, xx, cy, cx, r):
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return np.clip(r + 0.5 - d, 0, 1)


class _Blob:
    def __init__(self, rng, h, w, radius, speed):
        self.r = radius
        # centre bounds; a blob wider than the frame stays centred
        self.y_lim = (min(radius, h / 2), max(h - radius, h / 2))
        self.x_lim = (min(radius, w / 2), max(w - radius, w / 2))
        self.y = rng.uniform(*self.y_lim)
        self.x = rng.uniform(*self.x_lim)
        angle = rng.uniform(0, 2 * np.pi)
        self.vy, self.vx = speed * np.sin(angle), speed * np.cos(angle)

    def step(self):
        self.y += self.vy
        self.x += self.vx
        if not self.y_lim[0] <= self.y <= self.y_lim[1]:
            self.vy = -self.vy
            self.y = float(np.clip(self.y, *self.y_lim))
        if not self.x_lim[0] <= self.x <= self.x_lim[1]:
            self.vx = -self.vx
            self.x = float(np.clip(self.x, *self.x_lim))

    def render(self, yy, xx, blur=False):
        if not blur:
            return _disc(yy, xx, self.y, self.x, self.r)
        # motion blur: union of discs along the last displacement
        out = np.zeros_like(yy)
        for t in np.linspace(0, 1, 8):
            out = np.maximum(out, _disc(yy, xx, self.y - t * self.vy, self.x - t * self.vx, self.r))
        return out


def _generate_clip(config, stream, clip_index, anomaly_type):
    h, w = config.frame_size
    bg = _background(np.random.default_rng(config.seed), h, w)
    rng = np.random.default_rng([config.seed, stream, clip_index])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    blobs = [_Blob(rng, h, w, rng.uniform(*config.blob_radius), rng.uniform(*config.blob_speed))
             for _ in range(rng.integers(config.blob_count[0], config.blob_count[1] + 1))]
    brightness = [rng.uniform(0.85, 0.9) for _ in blobs]
    onset = None
    odd = None
    if anomaly_type is not None:
        lo, hi = config.onset
        onset = int(rng.integers(int(lo * config.clip_length), max(int(hi * config.clip_length), int(lo * config.clip_length) + 1)))
        if anomaly_type == FAST_BLOB:
            odd = _Blob(rng, h, w, rng.uniform(*config.fast_radius), rng.uniform(*config.fast_speed))
        else:
            odd = _Blob(rng, h, w, rng.uniform(*config.large_radius), rng.uniform(*config.blob_speed))
    frames = np.empty((config.clip_length, h, w, 1), dtype=np.float32)
    for t in range(config.clip_length):
        img = bg.copy()
        for blob, b in zip(blobs, brightness):
            img = np.maximum(img, b * blob.render(yy, xx))
            blob.step()
        if odd is not None and t >= onset:
            img = np.maximum(img, 0.9 * odd.render(yy, xx, blur=anomaly_type == FAST_BLOB))
            odd.step()
        img = img + config.noise * rng.normal(size=img.shape)
        frames[t, :, :, 0] = np.clip(img, 0, 1)
    labels = np.zeros(config.clip_length, dtype=np.int64)
    if onset is not None:
        labels[onset:] = 1
    return frames, labels


def generate_synthetic(config: SyntheticConfig = SyntheticConfig(), n_clips=10, anomaly_rate=0.0, prefix="clip",
                       stream=0):
    """Return ``(clips, ground_truth)``; round(anomaly_rate * n_clips) clips are anomalous.

    Different ``stream`` values give independent clips of the same scene.
    """
    if not 0 <= anomaly_rate <= 1:
        raise DomainError("anomaly_rate must lie in [0, 1]")
    if n_clips < 1:
        raise DomainError("n_clips must be >= 1")
    rng = np.random.default_rng([config.seed, stream, 2**31 - 1])
    n_anom = int(round(anomaly_rate * n_clips))
    anomalous = set(rng.permutation(n_clips)[:n_anom].tolist())
    clips, gt = [], GroundTruth()
    for i in range(n_clips):
        kind = None
        if i in anomalous:
            kind = config.anomaly_types[int(rng.integers(len(config.anomaly_types)))]
        frames, labels = _generate_clip(config, stream, i, kind)
        clip_id = f"{prefix}{i:03d}"
        clips.append(FrameSequence(clip_id, frames, tuple(config.frame_size)))
        gt.labels[clip_id] = labels
    return clips, gt


LABEL_HEADER = ["clip", "frame", "label"]


def write_dataset(directory, clips, gt: GroundTruth | None = None):
    """Write ``clipNNN/frameNNNN.png`` images plus ``labels.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LABEL_HEADER)
        for clip in clips:
            clip_dir = directory / clip.clip_id
            clip_dir.mkdir(exist_ok=True)
            labels = gt[clip.clip_id] if gt is not None and clip.clip_id in gt else np.zeros(len(clip), int)
            for t, frame in enumerate(clip.frames):
                write_frame(clip_dir / f"frame{t:04d}.png", frame)
                writer.writerow([clip.clip_id, t, int(labels[t])])


def read_labels_csv(path) -> GroundTruth:
    rows: dict[str, dict[int, int]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LABEL_HEADER:
            raise FormatError(f"{path}: expected header {','.join(LABEL_HEADER)}")
        for row in reader:
            rows.setdefault(row["clip"], {})[int(row["frame"])] = int(row["label"])
    gt = GroundTruth()
    for clip_id, frames in rows.items():
        n = max(frames) + 1
        if sorted(frames) != list(range(n)):
            raise FormatError(f"{path}: clip {clip_id} has non-contiguous frame numbers")
        gt.labels[clip_id] = np.array([frames[i] for i in range(n)], dtype=np.int64)
    return gt


def load_frame_dirs(directory, size=None):
    """Load every sub-directory holding image frames as a clip.

    A directory that itself holds frames is loaded as a single clip. If a
    ``labels.csv`` is present its labels are returned too.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"frame directory not found: {directory}")
    subdirs = sorted(p for p in directory.iterdir() if p.is_dir() and list_frames(p))
    if subdirs:
        clips = [_load_clip(d, size) for d in subdirs]
    elif list_frames(directory):
        clips = [_load_clip(directory, size)]
    else:
        raise FormatError(f"no image frames found under {directory}")
    gt = None
    if (directory / "labels.csv").is_file():
        gt = read_labels_csv(directory / "labels.csv")
        gt.validate(clips)
    return clips, gt
