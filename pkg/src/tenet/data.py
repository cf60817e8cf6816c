"""Clip containers, the synthetic moving-shapes corpus, dataset IO and augmentation.

Dataset layout on disk::

    <root>/manifest.txt                 one "<clip> <frame count>" per line
    <root>/<clip>/frames/00000.png      RGB, 8 bit
    <root>/<clip>/masks/00000.png       grayscale, 255 = salient
    <root>/<clip>/flow/00000.flo        Middlebury flow, frame n-1 -> n
"""

from __future__ import annotations

import logging
import math
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

logger = logging.getLogger(__name__)

FLOW_MAGIC = 202021.25
MANIFEST_NAME = "manifest.txt"

# Saturated colours shared by moving and distractor shapes, so colour alone
# never tells the two apart.
PALETTE = np.array(
    [
        [0.95, 0.10, 0.10],
        [0.10, 0.85, 0.15],
        [0.10, 0.25, 0.95],
        [0.95, 0.90, 0.10],
        [0.90, 0.15, 0.90],
        [0.05, 0.90, 0.90],
        [0.02, 0.02, 0.02],
        [0.98, 0.98, 0.98],
    ]
)


class FlowFormatError(ValueError):
    pass


class DatasetLayoutError(ValueError):
    pass


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float32)
        self.v = np.asarray(self.v, dtype=np.float32)
        if self.u.ndim != 2 or self.u.shape != self.v.shape:
            raise ValueError(f"flow components must be matching 2-D arrays, got {self.u.shape} and {self.v.shape}")
        if not (np.isfinite(self.u).all() and np.isfinite(self.v).all()):
            raise ValueError("flow contains non-finite values")

    @property
    def shape(self):
        return self.u.shape

    @classmethod
    def zeros(cls, height, width):
        return cls(np.zeros((height, width), np.float32), np.zeros((height, width), np.float32))

    @classmethod
    def from_array(cls, uv):
        return cls(uv[..., 0], uv[..., 1])

    def to_array(self):
        return np.stack([self.u, self.v], axis=-1)


@dataclass
class VideoClip:
    """Aligned frames (N,H,W,3), optional masks (N,H,W) and flows (N,H,W,2).

    ``flows[n]`` is the motion from frame n-1 to frame n; ``flows[0]`` is zero.
    """

    frames: np.ndarray
    masks: np.ndarray | None
    flows: np.ndarray
    name: str = ""
    flow_missing: bool = False

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.flows = np.asarray(self.flows, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be N x H x W x 3, got {self.frames.shape}")
        n, h, w, _ = self.frames.shape
        if n < 1:
            raise ValueError("a clip needs at least one frame")
        if self.flows.shape != (n, h, w, 2):
            raise ValueError(f"flows must be {(n, h, w, 2)}, got {self.flows.shape}")
        if not np.isfinite(self.flows).all():
            raise ValueError("flows contain non-finite values")
        if self.masks is not None:
            self.masks = np.asarray(self.masks, dtype=np.float32)
            if self.masks.shape != (n, h, w):
                raise ValueError(f"masks must be {(n, h, w)}, got {self.masks.shape}")
            if self.masks.min() < 0 or self.masks.max() > 1:
                raise ValueError("mask values must lie in [0, 1]")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def size(self):
        return self.frames.shape[1:3]

    def window(self, start, length, stride=1):
        idx = slice(start, start + (length - 1) * stride + 1, stride)
        masks = None if self.masks is None else self.masks[idx]
        return VideoClip(self.frames[idx], masks, self.flows[idx], name=f"{self.name}@{start}", flow_missing=self.flow_missing)


@dataclass(frozen=True)
class DatasetSpec:
    seed: int = 0
    num_clips: int = 5
    frames_per_clip: int = 4
    image_size: tuple[int, int] = (64, 64)
    moving_shapes: int = 1
    distractor_shapes: int = 1
    velocity_range: tuple[float, float] = (1.0, 3.0)
    target_foreground_fraction: float = 0.08

    def __post_init__(self):
        if self.num_clips < 1 or self.frames_per_clip < 1 or self.moving_shapes < 1:
            raise ValueError("num_clips, frames_per_clip and moving_shapes must be >= 1")
        if self.distractor_shapes < 0:
            raise ValueError("distractor_shapes must be >= 0")
        if not 0 < self.target_foreground_fraction < 1:
            raise ValueError("target_foreground_fraction must lie in (0, 1)")
        lo, hi = self.velocity_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad velocity_range {self.velocity_range}")
        h, w = self.image_size
        if h < 1 or w < 1:
            raise ValueError(f"bad image_size {self.image_size}")


@dataclass
class ShapeTrack:
    """One shape on a straight-line path; positions in pixels (x right, y down)."""

    kind: str  # "square" or "circle"
    center: tuple[float, float]  # (x, y) at frame 0
    radius: float  # half side for squares
    velocity: tuple[float, float] = (0.0, 0.0)  # (u, v) pixels per frame
    color: tuple[float, float, float] = (1.0, 0.0, 0.0)

    def center_at(self, n):
        return self.center[0] + n * self.velocity[0], self.center[1] + n * self.velocity[1]

    def coverage(self, n, height, width):
        cx, cy = self.center_at(n)
        ys, xs = np.mgrid[0:height, 0:width]
        if self.kind == "square":
            return (np.abs(xs - cx) <= self.radius) & (np.abs(ys - cy) <= self.radius)
        if self.kind == "circle":
            return (xs - cx) ** 2 + (ys - cy) ** 2 <= self.radius**2
        raise ValueError(f"unknown shape kind {self.kind!r}")

    def fits(self, n_frames, height, width):
        for n in (0, n_frames - 1):
            cx, cy = self.center_at(n)
            if cx - self.radius < 0 or cx + self.radius > width - 1:
                return False
            if cy - self.radius < 0 or cy + self.radius > height - 1:
                return False
        return True


@dataclass
class Manifest:
    root: Path
    clips: list[tuple[str, int]] = field(default_factory=list)

    def write(self):
        lines = [f"{name} {count}\n" for name, count in self.clips]
        (self.root / MANIFEST_NAME).write_text("".join(lines))


def render_clip(moving, distractors, n_frames, size, background=None):
    """Rasterise shape tracks into (frames, masks, flows).

    Moving shapes are drawn over distractors and define both the mask and the
    flow; a later moving shape occludes an earlier one.
    """
    h, w = size
    if background is None:
        background = np.full((h, w, 3), 0.5, np.float32)
    frames = np.empty((n_frames, h, w, 3), np.float32)
    masks = np.zeros((n_frames, h, w), np.float32)
    flows = np.zeros((n_frames, h, w, 2), np.float32)
    for n in range(n_frames):
        img = background.copy()
        for shape in distractors:
            img[shape.coverage(n, h, w)] = shape.color
        for shape in moving:
            cover = shape.coverage(n, h, w)
            img[cover] = shape.color
            masks[n][cover] = 1.0
            if n > 0:
                flows[n][cover] = shape.velocity
        frames[n] = img
    return frames, masks, flows


def _background(rng, h, w):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
    gx, gy = rng.uniform(-0.12, 0.12, size=2)
    base = rng.uniform(0.4, 0.6)
    tone = base + gx * (xs / max(w - 1, 1) - 0.5) + gy * (ys / max(h - 1, 1) - 0.5)
    tint = rng.uniform(-0.05, 0.05, size=3)
    noise = rng.normal(0.0, 0.02, size=(h, w, 3))
    return np.clip(tone[..., None] + tint + noise, 0, 1).astype(np.float32)


def _sample_shape(rng, spec, radius_area, moving):
    h, w = spec.image_size
    n = spec.frames_per_clip
    kind = "square" if rng.random() < 0.5 else "circle"
    radius = math.sqrt(radius_area) / 2 if kind == "square" else math.sqrt(radius_area / math.pi)
    color = tuple(PALETTE[rng.integers(len(PALETTE))])
    if moving:
        speed = rng.uniform(*spec.velocity_range)
        angle = rng.uniform(0, 2 * math.pi)
        vel = (speed * math.cos(angle), speed * math.sin(angle))
    else:
        vel = (0.0, 0.0)
    # Start positions that keep the whole path on the canvas.
    x_lo = max(radius, radius - vel[0] * (n - 1))
    x_hi = min(w - 1 - radius, w - 1 - radius - vel[0] * (n - 1))
    y_lo = max(radius, radius - vel[1] * (n - 1))
    y_hi = min(h - 1 - radius, h - 1 - radius - vel[1] * (n - 1))
    if x_lo > x_hi or y_lo > y_hi:
        raise ValueError(
            f"a {kind} of radius {radius:.1f} moving at {vel} does not fit a {h}x{w} canvas over {n} frames"
        )
    center = (rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi))
    return ShapeTrack(kind, center, radius, vel, color)


def synthesize_clip(spec: DatasetSpec, index: int) -> VideoClip:
    """Build clip ``index`` of ``spec`` in memory; the per-clip seed is (seed, index)."""
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.image_size
    area = spec.target_foreground_fraction * h * w / spec.moving_shapes
    background = _background(rng, h, w)
    distractors = [_sample_shape(rng, spec, area, moving=False) for _ in range(spec.distractor_shapes)]
    moving = [_sample_shape(rng, spec, area, moving=True) for _ in range(spec.moving_shapes)]
    frames, masks, flows = render_clip(moving, distractors, spec.frames_per_clip, spec.image_size, background)
    # Quantise like the on-disk copy so in-memory and loaded clips agree.
    frames = np.round(frames * 255.0) / 255.0
    return VideoClip(frames, masks, flows, name=f"clip_{index:05d}")


def generate_synthetic_dataset(spec: DatasetSpec, out_dir) -> Manifest:
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    if not os.access(root, os.W_OK):
        raise PermissionError(f"dataset directory {root} is not writable")
    manifest = Manifest(root)
    for index in range(spec.num_clips):
        clip = synthesize_clip(spec, index)
        save_clip(clip, root / clip.name)
        manifest.clips.append((clip.name, len(clip)))
    manifest.write()
    logger.info("wrote %d clips to %s", spec.num_clips, root)
    return manifest


def write_flow(flow: FlowField, path) -> None:
    h, w = flow.shape
    if h < 1 or w < 1:
        raise FlowFormatError(f"nonpositive flow dimensions {h}x{w}")
    data = np.ascontiguousarray(flow.to_array(), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLOW_MAGIC, w, h))
        fh.write(data.tobytes())


def read_flow(path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FlowFormatError(f"{path}: truncated header")
    magic, w, h = struct.unpack("<fii", raw[:12])
    if magic != FLOW_MAGIC:
        raise FlowFormatError(f"{path}: bad magic {magic!r}")
    if w < 1 or h < 1:
        raise FlowFormatError(f"{path}: nonpositive dimensions {w}x{h}")
    expected = 12 + 8 * w * h
    if len(raw) != expected:
        raise FlowFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    uv = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2)
    return FlowField.from_array(uv.astype(np.float32))


def save_clip(clip: VideoClip, clip_dir) -> None:
    clip_dir = Path(clip_dir)
    for sub in ("frames", "masks", "flow"):
        (clip_dir / sub).mkdir(parents=True, exist_ok=True)
    for n in range(len(clip)):
        rgb = np.round(clip.frames[n] * 255).astype(np.uint8)
        Image.fromarray(rgb, "RGB").save(clip_dir / "frames" / f"{n:05d}.png")
        if clip.masks is not None:
            save_map(clip.masks[n], clip_dir / "masks" / f"{n:05d}.png")
        write_flow(FlowField.from_array(clip.flows[n]), clip_dir / "flow" / f"{n:05d}.flo")


def save_map(values, path) -> None:
    """Write a [0,1] map as 8-bit grayscale."""
    img = np.round(np.clip(values, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(img, "L").save(path)


def read_map(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DatasetLayoutError(f"unreadable image {path}: {exc}") from exc


def _read_rgb(path):
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DatasetLayoutError(f"unreadable image {path}: {exc}") from exc


def load_clip(clip_dir) -> VideoClip:
    clip_dir = Path(clip_dir)
    frame_paths = sorted((clip_dir / "frames").glob("*.png"))
    if not frame_paths:
        raise DatasetLayoutError(f"{clip_dir}: no frames found")
    frames = np.stack([_read_rgb(p) for p in frame_paths])
    n, h, w, _ = frames.shape

    masks = None
    mask_dir = clip_dir / "masks"
    if mask_dir.is_dir():
        mask_paths = sorted(mask_dir.glob("*.png"))
        if len(mask_paths) != n:
            raise DatasetLayoutError(f"{clip_dir}: {n} frames but {len(mask_paths)} masks")
        masks = np.stack([read_map(p) for p in mask_paths])

    flows = np.zeros((n, h, w, 2), np.float32)
    flow_dir = clip_dir / "flow"
    flow_missing = not flow_dir.is_dir() or not any(flow_dir.glob("*.flo"))
    if flow_missing:
        warnings.warn(f"{clip_dir}: no flow files, using zero flow", stacklevel=2)
    else:
        flow_paths = sorted(flow_dir.glob("*.flo"))
        by_stem = {p.stem: p for p in flow_paths}
        if len(by_stem) not in (n, n - 1):
            raise DatasetLayoutError(f"{clip_dir}: {n} frames but {len(by_stem)} flow files")
        for i, fp in enumerate(frame_paths):
            path = by_stem.get(fp.stem)
            if path is None:
                if i == 0:
                    continue
                raise DatasetLayoutError(f"{clip_dir}: no flow file for frame {fp.name}")
            flow = read_flow(path)
            if flow.shape != (h, w):
                raise DatasetLayoutError(f"{path}: flow is {flow.shape}, frames are {(h, w)}")
            flows[i] = flow.to_array()
    return VideoClip(frames, masks, flows, name=clip_dir.name, flow_missing=flow_missing)


def list_clips(root, marker="frames") -> list[Path]:
    """Clip directories under ``root``, from the manifest when present.

    Without a manifest, a clip is any subdirectory holding a ``marker`` folder
    (``masks`` for prediction and ground-truth trees).
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetLayoutError(f"dataset root {root} does not exist")
    manifest = root / MANIFEST_NAME
    if manifest.exists():
        return [root / line.split()[0] for line in manifest.read_text().splitlines() if line.strip()]
    return sorted(p for p in root.iterdir() if (p / marker).is_dir())


def flip_clip(clip: VideoClip, horizontal: bool, vertical: bool) -> VideoClip:
    frames, masks, flows = clip.frames, clip.masks, clip.flows.copy()
    if horizontal:
        frames = frames[:, :, ::-1]
        masks = None if masks is None else masks[:, :, ::-1]
        flows = flows[:, :, ::-1]
        flows[..., 0] *= -1
    if vertical:
        frames = frames[:, ::-1]
        masks = None if masks is None else masks[:, ::-1]
        flows = flows[:, ::-1]
        flows[..., 1] *= -1
    return VideoClip(
        np.ascontiguousarray(frames),
        None if masks is None else np.ascontiguousarray(masks),
        np.ascontiguousarray(flows),
        name=clip.name,
        flow_missing=clip.flow_missing,
    )


def _resize(arr, size):
    # arr: N x H x W x C
    t = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2)
    antialias = size[0] < arr.shape[1] or size[1] < arr.shape[2]
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False, antialias=antialias)
    return out.permute(0, 2, 3, 1).numpy()


def resize_clip(clip: VideoClip, size) -> VideoClip:
    size = tuple(size)
    h, w = clip.size
    if (h, w) == size:
        return clip
    frames = np.clip(_resize(clip.frames, size), 0, 1)
    masks = None if clip.masks is None else np.clip(_resize(clip.masks[..., None], size)[..., 0], 0, 1)
    flows = _resize(clip.flows, size)
    # Flow is measured in pixels, so it scales with the canvas.
    flows[..., 0] *= size[1] / w
    flows[..., 1] *= size[0] / h
    return VideoClip(frames, masks, flows, name=clip.name, flow_missing=clip.flow_missing)


def preprocess(clip: VideoClip, training: bool, seed: int, size=(256, 256)) -> VideoClip:
    clip = resize_clip(clip, size)
    if not training:
        return clip
    rng = np.random.default_rng(seed)
    horizontal, vertical = rng.random(2) < 0.5
    return flip_clip(clip, bool(horizontal), bool(vertical))
