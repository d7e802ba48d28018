"""Synthetic sparse-depth sequences and depth-completion-format ingestion.

Synthetic scenes are planar rectangles and circles moving at constant
velocity over a slowly drifting background plane, rendered with a
nearest-object z-buffer and subsampled by horizontal scanlines plus per-pixel
dropout. Real data follows the 16-bit PNG convention: value/256 = meters,
0 = invalid.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .geometry import CameraIntrinsics
from .model import SparseDepthFrame

_PNG_MODES = ("I;16", "I;16B", "I;16L", "I;16N")


class FormatError(ValueError):
    """A depth image file does not follow the 16-bit convention."""


@dataclass
class Sequence:
    """An ordered run of sparse frames from one camera.

    ``dense`` carries the ground-truth dense frames when the sequence is
    synthetic; it exists for evaluation only and is never fed to a model.
    Sequences are treated as immutable after construction.
    """

    frames: list
    intrinsics: CameraIntrinsics
    id: str
    dense: list | None = None

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ValueError(f"sequence {self.id!r} needs >= 2 frames, got {len(self.frames)}")
        shape = self.frames[0].shape
        for i, f in enumerate(self.frames):
            if f.shape != shape:
                raise ValueError(f"frame {i} shape {f.shape} != {shape}")
        if self.dense is not None and len(self.dense) != len(self.frames):
            raise ValueError("dense ground truth must align with frames")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def shape(self):
        return self.frames[0].shape


@dataclass
class SynthConfig:
    height: int = 48
    width: int = 160
    n_objects: int = 6
    z_min: float = 2.0
    z_max: float = 40.0
    vel_xy: float = 3.0            # max |pixels/frame|
    vel_z: float = 0.4             # max |meters/frame| for objects
    vel_z_min: float = 0.0         # magnitude floor for object Z-velocity
    background_vel_z: float = 0.3  # max |meters/frame| for the backdrop
    background_vel_min: float = 0.0  # magnitude floor; sign stays random
    scanlines: int = 12
    jitter: float = 0.0            # rows of per-frame scanline wobble
    dropout: float = 0.0           # per-pixel drop probability on a scanline
    length: int = 30
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValueError("resolution must be positive")
        if self.z_min <= 0:
            raise ValueError("z_min must be > 0")
        if self.z_max <= self.z_min:
            raise ValueError("z_max must exceed z_min")
        if not 1 <= self.scanlines <= self.height:
            raise ValueError("scanline count must lie in [1, H]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.length < 2:
            raise ValueError("sequences need length >= 2")
        if self.n_objects < 0 or self.jitter < 0 or self.vel_xy < 0 or self.vel_z < 0 \
                or self.background_vel_z < 0:
            raise ValueError("counts and velocity bounds must be nonnegative")
        if not 0.0 <= self.background_vel_min <= self.background_vel_z:
            raise ValueError("background_vel_min must lie in [0, background_vel_z]")
        if not 0.0 <= self.vel_z_min <= self.vel_z:
            raise ValueError("vel_z_min must lie in [0, vel_z]")

    def intrinsics(self) -> CameraIntrinsics:
        # square-ish FOV; arbitrary but fixed, and recorded on every sequence
        return CameraIntrinsics(fx=float(self.width), fy=float(self.width),
                                cx=self.width / 2.0, cy=self.height / 2.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


@dataclass
class _Object:
    kind: str      # "rect" | "circle"
    cx: float      # pixel center
    cy: float
    half_w: float
    half_h: float
    z: float
    vx: float
    vy: float
    vz: float


def _signed_vz(cfg: SynthConfig, z0: float, magnitude: float, sign: float) -> float:
    """Flip the drawn sign when the full drift would hit a depth bound.

    Keeps the velocity law strictly linear over the sequence: a clamped
    track turns into a piecewise-constant one and the last-frame-copy
    baseline becomes exact on it, which is not the regime we render.
    If neither direction fits, the drawn sign stands and the renderer
    clips as before.
    """
    drift = (cfg.length - 1) * magnitude
    up_ok = z0 + drift <= cfg.z_max
    down_ok = z0 - drift >= cfg.z_min
    if up_ok and down_ok:
        return sign * magnitude
    if up_ok:
        return magnitude
    if down_ok:
        return -magnitude
    return sign * magnitude


def _spawn_objects(cfg: SynthConfig, rng: np.random.Generator) -> list[_Object]:
    objs = []
    for _ in range(cfg.n_objects):
        kind = "rect" if rng.random() < 0.5 else "circle"
        half_w = rng.uniform(0.06, 0.18) * cfg.width
        half_h = rng.uniform(0.10, 0.30) * cfg.height
        z0 = rng.uniform(cfg.z_min, 0.75 * cfg.z_max)
        vz_mag = rng.uniform(cfg.vel_z_min, cfg.vel_z)
        vz_sign = 1.0 if rng.random() < 0.5 else -1.0
        objs.append(_Object(
            kind=kind,
            cx=rng.uniform(0, cfg.width),
            cy=rng.uniform(0, cfg.height),
            half_w=half_w,
            half_h=half_h if kind == "rect" else half_w,
            z=z0,
            vx=rng.uniform(-cfg.vel_xy, cfg.vel_xy),
            vy=rng.uniform(-cfg.vel_xy, cfg.vel_xy) * 0.3,
            vz=_signed_vz(cfg, z0, vz_mag, vz_sign),
        ))
    return objs


def _render_dense(cfg: SynthConfig, objs: list[_Object], bg_z: float,
                  t: int, uu: np.ndarray, vv: np.ndarray) -> np.ndarray:
    buf = np.full((cfg.height, cfg.width), bg_z)
    for o in objs:
        cx = o.cx + t * o.vx
        cy = o.cy + t * o.vy
        z = float(np.clip(o.z + t * o.vz, cfg.z_min, cfg.z_max))
        if o.kind == "rect":
            cover = (np.abs(uu - cx) <= o.half_w) & (np.abs(vv - cy) <= o.half_h)
        else:
            cover = (uu - cx) ** 2 + (vv - cy) ** 2 <= o.half_w ** 2
        np.minimum(buf, np.where(cover, z, np.inf), out=buf)
    return buf


def _scanline_mask(cfg: SynthConfig, phase: float, rng: np.random.Generator) -> np.ndarray:
    spacing = cfg.height / cfg.scanlines
    rows = (np.arange(cfg.scanlines) + 0.5) * spacing + phase
    if cfg.jitter > 0:
        rows = rows + rng.uniform(-cfg.jitter, cfg.jitter, size=cfg.scanlines)
    rows = np.clip(np.rint(rows).astype(int), 0, cfg.height - 1)
    mask = np.zeros((cfg.height, cfg.width))
    mask[np.unique(rows)] = 1.0
    if cfg.dropout > 0:
        keep = rng.random((cfg.height, cfg.width)) >= cfg.dropout
        mask *= keep
    return mask


def synth_sequence(cfg: SynthConfig, rng: np.random.Generator,
                   seq_id: str = "synth") -> Sequence:
    """Render one sequence; both the sparse frames and the dense truth."""
    cfg.validate()
    objs = _spawn_objects(cfg, rng)
    # backdrop starts in the far part of the range and drifts at constant
    # rate; the start band leaves headroom so moderate drifts never clamp
    bg_start = rng.uniform(0.60 * cfg.z_max, 0.74 * cfg.z_max)
    bg_mag = rng.uniform(cfg.background_vel_min, cfg.background_vel_z)
    bg_sign = 1.0 if rng.random() < 0.5 else -1.0
    bg_vel = _signed_vz(cfg, bg_start, bg_mag, bg_sign)
    phase = rng.uniform(0.0, cfg.height / cfg.scanlines)

    vv, uu = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
    frames, dense_frames = [], []
    for t in range(cfg.length):
        bg_z = float(np.clip(bg_start + t * bg_vel, cfg.z_min, cfg.z_max))
        dense = _render_dense(cfg, objs, bg_z, t, uu, vv)
        mask = _scanline_mask(cfg, phase, rng)
        frames.append(SparseDepthFrame(dense * mask, mask))
        dense_frames.append(SparseDepthFrame(dense, np.ones_like(dense)))
    return Sequence(frames, cfg.intrinsics(), seq_id, dense=dense_frames)


def synth_dataset(cfg: SynthConfig, n_sequences: int) -> list[Sequence]:
    """Generate ``n_sequences`` independent sequences from cfg.seed.

    Per-sequence generators are spawned from one seed sequence, so the
    dataset is reproducible as a whole and each sequence is independent.
    """
    if n_sequences < 1:
        raise ValueError("n_sequences must be >= 1")
    children = np.random.SeedSequence(cfg.seed).spawn(n_sequences)
    return [synth_sequence(cfg, np.random.default_rng(ss), seq_id=f"synth-{i:04d}")
            for i, ss in enumerate(children)]


def save_manifest(path, cfg: SynthConfig, n_train: int, n_val: int) -> None:
    """Record the generator config so the dataset can be regenerated exactly."""
    doc = {"synth": cfg.to_dict(), "n_train": int(n_train), "n_val": int(n_val)}
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=True))


def load_manifest(path) -> tuple[SynthConfig, int, int]:
    doc = yaml.safe_load(Path(path).read_text())
    return SynthConfig.from_dict(doc["synth"]), int(doc["n_train"]), int(doc["n_val"])


def regenerate_splits(cfg: SynthConfig, n_train: int, n_val: int):
    """Rebuild the exact train/val split a manifest describes."""
    ds = synth_dataset(cfg, n_train + n_val)
    return ds[:n_train], ds[n_train:]


# ---------------------------------------------------------------------------
# 16-bit PNG convention
# ---------------------------------------------------------------------------

def save_depth_png(path, frame: SparseDepthFrame) -> None:
    """Quantize to value = round(256 * meters); depths must fit in 16 bits."""
    scaled = np.rint(frame.depth * 256.0)
    if scaled.max() > 65535:
        raise FormatError(f"depth {frame.depth.max():.1f} m exceeds the 16-bit range")
    # guard against a quantized-to-zero valid pixel breaking the invariant
    scaled[(frame.mask == 1.0) & (scaled == 0.0)] = 1.0
    Image.fromarray(scaled.astype(np.uint16)).save(path)


def load_depth_png(path) -> SparseDepthFrame:
    img = Image.open(path)
    if img.mode not in _PNG_MODES:
        raise FormatError(f"{path}: expected a 16-bit single-channel image, "
                          f"got mode {img.mode!r}")
    raw = np.asarray(img, dtype=np.uint16)
    depth = raw.astype(np.float64) / 256.0
    return SparseDepthFrame(depth, (raw > 0).astype(np.float64))


def load_sequences(root_dir, seq_len: int, stride: int) -> list[Sequence]:
    """Slide windows of ``seq_len`` frames with ``stride`` over each drive.

    Layout: one subdirectory per drive, frame files in lexicographic order.
    Drives shorter than seq_len are skipped with a warning.
    """
    if seq_len < 2:
        raise ValueError("seq_len must be >= 2")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    root = Path(root_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")

    sequences: list[Sequence] = []
    for drive in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(drive.glob("*.png"))
        if len(files) < seq_len:
            warnings.warn(f"drive {drive.name}: {len(files)} frames < seq_len {seq_len}, skipped")
            continue
        frames = [load_depth_png(f) for f in files]
        h, w = frames[0].shape
        intr = CameraIntrinsics(fx=float(w), fy=float(w), cx=w / 2.0, cy=h / 2.0)
        for lo in range(0, len(frames) - seq_len + 1, stride):
            sequences.append(Sequence(frames[lo:lo + seq_len], intr,
                                      f"{drive.name}:{lo:06d}"))
    return sequences


def resize_nearest(frame: SparseDepthFrame, height: int, width: int) -> SparseDepthFrame:
    """Nearest-neighbor subsampling of depth and mask together.

    Interpolating depth across object boundaries fabricates points that exist
    on no surface, so only exact source pixels are ever emitted.
    """
    h, w = frame.shape
    if height > h or width > w:
        raise ValueError(f"refusing to upscale ({h},{w}) -> ({height},{width})")
    if height < 1 or width < 1:
        raise ValueError("target resolution must be positive")
    rows = (np.arange(height) * h) // height
    cols = (np.arange(width) * w) // width
    return SparseDepthFrame(frame.depth[np.ix_(rows, cols)],
                            frame.mask[np.ix_(rows, cols)])
