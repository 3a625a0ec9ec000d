"""Video datasets: bouncing digits, rotating shapes, and on-disk formats.

Both generators are procedural and counter-seeded, so training can stream
an infinite dataset while any batch is reproducible from (seed, iteration)
alone. Frames are 64x64 grayscale in [0, 1], quantized to the 1/255 grid
at generation time so the u8 shard format round-trips pixels exactly.

Digit sprites come either from MNIST IDX files or from a built-in
procedural glyph renderer (stroke skeletons warped per variant), which
keeps the pipeline self-contained when no MNIST download is available.
The rotating-shapes set stands in for a rendered-3D-object dataset: the
static label is which shape is spinning, the temporal signal its angle.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

CANVAS = 64
SPRITE = 28

SHARD_MAGIC = b"FSVD1"

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class IdxBadMagic(IdxFormatError):
    pass


class IdxTruncated(IdxFormatError):
    pass


class IdxDimensionOverflow(IdxFormatError):
    pass


class ShardError(ValueError):
    pass


def _rng(seed: int, *stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in stream))
    return np.random.Generator(np.random.Philox(ss))


def _quantize(frames: np.ndarray) -> np.ndarray:
    """Snap float pixels onto the u8 grid; keeps shard round trips exact."""
    return (np.rint(np.clip(frames, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


@dataclass
class VideoBatch:
    """A batch of grayscale frame sequences plus generation metadata.

    frames: [B, N, 64, 64] in [0, 1] on the 1/255 grid.
    labels: per-video static identity (digit class or shape id).
    positions: per-frame sprite centroid (row, col) in pixels.
    angles: per-frame orientation in radians (rotating shapes only).
    """

    frames: np.ndarray
    labels: np.ndarray
    positions: np.ndarray
    angles: np.ndarray | None = None

    @property
    def n_videos(self) -> int:
        return self.frames.shape[0]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[1]


# ---------------------------------------------------------------------------
# MNIST IDX format


def parse_idx(data: bytes) -> tuple[tuple[int, ...], np.ndarray]:
    """Parse IDX bytes into (dims, array).

    Images (magic 0x00000803) come back as float32 scaled to [0, 1];
    labels (magic 0x00000801) as int64.
    """
    if len(data) < 4:
        raise IdxTruncated("IDX header shorter than the magic")
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IDX_IMAGE_MAGIC:
        rank = 3
    elif magic == IDX_LABEL_MAGIC:
        rank = 1
    else:
        raise IdxBadMagic(f"bad IDX magic 0x{magic:08x}")
    header = 4 + 4 * rank
    if len(data) < header:
        raise IdxTruncated("IDX header truncated before dimension sizes")
    dims = struct.unpack(f">{rank}I", data[4:header])
    total = 1
    for d in dims:
        total *= d
    if total > 1 << 40:
        raise IdxDimensionOverflow(f"IDX dimensions {dims} overflow the supported payload size")
    if len(data) != header + total:
        raise IdxTruncated(f"IDX payload has {len(data) - header} bytes, dims {dims} need {total}")
    raw = np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)
    if magic == IDX_IMAGE_MAGIC:
        return dims, (raw.astype(np.float32) / 255.0)
    return dims, raw.astype(np.int64)


def serialize_idx(arr: np.ndarray) -> bytes:
    """Inverse of parse_idx; accepts [n, r, c] images (floats or u8) or [n] labels."""
    if arr.ndim == 3:
        data = arr if arr.dtype == np.uint8 else np.rint(np.asarray(arr) * 255.0).astype(np.uint8)
        head = struct.pack(">I3I", IDX_IMAGE_MAGIC, *arr.shape)
    elif arr.ndim == 1:
        data = arr.astype(np.uint8)
        head = struct.pack(">I1I", IDX_LABEL_MAGIC, arr.shape[0])
    else:
        raise ValueError(f"cannot serialize rank-{arr.ndim} array as IDX")
    return head + data.tobytes()


def load_idx(path) -> np.ndarray:
    with open(path, "rb") as f:
        _, arr = parse_idx(f.read())
    return arr


def mnist_sprites(images_path, labels_path, classes: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    """Load 28x28 sprites of the requested digit classes from IDX files."""
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    keep = np.isin(labels, classes)
    return _quantize(images[keep]), labels[keep].astype(np.int64)


# ---------------------------------------------------------------------------
# Procedural digit sprites

# Stroke skeletons on the unit square, y pointing down.


def _arc(cx, cy, rx, ry, a0, a1, n=24):
    t = np.linspace(a0, a1, n)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _digit_strokes(digit: int) -> list[np.ndarray]:
    if digit == 0:
        return [_arc(0.5, 0.5, 0.26, 0.36, 0.0, 2.0 * math.pi, 40)]
    if digit == 1:
        return [np.array([[0.35, 0.28], [0.55, 0.12], [0.55, 0.88]])]
    if digit == 2:
        top = _arc(0.48, 0.32, 0.24, 0.2, math.pi, 2.35 * math.pi)
        return [np.concatenate([top, [[0.27, 0.86], [0.76, 0.86]]])]
    if digit == 3:
        return [
            np.concatenate([_arc(0.44, 0.3, 0.24, 0.19, 1.15 * math.pi, 2.45 * math.pi)]),
            np.concatenate([_arc(0.44, 0.68, 0.26, 0.21, -0.45 * math.pi, 0.85 * math.pi)]),
        ]
    if digit == 4:
        return [
            np.array([[0.62, 0.1], [0.24, 0.62], [0.8, 0.62]]),
            np.array([[0.62, 0.1], [0.62, 0.9]]),
        ]
    if digit == 5:
        bowl = _arc(0.44, 0.66, 0.27, 0.22, -0.5 * math.pi, 0.8 * math.pi)
        return [np.concatenate([[[0.74, 0.12], [0.3, 0.12], [0.3, 0.45]], bowl])]
    if digit == 6:
        swoop = _arc(0.72, 0.12, 0.5, 0.62, 0.55 * math.pi, math.pi)
        return [swoop, _arc(0.48, 0.68, 0.22, 0.2, 0.0, 2.0 * math.pi, 32)]
    if digit == 7:
        return [np.array([[0.24, 0.14], [0.76, 0.14], [0.42, 0.9]])]
    if digit == 8:
        return [
            _arc(0.5, 0.3, 0.2, 0.17, 0.0, 2.0 * math.pi, 32),
            _arc(0.5, 0.67, 0.24, 0.21, 0.0, 2.0 * math.pi, 32),
        ]
    if digit == 9:
        return [
            _arc(0.52, 0.32, 0.21, 0.19, 0.0, 2.0 * math.pi, 32),
            np.array([[0.72, 0.36], [0.62, 0.9]]),
        ]
    raise ValueError(f"digit must be 0..9, got {digit}")


def _render_strokes(strokes: list[np.ndarray], size: int, thickness: float) -> np.ndarray:
    """Rasterize polylines by distance-to-segment, with a soft edge."""
    coords = (np.arange(size) + 0.5) / size
    px, py = np.meshgrid(coords, coords)  # py rows (y), px cols (x)
    img = np.zeros((size, size))
    for pts in strokes:
        a, b = pts[:-1], pts[1:]
        d = b - a  # [S, 2] in (x, y)
        length_sq = (d**2).sum(axis=1) + 1e-12
        for s in range(len(a)):
            t = ((px - a[s, 0]) * d[s, 0] + (py - a[s, 1]) * d[s, 1]) / length_sq[s]
            t = np.clip(t, 0.0, 1.0)
            dist = np.hypot(px - (a[s, 0] + t * d[s, 0]), py - (a[s, 1] + t * d[s, 1]))
            img = np.maximum(img, np.clip((thickness - dist) / 0.02, 0.0, 1.0))
    return img


def digit_sprites(
    classes: tuple[int, ...],
    variants_per_class: int = 20,
    seed: int = 0,
    size: int = SPRITE,
) -> tuple[np.ndarray, np.ndarray]:
    """Render procedural digit sprites with per-variant style warps.

    Each variant applies a random affine (scale, rotation, shear, shift)
    and stroke-thickness jitter to the digit's skeleton, standing in for
    handwriting variation.
    """
    sprites, labels = [], []
    for cls in classes:
        strokes = _digit_strokes(int(cls))
        for v in range(variants_per_class):
            rng = _rng(seed, int(cls), v)
            scale = rng.uniform(0.85, 1.1)
            rot = rng.uniform(-0.18, 0.18)
            shear = rng.uniform(-0.22, 0.22)
            shift = rng.uniform(-0.03, 0.03, size=2)
            thick = rng.uniform(0.045, 0.065)
            cos_r, sin_r = math.cos(rot), math.sin(rot)
            mat = scale * np.array([[cos_r, -sin_r], [sin_r, cos_r]]) @ np.array([[1.0, shear], [0.0, 1.0]])
            warped = [(pts - 0.5) @ mat.T + 0.5 + shift for pts in strokes]
            sprites.append(_render_strokes(warped, size, thick))
            labels.append(int(cls))
    return _quantize(np.stack(sprites)), np.asarray(labels, dtype=np.int64)


# ---------------------------------------------------------------------------
# Bouncing digits


@dataclass(frozen=True)
class BounceConfig:
    canvas: int = CANVAS
    sprite: int = SPRITE
    speed: float = 3.0
    n_frames: int = 16
    digit_classes: tuple[int, ...] = (0, 1, 2, 3, 4, 5, 6, 7, 8, 9)
    seed: int = 0

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError(f"speed must be >= 0, got {self.speed}")
        if self.sprite > self.canvas:
            raise ValueError(f"sprite {self.sprite} does not fit canvas {self.canvas}")

    @property
    def travel(self) -> float:
        # top-left positions range over [0, travel]
        return float(self.canvas - self.sprite)


def centroid_bounds(cfg: BounceConfig) -> tuple[float, float]:
    """Reachable centroid range along either axis."""
    half = (cfg.sprite - 1) / 2.0
    return half, half + cfg.travel


def gen_bouncing_mnist(
    cfg: BounceConfig,
    sprites: np.ndarray,
    sprite_labels: np.ndarray,
    seed: int,
    n_videos: int,
) -> VideoBatch:
    """One digit per video, drifting at constant speed with elastic bounces.

    Initial position is uniform over valid placements and the initial
    heading uniform on the circle. Positions are tracked as floats; the
    sprite is composited by max at the rounded offset.
    """
    if sprites.shape[1:] != (cfg.sprite, cfg.sprite):
        raise ValueError(f"sprites must be [{cfg.sprite}x{cfg.sprite}], got {sprites.shape[1:]}")
    rng = _rng(seed, 10)
    b, n, hi = n_videos, cfg.n_frames, cfg.travel
    which = rng.integers(0, len(sprites), size=b)
    pos = rng.uniform(0.0, hi, size=(b, 2))
    theta = rng.uniform(0.0, 2.0 * math.pi, size=b)
    vel = cfg.speed * np.stack([np.cos(theta), np.sin(theta)], axis=1)

    frames = np.zeros((b, n, cfg.canvas, cfg.canvas), dtype=np.float32)
    positions = np.zeros((b, n, 2), dtype=np.float32)
    half = (cfg.sprite - 1) / 2.0
    for i in range(n):
        offsets = np.rint(pos).astype(int)
        for v in range(b):
            r, c = offsets[v]
            patch = frames[v, i, r : r + cfg.sprite, c : c + cfg.sprite]
            np.maximum(patch, sprites[which[v]], out=patch)
        positions[:, i] = pos + half
        pos = pos + vel
        for axis in range(2):
            # reflect until inside; loop handles speeds beyond one box length
            while True:
                low, high = pos[:, axis] < 0.0, pos[:, axis] > hi
                if not (low.any() or high.any()):
                    break
                pos[low, axis] *= -1.0
                vel[low, axis] *= -1.0
                pos[high, axis] = 2.0 * hi - pos[high, axis]
                vel[high, axis] *= -1.0
    return VideoBatch(
        frames=_quantize(frames),
        labels=sprite_labels[which].astype(np.int64),
        positions=positions,
    )


class BouncingDigits:
    """Infinite bouncing-digit stream; batch i depends only on (seed, i)."""

    def __init__(self, cfg: BounceConfig, sprites: np.ndarray, sprite_labels: np.ndarray):
        self.cfg = cfg
        self.sprites = sprites
        self.sprite_labels = sprite_labels

    @classmethod
    def procedural(cls, cfg: BounceConfig, variants_per_class: int = 20) -> "BouncingDigits":
        sprites, labels = digit_sprites(cfg.digit_classes, variants_per_class, seed=cfg.seed)
        return cls(cfg, sprites, labels)

    def batch(self, iteration: int, n_videos: int) -> VideoBatch:
        return gen_bouncing_mnist(
            self.cfg,
            self.sprites,
            self.sprite_labels,
            seed=_derived_seed(self.cfg.seed, 100, iteration),
            n_videos=n_videos,
        )


def _derived_seed(seed: int, *stream: int) -> int:
    """Stable 63-bit sub-seed from (seed, stream) via the Philox splitter."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in stream))
    return int(ss.generate_state(1, np.uint64)[0] >> 1)


# ---------------------------------------------------------------------------
# Rotating shapes


@dataclass(frozen=True)
class ShapeConfig:
    n_shapes: int = 25
    held_out_ids: tuple[int, ...] = (15, 16, 17, 18, 19, 20, 21, 22, 23, 24)
    angular_velocity: float = 2.0 * math.pi / 24.0
    n_frames: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.n_shapes < 1:
            raise ValueError("shape library must be non-empty")
        if any(i < 0 or i >= self.n_shapes for i in self.held_out_ids):
            raise ValueError("held_out_ids outside the shape library")

    @property
    def train_ids(self) -> tuple[int, ...]:
        held = set(self.held_out_ids)
        return tuple(i for i in range(self.n_shapes) if i not in held)


def shape_mask(shape_id: int, size: int = CANVAS) -> np.ndarray:
    """Binary-ish star-polygon mask, centered, antialiased by supersampling.

    The vertex count and spoke depth vary with shape_id, giving a library
    of mutually distinguishable silhouettes.
    """
    n_pts = 3 + shape_id % 8
    inner = 0.35 + 0.5 * ((shape_id * 7) % 11) / 11.0
    phase = 0.61803398875 * shape_id
    angles = phase + np.arange(2 * n_pts) * math.pi / n_pts
    radii = np.where(np.arange(2 * n_pts) % 2 == 0, 0.42, 0.42 * inner)
    verts = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)

    ss = 2 * size
    coords = (np.arange(ss) + 0.5) / ss - 0.5
    px, py = np.meshgrid(coords, coords)
    inside = np.zeros((ss, ss), dtype=bool)
    x0, y0 = verts[:, 0], verts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for e in range(len(verts)):  # even-odd crossing test
        crosses = (y0[e] > py) != (y1[e] > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x0[e] + (py - y0[e]) * (x1[e] - x0[e]) / (y1[e] - y0[e])
        inside ^= crosses & (px < x_at)
    full = inside.astype(np.float32)
    return full.reshape(size, 2, size, 2).mean(axis=(1, 3))


def rotate_bilinear(img: np.ndarray, angle: float) -> np.ndarray:
    """Rotate about the image center with bilinear resampling, zero outside."""
    size = img.shape[0]
    c = (size - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    # inverse map: output pixel pulled from source rotated by -angle
    src_r = c + (rows - c) * cos_a - (cols - c) * sin_a
    src_c = c + (rows - c) * sin_a + (cols - c) * cos_a
    r0 = np.floor(src_r).astype(int)
    c0 = np.floor(src_c).astype(int)
    fr, fc = src_r - r0, src_c - c0

    def at(r, c):
        valid = (r >= 0) & (r < size) & (c >= 0) & (c < size)
        out = np.zeros_like(img)
        out[valid] = img[r[valid], c[valid]]
        return out

    out = (
        at(r0, c0) * (1 - fr) * (1 - fc)
        + at(r0, c0 + 1) * (1 - fr) * fc
        + at(r0 + 1, c0) * fr * (1 - fc)
        + at(r0 + 1, c0 + 1) * fr * fc
    )
    return np.clip(out, 0.0, 1.0)


def gen_rotating_shapes(
    cfg: ShapeConfig,
    seed: int,
    n_videos: int,
    shape_ids: tuple[int, ...] | None = None,
) -> VideoBatch:
    """Centered shapes spinning at the configured rate from a random phase."""
    ids = cfg.train_ids if shape_ids is None else tuple(shape_ids)
    if not ids:
        raise ValueError("no shape ids to sample from")
    rng = _rng(seed, 20)
    which = np.asarray(ids)[rng.integers(0, len(ids), size=n_videos)]
    angle0 = rng.uniform(0.0, 2.0 * math.pi, size=n_videos)

    masks = {i: shape_mask(i) for i in sorted(set(which.tolist()))}
    frames = np.zeros((n_videos, cfg.n_frames, CANVAS, CANVAS), dtype=np.float32)
    angles = np.zeros((n_videos, cfg.n_frames), dtype=np.float32)
    for v in range(n_videos):
        for i in range(cfg.n_frames):
            a = angle0[v] + i * cfg.angular_velocity
            frames[v, i] = rotate_bilinear(masks[which[v]], a)
            angles[v, i] = a
    center = (CANVAS - 1) / 2.0
    positions = np.full((n_videos, cfg.n_frames, 2), center, dtype=np.float32)
    return VideoBatch(
        frames=_quantize(frames),
        labels=which.astype(np.int64),
        positions=positions,
        angles=angles,
    )


class RotatingShapes:
    """Infinite rotating-shape stream over the training split of the library."""

    def __init__(self, cfg: ShapeConfig, shape_ids: tuple[int, ...] | None = None):
        self.cfg = cfg
        self.shape_ids = cfg.train_ids if shape_ids is None else tuple(shape_ids)

    def batch(self, iteration: int, n_videos: int) -> VideoBatch:
        return gen_rotating_shapes(
            self.cfg,
            seed=_derived_seed(self.cfg.seed, 200, iteration),
            n_videos=n_videos,
            shape_ids=self.shape_ids,
        )


# ---------------------------------------------------------------------------
# Shard format


def _write_batch(f, batch: VideoBatch) -> None:
    b, n, h, w = batch.frames.shape
    f.write(struct.pack("<4I", b, n, h, w))
    f.write(np.rint(batch.frames * 255.0).astype(np.uint8).tobytes())
    f.write(batch.labels.astype("<i8").tobytes())
    f.write(batch.positions.astype("<f4").tobytes())
    if batch.angles is None:
        f.write(struct.pack("<B", 0))
    else:
        f.write(struct.pack("<B", 1))
        f.write(batch.angles.astype("<f4").tobytes())


def write_shards(batches, path) -> None:
    """Write a sequence of VideoBatch records to one shard file."""
    batches = list(batches)
    with open(path, "wb") as f:
        f.write(SHARD_MAGIC)
        f.write(struct.pack("<I", len(batches)))
        for batch in batches:
            _write_batch(f, batch)


def read_shards(path) -> list[VideoBatch]:
    """Read every VideoBatch record from a shard file."""
    with open(path, "rb") as f:
        data = f.read()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise ShardError("truncated shard file")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(len(SHARD_MAGIC)) != SHARD_MAGIC:
        raise ShardError("bad shard magic")
    (count,) = struct.unpack("<I", take(4))
    batches = []
    for _ in range(count):
        b, n, h, w = struct.unpack("<4I", take(16))
        pixels = np.frombuffer(take(b * n * h * w), dtype=np.uint8).reshape(b, n, h, w)
        labels = np.frombuffer(take(8 * b), dtype="<i8").copy()
        positions = np.frombuffer(take(4 * b * n * 2), dtype="<f4").reshape(b, n, 2).copy()
        (has_angles,) = struct.unpack("<B", take(1))
        angles = None
        if has_angles:
            angles = np.frombuffer(take(4 * b * n), dtype="<f4").reshape(b, n).copy()
        batches.append(
            VideoBatch(
                frames=(pixels.astype(np.float32) / 255.0),
                labels=labels,
                positions=positions,
                angles=angles,
            )
        )
    if pos != len(data):
        raise ShardError("trailing bytes after final shard record")
    return batches


def concat_batches(batches: list[VideoBatch]) -> VideoBatch:
    """Stack shard records into one batch (metadata kinds must match)."""
    angles = None
    if batches and batches[0].angles is not None:
        angles = np.concatenate([b.angles for b in batches])
    return VideoBatch(
        frames=np.concatenate([b.frames for b in batches]),
        labels=np.concatenate([b.labels for b in batches]),
        positions=np.concatenate([b.positions for b in batches]),
        angles=angles,
    )
