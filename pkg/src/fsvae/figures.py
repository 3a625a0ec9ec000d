"""Qualitative tools: factor swaps, interpolations, image grids, encodings.

Images are written as binary PGM (P5) so outputs are byte-deterministic
and dependency-free; any image tool converts them to PNG if needed.
Latent encodings are dumped to CSV, and 2-D factors additionally get a
rasterized scatter with per-video frame-order polylines.
"""

from __future__ import annotations

import numpy as np
import torch

from fsvae.losses import PosteriorParams
from fsvae.networks import VideoModel, decode_frames, reparam_sample

GRID_GAP = 2  # separator pixels between tiles


def swap_factors(h_a: np.ndarray, h_b: np.ndarray, f_s: int) -> tuple[np.ndarray, np.ndarray]:
    """Exchange the static slices of two latent sequences.

    Returns (static of b + temporal of a, static of a + temporal of b);
    applying the swap twice restores the originals.
    """
    h_a = np.asarray(h_a)
    h_b = np.asarray(h_b)
    if h_a.shape != h_b.shape:
        raise ValueError(f"latent shapes differ: {h_a.shape} vs {h_b.shape}")
    if not 0 <= f_s <= h_a.shape[-1]:
        raise ValueError(f"static width {f_s} outside latent width {h_a.shape[-1]}")
    swapped_a = np.concatenate([h_b[..., :f_s], h_a[..., f_s:]], axis=-1)
    swapped_b = np.concatenate([h_a[..., :f_s], h_b[..., f_s:]], axis=-1)
    return swapped_a, swapped_b


def interpolate_latents(
    h_from: np.ndarray, h_to: np.ndarray, steps: int, factor: str, f_s: int
) -> np.ndarray:
    """Linear path in one factor, the other held at h_from's value.

    Returns [steps, ...] with both endpoints included.
    """
    h_from = np.asarray(h_from, dtype=np.float64)
    h_to = np.asarray(h_to, dtype=np.float64)
    if h_from.shape != h_to.shape:
        raise ValueError(f"latent shapes differ: {h_from.shape} vs {h_to.shape}")
    if steps < 2:
        raise ValueError(f"need at least the two endpoints, got steps={steps}")
    if factor not in ("static", "temporal"):
        raise ValueError(f"factor must be 'static' or 'temporal', got {factor!r}")
    sel = np.zeros(h_from.shape[-1], dtype=bool)
    sel[:f_s] = factor == "static"
    sel[f_s:] = factor == "temporal"
    ts = np.linspace(0.0, 1.0, steps)
    out = np.repeat(h_from[None], steps, axis=0)
    out[..., sel] = (1.0 - ts)[:, None, None] * h_from[None][..., sel] + ts[:, None, None] * h_to[None][
        ..., sel
    ]
    return out


def frames_to_u8(frames: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)


def tile_frames(frames: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Tile [K, H, W] frames row-major with 2px black separators."""
    if rows * cols < len(frames):
        raise ValueError(f"{rows}x{cols} grid cannot hold {len(frames)} frames")
    k, h, w = frames.shape
    canvas = np.zeros((rows * h + (rows - 1) * GRID_GAP, cols * w + (cols - 1) * GRID_GAP), dtype=frames.dtype)
    for i in range(k):
        r, c = divmod(i, cols)
        top, left = r * (h + GRID_GAP), c * (w + GRID_GAP)
        canvas[top : top + h, left : left + w] = frames[i]
    return canvas


def write_pgm(image: np.ndarray, path) -> None:
    """Binary PGM (P5), maxval 255."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = frames_to_u8(image)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def emit_pgm_grid(frames: np.ndarray, rows: int, cols: int, path) -> None:
    """Tile frames into a grid image and write it as PGM."""
    frames = np.asarray(frames)
    if frames.dtype != np.uint8:
        frames = frames_to_u8(frames)
    write_pgm(tile_frames(frames, rows, cols), path)


# ---------------------------------------------------------------------------
# Latent encodings: CSV dump + scatter raster


def sample_latents(model: VideoModel, frames: np.ndarray, seed: int = 0) -> np.ndarray:
    """One posterior sample per frame, infer-mode encoder."""
    model.eval()
    with torch.no_grad():
        post = model.encode(torch.from_numpy(frames))
        h = reparam_sample(
            PosteriorParams(post.mu.double(), post.log_var.double()),
            generator=torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF),
        )
    return h.numpy()


def latents_csv(latents: np.ndarray, f_s: int) -> str:
    """Rows (video_id, frame_idx, factor, values...); one row per factor per frame."""
    b, n, width = latents.shape
    max_w = max(f_s, width - f_s)
    header = "video_id,frame_idx,factor," + ",".join(f"f{i}" for i in range(max_w))
    lines = [header]
    for v in range(b):
        for i in range(n):
            for name, lo, hi in (("static", 0, f_s), ("temporal", f_s, width)):
                vals = [format(x, ".9g") for x in latents[v, i, lo:hi]]
                vals += [""] * (max_w - (hi - lo))
                lines.append(f"{v},{i},{name}," + ",".join(vals))
    return "\n".join(lines) + "\n"


def _draw_line(img: np.ndarray, r0: float, c0: float, r1: float, c1: float, value: int) -> None:
    n = int(max(abs(r1 - r0), abs(c1 - c0))) * 2 + 2
    ts = np.linspace(0.0, 1.0, n)
    rr = np.clip(np.rint(r0 + ts * (r1 - r0)), 0, img.shape[0] - 1).astype(int)
    cc = np.clip(np.rint(c0 + ts * (c1 - c0)), 0, img.shape[1] - 1).astype(int)
    img[rr, cc] = np.maximum(img[rr, cc], value)


def scatter_raster(points: np.ndarray, size: int = 256) -> np.ndarray:
    """Rasterize [B, N, 2] per-video trajectories into a grayscale image.

    Videos get distinct gray levels; consecutive frames are connected so
    the temporal ordering is visible.
    """
    b, n, _ = points.shape
    flat = points.reshape(-1, 2)
    lo = flat.min(axis=0)
    span = np.maximum(flat.max(axis=0) - lo, 1e-9)
    norm = (flat - lo) / span  # [M, 2] in [0, 1]
    coords = np.stack([(1.0 - norm[:, 1]) * (size - 9) + 4, norm[:, 0] * (size - 9) + 4], axis=1)
    coords = coords.reshape(b, n, 2)
    img = np.zeros((size, size), dtype=np.uint8)
    for v in range(b):
        shade = 90 + int(165 * (v + 0.5) / b)
        for i in range(n - 1):
            _draw_line(img, *coords[v, i], *coords[v, i + 1], max(40, shade - 60))
        for i in range(n):
            r, c = np.rint(coords[v, i]).astype(int)
            img[max(0, r - 1) : r + 2, max(0, c - 1) : c + 2] = shade
    return img


def plot_latents(
    model: VideoModel,
    frames: np.ndarray,
    f_s: int,
    seed: int,
    csv_path,
    scatter_prefix=None,
) -> np.ndarray:
    """Encode test videos, dump per-frame factor samples to CSV.

    When a factor is 2-D and scatter_prefix is given, also writes
    <prefix>_<factor>.pgm scatter images. Returns the sampled latents.
    """
    latents = sample_latents(model, frames, seed=seed)
    with open(csv_path, "w") as f:
        f.write(latents_csv(latents, f_s))
    if scatter_prefix is not None:
        for name, lo, hi in (("static", 0, f_s), ("temporal", f_s, latents.shape[-1])):
            if hi - lo == 2:
                write_pgm(scatter_raster(latents[:, :, lo:hi]), f"{scatter_prefix}_{name}.pgm")
    return latents


def swap_grid(model: VideoModel, h_a: np.ndarray, h_b: np.ndarray, f_s: int) -> np.ndarray:
    """Decode originals and factor-swapped latents into a 2x2 tile image.

    Top row: the two source decodes; bottom row: their swaps. Latents are
    single frames [F] or sequences [N, F]; only the first frame is tiled.
    """
    h_a = np.atleast_2d(h_a)
    h_b = np.atleast_2d(h_b)
    sa, sb = swap_factors(h_a, h_b, f_s)
    batch = np.stack([h_a, h_b, sa, sb])  # [4, N, F]
    decoded = decode_frames(model, batch)
    return tile_frames(frames_to_u8(decoded[:, 0]), 2, 2)
