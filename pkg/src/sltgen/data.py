"""Datasets and sample file formats.

Three sample sources: a Gaussian ring (equally spaced isotropic modes on
a circle), a checkerboard (uniform over the 8 alternating unit cells of
a 4x4 board spanning [-2, 2]^2 before scaling), and IDX image files in
the classic big-endian u8 layout (magic 0x00000803).

File helpers cover the whole artifact surface: IDX read/write, binary
PGM (P5) sheets for image grids, and two-column CSV dumps for points.
`render_blob_images` turns 2-D samples into tiny grayscale images (one
Gaussian bump per point) so the image pipeline can run without any
external data.
"""

from __future__ import annotations

from dataclasses import dataclass
import math
import struct

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803

# (row, col) of the 8 alternating cells on the 4x4 board
_DARK_CELLS = np.array([(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0])


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    modes: int = 8
    scale: float = 2.0
    idx_path: str | None = None
    normalize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "scale", float(self.scale))
        if self.kind not in ("gaussian_ring", "checkerboard", "image_idx"):
            raise ValueError(f"DatasetSpec: unknown kind {self.kind!r}")
        if self.kind == "gaussian_ring" and self.modes < 2:
            raise ValueError("DatasetSpec: ring needs modes >= 2")
        if self.scale <= 0:
            raise ValueError("DatasetSpec: scale must be positive")
        if self.kind == "image_idx" and not self.idx_path:
            raise ValueError("DatasetSpec: image_idx needs idx_path")


class Sampler:
    """Deterministic batch stream for one dataset spec and seed."""

    def __init__(self, spec: DatasetSpec, seed: int):
        self.spec = spec
        self.rng = np.random.default_rng(np.random.SeedSequence(seed))
        if spec.kind == "image_idx":
            images = read_idx(spec.idx_path)
            data = images.astype(np.float64)
            if spec.normalize:
                data = data / 127.5 - 1.0
            self._images = data[:, None, :, :]  # single channel
            self.sample_shape = self._images.shape[1:]
        else:
            self.sample_shape = (2,)

    def sample(self, n: int) -> np.ndarray:
        spec = self.spec
        if spec.kind == "gaussian_ring":
            angles = 2.0 * math.pi * self.rng.integers(spec.modes, size=n) / spec.modes
            centers = spec.scale * np.stack([np.cos(angles), np.sin(angles)], axis=1)
            return centers + (spec.scale / 20.0) * self.rng.standard_normal((n, 2))
        if spec.kind == "checkerboard":
            # 8 dark cells of a 4x4 unit-cell board on [-2, 2]^2, then scaled
            cells = _DARK_CELLS[self.rng.integers(8, size=n)]
            low = np.stack([cells[:, 1] - 2.0, cells[:, 0] - 2.0], axis=1)
            points = low + self.rng.random((n, 2))
            return points * (spec.scale / 2.0)
        idx = self.rng.integers(self._images.shape[0], size=n)
        return self._images[idx]


def make_dataset(spec: DatasetSpec, seed: int) -> Sampler:
    return Sampler(spec, seed)


# -- IDX files --------------------------------------------------------------


def read_idx(path: str) -> np.ndarray:
    """Parse a u8 image IDX file into (count, rows, cols)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise ValueError(f"read_idx: truncated header at byte 0 ({len(blob)} bytes total)")
    magic = struct.unpack(">I", blob[:4])[0]
    if magic != IDX_IMAGE_MAGIC:
        raise ValueError(
            f"read_idx: bad magic 0x{magic:08x} at byte 0, expected 0x{IDX_IMAGE_MAGIC:08x}")
    if len(blob) < 16:
        raise ValueError(f"read_idx: truncated dimension block at byte {len(blob)}")
    count, rows, cols = struct.unpack(">III", blob[4:16])
    expected = 16 + count * rows * cols
    if len(blob) != expected:
        raise ValueError(
            f"read_idx: payload ends at byte {len(blob)}, expected {expected} "
            f"for {count} images of {rows}x{cols}")
    data = np.frombuffer(blob, dtype=np.uint8, offset=16)
    return data.reshape(count, rows, cols).copy()


def write_idx(path: str, images: np.ndarray) -> None:
    images = np.asarray(images)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise ValueError(f"write_idx: expected u8 (count, rows, cols), got "
                         f"{images.dtype} {images.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())


# -- PGM sheets --------------------------------------------------------------


def write_pgm(path: str, image: np.ndarray) -> None:
    """Binary PGM (P5), one grayscale image."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError(f"write_pgm: expected u8 (H, W), got {image.dtype} {image.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        fh.write(image.tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P5":
            raise ValueError("read_pgm: not a binary PGM file")
        width, height = map(int, fh.readline().split())
        if fh.readline().strip() != b"255":
            raise ValueError("read_pgm: expected 8-bit maxval 255")
        data = np.frombuffer(fh.read(height * width), dtype=np.uint8)
    return data.reshape(height, width).copy()


def write_pgm_grid(path: str, images: np.ndarray, columns: int = 8) -> None:
    """Tile (N, H, W) u8 images row-major into one PGM sheet."""
    images = np.asarray(images)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise ValueError(f"write_pgm_grid: expected u8 (N, H, W), got "
                         f"{images.dtype} {images.shape}")
    n, h, w = images.shape
    columns = min(columns, n)
    rows = (n + columns - 1) // columns
    sheet = np.zeros((rows * h, columns * w), dtype=np.uint8)
    for i, img in enumerate(images):
        r, c = divmod(i, columns)
        sheet[r * h:(r + 1) * h, c * w:(c + 1) * w] = img
    write_pgm(path, sheet)


def to_uint8(samples: np.ndarray) -> np.ndarray:
    """Map [-1, 1] float images to u8 with round-half-away clipping."""
    scaled = (np.asarray(samples, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


# -- point dumps --------------------------------------------------------------


def write_points_csv(path: str, points: np.ndarray) -> None:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"write_points_csv: expected (N, d), got {points.shape}")
    header = ",".join(f"x{i}" for i in range(points.shape[1]))
    lines = [header]
    for row in points:
        lines.append(",".join(repr(float(v)) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_points_csv(path: str) -> np.ndarray:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln]
    return np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])


# -- point-to-image rendering --------------------------------------------------


def render_blob_images(points: np.ndarray, size: int, extent: float = 2.5) -> np.ndarray:
    """One image per 2-D point: a Gaussian bump at the point's location.

    The board [-extent, extent]^2 maps onto a size x size raster; bump
    std is size/8 pixels.  Returns u8 (N, size, size); intensity is the
    bump value scaled by 255 (the peak hits 255 only when a point lands
    exactly on a pixel center).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError(f"render_blob_images: expected (N, 2) points, got {points.shape}")
    grid = (np.arange(size) + 0.5) / size * (2 * extent) - extent
    gx = grid[None, None, :]                       # image x = point x
    gy = -grid[None, :, None]                      # image rows grow downward
    px = points[:, 0][:, None, None]
    py = points[:, 1][:, None, None]
    sigma = (2 * extent / size) * (size / 8.0)
    bump = np.exp(-((gx - px) ** 2 + (gy - py) ** 2) / (2 * sigma * sigma))
    return np.clip(np.rint(bump * 255.0), 0, 255).astype(np.uint8)
