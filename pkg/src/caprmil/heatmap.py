"""Token assignment heatmaps: one P5 graymap per token and a top-k patch listing."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import BagRecord
from .errors import ConfigError, DataError, FormatError
from .model import ModelState, forward
from .numerics.tensor import no_grad

DEFAULT_TOP_K = 8


@dataclass
class HeatmapExport:
    bag_id: str
    block: int
    head: int
    grids: np.ndarray                  # [M, rows, cols] weights in [0, 1]
    top: list[list[tuple[int, int, int, float]]]  # per token: (patch, row, col, weight)
    paths: list[Path] = field(default_factory=list)


def encode_pgm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("P5 images must be 2-D uint8 arrays")
    rows, cols = image.shape
    return f"P5\n{cols} {rows}\n255\n".encode("ascii") + image.tobytes()


def decode_pgm(buf: bytes) -> np.ndarray:
    parts = buf.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise FormatError("not a binary P5 graymap")
    cols, rows, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}")
    data = buf[len(buf) - rows * cols:]
    return np.frombuffer(data, dtype=np.uint8).reshape(rows, cols)


def assignment_grids(weights: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Scatter ``[N, M]`` weights onto the patch raster; empty cells stay 0."""
    coords = np.asarray(coords, dtype=np.int64)
    rows, cols = coords.max(axis=0) + 1
    grids = np.zeros((weights.shape[1], rows, cols), dtype=np.float64)
    grids[:, coords[:, 0], coords[:, 1]] = weights.T
    return grids


def to_gray(grid: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(grid, 0.0, 1.0) * 255.0).astype(np.uint8)


def top_k(weights: np.ndarray, coords: np.ndarray, k: int = DEFAULT_TOP_K):
    """Highest-weight patches per token, sorted by descending weight (ties by patch id)."""
    n = weights.shape[0]
    if not 1 <= k <= n:
        raise ConfigError(f"k must lie in [1, N={n}], got {k}")
    out = []
    for m in range(weights.shape[1]):
        order = np.lexsort((np.arange(n), -weights[:, m]))[:k]
        out.append([(int(i), int(coords[i, 0]), int(coords[i, 1]), float(weights[i, m])) for i in order])
    return out


def format_top_k(top) -> str:
    lines = ["token,rank,patch,row,col,weight"]
    for m, rows in enumerate(top):
        lines += [f"{m},{r},{p},{y},{x},{w:.8f}" for r, (p, y, x, w) in enumerate(rows)]
    return "\n".join(lines) + "\n"


def compute_heatmaps(state: ModelState, bag: BagRecord, head: int = 0, block: int = 0,
                     k: int = DEFAULT_TOP_K) -> HeatmapExport:
    c = state.config
    if bag.coords is None:
        raise DataError(f"bag {bag.id} has no patch coordinates; "
                        "generate bags with `caprmil gen`, which records a raster layout")
    if c.n_blocks == 0:
        raise ConfigError("model has no attention blocks, so there is no assignment to draw")
    if not 0 <= block < c.n_blocks:
        raise ConfigError(f"block {block} out of range [0, {c.n_blocks})")
    if not 0 <= head < c.n_heads:
        raise ConfigError(f"head {head} out of range [0, {c.n_heads})")
    with no_grad():
        _, maps = forward(bag.features, state, training=False)
    weights = maps[block].numpy()[0, head].astype(np.float64)
    return HeatmapExport(bag.id, block, head, assignment_grids(weights, bag.coords),
                         top_k(weights, bag.coords, k))


def export_heatmaps(state: ModelState, bag: BagRecord, out_dir, head: int = 0, block: int = 0,
                    k: int = DEFAULT_TOP_K) -> HeatmapExport:
    """Write ``M`` graymaps plus one top-k CSV into ``out_dir``."""
    result = compute_heatmaps(state, bag, head, block, k)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{bag.id}_block{block}_head{head}"
    for m, grid in enumerate(result.grids):
        path = out_dir / f"{stem}_token{m}.pgm"
        path.write_bytes(encode_pgm(to_gray(grid)))
        result.paths.append(path)
    listing = out_dir / f"{stem}_top{k}.csv"
    listing.write_text(format_top_k(result.top))
    result.paths.append(listing)
    return result
