"""Bags of patch features: binary bag files, manifests, and a synthetic generator.

Bag file (little-endian)::

    b"CAPB"  u32 version=1  u32 N  u32 D  u32 flags (bit0: coords present)
    float32 features[N, D]  (row-major)
    u32 coords[N, 2]        (only when bit0 is set)
"""

from __future__ import annotations

import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, CorruptionError, DataError, FormatError
from .numerics.rng import Rng

BAG_MAGIC = b"CAPB"
BAG_VERSION = 1
_BAG_HEADER = struct.Struct("<4sIIII")
SPLITS = ("train", "val", "test")


@dataclass
class BagRecord:
    id: str
    features: np.ndarray
    label: int
    coords: np.ndarray | None = None
    # per-patch witness flags; known only for synthetic bags, never serialised
    witness: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DataError(f"bag {self.id}: features must be [N>=1, D], got {self.features.shape}")
        if self.coords is not None and self.coords.shape != (self.features.shape[0], 2):
            raise DataError(f"bag {self.id}: coords shape {self.coords.shape} does not match N={self.n}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


# -- bag files ----------------------------------------------------------------------

def encode_bag(bag: BagRecord) -> bytes:
    flags = 1 if bag.coords is not None else 0
    parts = [_BAG_HEADER.pack(BAG_MAGIC, BAG_VERSION, bag.n, bag.d, flags),
             np.ascontiguousarray(bag.features, dtype="<f4").tobytes()]
    if bag.coords is not None:
        parts.append(np.ascontiguousarray(bag.coords, dtype="<u4").tobytes())
    return b"".join(parts)


def decode_bag(buf: bytes, bag_id: str = "", label: int = -1) -> BagRecord:
    if len(buf) < _BAG_HEADER.size:
        raise CorruptionError("bag header truncated", len(buf))
    magic, version, n, d, flags = _BAG_HEADER.unpack_from(buf)
    if magic != BAG_MAGIC:
        raise FormatError(f"bad bag magic {magic!r}, expected {BAG_MAGIC!r}")
    if version != BAG_VERSION:
        raise FormatError(f"unsupported bag version {version}")
    if flags & ~1:
        raise FormatError(f"unknown bag flags 0x{flags:x}")
    if n == 0 or d == 0:
        raise FormatError(f"bag must have N>=1 and D>=1, got N={n} D={d}")
    feat_end = _BAG_HEADER.size + 4 * n * d
    end = feat_end + (8 * n if flags & 1 else 0)
    if len(buf) < feat_end:
        raise CorruptionError(f"feature payload truncated: need {feat_end} bytes, have {len(buf)}", len(buf))
    if len(buf) < end:
        raise CorruptionError(f"coordinate payload truncated: need {end} bytes, have {len(buf)}", len(buf))
    if len(buf) > end:
        raise FormatError(f"{len(buf) - end} trailing bytes after bag payload")
    features = np.frombuffer(buf, dtype="<f4", count=n * d, offset=_BAG_HEADER.size).reshape(n, d)
    if not np.isfinite(features).all():
        raise DataError(f"bag {bag_id or '<unnamed>'} contains non-finite feature values")
    coords = None
    if flags & 1:
        coords = np.frombuffer(buf, dtype="<u4", count=2 * n, offset=feat_end).reshape(n, 2)
    return BagRecord(bag_id, features.astype(np.float32), label, coords)


def write_bag(bag: BagRecord, path) -> None:
    Path(path).write_bytes(encode_bag(bag))


def read_bag(path, label: int = -1) -> BagRecord:
    path = Path(path)
    return decode_bag(path.read_bytes(), bag_id=path.stem, label=label)


def bag_file_size(n: int, d: int, coords: bool) -> int:
    return _BAG_HEADER.size + 4 * n * d + (8 * n if coords else 0)


# -- manifests ----------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    split: str

    @property
    def id(self) -> str:
        return Path(self.path).stem


def parse_manifest(text: str, source: str = "<manifest>") -> list[ManifestEntry]:
    entries: list[ManifestEntry] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise DataError(f"{source}:{lineno}: expected 'path,label,split', got {raw!r}")
        path, label, split = parts
        try:
            label_i = int(label)
        except ValueError:
            raise DataError(f"{source}:{lineno}: label {label!r} is not an integer") from None
        if label_i < 0:
            raise DataError(f"{source}:{lineno}: negative label {label_i}")
        if split not in SPLITS:
            raise ConfigError(f"{source}:{lineno}: unknown split tag {split!r} (expected one of {SPLITS})")
        entries.append(ManifestEntry(path, label_i, split))
    ids = Counter(e.id for e in entries)
    dups = sorted(k for k, v in ids.items() if v > 1)
    if dups:
        raise DataError(f"{source}: duplicate bag ids {dups}")
    labels = {e.label for e in entries}
    if labels and labels != set(range(max(labels) + 1)):
        raise DataError(f"{source}: labels {sorted(labels)} are not a contiguous 0..C-1 set")
    return entries


def load_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    return parse_manifest(path.read_text(), source=str(path))


def format_manifest(entries: Sequence[ManifestEntry]) -> str:
    return "".join(f"{e.path},{e.label},{e.split}\n" for e in entries)


class BagFolder(Sequence[BagRecord]):
    """Lazily reads the bags of one split listed in a manifest."""

    def __init__(self, entries: Sequence[ManifestEntry], root="."):
        self.entries = list(entries)
        self.root = Path(root)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return BagFolder(self.entries[i], self.root)
        e = self.entries[i]
        path = Path(e.path)
        if not path.is_absolute():
            path = self.root / path
        bag = read_bag(path, label=e.label)
        bag.id = e.id
        return bag

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)


def open_split(data_dir, split: str, manifest: str = "manifest.csv") -> BagFolder:
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r} (expected one of {SPLITS})")
    data_dir = Path(data_dir)
    entries = [e for e in load_manifest(data_dir / manifest) if e.split == split]
    if not entries:
        raise ConfigError(f"split {split!r} is empty in {data_dir / manifest}")
    return BagFolder(entries, data_dir)


def kfold_manifests(entries: Sequence[ManifestEntry], k: int, seed: int) -> list[list[ManifestEntry]]:
    """``k`` stratified fold assignments; fold ``i`` tests on part ``i`` and validates on part ``i+1``."""
    if k < 3:
        raise ConfigError("k-fold manifests need k >= 3 (train, val and test parts)")
    rng = Rng(seed).spawn("kfold")
    part = np.empty(len(entries), dtype=np.int64)
    labels = np.array([e.label for e in entries])
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        part[idx] = np.arange(len(idx)) % k
    folds = []
    for i in range(k):
        split_of = {i: "test", (i + 1) % k: "val"}
        folds.append([ManifestEntry(e.path, e.label, split_of.get(int(p), "train"))
                      for e, p in zip(entries, part)])
    return folds


# -- synthetic bags -------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a synthetic two-class MIL dataset.

    Every patch draws a tissue morphology from a per-bag composition over
    ``n_morphologies`` means on the unit sphere and adds isotropic Gaussian
    noise of root-mean-square norm ``noise`` (per-coordinate standard
    deviation ``noise / sqrt(d_in)``). In positive bags each patch is, with probability
    ``witness_rate``, replaced by the signal morphology, which sits
    ``separation`` away from morphology 0 along the direction of morphology 1.
    """

    n_bags: int = 100
    bag_size: tuple[int, int] = (2000, 6000)
    d_in: int = 1024
    witness_rate: float = 0.02
    n_morphologies: int = 8
    separation: float = 4.0
    noise: float = 1.0
    seed: int = 0
    composition_alpha: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.witness_rate <= 1.0:
            raise ConfigError(f"witness_rate must lie in (0, 1], got {self.witness_rate}")
        if self.n_morphologies < 2:
            raise ConfigError(f"n_morphologies must be >= 2, got {self.n_morphologies}")
        if self.noise <= 0:
            raise ConfigError(f"noise must be > 0, got {self.noise}")
        lo, hi = self.bag_size
        if not 1 <= lo <= hi:
            raise ConfigError(f"bag_size must satisfy 1 <= min <= max, got {self.bag_size}")
        if self.n_bags < 1:
            raise ConfigError(f"n_bags must be >= 1, got {self.n_bags}")
        if self.d_in < 2:
            raise ConfigError(f"d_in must be >= 2, got {self.d_in}")
        if self.separation < 0:
            raise ConfigError(f"separation must be >= 0, got {self.separation}")
        if self.composition_alpha <= 0:
            raise ConfigError(f"composition_alpha must be > 0, got {self.composition_alpha}")

    def replace(self, **changes) -> "SyntheticSpec":
        from dataclasses import replace
        return replace(self, **changes)


PRESETS = {
    "hard": dict(witness_rate=0.02, bag_size=(2000, 6000)),
    "easy": dict(witness_rate=0.5, bag_size=(300, 700)),
}


def preset(name: str, **overrides) -> SyntheticSpec:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r} (expected one of {sorted(PRESETS)})") from None
    return SyntheticSpec(**{**base, **overrides})


def morphology_means(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Background morphology means ``[K, d_in]`` and the signal mean ``[d_in]``."""
    rng = Rng(spec.seed).spawn("morphologies")
    means = rng.normal((spec.n_morphologies, spec.d_in), dtype=np.float64)
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    direction = means[1] - means[0]
    direction /= np.linalg.norm(direction)
    return means, means[0] + spec.separation * direction


def raster_coords(n: int) -> np.ndarray:
    side = math.ceil(math.sqrt(n))
    idx = np.arange(n)
    return np.stack([idx // side, idx % side], axis=1).astype(np.uint32)


class SyntheticBags(Sequence[BagRecord]):
    """Deterministic synthetic bags, generated on access.

    Bag ``i`` depends only on ``(spec, i)``: labels alternate halves
    (``0`` for the first ``n_bags``, ``1`` after), and every bag size comes
    from one shared stream so size carries no label information.
    """

    def __init__(self, spec: SyntheticSpec):
        spec.validate()
        self.spec = spec
        root = Rng(spec.seed)
        lo, hi = spec.bag_size
        self.sizes = root.spawn("sizes").integers(lo, hi + 1, size=2 * spec.n_bags)
        self.labels = np.repeat([0, 1], spec.n_bags)
        self.means, self.signal = morphology_means(spec)
        self._root = root

    def __len__(self) -> int:
        return 2 * self.spec.n_bags

    def __iter__(self) -> Iterator[BagRecord]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        spec = self.spec
        rng = self._root.spawn("bag", i)
        n = int(self.sizes[i])
        label = int(self.labels[i])
        gen = rng.generator
        composition = gen.dirichlet(np.full(spec.n_morphologies, spec.composition_alpha))
        morph = gen.choice(spec.n_morphologies, size=n, p=composition)
        centers = self.means[morph]
        witness = np.zeros(n, dtype=bool)
        if label == 1:
            witness = gen.random(n) < spec.witness_rate
            centers[witness] = self.signal
        noise = gen.standard_normal((n, spec.d_in), dtype=np.float32)
        features = (centers.astype(np.float32) + np.float32(spec.noise / math.sqrt(spec.d_in)) * noise)
        coords = _place_witnesses(witness, gen)
        return BagRecord(f"syn{spec.seed}_{i:05d}", features, label, coords, witness)


def _place_witnesses(witness: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    """Raster coordinates with witness patches packed around one random centre."""
    n = witness.shape[0]
    grid = raster_coords(n).astype(np.float64)
    centre = grid[gen.integers(n)]
    order = np.argsort(((grid - centre) ** 2).sum(axis=1), kind="stable")
    coords = np.empty((n, 2), dtype=np.uint32)
    wit = np.flatnonzero(witness)
    rest = np.flatnonzero(~witness)
    coords[wit] = grid[order[: wit.size]]
    coords[rest] = grid[order[wit.size:]]
    return coords


def generate_synthetic(spec: SyntheticSpec) -> SyntheticBags:
    return SyntheticBags(spec)


def split_indices(n_total: int, n_test: int, n_val: int, labels: np.ndarray, seed: int) -> dict[str, np.ndarray]:
    """Class-stratified train/val/test index sets."""
    rng = Rng(seed).spawn("split")
    out = {"train": [], "val": [], "test": []}
    classes = np.unique(labels)
    for c in classes:
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        k_test = n_test // classes.size
        k_val = n_val // classes.size
        out["test"].append(idx[:k_test])
        out["val"].append(idx[k_test:k_test + k_val])
        out["train"].append(idx[k_test + k_val:])
    return {k: np.sort(np.concatenate(v)) for k, v in out.items()}


class Subset(Sequence[BagRecord]):
    """Lazy view of ``bags`` restricted to ``indices``."""

    def __init__(self, bags: Sequence[BagRecord], indices):
        self.bags = bags
        self.indices = np.asarray(indices, dtype=np.int64)

    def __len__(self) -> int:
        return int(self.indices.size)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Subset(self.bags, self.indices[i])
        return self.bags[int(self.indices[i])]

    @property
    def labels(self) -> np.ndarray:
        base = getattr(self.bags, "labels", None)
        if base is not None:
            return np.asarray(base)[self.indices]
        return np.array([self.bags[int(j)].label for j in self.indices], dtype=np.int64)


def benchmark_splits(name: str, seed: int, n_train: int = 200, n_val: int = 20, n_test: int = 50,
                     **overrides) -> dict[str, Subset]:
    """Lazily generated, class-balanced train/val/test splits of a preset."""
    total = n_train + n_val + n_test
    if total % 2:
        raise ConfigError("benchmark splits need an even total bag count")
    bags = SyntheticBags(preset(name, n_bags=total // 2, seed=seed, **overrides))
    idx = split_indices(total, n_test, n_val, bags.labels, seed)
    return {k: Subset(bags, v) for k, v in idx.items()}


def write_dataset(bags: Sequence[BagRecord], out_dir, splits: dict[str, np.ndarray]) -> list[ManifestEntry]:
    """Write bag files plus ``manifest.csv`` into ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "bags").mkdir(parents=True, exist_ok=True)
    split_of = {}
    for name, idx in splits.items():
        for i in idx:
            split_of[int(i)] = name
    entries = []
    for i in sorted(split_of):
        bag = bags[i]
        rel = f"bags/{bag.id}.bag"
        write_bag(bag, out_dir / rel)
        entries.append(ManifestEntry(rel, bag.label, split_of[i]))
    (out_dir / "manifest.csv").write_text(format_manifest(entries))
    return entries


def summarize(bags: Sequence[BagRecord]) -> dict:
    sizes = np.array([b.n for b in bags])
    labels = np.array([b.label for b in bags])
    wit = [b.witness.mean() for b in bags if b.label == 1 and b.witness is not None]
    return {
        "n_bags": int(len(bags)),
        "class_counts": {int(c): int((labels == c).sum()) for c in np.unique(labels)},
        "bag_size_min": int(sizes.min()),
        "bag_size_mean": float(sizes.mean()),
        "bag_size_max": int(sizes.max()),
        "witness_rate": float(np.mean(wit)) if wit else 0.0,
    }
