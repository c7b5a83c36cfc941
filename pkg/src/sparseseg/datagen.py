"""Synthetic polygonal-terrain scenes with instance annotations.

A seeded point process drives a Voronoi tessellation of each tile: every
cell is one polygon instance, cell borders are darkened troughs, and cell
interiors are shaded either dark-center/bright-rim ("low-centered") or the
reverse ("high-centered").  Instance masks are the interior pixels minus
troughs, so masks are pairwise disjoint by construction; cell polygon
outlines come from half-plane clipping.

The module also owns the dataset plumbing the rest of the package relies
on: run-length mask encoding, the on-disk manifest format, raster tiling
and stitching, padding to the backbone's stride grid, and the 70/15/15
dataset split.  Generation is embarrassingly parallel: each tile derives a
child seed from (master seed, tile index), so serial and parallel runs
produce byte-identical datasets.

Coordinates are (row, col) everywhere, including polygon vertices.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image

from .diffcore import ConfigError

__all__ = [
    "SceneConfig", "Instance", "AnnotatedTile", "DatasetSplit", "RasterTile",
    "GenerationError", "RleError", "DatasetError",
    "config_hash", "generate_scene", "split_dataset",
    "rle_encode", "rle_decode", "pad_to_grid", "unpad",
    "tile_raster", "stitch", "generate_dataset", "load_dataset",
    "LoadedTile", "LoadedDataset", "resolve_workers",
    "MANIFEST_MAGIC", "MANIFEST_NAME",
]

MANIFEST_MAGIC = "IWPDS1"
MANIFEST_NAME = "manifest.iwpds"

TROUGH_SHADE = 0.12
CHANNEL_SCALE = (1.0, 0.97, 0.90)
CHANNEL_SHIFT = (0.02, 0.0, -0.02)


class GenerationError(RuntimeError):
    """Raised when a valid scene cannot be produced from a config."""


class RleError(ValueError):
    """Raised on malformed run-length strings."""


class DatasetError(ValueError):
    """Raised on malformed or inconsistent dataset directories."""


@dataclass(frozen=True)
class SceneConfig:
    tile_extent: int = 226
    count_range: tuple[int, int] = (8, 48)
    low_centered_fraction: float = 0.5
    trough_width: float = 3.0
    noise: float = 0.04
    seed: int = 0
    classes_by_style: bool = False  # False: one class; True: low=0, high=1

    def __post_init__(self):
        # normalize numpy scalars so hashing and JSON serialization are stable
        object.__setattr__(self, "tile_extent", int(self.tile_extent))
        object.__setattr__(self, "count_range",
                           (int(self.count_range[0]), int(self.count_range[1])))
        object.__setattr__(self, "low_centered_fraction", float(self.low_centered_fraction))
        object.__setattr__(self, "trough_width", float(self.trough_width))
        object.__setattr__(self, "noise", float(self.noise))
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "classes_by_style", bool(self.classes_by_style))
        if not (64 <= self.tile_extent <= 507):
            raise ConfigError(
                f"tile_extent must be in [64, 507], got {self.tile_extent}")
        lo, hi = self.count_range
        if not (1 <= lo <= hi <= 447):
            raise ConfigError(
                f"count_range must satisfy 1 <= min <= max <= 447, got {self.count_range}")
        if not (0.0 <= self.low_centered_fraction <= 1.0):
            raise ConfigError("low_centered_fraction must be in [0, 1]")
        if self.trough_width < 1.0:
            raise ConfigError(f"trough_width must be >= 1, got {self.trough_width}")
        if self.noise < 0.0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")


@dataclass
class Instance:
    mask: np.ndarray               # bool (H, W)
    class_id: int
    polygon: list[tuple[float, float]]   # (row, col) cell outline vertices
    style: str                     # "low" or "high"

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class AnnotatedTile:
    tile_id: str
    image: np.ndarray              # float32 (3, H, W) in [0, 1]
    instances: list[Instance]
    provenance: dict               # {"seed": int, "config_hash": str}


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]


def config_hash(cfg: SceneConfig) -> str:
    """Digest of every config field except the seed."""
    fields = dataclasses.asdict(cfg)
    fields.pop("seed")
    blob = json.dumps(fields, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# scene generation

def _scatter_points(rng: np.random.Generator, count: int, extent: int) -> np.ndarray:
    """Dart throwing with a shrinking separation radius; always terminates."""
    sep = 0.45 * extent / np.sqrt(count)
    points: list[np.ndarray] = []
    rejects = 0
    while len(points) < count:
        p = rng.uniform(0.0, extent, size=2)
        if all(np.hypot(*(p - q)) >= sep for q in points):
            points.append(p)
            rejects = 0
        else:
            rejects += 1
            if rejects > 200:
                sep *= 0.85
                rejects = 0
    return np.array(points)


def _label_pixels(seeds: np.ndarray, extent: int):
    """Nearest/second-nearest seed per pixel, squared distances included."""
    rows = np.arange(extent, dtype=np.float32)
    grid_r, grid_c = np.meshgrid(rows, rows, indexing="ij")
    pix = np.stack([grid_r.ravel(), grid_c.ravel()], axis=1)      # (P, 2)
    d2 = ((pix[:, None, :] - seeds[None, :, :].astype(np.float32)) ** 2).sum(axis=2)
    if seeds.shape[0] == 1:
        labels = np.zeros(extent * extent, dtype=np.int64)
        return labels.reshape(extent, extent), d2[:, 0].reshape(extent, extent), None, None
    nearest2 = np.argpartition(d2, 1, axis=1)[:, :2]
    first_closer = (d2[np.arange(len(pix)), nearest2[:, 0]]
                    <= d2[np.arange(len(pix)), nearest2[:, 1]])
    lab = np.where(first_closer, nearest2[:, 0], nearest2[:, 1])
    second = np.where(first_closer, nearest2[:, 1], nearest2[:, 0])
    d1 = d2[np.arange(len(pix)), lab]
    dn = d2[np.arange(len(pix)), second]
    shape = (extent, extent)
    return (lab.reshape(shape), d1.reshape(shape), second.reshape(shape),
            dn.reshape(shape))


def _trough_mask(seeds, labels, second, d1, d2, width: float) -> np.ndarray:
    """Pixels within width/2 of a cell bisector."""
    if second is None:
        return np.zeros_like(labels, dtype=bool)
    sep = np.hypot(*(seeds[labels] - seeds[second]).transpose(2, 0, 1))
    bisector_dist = (d2 - d1) / (2.0 * np.maximum(sep, 1e-9))
    return bisector_dist < width / 2.0


def _clip_half_plane(poly: list, mid: np.ndarray, direction: np.ndarray) -> list:
    """Keep the side of the bisector where (p - mid) . direction <= 0."""
    if not poly:
        return poly
    out = []
    values = [float(np.dot(np.asarray(v) - mid, direction)) for v in poly]
    for i, v in enumerate(poly):
        j = (i + 1) % len(poly)
        a, b = values[i], values[j]
        if a <= 0:
            out.append(v)
        if (a <= 0) != (b <= 0):
            t = a / (a - b)
            crossing = np.asarray(v) + t * (np.asarray(poly[j]) - np.asarray(v))
            out.append(tuple(crossing))
    return out


def _cell_polygon(index: int, seeds: np.ndarray, extent: int) -> list[tuple[float, float]]:
    e = float(extent)
    poly = [(0.0, 0.0), (0.0, e), (e, e), (e, 0.0)]
    own = seeds[index]
    for j, other in enumerate(seeds):
        if j == index:
            continue
        mid = (own + other) / 2.0
        poly = _clip_half_plane(poly, mid, other - own)
    return [(round(float(r), 3), round(float(c), 3)) for r, c in poly]


def _shade(labels, d1, trough, styles, counts_max, noise, rng) -> np.ndarray:
    dist = np.sqrt(d1)
    cell_reach = np.zeros(counts_max, dtype=np.float32)
    np.maximum.at(cell_reach, labels.ravel(), dist.ravel())
    norm = dist / np.maximum(cell_reach[labels], 1e-6)
    low = 0.35 + 0.45 * norm          # dark center, bright rim
    high = 0.80 - 0.45 * norm         # bright center, dark rim
    gray = np.where(styles[labels] == 0, low, high).astype(np.float32)
    gray[trough] = TROUGH_SHADE
    if noise > 0:
        gray = gray + rng.normal(0.0, noise, gray.shape).astype(np.float32)
    channels = [np.clip(gray * s + o, 0.0, 1.0)
                for s, o in zip(CHANNEL_SCALE, CHANNEL_SHIFT)]
    return np.stack(channels).astype(np.float32)


def generate_scene(cfg: SceneConfig, tile_id: Optional[str] = None) -> AnnotatedTile:
    """One seeded tile: image, disjoint instance masks, cell polygons."""
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.count_range
    count = int(rng.integers(lo, hi + 1))
    extent = cfg.tile_extent
    for _attempt in range(50):
        seeds = _scatter_points(rng, count, extent)
        labels, d1, second, d2 = _label_pixels(seeds, extent)
        trough = _trough_mask(seeds, labels, second, d1, d2, cfg.trough_width)
        interior = ~trough
        masks = [(labels == i) & interior for i in range(count)]
        if all(m.any() for m in masks):
            break
        # a cell drowned in troughs; re-jitter deterministically by drawing
        # a fresh point set from the same stream
    else:
        raise GenerationError(
            f"no valid tessellation after 50 attempts (seed {cfg.seed}, "
            f"count {count}, extent {extent})")
    styles = (rng.random(count) >= cfg.low_centered_fraction).astype(np.int64)
    image = _shade(labels, d1, trough, styles, count, cfg.noise, rng)
    instances = []
    for i in range(count):
        class_id = int(styles[i]) if cfg.classes_by_style else 0
        instances.append(Instance(
            mask=masks[i],
            class_id=class_id,
            polygon=_cell_polygon(i, seeds, extent),
            style="high" if styles[i] else "low",
        ))
    return AnnotatedTile(
        tile_id=tile_id or f"tile-{cfg.seed:08x}",
        image=image,
        instances=instances,
        provenance={"seed": int(cfg.seed), "config_hash": config_hash(cfg)},
    )


# ---------------------------------------------------------------------------
# splitting

def split_dataset(tile_ids: Sequence[str], seed: int) -> DatasetSplit:
    """Seeded shuffle, then a 70/15/15 cut (each fraction within one tile)."""
    n = len(tile_ids)
    if n < 3:
        raise DatasetError(f"need at least 3 tiles to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [tile_ids[i] for i in order]
    holdout = max(1, int(0.15 * n + 0.5))
    train = n - 2 * holdout
    return DatasetSplit(
        train=tuple(shuffled[:train]),
        val=tuple(shuffled[train:train + holdout]),
        test=tuple(shuffled[train + holdout:]),
    )


# ---------------------------------------------------------------------------
# run-length codec

def rle_encode(mask: np.ndarray) -> str:
    """Row-major alternating run lengths, zero-run first."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return "0"
    switches = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], switches, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return ",".join(str(r) for r in runs)


def rle_decode(text: str, extent: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`rle_encode` for a known (H, W) extent."""
    h, w = extent
    total = h * w
    flat = np.zeros(total, dtype=bool)
    pos = 0
    offset = 0
    value = False
    for token in text.split(","):
        if not token.isdigit():
            raise RleError(f"bad run {token!r} at offset {offset}")
        run = int(token)
        if pos + run > total:
            raise RleError(f"runs overflow extent {h}x{w} at offset {offset}")
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
        offset += len(token) + 1
    if pos != total:
        raise RleError(f"runs cover {pos} of {total} pixels")
    return flat.reshape(h, w)


# ---------------------------------------------------------------------------
# padding and tiling

def pad_to_grid(image: np.ndarray, multiple: int = 16) -> tuple[np.ndarray, tuple[int, int]]:
    """Zero-pad the trailing two axes up to the next multiple."""
    h, w = image.shape[-2], image.shape[-1]
    ph = (multiple - h % multiple) % multiple
    pw = (multiple - w % multiple) % multiple
    if ph == 0 and pw == 0:
        return image, (h, w)
    pad_spec = [(0, 0)] * (image.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(image, pad_spec), (h, w)


def unpad(image: np.ndarray, extent: tuple[int, int]) -> np.ndarray:
    h, w = extent
    return image[..., :h, :w]


@dataclass
class RasterTile:
    data: np.ndarray     # (C, tile, tile)
    row: int
    col: int
    padded: bool


def _positions(extent: int, tile: int, stride: int) -> list[int]:
    out = [0]
    while out[-1] + tile < extent:
        out.append(out[-1] + stride)
    return out


def tile_raster(raster: np.ndarray, tile: int, overlap: int) -> list[RasterTile]:
    """Row-major tiles covering the raster; edge tiles are zero-padded."""
    if overlap < 0 or tile <= overlap:
        raise ConfigError(f"need tile > overlap >= 0, got tile={tile} overlap={overlap}")
    c, h, w = raster.shape
    stride = tile - overlap
    tiles = []
    for r in _positions(h, tile, stride):
        for col in _positions(w, tile, stride):
            patch = raster[:, r:r + tile, col:col + tile]
            padded = patch.shape[1:] != (tile, tile)
            if padded:
                full = np.zeros((c, tile, tile), dtype=raster.dtype)
                full[:, :patch.shape[1], :patch.shape[2]] = patch
                patch = full
            tiles.append(RasterTile(data=patch, row=r, col=col, padded=padded))
    return tiles


def stitch(tiles: Sequence[RasterTile], extent: tuple[int, int]) -> np.ndarray:
    """Reassemble tiles; overlapping regions agree for tiles of one raster."""
    if not tiles:
        raise DatasetError("cannot stitch zero tiles")
    c = tiles[0].data.shape[0]
    h, w = extent
    out = np.zeros((c, h, w), dtype=tiles[0].data.dtype)
    for t in tiles:
        th = min(t.data.shape[1], h - t.row)
        tw = min(t.data.shape[2], w - t.col)
        out[:, t.row:t.row + th, t.col:t.col + tw] = t.data[:, :th, :tw]
    return out


# ---------------------------------------------------------------------------
# dataset store

def _image_to_png(image: np.ndarray, path: Path) -> None:
    arr = np.round(image * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def _png_to_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def _tile_record(tile: AnnotatedTile, image_rel: str) -> dict:
    h, w = tile.image.shape[1], tile.image.shape[2]
    return {
        "tile_id": tile.tile_id,
        "image": image_rel,
        "extent": [h, w],
        "provenance": tile.provenance,
        "instances": [
            {
                "rle": rle_encode(inst.mask),
                "class_id": inst.class_id,
                "area": inst.area,
                "style": inst.style,
                "polygon": [[float(r), float(c)] for r, c in inst.polygon],
            }
            for inst in tile.instances
        ],
    }


def _child_config(cfg: SceneConfig, index: int) -> SceneConfig:
    child_seed = int(np.random.SeedSequence([cfg.seed, index]).generate_state(1)[0])
    return dataclasses.replace(cfg, seed=child_seed)


def _generate_indexed(args: tuple[SceneConfig, int]) -> AnnotatedTile:
    cfg, index = args
    return generate_scene(_child_config(cfg, index), tile_id=f"tile{index:05d}")


def resolve_workers(requested: Optional[int]) -> int:
    """Worker count for parallel stages, capped by SPSEG_THREADS."""
    limit = os.environ.get("SPSEG_THREADS")
    cap = int(limit) if limit else (os.cpu_count() or 1)
    want = requested if requested and requested > 0 else cap
    return max(1, min(want, cap))


def generate_dataset(count: int, cfg: SceneConfig, out_dir: Union[str, Path],
                     workers: int = 1) -> Path:
    """Write ``count`` tiles plus a manifest; returns the manifest path.

    Tile i always receives the child seed derived from (cfg.seed, i), so
    any worker count yields byte-identical output.
    """
    if count < 3:
        raise DatasetError(f"dataset needs at least 3 tiles, got {count}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, i) for i in range(count)]
    workers = resolve_workers(workers)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            tiles = list(pool.map(_generate_indexed, jobs, chunksize=8))
    else:
        tiles = [_generate_indexed(job) for job in jobs]
    ids = [t.tile_id for t in tiles]
    split = split_dataset(ids, seed=cfg.seed)
    records = []
    for tile in tiles:
        rel = f"images/{tile.tile_id}.png"
        _image_to_png(tile.image, out / rel)
        records.append(_tile_record(tile, rel))
    meta = {
        "count": count,
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
        "config": dataclasses.asdict(cfg),
        "splits": {"train": list(split.train), "val": list(split.val),
                   "test": list(split.test)},
    }
    manifest = out / MANIFEST_NAME
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write(MANIFEST_MAGIC + "\n")
        fh.write(json.dumps(meta, sort_keys=True, separators=(",", ":")) + "\n")
        for record in records:
            fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")
    return manifest


@dataclass
class LoadedTile:
    tile_id: str
    image: np.ndarray            # float32 (3, H, W)
    instances: list[Instance]
    split: str


@dataclass
class LoadedDataset:
    root: Path
    meta: dict
    tiles: list[LoadedTile]

    def by_split(self, name: str) -> list[LoadedTile]:
        return [t for t in self.tiles if t.split == name]

    @property
    def max_instances(self) -> int:
        return max(len(t.instances) for t in self.tiles)


def load_dataset(root: Union[str, Path]) -> LoadedDataset:
    root = Path(root)
    manifest = root / MANIFEST_NAME
    if not manifest.exists():
        raise DatasetError(f"no {MANIFEST_NAME} under {root}")
    lines = manifest.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise DatasetError(f"{manifest}: missing {MANIFEST_MAGIC} header")
    meta = json.loads(lines[1])
    split_of = {}
    for name, ids in meta["splits"].items():
        for tile_id in ids:
            split_of[tile_id] = name
    tiles = []
    for line in lines[2:]:
        rec = json.loads(line)
        extent = tuple(rec["extent"])
        instances = [
            Instance(
                mask=rle_decode(inst["rle"], extent),
                class_id=inst["class_id"],
                polygon=[tuple(v) for v in inst["polygon"]],
                style=inst["style"],
            )
            for inst in rec["instances"]
        ]
        tiles.append(LoadedTile(
            tile_id=rec["tile_id"],
            image=_png_to_image(root / rec["image"]),
            instances=instances,
            split=split_of.get(rec["tile_id"], "train"),
        ))
    if len(tiles) != meta["count"]:
        raise DatasetError(
            f"{manifest}: header count {meta['count']} != {len(tiles)} records")
    return LoadedDataset(root=root, meta=meta, tiles=tiles)
