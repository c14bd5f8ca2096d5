"""Corpus ingestion, run-length masks, 5-channel inputs, folds and synthetic data.

On-disk layout (same as the public salt corpus)::

    <root>/train.csv        id,rle_mask
    <root>/depths.csv       id,z          (integer feet)
    <root>/images/<id>.png  8-bit grayscale  (or <id>.pgm)

RLE runs are column-major (top to bottom, then the next column) with
1-indexed starts.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

N_BINS = 10


class RLEError(ValueError):
    """Malformed run-length string; ``position`` is the 0-based token index."""

    def __init__(self, message: str, position: int | None = None):
        super().__init__(message if position is None else f"token {position}: {message}")
        self.position = position


@dataclass
class SampleRecord:
    id: str
    image: np.ndarray
    mask: np.ndarray
    depth: float
    coverage: float = 0.0
    coverage_bin: int = 0
    fold: int | None = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        self.coverage = float(self.mask.mean())
        self.coverage_bin = coverage_bin(self.coverage)


def coverage_bin(coverage: float) -> int:
    return min(int(np.floor(coverage * N_BINS)), N_BINS - 1)


# ---------------------------------------------------------------------------
# run-length codec


def decode_rle(rle: str, height: int, width: int) -> np.ndarray:
    tokens = rle.split()
    if len(tokens) % 2:
        raise RLEError(f"odd number of tokens ({len(tokens)}); runs are start/length pairs", len(tokens) - 1)
    total = height * width
    flat = np.zeros(total, dtype=np.uint8)
    for i in range(0, len(tokens), 2):
        vals = []
        for j in (i, i + 1):
            if not re.fullmatch(r"\d+", tokens[j]) or int(tokens[j]) <= 0:
                raise RLEError(f"{tokens[j]!r} is not a positive integer", j)
            vals.append(int(tokens[j]))
        start, length = vals
        if start - 1 + length > total:
            raise RLEError(f"run {start}+{length} exceeds {total} pixels", i + 1)
        flat[start - 1 : start - 1 + length] = 1
    return flat.reshape(width, height).T


def encode_rle(mask) -> str:
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask must be binary")
    flat = np.concatenate([[0], m.T.ravel().astype(np.int8), [0]])
    edges = np.flatnonzero(np.diff(flat))
    starts, ends = edges[::2], edges[1::2]
    return " ".join(f"{s + 1} {e - s}" for s, e in zip(starts, ends))


# ---------------------------------------------------------------------------
# resizing and input assembly


def _source_coords(n_in: int, n_out: int) -> np.ndarray:
    return np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape
    if (h, w) == (size, size):
        return img.astype(np.float64)
    ys, xs = _source_coords(h, size), _source_coords(w, size)
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    wy, wx = (ys - y0)[:, None], (xs - x0)[None, :]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def resize_nearest(mask: np.ndarray, size: int) -> np.ndarray:
    h, w = mask.shape
    ys = np.minimum(((np.arange(size) + 0.5) * h / size).astype(int), h - 1)
    xs = np.minimum(((np.arange(size) + 0.5) * w / size).astype(int), w - 1)
    return mask[ys][:, xs]


def assemble_input(sample: SampleRecord, resolution: int) -> np.ndarray:
    """Channels: grayscale, broadcast depth, row coordinate, two zero pads."""
    if resolution < 8:
        raise ValueError(f"resolution must be >= 8, got {resolution}")
    out = np.zeros((5, resolution, resolution))
    out[0] = resize_bilinear(np.asarray(sample.image, dtype=np.float64), resolution)
    out[1] = sample.depth
    out[2] = (np.arange(resolution) / (resolution - 1))[:, None]
    return out


def target_mask(sample: SampleRecord, resolution: int) -> np.ndarray:
    return resize_nearest(sample.mask, resolution)


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldPlan:
    k: int
    assignments: dict
    seed: int

    def validation_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.assignments.items() if f == fold]

    def training_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.assignments.items() if f != fold]


def stratified_folds(records, k: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffle ids within each coverage bin and deal them round-robin to folds.

    The dealing position carries over between bins so overall fold sizes
    stay balanced too.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    by_bin: dict[int, list[str]] = {}
    for r in records:
        by_bin.setdefault(r.coverage_bin, []).append(r.id)
    assignments = {}
    cursor = 0
    for b in sorted(by_bin):
        ids = sorted(by_bin[b])
        for idx in rng.permutation(len(ids)):
            assignments[ids[idx]] = cursor % k
            cursor += 1
    ordered = {r.id: assignments[r.id] for r in records}
    return FoldPlan(k, ordered, seed)


def apply_folds(records, plan: FoldPlan) -> list[SampleRecord]:
    return [replace(r, fold=plan.assignments[r.id]) for r in records]


# ---------------------------------------------------------------------------
# synthetic corpus


def _synthetic_sample(rng: np.random.Generator, res: int, empty: bool):
    yy, xx = np.mgrid[0:res, 0:res] / (res - 1)
    mask = np.zeros((res, res), dtype=np.uint8)
    if not empty:
        field = np.zeros((res, res))
        for _ in range(rng.integers(2, 5)):
            cy, cx = rng.uniform(0.0, 1.0, size=2)
            radius = rng.uniform(0.12, 0.45)
            field += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
        level = rng.uniform(0.25, 0.9) * field.max()
        mask = (field >= level).astype(np.uint8)

    freq = rng.uniform(3.0, 8.0)
    phase = rng.uniform(0, 2 * np.pi)
    warp = 0.15 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * xx + rng.uniform(0, 2 * np.pi))
    layers = np.sin(2 * np.pi * freq * (yy + warp) + phase)
    salt_layers = np.sin(2 * np.pi * freq * 0.5 * (yy + 2 * warp + 0.3 * xx) + phase)
    texture = np.where(mask == 1, 0.25 * salt_layers, layers)
    image = 0.5 + 0.35 * texture + rng.normal(0.0, 0.05, size=(res, res))
    # quantize to 8 bits so a PGM round trip is exact
    image = np.round(np.clip(image, 0.0, 1.0) * 255) / 255
    z = int(rng.integers(50, 1000))
    return image, mask, z


def generate_synthetic(n: int, resolution: int, empty_fraction: float = 0.2, seed: int = 0) -> list[SampleRecord]:
    """Seismic-looking images with blob-shaped salt bodies.

    Exactly ``floor(n * empty_fraction)`` samples have empty masks. Each
    sample draws from its own generator seeded by ``(seed, index)``.
    """
    return generate_synthetic_raw(n, resolution, empty_fraction, seed)[0]


def generate_synthetic_raw(n: int, resolution: int, empty_fraction: float, seed: int):
    """Like :func:`generate_synthetic` but also returns the raw depths in feet."""
    if not 0.0 <= empty_fraction < 1.0:
        raise ValueError(f"empty_fraction must be in [0, 1), got {empty_fraction}")
    if n < 1 or resolution < 8:
        raise ValueError("need n >= 1 and resolution >= 8")
    n_empty = int(np.floor(n * empty_fraction))
    empty = set(np.random.default_rng([seed, n]).permutation(n)[:n_empty].tolist())
    raw = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        image, mask, z = _synthetic_sample(rng, resolution, i in empty)
        raw.append((f"s{seed}_{i:05d}", image, mask, z))
    zmax = max(z for *_, z in raw)
    records = [SampleRecord(sid, image, mask, z / zmax) for sid, image, mask, z in raw]
    return records, {sid: z for sid, *_, z in raw}


# ---------------------------------------------------------------------------
# image files


def pgm_bytes(img8: np.ndarray) -> bytes:
    img8 = np.asarray(img8, dtype=np.uint8)
    h, w = img8.shape
    return f"P5\n{w} {h}\n255\n".encode() + img8.tobytes()


def write_pgm(path, img8: np.ndarray) -> None:
    Path(path).write_bytes(pgm_bytes(img8))


def parse_pgm(data: bytes) -> np.ndarray:
    """Read binary (P5) or ASCII (P2) PGM with maxval <= 255."""
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end : end + 1].isspace():
            end += 1
        if end == pos:
            raise ValueError("truncated PGM header")
        fields.append(data[pos:end].decode("ascii"))
        pos = end
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if maxval > 255:
        raise ValueError("only 8-bit PGM is supported")
    if magic == "P5":
        pixels = np.frombuffer(data[pos + 1 : pos + 1 + w * h], dtype=np.uint8)
    elif magic == "P2":
        pixels = np.array(data[pos:].split()[: w * h], dtype=np.uint8)
    else:
        raise ValueError(f"not a PGM file (magic {magic!r})")
    if pixels.size != w * h:
        raise ValueError(f"PGM body has {pixels.size} pixels, expected {w * h}")
    return pixels.reshape(h, w)


def read_image(path) -> np.ndarray:
    """8-bit grayscale image as floats in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return parse_pgm(path.read_bytes()) / 255.0
    from PIL import Image  # only needed for the real corpus

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def load_corpus(root) -> list[SampleRecord]:
    root = Path(root)
    depths = {}
    with open(root / "depths.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            depths[row["id"]] = float(row["z"])
    rows = []
    with open(root / "train.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append((row["id"], row["rle_mask"] or ""))
    if not rows:
        raise ValueError(f"{root / 'train.csv'} lists no samples")
    zmax = max(depths[i] for i, _ in rows)
    records = []
    for sid, rle in rows:
        candidates = [root / "images" / f"{sid}{ext}" for ext in (".png", ".pgm")]
        path = next((p for p in candidates if p.exists()), None)
        if path is None:
            raise FileNotFoundError(f"no image for id {sid} under {root / 'images'}")
        image = read_image(path)
        mask = decode_rle(rle, *image.shape)
        records.append(SampleRecord(sid, image, mask, depths[sid] / zmax))
    return records


def export_corpus(root, records, depths_ft: dict) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / "train.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "rle_mask"])
        for r in records:
            w.writerow([r.id, encode_rle(r.mask)])
    with open(root / "depths.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "z"])
        for r in records:
            w.writerow([r.id, depths_ft[r.id]])
    for r in records:
        write_pgm(root / "images" / f"{r.id}.pgm", np.round(r.image * 255))
