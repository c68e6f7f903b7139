"""Synthetic landmark datasets, the on-disk dataset format, and occlusion masking."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .geometry import Shape, fill_polygon


class DatasetError(ValueError):
    pass


@dataclass
class SyntheticConfig:
    image_size: int = 64
    structures: tuple[str, ...] = ("lung_right", "lung_left", "heart")
    landmarks_per_structure: tuple[int, ...] = (16, 16, 16)
    # template centers and radii as fractions of the image side
    centers: tuple[tuple[float, float], ...] = ((0.30, 0.40), (0.70, 0.40), (0.50, 0.78))
    radii: tuple[tuple[float, float], ...] = ((0.13, 0.24), (0.13, 0.24), (0.17, 0.11))
    n_harmonics: int = 4
    amplitude: float = 0.15
    amplitude_decay: float = 0.6
    global_jitter: float = 0.03
    structure_jitter: float = 0.015
    scale_jitter: float = 0.06
    contrast: tuple[float, float] = (0.55, 0.9)
    background: tuple[float, float] = (0.05, 0.25)
    ramp: float = 0.15
    noise_sigma: float = 0.05
    spacing_mm: float = 2.8
    n_train: int = 160
    n_test: int = 40

    def __post_init__(self):
        self.structures = tuple(self.structures)
        self.landmarks_per_structure = tuple(int(v) for v in self.landmarks_per_structure)
        self.centers = tuple(tuple(float(a) for a in c) for c in self.centers)
        self.radii = tuple(tuple(float(a) for a in r) for r in self.radii)
        self.contrast = tuple(float(v) for v in self.contrast)
        self.background = tuple(float(v) for v in self.background)
        n = len(self.structures)
        if not (len(self.landmarks_per_structure) == len(self.centers) == len(self.radii) == n):
            raise ValueError("structures, landmark counts, centers and radii must have equal length")
        if min(self.landmarks_per_structure) < 3:
            raise ValueError("every structure needs at least 3 landmarks")
        if self.image_size % 8:
            raise ValueError("image_size must be divisible by 8")
        if self.n_train < 2 or self.n_test < 1:
            raise ValueError("need at least 2 training and 1 test sample")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DatasetManifest:
    n_samples: int
    image_size: int
    spacing_mm: float
    structures: list[tuple[str, int]]
    train: list[int]
    test: list[int]
    seed: int = 0

    def __post_init__(self):
        self.structures = [(str(n), int(c)) for n, c in self.structures]
        self.train = [int(i) for i in self.train]
        self.test = [int(i) for i in self.test]
        if set(self.train) & set(self.test):
            raise DatasetError("train and test splits overlap")
        every = self.train + self.test
        if any(i < 0 or i >= self.n_samples for i in every):
            raise DatasetError("split index outside the sample range")

    @property
    def slices(self) -> tuple[tuple[str, int, int], ...]:
        out, pos = [], 0
        for name, count in self.structures:
            out.append((name, pos, pos + count))
            pos += count
        return tuple(out)


@dataclass
class Dataset:
    manifest: DatasetManifest
    images: list[np.ndarray]  # uint8 H×W
    shapes: list[Shape]

    def __len__(self) -> int:
        return len(self.images)

    def pixels(self, i: int) -> np.ndarray:
        """1×H×W float image in [0, 1]."""
        return (self.images[i].astype(np.float64) / 255.0)[None]

    @property
    def train_shapes(self) -> list[Shape]:
        return [self.shapes[i] for i in self.manifest.train]

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.manifest == other.manifest
            and len(self.images) == len(other.images)
            and all(np.array_equal(a, b) and a.dtype == b.dtype for a, b in zip(self.images, other.images))
            and self.shapes == other.shapes
        )


# -- synthetic generation ---------------------------------------------------
DENSE = 512
MAX_RESAMPLES = 100


def _segments_intersect(poly: np.ndarray) -> bool:
    """True if any two non-adjacent edges of the closed polygon cross."""
    a = poly
    b = np.roll(poly, -1, axis=0)
    n = len(poly)

    def orient(p, q, r):
        return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0])

    i, j = np.triu_indices(n, k=2)
    keep = ~((i == 0) & (j == n - 1))
    i, j = i[keep], j[keep]
    o1 = orient(a[i], b[i], a[j])
    o2 = orient(a[i], b[i], b[j])
    o3 = orient(a[j], b[j], a[i])
    o4 = orient(a[j], b[j], b[i])
    return bool(np.any((o1 * o2 < 0) & (o3 * o4 < 0)))


def _equal_arclength(dense: np.ndarray, n: int) -> np.ndarray:
    closed = np.vstack([dense, dense[:1]])
    seg = np.sqrt((np.diff(closed, axis=0) ** 2).sum(axis=1))
    s = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.arange(n) * s[-1] / n
    x = np.interp(targets, s, closed[:, 0])
    y = np.interp(targets, s, closed[:, 1])
    return np.stack([x, y], axis=1)


def _draw_geometry(cfg: SyntheticConfig, rng: np.random.Generator):
    size = cfg.image_size
    shift = rng.normal(0.0, cfg.global_jitter, size=2)
    scale = 1.0 + rng.normal(0.0, cfg.scale_jitter)
    theta = np.linspace(0.0, 2 * np.pi, DENSE, endpoint=False)
    dense_all, marks = [], []
    for (cx, cy), (rx, ry), n in zip(cfg.centers, cfg.radii, cfg.landmarks_per_structure):
        c = (np.array([cx, cy]) + shift + rng.normal(0.0, cfg.structure_jitter, size=2)) * size
        radius = np.ones_like(theta)
        for k in range(2, cfg.n_harmonics + 2):
            amp = cfg.amplitude * cfg.amplitude_decay ** (k - 2) * rng.uniform(-1.0, 1.0)
            radius += amp * np.cos(k * theta + rng.uniform(0.0, 2 * np.pi))
        dense = np.stack(
            [c[0] + scale * rx * size * radius * np.cos(theta), c[1] + scale * ry * size * radius * np.sin(theta)],
            axis=1,
        )
        dense_all.append(dense)
        marks.append(_equal_arclength(dense, n))
    return dense_all, marks


def _geometry_ok(cfg: SyntheticConfig, dense_all, marks) -> bool:
    size = cfg.image_size
    for dense, pts in zip(dense_all, marks):
        if dense.min() < 1.0 or dense.max() > size - 1.0:
            return False
        if _segments_intersect(pts) or _segments_intersect(dense[:: max(1, DENSE // 128)]):
            return False
    masks = [fill_polygon(d, size) for d in dense_all]
    return not np.any(np.sum(masks, axis=0) > 1)


def generate_sample(cfg: SyntheticConfig, seed: int, index: int, noiseless: bool = False):
    """Return (uint8 image or float noiseless image, Shape, dense contours) for one sample."""
    rng = np.random.default_rng([seed, index])
    for _ in range(MAX_RESAMPLES):
        dense_all, marks = _draw_geometry(cfg, rng)
        if _geometry_ok(cfg, dense_all, marks):
            break
    else:
        raise ValueError(f"sample {index}: no valid contour after {MAX_RESAMPLES} resamples")

    size = cfg.image_size
    yy, xx = np.mgrid[0:size, 0:size] / size
    lo, hi = cfg.background
    image = rng.uniform(lo, hi) + rng.uniform(-cfg.ramp, cfg.ramp) * xx + rng.uniform(-cfg.ramp, cfg.ramp) * yy
    for dense in dense_all:
        image[fill_polygon(dense, size)] = rng.uniform(*cfg.contrast)
    noise = rng.normal(0.0, cfg.noise_sigma, size=image.shape)
    slices, pos = [], 0
    for name, n in zip(cfg.structures, cfg.landmarks_per_structure):
        slices.append((name, pos, pos + n))
        pos += n
    shape = Shape(np.concatenate(marks), tuple(slices), cfg.spacing_mm)
    if noiseless:
        return image, shape, dense_all
    image = np.clip(image + noise, 0.0, 1.0)
    return np.round(image * 255.0).astype(np.uint8), shape, dense_all


def generate_synthetic(cfg: SyntheticConfig, seed: int = 0) -> Dataset:
    n = cfg.n_train + cfg.n_test
    images, shapes = [], []
    for i in range(n):
        img, shape, _ = generate_sample(cfg, seed, i)
        images.append(img)
        shapes.append(shape)
    manifest = DatasetManifest(
        n_samples=n,
        image_size=cfg.image_size,
        spacing_mm=cfg.spacing_mm,
        structures=list(zip(cfg.structures, cfg.landmarks_per_structure)),
        train=list(range(cfg.n_train)),
        test=list(range(cfg.n_train, n)),
        seed=seed,
    )
    return Dataset(manifest, images, shapes)


# -- file formats -----------------------------------------------------------
def write_pgm(path: Path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 2:
        raise ValueError("PGM export needs a 2-D uint8 array")
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PGM header at offset {pos}")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise DatasetError(f"{path}: not a binary PGM (magic {tokens[0]!r}) at offset 0")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DatasetError(f"{path}: malformed PGM header near offset {pos}") from exc
    if maxval != 255:
        raise DatasetError(f"{path}: expected maxval 255, got {maxval}")
    pos += 1
    body = raw[pos:]
    if len(body) != w * h:
        raise DatasetError(f"{path}: pixel data has {len(body)} bytes at offset {pos}, expected {w * h}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def write_landmarks(path: Path, shape: Shape) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["structure", "index", "x", "y"])
    for name, a, b in shape.structure_slices:
        for k, (x, y) in enumerate(shape.points[a:b]):
            writer.writerow([name, k, repr(float(x)), repr(float(y))])
    Path(path).write_text(buf.getvalue())


def read_landmarks(path: Path, spacing_mm: float) -> Shape:
    text = Path(path).read_text()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["structure", "index", "x", "y"]:
        raise DatasetError(f"{path}:1: expected header structure,index,x,y")
    pts, slices = [], []
    current, start, expected = None, 0, 0
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 4:
            raise DatasetError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
        name = row[0]
        try:
            idx, x, y = int(row[1]), float(row[2]), float(row[3])
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from exc
        if name != current:
            if current is not None:
                slices.append((current, start, len(pts)))
                if any(s[0] == name for s in slices):
                    raise DatasetError(f"{path}:{lineno}: structure {name!r} is not contiguous")
            current, start, expected = name, len(pts), 0
        if idx != expected:
            raise DatasetError(f"{path}:{lineno}: landmark index {idx}, expected {expected}")
        if not (np.isfinite(x) and np.isfinite(y)):
            raise DatasetError(f"{path}:{lineno}: non-finite coordinate")
        expected += 1
        pts.append((x, y))
    if current is None:
        raise DatasetError(f"{path}: no landmarks")
    slices.append((current, start, len(pts)))
    try:
        return Shape(np.array(pts), tuple(slices), spacing_mm)
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from exc


def save_dataset(ds: Dataset, directory: str | Path) -> None:
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    (d / "landmarks").mkdir(parents=True, exist_ok=True)
    man = asdict(ds.manifest)
    man["structures"] = [list(s) for s in ds.manifest.structures]
    (d / "manifest.json").write_text(json.dumps(man, indent=2))
    for i, (img, shape) in enumerate(zip(ds.images, ds.shapes)):
        write_pgm(d / "images" / f"{i:04d}.pgm", img)
        write_landmarks(d / "landmarks" / f"{i:04d}.csv", shape)


MANIFEST_KEYS = {f.name for f in fields(DatasetManifest)}


def load_dataset(directory: str | Path) -> Dataset:
    d = Path(directory)
    mpath = d / "manifest.json"
    try:
        raw = json.loads(mpath.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{mpath}: {exc}") from exc
    if set(raw) != MANIFEST_KEYS:
        raise DatasetError(f"{mpath}: manifest keys {sorted(raw)} differ from {sorted(MANIFEST_KEYS)}")
    manifest = DatasetManifest(**raw)
    n = manifest.n_samples
    for sub, ext in (("images", "pgm"), ("landmarks", "csv")):
        found = sorted((d / sub).glob(f"*.{ext}"))
        if len(found) != n:
            raise DatasetError(f"{d / sub}: manifest lists {n} samples but found {len(found)} .{ext} files")
    size = manifest.image_size
    images, shapes = [], []
    for i in range(n):
        ipath = d / "images" / f"{i:04d}.pgm"
        lpath = d / "landmarks" / f"{i:04d}.csv"
        if not ipath.exists() or not lpath.exists():
            raise DatasetError(f"sample {i:04d} missing ({ipath.name} / {lpath.name})")
        img = read_pgm(ipath)
        if img.shape != (size, size):
            raise DatasetError(f"{ipath}: image is {img.shape}, manifest says {size}×{size}")
        shape = read_landmarks(lpath, manifest.spacing_mm)
        if shape.structure_slices != manifest.slices:
            raise DatasetError(f"{lpath}: structures {shape.structure_slices} differ from manifest")
        if np.any(shape.points < 0) or np.any(shape.points >= size):
            raise DatasetError(f"{lpath}: landmark outside [0, {size})")
        images.append(img)
        shapes.append(shape)
    return Dataset(manifest, images, shapes)


# -- corruption -------------------------------------------------------------
def mask_side(fraction: float, size: int) -> int:
    return int(np.floor(fraction * size + 0.5))


def corrupt_mask(image: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Zero a square of side round(fraction·H) placed uniformly inside the image."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside [0, 1]")
    out = np.array(image, copy=True)
    h, w = out.shape[-2:]
    side = min(mask_side(fraction, h), h, w)
    if side == 0:
        return out
    y0 = int(rng.integers(0, h - side + 1))
    x0 = int(rng.integers(0, w - side + 1))
    out[..., y0 : y0 + side, x0 : x0 + side] = 0
    return out


def ablation_fractions(step: float = 0.1) -> list[float]:
    n = int(round(1.0 / step))
    return [round(i * step, 10) for i in range(n + 1)]
