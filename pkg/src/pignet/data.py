"""Point-cloud ingestion, normalization, sampling, augmentation, corruption
generators, and a procedural generator of labeled desk-scale shapes.

File formats: a points file holds one whitespace-separated ``x y z`` triple
per line; a labels file holds one integer part id per line, one per point.
A dataset root is laid out as ``<root>/<category>/points/<id>.pts`` and
``<root>/<category>/points_label/<id>.seg`` with ``train.txt``, ``val.txt``
and ``test.txt`` manifests (one id per line) next to them.
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (ConfigError, DataError, DegenerateError, ParseError,
                     UsageError)
from .seeding import rng_of


@dataclass
class PointCloud:
    """n x 3 coordinates plus optional per-point part labels and a category."""

    points: np.ndarray
    labels: np.ndarray | None = None
    category: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise DataError(f"points must be (n, 3), got {self.points.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.points.shape[0],):
                raise DataError(
                    f"{self.points.shape[0]} points but "
                    f"{self.labels.shape[0]} labels")

    @property
    def n(self):
        return self.points.shape[0]

    def copy(self):
        labels = None if self.labels is None else self.labels.copy()
        return PointCloud(self.points.copy(), labels, self.category)


def load_cloud(points_path, labels_path=None, category=""):
    """Parse a points file (and optional labels file) into a PointCloud."""
    points = []
    with open(points_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ParseError(
                    f"{points_path}:{lineno}: expected 'x y z', got {line!r}")
            try:
                points.append([float(v) for v in parts])
            except ValueError:
                raise ParseError(
                    f"{points_path}:{lineno}: not a real triple: {line!r}")
    labels = None
    if labels_path is not None:
        labels = []
        with open(labels_path) as fh:
            for lineno, line in enumerate(fh, start=1):
                token = line.strip()
                if not token:
                    continue
                try:
                    labels.append(int(token))
                except ValueError:
                    raise ParseError(
                        f"{labels_path}:{lineno}: not an integer label: {line!r}")
        if len(labels) != len(points):
            raise DataError(
                f"{points_path} has {len(points)} points but {labels_path} "
                f"has {len(labels)} labels")
    return PointCloud(np.array(points, dtype=np.float64).reshape(-1, 3),
                      None if labels is None else np.array(labels),
                      category)


def save_cloud(cloud, points_path, labels_path=None):
    """Write a cloud back to disk; coordinates keep six decimals."""
    with open(points_path, "w") as fh:
        for x, y, z in cloud.points:
            fh.write(f"{x:.6f} {y:.6f} {z:.6f}\n")
    if labels_path is not None:
        if cloud.labels is None:
            raise UsageError("cloud has no labels to save")
        with open(labels_path, "w") as fh:
            for v in cloud.labels:
                fh.write(f"{int(v)}\n")


def normalize(cloud):
    """Center the cloud at the origin and scale the farthest point to norm 1."""
    center = cloud.points.mean(axis=0)
    centered = cloud.points - center
    radius = np.linalg.norm(centered, axis=1).max()
    if radius == 0.0:
        raise DegenerateError("all points are identical; cannot normalize")
    labels = None if cloud.labels is None else cloud.labels.copy()
    return PointCloud(centered / radius, labels, cloud.category)


def sample_points(cloud, m, seed):
    """Draw m points uniformly: without replacement when the cloud has at
    least m, with replacement otherwise. Labels travel with their points."""
    if m < 1:
        raise UsageError(f"sample size must be >= 1, got {m}")
    rng = rng_of(seed)
    idx = rng.choice(cloud.n, size=m, replace=cloud.n < m)
    labels = None if cloud.labels is None else cloud.labels[idx].copy()
    return PointCloud(cloud.points[idx].copy(), labels, cloud.category)


def rotate_up(points, angle, up_axis=1):
    """Rotate (n, 3) coordinates by ``angle`` about the given up axis."""
    c, s = math.cos(angle), math.sin(angle)
    rot = np.eye(3)
    a, b = [i for i in range(3) if i != up_axis]
    rot[a, a] = c
    rot[a, b] = s
    rot[b, a] = -s
    rot[b, b] = c
    return points @ rot


@dataclass
class AugmentConfig:
    """Training-time randomization: up-axis rotation, anisotropic scaling,
    translation, and per-point Gaussian jitter, applied in that order."""

    rotate_up_axis: bool = True
    scale_range: tuple = (0.66, 1.5)
    translate_range: tuple = (-0.2, 0.2)
    jitter_sigma: float = 0.01
    up_axis: int = 1

    def __post_init__(self):
        self.scale_range = tuple(self.scale_range)
        self.translate_range = tuple(self.translate_range)
        if self.scale_range[0] <= 0:
            raise ConfigError(
                f"scale range must stay positive, got {self.scale_range}")
        if self.jitter_sigma < 0:
            raise ConfigError(
                f"jitter sigma must be >= 0, got {self.jitter_sigma}")
        if self.up_axis not in (0, 1, 2):
            raise ConfigError(f"up_axis must be 0, 1 or 2, got {self.up_axis}")


def augment(cloud, cfg, rng):
    """Apply the configured randomization; labels and point count never change."""
    rng = rng_of(rng)
    pts = cloud.points
    if cfg.rotate_up_axis:
        pts = rotate_up(pts, rng.uniform(0.0, 2.0 * math.pi), cfg.up_axis)
    pts = pts * rng.uniform(cfg.scale_range[0], cfg.scale_range[1], size=3)
    pts = pts + rng.uniform(cfg.translate_range[0], cfg.translate_range[1],
                            size=3)
    if cfg.jitter_sigma > 0:
        pts = pts + rng.normal(0.0, cfg.jitter_sigma, size=pts.shape)
    labels = None if cloud.labels is None else cloud.labels.copy()
    return PointCloud(pts, labels, cloud.category)


def subsample_density(cloud, m, seed):
    """Density corruption for the robustness grid; same contract as
    sample_points."""
    return sample_points(cloud, m, seed)


def add_gaussian_noise(cloud, sigma, seed):
    """Perturbation corruption: independent N(0, sigma^2) on every coordinate."""
    if sigma < 0:
        raise UsageError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return cloud.copy()
    rng = rng_of(seed)
    labels = None if cloud.labels is None else cloud.labels.copy()
    return PointCloud(cloud.points + rng.normal(0.0, sigma, cloud.points.shape),
                      labels, cloud.category)


# ---------------------------------------------------------------------------
# synthetic labeled shapes
# ---------------------------------------------------------------------------

SYNTH_PARTS = {"lamp": 3, "rocket": 3, "table": 2}

# parameter ranges of the generators, exposed so tests can bound parts
LAMP_BASE_RADIUS = (0.25, 0.4)
LAMP_POLE_RADIUS = (0.02, 0.05)
LAMP_POLE_HEIGHT = (0.8, 1.2)
LAMP_SHADE_HEIGHT = (0.25, 0.4)
LAMP_SHADE_RADIUS = (0.3, 0.45)
ROCKET_BODY_RADIUS = (0.1, 0.18)
ROCKET_BODY_HEIGHT = (0.7, 1.0)
ROCKET_NOSE_HEIGHT = (0.25, 0.4)
ROCKET_FIN_WIDTH = (0.12, 0.2)
ROCKET_FIN_HEIGHT = (0.2, 0.3)
TABLE_HALF_WIDTH = (0.4, 0.6)
TABLE_HEIGHT = (0.5, 0.8)
TABLE_LEG_RADIUS = (0.02, 0.05)


def _split_counts(n, fractions):
    counts = [int(n * f) for f in fractions[:-1]]
    counts.append(n - sum(counts))
    return counts


def _circle(rng, count):
    theta = rng.uniform(0.0, 2.0 * math.pi, count)
    return np.cos(theta), np.sin(theta)


def _lamp(rng, n):
    rb = rng.uniform(*LAMP_BASE_RADIUS)
    rp = rng.uniform(*LAMP_POLE_RADIUS)
    hp = rng.uniform(*LAMP_POLE_HEIGHT)
    hs = rng.uniform(*LAMP_SHADE_HEIGHT)
    rs = rng.uniform(*LAMP_SHADE_RADIUS)
    nb, np_, ns = _split_counts(n, (0.25, 0.35, 0.4))

    r = rb * np.sqrt(rng.uniform(0.0, 1.0, nb))
    cx, sz = _circle(rng, nb)
    base = np.column_stack([r * cx, np.zeros(nb), r * sz])

    cx, sz = _circle(rng, np_)
    y = rng.uniform(0.0, hp, np_)
    pole = np.column_stack([rp * cx, y, rp * sz])

    y = rng.uniform(hp, hp + hs, ns)
    radius = rs + (0.05 - rs) * (y - hp) / hs  # cone narrows toward the top
    cx, sz = _circle(rng, ns)
    shade = np.column_stack([radius * cx, y, radius * sz])

    points = np.vstack([base, pole, shade])
    labels = np.concatenate([np.zeros(nb), np.ones(np_), np.full(ns, 2)])
    return points, labels.astype(np.int64)


def _rocket(rng, n):
    rb = rng.uniform(*ROCKET_BODY_RADIUS)
    hb = rng.uniform(*ROCKET_BODY_HEIGHT)
    hn = rng.uniform(*ROCKET_NOSE_HEIGHT)
    fw = rng.uniform(*ROCKET_FIN_WIDTH)
    fh = rng.uniform(*ROCKET_FIN_HEIGHT)
    nb, nn, nf = _split_counts(n, (0.5, 0.25, 0.25))

    cx, sz = _circle(rng, nb)
    y = rng.uniform(0.0, hb, nb)
    body = np.column_stack([rb * cx, y, rb * sz])

    # clear margins keep the parts unambiguous under jitter: the nose starts
    # above the body rim and the fins clear the body wall
    y = rng.uniform(hb + 0.08, hb + hn, nn)
    radius = rb * (1.0 - (y - hb) / hn)
    cx, sz = _circle(rng, nn)
    nose = np.column_stack([radius * cx, y, radius * sz])

    angles = rng.choice(3, nf) * (2.0 * math.pi / 3.0)
    r = rng.uniform(rb + 0.08, rb + 0.08 + fw, nf)
    y = rng.uniform(0.0, fh, nf)
    fins = np.column_stack([r * np.cos(angles), y, r * np.sin(angles)])

    points = np.vstack([body, nose, fins])
    labels = np.concatenate([np.zeros(nb), np.ones(nn), np.full(nf, 2)])
    return points, labels.astype(np.int64)


def _table(rng, n):
    hw = rng.uniform(*TABLE_HALF_WIDTH)
    h = rng.uniform(*TABLE_HEIGHT)
    rl = rng.uniform(*TABLE_LEG_RADIUS)
    nt, nl = _split_counts(n, (0.55, 0.45))

    top = np.column_stack([rng.uniform(-hw, hw, nt),
                           np.full(nt, h),
                           rng.uniform(-hw, hw, nt)])

    corner = rng.choice(4, nl)
    ox = np.where(corner % 2 == 0, hw - 0.05, -(hw - 0.05))
    oz = np.where(corner < 2, hw - 0.05, -(hw - 0.05))
    cx, sz = _circle(rng, nl)
    y = rng.uniform(0.0, h, nl)
    legs = np.column_stack([ox + rl * cx, y, oz + rl * sz])

    points = np.vstack([top, legs])
    labels = np.concatenate([np.zeros(nt), np.ones(nl)])
    return points, labels.astype(np.int64)


_GENERATORS = {"lamp": _lamp, "rocket": _rocket, "table": _table}


def synth_generate(category, count, seed, points_per_shape=2048):
    """Procedurally generate ``count`` labeled shapes of one category."""
    if category not in _GENERATORS:
        raise UsageError(
            f"unknown synthetic shape {category!r}; "
            f"choose from {sorted(_GENERATORS)}")
    gen = _GENERATORS[category]
    clouds = []
    for i in range(count):
        rng = rng_of((seed, i), *[ord(c) for c in category])
        points, labels = gen(rng, points_per_shape)
        order = rng.permutation(points.shape[0])
        clouds.append(PointCloud(points[order], labels[order], category))
    return clouds


# ---------------------------------------------------------------------------
# dataset splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShapeRecord:
    shape_id: str
    category: str
    points_path: Path
    labels_path: Path


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list

    def __post_init__(self):
        seen = {}
        for name in ("train", "val", "test"):
            for rec in getattr(self, name):
                key = str(rec.points_path)
                if key in seen and seen[key] != name:
                    raise DataError(
                        f"{key} appears in both {seen[key]} and {name} splits")
                seen[key] = name

    def records(self, split):
        if split not in ("train", "val", "test"):
            raise UsageError(f"unknown split {split!r}")
        return getattr(self, split)


def _read_manifest(path):
    if not path.exists():
        return []
    with open(path) as fh:
        return [line.strip() for line in fh if line.strip()]


def load_split(root, category):
    """Load the split manifests of one category, checking file existence."""
    root = Path(root)
    cat_dir = root / category
    if not cat_dir.is_dir():
        raise DataError(f"no such category directory: {cat_dir}")
    lists = {}
    for name in ("train", "val", "test"):
        records = []
        for shape_id in _read_manifest(cat_dir / f"{name}.txt"):
            pts = cat_dir / "points" / f"{shape_id}.pts"
            seg = cat_dir / "points_label" / f"{shape_id}.seg"
            for p in (pts, seg):
                if not p.exists():
                    raise DataError(f"missing dataset file: {p}")
            records.append(ShapeRecord(shape_id, category, pts, seg))
        lists[name] = records
    return DatasetSplit(lists["train"], lists["val"], lists["test"])


def write_synth_dataset(root, categories, count, seed, points_per_shape=2048,
                        val_count=0, test_count=0):
    """Generate and write a synthetic dataset tree; returns the root path."""
    root = Path(root)
    for category in categories:
        cat_dir = root / category
        (cat_dir / "points").mkdir(parents=True, exist_ok=True)
        (cat_dir / "points_label").mkdir(parents=True, exist_ok=True)
        total = count + val_count + test_count
        clouds = synth_generate(category, total, seed, points_per_shape)
        ids = [f"{category}_{i:04d}" for i in range(total)]
        for shape_id, cloud in zip(ids, clouds):
            save_cloud(cloud, cat_dir / "points" / f"{shape_id}.pts",
                       cat_dir / "points_label" / f"{shape_id}.seg")
        splits = {"train": ids[:count],
                  "val": ids[count:count + val_count],
                  "test": ids[count + val_count:]}
        for name, chunk in splits.items():
            with open(cat_dir / f"{name}.txt", "w") as fh:
                fh.writelines(s + "\n" for s in chunk)
    return root


def infer_num_parts(split):
    """Highest label across every split file, plus one."""
    highest = -1
    for name in ("train", "val", "test"):
        for rec in split.records(name):
            cloud = load_cloud(rec.points_path, rec.labels_path, rec.category)
            if cloud.labels is not None and cloud.labels.size:
                highest = max(highest, int(cloud.labels.max()))
    if highest < 0:
        raise DataError("dataset has no labels; cannot infer the part count")
    return highest + 1
