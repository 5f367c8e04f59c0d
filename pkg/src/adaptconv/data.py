"""Synthetic desk-scale datasets and the plain-text point file format.

Every generator is a pure function of its :class:`DatasetSpec` (which
carries the seed). Clouds are centred on their centroid and scaled so the
farthest point sits at radius 1.
"""
import json
import os
from dataclasses import dataclass

import numpy as np

from adaptconv.config import DatasetSpec
from adaptconv.graph import PointCloud

SHAPES3_CLASSES = ("sphere", "cube", "cylinder")
# noise offsets along the normal are clipped at this many standard deviations
NOISE_CLIP = 1.5


class ParseError(ValueError):
    pass


@dataclass
class Dataset:
    train: list
    test: list
    num_classes: int
    num_categories: int = 0
    part_sets: dict = None  # category -> legal part labels (segmentation only)


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sphere(rng, n):
    p = _unit_vectors(rng, n)
    return p, p.copy()


def _cube(rng, n):
    # half-side chosen so the corners sit at radius 1
    a = 1.0 / np.sqrt(3.0)
    face = rng.integers(0, 6, n)
    axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
    p = rng.uniform(-a, a, (n, 3))
    p[np.arange(n), axis] = sign * a
    normals = np.zeros((n, 3))
    normals[np.arange(n), axis] = sign
    return p, normals


def _cylinder(rng, n, radius=0.6):
    h = np.sqrt(1.0 - radius**2)
    side_area, cap_area = 2 * np.pi * radius * 2 * h, 2 * np.pi * radius**2
    on_side = rng.random(n) < side_area / (side_area + cap_area)
    theta = rng.uniform(0, 2 * np.pi, n)
    # caps sampled uniformly over the disk area
    rr = np.where(on_side, radius, radius * np.sqrt(rng.random(n)))
    z = np.where(on_side, rng.uniform(-h, h, n), np.where(rng.random(n) < 0.5, h, -h))
    p = np.stack([rr * np.cos(theta), rr * np.sin(theta), z], axis=1)
    normals = np.where(on_side[:, None],
                       np.stack([np.cos(theta), np.sin(theta), np.zeros(n)], axis=1),
                       np.stack([np.zeros(n), np.zeros(n), np.sign(z)], axis=1))
    return p, normals


def _noisy(rng, p, normals, std):
    if std <= 0:
        return p
    offset = np.clip(rng.normal(0.0, std, len(p)), -NOISE_CLIP * std, NOISE_CLIP * std)
    return p + offset[:, None] * normals


def normalize(points):
    """Centre on the centroid and scale the farthest point to radius 1."""
    centred = points - points.mean(axis=0)
    r = np.sqrt((centred**2).sum(axis=1)).max()
    return centred / r if r > 0 else centred, r


def _symmetric(sampler, rng, n, std):
    # half the points plus their mirror images: centroid at the origin
    half = (n + 1) // 2
    p, normals = sampler(rng, half)
    p = _noisy(rng, p, normals, std)
    p = np.concatenate([p, -p])[:n]
    normals = np.concatenate([normals, -normals])[:n]
    return p, normals


def _split_per_class(spec, make):
    n_train, _ = spec.split_counts()
    train, test = [], []
    for label, clouds in make():
        train.extend(clouds[:n_train])
        test.extend(clouds[n_train:])
    return train, test


def generate_shapes3(spec: DatasetSpec) -> Dataset:
    """Sphere / cube / cylinder surfaces, labels 0 / 1 / 2."""
    rng = np.random.default_rng([spec.seed, 3])
    samplers = (_sphere, _cube, _cylinder)

    def make():
        for label, sampler in enumerate(samplers):
            clouds = []
            for _ in range(spec.samples_per_class):
                p, normals = _symmetric(sampler, rng, spec.points, spec.noise)
                p, _ = normalize(p)
                clouds.append(PointCloud(p, normals, shape_label=label))
            yield label, clouds
    train, test = _split_per_class(spec, make)
    return Dataset(train, test, num_classes=3)


def _sample_body_handle(rng, n):
    """Category 0: sphere body with a cylindrical handle along +x."""
    n_handle = n * 3 // 10
    body, body_n = _sphere(rng, n - n_handle)
    body, body_n = body * 0.6, body_n
    theta = rng.uniform(0, 2 * np.pi, n_handle)
    x = rng.uniform(0.55, 1.1, n_handle)
    r = 0.15
    handle = np.stack([x, r * np.cos(theta), r * np.sin(theta)], axis=1)
    handle_n = np.stack([np.zeros(n_handle), np.cos(theta), np.sin(theta)], axis=1)
    return (np.concatenate([body, handle]), np.concatenate([body_n, handle_n]),
            np.concatenate([np.zeros(n - n_handle, int), np.ones(n_handle, int)]))


def _sample_post_cap(rng, n):
    """Category 1: tall cylinder post topped by a wide flat disk."""
    n_cap = n * 3 // 10
    theta = rng.uniform(0, 2 * np.pi, n - n_cap)
    z = rng.uniform(-1.0, 0.4, n - n_cap)
    r = 0.2
    post = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    post_n = np.stack([np.cos(theta), np.sin(theta), np.zeros(n - n_cap)], axis=1)
    phi = rng.uniform(0, 2 * np.pi, n_cap)
    rr = 0.7 * np.sqrt(rng.random(n_cap))
    cap = np.stack([rr * np.cos(phi), rr * np.sin(phi), np.full(n_cap, 0.45)], axis=1)
    cap_n = np.tile([0.0, 0.0, 1.0], (n_cap, 1))
    return (np.concatenate([post, cap]), np.concatenate([post_n, cap_n]),
            np.concatenate([np.full(n - n_cap, 2), np.full(n_cap, 3)]))


PARTS2_PART_SETS = {0: [0, 1], 1: [2, 3]}


def generate_parts2(spec: DatasetSpec) -> Dataset:
    """Two categories of two-part shapes with per-point part labels.

    Category 0 (parts 0/1): sphere body + handle. Category 1 (parts 2/3):
    post + cap. Each shape gets a random rotation about the vertical axis.
    """
    rng = np.random.default_rng([spec.seed, 5])
    samplers = (_sample_body_handle, _sample_post_cap)

    def make():
        for category, sampler in enumerate(samplers):
            clouds = []
            for _ in range(spec.samples_per_class):
                p, normals, labels = sampler(rng, spec.points)
                p = _noisy(rng, p, normals, spec.noise)
                a = rng.uniform(0, 2 * np.pi)
                rot = np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]])
                p, normals = p @ rot.T, normals @ rot.T
                p, _ = normalize(p)
                clouds.append(PointCloud(p, normals, labels, shape_label=category,
                                         category=category, num_categories=2))
            yield category, clouds
    train, test = _split_per_class(spec, make)
    return Dataset(train, test, num_classes=4, num_categories=2, part_sets=PARTS2_PART_SETS)


def _adaptive_disk(rng, n, amplitude=0.04, frequency=9.0):
    """Unit disk cut by a random line through its centre: one half flat,
    the other carrying a small ripple. Label 1 marks the rippled half."""
    half = n // 2
    angle = rng.uniform(0, 2 * np.pi)
    direction = np.array([np.cos(angle), np.sin(angle)])

    def half_disk(count, sign):
        pts = np.empty((0, 2))
        while len(pts) < count:
            cand = rng.uniform(-1, 1, (2 * count, 2))
            keep = ((cand**2).sum(axis=1) <= 1.0) & (sign * (cand @ direction) >= 0)
            pts = np.concatenate([pts, cand[keep]])
        return pts[:count]

    flat = half_disk(n - half, -1.0)
    ripple = half_disk(half, 1.0)
    u, v = ripple[:, 0], ripple[:, 1]
    # ripple grows from zero at the cut so the surface stays continuous
    s = ripple @ direction
    z = amplitude * np.sin(frequency * u) * np.sin(frequency * v) * np.minimum(1.0, 4 * s)
    dzdu = amplitude * frequency * np.cos(frequency * u) * np.sin(frequency * v) * np.minimum(1.0, 4 * s)
    dzdv = amplitude * frequency * np.sin(frequency * u) * np.cos(frequency * v) * np.minimum(1.0, 4 * s)
    rn = np.stack([-dzdu, -dzdv, np.ones(half)], axis=1)
    rn /= np.linalg.norm(rn, axis=1, keepdims=True)
    p = np.concatenate([np.column_stack([flat, np.zeros(len(flat))]),
                        np.column_stack([ripple, z])])
    normals = np.concatenate([np.tile([0.0, 0.0, 1.0], (len(flat), 1)), rn])
    labels = np.concatenate([np.zeros(len(flat), int), np.ones(half, int)])
    return p, normals, labels


ADAPTIVE_PART_SETS = {0: [0, 1]}


def generate_parts_adaptive(spec: DatasetSpec) -> Dataset:
    """Disks whose two halves differ only in local surface texture.

    The cut direction is random per shape, so position alone does not tell
    the parts apart; the local ripple (curvature and normals) does.
    """
    rng = np.random.default_rng([spec.seed, 7])

    def make():
        clouds = []
        for _ in range(spec.samples_per_class):
            p, normals, labels = _adaptive_disk(rng, spec.points)
            p = _noisy(rng, p, normals, spec.noise)
            p, _ = normalize(p)
            clouds.append(PointCloud(p, normals, labels, shape_label=0, category=0,
                                     num_categories=1))
        yield 0, clouds
    train, test = _split_per_class(spec, make)
    return Dataset(train, test, num_classes=2, num_categories=1, part_sets=ADAPTIVE_PART_SETS)


GENERATORS = {
    "shapes3": generate_shapes3,
    "parts2": generate_parts2,
    "parts-adaptive": generate_parts_adaptive,
}


def generate(spec: DatasetSpec) -> Dataset:
    spec.validate()
    return GENERATORS[spec.generator](spec)


# ---------------------------------------------------------------------------
# point files


def save_points(path, cloud: PointCloud):
    """Header ``N E L`` then one line per point: E floats, L integer labels.

    E is 3 (xyz) or 6 (xyz + normals); L is 0 or 1 (per-point part label).
    Floats are written with 17 significant digits so they read back exactly.
    """
    attrs = cloud.attributes
    n, e = attrs.shape
    nl = 0 if cloud.point_labels is None else 1
    lines = [f"{n} {e} {nl}"]
    for i in range(n):
        row = " ".join(f"{v:.17g}" for v in attrs[i])
        if nl:
            row += f" {int(cloud.point_labels[i])}"
        lines.append(row)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_points(path) -> PointCloud:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines()]
    if not lines:
        raise ParseError(f"{path}: empty file")
    try:
        n, e, nl = (int(t) for t in lines[0].split())
    except ValueError:
        raise ParseError(f"{path}:1: header must be three integers 'N E L', got {lines[0]!r}")
    if e not in (3, 6):
        raise ParseError(f"{path}:1: E must be 3 or 6, got {e}")
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != n:
        raise ParseError(f"{path}: header says N={n} points, body has {len(body)}")
    attrs = np.empty((n, e))
    labels = np.empty(n, dtype=np.int64) if nl else None
    for i, ln in enumerate(lines[1:1 + n]):
        parts = ln.split()
        if len(parts) != e + nl:
            raise ParseError(f"{path}:{i + 2}: expected {e + nl} values, got {len(parts)}")
        try:
            attrs[i] = [float(t) for t in parts[:e]]
            if nl:
                labels[i] = int(parts[e])
        except ValueError as exc:
            raise ParseError(f"{path}:{i + 2}: {exc}")
    normals = attrs[:, 3:6] if e == 6 else None
    return PointCloud(attrs[:, :3], normals, labels)


def save_dataset(dataset: Dataset, directory):
    """Write every cloud as a points file plus ``manifest.json``."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for split in ("train", "test"):
        for i, cloud in enumerate(getattr(dataset, split)):
            name = f"{split}_{i:05d}.txt"
            save_points(os.path.join(directory, name), cloud)
            entries.append({"path": name, "split": split, "label": cloud.shape_label,
                            "category": cloud.category})
    manifest = {"num_classes": dataset.num_classes, "num_categories": dataset.num_categories,
                "part_sets": {str(k): v for k, v in (dataset.part_sets or {}).items()},
                "clouds": entries}
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_dataset(directory) -> Dataset:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    ncat = manifest.get("num_categories", 0)
    splits = {"train": [], "test": []}
    for entry in manifest["clouds"]:
        cloud = load_points(os.path.join(directory, entry["path"]))
        cloud.shape_label = entry.get("label")
        if entry.get("category") is not None:
            cloud.category, cloud.num_categories = entry["category"], ncat
        splits[entry["split"]].append(cloud)
    part_sets = {int(k): v for k, v in manifest.get("part_sets", {}).items()} or None
    return Dataset(splits["train"], splits["test"], manifest["num_classes"], ncat, part_sets)
