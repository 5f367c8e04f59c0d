"""Point clouds, kNN graphs, farthest point sampling, pooling and upsampling."""
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from adaptconv import kernels
from adaptconv.tensor import (
    ConfigError,
    Tensor,
    as_tensor,
    gather_rows,
    note_branch,
    reduce_max_axis,
)


@dataclass
class PointCloud:
    positions: np.ndarray
    normals: Optional[np.ndarray] = None
    point_labels: Optional[np.ndarray] = None
    shape_label: Optional[int] = None
    category: Optional[int] = None
    num_categories: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3 or len(self.positions) < 1:
            raise ConfigError(f"positions must be N x 3 with N >= 1, got {self.positions.shape}")
        n = len(self.positions)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != (n, 3):
                raise ConfigError(f"normals shape {self.normals.shape} != ({n}, 3)")
        if self.point_labels is not None:
            self.point_labels = np.asarray(self.point_labels, dtype=np.int64)
            if self.point_labels.shape != (n,):
                raise ConfigError(f"point_labels length {len(self.point_labels)} != {n}")
        if self.category is not None and not 0 <= self.category < self.num_categories:
            raise ConfigError(f"category {self.category} outside [0, {self.num_categories})")

    def __len__(self):
        return len(self.positions)

    @property
    def attributes(self):
        """xyz followed by normals when present."""
        if self.normals is None:
            return self.positions
        return np.concatenate([self.positions, self.normals], axis=1)

    @property
    def category_onehot(self):
        if self.category is None:
            return None
        v = np.zeros(self.num_categories)
        v[self.category] = 1.0
        return v

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return PointCloud(
            self.positions[idx],
            None if self.normals is None else self.normals[idx],
            None if self.point_labels is None else self.point_labels[idx],
            self.shape_label, self.category, self.num_categories, dict(self.extra))

    def with_positions(self, positions):
        return PointCloud(positions, self.normals, self.point_labels, self.shape_label,
                          self.category, self.num_categories, dict(self.extra))


@dataclass
class NeighborGraph:
    k: int
    idx: np.ndarray  # rows x k, self-loop in column 0

    def offset(self, by):
        return NeighborGraph(self.k, self.idx + by)


def _check_k(k, n):
    if not 1 <= k <= n:
        raise ConfigError(f"k={k} needs 1 <= k <= N={n}")


def knn_spatial(points, k):
    points = np.asarray(points, dtype=np.float64)
    _check_k(k, len(points))
    return NeighborGraph(k, kernels.knn_self(points, k))


def knn_feature(features, k):
    """Same as :func:`knn_spatial` but in feature space."""
    if isinstance(features, Tensor):
        features = features.data
    features = np.asarray(features, dtype=np.float64)
    _check_k(k, len(features))
    return NeighborGraph(k, kernels.knn_self(features, k))


def fps_start_index(points, rule="index0"):
    """Starting point for FPS.

    ``index0`` uses the first point. ``farthest_from_centroid`` picks the
    point farthest from the centroid, which does not depend on point order.
    """
    if rule == "index0":
        return 0
    if rule == "farthest_from_centroid":
        d = ((points - points.mean(axis=0)) ** 2).sum(axis=1)
        return int(np.argmax(d))
    raise ConfigError(f"unknown FPS start rule {rule!r}")


def farthest_point_sample(points, count, start=0):
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if not 1 <= count <= n:
        raise ConfigError(f"FPS count {count} needs 1 <= count <= N={n}")
    if not 0 <= start < n:
        raise ConfigError(f"FPS start {start} outside [0, {n})")
    return kernels.farthest_point_sample(points, count, start)


def pooled_size(n, rate=4):
    return math.ceil(n / rate)


def pool_neighborhoods(points, sampled, k):
    """kNN rows (self first) of the sampled centres within the full cloud."""
    points = np.asarray(points, dtype=np.float64)
    _check_k(k, len(points))
    sampled = np.asarray(sampled, dtype=np.int64)
    if sampled.size and (sampled.min() < 0 or sampled.max() >= len(points)):
        raise IndexError("sampled index outside the cloud")
    return kernels.knn_self(points, k, sampled)


def pool_max(features, points, sampled, k):
    """Channel-wise max of features over each centre's k-neighbourhood."""
    features = as_tensor(features)
    rows = pool_neighborhoods(points, sampled, k)
    pooled, _ = reduce_max_axis(gather_rows(features, rows), axis=1)
    return pooled, np.asarray(points)[np.asarray(sampled, dtype=np.int64)]


def nearest_index(points_sub, points_full):
    points_sub = np.asarray(points_sub, dtype=np.float64)
    if len(points_sub) < 1:
        raise ConfigError("nearest_upsample needs a non-empty sub-cloud")
    return kernels.knn_query(points_sub, points_full, 1)[:, 0]


def nearest_upsample(features_sub, points_sub, points_full):
    features_sub = as_tensor(features_sub)
    nearest = nearest_index(points_sub, points_full)
    return gather_rows(features_sub, nearest)


# ---------------------------------------------------------------------------
# batched helpers: B clouds stacked row-wise, N rows each


def batch_knn(stacked, batch, k):
    """Self-loop kNN per cloud of a (B*N, D) array; indices are global rows."""
    n = stacked.shape[0] // batch
    _check_k(k, n)
    parts = [kernels.knn_self(stacked[b * n:(b + 1) * n], k) + b * n for b in range(batch)]
    idx = np.concatenate(parts, axis=0)
    note_branch(idx)
    return NeighborGraph(k, idx)
