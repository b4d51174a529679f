"""Spatial operators on point sets: sampling, neighbor search, grouping and feature interpolation."""

import math

import numpy as np

from modules import util
from modules.util import Failed
from modules.util import ShapeError

logger = util.logger

QUERY_BLOCK = 256
INTERP_EPS = 1e-8


class PointCloud:
    """One lidar frame: (M, 3) coordinates in meters, optional reflectance in [0, 1]"""

    def __init__(self, xyz, reflectance=None, frame_id=0):
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        if xyz.size and not np.all(np.isfinite(xyz)):
            raise Failed(f"Point Error: frame {frame_id} holds non-finite coordinates")
        self.xyz = xyz
        if reflectance is not None:
            reflectance = np.asarray(reflectance, dtype=np.float64).reshape(-1)
            if len(reflectance) != len(xyz):
                raise ShapeError(
                    f"Shape Error: reflectance {tuple(reflectance.shape)} does not match {len(xyz)} points of frame {frame_id}"
                )
        self.reflectance = reflectance
        self.frame_id = int(frame_id)

    def __len__(self):
        return len(self.xyz)

    @property
    def features(self):
        """Per-point input features: reflectance, or zeros when the sensor gave none"""
        if self.reflectance is None:
            return np.zeros((len(self.xyz), 1))
        return self.reflectance[:, None]

    def subset(self, indices):
        refl = None if self.reflectance is None else self.reflectance[indices]
        return PointCloud(self.xyz[indices], refl, self.frame_id)

    def translated(self, offset):
        return PointCloud(self.xyz + np.asarray(offset, dtype=np.float64), self.reflectance, self.frame_id)

    def __repr__(self):
        return f"PointCloud(frame {self.frame_id}, {len(self)} points)"


def _xyz(points):
    return points.xyz if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64).reshape(-1, 3)


def pairwise_sq_dists(a, b):
    """Squared euclidean distances (len(a), len(b)) computed from explicit differences"""
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("qrc,qrc->qr", diff, diff)


def farthest_point_sample(points, n, seed=0, start_index=None):
    """
    Greedy max-min (farthest point) sampling.

    The first index is drawn uniformly from a generator seeded with `seed` (or given as
    `start_index`); every next index is the unselected point farthest from the selected set,
    ties going to the lowest index. When n exceeds the number of points the greedy order is
    cycled so the output always has n entries.

    Returns:
        np.ndarray: (n,) int64 indices.
    """
    xyz = _xyz(points)
    m = len(xyz)
    if m == 0:
        raise Failed("Sampling Error: cannot sample from an empty cloud")
    if n < 1:
        raise Failed(f"Sampling Error: number of samples must be >= 1, got {n}")
    first = int(np.random.default_rng(seed).integers(m)) if start_index is None else int(start_index)
    count = min(n, m)
    order = np.empty(count, dtype=np.int64)
    order[0] = first
    diff = xyz - xyz[first]
    min_d = np.einsum("mc,mc->m", diff, diff)
    min_d[first] = -1.0
    for i in range(1, count):
        nxt = int(np.argmax(min_d))
        order[i] = nxt
        diff = xyz - xyz[nxt]
        np.minimum(min_d, np.einsum("mc,mc->m", diff, diff), out=min_d)
        min_d[order[: i + 1]] = -1.0
    if n > m:
        order = np.resize(order, n)
    return order


def knn(query, reference, k):
    """
    k nearest neighbors by brute force.

    Returns:
        tuple: (indices (Q, k) int64, dists (Q, k) euclidean, ascending). Ties go to the lower
        reference index; when k exceeds the reference size the nearest index is repeated.
    """
    query = _xyz(query)
    reference = _xyz(reference)
    if len(reference) == 0:
        raise Failed("Neighbor Error: reference cloud is empty")
    if k < 1:
        raise Failed(f"Neighbor Error: k must be >= 1, got {k}")
    kk = min(k, len(reference))
    indices = np.empty((len(query), k), dtype=np.int64)
    dists = np.empty((len(query), k), dtype=np.float64)
    for start in range(0, len(query), QUERY_BLOCK):
        d2 = pairwise_sq_dists(query[start : start + QUERY_BLOCK], reference)
        if kk == 1:
            idx = np.argmin(d2, axis=1)[:, None]
        else:
            idx = np.argsort(d2, axis=1, kind="stable")[:, :kk]
        indices[start : start + len(idx), :kk] = idx
        dists[start : start + len(idx), :kk] = np.sqrt(np.take_along_axis(d2, idx, axis=1))
    if k > kk:
        indices[:, kk:] = indices[:, :1]
        dists[:, kk:] = dists[:, :1]
    return indices, dists


class NeighborSet:
    """Neighbors of one query point: indices into the reference cloud and displacements (neighbor - query)"""

    def __init__(self, query_index, neighbor_indices, displacements):
        if len(neighbor_indices) != len(displacements):
            raise ShapeError(
                f"Shape Error: {len(neighbor_indices)} neighbor indices vs {len(displacements)} displacement rows"
            )
        self.query_index = query_index
        self.neighbor_indices = list(neighbor_indices)
        self.displacements = displacements


class NeighborGroups:
    """
    Batched neighbor sets with a fixed group width.

    Groups shorter than the width are padded by repeating their first neighbor, which leaves
    max-pooling unchanged.
    """

    def __init__(self, query_xyz, reference_xyz, indices, counts):
        self.indices = indices
        self.counts = counts
        self.n_reference = len(reference_xyz)
        self.displacements = reference_xyz[indices] - query_xyz[:, None, :]

    @property
    def width(self):
        return self.indices.shape[1]

    def __len__(self):
        return len(self.indices)

    def neighbor_sets(self):
        return [
            NeighborSet(q, self.indices[q, : self.counts[q]], self.displacements[q, : self.counts[q]])
            for q in range(len(self.indices))
        ]


def groups_from_knn(query, reference, k):
    """NeighborGroups holding the k nearest reference points of every query"""
    query = _xyz(query)
    reference = _xyz(reference)
    idx, _ = knn(query, reference, k)
    counts = np.full(len(query), min(k, len(reference)), dtype=np.int64)
    return NeighborGroups(query, reference, idx, counts)


def _finish_ball(query, reference, idx, counts, in_radius_any, max_k):
    if not np.all(in_radius_any):
        lonely = np.flatnonzero(~in_radius_any)
        nearest, _ = knn(query[lonely], reference, 1)
        idx[lonely, 0] = nearest[:, 0]
        counts[lonely] = 1
    pad = np.arange(max_k)[None, :] >= counts[:, None]
    idx[pad] = np.broadcast_to(idx[:, :1], idx.shape)[pad]
    return NeighborGroups(query, reference, idx, counts)


def ball_query(query, reference, radius, max_k, index=None):
    """
    Up to max_k reference points within `radius` of every query, in ascending index order.

    A query without any neighbor in radius falls back to its single nearest neighbor.

    Args:
        index (GridIndex, optional): grid built over `reference`; gives identical results.

    Returns:
        NeighborGroups
    """
    query = _xyz(query)
    reference = _xyz(reference)
    if len(reference) == 0:
        raise Failed("Neighbor Error: reference cloud is empty")
    if radius <= 0 or max_k < 1:
        raise Failed(f"Neighbor Error: ball query needs radius > 0 and max_k >= 1, got {radius}, {max_k}")
    if index is not None:
        return index.ball_query(query, radius, max_k)
    r2 = radius * radius
    idx = np.zeros((len(query), max_k), dtype=np.int64)
    counts = np.zeros(len(query), dtype=np.int64)
    any_in = np.zeros(len(query), dtype=bool)
    take = min(max_k, len(reference))
    for start in range(0, len(query), QUERY_BLOCK):
        d2 = pairwise_sq_dists(query[start : start + QUERY_BLOCK], reference)
        mask = d2 <= r2
        order = np.argsort(~mask, axis=1, kind="stable")[:, :take]
        stop = start + len(d2)
        idx[start:stop, :take] = order
        counts[start:stop] = np.minimum(mask.sum(axis=1), max_k)
        any_in[start:stop] = mask.any(axis=1)
    return _finish_ball(query, reference, idx, counts, any_in, max_k)


class GridIndex:
    """
    Uniform-grid accelerator over an immutable reference cloud.

    Returns exactly the same neighbors as the brute-force ball_query and knn.
    """

    def __init__(self, reference, cell_size):
        if cell_size <= 0:
            raise Failed(f"Neighbor Error: grid cell size must be > 0, got {cell_size}")
        self.reference = _xyz(reference)
        if len(self.reference) == 0:
            raise Failed("Neighbor Error: reference cloud is empty")
        self.cell_size = float(cell_size)
        self.origin = self.reference.min(axis=0)
        keys = np.floor((self.reference - self.origin) / self.cell_size).astype(np.int64)
        self.max_key = keys.max(axis=0)
        self.cells = {}
        for i, key in enumerate(map(tuple, keys)):
            self.cells.setdefault(key, []).append(i)
        self.cells = {key: np.array(members, dtype=np.int64) for key, members in self.cells.items()}

    def _cell_of(self, point):
        return np.floor((point - self.origin) / self.cell_size).astype(np.int64)

    def _block(self, center, ring):
        lo = center - ring
        hi = center + ring
        found = []
        for ix in range(lo[0], hi[0] + 1):
            for iy in range(lo[1], hi[1] + 1):
                for iz in range(lo[2], hi[2] + 1):
                    members = self.cells.get((ix, iy, iz))
                    if members is not None:
                        found.append(members)
        if not found:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate(found))

    def _covers_everything(self, center, ring):
        return bool(np.all(center - ring <= 0) and np.all(center + ring >= self.max_key))

    def ball_query(self, query, radius, max_k):
        query = _xyz(query)
        ring = int(math.ceil(radius / self.cell_size))
        r2 = radius * radius
        idx = np.zeros((len(query), max_k), dtype=np.int64)
        counts = np.zeros(len(query), dtype=np.int64)
        any_in = np.zeros(len(query), dtype=bool)
        for q, point in enumerate(query):
            candidates = self._block(self._cell_of(point), ring)
            if len(candidates) == 0:
                continue
            diff = self.reference[candidates] - point
            d2 = np.einsum("rc,rc->r", diff, diff)
            inside = candidates[d2 <= r2][:max_k]
            counts[q] = len(inside)
            any_in[q] = len(inside) > 0
            idx[q, : len(inside)] = inside
        return _finish_ball(query, self.reference, idx, counts, any_in, max_k)

    def knn(self, query, k):
        query = _xyz(query)
        kk = min(k, len(self.reference))
        indices = np.empty((len(query), k), dtype=np.int64)
        dists = np.empty((len(query), k), dtype=np.float64)
        for q, point in enumerate(query):
            center = self._cell_of(point)
            ring = 0
            while True:
                candidates = self._block(center, ring)
                if len(candidates) >= kk:
                    diff = self.reference[candidates] - point
                    d2 = np.einsum("rc,rc->r", diff, diff)
                    order = np.lexsort((candidates, d2))[:kk]
                    if np.sqrt(d2[order[-1]]) < ring * self.cell_size or self._covers_everything(center, ring):
                        break
                ring += 1
            indices[q, :kk] = candidates[order]
            dists[q, :kk] = np.sqrt(d2[order])
        if k > kk:
            indices[:, kk:] = indices[:, :1]
            dists[:, kk:] = dists[:, :1]
        return indices, dists


def group_features(groups, feats):
    """
    Gather [neighbor_feature || displacement] rows.

    Args:
        groups (NeighborGroups): Q groups of width k.
        feats (np.ndarray): (R, D) reference features; D may be 0.

    Returns:
        np.ndarray: (Q, k, D + 3)
    """
    feats = np.asarray(feats)
    if feats.ndim != 2 or len(feats) < groups.n_reference:
        raise ShapeError(f"Shape Error: group_features: features {tuple(feats.shape)} do not cover {groups.n_reference} points")
    if groups.indices.size and (groups.indices.min() < 0 or groups.indices.max() >= len(feats)):
        raise Failed(f"Neighbor Error: neighbor index out of range for {len(feats)} feature rows")
    disp = groups.displacements.astype(feats.dtype if feats.size else groups.displacements.dtype, copy=False)
    return np.concatenate([feats[groups.indices], disp], axis=-1)


def group_features_backward(groups, dout, n_reference):
    """Gradient of group_features w.r.t. the reference features (displacements carry none)"""
    d = dout.shape[-1] - 3
    dfeats = np.zeros((n_reference, d), dtype=dout.dtype)
    np.add.at(dfeats, groups.indices.reshape(-1), dout[..., :d].reshape(-1, d))
    return dfeats


def interpolation_weights(target_xyz, source_xyz, k=3, eps=INTERP_EPS):
    """
    Inverse-distance weights over the (up to) 3 nearest sources of every target.

    A target that coincides with a source gets a one-hot weight on it.

    Returns:
        tuple: (indices (T, k'), weights (T, k')) with k' = min(k, S).
    """
    source_xyz = _xyz(source_xyz)
    if len(source_xyz) == 0:
        raise Failed("Interpolation Error: source cloud is empty")
    k = min(k, len(source_xyz))
    idx, dist = knn(target_xyz, source_xyz, k)
    weights = 1.0 / (dist + eps)
    weights /= weights.sum(axis=1, keepdims=True)
    exact = dist[:, 0] == 0.0
    if np.any(exact):
        weights[exact] = 0.0
        weights[exact, 0] = 1.0
    return idx, weights


def apply_interpolation(idx, weights, source_feats):
    return np.einsum("tk,tkd->td", weights.astype(source_feats.dtype, copy=False), source_feats[idx])


def interpolation_backward(idx, weights, dout, n_source):
    """Gradient of apply_interpolation w.r.t. the source features"""
    dfeats = np.zeros((n_source, dout.shape[-1]), dtype=dout.dtype)
    contrib = weights.astype(dout.dtype, copy=False)[:, :, None] * dout[:, None, :]
    np.add.at(dfeats, idx.reshape(-1), contrib.reshape(-1, dout.shape[-1]))
    return dfeats


def interpolate_features(target_xyz, source_xyz, source_feats):
    """Features for target points from inverse-distance weighted 3-NN source features"""
    source_feats = np.asarray(source_feats)
    if len(source_feats) != len(_xyz(source_xyz)):
        raise ShapeError(
            f"Shape Error: interpolate_features: {len(source_feats)} feature rows vs {len(_xyz(source_xyz))} source points"
        )
    idx, weights = interpolation_weights(target_xyz, source_xyz)
    return apply_interpolation(idx, weights, source_feats)
