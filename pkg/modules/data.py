"""Synthetic frame pairs with exact flow and boxes, KITTI velodyne ingestion, splits and PLY export."""

import json
import math
import os

import numpy as np

from modules import util
from modules.pointops import PointCloud
from modules.pointops import farthest_point_sample
from modules.util import Failed

logger = util.logger

GRAY = (128, 128, 128)
RED = (255, 0, 0)
GREEN = (0, 255, 0)
BLUE = (0, 0, 255)
KITTI_RECORD = 16
MANIFEST = "manifest.txt"
MANIFEST_SIDECAR = "manifest.json"
BOX_FIELDS = 9


def normalize_yaw(yaw):
    """Wrap an angle into (-pi, pi]"""
    wrapped = math.fmod(float(yaw) + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


def rotation_z(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class Box:
    """
    Oriented 3D box: center (x, y, z), size (w, l, h), yaw about +z.

    The length runs along the heading (local x), the width along local y.
    """

    def __init__(self, center, size, yaw=0.0, class_id=0, score=1.0):
        self.center = tuple(float(v) for v in center)
        self.size = tuple(float(v) for v in size)
        if len(self.center) != 3 or len(self.size) != 3:
            raise Failed(f"Box Error: center and size need 3 values, got {center} and {size}")
        if min(self.size) <= 0:
            raise Failed(f"Box Error: non-positive dimensions {self.size}")
        self.yaw = normalize_yaw(yaw)
        self.class_id = int(class_id)
        self.score = float(score)

    def __repr__(self):
        x, y, z = self.center
        w, l, h = self.size
        return f"Box(({x:.3f}, {y:.3f}, {z:.3f}), ({w:.3f}, {l:.3f}, {h:.3f}), yaw={self.yaw:.3f}, class={self.class_id}, score={self.score:.3f})"

    def bev_corners(self):
        """(4, 2) corners, counter-clockwise"""
        w, l, _ = self.size
        local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
        rot = rotation_z(self.yaw)[:2, :2]
        return local @ rot.T + np.array(self.center[:2])

    def corners_3d(self):
        """(8, 3) corners: bottom face then top face"""
        bev = self.bev_corners()
        z0 = self.center[2] - self.size[2] / 2
        z1 = self.center[2] + self.size[2] / 2
        return np.vstack([np.column_stack([bev, np.full(4, z0)]), np.column_stack([bev, np.full(4, z1)])])

    def with_score(self, score):
        return Box(self.center, self.size, self.yaw, self.class_id, score)

    def translated(self, offset):
        return Box(np.add(self.center, offset), self.size, self.yaw, self.class_id, self.score)

    def as_array(self):
        return np.array([*self.center, *self.size, self.yaw, self.class_id, self.score], dtype=np.float64)

    @classmethod
    def from_array(cls, row):
        return cls(row[0:3], row[3:6], row[6], int(row[7]), row[8])


def boxes_to_array(boxes):
    return np.array([b.as_array() for b in boxes], dtype=np.float64).reshape(-1, BOX_FIELDS)


def boxes_from_array(array):
    return [Box.from_array(row) for row in np.asarray(array).reshape(-1, BOX_FIELDS)]


class GeneratorConfig:
    """Ranges are (low, high) pairs sampled uniformly; motion is per frame"""

    def __init__(
        self,
        n_objects=(2, 4),
        width=(1.5, 2.0),
        length=(3.5, 4.5),
        height=(1.4, 1.7),
        speed=(0.5, 1.5),
        curvature=(-0.05, 0.05),
        yaw_range=(-math.pi, math.pi),
        background_points=1024,
        clutter_objects=3,
        clutter_points=64,
        object_points=256,
        dropout_prob=0.1,
        jitter_sigma=0.01,
        extent=20.0,
        ego_motion=False,
        ego_speed=(0.0, 1.0),
        num_classes=1,
    ):
        self.n_objects = self._range("n_objects", n_objects, integer=True)
        self.width = self._range("width", width, positive=True)
        self.length = self._range("length", length, positive=True)
        self.height = self._range("height", height, positive=True)
        self.speed = self._range("speed", speed)
        self.curvature = self._range("curvature", curvature, allow_negative=True)
        self.yaw_range = self._range("yaw_range", yaw_range, allow_negative=True)
        self.background_points = int(background_points)
        self.clutter_objects = int(clutter_objects)
        self.clutter_points = int(clutter_points)
        self.object_points = int(object_points)
        self.dropout_prob = float(dropout_prob)
        self.jitter_sigma = float(jitter_sigma)
        self.extent = float(extent)
        self.ego_motion = bool(ego_motion)
        self.ego_speed = self._range("ego_speed", ego_speed)
        self.num_classes = int(num_classes)
        if not 0.0 <= self.dropout_prob < 1.0:
            raise Failed(f"Config Error: generator dropout_prob must be in [0, 1), got {self.dropout_prob}")
        if self.jitter_sigma < 0:
            raise Failed(f"Config Error: generator jitter_sigma must be >= 0, got {self.jitter_sigma}")
        if self.extent <= 0 or self.extent <= self.length[1]:
            raise Failed(f"Config Error: generator extent {self.extent} is degenerate for objects up to {self.length[1]} m long")
        if min(self.background_points, self.clutter_objects, self.clutter_points, self.object_points) < 0 or self.num_classes < 1:
            raise Failed("Config Error: generator point counts must be >= 0 and num_classes >= 1")

    @staticmethod
    def _range(name, value, integer=False, positive=False, allow_negative=False):
        try:
            low, high = (int(v) if integer else float(v) for v in value)
        except (TypeError, ValueError):
            raise Failed(f"Config Error: generator {name} must be a [low, high] pair, got {value}") from None
        if low > high or (positive and low <= 0) or (not allow_negative and low < 0):
            raise Failed(f"Config Error: generator {name} range [{low}, {high}] is empty or out of bounds")
        return low, high

    def as_dict(self):
        return {key: list(value) if isinstance(value, tuple) else value for key, value in vars(self).items()}

    @property
    def digest(self):
        return util.config_hash(self.as_dict())


class FramePair:
    """Two consecutive frames and nothing else: the only input flow pre-training accepts"""

    __slots__ = ("frame_t", "frame_t1", "meta")

    def __init__(self, frame_t, frame_t1, meta=None):
        self.frame_t = frame_t
        self.frame_t1 = frame_t1
        self.meta = meta or {}


class SceneSample:
    def __init__(self, frame_t, frame_t1, gt_flow=None, gt_boxes_t=None, gt_boxes_t1=None, meta=None):
        if gt_flow is not None and len(gt_flow) != len(frame_t):
            raise util.ShapeError(f"Shape Error: gt_flow has {len(gt_flow)} rows for {len(frame_t)} points of frame t")
        self.frame_t = frame_t
        self.frame_t1 = frame_t1
        self.gt_flow = gt_flow
        self.gt_boxes_t = list(gt_boxes_t or [])
        self.gt_boxes_t1 = list(gt_boxes_t1 or [])
        self.meta = meta or {}

    def unlabeled(self):
        return FramePair(self.frame_t, self.frame_t1, self.meta)


def _sample_box_surface(rng, box, n):
    """n points on the four sides and the roof of a box (the floor is never seen)"""
    w, l, h = box.size
    faces = np.array([l * h, l * h, w * h, w * h, w * l])
    face = rng.choice(5, size=n, p=faces / faces.sum())
    u = rng.random(n) - 0.5
    v = rng.random(n) - 0.5
    local = np.empty((n, 3))
    local[:, 0] = np.select([face < 2, face == 2, face == 3], [u * l, np.full(n, l / 2), np.full(n, -l / 2)], u * l)
    local[:, 1] = np.select([face == 0, face == 1, face < 4], [np.full(n, w / 2), np.full(n, -w / 2), u * w], v * w)
    local[:, 2] = np.where(face < 4, v * h, h / 2)
    return local @ rotation_z(box.yaw).T + np.array(box.center)


def _place_objects(rng, cfg, count, margin):
    placed = []
    limit = cfg.extent - margin
    for _ in range(count * 20):
        if len(placed) == count:
            break
        xy = rng.uniform(-limit, limit, size=2)
        if all(math.hypot(xy[0] - c[0], xy[1] - c[1]) > 2.0 * margin for c in placed):
            placed.append(xy)
    return placed


def generate_scene(cfg, seed):
    """
    A frame pair over a flat ground with static clutter and rigidly moving boxes.

    Every point of frame t is moved to p' = p + (R - I)(p - c) + v (R the yaw change of its
    object, c the object center, v its translation); flow is recorded before the two
    frames independently get point dropout and gaussian jitter.
    """
    rng = np.random.default_rng(seed)
    extent = cfg.extent
    xyz, refl, flow = [], [], []

    ground = np.column_stack([rng.uniform(-extent, extent, size=(cfg.background_points, 2)), np.zeros(cfg.background_points)])
    xyz.append(ground)
    refl.append(rng.uniform(0.1, 0.3, cfg.background_points))
    flow.append(np.zeros_like(ground))

    for _ in range(cfg.clutter_objects):
        pole = Box((*rng.uniform(-extent, extent, size=2), 1.0), (0.3, 0.3, 2.0), rng.uniform(-math.pi, math.pi))
        points = _sample_box_surface(rng, pole, cfg.clutter_points)
        xyz.append(points)
        refl.append(rng.uniform(0.2, 0.6, cfg.clutter_points))
        flow.append(np.zeros_like(points))

    n_objects = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    margin = math.hypot(cfg.length[1], cfg.width[1]) / 2.0
    boxes_t, boxes_t1 = [], []
    for center in _place_objects(rng, cfg, n_objects, margin):
        w = rng.uniform(*cfg.width)
        l = rng.uniform(*cfg.length)
        h = rng.uniform(*cfg.height)
        box = Box((center[0], center[1], h / 2.0), (w, l, h), rng.uniform(*cfg.yaw_range), int(rng.integers(cfg.num_classes)))
        speed = rng.uniform(*cfg.speed)
        turn = speed * rng.uniform(*cfg.curvature)
        velocity = speed * np.array([math.cos(box.yaw), math.sin(box.yaw), 0.0])
        points = _sample_box_surface(rng, box, cfg.object_points)
        rel = points - np.array(box.center)
        motion = rel @ (rotation_z(turn) - np.eye(3)).T + velocity
        xyz.append(points)
        refl.append(rng.uniform(0.5, 0.9, cfg.object_points))
        flow.append(motion)
        boxes_t.append(box)
        boxes_t1.append(Box(np.add(box.center, velocity), box.size, box.yaw + turn, box.class_id))

    xyz = np.vstack(xyz) if xyz else np.zeros((0, 3))
    refl = np.concatenate(refl)
    flow = np.vstack(flow)
    if cfg.ego_motion:
        ego = np.array([rng.uniform(*cfg.ego_speed), 0.0, 0.0])
        flow = flow - ego
        boxes_t1 = [b.translated(-ego) for b in boxes_t1]
    moved = xyz + flow

    keep_t = rng.random(len(xyz)) >= cfg.dropout_prob
    keep_t1 = rng.random(len(xyz)) >= cfg.dropout_prob
    frame_t = xyz[keep_t] + rng.normal(0.0, 1.0, size=(int(keep_t.sum()), 3)) * cfg.jitter_sigma
    frame_t1 = moved[keep_t1] + rng.normal(0.0, 1.0, size=(int(keep_t1.sum()), 3)) * cfg.jitter_sigma
    meta = {"seed": int(seed), "config_hash": cfg.digest}
    return SceneSample(
        PointCloud(frame_t, refl[keep_t], frame_id=0),
        PointCloud(frame_t1, refl[keep_t1], frame_id=1),
        flow[keep_t],
        boxes_t,
        boxes_t1,
        meta,
    )


class SyntheticDataset:
    """Scenes addressed by id (seed = base_seed + id); the last val_fraction of ids is held out"""

    def __init__(self, cfg, n_scenes, base_seed=0, val_fraction=0.2, cache_size=256):
        if n_scenes < 1:
            raise Failed(f"Config Error: dataset n_scenes must be >= 1, got {n_scenes}")
        if not 0.0 <= val_fraction < 1.0:
            raise Failed(f"Config Error: dataset val_fraction must be in [0, 1), got {val_fraction}")
        self.cfg = cfg
        self.n_scenes = int(n_scenes)
        self.base_seed = int(base_seed)
        self.val_fraction = float(val_fraction)
        self._cache = util.BoundedCache(cache_size)

    @property
    def ids(self):
        return list(range(self.n_scenes))

    @property
    def n_val(self):
        if self.val_fraction == 0.0 or self.n_scenes < 2:
            return 0
        return min(self.n_scenes - 1, max(1, math.ceil(round(self.val_fraction * self.n_scenes, 9))))

    @property
    def train_ids(self):
        return self.ids[: self.n_scenes - self.n_val]

    @property
    def val_ids(self):
        return self.ids[self.n_scenes - self.n_val :]

    def scene(self, scene_id):
        if scene_id not in self._cache:
            return self._cache.put(scene_id, generate_scene(self.cfg, self.base_seed + scene_id))
        return self._cache.get(scene_id)

    def pair(self, scene_id):
        return self.scene(scene_id).unlabeled()

    def labeled(self, scene_id):
        sample = self.scene(scene_id)
        return sample.frame_t, sample.gt_boxes_t


class ArchiveDataset(SyntheticDataset):
    """Scenes read back from a directory written by `generate`"""

    def __init__(self, directory, val_fraction=0.2, cache_size=256):
        self.directory = directory
        ids, sidecar = read_manifest(directory)
        self.scene_ids = ids
        self.sidecar = sidecar
        self.n_scenes = len(ids)
        self.base_seed = int(sidecar.get("seed", 0))
        self.val_fraction = float(val_fraction)
        self.cfg = None
        self._cache = util.BoundedCache(cache_size)
        if not ids:
            raise Failed(f"Dataset Error: manifest in {directory} lists no scenes")

    @property
    def ids(self):
        return list(self.scene_ids)

    def scene(self, scene_id):
        if scene_id not in self._cache:
            return self._cache.put(scene_id, load_scene(os.path.join(self.directory, scene_file(scene_id))))
        return self._cache.get(scene_id)


def scene_file(scene_id):
    return f"scene_{scene_id:06d}.npz"


def save_scene(sample, path):
    refl_t = sample.frame_t.reflectance
    refl_t1 = sample.frame_t1.reflectance
    np.savez(
        path,
        frame_t=sample.frame_t.xyz,
        frame_t1=sample.frame_t1.xyz,
        refl_t=np.zeros(0) if refl_t is None else refl_t,
        refl_t1=np.zeros(0) if refl_t1 is None else refl_t1,
        gt_flow=np.zeros((0, 3)) if sample.gt_flow is None else sample.gt_flow,
        boxes_t=boxes_to_array(sample.gt_boxes_t),
        boxes_t1=boxes_to_array(sample.gt_boxes_t1),
        meta=np.array(json.dumps(util.to_plain(sample.meta))),
    )


def load_scene(path):
    if not os.path.isfile(path):
        raise Failed(f"Dataset Error: scene file {path} not found")
    with np.load(path) as data:
        xyz_t = data["frame_t"]
        xyz_t1 = data["frame_t1"]
        refl_t = data["refl_t"] if len(data["refl_t"]) == len(xyz_t) else None
        refl_t1 = data["refl_t1"] if len(data["refl_t1"]) == len(xyz_t1) else None
        gt_flow = data["gt_flow"] if len(data["gt_flow"]) == len(xyz_t) and len(xyz_t) else None
        return SceneSample(
            PointCloud(xyz_t, refl_t, 0),
            PointCloud(xyz_t1, refl_t1, 1),
            gt_flow,
            boxes_from_array(data["boxes_t"]),
            boxes_from_array(data["boxes_t1"]),
            json.loads(str(data["meta"])),
        )


def write_manifest(directory, ids, config_hash, seed, extra=None):
    """Newline-delimited scene ids plus a JSON sidecar with the generator hash and base seed"""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, MANIFEST), "w", encoding="utf-8") as handle:
        handle.write("".join(f"{i}\n" for i in ids))
    util.save_json({"config_hash": config_hash, "seed": int(seed), "n_scenes": len(ids), **(extra or {})},
                   os.path.join(directory, MANIFEST_SIDECAR))


def read_manifest(directory):
    path = os.path.join(directory, MANIFEST)
    if not os.path.isfile(path):
        raise Failed(f"Dataset Error: no {MANIFEST} in {directory}")
    with open(path, encoding="utf-8") as handle:
        ids = [int(line) for line in handle if line.strip()]
    return ids, util.load_json(os.path.join(directory, MANIFEST_SIDECAR))


def load_kitti_bin(path, frame_id=0):
    """
    Read a KITTI velodyne scan: little-endian float32 (x, y, z, reflectance) records, no header.

    Raises:
        Failed: when the size is not a whole number of records or a value is not finite.
    """
    try:
        size = os.path.getsize(path)
    except OSError as e:
        raise Failed(f"Format Error: cannot read {path}: {e.strerror}") from e
    if size % KITTI_RECORD:
        offset = size - size % KITTI_RECORD
        raise Failed(
            f"Format Error: {path} is {size} bytes, not a multiple of {KITTI_RECORD}; "
            f"incomplete record at byte offset {offset}"
        )
    data = np.fromfile(path, dtype="<f4").reshape(-1, 4)
    bad = int(np.count_nonzero(~np.isfinite(data)))
    if bad:
        raise Failed(f"Format Error: {path} holds {bad} non-finite value(s)")
    return PointCloud(data[:, :3], data[:, 3], frame_id)


def write_kitti_bin(cloud, path):
    refl = np.zeros(len(cloud)) if cloud.reflectance is None else cloud.reflectance
    records = np.column_stack([cloud.xyz, refl]).astype("<f4")
    records.tofile(path)


def subset_split(dataset_ids, fraction, seed):
    """
    Deterministic shuffled prefix of ceil(fraction * n) ids.

    Prefixes of one permutation nest, so a smaller fraction is always a subset of a larger one.
    """
    ids = list(dataset_ids)
    if not ids:
        raise Failed("Dataset Error: cannot split an empty dataset")
    if not 0.0 < fraction <= 1.0:
        raise Failed(f"Config Error: label fraction must be in (0, 1], got {fraction}")
    count = math.ceil(round(fraction * len(ids), 9))
    order = np.random.default_rng(seed).permutation(len(ids))
    return [ids[i] for i in order[:count]]


def sample_points(cloud, n=2048, seed=0):
    indices = farthest_point_sample(cloud, n, seed=seed)
    return indices, cloud.xyz[indices]


class FlowSegments:
    """Line segments origin -> origin + flow"""

    def __init__(self, origins, flow):
        self.origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        self.flow = np.asarray(flow, dtype=np.float64).reshape(-1, 3)
        if self.origins.shape != self.flow.shape:
            raise util.ShapeError(f"Shape Error: {len(self.origins)} segment origins vs {len(self.flow)} flow vectors")


BOX_EDGES = ((0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4), (0, 4), (1, 5), (2, 6), (3, 7))


def export_ply(items, path):
    """
    Write colored geometry as an ASCII PLY file.

    Args:
        items (list): (geometry, rgb) pairs; geometry is a PointCloud, an (n, 3) array,
            FlowSegments or a list of Box (drawn as 12-edge wireframes).
        path (str): destination file.
    """
    vertices, colors, edges = [], [], []

    def add_vertices(points, rgb):
        start = sum(len(v) for v in vertices)
        vertices.append(points)
        colors.append(np.tile(np.asarray(rgb, dtype=np.uint8), (len(points), 1)))
        return start

    for geometry, rgb in items:
        if isinstance(geometry, PointCloud):
            add_vertices(geometry.xyz, rgb)
        elif isinstance(geometry, FlowSegments):
            start = add_vertices(np.vstack([geometry.origins, geometry.origins + geometry.flow]), rgb)
            n = len(geometry.origins)
            edges.extend((start + i, start + n + i, rgb) for i in range(n))
        elif isinstance(geometry, (list, tuple)) and all(isinstance(b, Box) for b in geometry):
            for box in geometry:
                start = add_vertices(box.corners_3d(), rgb)
                edges.extend((start + a, start + b, rgb) for a, b in BOX_EDGES)
        else:
            add_vertices(np.asarray(geometry, dtype=np.float64).reshape(-1, 3), rgb)

    n_vertices = sum(len(v) for v in vertices)
    if n_vertices == 0:
        raise Failed(f"PLY Error: nothing to write to {path}")
    header = [
        "ply",
        "format ascii 1.0",
        "comment flow_pretrain export",
        f"element vertex {n_vertices}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
    ]
    if edges:
        header += [
            f"element edge {len(edges)}",
            "property int vertex1",
            "property int vertex2",
            "property uchar red",
            "property uchar green",
            "property uchar blue",
        ]
    header.append("end_header")
    points = np.vstack(vertices)
    rgb = np.vstack(colors)
    try:
        with open(path, "w", encoding="ascii") as handle:
            handle.write("\n".join(header) + "\n")
            for (x, y, z), (r, g, b) in zip(points, rgb):
                handle.write(f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}\n")
            for a, b, (r, g, bl) in edges:
                handle.write(f"{a} {b} {r} {g} {bl}\n")
    except OSError as e:
        raise Failed(f"PLY Error: cannot write {path}: {e.strerror}") from e
    logger.debug(f"Wrote {n_vertices} vertices and {len(edges)} edges to {path}")
    return n_vertices, len(edges)


def read_ply(path):
    """
    Parse an ASCII PLY written by export_ply.

    Returns:
        dict: {"vertices": (n, 3) float, "colors": (n, 3) uint8, "edges": (e, 2) int}
    """
    with open(path, encoding="ascii") as handle:
        lines = handle.read().splitlines()
    if not lines or lines[0] != "ply" or "end_header" not in lines:
        raise Failed(f"PLY Error: {path} is not an ASCII PLY file")
    counts = {}
    for line in lines[: lines.index("end_header")]:
        parts = line.split()
        if parts[0] == "element":
            counts[parts[1]] = int(parts[2])
    body = lines[lines.index("end_header") + 1 :]
    n_vertices = counts.get("vertex", 0)
    n_edges = counts.get("edge", 0)
    rows = [line.split() for line in body[:n_vertices]]
    vertices = np.array([[float(v) for v in row[:3]] for row in rows]).reshape(-1, 3)
    colors = np.array([[int(v) for v in row[3:6]] for row in rows], dtype=np.uint8).reshape(-1, 3)
    edges = np.array([[int(v) for v in line.split()[:2]] for line in body[n_vertices : n_vertices + n_edges]], dtype=np.int64)
    return {"vertices": vertices, "colors": colors, "edges": edges.reshape(-1, 2)}


def flow_visualization_layers(frame_t1, sampled_xyz, flow, segments=False):
    """Gray: full frame t+1; red: sampled points of frame t; green: the points propagated by the flow"""
    layers = [(frame_t1, GRAY), (np.asarray(sampled_xyz), RED), (np.asarray(sampled_xyz) + flow, GREEN)]
    if segments:
        layers.append((FlowSegments(sampled_xyz, flow), GREEN))
    return layers
