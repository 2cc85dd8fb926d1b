"""Scan/frame/sequence data model, ego-motion compensation and synthetic scenes.

Points are stored per scan as ``[n, 5]`` arrays of ``(x, y, z, r, dt)``.
Generated coordinates are rounded to float32 so the on-disk format
round-trips bitwise.
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence as Seq

import numpy as np
from shapely.geometry import Polygon

from .errors import ConfigError, DataError

SCAN_PERIOD = 0.05          # 20 Hz
NUM_SCANS = 10
NUM_FRAMES = 3
GROUND_Z = -1.8
FORMAT_VERSION = 1


# ---------------------------------------------------------------- poses

@dataclass(frozen=True)
class Pose:
    """Planar pose with height: world <- local is ``R(yaw) p + (x, y)``, ``z + z0``."""

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    yaw: float = 0.0

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.z, self.yaw]

    @classmethod
    def from_list(cls, v) -> "Pose":
        if v is None or len(v) != 4 or not all(np.isfinite(v)):
            raise DataError(f"invalid pose {v!r}")
        return cls(*map(float, v))

    def compose(self, other: "Pose") -> "Pose":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose(self.x + c * other.x - s * other.y, self.y + s * other.x + c * other.y,
                    self.z + other.z, wrap_angle(self.yaw + other.yaw))

    def inverse(self) -> "Pose":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose(-(c * self.x + s * self.y), -(-s * self.x + c * self.y), -self.z, wrap_angle(-self.yaw))

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = np.empty_like(xyz)
        out[:, 0] = c * xyz[:, 0] - s * xyz[:, 1] + self.x
        out[:, 1] = s * xyz[:, 0] + c * xyz[:, 1] + self.y
        out[:, 2] = xyz[:, 2] + self.z
        return out


def wrap_angle(a: float | np.ndarray):
    """Map into [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi if isinstance(a, np.ndarray) \
        else (a + math.pi) % (2 * math.pi) - math.pi


# ---------------------------------------------------------------- containers

@dataclass
class Scan:
    scan_index: int
    points: np.ndarray
    ego_pose: Pose | None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 5)


@dataclass
class Frame:
    frame_index: int
    scans: list[Scan]
    timestamp: float = 0.0

    @property
    def keyframe_pose(self) -> Pose | None:
        return self.scans[-1].ego_pose

    @property
    def num_scans(self) -> int:
        return len(self.scans)

    def points(self) -> np.ndarray:
        """All points stacked in scan order, with a 6th column holding the scan index."""
        parts = [np.column_stack([s.points, np.full(len(s.points), s.scan_index, dtype=np.float64)])
                 for s in self.scans]
        return np.concatenate(parts) if parts else np.zeros((0, 6))

    def validate(self) -> None:
        idx = [s.scan_index for s in self.scans]
        if idx != list(range(1, len(self.scans) + 1)):
            raise DataError(f"frame {self.frame_index}: scan indices {idx} are not 1..N in order")


@dataclass
class Sequence:
    frames: list[Frame]

    @property
    def t(self) -> int:
        return len(self.frames) - 1

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def validate(self) -> None:
        if not self.frames:
            raise DataError("sequence has no frames")
        ts = [f.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise DataError(f"frame timestamps not strictly increasing: {ts}")
        for f in self.frames:
            f.validate()


@dataclass
class GTBox:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    cls: int
    velocity: tuple[float, float] = (0.0, 0.0)
    track_id: int = -1
    occluded: bool = False
    num_points: int = 0

    def to_dict(self) -> dict:
        return {"center": list(self.center), "size": list(self.size), "yaw": self.yaw,
                "cls": self.cls, "velocity": list(self.velocity), "track_id": self.track_id,
                "occluded": self.occluded, "num_points": self.num_points}

    @classmethod
    def from_dict(cls, d: dict) -> "GTBox":
        return cls(tuple(d["center"]), tuple(d["size"]), float(d["yaw"]), int(d["cls"]),
                   tuple(d.get("velocity", (0.0, 0.0))), int(d.get("track_id", -1)),
                   bool(d.get("occluded", False)), int(d.get("num_points", 0)))

    @property
    def pose(self) -> Pose:
        return Pose(self.center[0], self.center[1], self.center[2], self.yaw)

    def bev_corners(self) -> np.ndarray:
        l, w = self.size[0], self.size[1]
        local = np.array([[l / 2, w / 2], [l / 2, -w / 2], [-l / 2, -w / 2], [-l / 2, w / 2]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        R = np.array([[c, -s], [s, c]])
        return local @ R.T + np.array(self.center[:2])


def bev_overlap(a: GTBox, b: GTBox) -> float:
    """Intersection-over-union of the two BEV footprints."""
    pa, pb = Polygon(a.bev_corners()), Polygon(b.bev_corners())
    inter = pa.intersection(pb).area
    union = pa.area + pb.area - inter
    return inter / union if union > 0 else 0.0


# ---------------------------------------------------------------- ego motion

def compensate_ego_motion(frame: Frame) -> Frame:
    """Express every scan of ``frame`` in the keyframe (last scan) sensor frame."""
    for s in frame.scans:
        if s.ego_pose is None:
            raise DataError(f"frame {frame.frame_index}, scan {s.scan_index}: missing ego pose")
        if not all(np.isfinite(s.ego_pose.as_list())):
            raise DataError(f"frame {frame.frame_index}, scan {s.scan_index}: non-finite ego pose")
    key = frame.keyframe_pose
    to_key = key.inverse()
    scans = []
    for s in frame.scans:
        if s.ego_pose == key:
            scans.append(Scan(s.scan_index, s.points, key))
            continue
        rel = to_key.compose(s.ego_pose)
        pts = s.points.copy()
        pts[:, :3] = rel.apply(s.points[:, :3])
        scans.append(Scan(s.scan_index, pts, key))
    return Frame(frame.frame_index, scans, frame.timestamp)


def compensate_sequence(seq: Sequence) -> Sequence:
    return Sequence([compensate_ego_motion(f) for f in seq.frames])


# ---------------------------------------------------------------- scene generation

@dataclass
class ObjectSpec:
    """One rigid object with constant-velocity, constant-yaw-rate motion in world coords.

    ``pose`` is the object pose at the keyframe time of the last frame (t = 0).
    ``visibility`` maps frame index to the fraction of surface points emitted
    (0 means fully occluded for that frame); frames not listed are fully visible.
    """

    cls: int
    size: tuple[float, float, float]
    pose: tuple[float, float, float]
    velocity: tuple[float, float] = (0.0, 0.0)
    yaw_rate: float = 0.0
    density: float = 40.0
    reflectance: float = 0.5
    visibility: dict[int, float] = field(default_factory=dict)

    def pose_at(self, time: float) -> Pose:
        x, y, yaw = self.pose
        return Pose(x + self.velocity[0] * time, y + self.velocity[1] * time,
                    GROUND_Z + self.size[2] / 2, wrap_angle(yaw + self.yaw_rate * time))


@dataclass
class SceneSpec:
    objects: list[ObjectSpec] = field(default_factory=list)
    num_frames: int = NUM_FRAMES
    num_scans: int = NUM_SCANS
    scan_period: float = SCAN_PERIOD
    ego_velocity: tuple[float, float] = (0.0, 0.0)
    ego_yaw_rate: float = 0.0
    scene_range: tuple[float, float, float, float] = (-25.6, -25.6, 25.6, 25.6)
    ground_points: int = 120
    ground_range: float = 36.0
    noise: float = 0.02
    ref_range: float = 10.0

    def frame_period(self) -> float:
        return self.num_scans * self.scan_period

    def scan_time(self, k: int, n: int) -> float:
        """Time of scan ``n`` (1-based) in frame ``k``; the last keyframe is t = 0."""
        key_t = (k - (self.num_frames - 1)) * self.frame_period()
        return key_t - (self.num_scans - n) * self.scan_period

    def ego_pose_at(self, time: float) -> Pose:
        return Pose(self.ego_velocity[0] * time, self.ego_velocity[1] * time, 0.0,
                    wrap_angle(self.ego_yaw_rate * time))

    def validate(self) -> None:
        if self.num_frames < 1 or self.num_scans < 1:
            raise ConfigError("scene needs at least one frame and one scan")
        xmin, ymin, xmax, ymax = self.scene_range
        if not (xmax > xmin and ymax > ymin):
            raise ConfigError(f"invalid scene range {self.scene_range}")
        for i, ob in enumerate(self.objects):
            if min(ob.size) <= 0 or ob.density < 0:
                raise ConfigError(f"object {i}: sizes and density must be positive")
            for k in range(self.num_frames):
                t = self.scan_time(k, self.num_scans)
                local = self.ego_pose_at(t).inverse().compose(ob.pose_at(t))
                if not (xmin <= local.x < xmax and ymin <= local.y < ymax):
                    raise ConfigError(f"object {i} leaves the scene range at frame {k}")


_FACES = (  # (axis, sign)
    (0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0), (2, 1.0),
)


def _surface_points(rng: np.random.Generator, size, world_from_obj: Pose, sensor: Pose,
                    count_scale: float, noise: float) -> np.ndarray:
    """Uniform samples on the box faces that face the sensor, in world coords."""
    half = np.array(size) / 2.0
    sensor_in_obj = world_from_obj.inverse().compose(sensor)
    s_local = np.array([sensor_in_obj.x, sensor_in_obj.y, sensor_in_obj.z])
    out = []
    for axis, sign in _FACES:
        face_center = np.zeros(3)
        face_center[axis] = sign * half[axis]
        normal = np.zeros(3)
        normal[axis] = sign
        if np.dot(s_local - face_center, normal) <= 0:
            continue
        others = [a for a in range(3) if a != axis]
        area = 4 * half[others[0]] * half[others[1]]
        n = rng.poisson(count_scale * area)
        if n == 0:
            continue
        p = np.empty((n, 3))
        p[:, axis] = sign * half[axis]
        for a in others:
            p[:, a] = rng.uniform(-half[a], half[a], n)
        p += rng.normal(0.0, noise, p.shape)
        out.append(p)
    if not out:
        return np.zeros((0, 3))
    return world_from_obj.apply(np.concatenate(out))


def generate_scene(spec: SceneSpec, seed: int) -> tuple[Sequence, list[list[GTBox]]]:
    """Render ``spec`` into raw (uncompensated) scans plus keyframe GT boxes per frame."""
    spec.validate()
    rng = np.random.default_rng(seed)
    frames, gts = [], []
    for k in range(spec.num_frames):
        scans = []
        key_time = spec.scan_time(k, spec.num_scans)
        obj_counts = [0] * len(spec.objects)
        for n in range(1, spec.num_scans + 1):
            time = spec.scan_time(k, n)
            dt = time - key_time
            ego = spec.ego_pose_at(time)
            sensor = Pose(ego.x, ego.y, 0.0, ego.yaw)
            parts = []
            # ground: uniform radius gives ~1/r areal density
            r = rng.uniform(1.0, spec.ground_range, spec.ground_points)
            th = rng.uniform(-np.pi, np.pi, spec.ground_points)
            g = np.column_stack([r * np.cos(th), r * np.sin(th),
                                 GROUND_Z + rng.normal(0, spec.noise, spec.ground_points)])
            gr = np.clip(0.1 + rng.normal(0, 0.03, len(g)), 0, 1)
            parts.append(np.column_stack([g, gr]))
            for i, ob in enumerate(spec.objects):
                vis = ob.visibility.get(k, 1.0)
                if vis <= 0:
                    continue
                obj_pose = ob.pose_at(time)
                dist = max(math.hypot(obj_pose.x - sensor.x, obj_pose.y - sensor.y), 1.0)
                scale = ob.density * vis * spec.ref_range / dist
                pts = _surface_points(rng, ob.size, obj_pose, sensor, scale, spec.noise)
                if len(pts) == 0:
                    continue
                local = sensor.inverse().apply(pts)
                refl = np.clip(ob.reflectance + rng.normal(0, 0.05, len(local)), 0, 1)
                parts.append(np.column_stack([local, refl]))
                obj_counts[i] += len(local)
            pts = np.concatenate(parts)
            pts = np.column_stack([pts, np.full(len(pts), dt)])
            pts = pts.astype(np.float32).astype(np.float64)
            scans.append(Scan(n, pts, ego))
        frames.append(Frame(k, scans, timestamp=key_time))
        key_ego = spec.ego_pose_at(key_time)
        inv = key_ego.inverse()
        boxes = []
        xmin, ymin, xmax, ymax = spec.scene_range
        for i, ob in enumerate(spec.objects):
            p = inv.compose(ob.pose_at(key_time))
            c, s = math.cos(-key_ego.yaw), math.sin(-key_ego.yaw)
            rvx = ob.velocity[0] - spec.ego_velocity[0]
            rvy = ob.velocity[1] - spec.ego_velocity[1]
            boxes.append(GTBox((p.x, p.y, p.z), tuple(ob.size), p.yaw, ob.cls,
                               (c * rvx - s * rvy, s * rvx + c * rvy), track_id=i,
                               occluded=ob.visibility.get(k, 1.0) < 0.5, num_points=obj_counts[i]))
        gts.append(boxes)
    return Sequence(frames), gts


@dataclass
class SceneSampler:
    """Random :class:`SceneSpec` factory for benchmark datasets."""

    scene_range: tuple[float, float, float, float] = (-25.6, -25.6, 25.6, 25.6)
    class_sizes: tuple[tuple[float, float, float], ...] = ((4.2, 1.8, 1.6), (0.8, 0.8, 1.7))
    class_probs: tuple[float, ...] = (0.6, 0.4)
    class_speeds: tuple[tuple[float, float], ...] = ((3.0, 10.0), (0.5, 1.5))
    min_objects: int = 3
    max_objects: int = 8
    moving_prob: float = 0.6
    occluded_prob: float = 0.25
    ego_speed: tuple[float, float] = (0.0, 4.0)
    density: tuple[float, float] = (15.0, 40.0)
    margin: float = 2.0
    num_frames: int = NUM_FRAMES
    num_scans: int = NUM_SCANS
    ground_points: int = 120

    def sample(self, rng: np.random.Generator) -> SceneSpec:
        spec = SceneSpec(num_frames=self.num_frames, num_scans=self.num_scans,
                         scene_range=self.scene_range, ground_points=self.ground_points,
                         ground_range=max(abs(v) for v in self.scene_range) * 1.45)
        ego_speed = rng.uniform(*self.ego_speed)
        ego_dir = rng.uniform(-np.pi, np.pi)
        spec.ego_velocity = (ego_speed * math.cos(ego_dir), ego_speed * math.sin(ego_dir))
        xmin, ymin, xmax, ymax = self.scene_range
        target = int(rng.integers(self.min_objects, self.max_objects + 1))
        placed: list[list[GTBox]] = [[] for _ in range(self.num_frames)]
        attempts = 0
        while len(spec.objects) < target and attempts < 200:
            attempts += 1
            cls = int(rng.choice(len(self.class_sizes), p=self.class_probs))
            size = tuple(float(s * rng.uniform(0.9, 1.1)) for s in self.class_sizes[cls])
            x = rng.uniform(xmin + self.margin, xmax - self.margin)
            y = rng.uniform(ymin + self.margin, ymax - self.margin)
            if math.hypot(x, y) < 3.0:
                continue
            yaw = rng.uniform(-np.pi, np.pi)
            vel = (0.0, 0.0)
            if rng.random() < self.moving_prob:
                speed = rng.uniform(*self.class_speeds[cls])
                vel = (speed * math.cos(yaw), speed * math.sin(yaw))
            vis = {}
            if rng.random() < self.occluded_prob:
                vis[self.num_frames - 1] = 0.0
            ob = ObjectSpec(cls, size, (x, y, yaw), vel, 0.0,
                            density=float(rng.uniform(*self.density)),
                            reflectance=float(rng.uniform(0.2, 0.9)), visibility=vis)
            trial = SceneSpec(objects=[ob], num_frames=self.num_frames, num_scans=self.num_scans,
                              ego_velocity=spec.ego_velocity, scene_range=(
                                  xmin + self.margin / 2, ymin + self.margin / 2,
                                  xmax - self.margin / 2, ymax - self.margin / 2))
            try:
                trial.validate()
            except ConfigError:
                continue
            # keep footprints apart over the whole window
            footprints = []
            for k in range(self.num_frames):
                pk = ob.pose_at(spec.scan_time(k, self.num_scans))
                footprints.append(GTBox((pk.x, pk.y, 0.0), (size[0] + 0.5, size[1] + 0.5, size[2]),
                                        pk.yaw, cls))
            if any(bev_overlap(fp, other) > 0 for fp, frame_boxes in zip(footprints, placed)
                   for other in frame_boxes):
                continue
            for fp, frame_boxes in zip(footprints, placed):
                frame_boxes.append(fp)
            spec.objects.append(ob)
        return spec


# ---------------------------------------------------------------- augmentation

@dataclass
class AugmentParams:
    flip_prob: float = 0.5
    rotation: tuple[float, float] = (-math.pi / 4, math.pi / 4)
    scale: tuple[float, float] = (0.95, 1.05)


def transform_box(b: GTBox, flip: bool, theta: float, scale: float) -> GTBox:
    x, y, z = b.center
    vx, vy = b.velocity
    yaw = b.yaw
    if flip:
        y, vy, yaw = -y, -vy, -yaw
    if theta != 0.0:
        c, s = math.cos(theta), math.sin(theta)
        x, y = c * x - s * y, s * x + c * y
        vx, vy = c * vx - s * vy, s * vx + c * vy
        yaw = yaw + theta
    if scale != 1.0:
        x, y, z, vx, vy = x * scale, y * scale, z * scale, vx * scale, vy * scale
        size = tuple(v * scale for v in b.size)
    else:
        size = b.size
    return replace(b, center=(x, y, z), size=size, yaw=float(wrap_angle(yaw)), velocity=(vx, vy))


def transform_points(pts: np.ndarray, flip: bool, theta: float, scale: float) -> np.ndarray:
    out = pts.copy()
    if flip:
        out[:, 1] = -out[:, 1]
    if theta != 0.0:
        c, s = math.cos(theta), math.sin(theta)
        x, y = out[:, 0].copy(), out[:, 1].copy()
        out[:, 0] = c * x - s * y
        out[:, 1] = s * x + c * y
    if scale != 1.0:
        out[:, :3] *= scale
    return out


def apply_global_transform(seq: Sequence, gt: list[list[GTBox]], flip: bool, theta: float,
                           scale: float) -> tuple[Sequence, list[list[GTBox]]]:
    """Apply one flip/rotation/scale to every scan of every frame and to all boxes.

    Operates in each frame's keyframe coordinates, so the input should be
    ego-compensated.
    """
    frames = []
    for f in seq.frames:
        scans = [Scan(s.scan_index, transform_points(s.points, flip, theta, scale), s.ego_pose)
                 for s in f.scans]
        frames.append(Frame(f.frame_index, scans, f.timestamp))
    boxes = [[transform_box(b, flip, theta, scale) for b in fb] for fb in gt]
    return Sequence(frames), boxes


def augment_sequence(seq: Sequence, gt: list[list[GTBox]], params: AugmentParams,
                     seed: int) -> tuple[Sequence, list[list[GTBox]]]:
    rng = np.random.default_rng(seed)
    flip = bool(rng.random() < params.flip_prob)
    theta = float(rng.uniform(*params.rotation))
    scale = float(rng.uniform(*params.scale))
    return apply_global_transform(seq, gt, flip, theta, scale)


# ---------------------------------------------------------------- sequence-consistent GT sampling

@dataclass
class Donor:
    """Object points per frame in box-local coordinates plus motion relative to the last frame.

    ``relative_poses[k]`` is the world pose of the object at frame ``k``
    expressed relative to its pose at the last frame.
    """

    cls: int
    size: tuple[float, float, float]
    points: list[np.ndarray]
    relative_poses: list[Pose]


def points_in_box(pts: np.ndarray, box: GTBox, margin: float = 0.0) -> np.ndarray:
    local = box.pose.inverse().apply(pts[:, :3])
    half = np.array(box.size) / 2 + margin
    return np.all(np.abs(local) <= half, axis=1)


def extract_donors(seq: Sequence, gt: list[list[GTBox]], min_points: int = 5) -> list[Donor]:
    """Cut every GT object present in all frames out of a compensated sequence."""
    key_poses = [f.keyframe_pose or Pose() for f in seq.frames]
    donors = []
    last = gt[-1]
    for b_t in last:
        track = [next((b for b in fb if b.track_id == b_t.track_id), None) for fb in gt]
        if any(b is None for b in track) or b_t.track_id < 0:
            continue
        world_t = key_poses[-1].compose(b_t.pose)
        pts_k, rels = [], []
        total = 0
        for f, b, ego in zip(seq.frames, track, key_poses):
            pts = np.concatenate([s.points for s in f.scans])
            inside = pts[points_in_box(pts, b, margin=0.05)]
            local = inside.copy()
            local[:, :3] = b.pose.inverse().apply(inside[:, :3])
            pts_k.append(local)
            total += len(local)
            rels.append(world_t.inverse().compose(ego.compose(b.pose)))
        if total >= min_points:
            donors.append(Donor(b_t.cls, tuple(b_t.size), pts_k, rels))
    return donors


def gt_sample_sequence(seq: Sequence, gt: list[list[GTBox]], donor_bank: Seq[Donor], seed: int,
                       num_samples: int = 1, scene_range: tuple[float, float, float, float] | None = None,
                       placements: Seq[Pose] | None = None) -> tuple[Sequence, list[list[GTBox]]]:
    """Paste donor objects into every frame, preserving each donor's frame-to-frame motion.

    The keyframe placement is random unless ``placements`` is given. A paste
    whose keyframe box overlaps an existing box (BEV IoU > 0) is rejected.
    """
    if not donor_bank:
        warnings.warn("empty donor bank; GT sampling skipped", RuntimeWarning, stacklevel=2)
        return seq, gt
    rng = np.random.default_rng(seed)
    xmin, ymin, xmax, ymax = scene_range or (-25.6, -25.6, 25.6, 25.6)
    key_poses = [f.keyframe_pose or Pose() for f in seq.frames]
    frames = [Frame(f.frame_index, [Scan(s.scan_index, s.points, s.ego_pose) for s in f.scans], f.timestamp)
              for f in seq.frames]
    boxes = [list(fb) for fb in gt]
    next_track = max([b.track_id for fb in gt for b in fb] + [-1]) + 1
    n_scans = len(frames[0].scans)
    tries = num_samples if placements is None else len(placements)
    for i in range(tries):
        donor = donor_bank[int(rng.integers(len(donor_bank)))]
        if placements is None:
            place = Pose(float(rng.uniform(xmin, xmax)), float(rng.uniform(ymin, ymax)),
                         GROUND_Z + donor.size[2] / 2, float(rng.uniform(-np.pi, np.pi)))
        else:
            place = placements[i]
        new_box_t = GTBox((place.x, place.y, place.z), donor.size, place.yaw, donor.cls, track_id=next_track)
        if any(bev_overlap(new_box_t, b) > 0 for b in boxes[-1]):
            continue
        world_t = key_poses[-1].compose(place)
        for k, frame in enumerate(frames):
            obj_in_frame = key_poses[k].inverse().compose(world_t.compose(donor.relative_poses[k]))
            box_k = GTBox((obj_in_frame.x, obj_in_frame.y, obj_in_frame.z), donor.size,
                          obj_in_frame.yaw, donor.cls, track_id=next_track,
                          num_points=len(donor.points[k]))
            pts = donor.points[k].copy()
            pts[:, :3] = obj_in_frame.apply(donor.points[k][:, :3])
            scan_of = np.clip(np.rint(n_scans + pts[:, 4] / SCAN_PERIOD).astype(int), 1, n_scans)
            new_scans = []
            for s in frame.scans:
                keep = s.points[~points_in_box(s.points, box_k)]
                add = pts[scan_of == s.scan_index]
                new_scans.append(Scan(s.scan_index, np.concatenate([keep, add]), s.ego_pose))
            frames[k] = Frame(frame.frame_index, new_scans, frame.timestamp)
            boxes[k].append(box_k)
        next_track += 1
    return Sequence(frames), boxes


# ---------------------------------------------------------------- file format

def write_sequence(path: str | Path, seq: Sequence, gt: list[list[GTBox]], meta: dict | None = None) -> None:
    """Directory layout: ``manifest.json`` plus ``frame{k}_scan{n}.bin`` per scan."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "mgta-sequence", "version": FORMAT_VERSION,
        "K": seq.num_frames, "N": seq.frames[0].num_scans if seq.frames else 0,
        "frames": [], "meta": meta or {},
    }
    for f, boxes in zip(seq.frames, gt):
        entry = {"frame_index": f.frame_index, "timestamp": f.timestamp, "scans": [],
                 "gt": [b.to_dict() for b in boxes]}
        for s in f.scans:
            fname = f"frame{f.frame_index}_scan{s.scan_index:02d}.bin"
            pts = np.ascontiguousarray(s.points, dtype="<f4")
            try:
                (path / fname).write_bytes(struct.pack("<Q", len(pts)) + pts.tobytes())
            except OSError as exc:
                raise DataError(f"cannot write {path / fname}: {exc}") from exc
            entry["scans"].append({"scan_index": s.scan_index, "file": fname,
                                   "pose": s.ego_pose.as_list() if s.ego_pose else None})
        manifest["frames"].append(entry)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def read_sequence(path: str | Path) -> tuple[Sequence, list[list[GTBox]], dict]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read sequence manifest in {path}: {exc}") from exc
    if manifest.get("format") != "mgta-sequence" or manifest.get("version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported sequence format/version")
    frames, gts = [], []
    for entry in manifest["frames"]:
        scans = []
        for s in entry["scans"]:
            try:
                buf = (path / s["file"]).read_bytes()
            except OSError as exc:
                raise DataError(f"cannot read {path / s['file']}: {exc}") from exc
            (count,) = struct.unpack_from("<Q", buf, 0)
            if len(buf) != 8 + count * 20:
                raise DataError(f"{path / s['file']}: size does not match point count {count}")
            pts = np.frombuffer(buf, dtype="<f4", offset=8).reshape(count, 5).astype(np.float64)
            pose = Pose.from_list(s["pose"]) if s["pose"] is not None else None
            scans.append(Scan(int(s["scan_index"]), pts, pose))
        frames.append(Frame(int(entry["frame_index"]), scans, float(entry["timestamp"])))
        gts.append([GTBox.from_dict(d) for d in entry["gt"]])
    seq = Sequence(frames)
    seq.validate()
    return seq, gts, manifest.get("meta", {})
