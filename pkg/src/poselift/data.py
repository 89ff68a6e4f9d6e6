"""Pose dataset I/O, synthetic skeleton generation, and bone statistics.

Pose files are line-delimited JSON, one record per line with fields
``id``, ``joints_2d`` (k x 2, normalized camera coordinates, root first),
optional ``joints_3d`` (k x 3, millimetres, root-relative, camera
orientation) and optional ``camera_tag``. Floats serialize via repr so a
save/load round-trip is bit-exact.

The synthetic generator articulates a mm-scale skeleton with uniform
joint angles, rotates it by a uniform global azimuth, and places it at
depth c so the projection IS the normalized 2D pose: by construction the
2D pose equals the perspective projection of a uniformly scaled copy of
the ground-truth 3D pose, which keeps oracle depths and alignment-based
metrics exact.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .geometry import CAMERA_DISTANCE
from .topology import SkeletonTopology

DEFAULT_LIMB_LENGTHS = {  # millimetres
    "hip_offset": 130.0,
    "thigh": 450.0,
    "shin": 440.0,
    "lower_spine": 230.0,
    "upper_spine": 255.0,
    "neck_head": 115.0,
    "head_top": 115.0,
    "shoulder_offset": 150.0,
    "upper_arm": 280.0,
    "forearm": 250.0,
}

DEFAULT_ANGLE_RANGES = {  # radians; (low, high) drawn uniformly
    "hip_flexion": (-0.7, 0.9),
    "hip_abduction": (-0.2, 0.5),
    "knee_flexion": (0.0, 2.0),
    "spine_bend": (-0.3, 0.4),
    "spine_twist": (-0.5, 0.5),
    "neck_bend": (-0.4, 0.4),
    "shoulder_flexion": (-0.9, 1.2),
    "shoulder_abduction": (-0.3, 1.2),
    "elbow_flexion": (0.0, 2.3),
    "azimuth": (-np.pi, np.pi),
}


@dataclass
class PoseRecord:
    id: str
    joints_2d: np.ndarray
    joints_3d: np.ndarray = None
    camera_tag: str = None

    def to_json_obj(self):
        obj = {"id": self.id, "joints_2d": self.joints_2d.tolist()}
        if self.joints_3d is not None:
            obj["joints_3d"] = self.joints_3d.tolist()
        if self.camera_tag is not None:
            obj["camera_tag"] = self.camera_tag
        return obj


@dataclass
class LoadResult:
    records: list
    errors: list = field(default_factory=list)  # (line_number, message)

    def raise_if_failed(self):
        if self.errors:
            head = "; ".join(f"line {ln}: {msg}" for ln, msg in self.errors[:5])
            raise DataError(f"{len(self.errors)} bad record(s): {head}")
        return self


def save_dataset(records, path):
    with open(path, "w") as fh:
        for rec in records:
            json.dump(rec.to_json_obj(), fh)
            fh.write("\n")


def load_dataset(path, n_joints=17):
    """Parse a pose file; malformed lines are collected, not fatal."""
    records = []
    errors = []
    seen = set()
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = _parse_record(line, n_joints)
            except (ValueError, KeyError, TypeError, DataError) as err:
                errors.append((line_no, str(err)))
                continue
            if rec.id in seen:
                errors.append((line_no, f"duplicate id {rec.id!r}"))
                continue
            seen.add(rec.id)
            records.append(rec)
    return LoadResult(records, errors)


def _parse_record(line, n_joints):
    obj = json.loads(line)
    rid = obj["id"]
    if not isinstance(rid, str):
        raise DataError("id must be a string")
    j2 = np.asarray(obj["joints_2d"], dtype=np.float64)
    if j2.shape != (n_joints, 2):
        raise DataError(f"joints_2d has shape {j2.shape}, expected ({n_joints}, 2)")
    if not np.all(np.isfinite(j2)):
        raise DataError("non-finite joints_2d")
    j3 = None
    if obj.get("joints_3d") is not None:
        j3 = np.asarray(obj["joints_3d"], dtype=np.float64)
        if j3.shape != (n_joints, 3):
            raise DataError(f"joints_3d has shape {j3.shape}, expected ({n_joints}, 3)")
        if not np.all(np.isfinite(j3)):
            raise DataError("non-finite joints_3d")
    return PoseRecord(rid, j2, j3, obj.get("camera_tag"))


def stack_2d(records):
    return np.stack([r.joints_2d for r in records])


def stack_3d(records):
    if any(r.joints_3d is None for r in records):
        raise DataError("dataset is missing 3D ground truth")
    return np.stack([r.joints_3d for r in records])


# ---------------------------------------------------------------------------
# generator


@dataclass
class GeneratorConfig:
    limb_lengths: dict = None
    angle_ranges: dict = None
    camera_distance: float = CAMERA_DISTANCE
    normalization: str = "dataset-mean"  # or "per-pose"

    def __post_init__(self):
        self.limb_lengths = dict(DEFAULT_LIMB_LENGTHS if self.limb_lengths is None
                                 else self.limb_lengths)
        self.angle_ranges = {k: tuple(v) for k, v in
                             (DEFAULT_ANGLE_RANGES if self.angle_ranges is None
                              else self.angle_ranges).items()}
        for name, value in self.limb_lengths.items():
            if value <= 0:
                raise ConfigError(f"limb length {name!r} must be positive")
        for name, (lo, hi) in self.angle_ranges.items():
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise ConfigError(f"invalid angle range for {name!r}: ({lo}, {hi})")
        if self.normalization not in ("dataset-mean", "per-pose"):
            raise ConfigError(f"unknown normalization {self.normalization!r}")

    def to_json_obj(self):
        return {
            "limb_lengths": self.limb_lengths,
            "angle_ranges": {k: list(v) for k, v in self.angle_ranges.items()},
            "camera_distance": self.camera_distance,
            "normalization": self.normalization,
        }

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            obj = json.load(fh)
        return cls(
            limb_lengths=obj.get("limb_lengths"),
            angle_ranges=obj.get("angle_ranges"),
            camera_distance=obj.get("camera_distance", CAMERA_DISTANCE),
            normalization=obj.get("normalization", "dataset-mean"),
        )


def _rx(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _fk_pose(angles, L):
    """World-frame skeleton (x right, y up, z forward), pelvis at the origin."""
    pts = np.zeros((17, 3))

    for side, sign, hip_i, knee_i, ankle_i in (("left", 1.0, 4, 5, 6),
                                               ("right", -1.0, 1, 2, 3)):
        hip = np.array([sign * L["hip_offset"], 0.0, 0.0])
        r_hip = _rx(angles[f"{side}_hip_flexion"]) @ _rz(sign * angles[f"{side}_hip_abduction"])
        knee = hip + r_hip @ np.array([0.0, -L["thigh"], 0.0])
        r_knee = r_hip @ _rx(angles[f"{side}_knee_flexion"])
        ankle = knee + r_knee @ np.array([0.0, -L["shin"], 0.0])
        pts[hip_i], pts[knee_i], pts[ankle_i] = hip, knee, ankle

    r_spine = _rx(angles["spine_bend"]) @ _ry(angles["spine_twist"])
    spine = r_spine @ np.array([0.0, L["lower_spine"], 0.0])
    neck = spine + r_spine @ np.array([0.0, L["upper_spine"], 0.0])
    r_neck = r_spine @ _rx(angles["neck_bend"])
    head = neck + r_neck @ np.array([0.0, L["neck_head"], 0.0])
    head_top = head + r_neck @ np.array([0.0, L["head_top"], 0.0])
    pts[7], pts[8], pts[9], pts[10] = spine, neck, head, head_top

    for side, sign, sh_i, el_i, wr_i in (("left", 1.0, 11, 12, 13),
                                         ("right", -1.0, 14, 15, 16)):
        sh = neck + r_spine @ np.array([sign * L["shoulder_offset"], 0.0, 0.0])
        r_sh = (r_spine @ _rx(angles[f"{side}_shoulder_flexion"])
                @ _rz(sign * angles[f"{side}_shoulder_abduction"]))
        el = sh + r_sh @ np.array([0.0, -L["upper_arm"], 0.0])
        r_el = r_sh @ _rx(angles[f"{side}_elbow_flexion"])
        wr = el + r_el @ np.array([0.0, -L["forearm"], 0.0])
        pts[sh_i], pts[el_i], pts[wr_i] = sh, el, wr
    return pts


_PER_SIDE = ("hip_flexion", "hip_abduction", "knee_flexion",
             "shoulder_flexion", "shoulder_abduction", "elbow_flexion")
_GLOBAL = ("spine_bend", "spine_twist", "neck_bend")


def _draw_angles(rng, ranges):
    angles = {}
    for side in ("left", "right"):
        for name in _PER_SIDE:
            lo, hi = ranges[name]
            angles[f"{side}_{name}"] = rng.uniform(lo, hi)
    for name in _GLOBAL:
        lo, hi = ranges[name]
        angles[name] = rng.uniform(lo, hi)
    lo, hi = ranges["azimuth"]
    angles["azimuth"] = rng.uniform(lo, hi)
    return angles


def _pose_placement_scale(joints_3d_mm, head_index, c):
    """Scale k so the pose at root depth c projects with head-root distance 1/c."""
    h = joints_3d_mm[head_index]
    rho = np.hypot(h[0], h[1])
    denom = c * rho - h[2]
    if denom <= 0:
        raise DataError("pose too oblique to place at the camera distance")
    return c / denom


def generate_synthetic(count, seed, config=None, topology=None):
    """Deterministic forward-kinematics dataset.

    3D is stored in millimetres (root-relative, camera orientation); 2D is
    the perspective projection of the pose placed at depth c, scaled per
    the config's normalization mode.
    """
    config = config or GeneratorConfig()
    topology = topology or SkeletonTopology.default()
    rng = np.random.default_rng(seed)
    c = config.camera_distance
    poses_mm = []
    for _ in range(count):
        angles = _draw_angles(rng, config.angle_ranges)
        world = _fk_pose(angles, config.limb_lengths)
        world = (_ry(angles["azimuth"]) @ world.T).T
        cam = world.copy()
        cam[:, 1] = -cam[:, 1]  # image y grows downward
        poses_mm.append(cam)

    scales = np.array([_pose_placement_scale(p, topology.head_index, c)
                       for p in poses_mm])
    records = []
    for i, pose in enumerate(poses_mm):
        k = scales[i] if config.normalization == "per-pose" else scales.mean()
        placed = k * pose
        placed[:, 2] += c
        j2 = placed[:, :2] / placed[:, 2:3]
        records.append(PoseRecord(
            id=f"synth-{seed}-{i:06d}",
            joints_2d=j2,
            joints_3d=pose,
            camera_tag="synthetic",
        ))
    return records


# ---------------------------------------------------------------------------
# oracle depths for synthetic data


def placement_scale(joints_2d, joints_3d, c=CAMERA_DISTANCE):
    """Least-squares recovery of the scale that placed joints_3d at depth c.

    For every joint, u * (k * Az + c) = k * Ax gives one linear equation in
    k (and likewise for y); exact for generator output.
    """
    u = np.asarray(joints_2d, dtype=np.float64)
    A = np.asarray(joints_3d, dtype=np.float64)
    a = np.concatenate([A[:, 0] - u[:, 0] * A[:, 2], A[:, 1] - u[:, 1] * A[:, 2]])
    b = np.concatenate([c * u[:, 0], c * u[:, 1]])
    denom = float(a @ a)
    if denom < 1e-18:
        raise DataError("cannot recover placement scale from a degenerate pose")
    return float(a @ b) / denom


def true_depth_offsets(record, c=CAMERA_DISTANCE):
    """Ground-truth depth offsets for a synthetic record (root offset is 0)."""
    if record.joints_3d is None:
        raise DataError("record has no 3D ground truth")
    k = placement_scale(record.joints_2d, record.joints_3d, c)
    return k * record.joints_3d[:, 2]


# ---------------------------------------------------------------------------
# bone statistics


@dataclass
class BoneStats:
    values: np.ndarray  # relative lengths, sum exactly renormalized to 1
    source: str = "computed-from-data"

    def save(self, path, topology):
        names = topology.bone_names()
        obj = {"source": self.source,
               "bones": {n: v for n, v in zip(names, self.values.tolist())}}
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path, topology):
        with open(path) as fh:
            obj = json.load(fh)
        names = topology.bone_names()
        bones = obj["bones"]
        missing = [n for n in names if n not in bones]
        if missing:
            raise DataError(f"bone stats file missing entries: {missing}")
        values = np.array([float(bones[n]) for n in names])
        if np.any(values <= 0):
            raise DataError("bone stats must be positive")
        total = values.sum()
        if abs(total - 1.0) > 1e-6:
            raise DataError(f"bone stats sum to {total}, expected 1")
        return cls(values / total, source="user-supplied")


def compute_bone_stats(records, topology):
    """Mean relative bone lengths over all records carrying 3D."""
    from .geometry import bone_lengths

    rels = [bone_lengths(r.joints_3d, topology) for r in records
            if r.joints_3d is not None]
    if not rels:
        raise DataError("no records with 3D ground truth")
    mean = np.mean(rels, axis=0)
    return BoneStats(mean / mean.sum())
