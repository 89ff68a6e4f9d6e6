"""Skeleton topology: joint names, bone tree, and lifting segments.

The default skeleton has 17 joints (root + 16) in a Human3.6M-style
ordering. Four overlapping segments drive the independent lifters:

  legs   -- both legs (6 joints)
  torso  -- everything above the hips (10 joints)
  left   -- left arm + left leg + the shared spine chain (10 joints)
  right  -- right arm + right leg + the shared spine chain (10 joints)

The spine chain (spine, neck, head, head_top) belongs to both side
segments; legs and torso partition the non-root joints exactly.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

SEGMENT_NAMES = ("legs", "torso", "left", "right")

DEFAULT_JOINT_NAMES = (
    "pelvis",
    "right_hip", "right_knee", "right_ankle",
    "left_hip", "left_knee", "left_ankle",
    "spine", "neck", "head", "head_top",
    "left_shoulder", "left_elbow", "left_wrist",
    "right_shoulder", "right_elbow", "right_wrist",
)

DEFAULT_BONES = (
    (0, 1), (1, 2), (2, 3),        # right leg
    (0, 4), (4, 5), (5, 6),        # left leg
    (0, 7), (7, 8), (8, 9), (9, 10),  # spine chain
    (8, 11), (11, 12), (12, 13),   # left arm
    (8, 14), (14, 15), (15, 16),   # right arm
)

DEFAULT_SEGMENTS = {
    "legs": (1, 2, 3, 4, 5, 6),
    "torso": (7, 8, 9, 10, 11, 12, 13, 14, 15, 16),
    "left": (4, 5, 6, 7, 8, 9, 10, 11, 12, 13),
    "right": (1, 2, 3, 7, 8, 9, 10, 14, 15, 16),
}


@dataclass(frozen=True)
class SkeletonTopology:
    """Joint naming, bone tree and segment membership for one skeleton family.

    ``segments`` maps each of the four lifter names to an ordered tuple of
    joint indices. The root (index 0) never belongs to a segment.
    """

    joint_names: tuple
    bones: tuple
    segments: dict
    head_index: int = 9
    root_index: int = 0
    _bone_arrays: tuple = field(default=None, compare=False, repr=False, init=False)

    def __post_init__(self):
        self.validate()
        parents = np.array([b[0] for b in self.bones], dtype=np.int64)
        children = np.array([b[1] for b in self.bones], dtype=np.int64)
        object.__setattr__(self, "_bone_arrays", (parents, children))

    @property
    def n_joints(self):
        return len(self.joint_names)

    @property
    def n_bones(self):
        return len(self.bones)

    def bone_index_arrays(self):
        """(parents, children) as int64 arrays, one entry per bone."""
        return self._bone_arrays

    def bone_names(self):
        return tuple(
            f"{self.joint_names[p]}__{self.joint_names[c]}" for p, c in self.bones
        )

    def segment(self, name):
        try:
            return self.segments[name]
        except KeyError:
            raise ConfigError(f"unknown segment {name!r}; expected one of {SEGMENT_NAMES}")

    @property
    def spine_chain(self):
        """Joints predicted by both side lifters (left ∩ right)."""
        return tuple(sorted(set(self.segments["left"]) & set(self.segments["right"])))

    def side_exclusive(self, side):
        """Joints only the given side lifter covers (segment minus spine chain)."""
        chain = set(self.spine_chain)
        return tuple(j for j in self.segments[side] if j not in chain)

    def joint_index(self, name):
        try:
            return self.joint_names.index(name)
        except ValueError:
            raise ConfigError(f"unknown joint name {name!r}")

    def validate(self):
        n = len(self.joint_names)
        if len(set(self.joint_names)) != n:
            raise ConfigError("duplicate joint names")
        if len(self.bones) != n - 1:
            raise ConfigError(f"expected {n - 1} bones for {n} joints, got {len(self.bones)}")
        # bones must form a tree rooted at root_index
        seen = {self.root_index}
        remaining = list(self.bones)
        while remaining:
            progress = False
            for bone in list(remaining):
                p, c = bone
                if p in seen:
                    if c in seen:
                        raise ConfigError(f"bone {bone} creates a cycle")
                    seen.add(c)
                    remaining.remove(bone)
                    progress = True
            if not progress:
                raise ConfigError(f"bones {remaining} are disconnected from the root")
        if seen != set(range(n)):
            raise ConfigError("bone tree does not span all joints")

        for name in SEGMENT_NAMES:
            if name not in self.segments:
                raise ConfigError(f"missing segment {name!r}")
            idx = self.segments[name]
            if self.root_index in idx:
                raise ConfigError(f"segment {name!r} must not contain the root")
            if len(set(idx)) != len(idx):
                raise ConfigError(f"segment {name!r} has duplicate joints")
        non_root = set(range(n)) - {self.root_index}
        legs, torso = set(self.segments["legs"]), set(self.segments["torso"])
        if legs & torso:
            raise ConfigError("legs and torso segments overlap")
        if legs | torso != non_root:
            raise ConfigError("legs and torso segments must partition the non-root joints")
        if not (0 <= self.head_index < n) or self.head_index == self.root_index:
            raise ConfigError("head_index out of range or equal to root")

    @staticmethod
    def default():
        """The 17-joint human skeleton used throughout the pipeline."""
        return SkeletonTopology(
            joint_names=DEFAULT_JOINT_NAMES,
            bones=DEFAULT_BONES,
            segments=dict(DEFAULT_SEGMENTS),
        )
