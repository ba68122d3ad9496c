"""16-joint body skeleton, the eight action poses, and the template skeleton.

Body frame: x lateral (+x toward the subject's left), y up, z forward, meters,
origin on the floor midway between the ankles. The canonical frame used by
registration and fusion is the body frame translated so that the lower spine
joint sits at the origin.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

JOINT_NAMES = (
    "head",
    "l_shoulder", "r_shoulder",
    "l_elbow", "r_elbow",
    "l_wrist", "r_wrist",
    "l_hip", "r_hip",
    "l_knee", "r_knee",
    "l_ankle", "r_ankle",
    "spine_upper", "spine_mid", "spine_lower",
)
N_JOINTS = len(JOINT_NAMES)
J = {name: i for i, name in enumerate(JOINT_NAMES)}

# (parent, child); tree rooted at spine_lower
BONES = (
    (J["spine_lower"], J["spine_mid"]),
    (J["spine_mid"], J["spine_upper"]),
    (J["spine_upper"], J["head"]),
    (J["spine_upper"], J["l_shoulder"]),
    (J["spine_upper"], J["r_shoulder"]),
    (J["l_shoulder"], J["l_elbow"]),
    (J["l_elbow"], J["l_wrist"]),
    (J["r_shoulder"], J["r_elbow"]),
    (J["r_elbow"], J["r_wrist"]),
    (J["spine_lower"], J["l_hip"]),
    (J["spine_lower"], J["r_hip"]),
    (J["l_hip"], J["l_knee"]),
    (J["l_knee"], J["l_ankle"]),
    (J["r_hip"], J["r_knee"]),
    (J["r_knee"], J["r_ankle"]),
)
N_BONES = len(BONES)
ROOT = J["spine_lower"]

POSE_IDS = (
    "standing",
    "arms_spreading",
    "raise_one_hand",
    "raise_both_hands",
    "arms_diagonal_up",
    "arms_straight_up",
    "arms_downward",
    "raise_one_arm_side",
)

# Segment proportions for a body of height 1.
_UPPER_ARM = 0.19
_FOREARM = 0.16
_THIGH = 0.24
_SHIN = 0.27
_SHOULDER_X = 0.12
_HIP_X = 0.08
_TRUNK = {
    "head": (0.0, 1.0, 0.0),
    "spine_upper": (0.0, 0.82, -0.012),
    "spine_mid": (0.0, 0.68, -0.022),
    "spine_lower": (0.0, 0.54, -0.008),
    "l_shoulder": (_SHOULDER_X, 0.81, 0.0),
    "r_shoulder": (-_SHOULDER_X, 0.81, 0.0),
    "l_hip": (_HIP_X, 0.51, 0.0),
    "r_hip": (-_HIP_X, 0.51, 0.0),
}

# Limb articulation: absolute segment angle in degrees measured from straight
# down in the frontal plane, positive away from the body midline.
ARTICULATIONS = ("l_shoulder", "l_elbow", "r_shoulder", "r_elbow",
                 "l_hip", "l_knee", "r_hip", "r_knee")

_POSE_ANGLES = {
    "standing": {},
    "arms_spreading": {"l_shoulder": 90, "l_elbow": 90, "r_shoulder": 90, "r_elbow": 90},
    "raise_one_hand": {"r_shoulder": 90, "r_elbow": 180},
    "raise_both_hands": {"l_shoulder": 90, "l_elbow": 180, "r_shoulder": 90, "r_elbow": 180},
    "arms_diagonal_up": {"l_shoulder": 135, "l_elbow": 135, "r_shoulder": 135, "r_elbow": 135},
    "arms_straight_up": {"l_shoulder": 180, "l_elbow": 180, "r_shoulder": 180, "r_elbow": 180},
    "arms_downward": {"l_shoulder": 35, "l_elbow": 35, "r_shoulder": 35, "r_elbow": 35},
    "raise_one_arm_side": {"r_shoulder": 90, "r_elbow": 90},
}


def pose_angles(pose_id, overrides=None):
    if pose_id not in _POSE_ANGLES:
        raise DomainError(f"unknown pose_id {pose_id!r}; expected one of {POSE_IDS}")
    angles = {name: 0.0 for name in ARTICULATIONS}
    angles.update(_POSE_ANGLES[pose_id])
    for name, value in (overrides or {}).items():
        if name not in angles:
            raise DomainError(f"unknown articulation {name!r}; expected one of {ARTICULATIONS}")
        angles[name] = float(value)
    return angles


def _limb_dir(side, degrees):
    a = np.deg2rad(degrees)
    sx = 1.0 if side == "l" else -1.0
    return np.array([sx * np.sin(a), -np.cos(a), 0.0])


def pose_joints(pose_id, scale=1.7, joint_angles=None):
    """Return the (16, 3) body-frame joint positions of a pose in meters."""
    if not scale > 0:
        raise DomainError(f"scale must be > 0, got {scale}")
    ang = pose_angles(pose_id, joint_angles)
    out = np.zeros((N_JOINTS, 3))
    for name, xyz in _TRUNK.items():
        out[J[name]] = xyz
    for side in ("l", "r"):
        sh = out[J[f"{side}_shoulder"]]
        el = sh + _UPPER_ARM * _limb_dir(side, ang[f"{side}_shoulder"])
        out[J[f"{side}_elbow"]] = el
        out[J[f"{side}_wrist"]] = el + _FOREARM * _limb_dir(side, ang[f"{side}_elbow"])
        hip = out[J[f"{side}_hip"]]
        kn = hip + _THIGH * _limb_dir(side, ang[f"{side}_hip"])
        out[J[f"{side}_knee"]] = kn
        out[J[f"{side}_ankle"]] = kn + _SHIN * _limb_dir(side, ang[f"{side}_knee"])
    # standing legs put the ankles exactly on the floor; keep the floor at y=0
    # for articulated legs too
    out[:, 1] -= 0.5 * (out[J["l_ankle"], 1] + out[J["r_ankle"], 1])
    return out * scale


def to_canonical(joints):
    """Translate body-frame joints so the lower spine joint is the origin."""
    joints = np.asarray(joints, dtype=float)
    return joints - joints[ROOT]


def bone_lengths(joints):
    joints = np.asarray(joints, dtype=float)
    return np.array([np.linalg.norm(joints[c] - joints[p]) for p, c in BONES])


@dataclass(frozen=True)
class TemplateSkeleton:
    """Canonical-frame template joints, bone list, and bone lengths."""

    joints: np.ndarray
    bones: tuple = BONES
    lengths: np.ndarray = field(default=None)

    def __post_init__(self):
        joints = np.asarray(self.joints, dtype=float)
        if joints.shape != (N_JOINTS, 3) or not np.all(np.isfinite(joints)):
            raise DomainError(f"template joints must be finite (16, 3), got {joints.shape}")
        object.__setattr__(self, "joints", joints)
        lengths = bone_lengths(joints) if self.lengths is None else np.asarray(self.lengths, float)
        if np.any(lengths <= 0):
            raise DomainError("template bone lengths must be > 0")
        object.__setattr__(self, "lengths", lengths)

    @classmethod
    def standard(cls, scale=1.7):
        return cls(to_canonical(pose_joints("standing", scale)))

    @property
    def height(self):
        return float(np.ptp(self.joints[:, 1]))


def interpolate_bones(joints, per_bone=10):
    """Coarse vertices: ``per_bone`` evenly spaced samples on every bone.

    Samples sit at fractions (i + 0.5) / per_bone so that neighbouring bones
    never produce duplicate vertices at shared joints.
    """
    joints = np.asarray(joints, dtype=float)
    t = (np.arange(per_bone) + 0.5) / per_bone
    verts = [joints[p] + t[:, None] * (joints[c] - joints[p]) for p, c in BONES]
    return np.concatenate(verts, axis=0)


def children_of(joint):
    return [c for p, c in BONES if p == joint]
