"""Articulated capsule skeleton: joints, poses, forward kinematics.

A skeleton is a tree of named joints given in topological order (parents
first). Every joint that has children carries a cylindrical segment of the
stated radius running from the joint to its first child; childless joints are
zero-radius tips that only terminate a segment. Offsets are rest vectors in
the parent's frame. Units are meters, y points up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..formats import FormatError

__all__ = [
    "Joint", "Bone", "Skeleton", "Pose", "rotmat", "fk",
    "default_skeleton", "read_skeleton", "write_skeleton",
    "read_pose", "write_pose",
]


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int  # index of the parent joint, -1 for the root
    offset: np.ndarray  # (3,) float64 rest offset in the parent frame
    radius: float  # segment radius when the joint has children, else 0


@dataclass(frozen=True)
class Bone:
    """One cylinder: from joint ``joint`` toward its first child ``child``."""

    index: int  # position in Skeleton.bones
    joint: int
    child: int
    length: float
    radius: float
    frame: np.ndarray  # (3, 3) columns [e1, e2, axis_hat], rest coordinates


def _segment_frame(axis):
    """Right-handed orthonormal frame with the third column along ``axis``."""
    length = float(np.linalg.norm(axis))
    z = axis / length
    helper = np.array([0.0, 1.0, 0.0])
    if abs(float(z @ helper)) > 0.9:
        helper = np.array([1.0, 0.0, 0.0])
    e1 = np.cross(helper, z)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(z, e1)
    return np.column_stack([e1, e2, z])


class Skeleton:
    def __init__(self, joints):
        joints = list(joints)
        if not joints:
            raise ValueError("skeleton needs at least one joint")
        names = [j.name for j in joints]
        if len(set(names)) != len(names):
            raise ValueError("duplicate joint names")
        if joints[0].parent != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        for i, j in enumerate(joints[1:], start=1):
            if not 0 <= j.parent < i:
                raise ValueError(
                    f"joint {j.name!r}: parent index {j.parent} must precede it")
            if j.radius < 0:
                raise ValueError(f"joint {j.name!r}: negative radius")
        self.joints = joints
        self.names = names
        self.index = {n: i for i, n in enumerate(names)}
        children = [[] for _ in joints]
        for i, j in enumerate(joints):
            if j.parent >= 0:
                children[j.parent].append(i)
        self.children = children

        bones = []
        for i, j in enumerate(joints):
            if not children[i]:
                continue
            child = children[i][0]
            axis = joints[child].offset
            length = float(np.linalg.norm(axis))
            if length <= 0:
                raise ValueError(
                    f"joint {j.name!r}: first child {joints[child].name!r} has "
                    f"zero-length offset; segment axis undefined")
            if j.radius <= 0:
                raise ValueError(f"joint {j.name!r}: segment needs radius > 0")
            bones.append(Bone(index=len(bones), joint=i, child=child,
                              length=length, radius=j.radius,
                              frame=_segment_frame(axis)))
        self.bones = bones
        self.bone_of_joint = {b.joint: b.index for b in bones}

    @property
    def n_joints(self):
        return len(self.joints)

    @property
    def n_bones(self):
        return len(self.bones)

    def surface_area(self):
        return float(sum(2.0 * np.pi * b.radius * b.length for b in self.bones))


@dataclass
class Pose:
    """Root translation plus one axis-angle rotation per joint (radians)."""

    translation: np.ndarray  # (3,) float64
    rotations: np.ndarray  # (J, 3) float64

    def copy(self):
        return Pose(self.translation.copy(), self.rotations.copy())

    @staticmethod
    def rest(skeleton):
        return Pose(np.zeros(3), np.zeros((skeleton.n_joints, 3)))


def rotmat(w):
    """Rotation matrix of an axis-angle vector, series-safe near zero."""
    w = np.asarray(w, dtype=np.float64)
    phi = float(np.linalg.norm(w))
    kx, ky, kz = w
    k = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    if phi < 1e-8:
        # sin(phi)/phi and (1-cos(phi))/phi^2 to second order
        a = 1.0 - phi * phi / 6.0
        b = 0.5 - phi * phi / 24.0
    else:
        a = np.sin(phi) / phi
        b = (1.0 - np.cos(phi)) / (phi * phi)
    return np.eye(3) + a * k + b * (k @ k)


def fk(skeleton, pose):
    """Global joint frames: rotations (J, 3, 3) and positions (J, 3)."""
    j_count = skeleton.n_joints
    if pose.rotations.shape != (j_count, 3):
        raise ValueError(
            f"pose has {pose.rotations.shape} rotations for {j_count} joints")
    rot = np.empty((j_count, 3, 3))
    pos = np.empty((j_count, 3))
    for i, joint in enumerate(skeleton.joints):
        local = rotmat(pose.rotations[i])
        if joint.parent < 0:
            rot[i] = local
            pos[i] = np.asarray(pose.translation, dtype=np.float64) + joint.offset
        else:
            rot[i] = rot[joint.parent] @ local
            pos[i] = pos[joint.parent] + rot[joint.parent] @ joint.offset
    return rot, pos


def default_skeleton():
    """16 joints, 11 cylinder segments, about 1.5 m tall, T pose, y up."""
    def j(name, parent, ox, oy, oz, r):
        return (name, parent, np.array([ox, oy, oz]), r)

    rows = [
        j("pelvis", "-", 0.0, 0.0, 0.0, 0.10),
        j("spine", "pelvis", 0.0, 0.18, 0.0, 0.12),
        j("head", "spine", 0.0, 0.32, 0.0, 0.08),
        j("head_tip", "head", 0.0, 0.22, 0.0, 0.0),
        j("upperarm_l", "spine", 0.17, 0.26, 0.0, 0.045),
        j("forearm_l", "upperarm_l", 0.26, 0.0, 0.0, 0.04),
        j("hand_l", "forearm_l", 0.24, 0.0, 0.0, 0.0),
        j("upperarm_r", "spine", -0.17, 0.26, 0.0, 0.045),
        j("forearm_r", "upperarm_r", -0.26, 0.0, 0.0, 0.04),
        j("hand_r", "forearm_r", -0.24, 0.0, 0.0, 0.0),
        j("thigh_l", "pelvis", 0.09, -0.01, 0.0, 0.07),
        j("shin_l", "thigh_l", 0.0, -0.40, 0.0, 0.05),
        j("foot_l", "shin_l", 0.0, -0.40, 0.0, 0.0),
        j("thigh_r", "pelvis", -0.09, -0.01, 0.0, 0.07),
        j("shin_r", "thigh_r", 0.0, -0.40, 0.0, 0.05),
        j("foot_r", "shin_r", 0.0, -0.40, 0.0, 0.0),
    ]
    index = {name: i for i, (name, *_rest) in enumerate(rows)}
    joints = [Joint(name, -1 if par == "-" else index[par], off, r)
              for name, par, off, r in rows]
    return Skeleton(joints)


# --- text round trips --------------------------------------------------------


def write_skeleton(path, skeleton):
    with open(path, "w", encoding="ascii") as fh:
        fh.write("# name parent ox oy oz radius\n")
        for j in skeleton.joints:
            parent = "-" if j.parent < 0 else skeleton.names[j.parent]
            off = " ".join(repr(float(v)) for v in j.offset)
            fh.write(f"{j.name} {parent} {off} {repr(float(j.radius))}\n")


def read_skeleton(path):
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().split("\n")
    rows = []
    index = {}
    for k, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 6:
            raise FormatError(f"{path}: line {k}: expected 6 fields, "
                              f"got {len(parts)}")
        name, parent_name = parts[0], parts[1]
        if name in index:
            raise FormatError(f"{path}: line {k}: duplicate joint {name!r}")
        if parent_name == "-":
            parent = -1
        elif parent_name in index:
            parent = index[parent_name]
        else:
            raise FormatError(
                f"{path}: line {k}: parent {parent_name!r} not defined above")
        try:
            vals = [float(v) for v in parts[2:]]
        except ValueError as exc:
            raise FormatError(f"{path}: line {k}: bad float field") from exc
        index[name] = len(rows)
        rows.append(Joint(name, parent, np.array(vals[:3]), vals[3]))
    if not rows:
        raise FormatError(f"{path}: no joints")
    try:
        return Skeleton(rows)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_pose(path, skeleton, pose):
    with open(path, "w", encoding="ascii") as fh:
        fh.write("translation "
                 + " ".join(repr(float(v)) for v in pose.translation) + "\n")
        for name, w in zip(skeleton.names, pose.rotations):
            fh.write(f"{name} " + " ".join(repr(float(v)) for v in w) + "\n")


def read_pose(path, skeleton):
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().split("\n")
    translation = None
    rotations = np.full((skeleton.n_joints, 3), np.nan)
    for k, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FormatError(f"{path}: line {k}: expected 4 fields")
        try:
            vec = np.array([float(v) for v in parts[1:]])
        except ValueError as exc:
            raise FormatError(f"{path}: line {k}: bad float field") from exc
        if parts[0] == "translation":
            if translation is not None:
                raise FormatError(f"{path}: line {k}: duplicate translation")
            translation = vec
        else:
            idx = skeleton.index.get(parts[0])
            if idx is None:
                raise FormatError(f"{path}: line {k}: unknown joint {parts[0]!r}")
            if not np.isnan(rotations[idx]).all():
                raise FormatError(f"{path}: line {k}: duplicate joint {parts[0]!r}")
            rotations[idx] = vec
    if translation is None:
        raise FormatError(f"{path}: missing translation line")
    missing = [skeleton.names[i] for i in range(skeleton.n_joints)
               if np.isnan(rotations[i]).any()]
    if missing:
        raise FormatError(f"{path}: missing joints {missing}")
    return Pose(translation, rotations)
