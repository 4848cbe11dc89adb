"""Synthetic clothed-body data: outfits, pose trajectories, dataset files.

An outfit is an analytic displacement field over the body's UV manifold,
expressed in the same segment-local frames the model decodes into:

    offset(u) = [stand_off + ripple * sin(2*pi*waves * axial)] * n_hat
              + [shear * sin(child bend angle)] * t_hat

on covered islands, zero (bare skin) elsewhere. The normal component gives
each garment a static signature shape; the tangential component slides the
cloth around a limb as the joint at its far end bends, which is the part a
per-segment rigid transport of a single scan cannot reproduce and the model
has to learn from pose input.

Ground-truth points use the same bilinear support machinery the model
queries through, so a perfect decoder could reproduce the data exactly.
Ground-truth normals come from central differences of the displaced surface
one texel apart, oriented to point away from the body.

``generate_dataset`` writes the whole benchmark to disk: skeleton, poses,
clouds, manifest. Everything is seeded and byte-reproducible.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .body.skeleton import Pose, write_pose, write_skeleton, default_skeleton
from .body.surface import PosedBody
from .formats import Manifest, write_manifest, write_ply

__all__ = [
    "SyntheticOutfit",
    "islands_of",
    "child_bend_sin",
    "displaced_points",
    "gt_cloud",
    "sample_gt",
    "trajectory_pose",
    "POSE_SWELL",
    "trajectory_plan",
    "fit_pose",
    "animate_pose",
    "N_ANIMATE",
    "default_wardrobe",
    "unseen_outfit",
    "generate_dataset",
]


def islands_of(skeleton, joint_names):
    """Island indices of the segments rooted at the named joints."""
    wanted = set(joint_names)
    unknown = wanted - set(skeleton.names)
    if unknown:
        raise ValueError(f"unknown joints {sorted(unknown)}")
    out = tuple(b.index for b in skeleton.bones
                if skeleton.names[b.joint] in wanted)
    if len(out) != len(wanted):
        missing = wanted - {skeleton.names[b.joint] for b in skeleton.bones}
        raise ValueError(f"joints {sorted(missing)} carry no segment")
    return out


# Pose response shared by every outfit: cloth swings away from a limb as the
# limb's far joint bends, scaling the whole normal offset by
# (1 + POSE_SWELL * sin(bend)). One global coefficient, not a per-outfit
# parameter, so a single static scan of a new outfit pins down its response.
POSE_SWELL = 0.8


@dataclass(frozen=True)
class SyntheticOutfit:
    """Parameters of one analytic garment; lengths are meters."""

    name: str
    stand_off: float  # constant offset away from the skin
    ripple: float     # axial sinusoid amplitude
    waves: int        # sinusoid periods along each covered segment
    shear: float      # circumferential slide per unit sin(child bend)
    covered: tuple    # island indices wearing the outfit

    def validate(self, skeleton):
        if not self.name or " " in self.name or "/" in self.name:
            raise ValueError(f"invalid outfit name {self.name!r}")
        for field in ("stand_off", "ripple", "shear"):
            v = getattr(self, field)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{self.name}: {field} must be finite and >= 0")
        if self.ripple > self.stand_off:
            # keeps the cloth from dipping under the skin at the sine troughs
            raise ValueError(f"{self.name}: ripple exceeds stand_off")
        if self.waves < 1 or int(self.waves) != self.waves:
            raise ValueError(f"{self.name}: waves must be a positive integer")
        if not self.covered:
            raise ValueError(f"{self.name}: outfit covers nothing")
        n_bones = skeleton.n_bones
        if any(i < 0 or i >= n_bones for i in self.covered):
            raise ValueError(f"{self.name}: covered islands out of range")
        if len(set(self.covered)) != len(self.covered):
            raise ValueError(f"{self.name}: duplicate covered islands")
        min_r = min(skeleton.bones[i].radius for i in self.covered)
        budget = 2.0 * min_r
        peak = ((self.stand_off + self.ripple) * (1.0 + POSE_SWELL)
                + self.shear)
        if peak > budget:
            raise ValueError(
                f"{self.name}: fully swollen amplitudes reach {peak:.3f}, "
                f"over the {budget:.3f} bound (2x the thinnest covered "
                f"segment)")
        return self

    def covered_mask(self, n_islands):
        mask = np.zeros(n_islands, dtype=bool)
        mask[list(self.covered)] = True
        return mask


def default_wardrobe(skeleton):
    """The three training outfits."""
    torso_thighs = islands_of(skeleton, ("pelvis", "spine", "thigh_l", "thigh_r"))
    pelvis_thighs = islands_of(skeleton, ("pelvis", "thigh_l", "thigh_r"))
    full = tuple(range(skeleton.n_bones))
    return (
        SyntheticOutfit("tight", 0.010, 0.002, 6, 0.010, full).validate(skeleton),
        SyntheticOutfit("loose", 0.030, 0.008, 3, 0.040, torso_thighs).validate(skeleton),
        SyntheticOutfit("skirt", 0.050, 0.010, 4, 0.030, pelvis_thighs).validate(skeleton),
    )


def unseen_outfit(skeleton):
    """The held-out outfit used only for single-scan fitting."""
    torso_thighs = islands_of(skeleton, ("pelvis", "spine", "thigh_l", "thigh_r"))
    return SyntheticOutfit("wrap", 0.020, 0.005, 5, 0.050,
                           torso_thighs).validate(skeleton)


def child_bend_sin(skeleton, pose):
    """sin of the bend angle at each segment's far joint, per island."""
    angles = np.array([np.linalg.norm(pose.rotations[b.child])
                       for b in skeleton.bones])
    return np.sin(angles)


def _supports(body, h, w, u, v):
    sup = body.query_support(h, w, u, v)
    if not sup.ok.all():
        bad = int(np.flatnonzero(~sup.ok)[0])
        raise ValueError(
            f"{(~sup.ok).sum()} ground-truth queries off the manifold, "
            f"first at uv=({u[bad]:.4f}, {v[bad]:.4f})")
    return sup


def displaced_points(body, outfit, h, w, u, v):
    """World positions of the dressed surface at valid (u, v); returns (x, sup)."""
    sup = _supports(body, h, w, u, v)
    island, cfrac, afrac = body.atlas.locate(u, v)
    theta = 2.0 * np.pi * cfrac
    n_loc, t_loc = body.local_dirs(island, theta)
    covered = outfit.covered_mask(body.skeleton.n_bones)[island]
    bend = child_bend_sin(body.skeleton, body.pose)[island]
    mag_n = np.where(
        covered,
        (outfit.stand_off
         + outfit.ripple * np.sin(2.0 * np.pi * outfit.waves * afrac))
        * (1.0 + POSE_SWELL * bend),
        0.0)
    mag_t = np.where(covered, outfit.shear * bend, 0.0)
    disp = mag_n[:, None] * n_loc + mag_t[:, None] * t_loc
    x = np.einsum("nij,nj->ni", sup.rotation, disp) + sup.position
    return x, sup


def _chord_ends(body, h, w, u, v, du_, dv_, center_island):
    """Endpoints of one FD chord, folded back where the island ends.

    Both ends step a full texel when the stepped point still interpolates
    on the sample's island; an end that would fall off clamps to the sample
    itself, turning the chord one-sided. This keeps the sampled region
    exactly the region the bilinear support can answer.
    """
    s_m = body.query_support(h, w, u - du_, v - dv_)
    s_p = body.query_support(h, w, u + du_, v + dv_)
    ok_m = s_m.ok & (s_m.island == center_island)
    ok_p = s_p.ok & (s_p.island == center_island)
    lo_u = np.where(ok_m, u - du_, u)
    lo_v = np.where(ok_m, v - dv_, v)
    hi_u = np.where(ok_p, u + du_, u)
    hi_v = np.where(ok_p, v + dv_, v)
    return lo_u, lo_v, hi_u, hi_v


def gt_cloud(body, outfit, h, w, u, v):
    """Dressed points plus finite-difference normals at valid (u, v)."""
    du, dv = 1.0 / w, 1.0 / h
    x, sup = displaced_points(body, outfit, h, w, u, v)
    lo_u, lo_v, hi_u, hi_v = _chord_ends(body, h, w, u, v, du, 0.0, sup.island)
    xu_m, _ = displaced_points(body, outfit, h, w, lo_u, lo_v)
    xu_p, _ = displaced_points(body, outfit, h, w, hi_u, hi_v)
    lo_u, lo_v, hi_u, hi_v = _chord_ends(body, h, w, u, v, 0.0, dv, sup.island)
    xv_m, _ = displaced_points(body, outfit, h, w, lo_u, lo_v)
    xv_p, _ = displaced_points(body, outfit, h, w, hi_u, hi_v)
    nrm = np.cross(xu_p - xu_m, xv_p - xv_m)
    lengths = np.linalg.norm(nrm, axis=1, keepdims=True)

    island, cfrac, _ = body.atlas.locate(u, v)
    n_loc, _ = body.local_dirs(island, 2.0 * np.pi * cfrac)
    away = np.einsum("nij,nj->ni", sup.rotation, n_loc)
    # degenerate crosses (cannot happen on a cylinder of finite radius, but
    # guard anyway) fall back to the bare-surface direction
    flat = lengths[:, 0] < 1e-12
    nrm = np.where(flat[:, None], away, nrm / np.maximum(lengths, 1e-12))
    flip = (nrm * away).sum(axis=1) < 0.0
    nrm[flip] *= -1.0
    return x, nrm


def sample_gt(body, outfit, h, w, n, rng):
    """n dressed surface samples, uniform over the valid UV region.

    Validity matches the model's query grid (the bilinear support answers),
    so the sampled surface and the decodable surface coincide. Returns
    (points, normals, u, v); bitwise deterministic for a given rng state
    because candidates are drawn in fixed-size batches and kept in draw
    order.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    got_u, got_v = [], []
    total = 0
    batch = max(4 * n, 1024)
    while total < n:
        u = rng.random(batch)
        v = rng.random(batch)
        keep = body.query_support(h, w, u, v).ok
        got_u.append(u[keep])
        got_v.append(v[keep])
        total += int(keep.sum())
    u = np.concatenate(got_u)[:n]
    v = np.concatenate(got_v)[:n]
    x, nrm = gt_cloud(body, outfit, h, w, u, v)
    return x, nrm, u, v


# ---------------------------------------------------------------------------
# poses


def _set(pose, skeleton, joint, axis, angle):
    pose.rotations[skeleton.index[joint]] = np.array(axis, dtype=np.float64) * angle


def trajectory_pose(skeleton, t):
    """One sample of the smooth training motion at phase t in [0, 1).

    Knees and elbows swing through large positive bends, the root
    translates and turns, and every segment's far joint moves at least a
    little so each island sees pose-dependent cloth shear during training.
    The knee bends mix an opposite-phase and a shared component so the
    trajectory visits single-bent and double-bent knee configurations;
    the animation targets below sit inside that coverage.
    """
    pose = Pose.rest(skeleton)
    w = 2.0 * np.pi * t
    x, y, z = (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)
    _set(pose, skeleton, "pelvis", y, 0.5 * np.sin(w + 0.3))
    _set(pose, skeleton, "spine", x, 0.15 * np.sin(w + 0.5))
    _set(pose, skeleton, "head", x, 0.10 * np.sin(w + 2.8))
    _set(pose, skeleton, "head_tip", x, 0.15 * np.sin(w + 0.8))
    _set(pose, skeleton, "thigh_l", x, 0.25 * np.sin(w + np.pi))
    _set(pose, skeleton, "thigh_r", x, 0.25 * np.sin(w))
    knee_shared = 0.28 * np.sin(2.0 * w + 0.9)
    _set(pose, skeleton, "shin_l", x, 0.62 + 0.32 * np.sin(w) + knee_shared)
    _set(pose, skeleton, "shin_r", x,
         0.62 + 0.32 * np.sin(w + np.pi) + knee_shared)
    _set(pose, skeleton, "foot_l", x, 0.20 * np.sin(w + 1.1))
    _set(pose, skeleton, "foot_r", x, 0.20 * np.sin(w + 2.3))
    _set(pose, skeleton, "upperarm_l", z, 0.30 * np.sin(w + 1.7))
    _set(pose, skeleton, "upperarm_r", z, -0.30 * np.sin(w + 0.4))
    _set(pose, skeleton, "forearm_l", z, -(0.50 + 0.40 * np.sin(w + 0.9)))
    _set(pose, skeleton, "forearm_r", z, 0.50 + 0.40 * np.sin(w + 2.1))
    _set(pose, skeleton, "hand_l", y, 0.30 * np.sin(w + 0.2))
    _set(pose, skeleton, "hand_r", y, 0.30 * np.sin(w + 1.3))
    pose.translation[:] = (0.35 * np.sin(w),
                           0.08 * np.sin(2.0 * w + 0.7),
                           -0.30 * np.cos(w))
    return pose


def trajectory_plan(n=24):
    """(name, split, phase) per trajectory sample; every third goes to test."""
    if n < 3:
        raise ValueError("trajectory needs at least 3 samples")
    plan = []
    n_train = n_test = 0
    for i in range(n):
        if i % 3 == 2:
            plan.append((f"test_{n_test:03d}", "test", i / n))
            n_test += 1
        else:
            plan.append((f"train_{n_train:03d}", "train", i / n))
            n_train += 1
    return plan


def fit_pose(skeleton):
    """Near-rest pose of the single scan the unseen outfit is fitted from.

    Knees stay almost straight (sin about 0.05) so the animate poses below
    can change the knee-driven cloth shear by a large margin.
    """
    pose = Pose.rest(skeleton)
    x, y, z = (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)
    _set(pose, skeleton, "pelvis", y, 0.15)
    _set(pose, skeleton, "spine", x, 0.08)
    _set(pose, skeleton, "shin_l", x, 0.05)
    _set(pose, skeleton, "shin_r", x, 0.05)
    _set(pose, skeleton, "upperarm_l", z, -0.20)
    _set(pose, skeleton, "upperarm_r", z, 0.20)
    _set(pose, skeleton, "forearm_l", z, -0.10)
    _set(pose, skeleton, "forearm_r", z, 0.10)
    pose.translation[:] = (0.10, 0.02, 0.05)
    return pose


N_ANIMATE = 4

_ANIMATE = (
    # shin_l, shin_r, forearm bend, spine, yaw, translation
    (0.95, 0.80, 0.70, 0.10, 0.40, (0.20, 0.05, -0.15)),
    (0.85, 1.00, 0.85, -0.08, -0.30, (-0.25, 0.00, 0.20)),
    (0.80, 0.90, 0.55, 0.12, 0.45, (0.05, 0.08, 0.30)),
    (1.00, 0.85, 0.90, -0.10, -0.45, (-0.15, 0.04, -0.25)),
)


def animate_pose(skeleton, i):
    """Animation target i; both knees bend hard versus the fit pose."""
    if not 0 <= i < N_ANIMATE:
        raise ValueError(f"animate pose index {i} out of range")
    shin_l, shin_r, elbow, spine, yaw, trans = _ANIMATE[i]
    pose = Pose.rest(skeleton)
    x, y, z = (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)
    _set(pose, skeleton, "pelvis", y, yaw)
    _set(pose, skeleton, "spine", x, spine)
    _set(pose, skeleton, "shin_l", x, shin_l)
    _set(pose, skeleton, "shin_r", x, shin_r)
    _set(pose, skeleton, "thigh_l", x, 0.20)
    _set(pose, skeleton, "thigh_r", x, -0.15)
    _set(pose, skeleton, "forearm_l", z, -elbow)
    _set(pose, skeleton, "forearm_r", z, elbow)
    pose.translation[:] = trans
    return pose


# ---------------------------------------------------------------------------
# dataset files


def _cloud_seed(seed, outfit_name, pose_name):
    import zlib
    return np.random.SeedSequence(
        [seed, zlib.crc32(outfit_name.encode()), zlib.crc32(pose_name.encode())])


def generate_dataset(out_dir, map_h=32, map_w=32, gt_samples=20000, seed=0,
                     n_traj=24, skeleton=None):
    """Write the full benchmark tree and return its manifest.

    Layout under out_dir: skeleton.txt, poses/<name>.pose,
    clouds/<outfit>/<pose>.ply, manifest.txt. The three training outfits
    get every trajectory pose; the unseen outfit gets the fit scan and the
    animation targets, all marked test so nothing trains on them.
    """
    skeleton = skeleton or default_skeleton()
    wardrobe = default_wardrobe(skeleton)
    unseen = unseen_outfit(skeleton)

    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "poses"), exist_ok=True)
    write_skeleton(os.path.join(out_dir, "skeleton.txt"), skeleton)

    plan = trajectory_plan(n_traj)
    poses = {name: trajectory_pose(skeleton, phase) for name, _, phase in plan}
    poses["fit_000"] = fit_pose(skeleton)
    for i in range(N_ANIMATE):
        poses[f"animate_{i:03d}"] = animate_pose(skeleton, i)
    for name, pose in poses.items():
        write_pose(os.path.join(out_dir, "poses", f"{name}.pose"), skeleton, pose)
    bodies = {name: PosedBody(skeleton, pose) for name, pose in poses.items()}

    manifest = Manifest(skeleton="skeleton.txt",
                        outfits=[o.name for o in wardrobe] + [unseen.name])
    jobs = [(outfit, name, split) for outfit in wardrobe
            for name, split, _ in plan]
    jobs += [(unseen, "fit_000", "test")]
    jobs += [(unseen, f"animate_{i:03d}", "test") for i in range(N_ANIMATE)]
    for outfit, pose_name, split in jobs:
        rng = np.random.default_rng(_cloud_seed(seed, outfit.name, pose_name))
        pts, nrm, _, _ = sample_gt(bodies[pose_name], outfit, map_h, map_w,
                                   gt_samples, rng)
        rel = os.path.join("clouds", outfit.name, f"{pose_name}.ply")
        os.makedirs(os.path.dirname(os.path.join(out_dir, rel)), exist_ok=True)
        write_ply(os.path.join(out_dir, rel), pts, nrm)
        manifest.examples.append(
            (outfit.name, os.path.join("poses", f"{pose_name}.pose"), rel, split))
    write_manifest(os.path.join(out_dir, "manifest.txt"), manifest)
    return manifest
