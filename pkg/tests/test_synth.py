"""Synthetic data tests: field decomposition, normals, poses, dataset files."""

import os

import numpy as np
import pytest

from pointdrape.body import PosedBody, Pose, default_skeleton
from pointdrape.formats import read_manifest, read_ply
from pointdrape.synth import (
    N_ANIMATE,
    POSE_SWELL,
    SyntheticOutfit,
    animate_pose,
    child_bend_sin,
    default_wardrobe,
    displaced_points,
    fit_pose,
    generate_dataset,
    gt_cloud,
    islands_of,
    sample_gt,
    trajectory_plan,
    trajectory_pose,
    unseen_outfit,
)
@pytest.fixture(scope="module")
def sk():
    return default_skeleton()


def stencil_uv(body, n, seed, h=32, w=32):
    """n random (u, v) the bilinear support can answer."""
    rng = np.random.default_rng(seed)
    u = rng.random(8 * n)
    v = rng.random(8 * n)
    keep = body.query_support(h, w, u, v).ok
    assert keep.sum() >= n
    return u[keep][:n], v[keep][:n]


class TestOutfitValidation:
    def test_default_wardrobe_valid(self, sk):
        names = [o.name for o in default_wardrobe(sk)]
        assert names == ["tight", "loose", "skirt"]
        assert unseen_outfit(sk).name == "wrap"

    def test_ripple_over_stand_off_rejected(self, sk):
        bad = SyntheticOutfit("x", 0.01, 0.02, 3, 0.0, (0,))
        with pytest.raises(ValueError, match="ripple"):
            bad.validate(sk)

    def test_amplitude_budget(self, sk):
        # island 4 is a forearm, radius 0.04: budget 0.08
        bad = SyntheticOutfit("x", 0.05, 0.0, 1, 0.04, (4,))
        with pytest.raises(ValueError, match="bound"):
            bad.validate(sk)

    def test_covered_indices_checked(self, sk):
        with pytest.raises(ValueError, match="out of range"):
            SyntheticOutfit("x", 0.01, 0.0, 1, 0.0, (99,)).validate(sk)
        with pytest.raises(ValueError, match="covers nothing"):
            SyntheticOutfit("x", 0.01, 0.0, 1, 0.0, ()).validate(sk)
        with pytest.raises(ValueError, match="duplicate"):
            SyntheticOutfit("x", 0.01, 0.0, 1, 0.0, (1, 1)).validate(sk)

    def test_islands_of_rejects_tips(self, sk):
        with pytest.raises(ValueError, match="no segment"):
            islands_of(sk, ("hand_l",))
        with pytest.raises(ValueError, match="unknown"):
            islands_of(sk, ("tail",))


class TestDisplacementField:
    def test_decomposes_into_normal_and_shear_parts(self, sk):
        outfit = default_wardrobe(sk)[1]  # loose: torso+thighs
        body = PosedBody(sk, trajectory_pose(sk, 0.3))
        u, v = stencil_uv(body, 400, seed=2)
        x, sup = displaced_points(body, outfit, 32, 32, u, v)
        island, cfrac, afrac = body.atlas.locate(u, v)
        n_loc, t_loc = body.local_dirs(island, 2.0 * np.pi * cfrac)
        n_world = np.einsum("nij,nj->ni", sup.rotation, n_loc)
        t_world = np.einsum("nij,nj->ni", sup.rotation, t_loc)
        d = x - sup.position
        covered = outfit.covered_mask(sk.n_bones)[island]
        assert covered.any() and (~covered).any()
        bend = child_bend_sin(sk, body.pose)[island]
        want_n = np.where(
            covered,
            (outfit.stand_off
             + outfit.ripple * np.sin(2.0 * np.pi * outfit.waves * afrac))
            * (1.0 + POSE_SWELL * bend), 0.0)
        want_t = np.where(covered, outfit.shear * bend, 0.0)
        assert np.allclose((d * n_world).sum(1), want_n, atol=1e-12)
        assert np.allclose((d * t_world).sum(1), want_t, atol=1e-12)
        resid = d - want_n[:, None] * n_world - want_t[:, None] * t_world
        assert np.abs(resid).max() < 1e-12

    def test_uncovered_points_sit_on_bare_surface(self, sk):
        outfit = default_wardrobe(sk)[2]  # skirt: pelvis+thighs only
        body = PosedBody(sk, Pose.rest(sk))
        u, v = stencil_uv(body, 400, seed=3)
        x, sup = displaced_points(body, outfit, 32, 32, u, v)
        island, _, _ = body.atlas.locate(u, v)
        bare = ~outfit.covered_mask(sk.n_bones)[island]
        assert bare.any()
        assert np.array_equal(x[bare], sup.position[bare])

    def test_shear_tracks_child_bend(self, sk):
        # the same uv on a thigh, two knee angles: the segment-local offset
        # moves circumferentially by shear * (sin a - sin b), nothing else
        outfit = unseen_outfit(sk)
        thigh = islands_of(sk, ("thigh_l",))[0]
        knee_a, knee_b = 0.1, 1.1
        locals_ = []
        for knee in (knee_a, knee_b):
            pose = Pose.rest(sk)
            pose.rotations[sk.index["shin_l"]] = np.array([knee, 0.0, 0.0])
            body = PosedBody(sk, pose)
            u, v = stencil_uv(body, 600, seed=4)
            island, cfrac, _ = body.atlas.locate(u, v)
            pick = island == thigh
            assert pick.sum() > 10
            u, v, cfrac = u[pick], v[pick], cfrac[pick]
            x, sup = displaced_points(body, outfit, 32, 32, u, v)
            r_loc = np.einsum("nji,nj->ni", sup.rotation, x - sup.position)
            _, t_loc = body.local_dirs(island[pick], 2.0 * np.pi * cfrac)
            locals_.append((r_loc * t_loc).sum(1))
        want = outfit.shear * (np.sin(knee_a) - np.sin(knee_b))
        assert np.allclose(locals_[0] - locals_[1], want, atol=1e-12)


class TestNormals:
    def test_unit_and_outward(self, sk):
        body = PosedBody(sk, trajectory_pose(sk, 0.6))
        for outfit in default_wardrobe(sk):
            u, v = stencil_uv(body, 300, seed=5)
            x, nrm = gt_cloud(body, outfit, 32, 32, u, v)
            assert np.allclose(np.linalg.norm(nrm, axis=1), 1.0, atol=1e-9)
            island, cfrac, _ = body.atlas.locate(u, v)
            n_loc, _ = body.local_dirs(island, 2.0 * np.pi * cfrac)
            sup = body.query_support(32, 32, u, v)
            away = np.einsum("nij,nj->ni", sup.rotation, n_loc)
            assert ((nrm * away).sum(1) >= 0.0).all()

    def test_offset_only_outfit_keeps_surface_normal(self, sk):
        # constant stand_off is a parallel surface: its normal is the bare
        # capsule normal; central differences recover it closely
        outfit = SyntheticOutfit("shell", 0.02, 0.0, 1, 0.0,
                                 tuple(range(sk.n_bones))).validate(sk)
        body = PosedBody(sk, Pose.rest(sk))
        u, v = stencil_uv(body, 500, seed=6)
        _, nrm = gt_cloud(body, outfit, 32, 32, u, v)
        island, cfrac, _ = body.atlas.locate(u, v)
        n_loc, _ = body.local_dirs(island, 2.0 * np.pi * cfrac)
        sup = body.query_support(32, 32, u, v)
        away = np.einsum("nij,nj->ni", sup.rotation, n_loc)
        dots = (nrm * away).sum(1)
        assert dots.min() > 0.95 and dots.mean() > 0.99


class TestSampling:
    def test_deterministic_and_valid(self, sk):
        body = PosedBody(sk, trajectory_pose(sk, 0.1))
        outfit = default_wardrobe(sk)[0]
        a = sample_gt(body, outfit, 32, 32, 500, np.random.default_rng(7))
        b = sample_gt(body, outfit, 32, 32, 500, np.random.default_rng(7))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        pts, nrm, u, v = a
        assert pts.shape == nrm.shape == (500, 3)
        assert body.query_support(32, 32, u, v).ok.all()

    def test_sampled_region_matches_query_region(self, sk):
        # the sampler accepts exactly what the model's query grid accepts:
        # a point 0.4 texels inside an island edge is in, the inset gap is out
        body = PosedBody(sk, Pose.rest(sk))
        near_edge = (np.array([0.01 + 0.4 / 32.0]), np.array([0.05]))
        in_gap = (np.array([0.005]), np.array([0.05]))
        assert body.query_support(32, 32, *near_edge).ok.all()
        assert not body.query_support(32, 32, *in_gap).ok.any()
        # samples land in the near-edge band the old interior margin missed
        _, _, u, v = sample_gt(body, default_wardrobe(sk)[0], 32, 32, 4000,
                               np.random.default_rng(9))
        du = (u - np.floor(u * 2.0) / 2.0)  # offset into the island column
        assert (du < 1.0 / 32.0).any()

    def test_edge_normals_stay_unit_and_outward(self, sk):
        # chord clamping at the island boundary: one-sided differences must
        # still give unit, outward normals
        body = PosedBody(sk, Pose.rest(sk))
        outfit = default_wardrobe(sk)[1]
        u, v = stencil_uv(body, 3000, seed=11)
        sup = body.query_support(32, 32, u, v)
        on_edge = np.zeros(u.shape, dtype=bool)
        for du, dv in ((1 / 32, 0.0), (-1 / 32, 0.0), (0.0, 1 / 32),
                       (0.0, -1 / 32)):
            s = body.query_support(32, 32, u + du, v + dv)
            on_edge |= ~(s.ok & (s.island == sup.island))
        assert on_edge.sum() > 50  # plenty of border-band samples
        u, v = u[on_edge], v[on_edge]
        x, nrm = gt_cloud(body, outfit, 32, 32, u, v)
        assert np.allclose(np.linalg.norm(nrm, axis=1), 1.0, atol=1e-9)
        island, cfrac, _ = body.atlas.locate(u, v)
        n_loc, _ = body.local_dirs(island, 2.0 * np.pi * cfrac)
        sup = body.query_support(32, 32, u, v)
        away = np.einsum("nij,nj->ni", sup.rotation, n_loc)
        assert ((nrm * away).sum(1) > 0.0).all()

    def test_covers_many_islands(self, sk):
        body = PosedBody(sk, Pose.rest(sk))
        _, _, u, v = sample_gt(body, default_wardrobe(sk)[0], 32, 32, 2000,
                               np.random.default_rng(8))
        island, _, _ = body.atlas.locate(u, v)
        assert len(np.unique(island)) == sk.n_bones


class TestPoses:
    def test_trajectory_plan_split(self):
        plan = trajectory_plan(24)
        assert len(plan) == 24
        assert sum(1 for _, s, _ in plan if s == "train") == 16
        assert sum(1 for _, s, _ in plan if s == "test") == 8
        names = [n for n, _, _ in plan]
        assert len(set(names)) == 24 and "train_000" in names

    def test_trajectory_knees_bend_forward(self, sk):
        for t in np.linspace(0.0, 1.0, 13):
            pose = trajectory_pose(sk, t)
            assert pose.rotations[sk.index["shin_l"]][0] >= 0.0
            assert pose.rotations[sk.index["shin_r"]][0] >= 0.0

    def test_trajectory_moves_every_segment_child(self, sk):
        bends = np.stack([child_bend_sin(sk, trajectory_pose(sk, t))
                          for t in np.linspace(0.0, 0.96, 25)])
        assert (bends.max(axis=0) - bends.min(axis=0) > 0.01).all()

    def test_animate_knees_differ_hard_from_fit(self, sk):
        fit = fit_pose(sk)
        for name in ("shin_l", "shin_r"):
            s_fit = np.sin(np.linalg.norm(fit.rotations[sk.index[name]]))
            for i in range(N_ANIMATE):
                pose = animate_pose(sk, i)
                s = np.sin(np.linalg.norm(pose.rotations[sk.index[name]]))
                assert abs(s - s_fit) >= 0.6

    def test_animate_index_checked(self, sk):
        with pytest.raises(ValueError):
            animate_pose(sk, N_ANIMATE)


class TestDataset:
    def test_layout_round_trip_and_determinism(self, sk, tmp_path):
        m = generate_dataset(tmp_path / "d1", gt_samples=300, n_traj=6, seed=9)
        back = read_manifest(tmp_path / "d1" / "manifest.txt")
        assert back.outfits == ["tight", "loose", "skirt", "wrap"]
        assert len(back.examples) == 3 * 6 + 1 + N_ANIMATE
        assert len(back.rows(split="train")) == 3 * 4
        assert len(back.rows(outfit="wrap")) == 1 + N_ANIMATE
        assert all(s == "test" for _, _, _, s in back.rows(outfit="wrap"))
        for _, pose_path, cloud_path, _ in back.examples:
            assert (tmp_path / "d1" / pose_path).exists()
            assert (tmp_path / "d1" / cloud_path).exists()
        pts, nrm = read_ply(tmp_path / "d1" / back.examples[0][2])
        assert pts.shape == (300, 3)
        assert np.allclose(np.linalg.norm(nrm, axis=1), 1.0, atol=1e-5)
        assert m.examples == back.examples

        generate_dataset(tmp_path / "d2", gt_samples=300, n_traj=6, seed=9)
        for root, _, files in os.walk(tmp_path / "d1"):
            for f in files:
                p1 = os.path.join(root, f)
                p2 = p1.replace(str(tmp_path / "d1"), str(tmp_path / "d2"))
                assert open(p1, "rb").read() == open(p2, "rb").read(), p1

    def test_seed_changes_clouds(self, sk, tmp_path):
        generate_dataset(tmp_path / "a", gt_samples=50, n_traj=3, seed=1)
        generate_dataset(tmp_path / "b", gt_samples=50, n_traj=3, seed=2)
        rel = "clouds/tight/train_000.ply"
        assert (open(tmp_path / "a" / rel, "rb").read()
                != open(tmp_path / "b" / rel, "rb").read())
