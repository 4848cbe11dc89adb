"""Dataset loading, root normalization, the training loop, fitting, eval."""

import dataclasses
import os

import numpy as np
import pytest

import pointdrape.synth as synth
from pointdrape.body.skeleton import Pose, read_pose, rotmat
from pointdrape.body.surface import PosedBody
from pointdrape.formats import FormatError, read_ply
from pointdrape.losses import EvalRecord, chamfer_l2, NNIndex
from pointdrape.net import DrapeModel, ModelConfig, PRESETS, load_model
from pointdrape.training import (
    Dataset, FitConfig, TrainConfig, animate, denormalize_points,
    denormalize_vectors, evaluate, fit_unseen, normalize_points,
    normalize_pose, normalize_vectors, train,
)


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    synth.generate_dataset(out, gt_samples=1500, seed=0, n_traj=6)
    return out


@pytest.fixture(scope="module")
def dataset(dataset_dir):
    return Dataset(dataset_dir)


def small_model(seed=7):
    # scale 2 keeps the decode grid at 2400 rows so training tests stay fast
    cfg = dataclasses.replace(ModelConfig.from_preset("desk"), query_scale=2)
    return DrapeModel(cfg, seed=seed)


@pytest.fixture(scope="module")
def trained(dataset):
    model = small_model()
    for name in dataset.train_outfits():
        model.add_garment(name)
    cfg = TrainConfig.from_preset("desk", epochs=4, seed=0)
    history = train(model, dataset, cfg)
    return model, history, cfg


class TestNormalization:
    def random_pose(self, skeleton, seed):
        rng = np.random.default_rng(seed)
        pose = Pose.rest(skeleton)
        pose.translation[:] = rng.normal(size=3)
        pose.rotations[:] = 0.3 * rng.normal(size=pose.rotations.shape)
        return pose

    def test_points_round_trip(self):
        sk = synth.default_skeleton()
        pose = self.random_pose(sk, 1)
        _, r0, t0 = normalize_pose(sk, pose)
        pts = np.random.default_rng(2).normal(size=(40, 3))
        back = denormalize_points(r0, t0, normalize_points(r0, t0, pts))
        np.testing.assert_allclose(back, pts, atol=1e-12)

    def test_vectors_round_trip(self):
        sk = synth.default_skeleton()
        pose = self.random_pose(sk, 3)
        _, r0, t0 = normalize_pose(sk, pose)
        vecs = np.random.default_rng(4).normal(size=(40, 3))
        back = denormalize_vectors(r0, normalize_vectors(r0, vecs))
        np.testing.assert_allclose(back, vecs, atol=1e-12)

    def test_normalized_pose_zeroes_root(self):
        sk = synth.default_skeleton()
        pose = self.random_pose(sk, 5)
        norm, r0, t0 = normalize_pose(sk, pose)
        root = [i for i, j in enumerate(sk.joints) if j.parent < 0][0]
        assert np.all(norm.translation == 0.0)
        assert np.all(norm.rotations[root] == 0.0)
        keep = np.ones(len(sk.joints), dtype=bool)
        keep[root] = False
        np.testing.assert_array_equal(norm.rotations[keep],
                                      pose.rotations[keep])
        np.testing.assert_array_equal(r0, rotmat(pose.rotations[root]))
        np.testing.assert_array_equal(t0, pose.translation)
        # the input pose must not be modified
        assert np.any(pose.translation != 0.0)

    def test_root_motion_drops_out(self):
        # two poses that differ only in root motion normalize identically
        sk = synth.default_skeleton()
        a = self.random_pose(sk, 6)
        b = a.copy()
        b.translation[:] = (9.0, -3.0, 4.0)
        root = [i for i, j in enumerate(sk.joints) if j.parent < 0][0]
        b.rotations[root] = (0.0, 2.0, 0.1)
        na, _, _ = normalize_pose(sk, a)
        nb, _, _ = normalize_pose(sk, b)
        np.testing.assert_array_equal(na.rotations, nb.rotations)
        np.testing.assert_array_equal(na.translation, nb.translation)

    def test_world_equals_denormalized_body(self):
        # surface points of the world pose are the rigidly moved surface
        # points of the normalized pose, which is what makes training in
        # the normalized frame legitimate
        sk = synth.default_skeleton()
        pose = self.random_pose(sk, 7)
        norm, r0, t0 = normalize_pose(sk, pose)
        world = PosedBody(sk, pose)
        local = PosedBody(sk, norm)
        u, v, _ = world.dense_query_grid(32, 32, 2)
        sup_w = world.query_support(32, 32, u, v)
        sup_l = local.query_support(32, 32, u, v)
        np.testing.assert_allclose(
            sup_w.position, denormalize_points(r0, t0, sup_l.position),
            atol=1e-9)


class TestConfigs:
    def test_train_preset_values(self):
        cfg = TrainConfig.from_preset("desk")
        assert (cfg.lr, cfg.epochs, cfg.batch_size) == (1.0e-3, 150, 4)
        assert (cfg.lam_data, cfg.lam_normal) == (2.0e4, 0.1)
        assert (cfg.lam_disp, cfg.lam_garment) == (2.0e3, 1.0)
        assert cfg.normal_start == 0.625
        assert not hasattr(cfg, "gt_samples")

    def test_full_preset_values(self):
        cfg = TrainConfig.from_preset("full")
        assert (cfg.lr, cfg.epochs, cfg.batch_size) == (3.0e-4, 400, 4)

    def test_preset_overrides(self):
        cfg = TrainConfig.from_preset("desk", epochs=3, seed=11)
        assert (cfg.epochs, cfg.seed) == (3, 11)
        assert cfg.lr == 1.0e-3

    @pytest.mark.parametrize("bad", [
        dict(lr=0.0), dict(lr=-1.0), dict(epochs=0), dict(batch_size=0),
        dict(ckpt_every=0), dict(normal_start=1.5), dict(normal_start=-0.1),
        dict(lam_data=-1.0),
    ])
    def test_train_rejects(self, bad):
        with pytest.raises(ValueError):
            TrainConfig.from_preset("desk", **bad)

    def test_train_from_file(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("epochs = 9\nlr = 5e-4  # comment\nseed = 3\n")
        cfg = TrainConfig.from_file("desk", path)
        assert (cfg.epochs, cfg.lr, cfg.seed) == (9, 5e-4, 3)
        assert cfg.batch_size == 4  # preset default survives

    def test_train_from_file_rejects_unknown_key(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("gt_samples = 100\n")
        with pytest.raises(FormatError, match="gt_samples"):
            TrainConfig.from_file("desk", path)

    def test_fit_defaults(self):
        cfg = FitConfig().validate()
        assert (cfg.iters, cfg.lr) == (500, 1.0e-3)
        assert (cfg.lam_data, cfg.lam_disp, cfg.lam_garment) \
            == (2.0e4, 2.0e3, 1.0)
        assert cfg.abort_factor == 10.0

    @pytest.mark.parametrize("bad", [
        dict(iters=0), dict(lr=0.0), dict(abort_factor=1.0),
        dict(lam_disp=-2.0),
    ])
    def test_fit_rejects(self, bad):
        with pytest.raises(ValueError):
            FitConfig(**bad).validate()

    def test_fit_from_file(self, tmp_path):
        path = tmp_path / "fit.cfg"
        path.write_text("iters = 40\nlr = 2e-3\n")
        cfg = FitConfig.from_file(path)
        assert (cfg.iters, cfg.lr) == (40, 2e-3)


class TestDataset:
    def test_counts_and_splits(self, dataset):
        # 3 training outfits x 6 trajectory poses, plus 5 unseen-outfit rows
        assert len(dataset.rows()) == 23
        assert len(dataset.rows(split="train")) == 12
        assert dataset.train_outfits() == ["loose", "skirt", "tight"]
        wrap = dataset.rows(outfit="wrap")
        assert len(wrap) == 5
        assert all(e.split == "test" for e in wrap)
        assert dataset.outfits == ["tight", "loose", "skirt", "wrap"]

    def test_bodies_shared_across_outfits(self, dataset):
        by_name = {}
        for ex in dataset.rows(split="train"):
            by_name.setdefault(ex.name, []).append(ex)
        multi = [grp for grp in by_name.values() if len(grp) > 1]
        assert multi, "expected poses shared by several outfits"
        for grp in multi:
            assert all(ex.body is grp[0].body for ex in grp)

    def test_examples_are_normalized(self, dataset, dataset_dir):
        ex = dataset.rows(split="train")[0]
        pose = read_pose(os.path.join(dataset_dir, "poses", ex.name + ".pose"),
                         dataset.skeleton)
        _, r0, t0 = normalize_pose(dataset.skeleton, pose)
        pts, nrm = read_ply(
            os.path.join(dataset_dir, "clouds", ex.outfit, ex.name + ".ply"))
        np.testing.assert_array_equal(
            ex.gt_points, normalize_points(r0, t0, pts.astype(np.float64)))
        np.testing.assert_array_equal(
            ex.gt_normals, normalize_vectors(r0, nrm.astype(np.float64)))
        # the body the model sees carries no root motion
        assert np.all(ex.body.pose.translation == 0.0)

    def test_nn_index_cached(self, dataset):
        ex = dataset.rows()[0]
        assert ex.nn is ex.nn

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            Dataset(tmp_path)


class TestTrain:
    def test_loss_decreases(self, trained):
        _, history, cfg = trained
        assert len(history) == cfg.epochs
        assert history[-1]["total"] < history[0]["total"]
        assert history[-1]["data"] < history[0]["data"]
        for h in history:
            assert np.isfinite(h["total"])

    def test_normal_term_activates_late(self, trained):
        _, history, cfg = trained
        start = int(np.floor(cfg.normal_start * cfg.epochs))
        assert 0 < start < cfg.epochs
        for h in history:
            if h["epoch"] < start:
                assert h["normal"] == 0.0
            else:
                assert h["normal"] > 0.0

    def test_missing_garment_code_rejected(self, dataset):
        model = small_model()
        model.add_garment("tight")
        with pytest.raises(ValueError, match="garment code"):
            train(model, dataset, TrainConfig.from_preset("desk", epochs=1))

    def test_no_training_rows_rejected(self, dataset, tmp_path):
        class Empty:
            def rows(self, split=None):
                return []
        model = small_model()
        with pytest.raises(ValueError, match="no training examples"):
            train(model, Empty(), TrainConfig.from_preset("desk", epochs=1))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts(self, dataset):
        model = small_model()
        for name in dataset.train_outfits():
            model.add_garment(name)
        cfg = TrainConfig.from_preset("desk", epochs=2, lr=1e12)
        with pytest.raises((RuntimeError, ValueError)):
            train(model, dataset, cfg)

    def test_checkpoint_written_and_loadable(self, dataset, tmp_path):
        model = small_model()
        for name in dataset.train_outfits():
            model.add_garment(name)
        ckpt = tmp_path / "model.ckpt"
        cfg = TrainConfig.from_preset("desk", epochs=1, seed=0)
        train(model, dataset, cfg, ckpt_path=str(ckpt))
        assert ckpt.exists()
        clone = load_model(str(ckpt))
        for a, b in zip(model.weight_params(), clone.weight_params()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_training_is_deterministic(self, dataset, tmp_path):
        blobs = []
        for run in range(2):
            model = small_model(seed=3)
            for name in dataset.train_outfits():
                model.add_garment(name)
            ckpt = tmp_path / f"run{run}.ckpt"
            train(model, dataset, TrainConfig.from_preset("desk", epochs=2),
                  ckpt_path=str(ckpt))
            blobs.append(ckpt.read_bytes())
        assert blobs[0] == blobs[1]

    def test_log_callback(self, dataset):
        model = small_model()
        for name in dataset.train_outfits():
            model.add_garment(name)
        lines = []
        train(model, dataset, TrainConfig.from_preset("desk", epochs=1),
              log=lines.append)
        assert len(lines) == 1 and "data" in lines[0]


class TestFitUnseen:
    def fit(self, trained, dataset, iters=12, name="wrap"):
        model, _, _ = trained
        ex = dataset.rows(outfit="wrap", name="fit_000")[0]
        cfg = FitConfig(iters=iters)
        g, history = fit_unseen(model, ex.body, ex.gt_points, name, cfg)
        return model, ex, g, history

    def test_weights_frozen_and_loss_drops(self, trained, dataset):
        model, _, _ = trained
        before = {id(p): p.data.copy() for p in model.weight_params()}
        stats = {name: arr.copy()
                 for name, arr in model.state_entries().items()
                 if "running_" in name}
        model, ex, g, history = self.fit(trained, dataset)
        for p in model.weight_params():
            np.testing.assert_array_equal(p.data, before[id(p)])
        for name, arr in model.state_entries().items():
            if "running_" in name:
                np.testing.assert_array_equal(arr, stats[name])
        assert history[-1] < history[0]
        assert np.all(np.isfinite(g.data))
        assert "wrap" in model.garments and model.garments["wrap"] is g
        for p in model.weight_params():
            assert p.grad is None
        # the code moved away from its zero start
        assert float(np.abs(g.data).max()) > 0.0

    def test_duplicate_name_rejected(self, trained, dataset):
        model, _, _ = trained
        ex = dataset.rows(outfit="wrap", name="fit_000")[0]
        with pytest.raises(ValueError, match="already has"):
            fit_unseen(model, ex.body, ex.gt_points, "tight", FitConfig(iters=1))

    def test_fit_is_deterministic(self, dataset):
        outs = []
        for _ in range(2):
            model = small_model(seed=5)
            for n in dataset.train_outfits():
                model.add_garment(n)
            ex = dataset.rows(outfit="wrap", name="fit_000")[0]
            g, hist = fit_unseen(model, ex.body, ex.gt_points, "wrap",
                                 FitConfig(iters=6))
            outs.append((g.data.copy(), hist))
        np.testing.assert_array_equal(outs[0][0], outs[1][0])
        assert outs[0][1] == outs[1][1]


class TestEvaluateAnimate:
    def test_evaluate_covers_known_outfits(self, trained, dataset):
        model, _, _ = trained
        records = evaluate(model, dataset, split="test")
        test_rows = [e for e in dataset.rows(split="test")
                     if e.outfit in model.garments]
        assert len(records) == len(test_rows)
        assert all(isinstance(r, EvalRecord) for r in records)
        assert all(np.isfinite(r.chamfer) and r.chamfer >= 0.0
                   for r in records)
        assert {r.outfit for r in records} <= set(model.garments)

    def test_evaluate_outfit_filter(self, trained, dataset):
        model, _, _ = trained
        records = evaluate(model, dataset, split="test", outfits=["tight"])
        assert records and all(r.outfit == "tight" for r in records)

    def test_evaluate_empty_selection(self, trained, dataset):
        model, _, _ = trained
        with pytest.raises(ValueError, match="nothing to evaluate"):
            evaluate(model, dataset, split="nope")

    def test_animate_world_frame(self, trained, dataset, dataset_dir):
        # chamfer against the raw world cloud must match the normalized-frame
        # chamfer: animation only re-applies the rigid root motion
        model, _, _ = trained
        ex = dataset.rows(outfit="tight", split="test")[0]
        (pts_world, nrm_world), = animate(model, "tight", [ex])
        raw_pts, _ = read_ply(os.path.join(
            dataset_dir, "clouds", "tight", ex.name + ".ply"))
        d_world = chamfer_l2_value(pts_world, raw_pts)
        pts_norm, _, _ = model.generate(ex.body, "tight")
        d_norm = chamfer_l2_value(pts_norm, np.asarray(ex.gt_points))
        assert d_world == pytest.approx(d_norm, rel=1e-5)
        np.testing.assert_allclose(
            np.linalg.norm(nrm_world, axis=1), 1.0, atol=1e-5)

    def test_animate_batch(self, trained, dataset):
        model, _, _ = trained
        rows = dataset.rows(outfit="loose")[:3]
        out = animate(model, "loose", rows)
        assert len(out) == 3
        n_queries = model.generate(rows[0].body, "loose")[0].shape[0]
        for pts, nrm in out:
            assert pts.shape == (n_queries, 3) and nrm.shape == (n_queries, 3)


def chamfer_l2_value(a, b):
    """Scalar symmetric chamfer between two raw float clouds."""
    a64 = np.asarray(a, dtype=np.float64)
    b64 = np.asarray(b, dtype=np.float64)
    _, d_ab = NNIndex(b64).query(a64)
    _, d_ba = NNIndex(a64).query(b64)
    return float(d_ab.mean() + d_ba.mean())
