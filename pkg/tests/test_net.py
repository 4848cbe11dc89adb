"""Model architecture tests: shapes, checkpoint fidelity, mode semantics."""

import numpy as np
import pytest

from pointdrape.body import PosedBody, Pose, default_skeleton
from pointdrape.engine.tensor import DimensionError
from pointdrape.net import (
    DrapeModel,
    ModelConfig,
    PRESETS,
    load_model,
    save_model,
)


@pytest.fixture(scope="module")
def desk_cfg():
    return ModelConfig.from_preset("desk")


@pytest.fixture(scope="module")
def desk_model(desk_cfg):
    m = DrapeModel(desk_cfg, seed=7)
    m.add_garment("tight")
    m.add_garment("loose")
    return m


@pytest.fixture(scope="module")
def rest_body():
    sk = default_skeleton()
    return PosedBody(sk, Pose.rest(sk))


class TestConfig:
    def test_presets_expose_model_and_train(self):
        for name in ("full", "desk"):
            assert set(PRESETS[name]) == {"model", "train"}
            ModelConfig.from_preset(name)  # validates

    def test_feature_dim(self):
        assert ModelConfig.from_preset("full").feature_dim == 130
        assert ModelConfig.from_preset("desk").feature_dim == 34

    def test_unknown_preset(self):
        with pytest.raises(ValueError, match="unknown preset"):
            ModelConfig.from_preset("pocket")

    def test_map_must_divide_by_encoder_depth(self):
        bad = ModelConfig(map_h=48, map_w=48, pose_channels=8,
                          garment_channels=8, enc_channels=(8, 8, 8, 8, 8),
                          dec_width=32, query_scale=2)
        with pytest.raises(ValueError, match="divisible"):
            bad.validate()

    def test_query_scale_positive(self):
        bad = ModelConfig(map_h=32, map_w=32, pose_channels=8,
                          garment_channels=8, enc_channels=(8, 8, 8, 8, 8),
                          dec_width=32, query_scale=0)
        with pytest.raises(ValueError, match="query_scale"):
            bad.validate()


class TestForwardShapes:
    def test_encoder_output_shape(self, desk_model):
        maps = np.random.default_rng(0).normal(size=(2, 3, 32, 32))
        feat = desk_model.encode_poses(maps.astype(np.float32), train=False)
        assert feat.shape == (2, 16, 32, 32)
        assert np.isfinite(feat.data).all()

    def test_smoother_preserves_shape(self, desk_model):
        out = desk_model.smooth_garments(["tight", "loose"], train=False)
        assert out.shape == (2, 16, 32, 32)

    def test_decoder_widened_layer_shapes(self, desk_model):
        entries = desk_model.state_entries()
        # input 16+16+2=34; the post-concat trunk layer sees 64+34=98
        assert entries["dec/l1/W"].shape == (34, 64)
        assert entries["dec/l5/W"].shape == (98, 64)
        assert entries["dec/disp/l8/W"].shape == (64, 3)
        assert entries["dec/normal/l8/W"].shape == (64, 3)

    def test_full_preset_widened_layer(self):
        model = DrapeModel(ModelConfig.from_preset("full"), seed=0)
        entries = model.state_entries()
        assert entries["dec/l5/W"].shape == (386, 256)

    def test_generate_cloud(self, desk_model, rest_body):
        pts, nrm, uv = desk_model.generate(rest_body, "tight")
        u_grid, _, _ = rest_body.dense_query_grid(32, 32, 4)
        assert pts.shape == nrm.shape == (u_grid.shape[0], 3)
        assert uv.shape == (u_grid.shape[0], 2)
        assert pts.shape[0] == 9600
        assert np.isfinite(pts).all() and np.isfinite(nrm).all()
        assert np.allclose(np.linalg.norm(nrm, axis=1), 1.0, atol=1e-5)

    def test_generate_deterministic(self, desk_model, rest_body):
        a = desk_model.generate(rest_body, "tight")
        b = desk_model.generate(rest_body, "tight")
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_outfits_decode_differently(self, desk_model, rest_body):
        a, _, _ = desk_model.generate(rest_body, "tight")
        b, _, _ = desk_model.generate(rest_body, "loose")
        assert not np.array_equal(a, b)

    def test_scale_densifies(self, desk_model, rest_body):
        a, _, _ = desk_model.generate(rest_body, "tight", scale=2)
        b, _, _ = desk_model.generate(rest_body, "tight", scale=4)
        assert b.shape[0] > 3.5 * a.shape[0]


class TestGarments:
    def test_duplicate_name_rejected(self, desk_cfg):
        m = DrapeModel(desk_cfg)
        m.add_garment("tight")
        with pytest.raises(ValueError, match="already"):
            m.add_garment("tight")

    def test_invalid_names_rejected(self, desk_cfg):
        m = DrapeModel(desk_cfg)
        for bad in ("", "a b", "a/b"):
            with pytest.raises(ValueError, match="invalid"):
                m.add_garment(bad)

    def test_init_is_seed_deterministic(self, desk_cfg):
        a = DrapeModel(desk_cfg, seed=3)
        b = DrapeModel(desk_cfg, seed=3)
        ga = a.add_garment("x")
        gb = b.add_garment("x")
        assert np.array_equal(ga.data, gb.data)
        assert ga.data.std() < 0.02  # small init keeps codes near the origin

    def test_params_split(self, desk_model):
        weights = desk_model.weight_params()
        garments = desk_model.garment_params()
        assert len(garments) == 2
        ids = {id(t) for t in weights}
        assert all(id(g) not in ids for g in garments)
        assert all(t.requires_grad for t in weights + garments)


class TestBatchNormModes:
    def test_train_updates_running_stats_eval_does_not(self, desk_cfg):
        model = DrapeModel(desk_cfg, seed=1)
        bn = next(iter(model.encoder.downs))[1]
        maps = np.random.default_rng(2).normal(size=(2, 3, 32, 32))
        before = bn.running_mean.copy()
        model.encode_poses(maps.astype(np.float32), train=False)
        assert np.array_equal(bn.running_mean, before)
        model.encode_poses(maps.astype(np.float32), train=True)
        assert not np.array_equal(bn.running_mean, before)


class TestCheckpoint:
    def test_round_trip_bitwise(self, desk_model, rest_body, tmp_path):
        path = tmp_path / "model.tarc"
        save_model(path, desk_model)
        back = load_model(path)
        assert back.cfg == desk_model.cfg
        orig = desk_model.state_entries()
        rest = back.state_entries()
        assert sorted(orig) == sorted(rest)
        for name in orig:
            assert np.array_equal(orig[name], rest[name]), name
        a = desk_model.generate(rest_body, "loose")
        b = back.generate(rest_body, "loose")
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_resave_is_byte_identical(self, desk_model, tmp_path):
        p1 = tmp_path / "a.tarc"
        p2 = tmp_path / "b.tarc"
        save_model(p1, desk_model)
        save_model(p2, load_model(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_missing_entry_rejected(self, desk_model, tmp_path):
        from pointdrape.engine.archive import read_archive, write_archive
        path = tmp_path / "model.tarc"
        save_model(path, desk_model)
        entries = read_archive(path)
        del entries["dec/l1/W"]
        bad = tmp_path / "missing.tarc"
        write_archive(bad, entries)
        with pytest.raises(DimensionError, match="missing"):
            load_model(bad)

    def test_shape_mismatch_rejected(self, desk_model, tmp_path):
        from pointdrape.engine.archive import read_archive, write_archive
        path = tmp_path / "model.tarc"
        save_model(path, desk_model)
        entries = read_archive(path)
        entries["dec/l1/b"] = np.zeros(7, dtype=np.float32)
        bad = tmp_path / "shape.tarc"
        write_archive(bad, entries)
        with pytest.raises(DimensionError, match="shape"):
            load_model(bad)

    def test_unrecognized_entry_rejected(self, desk_model, tmp_path):
        from pointdrape.engine.archive import read_archive, write_archive
        path = tmp_path / "model.tarc"
        save_model(path, desk_model)
        entries = read_archive(path)
        entries["stray/w"] = np.zeros(3, dtype=np.float32)
        bad = tmp_path / "extra.tarc"
        write_archive(bad, entries)
        with pytest.raises(DimensionError, match="unrecognized"):
            load_model(bad)
