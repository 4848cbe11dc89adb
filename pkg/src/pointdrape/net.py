"""The drape model: pose encoder, garment features, shared shape decoder.

The model predicts, for any point u on the body's UV manifold, a displacement
vector r(u) and a unit normal, both expressed in the owning segment's local
frame. A world point is rot(u) @ r(u) + p(u) with rot and p supplied by the
body. Pose enters through a UNet over the body's positional map; the identity
of an outfit lives entirely in a per-outfit feature tensor that is optimized
alongside the weights (and alone, when fitting an unseen outfit), so one
decoder serves every outfit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ops
from .engine.archive import read_archive, write_archive
from .engine.layers import Affine, BatchNorm, Conv2d, ConvTranspose2d
from .engine.tensor import DimensionError, Tensor

__all__ = ["ModelConfig", "PRESETS", "PoseEncoder", "FeatureSmoother",
           "ShapeDecoder", "DrapeModel", "save_model", "load_model"]


@dataclass(frozen=True)
class ModelConfig:
    map_h: int = 128
    map_w: int = 128
    pose_channels: int = 64
    garment_channels: int = 64
    enc_channels: tuple = (64, 128, 256, 256, 256, 256, 256)
    dec_width: int = 256
    query_scale: int = 2  # per-side densification of the decode grid

    @property
    def feature_dim(self):
        # per-query decoder input: pose code + garment code + (u, v)
        return self.pose_channels + self.garment_channels + 2

    def validate(self):
        depth = len(self.enc_channels)
        if self.map_h % (1 << depth) or self.map_w % (1 << depth):
            raise ValueError(
                f"map {self.map_h}x{self.map_w} not divisible by 2^{depth} "
                f"encoder levels")
        if self.query_scale < 1:
            raise ValueError("query_scale must be >= 1")
        return self

    @staticmethod
    def from_preset(name):
        try:
            p = PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
        return ModelConfig(**p["model"]).validate()


# Two standard sizes. "full" is the reference configuration: 128x128 maps,
# 64-channel features, the (256, 256, 256, 386, 256, 256, 256, 3) decoder.
# "desk" shrinks every width so the whole train/fit/animate cycle runs on a
# single CPU core in minutes; the architecture is otherwise identical.
PRESETS = {
    "full": {
        "model": dict(map_h=128, map_w=128, pose_channels=64,
                      garment_channels=64,
                      enc_channels=(64, 128, 256, 256, 256, 256, 256),
                      dec_width=256, query_scale=2),
        "train": dict(lr=3.0e-4, epochs=400, batch_size=4, gt_samples=40000),
    },
    "desk": {
        "model": dict(map_h=32, map_w=32, pose_channels=16,
                      garment_channels=16,
                      enc_channels=(16, 32, 64, 64, 64),
                      dec_width=64, query_scale=4),
        "train": dict(lr=1.0e-3, epochs=150, batch_size=4, gt_samples=20000),
    },
}


class PoseEncoder:
    """UNet over the positional map; output is pixel-aligned pose features.

    Down blocks are [conv(3, stride 2), batchnorm, leaky-relu 0.2]; up blocks
    are [relu, transposed conv(4, stride 2), batchnorm] with skip
    concatenation from the matching resolution, and the final block carries
    no batchnorm.
    """

    def __init__(self, cfg, rng):
        chans = cfg.enc_channels
        depth = len(chans)
        self.downs = []
        c_prev = 3
        for i, c in enumerate(chans):
            conv = Conv2d(c_prev, c, 3, 2, 1, rng, f"enc/down{i}/conv")
            bn = BatchNorm(c, f"enc/down{i}/bn")
            self.downs.append((conv, bn))
            c_prev = c
        self.ups = []
        for i in range(depth):
            c_in = chans[-1] if i == 0 else 2 * chans[depth - 1 - i]
            last = i == depth - 1
            c_out = cfg.pose_channels if last else chans[depth - 2 - i]
            tconv = ConvTranspose2d(c_in, c_out, 4, 2, 1, rng, f"enc/up{i}/conv")
            bn = None if last else BatchNorm(c_out, f"enc/up{i}/bn")
            self.ups.append((tconv, bn))

    def __call__(self, pos_maps, train):
        """(B, 3, H, W) positional maps -> (B, Cp, H, W) pose features."""
        h = pos_maps
        skips = []
        for conv, bn in self.downs:
            h = ops.leaky_relu(bn(conv(h), train), 0.2)
            skips.append(h)
        u = skips[-1]
        for i, (tconv, bn) in enumerate(self.ups):
            if i > 0:
                u = ops.concat([u, skips[len(self.downs) - 1 - i]], axis=1)
            u = tconv(ops.relu(u))
            if bn is not None:
                u = bn(u, train)
        return u

    def modules(self):
        for conv, bn in self.downs:
            yield conv
            yield bn
        for tconv, bn in self.ups:
            yield tconv
            if bn is not None:
                yield bn


class FeatureSmoother:
    """Three 5x5 convs over the garment tensor before decoding.

    Spatially smooths the auto-decoded features; leaky activations between
    the convs, none after the last so features stay unbounded.
    """

    def __init__(self, cfg, rng):
        c = cfg.garment_channels
        self.convs = [Conv2d(c, c, 5, 1, 2, rng, f"smoother/conv{i}")
                      for i in range(3)]

    def __call__(self, g):
        """(B, Cg, H, W) -> (B, Cg, H, W)."""
        h = self.convs[0](g)
        h = self.convs[1](ops.leaky_relu(h, 0.2))
        return self.convs[2](ops.leaky_relu(h, 0.2))

    def modules(self):
        return iter(self.convs)


class ShapeDecoder:
    """Shared per-point MLP with an input skip and two output heads.

    Trunk of five layers (the input re-enters by concatenation after the
    fourth, giving the widened middle layer), then displacement and normal
    heads of three layers each branch off. Every layer except the two head
    outputs is [affine, batchnorm, softplus(beta=20)]. The normal head is
    normalized to unit length.
    """

    BETA = 20.0

    def __init__(self, cfg, rng):
        d_in = cfg.feature_dim
        width = cfg.dec_width
        dims = [(d_in, width), (width, width), (width, width), (width, width),
                (width + d_in, width)]
        self.trunk = []
        for i, (a, b) in enumerate(dims):
            self.trunk.append((Affine(a, b, rng, f"dec/l{i + 1}"),
                               BatchNorm(b, f"dec/l{i + 1}/bn")))
        self.heads = {}
        for head in ("disp", "normal"):
            layers = [
                (Affine(width, width, rng, f"dec/{head}/l6"),
                 BatchNorm(width, f"dec/{head}/l6/bn")),
                (Affine(width, width, rng, f"dec/{head}/l7"),
                 BatchNorm(width, f"dec/{head}/l7/bn")),
                (Affine(width, 3, rng, f"dec/{head}/l8"), None),
            ]
            self.heads[head] = layers
        # shrink the displacement output at init so predictions start on the
        # bare body instead of meters away; the normal head keeps full scale
        # because its output is normalized
        self.heads["disp"][-1][0].w.data *= 0.01

    def __call__(self, z, train):
        """(N, feature_dim) codes -> displacement (N, 3), unit normal (N, 3)."""
        h = z
        for i, (aff, bn) in enumerate(self.trunk):
            if i == 4:
                h = ops.concat([h, z], axis=1)
            h = ops.softplus(bn(aff(h), train), self.BETA)
        outs = []
        for head in ("disp", "normal"):
            u = h
            for aff, bn in self.heads[head]:
                u = aff(u)
                if bn is not None:
                    u = ops.softplus(bn(u, train), self.BETA)
            outs.append(u)
        return outs[0], ops.normalize_rows(outs[1])

    def modules(self):
        for aff, bn in self.trunk:
            yield aff
            yield bn
        for head in ("disp", "normal"):
            for aff, bn in self.heads[head]:
                yield aff
                if bn is not None:
                    yield bn


class DrapeModel:
    """Everything learnable, plus the per-outfit garment tensors."""

    def __init__(self, cfg, seed=0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = PoseEncoder(cfg, rng)
        self.smoother = FeatureSmoother(cfg, rng)
        self.decoder = ShapeDecoder(cfg, rng)
        self.garments = {}  # outfit name -> Tensor (Cg, H, W)
        self._garment_seed = seed

    # --- garment tensors ---------------------------------------------------

    def add_garment(self, name, init_std=0.01, rng=None):
        if name in self.garments:
            raise ValueError(f"garment {name!r} already registered")
        if "/" in name or " " in name or not name:
            raise ValueError(f"invalid garment name {name!r}")
        if rng is None:
            rng = np.random.default_rng(
                self._garment_seed + 7919 * (len(self.garments) + 1))
        cfg = self.cfg
        data = init_std * rng.standard_normal(
            (cfg.garment_channels, cfg.map_h, cfg.map_w))
        t = Tensor(data.astype(np.float32), requires_grad=True,
                   name=f"G/{name}")
        self.garments[name] = t
        return t

    # --- parameter access --------------------------------------------------

    def modules(self):
        yield from self.encoder.modules()
        yield from self.smoother.modules()
        yield from self.decoder.modules()

    def weight_params(self):
        """Network weights, excluding garment tensors, in a fixed order."""
        out = []
        for m in self.modules():
            out.extend(t for _, t in m.named_params())
        return out

    def garment_params(self):
        return list(self.garments.values())

    def state_entries(self):
        """Name -> array for every weight, stat, and garment tensor."""
        out = {}
        for m in self.modules():
            for name, arr in m.state_entries():
                if name in out:
                    raise ValueError(f"duplicate state entry {name!r}")
                out[name] = arr
        for name, t in self.garments.items():
            out[f"G/{name}"] = t.data
        return out

    # --- forward pieces ----------------------------------------------------

    def encode_poses(self, pos_maps, train):
        """(B, 3, H, W) float32 ndarray -> (B, Cp, H, W) feature Tensor."""
        return self.encoder(Tensor(np.asarray(pos_maps, dtype=np.float32)),
                            train)

    def smooth_garments(self, names, train):
        """Smoothed garment features for the named outfits: (len, Cg, H, W)."""
        stack = ops.concat(
            [ops.reshape(self.garments[n],
                         (1,) + self.garments[n].shape) for n in names],
            axis=0) if len(names) > 1 else ops.reshape(
                self.garments[names[0]],
                (1,) + self.garments[names[0]].shape)
        return self.smoother(stack)

    def query_codes(self, pose_feat, garment_feat, sup, uv):
        """Per-query decoder input: sampled features plus UV coordinates.

        pose_feat: (Cp, H, W) Tensor; garment_feat: (Cg, H, W) Tensor;
        sup: QuerySupport for the queries; uv: (N, 2) float ndarray.
        """
        fmap = ops.concat([pose_feat, garment_feat], axis=0)
        rows = ops.bilinear_sample(fmap, sup.i0, sup.j0,
                                   sup.fi.astype(np.float32),
                                   sup.fj.astype(np.float32))
        coords = Tensor(np.asarray(uv, dtype=np.float32))
        return ops.concat([rows, coords], axis=1)

    def decode(self, codes, sup, train):
        """codes (N, D) -> world points, world unit normals, local disp."""
        disp, normal = self.decoder(codes, train)
        rot = sup.rotation.astype(np.float32)
        world_pts = ops.add(ops.rigid_rotate(rot, disp),
                            Tensor(sup.position.astype(np.float32)))
        world_nrm = ops.rigid_rotate(rot, normal)
        return world_pts, world_nrm, disp

    def generate(self, body, garment_name, scale=None, train=False):
        """Decode a full cloud for one body pose and one known outfit.

        Returns (points (N, 3) f32, normals (N, 3) f32, uv (N, 2) f64), all
        plain arrays; no gradients are recorded.
        """
        cfg = self.cfg
        h, w = cfg.map_h, cfg.map_w
        s = cfg.query_scale if scale is None else int(scale)
        pos, _ = body.positional_map(h, w)
        feat = self.encode_poses(pos.astype(np.float32)[None], train)
        gsm = self.smooth_garments([garment_name], train)
        sup, uv = body.dense_support(h, w, s)
        codes = self.query_codes(ops.select0(feat, 0), ops.select0(gsm, 0),
                                 sup, uv)
        pts, nrm, _ = self.decode(codes, sup, train)
        return pts.data.copy(), nrm.data.copy(), uv.copy()


# --- checkpoints --------------------------------------------------------------


def save_model(path, model):
    entries = {
        "config/map_h": np.float32(model.cfg.map_h),
        "config/map_w": np.float32(model.cfg.map_w),
        "config/pose_channels": np.float32(model.cfg.pose_channels),
        "config/garment_channels": np.float32(model.cfg.garment_channels),
        "config/dec_width": np.float32(model.cfg.dec_width),
        "config/query_scale": np.float32(model.cfg.query_scale),
        "config/enc_channels": np.asarray(model.cfg.enc_channels, np.float32),
    }
    entries.update(model.state_entries())
    # canonical name order makes saves byte-identical regardless of the
    # order garments were registered in
    write_archive(path, dict(sorted(entries.items())))


def load_model(path):
    """Rebuild a model (architecture and all values) from an archive."""
    entries = read_archive(path)
    try:
        cfg = ModelConfig(
            map_h=int(entries["config/map_h"]),
            map_w=int(entries["config/map_w"]),
            pose_channels=int(entries["config/pose_channels"]),
            garment_channels=int(entries["config/garment_channels"]),
            enc_channels=tuple(int(c) for c in entries["config/enc_channels"]),
            dec_width=int(entries["config/dec_width"]),
            query_scale=int(entries["config/query_scale"]),
        )
    except KeyError as exc:
        raise DimensionError(f"{path}: checkpoint missing {exc}") from exc
    model = DrapeModel(cfg)
    for name in sorted(k[2:] for k in entries if k.startswith("G/")):
        model.add_garment(name)
    consumed = {k for k in entries if k.startswith("config/")}
    for m in model.modules():
        for name, arr in m.state_entries():
            if name not in entries:
                raise DimensionError(f"{path}: checkpoint missing {name!r}")
            if entries[name].shape != arr.shape:
                raise DimensionError(
                    f"{path}: {name!r} has shape {entries[name].shape}, "
                    f"model needs {arr.shape}")
            arr[...] = entries[name]
            consumed.add(name)
    for name, t in model.garments.items():
        t.data[...] = entries[f"G/{name}"]
        consumed.add(f"G/{name}")
    extra = set(entries) - consumed
    if extra:
        raise DimensionError(f"{path}: unrecognized entries {sorted(extra)}")
    return model
