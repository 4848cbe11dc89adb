"""Training, single-scan fitting, animation and evaluation drivers.

Every example is normalized before the model sees it: the root joint's
rotation and the global translation are moved out of the data (points get
R0^T (x - t0), the pose keeps its limb angles but loses root motion). The
decoder therefore never has to explain where the body is in the world, only
how the cloth hangs on it; outputs are mapped back through the stored root
transform when world-space clouds are needed.

Training optimizes network weights and the garment codes of the outfits in
the train split jointly. Fitting freezes the weights, keeps batch norms in
inference mode, and optimizes a single fresh garment code against one scan;
``animate`` then decodes that code under new poses.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, fields, replace

import numpy as np

from .body.skeleton import Pose, read_pose, read_skeleton, rotmat
from .body.surface import PosedBody
from .engine import ops
from .engine.optim import Adam
from .engine.tensor import Tensor, backprop, record
from .formats import parse_config, read_manifest, read_ply
from .losses import (
    EvalRecord,
    LossWeights,
    NNIndex,
    chamfer_l2,
    displacement_reg,
    eval_cloud,
    garment_reg,
    normal_consistency,
    total_loss,
)
from .net import PRESETS, save_model

__all__ = [
    "TrainConfig",
    "FitConfig",
    "normalize_pose",
    "normalize_points",
    "normalize_vectors",
    "denormalize_points",
    "denormalize_vectors",
    "Example",
    "Dataset",
    "train",
    "fit_unseen",
    "evaluate",
    "animate",
]


# ---------------------------------------------------------------------------
# configs


def _config_from_file(cls, preset_section, path):
    base = cls(**preset_section)
    schema = {}
    for f in fields(cls):
        kind = type(getattr(base, f.name))
        schema[f.name] = (kind, getattr(base, f.name))
    with open(path, "r", encoding="ascii") as fh:
        values = parse_config(fh.read(), schema, source=str(path))
    return replace(base, **values)


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    epochs: int
    batch_size: int
    seed: int = 0
    lam_data: float = 2.0e4
    lam_normal: float = 0.1
    lam_disp: float = 2.0e3
    lam_garment: float = 1.0
    normal_start: float = 0.625  # fraction of epochs before the normal term
    ckpt_every: int = 50

    def validate(self):
        if self.lr <= 0 or not np.isfinite(self.lr):
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1 or self.ckpt_every < 1:
            raise ValueError("epochs, batch_size and ckpt_every must be >= 1")
        if not 0.0 <= self.normal_start <= 1.0:
            raise ValueError("normal_start is a fraction of epochs")
        LossWeights(self.lam_data, self.lam_normal, self.lam_disp,
                    self.lam_garment).validate()
        return self

    @staticmethod
    def from_preset(name, **overrides):
        base = dict(PRESETS[name]["train"])
        base.pop("gt_samples")  # dataset generation parameter, not training
        base.update(overrides)
        return TrainConfig(**base).validate()

    @staticmethod
    def from_file(preset, path):
        base = dict(PRESETS[preset]["train"])
        base.pop("gt_samples")
        return _config_from_file(TrainConfig, base, path).validate()


@dataclass(frozen=True)
class FitConfig:
    iters: int = 500
    lr: float = 1.0e-3
    lam_data: float = 2.0e4
    lam_disp: float = 2.0e3
    lam_garment: float = 1.0
    abort_factor: float = 10.0  # stop if the loss blows past its start

    def validate(self):
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.lr <= 0 or not np.isfinite(self.lr):
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.abort_factor <= 1.0:
            raise ValueError("abort_factor must exceed 1")
        LossWeights(self.lam_data, 0.0, self.lam_disp,
                    self.lam_garment).validate()
        return self

    @staticmethod
    def from_file(path):
        return _config_from_file(FitConfig, {}, path).validate()


# ---------------------------------------------------------------------------
# root normalization


def _root_index(skeleton):
    roots = [i for i, j in enumerate(skeleton.joints) if j.parent < 0]
    return roots[0]


def normalize_pose(skeleton, pose):
    """Split a pose into (pose without root motion, R0, t0)."""
    root = _root_index(skeleton)
    r0 = rotmat(pose.rotations[root])
    t0 = pose.translation.copy()
    norm = pose.copy()
    norm.translation[:] = 0.0
    norm.rotations[root] = 0.0
    return norm, r0, t0


def normalize_points(r0, t0, pts):
    return (np.asarray(pts) - t0) @ r0


def normalize_vectors(r0, vecs):
    return np.asarray(vecs) @ r0


def denormalize_points(r0, t0, pts):
    return np.asarray(pts) @ r0.T + t0


def denormalize_vectors(r0, vecs):
    return np.asarray(vecs) @ r0.T


# ---------------------------------------------------------------------------
# dataset


class Example:
    """One (outfit, pose) pair, loaded and normalized."""

    def __init__(self, name, outfit, split, pose, body, r0, t0,
                 gt_points, gt_normals):
        self.name = name
        self.outfit = outfit
        self.split = split
        self.pose = pose          # original world pose
        self.body = body          # PosedBody of the normalized pose
        self.root_rot = r0
        self.root_t = t0
        self.gt_points = gt_points    # normalized frame, float64
        self.gt_normals = gt_normals
        self._nn = None

    @property
    def nn(self):
        if self._nn is None:
            self._nn = NNIndex(self.gt_points)
        return self._nn


class Dataset:
    """A generated benchmark tree: skeleton, poses, clouds, manifest."""

    def __init__(self, root):
        self.root = str(root)
        manifest = read_manifest(os.path.join(self.root, "manifest.txt"))
        self.skeleton = read_skeleton(os.path.join(self.root, manifest.skeleton))
        self.outfits = list(manifest.outfits)
        self.examples = []
        bodies = {}  # pose_path -> (pose, body, r0, t0); shared across outfits
        for outfit, pose_path, cloud_path, split in manifest.examples:
            if pose_path not in bodies:
                pose = read_pose(os.path.join(self.root, pose_path), self.skeleton)
                norm, r0, t0 = normalize_pose(self.skeleton, pose)
                bodies[pose_path] = (pose, PosedBody(self.skeleton, norm), r0, t0)
            pose, body, r0, t0 = bodies[pose_path]
            pts, nrm = read_ply(os.path.join(self.root, cloud_path))
            name = os.path.splitext(os.path.basename(pose_path))[0]
            self.examples.append(Example(
                name, outfit, split, pose, body, r0, t0,
                normalize_points(r0, t0, pts.astype(np.float64)),
                normalize_vectors(r0, nrm.astype(np.float64))))

    def rows(self, outfit=None, split=None, name=None):
        return [e for e in self.examples
                if (outfit is None or e.outfit == outfit)
                and (split is None or e.split == split)
                and (name is None or e.name == name)]

    def train_outfits(self):
        """Outfit names that have at least one training example."""
        return sorted({e.outfit for e in self.examples if e.split == "train"})


# ---------------------------------------------------------------------------
# training


def _mean_terms(terms):
    if len(terms) == 1:
        return terms[0]
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return ops.scale(total, 1.0 / len(terms))


def _decode_batch(model, batch, lam_normal, train):
    """Forward pass for a batch of examples; returns the four loss terms.

    The decoder runs once over the concatenated query rows of the whole
    batch so its batch norms see the same distribution every step; rows are
    sliced back per example for the point losses.
    """
    cfg = model.cfg
    h, w, s = cfg.map_h, cfg.map_w, cfg.query_scale
    maps = np.stack([ex.body.positional_map(h, w)[0] for ex in batch])
    feats = model.encode_poses(maps.astype(np.float32), train)
    names = sorted({ex.outfit for ex in batch})
    slot = {n: i for i, n in enumerate(names)}
    gsm = model.smooth_garments(names, train)

    supports = [ex.body.dense_support(h, w, s) for ex in batch]
    codes = [model.query_codes(ops.select0(feats, b),
                               ops.select0(gsm, slot[ex.outfit]), sup, uv)
             for b, (ex, (sup, uv)) in enumerate(zip(batch, supports))]
    disp_all, normal_all = model.decoder(ops.concat(codes, axis=0), train)

    data_terms, normal_terms = [], []
    offset = 0
    for ex, (sup, _uv), code in zip(batch, supports, codes):
        n = code.shape[0]
        disp = ops.slice_rows(disp_all, offset, offset + n)
        rot = sup.rotation.astype(np.float32)
        pts = ops.add(ops.rigid_rotate(rot, disp),
                      Tensor(sup.position.astype(np.float32)))
        term, idx_fwd, _ = chamfer_l2(pts, ex.nn)
        data_terms.append(term)
        if lam_normal != 0.0:
            nrm = ops.rigid_rotate(
                rot, ops.slice_rows(normal_all, offset, offset + n))
            normal_terms.append(
                normal_consistency(nrm, ex.gt_normals, idx_fwd))
        offset += n

    l_data = _mean_terms(data_terms)
    l_normal = _mean_terms(normal_terms) if normal_terms else None
    l_disp = displacement_reg(disp_all)
    l_garment = garment_reg(model.garment_params())
    return l_data, l_normal, l_disp, l_garment


def train(model, dataset, cfg, log=None, ckpt_path=None):
    """Optimize weights and garment codes on the dataset's train split.

    Returns per-epoch history dicts. Raises if the loss ever goes
    non-finite rather than writing a poisoned checkpoint.
    """
    cfg.validate()
    rows = dataset.rows(split="train")
    if not rows:
        raise ValueError("dataset has no training examples")
    missing = {ex.outfit for ex in rows} - set(model.garments)
    if missing:
        raise ValueError(f"model has no garment code for {sorted(missing)}")

    params = model.weight_params() + model.garment_params()
    opt = Adam(params, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    normal_start = int(np.floor(cfg.normal_start * cfg.epochs))
    history = []
    t0 = time.time()
    for epoch in range(cfg.epochs):
        lam_normal = cfg.lam_normal if epoch >= normal_start else 0.0
        weights = LossWeights(cfg.lam_data, lam_normal, cfg.lam_disp,
                              cfg.lam_garment)
        perm = rng.permutation(len(rows))
        sums = np.zeros(5)
        n_steps = 0
        for start in range(0, len(perm), cfg.batch_size):
            batch = [rows[i] for i in perm[start:start + cfg.batch_size]]
            opt.zero_grad()
            with record() as tape:
                l_d, l_n, l_rd, l_rg = _decode_batch(
                    model, batch, lam_normal, train=True)
                total = total_loss(l_d, l_n, l_rd, l_rg, weights)
                backprop(total, tape)
            opt.step()
            step_vals = (float(l_d.data),
                         float(l_n.data) if l_n is not None else 0.0,
                         float(l_rd.data), float(l_rg.data), float(total.data))
            if not np.isfinite(step_vals[4]):
                raise RuntimeError(
                    f"loss went non-finite at epoch {epoch}; aborting before "
                    f"anything is saved")
            sums += step_vals
            n_steps += 1
        means = sums / n_steps
        history.append({"epoch": epoch, "data": means[0], "normal": means[1],
                        "disp": means[2], "garment": means[3],
                        "total": means[4]})
        if log:
            log(f"epoch {epoch:4d}  data {means[0]:.6e}  normal "
                f"{means[1]:.6e}  disp {means[2]:.6e}  garment "
                f"{means[3]:.6e}  total {means[4]:.6e}  "
                f"[{time.time() - t0:.1f}s]")
        if ckpt_path and (epoch + 1) % cfg.ckpt_every == 0:
            save_model(ckpt_path, model)
    if ckpt_path:
        save_model(ckpt_path, model)
    return history


# ---------------------------------------------------------------------------
# fitting an unseen outfit


def fit_unseen(model, body, scan_points, name, cfg, log=None):
    """Fit a fresh garment code to one normalized scan; weights stay frozen.

    The code starts at zero (the regularizer's fixed point), the encoder
    runs once since the pose never changes, and batch norms stay in
    inference mode throughout. Returns (garment tensor, per-iteration loss).
    """
    cfg.validate()
    if name in model.garments:
        raise ValueError(f"model already has a garment named {name!r}")
    g = model.add_garment(name, init_std=0.0)
    mcfg = model.cfg
    h, w, s = mcfg.map_h, mcfg.map_w, mcfg.query_scale

    pos, _ = body.positional_map(h, w)
    feat = model.encode_poses(pos.astype(np.float32)[None], train=False)
    feat0 = ops.select0(feat, 0)
    sup, uv = body.dense_support(h, w, s)
    nn = NNIndex(np.asarray(scan_points, dtype=np.float64))
    weights = LossWeights(cfg.lam_data, 0.0, cfg.lam_disp, cfg.lam_garment)

    opt = Adam([g], cfg.lr)
    history = []
    for it in range(cfg.iters):
        opt.zero_grad()
        with record() as tape:
            gsm = model.smoother(ops.reshape(g, (1,) + g.shape))
            codes = model.query_codes(feat0, ops.select0(gsm, 0), sup, uv)
            _, _, disp = model.decode(codes, sup, train=False)
            pts = ops.add(ops.rigid_rotate(sup.rotation.astype(np.float32),
                                           disp),
                          Tensor(sup.position.astype(np.float32)))
            l_d, _, _ = chamfer_l2(pts, nn)
            total = total_loss(l_d, None, displacement_reg(disp),
                               garment_reg([g]), weights)
            backprop(total, tape)
        opt.step()
        val = float(total.data)
        if not np.isfinite(val):
            raise RuntimeError(f"fit loss went non-finite at iteration {it}")
        history.append(val)
        if val > cfg.abort_factor * history[0]:
            raise RuntimeError(
                f"fit diverged at iteration {it}: loss {val:.3e} vs initial "
                f"{history[0]:.3e}")
        if log and (it % 50 == 0 or it == cfg.iters - 1):
            log(f"fit iter {it:4d}  data {float(l_d.data):.6e}  "
                f"total {val:.6e}")
    for p in model.weight_params():
        p.grad = None  # backprop touched them; the values never moved
    return g, history


# ---------------------------------------------------------------------------
# evaluation and animation


def evaluate(model, dataset, split="test", outfits=None, scale=None):
    """Per-example chamfer and normal metrics in the normalized frame.

    Only outfits the model has a code for are evaluated; pass ``outfits``
    to narrow further.
    """
    rows = [ex for ex in dataset.examples
            if ex.split == split and ex.outfit in model.garments
            and (outfits is None or ex.outfit in outfits)]
    if not rows:
        raise ValueError(f"nothing to evaluate for split {split!r}")
    records = []
    for ex in rows:
        pts, nrm, _ = model.generate(ex.body, ex.outfit, scale=scale)
        ch, nm = eval_cloud(pts, nrm, ex.gt_points, ex.gt_normals, ex.nn)
        records.append(EvalRecord(ex.outfit, ex.name, ch, nm))
    return records


def animate(model, garment_name, examples, scale=None):
    """Decode the garment under each example's pose, in world coordinates.

    Returns [(points, normals)] aligned with ``examples``.
    """
    out = []
    for ex in examples:
        pts, nrm, _ = model.generate(ex.body, garment_name, scale=scale)
        out.append((denormalize_points(ex.root_rot, ex.root_t, pts),
                    denormalize_vectors(ex.root_rot, nrm)))
    return out
