"""Set variational autoencoder over cell particles.

The encoder enriches each particle with local surface context
(cross-attention against the model's point cloud), topological context
(graph convolutions over the incidence diagram), and global context
(self-attention), then emits per-particle Gaussian posteriors.

Decoding happens in two phases: the first recovers the discrete
structure (types, anchors, pairwise incidence), the second realizes
geometry compositionally, with edge curves anchored exactly at their
endpoint vertices and face patches generated inside a predicted rigid
frame conditioned on the boundary particles.

During training the second phase is teacher-forced with ground-truth
incidence and anchors; at inference both phases run from predictions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .cells import (
    EDGE,
    FACE,
    VERTEX,
    Particle,
    ParticleSet,
    RestoredGeometry,
    RestoreResult,
    restore_complex,
)
from .dataio import PaddedSample
from .geometry import CanonicalFrame, bernstein3, bezier_from_relative_params
from .tensor import Tensor


class VaeError(RuntimeError):
    pass


@dataclass
class VaeConfig:
    latent_dim: int = 16
    dim: int = 128
    heads: int = 4
    enc_layers: int = 4
    dec_layers: int = 4
    fpe_bands: int = 8
    lpe_k: int = 8
    type_emb_dim: int = 16
    encoder_cloud_points: int = 512
    grid_size: int = 16
    curve_samples: int = 32
    budget: int = 64
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    kl_weight: float = 2e-6
    link_hidden: int = 128
    edge_hidden: int = 128
    pose_hidden: int = 64
    pointnet_hidden: int = 64
    surface_hidden: int = 64
    use_gt_frames: bool = False

    @property
    def fpe_dim(self) -> int:
        return 6 * self.fpe_bands + 3


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class Encoder(nn.Module):
    def __init__(self, cfg: VaeConfig, rng: np.random.Generator):
        d = cfg.dim
        self.cross = nn.CrossAttentionBlock(d, cfg.heads, rng,
                                            q_dim=cfg.fpe_dim, kv_dim=cfg.fpe_dim)
        self.type_emb = nn.Embedding(3, cfg.type_emb_dim, rng)
        gcn_in = d + 3 + cfg.type_emb_dim + cfg.lpe_k + 9
        self.gcn1 = nn.GcnLayer(gcn_in, d, rng)
        self.gcn2 = nn.GcnLayer(d, d, rng)
        self.blocks = [nn.TransformerBlock(d, cfg.heads, rng) for _ in range(cfg.enc_layers)]
        self.norm = nn.RMSNorm(d)
        self.head = nn.Linear(d, 2 * cfg.latent_dim, rng)
        # start with a tight posterior so sampling noise does not drown
        # the reconstruction signal early in training
        self.head.bias.data[cfg.latent_dim:] = -4.0
        self.latent_dim = cfg.latent_dim

    def __call__(self, fpe_anchor, fpe_cloud, anchors, type_idx, lpe, rot_flat, adj):
        f_local = self.cross(T.constant(fpe_anchor), T.constant(fpe_cloud))
        feats = T.concat([
            f_local,
            T.constant(anchors),
            self.type_emb(type_idx),
            T.constant(lpe),
            T.constant(rot_flat),
        ], axis=-1)
        x = self.gcn2(self.gcn1(feats, adj), adj)
        for blk in self.blocks:
            x = blk(x)
        stats = self.head(self.norm(x))
        mu, logsigma = T.split(stats, [self.latent_dim, self.latent_dim], axis=-1)
        return mu, logsigma


class Decoder(nn.Module):
    def __init__(self, cfg: VaeConfig, rng: np.random.Generator):
        d = cfg.dim
        self.in_proj = nn.Linear(cfg.latent_dim, d, rng)
        self.blocks = [nn.TransformerBlock(d, cfg.heads, rng) for _ in range(cfg.dec_layers)]
        self.norm = nn.RMSNorm(d)
        self.type_head = nn.Linear(d, 3, rng)
        self.anchor_head = nn.Linear(d, 3, rng)
        self.link_mlp = nn.MLP([2 * d, cfg.link_hidden, 1], rng)
        self.edge_mlp = nn.MLP([3 * d, cfg.edge_hidden, 8], rng)
        self.pose_mlp = nn.MLP([d, cfg.pose_hidden, 9], rng)
        self.pointnet = nn.MLP([3 + d, cfg.pointnet_hidden, cfg.pointnet_hidden], rng)
        self.surf_mlp = nn.MLP([2 + d + cfg.pointnet_hidden,
                                cfg.surface_hidden, cfg.surface_hidden, 3], rng)

    def features(self, z: Tensor) -> Tensor:
        x = self.in_proj(z)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def link_logits_pairs(self, feats_flat: Tensor, idx_i, idx_j) -> Tensor:
        """Symmetric pairwise logits for the given flat index pairs."""
        zi = T.take(feats_flat, idx_i)
        zj = T.take(feats_flat, idx_j)
        ij = self.link_mlp(T.concat([zi, zj], axis=-1))
        ji = self.link_mlp(T.concat([zj, zi], axis=-1))
        return T.mul(T.add(ij, ji), 0.5)


class Ccvae(nn.Module):
    def __init__(self, cfg: VaeConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)


# ---------------------------------------------------------------------------
# per-sample training tables (cached numpy, model-independent)
# ---------------------------------------------------------------------------

@dataclass
class TrainSample:
    n_slots: int
    fpe_anchor: np.ndarray  # (N, fpe)
    fpe_cloud: np.ndarray  # (P', fpe)
    anchors: np.ndarray  # (N, 3)
    type_idx: np.ndarray  # (N,)
    type_onehot: np.ndarray  # (N, 3)
    lpe: np.ndarray
    rot_flat: np.ndarray
    adj: np.ndarray  # (N, N)
    pair_i: np.ndarray  # (M,) slot indices of link candidates
    pair_j: np.ndarray
    pair_target: np.ndarray  # (M,)
    edge_u: np.ndarray  # (E,) node indices, canonical order
    edge_e: np.ndarray
    edge_v: np.ndarray
    edge_gt: np.ndarray  # (E, S, 3) curve samples aligned to canonical order
    face_f: np.ndarray  # (F,)
    face_children: np.ndarray  # (F, C) padded with -1
    face_child_mask: np.ndarray  # (F, C)
    face_gt_grid: np.ndarray  # (F, G*G, 3)
    face_gt_pose: np.ndarray  # (F, 12) flattened R then t
    dup_mask: np.ndarray  # (N,)


def _canonical_pair(anchors: np.ndarray, a: int, b: int):
    ka = tuple(anchors[a])
    kb = tuple(anchors[b])
    return (a, b) if ka <= kb else (b, a)


def prepare_sample(padded: PaddedSample, cfg: VaeConfig) -> TrainSample:
    """Precompute every model-independent array a training step needs."""
    diagram = padded.diagram
    rec = padded.record
    n = diagram.n
    slots = len(padded.src)
    types = padded.types
    anchors = padded.anchors

    cloud = rec.cloud
    stride = max(1, cloud.shape[0] // cfg.encoder_cloud_points)
    cloud_sub = cloud[::stride][:cfg.encoder_cloud_points]

    onehot = np.zeros((slots, 3))
    onehot[np.arange(slots), types] = 1.0

    # link candidates: unordered non-duplicate pairs of adjacent ranks
    pair_i, pair_j, target = [], [], []
    link = padded.link_target
    for i in range(n):
        for j in range(i + 1, n):
            if abs(int(types[i]) - int(types[j])) != 1:
                continue
            pair_i.append(i)
            pair_j.append(j)
            target.append(link[i, j])

    # teacher-forced edge table
    node_anchor = diagram.anchors()
    edge_u, edge_e, edge_v, edge_gt = [], [], [], []
    for eid in sorted(rec.complex.edges):
        e_node = diagram.node_of(EDGE, eid)
        va, vb = rec.complex.edges[eid].v
        u_node = diagram.node_of(VERTEX, va)
        v_node = diagram.node_of(VERTEX, vb)
        cu, cv = _canonical_pair(node_anchor, u_node, v_node)
        gt = rec.complex.edges[eid].curve.sample(cfg.curve_samples)
        if cu != u_node:  # canonical order reverses the stored direction
            gt = gt[::-1]
        edge_u.append(cu)
        edge_e.append(e_node)
        edge_v.append(cv)
        edge_gt.append(gt)

    # teacher-forced face table
    face_f, face_children, face_gt_grid, face_gt_pose = [], [], [], []
    for fid in sorted(rec.complex.faces):
        face = rec.complex.faces[fid]
        f_node = diagram.node_of(FACE, fid)
        children = [diagram.node_of(EDGE, e) for e in sorted(set(face.edge_ids()))]
        face_f.append(f_node)
        face_children.append(children)
        face_gt_grid.append(face.grid.reshape(-1, 3))
        face_gt_pose.append(np.concatenate([face.frame.R.reshape(9), face.frame.t]))
    cmax = max((len(c) for c in face_children), default=0)
    child_idx = np.full((len(face_f), cmax), -1, dtype=np.int64)
    child_mask = np.zeros((len(face_f), cmax), dtype=bool)
    for i, c in enumerate(face_children):
        child_idx[i, :len(c)] = c
        child_mask[i, :len(c)] = True

    return TrainSample(
        n_slots=slots,
        fpe_anchor=nn.fourier_features(anchors.astype(np.float64), cfg.fpe_bands),
        fpe_cloud=nn.fourier_features(cloud_sub.astype(np.float64), cfg.fpe_bands),
        anchors=anchors,
        type_idx=types,
        type_onehot=onehot,
        lpe=padded.lpe,
        rot_flat=padded.rot_flat,
        adj=padded.adj_norm,
        pair_i=np.asarray(pair_i, dtype=np.int64),
        pair_j=np.asarray(pair_j, dtype=np.int64),
        pair_target=np.asarray(target, dtype=np.float64),
        edge_u=np.asarray(edge_u, dtype=np.int64),
        edge_e=np.asarray(edge_e, dtype=np.int64),
        edge_v=np.asarray(edge_v, dtype=np.int64),
        edge_gt=np.asarray(edge_gt, dtype=np.float64).reshape(len(edge_u), cfg.curve_samples, 3),
        face_f=np.asarray(face_f, dtype=np.int64),
        face_children=child_idx,
        face_child_mask=child_mask,
        face_gt_grid=np.asarray(face_gt_grid, dtype=np.float64).reshape(len(face_f), -1, 3)
        if face_f else np.zeros((0, cfg.grid_size ** 2, 3)),
        face_gt_pose=np.asarray(face_gt_pose, dtype=np.float64).reshape(len(face_f), 12)
        if face_f else np.zeros((0, 12)),
        dup_mask=padded.dup_mask,
    )


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Numerically stable binary cross entropy, mean over all entries."""
    t = T.constant(targets)
    # softplus(x) - t*x = -[t*log(sig) + (1-t)*log(1-sig)]
    return T.mean(T.sub(T.softplus(logits), T.mul(t, logits)))


def binary_focal_loss(logits: Tensor, targets: np.ndarray,
                      alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """alpha * (1 - p_t)^gamma * BCE_t, mean-reduced.

    With gamma=0 and alpha=1 this reduces exactly to BCE.
    """
    t = T.constant(targets)
    bce = T.sub(T.softplus(logits), T.mul(t, logits))
    p = T.sigmoid(logits)
    # 1 - p_t: (1-p) for positives, p for negatives
    one_minus_pt = T.add(T.mul(t, T.sub(1.0, p)), T.mul(T.sub(1.0, t), p))
    if gamma == 0.0:
        mod = None
    else:
        mod = T.power(one_minus_pt, gamma)
    term = T.mul(bce, mod) if mod is not None else bce
    return T.mul(T.mean(term), alpha)


def kl_divergence(mu: Tensor, logsigma: Tensor) -> Tensor:
    """Mean of 0.5 * (mu^2 + sigma^2 - 1 - log sigma^2) against a unit Gaussian."""
    sigma2 = T.exp(T.mul(logsigma, 2.0))
    inner = T.sub(T.add(T.mul(mu, mu), sigma2), T.add(1.0, T.mul(logsigma, 2.0)))
    return T.mul(T.mean(inner), 0.5)


def _expand_tokens(x: Tensor, count: int) -> Tensor:
    """(F, D) -> (F, count, D) by broadcasting an add with zeros."""
    f, d = x.shape
    return T.add(T.reshape(x, (f, 1, d)), T.constant(np.zeros((1, count, 1))))


def rational_bezier_points(ctrl: Tensor, weights: Tensor, basis: np.ndarray) -> Tensor:
    """Differentiable rational-cubic evaluation.

    ctrl (E, 4, 3), weights (E, 4), basis (S, 4) -> points (E, S, 3).
    """
    e = ctrl.shape[0]
    s = basis.shape[0]
    wb = T.mul(T.reshape(weights, (e, 1, 4)), T.constant(basis[None, :, :]))  # (E,S,4)
    num = T.matmul(wb, ctrl)  # (E,S,3)
    den = T.sum_(wb, axis=-1, keepdims=True)
    return T.div(num, den)


@dataclass
class LossReport:
    total: float = 0.0
    type: float = 0.0
    anchor: float = 0.0
    link: float = 0.0
    edge: float = 0.0
    face_surf: float = 0.0
    pose: float = 0.0
    kl: float = 0.0
    step: int = 0

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in vars(self).items()}

    def check_finite(self) -> None:
        bad = [k for k, v in vars(self).items() if not np.isfinite(v)]
        if bad:
            raise VaeError(f"non-finite loss components: {bad}")


# ---------------------------------------------------------------------------
# forward pass producing the composite loss
# ---------------------------------------------------------------------------

def vae_losses(model: Ccvae, batch: list, rng: np.random.Generator,
               cfg: VaeConfig | None = None, sample_z: bool = True):
    """Build the full training loss over a batch of prepared samples.

    Returns (total_loss Tensor, components dict of Tensors). Phase II is
    teacher-forced: ground-truth incidence and anchors select which
    particles feed each geometry head.
    """
    cfg = cfg or model.cfg
    b = len(batch)
    n = batch[0].n_slots
    d = cfg.dim

    fpe_anchor = np.stack([s.fpe_anchor for s in batch])
    fpe_cloud = np.stack([s.fpe_cloud for s in batch])
    anchors = np.stack([s.anchors for s in batch])
    type_idx = np.stack([s.type_idx for s in batch])
    lpe = np.stack([s.lpe for s in batch])
    rot_flat = np.stack([s.rot_flat for s in batch])
    adj = np.stack([s.adj for s in batch])

    mu, logsigma = model.encoder(fpe_anchor, fpe_cloud, anchors, type_idx, lpe, rot_flat, adj)
    if sample_z:
        eps = rng.standard_normal((b, n, cfg.latent_dim))
        z = T.add(mu, T.mul(T.exp(logsigma), T.constant(eps)))
    else:
        z = mu
    feats = model.decoder.features(z)  # (B, N, D)
    feats_flat = T.reshape(feats, (b * n, d))

    components = {}

    # Phase I: entity attributes
    type_logits = model.decoder.type_head(feats)
    onehot = np.stack([s.type_onehot for s in batch])
    components["type"] = bce_with_logits(type_logits, onehot)
    anchor_pred = model.decoder.anchor_head(feats)
    diff = T.sub(anchor_pred, T.constant(anchors))
    components["anchor"] = T.mean(T.mul(diff, diff))

    # Phase I: incidence links (masked to adjacent-rank non-duplicate pairs)
    pi = np.concatenate([s.pair_i + k * n for k, s in enumerate(batch)])
    pj = np.concatenate([s.pair_j + k * n for k, s in enumerate(batch)])
    ptarget = np.concatenate([s.pair_target for s in batch])
    logits = model.decoder.link_logits_pairs(feats_flat, pi, pj)
    components["link"] = binary_focal_loss(
        T.reshape(logits, (len(ptarget),)), ptarget,
        alpha=cfg.focal_alpha, gamma=cfg.focal_gamma)

    # Phase II: edges
    eu = np.concatenate([s.edge_u + k * n for k, s in enumerate(batch)])
    ee = np.concatenate([s.edge_e + k * n for k, s in enumerate(batch)])
    ev = np.concatenate([s.edge_v + k * n for k, s in enumerate(batch)])
    edge_gt = np.concatenate([s.edge_gt for s in batch])
    anc_flat = anchors.reshape(b * n, 3)
    if len(eu):
        basis = bernstein3(np.linspace(0.0, 1.0, cfg.curve_samples))
        pts = _decode_edge_points(model, feats_flat, eu, ee, ev,
                                  anc_flat[eu], anc_flat[ev], basis)
        components["edge"] = T.mean(T.absolute(T.sub(pts, T.constant(edge_gt))))
    else:
        components["edge"] = T.mul(T.sum_(feats_flat), 0.0)

    # Phase II: faces
    ff_list, gt_grids, gt_poses, child_rows, child_masks = [], [], [], [], []
    for k, s in enumerate(batch):
        if len(s.face_f) == 0:
            continue
        ff_list.append(s.face_f + k * n)
        gt_grids.append(s.face_gt_grid)
        gt_poses.append(s.face_gt_pose)
        child_rows.append(s.face_children + k * n * (s.face_children >= 0))
        child_masks.append(s.face_child_mask)
    if ff_list:
        cmax = max(c.shape[1] for c in child_rows)
        child_idx = np.concatenate([
            np.pad(c, ((0, 0), (0, cmax - c.shape[1])), constant_values=-1)
            for c in child_rows])
        child_mask = np.concatenate([
            np.pad(m, ((0, 0), (0, cmax - m.shape[1])), constant_values=False)
            for m in child_masks])
        ff = np.concatenate(ff_list)
        gt_grid = np.concatenate(gt_grids)
        gt_pose = np.concatenate(gt_poses)
        surf, pose = _decode_face_patches(
            model, feats_flat, ff, child_idx, child_mask, anc_flat, cfg,
            gt_pose=gt_pose if cfg.use_gt_frames else None)
        components["face_surf"] = _chamfer_l1(surf, gt_grid)
        pose_diff = T.sub(pose, T.constant(gt_pose))
        components["pose"] = T.mean(T.mul(pose_diff, pose_diff))
    else:
        components["face_surf"] = T.mul(T.sum_(feats_flat), 0.0)
        components["pose"] = T.mul(T.sum_(feats_flat), 0.0)

    components["kl"] = kl_divergence(mu, logsigma)

    total = components["type"]
    for key in ("anchor", "link", "edge", "face_surf", "pose"):
        total = T.add(total, components[key])
    total = T.add(total, T.mul(components["kl"], cfg.kl_weight))
    return total, components


def _decode_edge_points(model, feats_flat, eu, ee, ev, anchors_u, anchors_v, basis):
    zin = T.concat([T.take(feats_flat, eu), T.take(feats_flat, ee),
                    T.take(feats_flat, ev)], axis=-1)
    params = model.decoder.edge_mlp(zin)  # (E, 8)
    d1, d2, raw_w = T.split(params, [3, 3, 2], axis=-1)
    au = T.constant(anchors_u)
    av = T.constant(anchors_v)
    p0 = T.reshape(au, (-1, 1, 3))
    p1 = T.reshape(T.add(au, d1), (-1, 1, 3))
    p2 = T.reshape(T.add(av, d2), (-1, 1, 3))
    p3 = T.reshape(av, (-1, 1, 3))
    ctrl = T.concat([p0, p1, p2, p3], axis=1)  # (E,4,3)
    e = len(eu)
    w_mid = T.add(T.softplus(raw_w), 1e-3)
    ones = T.constant(np.ones((e, 1)))
    weights = T.concat([ones, w_mid, ones], axis=-1)  # (E,4)
    return rational_bezier_points(ctrl, weights, basis)


def _decode_face_patches(model, feats_flat, ff, child_idx, child_mask, anc_flat,
                         cfg: VaeConfig, gt_pose=None):
    """Pose + surface samples for a table of faces.

    Returns (surface points (F, G*G, 3), pose vector (F, 12)). When
    ``gt_pose`` is given the ground-truth frame transforms the geometry
    (teacher forcing) while the pose head is still supervised.
    """
    f = len(ff)
    g2 = cfg.grid_size ** 2
    zf = T.take(feats_flat, ff)  # (F, D)
    pose_out = model.decoder.pose_mlp(zf)  # (F, 9)
    rot6, tvec = T.split(pose_out, [6, 3], axis=-1)
    rot = nn.rotation_6d_to_matrix(rot6)  # (F, 3, 3)
    pose_vec = T.concat([T.reshape(rot, (f, 9)), tvec], axis=-1)

    if gt_pose is not None:
        rot_use = T.constant(gt_pose[:, :9].reshape(f, 3, 3))
        t_use = T.constant(gt_pose[:, 9:])
    else:
        rot_use = rot
        t_use = tvec

    safe_child = np.where(child_idx >= 0, child_idx, 0)
    cmax = child_idx.shape[1]
    child_anchor = anc_flat[safe_child]  # (F, C, 3)
    local = T.matmul(T.sub(T.constant(child_anchor), T.reshape(t_use, (f, 1, 3))), rot_use)
    child_feats = T.reshape(T.take(feats_flat, safe_child.reshape(-1)), (f, cmax, -1))
    pn_in = T.concat([local, child_feats], axis=-1)
    pn = model.decoder.pointnet(pn_in)  # (F, C, H)
    pn = T.masked_fill(pn, ~child_mask[:, :, None], -1e9)
    h_spatial = T.max_(pn, axis=1)  # (F, H)

    lin = np.linspace(0.0, 1.0, cfg.grid_size)
    uu, vv = np.meshgrid(lin, lin, indexing="ij")
    uv = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=-1)  # (G*G, 2)
    uv_t = T.constant(np.broadcast_to(uv[None], (f, g2, 2)).copy())
    surf_in = T.concat([uv_t, _expand_tokens(zf, g2), _expand_tokens(h_spatial, g2)], axis=-1)
    s_local = model.decoder.surf_mlp(surf_in)
    world = T.add(T.matmul(s_local, T.transpose(rot_use, (0, 2, 1))),
                  T.reshape(t_use, (f, 1, 3)))
    return world, pose_vec


def _chamfer_l1(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Bidirectional nearest-sample L1 distance between patch samples.

    Matching uses squared-Euclidean nearest neighbors (cheap via a Gram
    matrix); the accumulated distance is L1. Gradients flow through the
    matched pairs.
    """
    p = pred.data  # (F, S, 3)
    gt = np.asarray(gt, dtype=p.dtype)
    f, s, _ = p.shape
    d2 = (np.sum(p * p, axis=-1)[:, :, None] + np.sum(gt * gt, axis=-1)[:, None, :]
          - 2.0 * p @ np.swapaxes(gt, 1, 2))
    idx_pg = d2.argmin(axis=2)  # per pred point, nearest gt
    idx_gp = d2.argmin(axis=1)  # per gt point, nearest pred
    gt_for_pred = np.take_along_axis(gt, idx_pg[:, :, None], axis=1)
    fwd = T.mean(T.absolute(T.sub(pred, T.constant(gt_for_pred))))
    flat = T.reshape(pred, (f * s, 3))
    rows = (idx_gp + np.arange(f)[:, None] * s).reshape(-1)
    pred_for_gt = T.reshape(T.take(flat, rows), (f, s, 3))
    bwd = T.mean(T.absolute(T.sub(pred_for_gt, T.constant(gt))))
    return T.add(fwd, bwd)


# ---------------------------------------------------------------------------
# training step
# ---------------------------------------------------------------------------

def vae_train_step(model: Ccvae, opt: nn.AdamW, batch: list,
                   rng: np.random.Generator) -> LossReport:
    with T.Tape() as tape:
        total, components = vae_losses(model, batch, rng)
    report = LossReport(total=total.item(),
                        **{k: v.item() for k, v in components.items()},
                        step=opt.step_count + 1)
    report.check_finite()
    model.zero_grad()
    tape.backward(total)
    step = opt.step()
    if step.skipped:
        raise VaeError(f"step rejected, non-finite gradients in {step.nan_params}")
    return report


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def encode_record(model: Ccvae, sample: TrainSample, rng: np.random.Generator | None = None):
    """Posterior parameters (and a sample) for one prepared record."""
    mu, logsigma = model.encoder(
        sample.fpe_anchor[None], sample.fpe_cloud[None], sample.anchors[None],
        sample.type_idx[None], sample.lpe[None], sample.rot_flat[None], sample.adj[None])
    mu_v = mu.data[0]
    sig_v = np.exp(logsigma.data[0])
    if rng is None:
        z = mu_v
    else:
        z = mu_v + sig_v * rng.standard_normal(mu_v.shape)
    return mu_v, sig_v, z


@dataclass
class DecodedSet:
    types: np.ndarray
    anchors: np.ndarray
    link_probs: np.ndarray
    structure: object
    result: RestoreResult


def decode_latents(model: Ccvae, z: np.ndarray, cfg: VaeConfig | None = None) -> DecodedSet:
    """Full predictive decode of a latent set into a restored complex."""
    cfg = cfg or model.cfg
    n = z.shape[0]
    feats = model.decoder.features(T.constant(z[None]))
    feats_flat = T.reshape(feats, (n, cfg.dim))
    types = model.decoder.type_head(feats).data[0].argmax(axis=-1)
    anchors = model.decoder.anchor_head(feats).data[0]

    probs = np.zeros((n, n))
    if n > 1:
        ii, jj = np.triu_indices(n, k=1)
        logits = model.decoder.link_logits_pairs(feats_flat, ii, jj).data.reshape(-1)
        pv = 1.0 / (1.0 + np.exp(-logits))
        probs[ii, jj] = pv
        probs[jj, ii] = pv
    # only adjacent ranks may link
    tcol = types[:, None]
    adj_rank = np.abs(tcol - types[None, :]) == 1
    probs = probs * adj_rank

    from .cells import recover_topology  # local import to avoid cycle at import time
    structure = recover_topology(types, probs)

    curves = {}
    if structure.edge_vertices:
        e_nodes = sorted(structure.edge_vertices)
        eu, ev = [], []
        for e in e_nodes:
            vi, vj = structure.edge_vertices[e]
            cu, cv = _canonical_pair(anchors, vi, vj)
            eu.append(cu)
            ev.append(cv)
        zin = T.concat([T.take(feats_flat, np.asarray(eu)),
                        T.take(feats_flat, np.asarray(e_nodes)),
                        T.take(feats_flat, np.asarray(ev))], axis=-1)
        params = model.decoder.edge_mlp(zin).data
        for k, e in enumerate(e_nodes):
            curves[e] = bezier_from_relative_params(
                anchors[eu[k]], anchors[ev[k]], params[k, 0:3], params[k, 3:6],
                params[k, 6:8])

    patches = {}
    if structure.face_loops:
        f_nodes = sorted(structure.face_loops)
        children = [sorted({abs(se) for se in sum(structure.face_loops[fn], [])})
                    for fn in f_nodes]
        cmax = max(len(c) for c in children)
        child_idx = np.full((len(f_nodes), cmax), -1, dtype=np.int64)
        child_mask = np.zeros((len(f_nodes), cmax), dtype=bool)
        for i, c in enumerate(children):
            child_idx[i, :len(c)] = c
            child_mask[i, :len(c)] = True
        surf, pose = _decode_face_patches(model, feats_flat, np.asarray(f_nodes),
                                          child_idx, child_mask, anchors, cfg)
        surf_v = surf.data
        pose_v = pose.data
        g = cfg.grid_size
        for i, fn in enumerate(f_nodes):
            frame = CanonicalFrame(pose_v[i, :9].reshape(3, 3), pose_v[i, 9:])
            patches[fn] = (frame, surf_v[i].reshape(g, g, 3))

    particles = ParticleSet(
        [Particle(anchors[i], int(types[i]), z[i]) for i in range(n)],
        true_count=n, budget=n)
    result = restore_complex(particles, probs, RestoredGeometry(curves, patches))
    return DecodedSet(types=types, anchors=anchors, link_probs=probs,
                      structure=structure, result=result)


def topology_matches(diagram, decoded: DecodedSet) -> dict:
    """Exactness report of a decoded structure against the true diagram.

    Types must match per node; every true edge must recover its two
    vertex children and every true face its exact edge-children set
    (loop partitions follow from the edge sets for simple cycles).
    """
    types_ok = bool(np.array_equal(decoded.types, diagram.types()))
    gt_edge, gt_face = {}, {}
    for parent, child in diagram.links:
        if diagram.nodes[parent].cell_type == EDGE:
            gt_edge.setdefault(parent, set()).add(child)
        else:
            gt_face.setdefault(parent, set()).add(child)
    dec_edge = {e: set(pair) for e, pair in decoded.structure.edge_vertices.items()}
    dec_face = {f: {abs(se) for loop in loops for se in loop}
                for f, loops in decoded.structure.face_loops.items()}
    links_ok = (dec_edge == {e: set(v) for e, v in gt_edge.items()}
                and dec_face == gt_face)
    return {"types_exact": types_ok, "links_exact": bool(links_ok),
            "topology_exact": bool(types_ok and links_ok)}
