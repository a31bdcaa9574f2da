"""End-to-end orchestration: training, encoding, sampling, in-painting,
and evaluation, all reproducible from (config, seed).

Checkpoints store tensors in the flat binary container; a JSON sidecar
(<path>.meta.json) carries the architecture fields needed to rebuild the
model plus run metadata (dataset mode, clustering threshold).
"""

from __future__ import annotations

import json
import time

import numpy as np

from . import assembly, ccvae, checkpoint, dataio, flow, metrics, nn
from .cells import EDGE, FACE, VERTEX, Particle, ParticleSet, RestoredGeometry, \
    build_hasse_diagram, link_target_matrix, recover_topology, restore_complex
from .ccvae import Ccvae, VaeConfig
from .config import RunConfig
from .flow import FlowBackbone, FlowConfig, InpaintSpec


def vae_config(cfg: RunConfig) -> VaeConfig:
    return VaeConfig(
        latent_dim=cfg.latent_dim, dim=cfg.vae_dim, heads=cfg.vae_heads,
        enc_layers=cfg.vae_enc_layers, dec_layers=cfg.vae_dec_layers,
        fpe_bands=cfg.fpe_bands, lpe_k=cfg.lpe_k,
        encoder_cloud_points=cfg.vae_cloud_points, grid_size=cfg.grid_size,
        curve_samples=cfg.curve_samples, budget=cfg.budget,
        focal_alpha=cfg.focal_alpha, focal_gamma=cfg.focal_gamma,
        kl_weight=cfg.kl_weight)


def flow_config(cfg: RunConfig) -> FlowConfig:
    return FlowConfig(
        latent_dim=cfg.latent_dim, dim=cfg.flow_dim, layers=cfg.flow_layers,
        heads=cfg.flow_heads, fpe_bands=cfg.fpe_bands,
        dir_loss_weight=cfg.dir_loss_weight, ema_decay=cfg.ema_decay,
        euler_steps=cfg.euler_steps, inpaint_fix_fraction=cfg.inpaint_fix_fraction)


# ---------------------------------------------------------------------------
# encoder/decoder training
# ---------------------------------------------------------------------------

def prepare_training_samples(records, cfg: RunConfig, seed: int, pad: bool = True):
    vcfg = vae_config(cfg)
    seeds = np.random.SeedSequence(seed).spawn(len(records))
    out = []
    for rec, s in zip(records, seeds):
        rng = np.random.default_rng(s)
        budget = cfg.budget if pad else build_hasse_diagram(rec.complex).n
        padded = dataio.normalize_and_pad(rec, budget, rng, lpe_k=cfg.lpe_k)
        out.append(ccvae.prepare_sample(padded, vcfg))
    return out


def train_vae(records, cfg: RunConfig, seed: int, steps: int | None = None,
              log=None, log_every: int = 200):
    """Train the autoencoder; returns (model, optimizer, loss history)."""
    steps = steps or cfg.vae_steps
    root = np.random.SeedSequence(seed)
    init_rng, data_rng, train_rng = (np.random.default_rng(s) for s in root.spawn(3))
    vcfg = vae_config(cfg)
    model = Ccvae(vcfg, init_rng)
    opt = nn.AdamW(list(model.named_parameters()), lr=cfg.vae_lr)
    samples = prepare_training_samples(records, cfg, seed + 1)
    history = []
    t0 = time.time()
    for step in range(steps):
        idx = data_rng.choice(len(samples), size=min(cfg.vae_batch, len(samples)),
                              replace=False)
        report = ccvae.vae_train_step(model, opt, [samples[i] for i in idx], train_rng)
        history.append(report.to_dict())
        if log and (step % log_every == 0 or step == steps - 1):
            log(f"vae step {step + 1}/{steps} total={report.total:.4f} "
                f"link={report.link:.4f} edge={report.edge:.4f} "
                f"face={report.face_surf:.4f} [{time.time() - t0:.0f}s]")
    return model, opt, history


def dataset_mode(records) -> str:
    modes = [r.complex.mode for r in records]
    return max(set(modes), key=modes.count)


def save_vae(path, model: Ccvae, cfg: RunConfig, mode: str) -> None:
    checkpoint.save(path, model.state_dict())
    meta = {"kind": "vae", "mode": mode, "config": cfg.to_dict()}
    with open(str(path) + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)


def load_vae(path):
    with open(str(path) + ".meta.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    cfg = RunConfig.from_dict(meta["config"])
    model = Ccvae(vae_config(cfg), np.random.default_rng(0))
    model.load_state_dict(checkpoint.load(path))
    return model, cfg, meta


# ---------------------------------------------------------------------------
# reconstruction reporting
# ---------------------------------------------------------------------------

def reconstruct_record(model: Ccvae, record, cfg: RunConfig, rng: np.random.Generator):
    """Encode with the posterior mean, decode predictively, assemble, score."""
    sample = prepare_training_samples([record], cfg, 0, pad=False)[0]
    mu, _, _ = ccvae.encode_record(model, sample)
    decoded = ccvae.decode_latents(model, mu)
    diagram = build_hasse_diagram(record.complex)
    topo = ccvae.topology_matches(diagram, decoded)
    model_out = assembly.fit_and_assemble(decoded.result.complex,
                                          mode=record.complex.mode)
    chamfer = float("inf")
    if model_out.complex.cell_count > 0 and (model_out.complex.faces
                                             or model_out.complex.edges):
        from .geometry import chamfer_distance
        cloud = dataio.surface_point_cloud(model_out.complex, 2000, rng)
        if len(cloud):
            chamfer = chamfer_distance(cloud, record.cloud)
    anchor_rmse = float(np.sqrt(np.mean(
        (decoded.anchors[:diagram.n] - diagram.anchors()) ** 2)))
    return {"id": record.id, "chamfer": chamfer, "anchor_rmse": anchor_rmse,
            "model": model_out, **topo}


def roundtrip_report(model: Ccvae, records, cfg: RunConfig, seed: int = 0):
    rng = np.random.default_rng(seed)
    rows = [reconstruct_record(model, rec, cfg, rng) for rec in records]
    finite = [r["chamfer"] for r in rows if np.isfinite(r["chamfer"])]
    summary = {
        "count": len(rows),
        "types_exact": float(np.mean([r["types_exact"] for r in rows])),
        "links_exact": float(np.mean([r["links_exact"] for r in rows])),
        "topology_exact": float(np.mean([r["topology_exact"] for r in rows])),
        "mean_chamfer": float(np.mean(finite)) if finite else float("inf"),
        "mean_anchor_rmse": float(np.mean([r["anchor_rmse"] for r in rows])),
        "exact_and_close": float(np.mean([
            r["topology_exact"] and r["chamfer"] <= 2e-2 for r in rows])),
    }
    return rows, summary


# ---------------------------------------------------------------------------
# latents and the flow
# ---------------------------------------------------------------------------

def encode_records(model: Ccvae, records, cfg: RunConfig, seed: int):
    """Sampled posterior latents per record plus the clustering scale."""
    rng = np.random.default_rng(seed)
    latents = []
    for rec in records:
        sample = prepare_training_samples([rec], cfg, 0, pad=False)[0]
        _, _, z = ccvae.encode_record(model, sample, rng=rng)
        latents.append({"id": rec.id, "z": z})
    median_nn = flow.median_nn_distance([row["z"] for row in latents])
    return latents, {"median_nn_dist": median_nn, "latent_dim": cfg.latent_dim}


def write_latents(path, latents, meta) -> None:
    dataio.write_jsonl(path, [{"version": 1, "id": row["id"], "z": row["z"].tolist()}
                              for row in latents])
    with open(str(path) + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)


def read_latents(path):
    rows = dataio.read_jsonl(path)
    latents = [{"id": r["id"], "z": np.asarray(r["z"], dtype=np.float64)} for r in rows]
    try:
        with open(str(path) + ".meta.json", "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        meta = {"median_nn_dist": flow.median_nn_distance([r["z"] for r in latents])}
    return latents, meta


def train_flow(latents, cfg: RunConfig, seed: int, steps: int | None = None,
               log=None, log_every: int = 200):
    """Train the unconditional velocity model on encoded latent sets."""
    steps = steps or cfg.flow_steps
    root = np.random.SeedSequence(seed)
    init_rng, data_rng, train_rng = (np.random.default_rng(s) for s in root.spawn(3))
    fcfg = flow_config(cfg)
    model = FlowBackbone(fcfg, init_rng)
    opt = nn.AdamW(list(model.named_parameters()), lr=cfg.flow_lr,
                   ema_decay=cfg.ema_decay)
    zsets = [row["z"] for row in latents]
    history = []
    t0 = time.time()
    for step in range(steps):
        idx = data_rng.choice(len(zsets), size=min(cfg.flow_batch, len(zsets)),
                              replace=True)
        batch = np.stack([flow.pad_latents(zsets[i], cfg.budget, data_rng)[0]
                          for i in idx])
        report = flow.flow_train_step(model, opt, batch, train_rng, fcfg)
        history.append(report.to_dict())
        if log and (step % log_every == 0 or step == steps - 1):
            log(f"flow step {step + 1}/{steps} loss={report.total:.4f} "
                f"[{time.time() - t0:.0f}s]")
    return model, opt, history


def save_flow(path, model, opt, cfg: RunConfig, tau_cluster: float, mode: str) -> None:
    """The persisted weights are the EMA shadow (evaluation weights)."""
    state = opt.ema_state() if opt.ema is not None else model.state_dict()
    checkpoint.save(path, state)
    meta = {"kind": "flow", "mode": mode, "tau_cluster": tau_cluster,
            "config": cfg.to_dict()}
    with open(str(path) + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)


def load_flow(path):
    with open(str(path) + ".meta.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    cfg = RunConfig.from_dict(meta["config"])
    model = FlowBackbone(flow_config(cfg), np.random.default_rng(0))
    model.load_state_dict(checkpoint.load(path))
    return model, cfg, meta


def derive_tau(cfg: RunConfig, meta: dict) -> float:
    if cfg.tau_cluster and cfg.tau_cluster > 0:
        return cfg.tau_cluster
    median = float(meta.get("median_nn_dist", 0.0))
    if median <= 0:
        raise ValueError("no clustering threshold available: set tau_cluster "
                         "or provide latent metadata")
    return 0.25 * median


# ---------------------------------------------------------------------------
# sampling and in-painting
# ---------------------------------------------------------------------------

def sample_models(vae_model: Ccvae, flow_model, count: int, particles: int,
                  steps: int, seed: int, tau: float, mode: str = "solid",
                  batch: int = 32):
    """Generate latent sets, cluster duplicates, decode, and assemble."""
    rng = np.random.default_rng(seed)
    velocity = flow.model_velocity_fn(flow_model)
    models = []
    cluster_counts = []
    remaining = count
    while remaining > 0:
        b = min(batch, remaining)
        zb = flow.euler_sample(velocity, steps, particles,
                               flow_model.cfg.latent_dim, rng, count=b)
        for i in range(b):
            reps, labels = flow.cluster_particles(zb[i], tau)
            cluster_counts.append(reps.shape[0])
            decoded = ccvae.decode_latents(vae_model, reps)
            models.append(assembly.fit_and_assemble(decoded.result.complex, mode=mode))
        remaining -= b
    return models, cluster_counts


def inpaint_record(vae_model: Ccvae, flow_model, record, cfg: RunConfig,
                   seed: int, tau: float, steps: int | None = None):
    """Regenerate face particles around fixed ground-truth wireframe latents.

    The fixed rows are overwritten along the exact interpolation path, so
    the wireframe latents of the output equal the inputs bit for bit; the
    assembled output reuses the input wireframe geometry unchanged.
    """
    steps = steps or cfg.euler_steps
    rng = np.random.default_rng(seed)
    sample = prepare_training_samples([record], cfg, 0, pad=False)[0]
    mu, _, _ = ccvae.encode_record(vae_model, sample)
    diagram = build_hasse_diagram(record.complex)
    n_wire = sum(1 for node in diagram.nodes if node.cell_type != FACE)
    z_wire = mu[:n_wire]

    budget = max(cfg.budget, diagram.n)
    z1_known = np.zeros((budget, cfg.latent_dim))
    z1_known[:n_wire] = z_wire
    mask = np.zeros(budget, dtype=bool)
    mask[:n_wire] = True
    velocity = flow.model_velocity_fn(flow_model)
    out = flow.euler_sample(velocity, steps, budget, cfg.latent_dim, rng,
                            count=1, inpaint=InpaintSpec(mask=mask, z1_known=z1_known))[0]
    wire_exact = bool(np.array_equal(out[:n_wire], z_wire))
    free = out[n_wire:]
    reps, _ = flow.cluster_particles(free, tau)

    decoded = decode_with_fixed_wireframe(vae_model, record, diagram, z_wire, reps)
    model_out = assembly.fit_and_assemble(decoded.complex, mode="solid")
    return model_out, wire_exact, decoded.repair_log


def decode_with_fixed_wireframe(vae_model: Ccvae, record, diagram, z_wire, face_reps):
    """Decode generated face particles against a pass-through wireframe."""
    import cellflow.tensor as T

    n_wire = z_wire.shape[0]
    z = np.concatenate([z_wire, face_reps], axis=0)
    n = z.shape[0]
    vcfg = vae_model.cfg
    feats = vae_model.decoder.features(T.constant(z[None]))
    feats_flat = T.reshape(feats, (n, vcfg.dim))
    pred_types = vae_model.decoder.type_head(feats).data[0].argmax(axis=-1)
    pred_anchors = vae_model.decoder.anchor_head(feats).data[0]

    types = np.concatenate([diagram.types()[:n_wire],
                            pred_types[n_wire:]])
    anchors = np.vstack([diagram.anchors()[:n_wire], pred_anchors[n_wire:]])

    keep = list(range(n_wire)) + [n_wire + i for i in range(len(face_reps))
                                  if pred_types[n_wire + i] == FACE]
    probs = np.zeros((n, n))
    gt = link_target_matrix(diagram)
    probs[:n_wire, :n_wire] = gt[:n_wire, :n_wire]
    face_rows = [i for i in keep if i >= n_wire]
    edge_rows = [i for i in range(n_wire) if types[i] == EDGE]
    if face_rows and edge_rows:
        fi, ei = np.meshgrid(face_rows, edge_rows, indexing="ij")
        logits = vae_model.decoder.link_logits_pairs(
            feats_flat, fi.reshape(-1), ei.reshape(-1)).data.reshape(len(face_rows),
                                                                     len(edge_rows))
        pv = 1.0 / (1.0 + np.exp(-logits))
        for a, fr in enumerate(face_rows):
            for b, er in enumerate(edge_rows):
                probs[fr, er] = probs[er, fr] = pv[a, b]

    sub = np.asarray(keep)
    sub_probs = probs[np.ix_(sub, sub)]
    sub_types = types[sub]
    sub_anchors = anchors[sub]

    curves = {}
    for local, orig in enumerate(sub):
        if orig < n_wire and types[orig] == EDGE:
            eid = diagram.nodes[orig].cell_id
            curves[local] = record.complex.edges[eid].curve

    structure = recover_topology(sub_types, sub_probs)
    patches = {}
    if structure.face_loops:
        f_nodes = sorted(structure.face_loops)
        children = [sorted({abs(se) for se in sum(structure.face_loops[f], [])})
                    for f in f_nodes]
        cmax = max(len(c) for c in children)
        child_idx = np.full((len(f_nodes), cmax), -1, dtype=np.int64)
        child_mask = np.zeros((len(f_nodes), cmax), dtype=bool)
        for i, c in enumerate(children):
            child_idx[i, :len(c)] = sub[np.asarray(c)]
            child_mask[i, :len(c)] = True
        surf, pose = ccvae._decode_face_patches(
            vae_model, feats_flat, sub[np.asarray(f_nodes)], child_idx, child_mask,
            anchors, vcfg)
        g = vcfg.grid_size
        from .geometry import CanonicalFrame
        for i, fn in enumerate(f_nodes):
            frame = CanonicalFrame(pose.data[i, :9].reshape(3, 3), pose.data[i, 9:])
            patches[fn] = (frame, surf.data[i].reshape(g, g, 3))

    particles = ParticleSet([Particle(sub_anchors[i], int(sub_types[i]), z[sub[i]])
                             for i in range(len(sub))],
                            true_count=len(sub), budget=len(sub))
    result = restore_complex(particles, sub_probs, RestoredGeometry(curves, patches))
    return result


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def model_clouds(models, points: int, rng: np.random.Generator):
    clouds = []
    kept = []
    for m in models:
        cc = m.complex if hasattr(m, "complex") else m
        if cc.cell_count == 0 or (not cc.faces and not cc.edges):
            continue
        cloud = dataio.surface_point_cloud(cc, points, rng)
        if len(cloud):
            clouds.append(cloud)
            kept.append(m)
    return kept, clouds


def evaluate_models(gen_models, ref_records, train_records, cfg: RunConfig,
                    seed: int) -> metrics.EvalReport:
    rng = np.random.default_rng(seed)
    gen_kept, gen_clouds = model_clouds(gen_models, cfg.metric_cloud_points, rng)
    _, ref_clouds = model_clouds([r.complex for r in ref_records],
                                 cfg.metric_cloud_points, rng)
    train_clouds = []
    if train_records:
        _, train_clouds = model_clouds([r.complex for r in train_records],
                                       cfg.metric_cloud_points, rng)
    report = metrics.evaluate(
        gen_models, ref_clouds, gen_clouds, train_clouds,
        tau_novel=cfg.tau_novelty, tau_unique=cfg.tau_unique, seed=seed)
    return report
