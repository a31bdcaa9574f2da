"""Rectified-flow generative model over latent particle sets.

The velocity field is a permutation-equivariant transformer (no
positional encoding over set index) conditioned on time through
per-block adaptive scale/shift. States move along straight paths
z_t = t*z1 + (1-t)*z0 from a unit Gaussian at t=0 to data at t=1, so the
regression target is the constant displacement z1 - z0.

Conditional generation runs two token streams (latent + condition) with
attention over the concatenated key/value sets; a per-block gate scaled
from zero keeps the untrained conditional model identical to the
unconditional one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor


class FlowError(RuntimeError):
    pass


@dataclass
class FlowConfig:
    latent_dim: int = 16
    dim: int = 128
    layers: int = 6
    heads: int = 4
    fpe_bands: int = 8
    dir_loss_weight: float = 0.1
    logit_mean: float = 0.0
    logit_std: float = 1.0
    ema_decay: float = 0.9999
    euler_steps: int = 50
    inpaint_fix_fraction: float = 0.2
    cond_tokens: int = 16
    cond_cloud_points: int = 512


# ---------------------------------------------------------------------------
# path, time sampling, loss
# ---------------------------------------------------------------------------

def rf_interpolate(z0: np.ndarray, z1: np.ndarray, t):
    """Point on the straight path plus its (constant) velocity target."""
    z0 = np.asarray(z0)
    z1 = np.asarray(z1)
    if z0.shape != z1.shape:
        raise ValueError(f"endpoint shapes differ: {z0.shape} vs {z1.shape}")
    t = np.asarray(t, dtype=z0.dtype)
    while t.ndim < z0.ndim:
        t = t[..., None]
    return t * z1 + (1.0 - t) * z0, z1 - z0


def sample_t_logit_normal(rng: np.random.Generator, m: float = 0.0, s: float = 1.0,
                          size=None) -> np.ndarray:
    """t = sigmoid(m + s*n), n ~ N(0,1); always strictly inside (0,1)."""
    if s <= 0:
        raise ValueError(f"logit-normal scale must be positive, got {s}")
    n = rng.standard_normal(size=size)
    return np.exp(-np.logaddexp(0.0, -(m + s * n)))


def flow_loss(v_pred: Tensor, v_star: np.ndarray, dir_weight: float = 0.1,
              keep_mask: np.ndarray | None = None) -> Tensor:
    """MSE plus a scaled velocity-direction term (1 - cosine) per sample.

    ``keep_mask`` (B, N) selects the rows that contribute to the loss;
    rows simulated as fixed constraints are excluded. The cosine runs
    over each sample's flattened kept rows and is skipped for samples
    whose target norm is negligible.
    """
    v_star = np.asarray(v_star, dtype=v_pred.data.dtype)
    b, n, d = v_star.shape
    if keep_mask is None:
        keep_mask = np.ones((b, n), dtype=bool)
    w = keep_mask[:, :, None].astype(v_star.dtype)
    denom = float(w.sum() * d)
    diff = T.sub(v_pred, T.constant(v_star))
    mse = T.div(T.sum_(T.mul(T.mul(diff, diff), T.constant(w))), denom)

    star_norm2 = (v_star * v_star * w).sum(axis=(1, 2))
    active = star_norm2 >= 1e-16
    if dir_weight == 0.0 or not active.any():
        return mse
    wt = T.constant(w)
    dot = T.sum_(T.mul(T.mul(v_pred, T.constant(v_star)), wt), axis=(1, 2))
    pred_norm2 = T.sum_(T.mul(T.mul(v_pred, v_pred), wt), axis=(1, 2))
    cos = T.div(dot, T.add(T.mul(T.power(T.add(pred_norm2, 1e-20), 0.5),
                                 T.constant(np.sqrt(star_norm2 + 1e-20))), 1e-20))
    per_sample = T.sub(1.0, cos)
    gate = active.astype(v_star.dtype) / max(active.sum(), 1)
    dir_term = T.sum_(T.mul(per_sample, T.constant(gate)))
    return T.add(mse, T.mul(dir_term, dir_weight))


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------

class FlowBackbone(nn.Module):
    """Velocity transformer with per-block time scale/shift modulation."""

    def __init__(self, cfg: FlowConfig, rng: np.random.Generator):
        d = cfg.dim
        self.cfg = cfg
        self.in_proj = nn.Linear(cfg.latent_dim, d, rng)
        self.time_mlp = nn.MLP([d, d, d], rng)
        self.blocks = [nn.TransformerBlock(d, cfg.heads, rng) for _ in range(cfg.layers)]
        self.mods = [nn.Linear(d, 4 * d, rng, zero_init=True) for _ in range(cfg.layers)]
        self.out_norm = nn.RMSNorm(d)
        self.out_proj = nn.Linear(d, cfg.latent_dim, rng, zero_init=True)

    def _time_tokens(self, t, batch: int) -> Tensor:
        emb = nn.sinusoidal_time_embedding(np.broadcast_to(np.asarray(t, dtype=np.float64),
                                                           (batch,)), self.cfg.dim)
        return self.time_mlp(T.constant(emb[:, None, :]))  # (B, 1, D)

    def _modulations(self, time_feat: Tensor):
        d = self.cfg.dim
        out = []
        for lin in self.mods:
            m = lin(time_feat)  # (B, 1, 4D)
            out.append(T.split(m, [d, d, d, d], axis=-1))
        return out

    def __call__(self, z, t) -> Tensor:
        z = z if isinstance(z, Tensor) else T.constant(z)
        b = z.shape[0]
        x = self.in_proj(z)
        mods = self._modulations(self._time_tokens(t, b))
        for blk, mod in zip(self.blocks, mods):
            x = blk(x, modulation=mod)
        return self.out_proj(self.out_norm(x))


# ---------------------------------------------------------------------------
# dual-stream conditional backbone
# ---------------------------------------------------------------------------

class ConditionEncoder(nn.Module):
    """Point cloud -> a small set of condition tokens (learned queries)."""

    def __init__(self, cfg: FlowConfig, rng: np.random.Generator):
        d = cfg.dim
        fpe_dim = 6 * cfg.fpe_bands + 3
        self.queries = T.parameter(rng.normal(0.0, 0.5, size=(cfg.cond_tokens, d)))
        self.kv_proj = nn.Linear(fpe_dim, d, rng)
        self.attn = nn.MultiheadAttention(d, cfg.heads, rng)
        self.norm = nn.RMSNorm(d)
        self.cfg = cfg

    def __call__(self, clouds: np.ndarray) -> Tensor:
        """clouds (B, P, 3) -> tokens (B, K, D); invariant to point order."""
        b = clouds.shape[0]
        fpe = nn.fourier_features(clouds, self.cfg.fpe_bands)
        kv = self.kv_proj(T.constant(fpe))
        k = self.queries.shape[0]
        q = T.add(T.reshape(self.queries, (1, k, -1)),
                  T.constant(np.zeros((b, 1, 1))))
        return self.norm(T.add(q, self.attn(q, kv)))


class DualStreamBlock(nn.Module):
    """Two-stream block with joint attention over concatenated keys/values.

    The condition mass inside the latent-query softmax is scaled by
    tanh(gate); with the gate at its zero init the latent output reduces
    exactly (in exact arithmetic) to single-stream attention.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.scale = 1.0 / np.sqrt(dim // heads)
        self.norm1 = nn.RMSNorm(dim)
        self.q = nn.Linear(dim, dim, rng, bias=False)
        self.k = nn.Linear(dim, dim, rng, bias=False)
        self.v = nn.Linear(dim, dim, rng, bias=False)
        self.out = nn.Linear(dim, dim, rng, bias=False)
        self.norm2 = nn.RMSNorm(dim)
        self.ffn = nn.SwiGLU(dim, rng)
        self.c_norm1 = nn.RMSNorm(dim)
        self.c_q = nn.Linear(dim, dim, rng, bias=False)
        self.c_k = nn.Linear(dim, dim, rng, bias=False)
        self.c_v = nn.Linear(dim, dim, rng, bias=False)
        self.c_out = nn.Linear(dim, dim, rng, bias=False)
        self.c_norm2 = nn.RMSNorm(dim)
        self.c_ffn = nn.SwiGLU(dim, rng)
        self.gate = T.parameter(np.zeros(1))

    def _heads(self, x):
        b, n, d = x.shape
        return T.transpose(T.reshape(x, (b, n, self.heads, d // self.heads)), (0, 2, 1, 3))

    def _merge(self, x):
        b, h, n, hd = x.shape
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * hd))

    def __call__(self, x_lat: Tensor, x_cond: Tensor, modulation):
        scale1, shift1, scale2, shift2 = modulation
        h_l = self.norm1(x_lat)
        h_l = T.add(T.mul(h_l, T.add(scale1, 1.0)), shift1)
        h_c = self.c_norm1(x_cond)

        ql = self._heads(self.q(h_l))
        kl = self._heads(self.k(h_l))
        vl = self._heads(self.v(h_l))
        qc = self._heads(self.c_q(h_c))
        kc = self._heads(self.c_k(h_c))
        vc = self._heads(self.c_v(h_c))

        g = T.tanh(T.reshape(self.gate, (1, 1, 1, 1)))

        # latent queries: joint softmax with gated condition mass
        ll = T.mul(T.matmul(ql, T.transpose(kl, (0, 1, 3, 2))), self.scale)
        lc = T.mul(T.matmul(ql, T.transpose(kc, (0, 1, 3, 2))), self.scale)
        w = T.softmax(T.concat([ll, lc], axis=-1))
        n_l = ll.shape[-1]
        w_l, w_c = T.split(w, [n_l, lc.shape[-1]], axis=-1)
        s = T.sum_(w_l, axis=-1, keepdims=True)
        numer = T.add(T.matmul(w_l, vl), T.mul(g, T.matmul(w_c, vc)))
        denom = T.maximum(T.add(s, T.mul(g, T.sub(1.0, s))), 1e-4)
        att_l = self._merge(T.div(numer, denom))
        x_lat = T.add(x_lat, self.out(att_l))

        # condition queries attend the full joint set (ungated)
        cl = T.mul(T.matmul(qc, T.transpose(kl, (0, 1, 3, 2))), self.scale)
        cc = T.mul(T.matmul(qc, T.transpose(kc, (0, 1, 3, 2))), self.scale)
        wc_all = T.softmax(T.concat([cl, cc], axis=-1))
        wc_l, wc_c = T.split(wc_all, [n_l, cc.shape[-1]], axis=-1)
        att_c = self._merge(T.add(T.matmul(wc_l, vl), T.matmul(wc_c, vc)))
        x_cond = T.add(x_cond, self.c_out(att_c))

        h_l2 = self.norm2(x_lat)
        h_l2 = T.add(T.mul(h_l2, T.add(scale2, 1.0)), shift2)
        x_lat = T.add(x_lat, self.ffn(h_l2))
        x_cond = T.add(x_cond, self.c_ffn(self.c_norm2(x_cond)))
        return x_lat, x_cond


class DualStreamFlow(nn.Module):
    """Conditional velocity model; no loss is taken on condition tokens.

    With no condition (or empty condition) the latent stream runs alone,
    which is also the exact value of the gated path at initialization.
    """

    def __init__(self, cfg: FlowConfig, rng: np.random.Generator):
        d = cfg.dim
        self.cfg = cfg
        self.in_proj = nn.Linear(cfg.latent_dim, d, rng)
        self.time_mlp = nn.MLP([d, d, d], rng)
        self.blocks = [DualStreamBlock(d, cfg.heads, rng) for _ in range(cfg.layers)]
        self.mods = [nn.Linear(d, 4 * d, rng, zero_init=True) for _ in range(cfg.layers)]
        self.out_norm = nn.RMSNorm(d)
        self.out_proj = nn.Linear(d, cfg.latent_dim, rng, zero_init=True)
        self.cond_encoder = ConditionEncoder(cfg, rng)

    def _mods(self, t, b):
        d = self.cfg.dim
        emb = nn.sinusoidal_time_embedding(np.broadcast_to(np.asarray(t, dtype=np.float64),
                                                           (b,)), d)
        feat = self.time_mlp(T.constant(emb[:, None, :]))
        return [T.split(lin(feat), [d, d, d, d], axis=-1) for lin in self.mods]

    def __call__(self, z, t, cond_tokens: Tensor | None = None) -> Tensor:
        z = z if isinstance(z, Tensor) else T.constant(z)
        b = z.shape[0]
        x = self.in_proj(z)
        mods = self._mods(t, b)
        if cond_tokens is None or cond_tokens.shape[1] == 0:
            for blk, mod in zip(self.blocks, mods):
                scale1, shift1, scale2, shift2 = mod
                h = blk.norm1(x)
                h = T.add(T.mul(h, T.add(scale1, 1.0)), shift1)
                q = blk._heads(blk.q(h))
                k = blk._heads(blk.k(h))
                v = blk._heads(blk.v(h))
                logits = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), blk.scale)
                att = blk._merge(T.matmul(T.softmax(logits), v))
                x = T.add(x, blk.out(att))
                h2 = blk.norm2(x)
                h2 = T.add(T.mul(h2, T.add(scale2, 1.0)), shift2)
                x = T.add(x, blk.ffn(h2))
        else:
            c = cond_tokens
            for blk, mod in zip(self.blocks, mods):
                x, c = blk(x, c, mod)
        return self.out_proj(self.out_norm(x))

    def velocity_with_cloud(self, z, t, clouds: np.ndarray | None) -> Tensor:
        cond = self.cond_encoder(clouds) if clouds is not None else None
        return self(z, t, cond)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@dataclass
class InpaintSpec:
    mask: np.ndarray  # (N,) bool, True = row follows the known path
    z1_known: np.ndarray  # (N, D); only masked rows are read


def euler_sample(velocity_fn, steps: int, n_particles: int, latent_dim: int,
                 rng: np.random.Generator, count: int = 1,
                 inpaint: InpaintSpec | None = None) -> np.ndarray:
    """Integrate dz/dt = v(z, t) from Gaussian noise at t=0 to t=1.

    ``velocity_fn(z (B,N,D), t scalar) -> (B,N,D)`` numpy in/out. With an
    in-painting spec, masked rows are overwritten after every step with
    their exact straight-path state, landing bit-exactly on z1 at t=1.
    """
    if steps < 1:
        raise ValueError("need at least one integration step")
    z = rng.standard_normal((count, n_particles, latent_dim))
    z0_known = None
    if inpaint is not None:
        z0_known = rng.standard_normal((count, n_particles, latent_dim))
        m = inpaint.mask
        z[:, m] = z0_known[:, m]
    dt = 1.0 / steps
    for k in range(steps):
        t_k = k / steps
        v = velocity_fn(z, t_k)
        if not np.all(np.isfinite(v)):
            raise FlowError(f"non-finite velocity at step {k} (t={t_k:.4f})")
        z = z + dt * v
        if inpaint is not None:
            t_next = (k + 1) / steps
            m = inpaint.mask
            path = t_next * inpaint.z1_known[None, m] + (1.0 - t_next) * z0_known[:, m]
            z[:, m] = path
    return z


def model_velocity_fn(model, clouds=None):
    """Wrap a backbone as a numpy velocity function."""
    if isinstance(model, DualStreamFlow):
        def fn(z, t):
            return model.velocity_with_cloud(z, t, clouds).data
    else:
        def fn(z, t):
            return model(z, t).data
    return fn


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------

def cluster_particles(latents: np.ndarray, tau: float):
    """Single-linkage merge of rows within tau (transitively).

    Returns (representatives = cluster means, labels per row). Exact
    duplicates collapse for any positive tau.
    """
    if tau <= 0:
        raise ValueError("cluster threshold must be positive")
    z = np.asarray(latents, dtype=np.float64)
    n = z.shape[0]
    d2 = np.sum((z[:, None, :] - z[None, :, :]) ** 2, axis=-1)
    close = d2 <= tau * tau
    labels = np.full(n, -1, dtype=np.int64)
    next_label = 0
    for i in range(n):
        if labels[i] >= 0:
            continue
        stack = [i]
        labels[i] = next_label
        while stack:
            a = stack.pop()
            for b in np.where(close[a] & (labels < 0))[0]:
                labels[b] = next_label
                stack.append(b)
        next_label += 1
    reps = np.stack([z[labels == c].mean(axis=0) for c in range(next_label)])
    return reps, labels


def median_nn_distance(latent_sets) -> float:
    """Median within-set nearest-neighbor distance over many latent sets."""
    dists = []
    for z in latent_sets:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[0] < 2:
            continue
        d2 = np.sum((z[:, None, :] - z[None, :, :]) ** 2, axis=-1)
        np.fill_diagonal(d2, np.inf)
        dists.append(np.sqrt(d2.min(axis=1)))
    if not dists:
        return 0.0
    return float(np.median(np.concatenate(dists)))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def pad_latents(z: np.ndarray, budget: int, rng: np.random.Generator):
    """Duplicate random rows up to the budget; returns (padded, source ids)."""
    n = z.shape[0]
    if n > budget:
        raise ValueError(f"latent set of {n} rows exceeds budget {budget}")
    src = np.concatenate([np.arange(n), rng.integers(0, n, size=budget - n)])
    return z[src], src


@dataclass
class FlowLossReport:
    total: float
    step: int = 0

    def to_dict(self):
        return {"total": float(self.total), "step": self.step}


def flow_train_step(model, opt: nn.AdamW, batch: np.ndarray,
                    rng: np.random.Generator, cfg: FlowConfig,
                    clouds: np.ndarray | None = None,
                    inpaint_sim: bool = True) -> FlowLossReport:
    """One optimization step of the flow-matching objective."""
    b, n, d = batch.shape
    t = sample_t_logit_normal(rng, cfg.logit_mean, cfg.logit_std, size=b)
    z0 = rng.standard_normal(batch.shape)
    z_t, v_star = rf_interpolate(z0, batch, t)
    keep = np.ones((b, n), dtype=bool)
    if inpaint_sim and cfg.inpaint_fix_fraction > 0:
        k = int(round(cfg.inpaint_fix_fraction * n))
        for i in range(b):
            keep[i, rng.choice(n, size=k, replace=False)] = False
    with T.Tape() as tape:
        if isinstance(model, DualStreamFlow):
            v_pred = model.velocity_with_cloud(z_t, t, clouds)
        else:
            v_pred = model(z_t, t)
        loss = flow_loss(v_pred, v_star, cfg.dir_loss_weight, keep_mask=keep)
    value = loss.item()
    if not np.isfinite(value):
        raise FlowError("non-finite flow loss")
    model.zero_grad()
    tape.backward(loss)
    step = opt.step()
    if step.skipped:
        raise FlowError(f"step rejected, non-finite gradients in {step.nan_params}")
    return FlowLossReport(total=value, step=step.step)
