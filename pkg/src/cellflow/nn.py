"""Neural network layers and optimizers on top of the tensor engine.

All forward paths are batched: token sets are (B, N, D) arrays. Layers
are immutable during forward; the optimizer mutates parameter data in
place. Initialization draws from an explicit numpy Generator so model
construction is reproducible from a seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


# ---------------------------------------------------------------------------
# module plumbing
# ---------------------------------------------------------------------------

class Module:
    """Base class providing recursive named-parameter traversal."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}" if not prefix else f"{prefix}.{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state dict mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        bound = 1.0 / np.sqrt(in_dim)
        w = np.zeros((in_dim, out_dim)) if zero_init else _uniform(rng, (in_dim, out_dim), bound)
        self.weight = T.parameter(w)
        self.bias = T.parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out


class Embedding(Module):
    def __init__(self, count: int, dim: int, rng: np.random.Generator):
        self.weight = T.parameter(rng.normal(0.0, 0.02, size=(count, dim)))

    def __call__(self, indices) -> Tensor:
        return T.take(self.weight, np.asarray(indices), axis=0)


class RMSNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.weight = T.parameter(np.ones(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        ms = T.mean(T.mul(x, x), axis=-1, keepdims=True)
        inv = T.power(T.add(ms, self.eps), -0.5)
        return T.mul(T.mul(x, inv), self.weight)


def swiglu_hidden_dim(dim: int) -> int:
    # 8/3 expansion rounded to a multiple of 8
    return int(np.ceil(dim * 8.0 / 3.0 / 8.0) * 8)


class SwiGLU(Module):
    """Gated feed-forward: down(silu(gate(x)) * up(x))."""

    def __init__(self, dim: int, rng: np.random.Generator, hidden: int | None = None):
        hidden = hidden or swiglu_hidden_dim(dim)
        self.gate = Linear(dim, hidden, rng, bias=False)
        self.up = Linear(dim, hidden, rng, bias=False)
        self.down = Linear(hidden, dim, rng, bias=False)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(T.mul(T.silu(self.gate(x)), self.up(x)))


class MLP(Module):
    """Plain fully connected stack with ReLU between layers."""

    def __init__(self, dims, rng: np.random.Generator, zero_init_last: bool = False):
        self.layers = [
            Linear(dims[i], dims[i + 1], rng,
                   zero_init=zero_init_last and i == len(dims) - 2)
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    hd = d // heads
    return T.transpose(T.reshape(x, (b, n, heads, hd)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, hd = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * hd))


class MultiheadAttention(Module):
    """Scaled dot-product attention over a key/value token set.

    ``mask`` (B, Nk) marks padded kv tokens; they receive exactly zero
    attention weight. Output is invariant to any permutation of the kv
    tokens.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 q_dim: int | None = None, kv_dim: int | None = None):
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by head count {heads}")
        self.heads = heads
        self.scale = 1.0 / np.sqrt(dim // heads)
        self.q_proj = Linear(q_dim or dim, dim, rng, bias=False)
        self.k_proj = Linear(kv_dim or dim, dim, rng, bias=False)
        self.v_proj = Linear(kv_dim or dim, dim, rng, bias=False)
        self.out_proj = Linear(dim, dim, rng, bias=False)

    def __call__(self, q_tokens: Tensor, kv_tokens: Tensor, mask=None) -> Tensor:
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != kv_tokens.shape[:2]:
                raise T.ShapeError(
                    f"attention mask shape {mask.shape} != kv token shape {kv_tokens.shape[:2]}")
        q = _split_heads(self.q_proj(q_tokens), self.heads)
        k = _split_heads(self.k_proj(kv_tokens), self.heads)
        v = _split_heads(self.v_proj(kv_tokens), self.heads)
        logits = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), self.scale)
        if mask is not None:
            logits = T.masked_fill(logits, mask[:, None, None, :], -1e9)
        attn = T.softmax(logits)
        out = _merge_heads(T.matmul(attn, v))
        return self.out_proj(out)


class TransformerBlock(Module):
    """Pre-norm self-attention + gated FFN with optional scale/shift modulation."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.norm1 = RMSNorm(dim)
        self.attn = MultiheadAttention(dim, heads, rng)
        self.norm2 = RMSNorm(dim)
        self.ffn = SwiGLU(dim, rng)

    def __call__(self, x: Tensor, mask=None, modulation=None) -> Tensor:
        h = self.norm1(x)
        if modulation is not None:
            scale1, shift1, scale2, shift2 = modulation
            h = T.add(T.mul(h, T.add(scale1, 1.0)), shift1)
        x = T.add(x, self.attn(h, h, mask=mask))
        h = self.norm2(x)
        if modulation is not None:
            h = T.add(T.mul(h, T.add(scale2, 1.0)), shift2)
        return T.add(x, self.ffn(h))


class CrossAttentionBlock(Module):
    """Pre-norm cross-attention of query tokens over a context token set."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 q_dim: int | None = None, kv_dim: int | None = None):
        self.q_in = Linear(q_dim or dim, dim, rng) if q_dim else None
        self.kv_in = Linear(kv_dim or dim, dim, rng) if kv_dim else None
        self.norm_q = RMSNorm(dim)
        self.norm_kv = RMSNorm(dim)
        self.attn = MultiheadAttention(dim, heads, rng)

    def __call__(self, queries: Tensor, context: Tensor, mask=None) -> Tensor:
        q = self.q_in(queries) if self.q_in else queries
        kv = self.kv_in(context) if self.kv_in else context
        return T.add(q, self.attn(self.norm_q(q), self.norm_kv(kv), mask=mask))


# ---------------------------------------------------------------------------
# graph convolution
# ---------------------------------------------------------------------------

class GcnLayer(Module):
    """One graph convolution: relu(A_hat x W + b) with A_hat supplied by the caller.

    The caller provides the symmetrically normalized adjacency
    D^{-1/2}(A+I)D^{-1/2}; an isolated node therefore reduces to
    relu(W x_i + b).
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 activation: bool = True):
        self.linear = Linear(in_dim, out_dim, rng)
        self.activation = activation

    def __call__(self, node_feats: Tensor, adj_norm) -> Tensor:
        adj = adj_norm if isinstance(adj_norm, Tensor) else T.constant(adj_norm)
        if adj.shape[-1] != adj.shape[-2] or adj.shape[-1] != node_feats.shape[-2]:
            raise T.ShapeError(
                f"gcn: adjacency {adj.shape} incompatible with features {node_feats.shape}")
        out = self.linear(T.matmul(adj, node_feats))
        return T.relu(out) if self.activation else out


# ---------------------------------------------------------------------------
# positional features
# ---------------------------------------------------------------------------

def fourier_features(x: np.ndarray, bands: int) -> np.ndarray:
    """Sin/cos features of 2^k * pi * x for k < bands, raw coords appended.

    Input (..., 3) in [-1, 1]; output (..., 6*bands + 3).
    """
    x = np.asarray(x, dtype=T.get_default_dtype())
    parts = []
    for k in range(bands):
        ang = (2.0 ** k) * np.pi * x
        parts.append(np.sin(ang))
        parts.append(np.cos(ang))
    parts.append(x)
    return np.concatenate(parts, axis=-1)


def sinusoidal_time_embedding(t: np.ndarray, dim: int, max_period: float = 1e4) -> np.ndarray:
    """Classic sinusoidal embedding of scalar times, shape (B, dim)."""
    t = np.asarray(t, dtype=T.get_default_dtype()).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half).astype(t.dtype)
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1), dtype=t.dtype)], axis=-1)
    return emb


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------

def rotation_6d_to_matrix(x: Tensor) -> Tensor:
    """Gram-Schmidt two 3-vectors (rows, (R, 6)) into rotation matrices (R, 3, 3)."""
    a, b = T.split(x, [3, 3], axis=-1)

    def normalize(v):
        n = T.power(T.add(T.sum_(T.mul(v, v), axis=-1, keepdims=True), 1e-12), -0.5)
        return T.mul(v, n)

    e1 = normalize(a)
    b_proj = T.mul(T.sum_(T.mul(e1, b), axis=-1, keepdims=True), e1)
    e2 = normalize(T.sub(b, b_proj))
    e3 = _cross(e1, e2)
    cols = [T.reshape(e, e.shape + (1,)) for e in (e1, e2, e3)]
    return T.concat(cols, axis=-1)


def _cross(a: Tensor, b: Tensor) -> Tensor:
    ax, ay, az = T.split(a, [1, 1, 1], axis=-1)
    bx, by, bz = T.split(b, [1, 1, 1], axis=-1)
    return T.concat([
        T.sub(T.mul(ay, bz), T.mul(az, by)),
        T.sub(T.mul(az, bx), T.mul(ax, bz)),
        T.sub(T.mul(ax, by), T.mul(ay, bx)),
    ], axis=-1)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class StepReport:
    skipped: bool = False
    nan_params: list = field(default_factory=list)
    step: int = 0


class AdamW:
    """Bias-corrected AdamW with decoupled weight decay and an EMA shadow.

    A step with any non-finite gradient is rejected and reported rather
    than applied. The EMA shadow starts as a copy of the parameters and
    follows s <- d*s + (1-d)*p after every applied step.
    """

    def __init__(self, named_params, lr: float = 1e-4, betas=(0.9, 0.95),
                 eps: float = 1e-8, weight_decay: float = 0.0,
                 ema_decay: float | None = None):
        self.params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        if ema_decay is not None and not (0.0 < ema_decay < 1.0):
            raise ValueError(f"ema decay must lie in (0,1), got {ema_decay}")
        self.ema_decay = ema_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}
        self.ema = ({name: p.data.copy() for name, p in self.params}
                    if ema_decay is not None else None)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> StepReport:
        bad = [name for name, p in self.params
               if p.grad is not None and not np.all(np.isfinite(p.grad))]
        if bad:
            return StepReport(skipped=True, nan_params=bad, step=self.step_count)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update
        if self.ema is not None:
            d = self.ema_decay
            for name, p in self.params:
                s = self.ema[name]
                s *= d
                s += (1.0 - d) * p.data
        return StepReport(step=t)

    def ema_state(self) -> dict:
        if self.ema is None:
            raise RuntimeError("optimizer was built without an EMA shadow")
        return {name: s.copy() for name, s in self.ema.items()}
