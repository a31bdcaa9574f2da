"""Distribution, diversity, and CAD-quality metrics.

Point-set distances use the squared-nearest-neighbor chamfer distance.
MMD / coverage / 1-NNA follow the standard generative point-cloud
protocol; JSD compares pooled voxel occupancy distributions; the CAD
metrics summarize checker verdicts and 1-skeleton cyclomatic complexity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import pairwise_chamfer as _pairwise_chamfer

WORKERS = 1  # nearest-neighbor query threads; the CLI sets this from --threads


def pairwise_chamfer(clouds_a, clouds_b) -> np.ndarray:
    return _pairwise_chamfer(clouds_a, clouds_b, workers=WORKERS)


# ---------------------------------------------------------------------------
# distribution metrics
# ---------------------------------------------------------------------------

def distribution_metrics(gen_clouds, ref_clouds) -> dict:
    """MMD, coverage, and leave-one-out 1-NN accuracy between cloud lists.

    MMD: mean over references of the closest generated distance.
    COV: fraction of references that are the nearest reference of at
    least one generated sample. 1-NNA: accuracy of a 1-NN classifier
    separating generated from reference in the union (0.5 is ideal,
    0 means the sets mirror each other exactly).
    """
    if not len(gen_clouds) or not len(ref_clouds):
        raise ValueError("metric inputs must be non-empty")
    d_gr = pairwise_chamfer(gen_clouds, ref_clouds)
    mmd = float(d_gr.min(axis=0).mean())
    cov = float(len(np.unique(d_gr.argmin(axis=1))) / d_gr.shape[1])

    d_gg = pairwise_chamfer(gen_clouds, gen_clouds)
    d_rr = pairwise_chamfer(ref_clouds, ref_clouds)
    n_g, n_r = d_gr.shape
    full = np.block([[d_gg, d_gr], [d_gr.T, d_rr]])
    np.fill_diagonal(full, np.inf)
    labels = np.concatenate([np.ones(n_g), np.zeros(n_r)])
    pred = labels[full.argmin(axis=1)]
    one_nna = float(np.mean(pred == labels))
    return {"mmd": mmd, "cov": cov, "one_nna": one_nna}


def jsd_voxel(gen_clouds, ref_clouds, grid: int = 28) -> float:
    """Jensen-Shannon divergence (natural log) of pooled voxel occupancy."""
    p = _occupancy(gen_clouds, grid)
    q = _occupancy(ref_clouds, grid)
    m = 0.5 * (p + q)
    return float(0.5 * _kl(p, m) + 0.5 * _kl(q, m))


def _occupancy(clouds, grid: int) -> np.ndarray:
    counts = np.zeros(grid ** 3)
    for cloud in clouds:
        pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
        idx = np.clip(((pts + 1.0) * 0.5 * grid).astype(int), 0, grid - 1)
        flat = idx[:, 0] * grid * grid + idx[:, 1] * grid + idx[:, 2]
        counts += np.bincount(flat, minlength=grid ** 3)
    total = counts.sum()
    return counts / total if total > 0 else counts


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def novelty_uniqueness(gen_clouds, train_clouds, tau_novel: float = 0.03,
                       tau_unique: float = 0.015) -> dict:
    """Fraction novel w.r.t. training data, fraction without a near twin."""
    if tau_novel <= 0 or tau_unique <= 0:
        raise ValueError("thresholds must be positive")
    novelty = 1.0
    if len(train_clouds):
        d_gt = pairwise_chamfer(gen_clouds, train_clouds)
        novelty = float(np.mean(d_gt.min(axis=1) > tau_novel))
    d_gg = pairwise_chamfer(gen_clouds, gen_clouds)
    np.fill_diagonal(d_gg, np.inf)
    unique = float(np.mean(d_gg.min(axis=1) > tau_unique)) if len(gen_clouds) > 1 else 1.0
    return {"novelty": novelty, "uniqueness": unique}


# ---------------------------------------------------------------------------
# CAD metrics
# ---------------------------------------------------------------------------

def cyclomatic_complexity(cc) -> int:
    """E - V + 2P on the vertex-edge graph (P = connected components)."""
    vids = set(cc.vertices)
    adj = {v: [] for v in vids}
    for edge in cc.edges.values():
        a, b = edge.v
        if a in adj and b in adj:
            adj[a].append(b)
            adj[b].append(a)
    seen = set()
    components = 0
    for v in sorted(vids):
        if v in seen:
            continue
        components += 1
        stack = [v]
        seen.add(v)
        while stack:
            x = stack.pop()
            for y in adj[x]:
                if y not in seen:
                    seen.add(y)
                    stack.append(y)
    return len(cc.edges) - len(cc.vertices) + 2 * components


def cad_metrics(models, k_max: int = 15) -> dict:
    """Valid rate, min-k valid table, and mean cyclomatic complexity.

    ``models`` expose ``verdict`` and ``complex``. min-k restricts to
    models with at least k faces; entries with no qualifying model are
    None. CC averages over valid models only.
    """
    if not models:
        raise ValueError("no models to evaluate")
    verdicts = np.array([bool(m.verdict) for m in models])
    faces = np.array([len(m.complex.faces) for m in models])
    valid = float(verdicts.mean())
    min_k = {}
    for k in range(1, k_max + 1):
        sel = faces >= k
        min_k[k] = float(verdicts[sel].mean()) if sel.any() else None
    ccs = [cyclomatic_complexity(m.complex) for m, ok in zip(models, verdicts) if ok]
    mean_cc = float(np.mean(ccs)) if ccs else 0.0
    return {"valid": valid, "min_k": min_k, "cc": mean_cc}


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    one_nna: float  # percent
    mmd_x100: float
    jsd_x100: float
    cov: float  # percent
    novelty: float  # percent
    uniqueness: float  # percent
    valid: float  # percent
    cc: float
    min_k: dict = field(default_factory=dict)
    n_gen: int = 0
    n_ref: int = 0
    runs: int = 1
    seed: int = 0

    def to_dict(self) -> dict:
        d = dict(vars(self))
        d["min_k"] = {str(k): v for k, v in self.min_k.items()}
        return d

    def table(self) -> str:
        rows = [
            ("1-NNA %", self.one_nna), ("MMD x100", self.mmd_x100),
            ("JSD x100", self.jsd_x100), ("COV %", self.cov),
            ("Novelty %", self.novelty), ("Uniqueness %", self.uniqueness),
            ("Valid %", self.valid), ("CC", self.cc),
        ]
        width = max(len(name) for name, _ in rows)
        lines = [f"{name:<{width}}  {value:8.3f}" for name, value in rows]
        lines.append("min-k valid %:")
        for k in sorted(self.min_k):
            v = self.min_k[k]
            lines.append(f"  k>={k:<3d} {'-' if v is None else format(v * 100, '7.2f')}")
        return "\n".join(lines)


def evaluate(gen_models, ref_clouds, gen_clouds, train_clouds=None,
             tau_novel: float = 0.03, tau_unique: float = 0.015,
             seed: int = 0, runs: int = 1) -> EvalReport:
    """Assemble the full metric report from sampled clouds and verdicts."""
    dist = distribution_metrics(gen_clouds, ref_clouds)
    jsd = jsd_voxel(gen_clouds, ref_clouds)
    nu = novelty_uniqueness(gen_clouds, train_clouds or [], tau_novel, tau_unique)
    cad = cad_metrics(gen_models)
    return EvalReport(
        one_nna=dist["one_nna"] * 100.0,
        mmd_x100=dist["mmd"] * 100.0,
        jsd_x100=jsd * 100.0,
        cov=dist["cov"] * 100.0,
        novelty=nu["novelty"] * 100.0,
        uniqueness=nu["uniqueness"] * 100.0,
        valid=cad["valid"] * 100.0,
        cc=cad["cc"],
        min_k=cad["min_k"],
        n_gen=len(gen_clouds),
        n_ref=len(ref_clouds),
        runs=runs,
        seed=seed,
    )
