"""Procedural dataset generation, normalization, padding, and record IO.

The catalog builds planar-faced solids (plus one open shell and
wireframe variants) with randomized dimensions and orientation, then
normalizes each model so the largest bounding-box axis spans exactly
[-1, 1]. Records are serialized as line-delimited JSON with a schema
version; floats use repr formatting, so round trips are bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .cells import (
    CellComplex,
    Edge,
    Face,
    SpatialHasseDiagram,
    build_hasse_diagram,
    laplacian_positional_encoding,
    link_target_matrix,
    loop_vertex_chain,
    normalized_adjacency,
    validate_complex,
)
from .geometry import (
    CanonicalFrame,
    RationalCubicBezier,
    line_bezier,
    points_in_loops_evenodd,
    random_rotation,
    shoelace_area,
)

SCHEMA_VERSION = 1
GRID_SIZE = 16
CURVE_SAMPLES = 32
CLOUD_POINTS = 2048

CATALOG = ("box", "prism", "pyramid", "frustum", "wedge",
           "l-extrusion", "hole-box", "roof-shell")


class DatasetError(RuntimeError):
    pass


@dataclass
class DatasetRecord:
    id: str
    complex: CellComplex
    cloud: np.ndarray  # (P, 3)
    center: np.ndarray  # normalization translation applied at build time
    scale: float


# ---------------------------------------------------------------------------
# polyhedron construction
# ---------------------------------------------------------------------------

def _plane_basis(points: np.ndarray):
    """In-plane orthonormal basis (u, v, newell normal) for a vertex cycle."""
    pts = np.asarray(points, dtype=np.float64)
    nxt = np.roll(pts, -1, axis=0)
    normal = np.array([
        np.sum((pts[:, 1] - nxt[:, 1]) * (pts[:, 2] + nxt[:, 2])),
        np.sum((pts[:, 2] - nxt[:, 2]) * (pts[:, 0] + nxt[:, 0])),
        np.sum((pts[:, 0] - nxt[:, 0]) * (pts[:, 1] + nxt[:, 1])),
    ])
    normal /= np.linalg.norm(normal)
    u = pts[1] - pts[0]
    u = u - (u @ normal) * normal
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    return u, v, normal


def _face_grid(vertex_cycles, grid_size: int = GRID_SIZE):
    """Planar patch samples over the bounding rectangle of all loops."""
    outer = np.asarray(vertex_cycles[0], dtype=np.float64)
    u, v, normal = _plane_basis(outer)
    origin = outer[0]
    all_pts = np.concatenate([np.asarray(c, dtype=np.float64) for c in vertex_cycles])
    rel = all_pts - origin
    a = rel @ u
    b = rel @ v
    sa = np.linspace(a.min(), a.max(), grid_size)
    sb = np.linspace(b.min(), b.max(), grid_size)
    ga, gb = np.meshgrid(sa, sb, indexing="ij")
    return origin + ga[..., None] * u + gb[..., None] * v


def build_polyhedron(vertices: np.ndarray, face_loops, mode: str = "solid",
                     grid_size: int = GRID_SIZE) -> CellComplex:
    """Assemble a complex from positions and per-face vertex cycles.

    ``face_loops`` is a list of faces; each face is a list of loops and
    each loop a list of 0-based vertex indices. Outer loops wind
    counter-clockwise seen from outside the solid, holes clockwise.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    verts = {i + 1: vertices[i].copy() for i in range(len(vertices))}
    edge_ids: dict = {}
    edges: dict = {}

    def edge_for(a: int, b: int):
        key = (min(a, b), max(a, b))
        if key not in edge_ids:
            eid = len(edge_ids) + 1
            edge_ids[key] = eid
            edges[eid] = Edge(v=(a + 1, b + 1),
                              curve=line_bezier(vertices[a], vertices[b]))
        eid = edge_ids[key]
        return eid if edges[eid].v == (a + 1, b + 1) else -eid

    faces: dict = {}
    if mode != "wireframe":
        for loops in face_loops:
            signed_loops = [[edge_for(loop[i], loop[(i + 1) % len(loop)])
                             for i in range(len(loop))] for loop in loops]
            cycles = [vertices[np.asarray(loop)] for loop in loops]
            grid = _face_grid(cycles, grid_size)
            fid = len(faces) + 1
            u, v, normal = _plane_basis(cycles[0])
            faces[fid] = Face(loops=signed_loops, grid=grid,
                              frame=CanonicalFrame(np.stack([u, v, normal], axis=1),
                                                   cycles[0][0]))
    else:
        for loops in face_loops:
            for loop in loops:
                for i in range(len(loop)):
                    edge_for(loop[i], loop[(i + 1) % len(loop)])

    cc = CellComplex(vertices=verts, edges=edges, faces=faces, mode=mode)
    validate_complex(cc)
    return cc


def _prism_faces(n: int):
    bottom = [list(range(n - 1, -1, -1))]
    top = [list(range(n, 2 * n))]
    sides = [[[i, (i + 1) % n, n + (i + 1) % n, n + i]] for i in range(n)]
    return [bottom, top] + sides


def _box_vertices(w, h, d):
    return np.array([
        [0, 0, 0], [w, 0, 0], [w, h, 0], [0, h, 0],
        [0, 0, d], [w, 0, d], [w, h, d], [0, h, d],
    ], dtype=np.float64)


_BOX_FACES = [
    [[0, 3, 2, 1]], [[4, 5, 6, 7]],
    [[0, 1, 5, 4]], [[2, 3, 7, 6]],
    [[0, 4, 7, 3]], [[1, 2, 6, 5]],
]


def _build_box(rng):
    w, h, d = rng.uniform(0.2, 1.0, size=3)
    return _box_vertices(w, h, d), _BOX_FACES


def _build_prism(rng):
    n = int(rng.integers(3, 9))
    r = rng.uniform(0.2, 1.0) * 0.5
    h = rng.uniform(0.2, 1.0)
    ang = 2.0 * np.pi * np.arange(n) / n
    ring = np.stack([r * np.cos(ang), r * np.sin(ang), np.zeros(n)], axis=1)
    verts = np.concatenate([ring, ring + [0, 0, h]])
    return verts, _prism_faces(n)


def _build_pyramid(rng):
    w, h, k = rng.uniform(0.2, 1.0, size=3)
    verts = np.array([
        [0, 0, 0], [w, 0, 0], [w, h, 0], [0, h, 0], [w / 2, h / 2, k],
    ], dtype=np.float64)
    faces = [[[0, 3, 2, 1]], [[0, 1, 4]], [[1, 2, 4]], [[2, 3, 4]], [[3, 0, 4]]]
    return verts, faces


def _build_frustum(rng):
    w, h, d = rng.uniform(0.2, 1.0, size=3)
    s = rng.uniform(0.3, 0.8)
    x0, y0 = w * (1 - s) / 2, h * (1 - s) / 2
    verts = np.array([
        [0, 0, 0], [w, 0, 0], [w, h, 0], [0, h, 0],
        [x0, y0, d], [x0 + w * s, y0, d], [x0 + w * s, y0 + h * s, d], [x0, y0 + h * s, d],
    ], dtype=np.float64)
    return verts, _BOX_FACES


def _build_wedge(rng):
    w, h, d = rng.uniform(0.2, 1.0, size=3)
    verts = np.array([
        [0, 0, 0], [w, 0, 0], [0, h, 0],
        [0, 0, d], [w, 0, d], [0, h, d],
    ], dtype=np.float64)
    return verts, _prism_faces(3)


def _build_l_extrusion(rng):
    w, h, d = rng.uniform(0.4, 1.0, size=3)
    a = h * rng.uniform(0.3, 0.6)
    b = w * rng.uniform(0.3, 0.6)
    poly = np.array([[0, 0], [w, 0], [w, a], [b, a], [b, h], [0, h]], dtype=np.float64)
    n = len(poly)
    bottom = np.concatenate([poly, np.zeros((n, 1))], axis=1)
    verts = np.concatenate([bottom, bottom + [0, 0, d]])
    return verts, _prism_faces(n)


def _build_hole_box(rng):
    # through-hole solid with disk faces only: each end annulus is split
    # into two C-shaped halves by radial bridge edges, so the plain Euler
    # formula applies (V=16, E=28, F=12, V-E+F=0, genus 1)
    w, h, d = rng.uniform(0.5, 1.0, size=3)
    x1, x2 = w * rng.uniform(0.15, 0.35), w * rng.uniform(0.6, 0.85)
    y1, y2 = h * rng.uniform(0.15, 0.35), h * rng.uniform(0.6, 0.85)
    verts = np.array([
        [0, 0, 0], [w, 0, 0], [w, h, 0], [0, h, 0],
        [x1, y1, 0], [x2, y1, 0], [x2, y2, 0], [x1, y2, 0],
        [0, 0, d], [w, 0, d], [w, h, d], [0, h, d],
        [x1, y1, d], [x2, y1, d], [x2, y2, d], [x1, y2, d],
    ], dtype=np.float64)
    faces = [
        [[4, 5, 6, 2, 1, 0]], [[6, 7, 4, 0, 3, 2]],          # bottom halves
        [[8, 9, 10, 14, 13, 12]], [[10, 11, 8, 12, 15, 14]],  # top halves
        [[0, 1, 9, 8]], [[1, 2, 10, 9]], [[2, 3, 11, 10]], [[3, 0, 8, 11]],
        [[5, 4, 12, 13]], [[6, 5, 13, 14]], [[7, 6, 14, 15]], [[4, 7, 15, 12]],
    ]
    return verts, faces


def _build_roof_shell(rng):
    w, h = rng.uniform(0.4, 1.0, size=2)
    k = rng.uniform(0.2, 0.8)
    verts = np.array([
        [0, 0, 0], [w, 0, 0], [w, h, 0], [0, h, 0],
        [0, h / 2, k], [w, h / 2, k],
    ], dtype=np.float64)
    faces = [[[0, 1, 5, 4]], [[2, 3, 4, 5]]]
    return verts, faces


_BUILDERS = {
    "box": (_build_box, "solid"),
    "prism": (_build_prism, "solid"),
    "pyramid": (_build_pyramid, "solid"),
    "frustum": (_build_frustum, "solid"),
    "wedge": (_build_wedge, "solid"),
    "l-extrusion": (_build_l_extrusion, "solid"),
    "hole-box": (_build_hole_box, "solid"),
    "roof-shell": (_build_roof_shell, "open-shell"),
}


def normalize_vertices(verts: np.ndarray):
    """Center on the origin, scale the largest axis to exactly [-1, 1]."""
    lo = verts.min(axis=0)
    hi = verts.max(axis=0)
    center = (lo + hi) / 2.0
    scale = 2.0 / float((hi - lo).max())
    return (verts - center) * scale, center, scale


def generate_synthetic_solid(kind: str, seed, mode: str = "solid") -> CellComplex:
    """Build one randomized catalog model in normalized coordinates.

    ``mode='wireframe'`` strips faces from any kind. A roof shell is an
    open shell regardless of the requested solid mode.
    """
    if kind not in _BUILDERS:
        raise ValueError(f"unknown kind {kind!r}; catalog: {CATALOG}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    builder, natural_mode = _BUILDERS[kind]
    verts, faces = builder(rng)
    verts = verts @ random_rotation(rng).T
    verts, _, _ = normalize_vertices(verts)
    out_mode = "wireframe" if mode == "wireframe" else natural_mode
    return build_polyhedron(verts, faces, mode=out_mode)


# ---------------------------------------------------------------------------
# surface sampling
# ---------------------------------------------------------------------------

def _face_sampling_data(cc: CellComplex, fid: int):
    """2-D boundary loops, frame basis, and a lift map for one face."""
    face = cc.faces[fid]
    frame = face.frame
    e1, e2 = frame.R[:, 0], frame.R[:, 1]
    origin = frame.t
    loops2d = []
    for loop in face.loops:
        pts = []
        for signed in loop:
            curve = cc.edges[abs(signed)].curve
            seg = curve.sample(CURVE_SAMPLES)
            if signed < 0:
                seg = seg[::-1]
            pts.append(seg[:-1])
        poly = np.concatenate(pts, axis=0)
        rel = poly - origin
        loops2d.append(np.stack([rel @ e1, rel @ e2], axis=1))
    area = abs(sum(shoelace_area(lp) for lp in loops2d))
    return loops2d, (origin, e1, e2), area


def _lift_via_grid(face: Face, origin, e1, e2, ab: np.ndarray) -> np.ndarray:
    """Map 2-D in-plane samples onto the face patch (plane + grid offset)."""
    grid = face.grid
    g = grid.shape[0]
    rel = grid.reshape(-1, 3) - origin
    ga = (rel @ e1).reshape(g, g)
    gb = (rel @ e2).reshape(g, g)
    normal = np.cross(e1, e2)
    goff = (rel @ normal).reshape(g, g)
    # affine fit of lattice coords -> (a, b); exact for our bbox lattices
    a00, b00 = ga[0, 0], gb[0, 0]
    da = np.array([ga[-1, 0] - a00, gb[-1, 0] - b00])
    db = np.array([ga[0, -1] - a00, gb[0, -1] - b00])
    m = np.stack([da, db], axis=1)
    if abs(np.linalg.det(m)) < 1e-18:
        return origin + ab[:, 0, None] * e1 + ab[:, 1, None] * e2
    st = np.linalg.solve(m, (ab - [a00, b00]).T).T  # fractions of the lattice
    fi = np.clip(st[:, 0] * (g - 1), 0, g - 1 - 1e-9)
    fj = np.clip(st[:, 1] * (g - 1), 0, g - 1 - 1e-9)
    i0 = fi.astype(int)
    j0 = fj.astype(int)
    wi = fi - i0
    wj = fj - j0
    off = (goff[i0, j0] * (1 - wi) * (1 - wj) + goff[i0 + 1, j0] * wi * (1 - wj)
           + goff[i0, j0 + 1] * (1 - wi) * wj + goff[i0 + 1, j0 + 1] * wi * wj)
    return origin + ab[:, 0, None] * e1 + ab[:, 1, None] * e2 + off[:, None] * normal


def surface_point_cloud(cc: CellComplex, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform-by-area samples of the trimmed surface (edges for wireframes).

    Faces are sampled by rejection against their boundary loops in the
    face plane (even-odd rule, so holes are excluded), then lifted onto
    the patch. Assumes loops are closed; orientation does not matter for
    containment, only for the area weights, which use the net shoelace
    sum.
    """
    if cc.mode == "wireframe" or not cc.faces:
        return _edge_point_cloud(cc, count, rng)
    data = {}
    weights = []
    fids = sorted(cc.faces)
    for fid in fids:
        loops2d, basis, area = _face_sampling_data(cc, fid)
        data[fid] = (loops2d, basis)
        weights.append(max(area, 0.0))
    weights = np.asarray(weights)
    if weights.sum() <= 0:
        return _edge_point_cloud(cc, count, rng)
    counts = rng.multinomial(count, weights / weights.sum())
    out = []
    for fid, m in zip(fids, counts):
        if m == 0:
            continue
        loops2d, (origin, e1, e2) = data[fid]
        allv = np.concatenate(loops2d)
        lo = allv.min(axis=0)
        hi = allv.max(axis=0)
        got = []
        need = int(m)
        for _ in range(200):
            cand = rng.uniform(lo, hi, size=(max(need * 2, 16), 2))
            hit = cand[points_in_loops_evenodd(cand, loops2d)]
            if len(hit):
                got.append(hit[:need])
                need -= len(got[-1])
            if need <= 0:
                break
        if need > 0:  # extremely thin face; fall back to boundary points
            got.append(np.repeat(allv[:1], need, axis=0))
        ab = np.concatenate(got)[:m]
        out.append(_lift_via_grid(cc.faces[fid], origin, e1, e2, ab))
    return np.concatenate(out, axis=0)


def _edge_point_cloud(cc: CellComplex, count: int, rng: np.random.Generator) -> np.ndarray:
    eids = sorted(cc.edges)
    if not eids:
        return np.zeros((0, 3))
    polys = [cc.edges[e].curve.sample(CURVE_SAMPLES) for e in eids]
    lengths = np.array([np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1)) for p in polys])
    if lengths.sum() <= 0:
        lengths = np.ones(len(eids))
    counts = rng.multinomial(count, lengths / lengths.sum())
    out = []
    for poly, m in zip(polys, counts):
        if m == 0:
            continue
        seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
        seg = seg / seg.sum() if seg.sum() > 0 else np.full(len(seg), 1.0 / len(seg))
        idx = rng.choice(len(seg), size=m, p=seg)
        t = rng.uniform(size=m)[:, None]
        out.append(poly[idx] * (1 - t) + poly[idx + 1] * t)
    return np.concatenate(out, axis=0)


def generate_record(kind: str, seed, mode: str = "solid",
                    cloud_points: int = CLOUD_POINTS) -> DatasetRecord:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cc = generate_synthetic_solid(kind, rng, mode=mode)
    cloud = surface_point_cloud(cc, cloud_points, rng)
    return DatasetRecord(id=f"{kind}-{mode}", complex=cc, cloud=cloud,
                         center=np.zeros(3), scale=1.0)


def generate_dataset(kinds, count: int, seed: int, mode: str = "solid",
                     cloud_points: int = CLOUD_POINTS) -> list:
    """Cycle kinds until ``count`` records exist; reproducible from the seed."""
    kinds = list(kinds)
    seeds = np.random.SeedSequence(seed).spawn(count)
    records = []
    for i in range(count):
        kind = kinds[i % len(kinds)]
        rec = generate_record(kind, np.random.default_rng(seeds[i]), mode=mode,
                              cloud_points=cloud_points)
        rec.id = f"{kind}-{mode}-{i:06d}"
        records.append(rec)
    return records


def split_records(records, seed: int, ratios=(0.9, 0.05, 0.05)):
    """Deterministic train/test/validation split."""
    order = np.random.default_rng(seed).permutation(len(records))
    n_train = int(round(len(records) * ratios[0]))
    n_test = int(round(len(records) * ratios[1]))
    train = [records[i] for i in order[:n_train]]
    test = [records[i] for i in order[n_train:n_train + n_test]]
    val = [records[i] for i in order[n_train + n_test:]]
    return train, test, val


# ---------------------------------------------------------------------------
# padding
# ---------------------------------------------------------------------------

@dataclass
class PaddedSample:
    """Arrays the encoder/decoder consume, with duplicate bookkeeping.

    Slot i holds a copy of diagram node ``src[i]``; the first n slots are
    the original nodes in diagram order, the rest are duplicates flagged
    in ``dup_mask``. Dropping flagged slots recovers the original sample
    exactly.
    """

    record: DatasetRecord
    diagram: SpatialHasseDiagram
    src: np.ndarray  # (N,) node index per slot
    types: np.ndarray  # (N,)
    anchors: np.ndarray  # (N, 3)
    lpe: np.ndarray  # (N, k)
    rot_flat: np.ndarray  # (N, 9)
    adj_norm: np.ndarray  # (N, N) padded propagation matrix
    dup_mask: np.ndarray  # (N,) True for duplicate slots
    link_target: np.ndarray  # (n, n) over true nodes

    @property
    def n_true(self) -> int:
        return self.diagram.n


def normalize_and_pad(record: DatasetRecord, budget: int,
                      rng: np.random.Generator, lpe_k: int = 8) -> PaddedSample:
    """Normalize coordinates and pad particles to the budget by duplication."""
    record = _renormalize(record)
    diagram = build_hasse_diagram(record.complex)
    n = diagram.n
    if n > budget:
        raise ValueError(f"sample has {n} particles, budget is {budget}")
    src = np.concatenate([np.arange(n), rng.integers(0, n, size=budget - n)])
    types = diagram.types()[src]
    anchors = diagram.anchors()[src]
    lpe = laplacian_positional_encoding(diagram, lpe_k)[src]
    rot_flat = diagram.rotations_flat()[src]
    adj_true = normalized_adjacency(n, diagram.links)
    # duplicates are wired exactly like their source node, so copies of a
    # node receive identical GCN features
    adj_pad = adj_true[np.ix_(src, src)]
    dup_mask = np.concatenate([np.zeros(n, dtype=bool), np.ones(budget - n, dtype=bool)])
    return PaddedSample(record=record, diagram=diagram, src=src, types=types,
                        anchors=anchors, lpe=lpe, rot_flat=rot_flat,
                        adj_norm=adj_pad, dup_mask=dup_mask,
                        link_target=link_target_matrix(diagram))


def _renormalize(record: DatasetRecord) -> DatasetRecord:
    verts = np.stack([record.complex.vertices[v] for v in sorted(record.complex.vertices)])
    lo, hi = verts.min(axis=0), verts.max(axis=0)
    center = (lo + hi) / 2.0
    scale = 2.0 / float((hi - lo).max())
    if np.max(np.abs(center)) <= 1e-12 and abs(scale - 1.0) <= 1e-12:
        return record
    return transform_record(record, center, scale)


def transform_record(record: DatasetRecord, center, scale: float) -> DatasetRecord:
    """Apply p -> (p - center) * scale to every coordinate in the record."""
    center = np.asarray(center, dtype=np.float64)

    def tf(p):
        return (np.asarray(p, dtype=np.float64) - center) * scale

    cc = record.complex
    vertices = {vid: tf(p) for vid, p in cc.vertices.items()}
    edges = {eid: Edge(v=e.v, curve=RationalCubicBezier(tf(e.curve.ctrl), e.curve.weights.copy()))
             for eid, e in cc.edges.items()}
    faces = {}
    for fid, f in cc.faces.items():
        frame = CanonicalFrame(f.frame.R.copy(), tf(f.frame.t))
        faces[fid] = Face(loops=[list(loop) for loop in f.loops], grid=tf(f.grid), frame=frame)
    new_cc = CellComplex(vertices=vertices, edges=edges, faces=faces, mode=cc.mode)
    return DatasetRecord(id=record.id, complex=new_cc, cloud=tf(record.cloud),
                         center=record.center + center / max(record.scale, 1e-30),
                         scale=record.scale * scale)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def record_to_dict(record: DatasetRecord) -> dict:
    cc = record.complex
    return {
        "version": SCHEMA_VERSION,
        "id": record.id,
        "mode": cc.mode,
        "vertices": [{"id": vid, "p": list(map(float, cc.vertices[vid]))}
                     for vid in sorted(cc.vertices)],
        "edges": [{"id": eid, "v": list(cc.edges[eid].v),
                   "ctrl": cc.edges[eid].curve.ctrl.tolist(),
                   "w": cc.edges[eid].curve.weights.tolist()}
                  for eid in sorted(cc.edges)],
        "faces": [{"id": fid, "loops": [list(map(int, loop)) for loop in cc.faces[fid].loops],
                   "grid": cc.faces[fid].grid.tolist(),
                   "frame": {"R": cc.faces[fid].frame.R.reshape(9).tolist(),
                             "t": cc.faces[fid].frame.t.tolist()}}
                  for fid in sorted(cc.faces)],
        "cloud": record.cloud.tolist(),
    }


def record_from_dict(data: dict) -> DatasetRecord:
    if data.get("version") != SCHEMA_VERSION:
        raise DatasetError(
            f"schema version mismatch: file has {data.get('version')!r}, "
            f"reader supports {SCHEMA_VERSION}")
    vertices = {int(v["id"]): np.asarray(v["p"], dtype=np.float64) for v in data["vertices"]}
    edges = {int(e["id"]): Edge(v=(int(e["v"][0]), int(e["v"][1])),
                                curve=RationalCubicBezier(np.asarray(e["ctrl"]),
                                                          np.asarray(e["w"])))
             for e in data["edges"]}
    faces = {}
    for f in data["faces"]:
        frame = CanonicalFrame(np.asarray(f["frame"]["R"]).reshape(3, 3),
                               np.asarray(f["frame"]["t"]))
        faces[int(f["id"])] = Face(loops=[[int(e) for e in loop] for loop in f["loops"]],
                                   grid=np.asarray(f["grid"], dtype=np.float64),
                                   frame=frame)
    cc = CellComplex(vertices=vertices, edges=edges, faces=faces, mode=data["mode"])
    return DatasetRecord(id=data["id"], complex=cc,
                         cloud=np.asarray(data["cloud"], dtype=np.float64).reshape(-1, 3),
                         center=np.zeros(3), scale=1.0)


def write_records(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_dict(rec), separators=(",", ":")))
            fh.write("\n")


def read_records(path) -> list:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}: line {lineno}: malformed record ({exc})") from exc
            records.append(record_from_dict(data))
    return records


def write_jsonl(path, dicts) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dicts:
            fh.write(json.dumps(d, separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path) -> list:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}: line {lineno}: malformed record ({exc})") from exc
    return out
