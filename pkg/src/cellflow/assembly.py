"""Post-processing: primitive fitting, loop orientation, shell assembly,
validity verdicts, and export.

Analytic primitives are preferred over freeform geometry: a face whose
patch fits a plane within tolerance becomes a plane, an edge whose curve
stays within tolerance of its chord becomes a line. The validity checker
is this artifact's definition of "valid": watertight incidence, closed
boundaries, exact endpoint sharing, curves lying on their faces, and an
integral non-negative genus per shell (solid mode).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cells import CellComplex, _loop_is_closed, loop_vertex_chain
from .dataio import record_from_dict, record_to_dict, DatasetRecord
from .geometry import (
    fit_plane_least_squares,
    grid_triangles,
    points_to_triangles_distance,
    shoelace_area,
)

PLANE_RMS_TOL = 1e-3
LINE_DEV_TOL = 1e-3
CURVE_ON_SURFACE_TOL = 0.02


@dataclass
class BRepModel:
    complex: CellComplex
    mode: str
    face_kind: dict = field(default_factory=dict)  # fid -> "plane" | "freeform"
    face_plane: dict = field(default_factory=dict)  # fid -> (normal, offset, rms)
    edge_kind: dict = field(default_factory=dict)  # eid -> "line" | "bezier"
    outer_loop: dict = field(default_factory=dict)  # fid -> loop index
    shells: list = field(default_factory=list)  # lists of face ids
    verdict: bool = False
    diagnostics: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# loop orientation
# ---------------------------------------------------------------------------

def _loop_polyline_2d(cc: CellComplex, loop, frame) -> np.ndarray:
    pts = []
    for signed in loop:
        seg = cc.edges[abs(signed)].curve.sample(16)
        if signed < 0:
            seg = seg[::-1]
        pts.append(seg[:-1])
    poly = np.concatenate(pts, axis=0)
    rel = poly - frame.t
    return np.stack([rel @ frame.R[:, 0], rel @ frame.R[:, 1]], axis=1)


def _loop_tie_key(cc: CellComplex, loop):
    chain = loop_vertex_chain(cc, loop)
    return min(tuple(np.asarray(cc.vertices[v], dtype=np.float64)) for v in chain)


def _reverse_loop(loop):
    return [-signed for signed in reversed(loop)]


def orient_loops_largest_area(cc: CellComplex, fid: int):
    """Canonically orient a face's loops.

    The loop with the largest absolute shoelace area (in the face frame)
    is the outer boundary and winds counter-clockwise around the face
    normal; all others wind clockwise. Equal areas tie-break on the
    lexicographically smallest vertex anchor. Deterministic and
    idempotent. Returns (oriented loops, outer index); raises on an open
    loop.
    """
    face = cc.faces[fid]
    for loop in face.loops:
        if not _loop_is_closed(cc, loop):
            raise ValueError(f"face {fid} has an open loop")
    areas = [shoelace_area(_loop_polyline_2d(cc, loop, face.frame)) for loop in face.loops]
    order = sorted(range(len(face.loops)),
                   key=lambda i: (-abs(areas[i]), _loop_tie_key(cc, face.loops[i])))
    outer = order[0]
    oriented = []
    for i, loop in enumerate(face.loops):
        want_ccw = i == outer
        is_ccw = areas[i] > 0
        oriented.append(list(loop) if is_ccw == want_ccw else _reverse_loop(loop))
    return oriented, outer


# ---------------------------------------------------------------------------
# fitting and assembly
# ---------------------------------------------------------------------------

def fit_and_assemble(cc: CellComplex, mode: str | None = None) -> BRepModel:
    """Fit primitives, orient loops, group shells, and attach a verdict."""
    mode = mode or cc.mode
    model = BRepModel(complex=cc, mode=mode)
    if cc.cell_count == 0:
        model.diagnostics.append("no cells")
        model.verdict = False
        return model

    for eid in sorted(cc.edges):
        dev = cc.edges[eid].curve.max_chord_deviation()
        model.edge_kind[eid] = "line" if dev <= LINE_DEV_TOL else "bezier"

    for fid in sorted(cc.faces):
        face = cc.faces[fid]
        try:
            normal, offset, rms = fit_plane_least_squares(face.grid.reshape(-1, 3))
            if rms <= PLANE_RMS_TOL:
                model.face_kind[fid] = "plane"
                model.face_plane[fid] = (normal, offset, rms)
            else:
                model.face_kind[fid] = "freeform"
        except ValueError:
            model.face_kind[fid] = "freeform"
        try:
            oriented, outer = orient_loops_largest_area(cc, fid)
            face.loops = oriented
            model.outer_loop[fid] = outer
        except ValueError as exc:
            model.diagnostics.append(f"face {fid}: {exc}")

    model.shells = _face_shells(cc)
    verdict, diags = check_validity(model, mode)
    model.diagnostics.extend(diags)
    model.verdict = verdict and not model.diagnostics
    return model


def _face_shells(cc: CellComplex):
    """Connected components of faces through shared edges."""
    fids = sorted(cc.faces)
    edge_faces: dict = {}
    for fid in fids:
        for eid in set(cc.faces[fid].edge_ids()):
            edge_faces.setdefault(eid, []).append(fid)
    seen = set()
    shells = []
    for fid in fids:
        if fid in seen:
            continue
        stack = [fid]
        comp = []
        seen.add(fid)
        while stack:
            f = stack.pop()
            comp.append(f)
            for eid in set(cc.faces[f].edge_ids()):
                for g in edge_faces[eid]:
                    if g not in seen:
                        seen.add(g)
                        stack.append(g)
        shells.append(sorted(comp))
    return shells


# ---------------------------------------------------------------------------
# validity
# ---------------------------------------------------------------------------

def _cell_components(cc: CellComplex):
    """Connected components over all cells via incidence (for genus counts)."""
    nodes = ([("v", v) for v in cc.vertices] + [("e", e) for e in cc.edges]
             + [("f", f) for f in cc.faces])
    adj: dict = {node: [] for node in nodes}
    for eid, edge in cc.edges.items():
        for vid in edge.v:
            if vid in cc.vertices:
                adj[("e", eid)].append(("v", vid))
                adj[("v", vid)].append(("e", eid))
    for fid, face in cc.faces.items():
        for eid in set(face.edge_ids()):
            if eid in cc.edges:
                adj[("f", fid)].append(("e", eid))
                adj[("e", eid)].append(("f", fid))
    seen = set()
    comps = []
    for node in nodes:
        if node in seen:
            continue
        stack = [node]
        seen.add(node)
        comp = {"v": 0, "e": 0, "f": 0}
        while stack:
            kind, cid = stack.pop()
            comp[kind] += 1
            for other in adj[(kind, cid)]:
                if other not in seen:
                    seen.add(other)
                    stack.append(other)
        comps.append(comp)
    return comps


def check_validity(model_or_complex, mode: str):
    """Validity verdict plus a diagnostic per failed condition.

    solid: (a) every edge on exactly two face uses, (b) every loop
    closed, (c) curve endpoints exactly at their vertices, (d) sampled
    edge points within tolerance of each incident face patch, (e) each
    connected component has 2 - (V-E+F) equal to an even non-negative
    number (integral genus). wireframe: two distinct existing endpoints
    per edge and a connected graph. open shell: edges on one or two
    faces, plus (b)-(d).
    """
    cc = model_or_complex.complex if isinstance(model_or_complex, BRepModel) else model_or_complex
    diags = []
    if cc.cell_count == 0:
        return False, ["no cells"]

    if mode == "wireframe":
        for eid, edge in sorted(cc.edges.items()):
            a, b = edge.v
            if a not in cc.vertices or b not in cc.vertices:
                diags.append(f"edge {eid}: missing endpoint vertex")
            elif a == b:
                diags.append(f"edge {eid}: endpoints coincide")
        if not _wireframe_connected(cc):
            diags.append("wireframe graph is disconnected")
        if not cc.edges and cc.vertices:
            diags.append("vertices without any edge")
        return not diags, diags

    # edge-on-face counts
    uses = {eid: 0 for eid in cc.edges}
    for fid, face in sorted(cc.faces.items()):
        for loop in face.loops:
            for signed in loop:
                if abs(signed) in uses:
                    uses[abs(signed)] += 1
                else:
                    diags.append(f"face {fid}: references missing edge {abs(signed)}")
    for eid, count in sorted(uses.items()):
        if mode == "solid" and count != 2:
            diags.append(f"edge {eid}: on {count} face uses, expected 2")
        if mode == "open-shell" and count not in (1, 2):
            diags.append(f"edge {eid}: on {count} face uses, expected 1 or 2")

    for fid, face in sorted(cc.faces.items()):
        for loop in face.loops:
            ok = all(abs(s) in cc.edges for s in loop) and _loop_is_closed(cc, loop)
            if not ok:
                diags.append(f"face {fid}: boundary loop does not close")

    for eid, edge in sorted(cc.edges.items()):
        for end, vid in zip((0, 3), edge.v):
            if vid not in cc.vertices:
                diags.append(f"edge {eid}: missing vertex {vid}")
                continue
            if not np.array_equal(edge.curve.ctrl[end], np.asarray(cc.vertices[vid])):
                diags.append(f"edge {eid}: endpoint differs from vertex {vid}")

    # curve-on-surface
    face_tris = {fid: grid_triangles(cc.faces[fid].grid) for fid in cc.faces}
    edge_faces: dict = {}
    for fid, face in cc.faces.items():
        for eid in set(face.edge_ids()):
            edge_faces.setdefault(eid, []).append(fid)
    for eid, fids in sorted(edge_faces.items()):
        if eid not in cc.edges:
            continue
        pts = cc.edges[eid].curve.sample(32)
        for fid in fids:
            dist = points_to_triangles_distance(pts, face_tris[fid])
            worst = float(dist.max())
            if worst > CURVE_ON_SURFACE_TOL:
                diags.append(
                    f"edge {eid}: {worst:.4f} from face {fid} patch "
                    f"(tol {CURVE_ON_SURFACE_TOL})")

    if mode == "solid":
        for comp in _cell_components(cc):
            chi = comp["v"] - comp["e"] + comp["f"]
            genus2 = 2 - chi
            if genus2 < 0 or genus2 % 2 != 0:
                diags.append(
                    f"component V={comp['v']} E={comp['e']} F={comp['f']}: "
                    f"2-(V-E+F)={genus2} is not an even non-negative number")
    return not diags, diags


def _wireframe_connected(cc: CellComplex) -> bool:
    if not cc.vertices:
        return False
    adj: dict = {vid: [] for vid in cc.vertices}
    for edge in cc.edges.values():
        a, b = edge.v
        if a in adj and b in adj:
            adj[a].append(b)
            adj[b].append(a)
    start = min(cc.vertices)
    seen = {start}
    stack = [start]
    while stack:
        v = stack.pop()
        for w in adj[v]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return len(seen) == len(cc.vertices)


def shell_genus(cc: CellComplex) -> list:
    """(V, E, F, genus) per connected component."""
    out = []
    for comp in _cell_components(cc):
        chi = comp["v"] - comp["e"] + comp["f"]
        out.append((comp["v"], comp["e"], comp["f"], (2 - chi) / 2.0))
    return out


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def export_obj(model: BRepModel, path) -> None:
    """Triangulated faces from sample grids; wireframes as polylines."""
    cc = model.complex
    lines = ["# cellflow export"]
    vert_count = 0
    if model.mode == "wireframe" or not cc.faces:
        for eid in sorted(cc.edges):
            pts = cc.edges[eid].curve.sample(32)
            for p in pts:
                lines.append(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}")
            idx = " ".join(str(vert_count + i + 1) for i in range(len(pts)))
            lines.append(f"l {idx}")
            vert_count += len(pts)
    else:
        for fid in sorted(cc.faces):
            grid = cc.faces[fid].grid
            g = grid.shape[0]
            for p in grid.reshape(-1, 3):
                lines.append(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}")
            for i in range(g - 1):
                for j in range(g - 1):
                    a = vert_count + i * g + j + 1
                    b = a + g
                    c = b + 1
                    d = a + 1
                    lines.append(f"f {a} {b} {c}")
                    lines.append(f"f {a} {c} {d}")
            vert_count += g * g
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def model_to_dict(model: BRepModel) -> dict:
    rec = DatasetRecord(id="model", complex=model.complex,
                        cloud=np.zeros((0, 3)), center=np.zeros(3), scale=1.0)
    data = record_to_dict(rec)
    data["verdict"] = bool(model.verdict)
    data["diagnostics"] = list(model.diagnostics)
    data["face_kind"] = {str(k): v for k, v in model.face_kind.items()}
    data["edge_kind"] = {str(k): v for k, v in model.edge_kind.items()}
    data["outer_loop"] = {str(k): int(v) for k, v in model.outer_loop.items()}
    data["shells"] = [list(map(int, s)) for s in model.shells]
    return data


def model_from_dict(data: dict) -> BRepModel:
    rec = record_from_dict({k: v for k, v in data.items()
                            if k in ("version", "id", "mode", "vertices", "edges",
                                     "faces", "cloud")})
    return BRepModel(
        complex=rec.complex,
        mode=data["mode"],
        face_kind={int(k): v for k, v in data.get("face_kind", {}).items()},
        edge_kind={int(k): v for k, v in data.get("edge_kind", {}).items()},
        outer_loop={int(k): int(v) for k, v in data.get("outer_loop", {}).items()},
        shells=[list(s) for s in data.get("shells", [])],
        verdict=bool(data["verdict"]),
        diagnostics=list(data.get("diagnostics", [])),
    )


def models_equal(a: BRepModel, b: BRepModel) -> bool:
    from .cells import complexes_match
    return (a.mode == b.mode and a.verdict == b.verdict
            and a.diagnostics == b.diagnostics and a.face_kind == b.face_kind
            and a.edge_kind == b.edge_kind and a.shells == b.shells
            and complexes_match(a.complex, b.complex))