"""Cell complexes, their spatial incidence diagrams, and the flatten /
restore round trip between complexes and particle sets.

A complex stores vertices, edges (with rational cubic curves), and faces
(boundary loops as signed edge references plus a sampled surface patch
and its canonical frame). Ids are 1-based per rank; a loop entry +e
traverses edge e from its first endpoint to its second, -e the reverse.

The incidence diagram orders nodes as (vertices by id, edges by id,
faces by id) and links every cell to the cells of one rank lower on its
boundary. Flattening keeps one particle per node; structure lives in a
separate link list, never inside particles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    CanonicalFrame,
    RationalCubicBezier,
    canonical_frame_from_face,
    edge_frame,
    grid_triangles,
    shoelace_area,
)

VERTEX, EDGE, FACE = 0, 1, 2

MODES = ("solid", "wireframe", "open-shell")


class ComplexError(ValueError):
    """An input complex violates a structural invariant."""


@dataclass
class Edge:
    v: tuple  # (vertex id, vertex id), traversal order of +e
    curve: RationalCubicBezier


@dataclass
class Face:
    loops: list  # list of loops, each a list of signed edge ids
    grid: np.ndarray  # (G, G, 3) surface patch samples
    frame: CanonicalFrame

    def edge_ids(self):
        return [abs(e) for loop in self.loops for e in loop]


@dataclass
class CellComplex:
    vertices: dict  # id -> (3,) position
    edges: dict  # id -> Edge
    faces: dict  # id -> Face
    mode: str = "solid"

    @property
    def cell_count(self) -> int:
        return len(self.vertices) + len(self.edges) + len(self.faces)

    def euler_characteristic(self) -> int:
        return len(self.vertices) - len(self.edges) + len(self.faces)


def validate_complex(cc: CellComplex) -> None:
    """Raise ComplexError naming the first offending cell."""
    if cc.mode not in MODES:
        raise ComplexError(f"unknown mode {cc.mode!r}")
    for eid, edge in sorted(cc.edges.items()):
        a, b = edge.v
        if a not in cc.vertices or b not in cc.vertices:
            raise ComplexError(f"edge {eid} references missing vertex")
        if a == b:
            raise ComplexError(f"edge {eid} is degenerate (both endpoints {a})")
    face_uses = {eid: 0 for eid in cc.edges}
    for fid, face in sorted(cc.faces.items()):
        for loop in face.loops:
            if len(loop) < 2:
                raise ComplexError(f"face {fid} has a loop with < 2 edges")
            for signed in loop:
                eid = abs(signed)
                if eid not in cc.edges:
                    raise ComplexError(f"face {fid} references missing edge {eid}")
                face_uses[eid] += 1
            if not _loop_is_closed(cc, loop):
                raise ComplexError(f"face {fid} has a non-closed loop")
    if cc.mode == "solid":
        for eid, uses in sorted(face_uses.items()):
            if uses != 2:
                raise ComplexError(f"edge {eid} lies on {uses} faces, expected 2")


def _loop_endpoints(cc: CellComplex, signed: int):
    edge = cc.edges[abs(signed)]
    return edge.v if signed > 0 else (edge.v[1], edge.v[0])


def _loop_is_closed(cc: CellComplex, loop) -> bool:
    for i, signed in enumerate(loop):
        _, head = _loop_endpoints(cc, signed)
        tail_next, _ = _loop_endpoints(cc, loop[(i + 1) % len(loop)])
        if head != tail_next:
            return False
    return True


def loop_vertex_chain(cc: CellComplex, loop) -> list:
    """Ordered vertex ids visited by a closed loop."""
    return [_loop_endpoints(cc, signed)[0] for signed in loop]


# ---------------------------------------------------------------------------
# spatial incidence diagram
# ---------------------------------------------------------------------------

@dataclass
class HasseNode:
    index: int
    cell_type: int  # 0 vertex, 1 edge, 2 face
    cell_id: int
    anchor: np.ndarray  # (3,)
    rotation: np.ndarray  # (3, 3)


@dataclass
class SpatialHasseDiagram:
    nodes: list  # HasseNode, ordered vertices-edges-faces
    links: list  # (parent index, child index), rank(parent) = rank(child) + 1
    mode: str = "solid"

    @property
    def n(self) -> int:
        return len(self.nodes)

    def node_of(self, cell_type: int, cell_id: int) -> int:
        return self._lookup[(cell_type, cell_id)]

    def __post_init__(self):
        self._lookup = {(n.cell_type, n.cell_id): n.index for n in self.nodes}

    def types(self) -> np.ndarray:
        return np.array([n.cell_type for n in self.nodes], dtype=np.int64)

    def anchors(self) -> np.ndarray:
        return np.stack([n.anchor for n in self.nodes])

    def rotations_flat(self) -> np.ndarray:
        return np.stack([n.rotation.reshape(9) for n in self.nodes])


def face_anchor(face: Face) -> np.ndarray:
    """Area-weighted centroid of the face's sample grid."""
    tris = grid_triangles(face.grid)
    centers = tris.mean(axis=1)
    areas = 0.5 * np.linalg.norm(
        np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=-1)
    total = areas.sum()
    if total < 1e-30:
        return face.grid.reshape(-1, 3).mean(axis=0)
    return (centers * areas[:, None]).sum(axis=0) / total


def face_normal_hint(cc: CellComplex, face: Face) -> np.ndarray:
    """Newell normal of the outer boundary polygon (loop orientation hint)."""
    loop = max(face.loops, key=len) if face.loops else None
    if loop is None:
        return np.array([0.0, 0.0, 1.0])
    chain = [cc.vertices[v] for v in loop_vertex_chain(cc, loop)]
    pts = np.asarray(chain, dtype=np.float64)
    nxt = np.roll(pts, -1, axis=0)
    normal = np.array([
        np.sum((pts[:, 1] - nxt[:, 1]) * (pts[:, 2] + nxt[:, 2])),
        np.sum((pts[:, 2] - nxt[:, 2]) * (pts[:, 0] + nxt[:, 0])),
        np.sum((pts[:, 0] - nxt[:, 0]) * (pts[:, 1] + nxt[:, 1])),
    ])
    n = np.linalg.norm(normal)
    return normal / n if n > 1e-30 else np.array([0.0, 0.0, 1.0])


def build_hasse_diagram(cc: CellComplex) -> SpatialHasseDiagram:
    """Abstract a validated complex into its spatial incidence diagram."""
    validate_complex(cc)
    nodes = []
    for vid in sorted(cc.vertices):
        nodes.append(HasseNode(len(nodes), VERTEX, vid,
                               np.asarray(cc.vertices[vid], dtype=np.float64),
                               np.eye(3)))
    for eid in sorted(cc.edges):
        edge = cc.edges[eid]
        p0 = np.asarray(cc.vertices[edge.v[0]], dtype=np.float64)
        p1 = np.asarray(cc.vertices[edge.v[1]], dtype=np.float64)
        nodes.append(HasseNode(len(nodes), EDGE, eid,
                               edge.curve.midpoint(), edge_frame(p0, p1)))
    for fid in sorted(cc.faces):
        face = cc.faces[fid]
        frame = canonical_frame_from_face(face.grid.reshape(-1, 3),
                                          face_normal_hint(cc, face))
        nodes.append(HasseNode(len(nodes), FACE, fid, face_anchor(face), frame.R))
    diagram = SpatialHasseDiagram(nodes, [], mode=cc.mode)
    links = []
    for eid in sorted(cc.edges):
        parent = diagram.node_of(EDGE, eid)
        for vid in cc.edges[eid].v:
            links.append((parent, diagram.node_of(VERTEX, vid)))
    for fid in sorted(cc.faces):
        parent = diagram.node_of(FACE, fid)
        for eid in sorted(set(cc.faces[fid].edge_ids())):
            links.append((parent, diagram.node_of(EDGE, eid)))
    diagram.links = links
    return diagram


def adjacency_matrix(n: int, links) -> np.ndarray:
    """Symmetrized unweighted adjacency of the diagram links."""
    adj = np.zeros((n, n))
    for parent, child in links:
        adj[parent, child] = 1.0
        adj[child, parent] = 1.0
    return adj


def normalized_adjacency(n: int, links) -> np.ndarray:
    """D^{-1/2} (A + I) D^{-1/2}, the graph-convolution propagation matrix."""
    adj = adjacency_matrix(n, links) + np.eye(n)
    deg = adj.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    return adj * inv_sqrt[:, None] * inv_sqrt[None, :]


def laplacian_positional_encoding(diagram_or_links, k: int, n: int | None = None) -> np.ndarray:
    """Per-node spectral coordinates from the normalized graph Laplacian.

    Uses the k eigenvectors of the smallest nonzero eigenvalues of
    L = I - D^{-1/2} A D^{-1/2} (zero rows for isolated nodes keep L's
    diagonal at 1). Each column's sign is fixed so its largest-magnitude
    entry is positive; columns are zero-padded when fewer than k nonzero
    eigenvalues exist.
    """
    if isinstance(diagram_or_links, SpatialHasseDiagram):
        links = diagram_or_links.links
        n = diagram_or_links.n
    else:
        links = diagram_or_links
        if n is None:
            raise ValueError("node count required when passing raw links")
    if n == 0:
        raise ValueError("empty diagram has no positional encoding")
    adj = adjacency_matrix(n, links)
    deg = adj.sum(axis=1)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    lap = np.eye(n) - adj * inv_sqrt[:, None] * inv_sqrt[None, :]
    evals, evecs = np.linalg.eigh(lap)
    nonzero = np.where(evals > 1e-9)[0]
    out = np.zeros((n, k))
    for col, idx in enumerate(nonzero[:k]):
        vec = evecs[:, idx]
        j = int(np.argmax(np.abs(vec)))
        out[:, col] = vec if vec[j] > 0 else -vec
    return out


# ---------------------------------------------------------------------------
# particles
# ---------------------------------------------------------------------------

@dataclass
class Particle:
    anchor: np.ndarray  # (3,)
    cell_type: int
    latent: np.ndarray  # (D,) or zero-length

    def key(self):
        return (self.cell_type, tuple(np.asarray(self.anchor, dtype=np.float64)),
                tuple(np.asarray(self.latent, dtype=np.float64)))


@dataclass
class ParticleSet:
    """Unordered collection of particles; equality is multiset equality."""

    particles: list
    true_count: int
    budget: int

    def __post_init__(self):
        if self.true_count > self.budget:
            raise ValueError(f"true_count {self.true_count} exceeds budget {self.budget}")

    def __eq__(self, other):
        if not isinstance(other, ParticleSet):
            return NotImplemented
        if self.true_count != other.true_count:
            return False
        return sorted(p.key() for p in self.particles) == sorted(p.key() for p in other.particles)

    def types(self) -> np.ndarray:
        return np.array([p.cell_type for p in self.particles], dtype=np.int64)

    def anchors(self) -> np.ndarray:
        return np.stack([p.anchor for p in self.particles])


def flatten_to_particles(diagram: SpatialHasseDiagram, latents=None) -> ParticleSet:
    """One particle per diagram node; incidence stays outside the set."""
    n = diagram.n
    if latents is None:
        latents = np.zeros((n, 0))
    particles = [Particle(node.anchor.copy(), node.cell_type, np.asarray(latents[i]))
                 for i, node in enumerate(diagram.nodes)]
    return ParticleSet(particles, true_count=n, budget=n)


def link_target_matrix(diagram: SpatialHasseDiagram) -> np.ndarray:
    """Symmetric 0/1 incidence target over node pairs."""
    a = np.zeros((diagram.n, diagram.n))
    for parent, child in diagram.links:
        a[parent, child] = 1.0
        a[child, parent] = 1.0
    return a


# ---------------------------------------------------------------------------
# restore: probabilities -> repaired structure -> complex
# ---------------------------------------------------------------------------

@dataclass
class RecoveredStructure:
    vertex_nodes: list  # particle indices, ascending
    edge_vertices: dict  # edge particle index -> (vi, vj) particle indices
    face_loops: dict  # face particle index -> list of loops of signed edge indices
    repair_log: list = field(default_factory=list)
    dropped: list = field(default_factory=list)


def recover_topology(types: np.ndarray, probs: np.ndarray,
                     threshold: float = 0.5) -> RecoveredStructure:
    """Turn a pairwise link-probability matrix into a repaired structure.

    Only adjacent-rank pairs can link. Each edge keeps its two
    highest-probability vertex links. Faces keep edge links above the
    threshold; a face whose kept edges do not close into cycles gets one
    chance to re-add its best dropped link, otherwise it is dropped.
    Every modification is logged; degenerate input yields an empty
    structure rather than an error.
    """
    types = np.asarray(types)
    n = len(types)
    probs = np.asarray(probs, dtype=np.float64)
    log: list = []
    verts = [i for i in range(n) if types[i] == VERTEX]
    edges = [i for i in range(n) if types[i] == EDGE]
    faces = [i for i in range(n) if types[i] == FACE]

    structure = RecoveredStructure(vertex_nodes=[], edge_vertices={}, face_loops={},
                                   repair_log=log)
    for e in edges:
        p = probs[e, verts] if verts else np.zeros(0)
        candidates = [j for j in range(len(verts)) if p[j] > 0.0]
        if len(candidates) < 2:
            log.append(f"edge {e}: dropped, fewer than 2 positive vertex links")
            structure.dropped.append(e)
            continue
        order = sorted(candidates, key=lambda j: (-p[j], j))
        keep = [verts[order[0]], verts[order[1]]]
        above = [verts[j] for j in candidates if p[j] >= threshold]
        extra = sorted(set(above) - set(keep))
        missing = sorted(set(keep) - set(above))
        if extra:
            log.append(f"edge {e}: trimmed vertex links {extra} beyond top-2")
        for v in missing:
            log.append(f"edge {e}: re-added vertex link {v} "
                       f"(p={probs[e, v]:.3f}) to reach 2 endpoints")
        structure.edge_vertices[e] = (min(keep), max(keep))

    kept_edges = sorted(structure.edge_vertices)
    for f in faces:
        cand = [(e, probs[f, e]) for e in kept_edges]
        kept = [e for e, p in cand if p >= threshold]
        loops = _close_loops(structure.edge_vertices, kept)
        if loops is None:
            dropped_cand = sorted(((e, p) for e, p in cand if p < threshold),
                                  key=lambda item: -item[1])
            repaired = None
            if dropped_cand:
                best, bp = dropped_cand[0]
                retry = _close_loops(structure.edge_vertices, kept + [best])
                if retry is not None:
                    log.append(f"face {f}: boundary closed by re-adding edge link "
                               f"{best} (p={bp:.3f})")
                    repaired = retry
            if repaired is None:
                log.append(f"face {f}: dropped, boundary does not close into cycles")
                structure.dropped.append(f)
                continue
            loops = repaired
        structure.face_loops[f] = loops

    used = {v for pair in structure.edge_vertices.values() for v in pair}
    for v in verts:
        if v in used:
            structure.vertex_nodes.append(v)
        else:
            log.append(f"vertex {v}: dropped, no incident edge")
            structure.dropped.append(v)
    return structure


def _close_loops(edge_vertices: dict, edge_set):
    """Decompose face edges into vertex-disjoint cycles, or None if impossible.

    Every vertex must have degree exactly 2 within the edge set; the walk
    then closes each component deterministically, starting from the
    smallest edge index.
    """
    if not edge_set:
        return None
    incident: dict = {}
    for e in edge_set:
        for v in edge_vertices[e]:
            incident.setdefault(v, []).append(e)
    if any(len(es) != 2 for es in incident.values()):
        return None
    remaining = set(edge_set)
    loops = []
    while remaining:
        start = min(remaining)
        tail, head = edge_vertices[start]
        first_vertex = tail
        loop = []
        edge = start
        while True:
            remaining.remove(edge)
            loop.append(edge if edge_vertices[edge][0] == tail else -edge)
            if head == first_vertex:
                break
            nxt = [e for e in incident[head] if e != edge and e in remaining]
            if not nxt:
                return None
            edge = nxt[0]
            a, b = edge_vertices[edge]
            tail, head = (a, b) if a == head else (b, a)
        loops.append(loop)
    return loops


@dataclass
class RestoredGeometry:
    """Per-particle geometry for restore: curves for edges, patches for faces."""

    curves: dict  # edge particle index -> RationalCubicBezier
    patches: dict  # face particle index -> (CanonicalFrame, grid (G,G,3))


@dataclass
class RestoreResult:
    complex: CellComplex
    repair_log: list
    particle_to_cell: dict  # particle index -> (cell_type, cell id)


def restore_complex(particles: ParticleSet, probs: np.ndarray,
                    geometry: RestoredGeometry, threshold: float = 0.5,
                    mode: str | None = None) -> RestoreResult:
    """Rebuild a complex from particles, link probabilities, and geometry.

    Never fails: unusable cells are dropped and logged. The mode is
    inferred from face incidence unless given explicitly.
    """
    types = particles.types()
    anchors = particles.anchors()
    structure = recover_topology(types, probs, threshold=threshold)

    vert_ids = {p: i + 1 for i, p in enumerate(structure.vertex_nodes)}
    vertices = {vert_ids[p]: anchors[p].copy() for p in structure.vertex_nodes}

    edge_ids = {}
    edges = {}
    for p in sorted(structure.edge_vertices):
        vi, vj = structure.edge_vertices[p]
        curve = geometry.curves.get(p)
        if curve is None:
            structure.repair_log.append(f"edge {p}: dropped, no curve geometry")
            continue
        # orient the curve to run from vi to vj
        fwd = (np.sum((curve.ctrl[0] - anchors[vi]) ** 2)
               + np.sum((curve.ctrl[3] - anchors[vj]) ** 2))
        rev = (np.sum((curve.ctrl[0] - anchors[vj]) ** 2)
               + np.sum((curve.ctrl[3] - anchors[vi]) ** 2))
        if rev < fwd:
            curve = RationalCubicBezier(curve.ctrl[::-1].copy(), curve.weights[::-1].copy())
        eid = len(edge_ids) + 1
        edge_ids[p] = eid
        edges[eid] = Edge(v=(vert_ids[vi], vert_ids[vj]), curve=curve)

    faces = {}
    face_ids = {}
    for p in sorted(structure.face_loops):
        patch = geometry.patches.get(p)
        if patch is None:
            structure.repair_log.append(f"face {p}: dropped, no patch geometry")
            continue
        loops = []
        ok = True
        for loop in structure.face_loops[p]:
            out = []
            for signed in loop:
                e = abs(signed)
                if e not in edge_ids:
                    ok = False
                    break
                out.append(edge_ids[e] if signed > 0 else -edge_ids[e])
            if not ok:
                break
            loops.append(out)
        if not ok:
            structure.repair_log.append(f"face {p}: dropped, boundary edge missing")
            continue
        frame, grid = patch
        fid = len(face_ids) + 1
        face_ids[p] = fid
        faces[fid] = Face(loops=loops, grid=np.asarray(grid, dtype=np.float64), frame=frame)

    if mode is None:
        mode = _infer_mode(edges, faces)
    cc = CellComplex(vertices=vertices, edges=edges, faces=faces, mode=mode)
    mapping = {p: (VERTEX, i) for p, i in vert_ids.items()}
    mapping.update({p: (EDGE, i) for p, i in edge_ids.items()})
    mapping.update({p: (FACE, i) for p, i in face_ids.items()})
    return RestoreResult(complex=cc, repair_log=structure.repair_log,
                         particle_to_cell=mapping)


def _infer_mode(edges: dict, faces: dict) -> str:
    if not faces:
        return "wireframe"
    uses = {eid: 0 for eid in edges}
    for face in faces.values():
        for eid in set(face.edge_ids()):
            uses[eid] += 1
    if edges and all(c == 2 for c in uses.values()):
        return "solid"
    return "open-shell"


# ---------------------------------------------------------------------------
# complexity filter and structural comparison
# ---------------------------------------------------------------------------

def complexity_filter(cc: CellComplex, max_faces: int = 50,
                      max_edges_per_face: int = 30, max_cells: int = 192) -> bool:
    """True = keep. Drops overly complex models."""
    if len(cc.faces) > max_faces:
        return False
    for face in cc.faces.values():
        if sum(len(loop) for loop in face.loops) > max_edges_per_face:
            return False
    return cc.cell_count <= max_cells


def loop_partition(cc: CellComplex, fid: int):
    """Canonical view of a face boundary: frozenset of loop edge-id sets."""
    return frozenset(frozenset(abs(e) for e in loop) for loop in cc.faces[fid].loops)


def complexes_match(a: CellComplex, b: CellComplex, tol: float = 0.0) -> bool:
    """Structural + geometric equivalence up to cell relabeling.

    Vertices are matched by position, edges by matched endpoints and
    control polygon, faces by boundary loop partition and patch samples.
    A simple cycle's edge set determines its traversal order, so loop
    partitions capture loop structure exactly.
    """
    if a.mode != b.mode or len(a.vertices) != len(b.vertices) \
            or len(a.edges) != len(b.edges) or len(a.faces) != len(b.faces):
        return False

    def close(x, y):
        return np.max(np.abs(np.asarray(x) - np.asarray(y))) <= tol if tol else np.array_equal(x, y)

    b_vert_used = set()
    vmap = {}
    for va, pa in a.vertices.items():
        found = None
        for vb, pb in b.vertices.items():
            if vb not in b_vert_used and close(pa, pb):
                found = vb
                break
        if found is None:
            return False
        b_vert_used.add(found)
        vmap[va] = found

    emap = {}
    b_edge_used = set()
    for ea, edge_a in a.edges.items():
        want = {vmap[edge_a.v[0]], vmap[edge_a.v[1]]}
        found = None
        for eb, edge_b in b.edges.items():
            if eb in b_edge_used or set(edge_b.v) != want:
                continue
            fwd = close(edge_a.curve.ctrl, edge_b.curve.ctrl) and close(
                edge_a.curve.weights, edge_b.curve.weights)
            rev = close(edge_a.curve.ctrl, edge_b.curve.ctrl[::-1]) and close(
                edge_a.curve.weights, edge_b.curve.weights[::-1])
            if fwd or rev:
                found = eb
                break
        if found is None:
            return False
        b_edge_used.add(found)
        emap[ea] = found

    b_face_used = set()
    for fa in a.faces:
        part_a = frozenset(frozenset(emap[abs(e)] for e in loop) for loop in a.faces[fa].loops)
        found = None
        for fb in b.faces:
            if fb in b_face_used or loop_partition(b, fb) != part_a:
                continue
            if close(a.faces[fa].grid, b.faces[fb].grid):
                found = fb
                break
        if found is None:
            return False
        b_face_used.add(found)
    return True
