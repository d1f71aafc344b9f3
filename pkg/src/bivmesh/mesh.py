"""Labeled triangle meshes: topology, subdivision, smoothing, voxelization, I/O.

Meshes are immutable values; every operation returns a new mesh.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .anatomy import (
    NEW_VERTEX_LABEL_PRIORITY,
    VALID_SURFACE_LABELS,
    VALVE,
)
from .volume import LabelVolume, NdcMap


class MeshError(ValueError):
    pass


class MeshFormatError(MeshError):
    pass


class NonManifoldError(MeshError):
    pass


class OpenSurfaceError(MeshError):
    pass


@dataclass(frozen=True)
class LabeledMesh:
    """Triangle mesh in NDC with a per-vertex anatomical label."""

    vertices: np.ndarray          # (V, 3) float64
    faces: np.ndarray             # (F, 3) int64, counter-clockwise
    labels: np.ndarray            # (V,) uint8

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=np.float64))
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.uint8))

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)


def validate(m):
    """Raise MeshError on any broken LabeledMesh invariant."""
    if m.vertices.ndim != 2 or m.vertices.shape[1] != 3:
        raise MeshError("vertices must have shape (V, 3)")
    if m.faces.ndim != 2 or m.faces.shape[1] != 3:
        raise MeshError("faces must have shape (F, 3)")
    if len(m.labels) != len(m.vertices):
        raise MeshError("one label per vertex required")
    if m.n_faces and (m.faces.min() < 0 or m.faces.max() >= m.n_vertices):
        raise MeshError("face references out-of-range vertex")
    f = m.faces
    if m.n_faces and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
        raise MeshError("degenerate face (repeated vertex index)")
    referenced = np.zeros(m.n_vertices, dtype=bool)
    referenced[f.ravel()] = True
    if not referenced.all():
        raise MeshError("unreferenced vertex present")
    if m.n_vertices and np.abs(m.vertices).max() > 1.5:
        raise MeshError("vertex outside [-1.5, 1.5]^3")
    if m.n_vertices and m.labels.max(initial=0) > max(VALID_SURFACE_LABELS):
        raise MeshError(f"unknown surface label {int(m.labels.max())}")
    return m


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EdgeTable:
    edges: np.ndarray             # (E, 2) sorted index pairs, lexicographic order
    face_counts: np.ndarray       # (E,) number of incident faces
    incident: np.ndarray          # (E, 2) first two incident faces, -1 padded
    degrees: np.ndarray           # (V,) vertex degree

    @property
    def n_edges(self):
        return len(self.edges)


def build_edges(m):
    """Unique undirected edges with incident-face lists and vertex degrees."""
    if m.n_faces and m.faces.max() >= m.n_vertices:
        raise MeshError("face references out-of-range vertex")
    pairs = m.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    pairs = np.sort(pairs, axis=1)
    edges, inverse, counts = np.unique(pairs, axis=0, return_inverse=True,
                                       return_counts=True)
    face_of_pair = np.repeat(np.arange(m.n_faces, dtype=np.int64), 3)
    incident = np.full((len(edges), 2), -1, dtype=np.int64)
    slot = np.zeros(len(edges), dtype=np.int64)
    order = np.argsort(inverse, kind="stable")
    for idx in order:
        e = inverse[idx]
        if slot[e] < 2:
            incident[e, slot[e]] = face_of_pair[idx]
            slot[e] += 1
    degrees = np.bincount(edges.ravel(), minlength=m.n_vertices)
    return EdgeTable(edges=edges, face_counts=counts, incident=incident,
                     degrees=degrees)


def boundary_vertex_mask(m, table=None):
    """Vertices lying on an edge with exactly one incident face."""
    table = table or build_edges(m)
    mask = np.zeros(m.n_vertices, dtype=bool)
    boundary = table.edges[table.face_counts == 1]
    mask[boundary.ravel()] = True
    return mask


def _directed_edges(table):
    e = table.edges
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    return src, dst


def _neighbor_mean(m, table):
    src, dst = _directed_edges(table)
    acc = np.zeros_like(m.vertices)
    np.add.at(acc, src, m.vertices[dst])
    deg = np.maximum(table.degrees, 1)
    return acc / deg[:, None]


# ---------------------------------------------------------------------------
# Subdivision
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SubdivisionMap:
    parent_edges: np.ndarray      # (E, 2) edge whose midpoint became each new vertex
    level: int


def _child_labels(labels, edges):
    la, lb = labels[edges[:, 0]], labels[edges[:, 1]]
    rank = np.empty(max(VALID_SURFACE_LABELS) + 1, dtype=np.int64)
    for r, lab in enumerate(NEW_VERTEX_LABEL_PRIORITY):
        rank[lab] = r
    take_a = rank[la] <= rank[lb]
    return np.where(take_a, la, lb).astype(np.uint8)


def midpoint_subdivide(m, level=0):
    """Split every face 1->4 with new vertices at exact edge midpoints.

    New vertices are appended after the originals; their labels follow the
    endpoint-priority rule.  Returns (mesh, SubdivisionMap).
    """
    table = build_edges(m)
    if np.any(table.face_counts > 2):
        raise NonManifoldError("edge with more than 2 incident faces")
    edges = table.edges
    mid = 0.5 * (m.vertices[edges[:, 0]] + m.vertices[edges[:, 1]])
    vertices = np.vstack([m.vertices, mid])
    labels = np.concatenate([m.labels, _child_labels(m.labels, edges)])

    # Edge id for each face corner pair, in (ab, bc, ca) slot order.
    pairs = np.sort(m.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, inverse = np.unique(pairs, axis=0, return_inverse=True)
    eid = inverse.reshape(-1, 3)
    mab = m.n_vertices + eid[:, 0]
    mbc = m.n_vertices + eid[:, 1]
    mca = m.n_vertices + eid[:, 2]
    a, b, c = m.faces[:, 0], m.faces[:, 1], m.faces[:, 2]
    faces = np.concatenate([
        np.stack([a, mab, mca], axis=1),
        np.stack([b, mbc, mab], axis=1),
        np.stack([c, mca, mbc], axis=1),
        np.stack([mab, mbc, mca], axis=1),
    ])
    out = LabeledMesh(vertices=vertices, faces=faces, labels=labels)
    return out, SubdivisionMap(parent_edges=edges, level=level)


def loop_subdivide(m):
    """Interpolating Loop variant: midpoint topology, original vertices
    repositioned by the Warren-weighted neighbour average.

    Boundary (valve-rim) vertices are frozen.
    """
    table = build_edges(m)
    if np.any(table.face_counts > 2):
        raise NonManifoldError("edge with more than 2 incident faces")
    deg = table.degrees.astype(np.float64)
    src, dst = _directed_edges(table)
    nb_sum = np.zeros_like(m.vertices)
    np.add.at(nb_sum, src, m.vertices[dst])

    alpha = np.zeros(m.n_vertices)
    movable = deg >= 3
    alpha[deg == 3] = 3.0 / 16.0
    gt3 = deg > 3
    alpha[gt3] = 3.0 / (8.0 * deg[gt3])
    frozen = boundary_vertex_mask(m, table) | ~movable
    alpha[frozen] = 0.0

    repositioned = (1.0 - alpha * deg)[:, None] * m.vertices + alpha[:, None] * nb_sum
    sub, _ = midpoint_subdivide(m)
    vertices = sub.vertices.copy()
    vertices[: m.n_vertices] = repositioned
    return LabeledMesh(vertices=vertices, faces=sub.faces, labels=sub.labels)


def laplacian_filter(m, lam=0.13, iterations=1):
    """Uniform-umbrella smoothing v <- v + lam * (mean(neighbours) - v).

    Boundary vertices stay fixed; topology and labels are unchanged.
    """
    if not (0.0 < lam < 1.0):
        raise MeshError(f"lambda must lie in (0, 1), got {lam}")
    if iterations < 0:
        raise MeshError("iterations must be >= 0")
    if iterations == 0:
        return m
    table = build_edges(m)
    frozen = boundary_vertex_mask(m, table)
    mesh = m
    for _ in range(iterations):
        mean = _neighbor_mean(mesh, table)
        v = mesh.vertices + lam * (mean - mesh.vertices)
        v[frozen] = mesh.vertices[frozen]
        mesh = LabeledMesh(vertices=v, faces=m.faces, labels=m.labels)
    return mesh


# ---------------------------------------------------------------------------
# Region extraction and voxelization
# ---------------------------------------------------------------------------

def _normalize_region(region):
    if isinstance(region, (int, np.integer)):
        return (int(region),)
    return tuple(int(r) for r in region)


def region_submesh(m, region, cap=True):
    """Faces of the closed region bounded by the given surface labels.

    A face belongs to the sub-mesh when all its vertices carry labels in
    region + {valve} and its connected component touches a region-labeled
    vertex.  Open rims (valve rings) are capped with a fan over the rim
    centroid when `cap` is true.
    """
    region = _normalize_region(region)
    keep_labels = set(region) | {VALVE}
    vert_ok = np.isin(m.labels, list(keep_labels))
    face_ok = vert_ok[m.faces].all(axis=1)
    faces = m.faces[face_ok]
    if len(faces) == 0:
        return m.vertices.copy(), faces.copy()

    # Keep only components containing at least one strictly region-labeled vertex.
    sub = LabeledMesh(vertices=m.vertices, faces=faces, labels=m.labels)
    comp = _face_components(sub)
    region_vert = np.isin(m.labels, list(region))
    touches = np.zeros(comp.max() + 1, dtype=bool)
    for cid in range(comp.max() + 1):
        fsel = faces[comp == cid]
        touches[cid] = region_vert[fsel.ravel()].any()
    faces = faces[touches[comp]]
    vertices = m.vertices.copy()
    if cap and len(faces):
        vertices, faces = _cap_boundary_loops(vertices, faces)
    return vertices, faces


def _face_components(m):
    """Connected-component id per face (faces adjacent via shared edge)."""
    pairs = np.sort(m.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, inverse = np.unique(pairs, axis=0, return_inverse=True)
    face_of_pair = np.repeat(np.arange(len(m.faces)), 3)
    # union-find over faces sharing an edge
    parent = np.arange(len(m.faces))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    order = np.argsort(inverse, kind="stable")
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and inverse[order[j + 1]] == inverse[order[i]]:
            j += 1
        root = find(face_of_pair[order[i]])
        for k in range(i + 1, j + 1):
            r2 = find(face_of_pair[order[k]])
            if r2 != root:
                parent[r2] = root
        i = j + 1
    roots = np.array([find(f) for f in range(len(m.faces))])
    _, comp = np.unique(roots, return_inverse=True)
    return comp


def _cap_boundary_loops(vertices, faces):
    """Close every boundary loop with a triangle fan over the loop centroid."""
    pairs_raw = faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    pairs = np.sort(pairs_raw, axis=1)
    edges, inverse, counts = np.unique(pairs, axis=0, return_inverse=True,
                                       return_counts=True)
    boundary = edges[counts == 1]
    if len(boundary) == 0:
        return vertices, faces
    nbr = {}
    for a, b in boundary:
        nbr.setdefault(int(a), []).append(int(b))
        nbr.setdefault(int(b), []).append(int(a))
    for v, ns in nbr.items():
        if len(ns) != 2:
            raise MeshError(f"cannot cap region: rim vertex {v} has {len(ns)} boundary edges")
    visited = set()
    new_vertices = [vertices]
    new_faces = [faces]
    next_idx = len(vertices)
    for start in sorted(nbr):
        if start in visited:
            continue
        loop = [start]
        visited.add(start)
        prev, cur = None, start
        while True:
            a, b = nbr[cur]
            nxt = a if a != prev else b
            if nxt == start:
                break
            loop.append(nxt)
            visited.add(nxt)
            prev, cur = cur, nxt
        centroid = vertices[loop].mean(axis=0)
        new_vertices.append(centroid[None, :])
        fan = [[loop[i], loop[(i + 1) % len(loop)], next_idx] for i in range(len(loop))]
        new_faces.append(np.asarray(fan, dtype=np.int64))
        next_idx += 1
    return np.vstack(new_vertices), np.vstack(new_faces)


def voxelize(m, region, dims, ndc, cap=True, max_open_fraction=0.005):
    """Rasterize the closed region bounded by `region` surface labels.

    A voxel is foreground iff its center is inside the surface, decided by
    z-column ray-crossing parity.  Column sample points carry a fixed tiny
    symbolic perturbation so no ray hits an edge or vertex exactly.
    """
    vertices, faces = region_submesh(m, region, cap=cap)
    return _parity_fill(vertices, faces, dims, ndc, max_open_fraction)


def _parity_fill(vertices, faces, dims, ndc, max_open_fraction):
    nx, ny, nz = dims
    out = np.zeros(dims, dtype=bool)
    if len(faces) == 0:
        return out
    # symbolic perturbation: irrational-ratio offsets, far below voxel scale
    dx = 1e-7 * ndc.scale[0]
    dy = 1e-7 * 1.6180339887 * ndc.scale[1]
    xs = ndc.translation[0] + ndc.scale[0] * np.arange(nx) + dx
    ys = ndc.translation[1] + ndc.scale[1] * np.arange(ny) + dy
    zs = ndc.translation[2] + ndc.scale[2] * np.arange(nz)

    tri = vertices[faces]                      # (F, 3, 3)
    cols = []
    zhits = []
    for f in range(len(tri)):
        p0, p1, p2 = tri[f]
        area2 = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
        if abs(area2) < 1e-14:
            continue                           # vertical triangle: no column coverage
        lo = np.minimum(np.minimum(p0, p1), p2)
        hi = np.maximum(np.maximum(p0, p1), p2)
        ix0 = np.searchsorted(xs, lo[0], side="left")
        ix1 = np.searchsorted(xs, hi[0], side="right")
        iy0 = np.searchsorted(ys, lo[1], side="left")
        iy1 = np.searchsorted(ys, hi[1], side="right")
        if ix0 >= ix1 or iy0 >= iy1:
            continue
        gx = xs[ix0:ix1]
        gy = ys[iy0:iy1]
        X, Y = np.meshgrid(gx, gy, indexing="ij")
        w0 = ((p1[0] - X) * (p2[1] - Y) - (p1[1] - Y) * (p2[0] - X)) / area2
        w1 = ((p2[0] - X) * (p0[1] - Y) - (p2[1] - Y) * (p0[0] - X)) / area2
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)
        if not inside.any():
            continue
        z = w0 * p0[2] + w1 * p1[2] + w2 * p2[2]
        ii, jj = np.nonzero(inside)
        cols.append((ii + ix0) * ny + (jj + iy0))
        zhits.append(z[inside])
    if not cols:
        return out
    col = np.concatenate(cols)
    z = np.concatenate(zhits)
    order = np.lexsort((z, col))
    col = col[order]
    z = z[order]
    starts = np.flatnonzero(np.r_[True, col[1:] != col[:-1]])
    ends = np.r_[starts[1:], len(col)]
    n_odd = 0
    for s, e in zip(starts, ends):
        crossings = z[s:e]
        if (e - s) % 2 == 1:
            n_odd += 1
        c = col[s]
        ix, iy = divmod(int(c), ny)
        for k in range(0, (e - s) - 1, 2):
            zlo, zhi = crossings[k], crossings[k + 1]
            k0 = int(np.searchsorted(zs, zlo, side="right"))
            k1 = int(np.searchsorted(zs, zhi, side="right"))
            if k1 > k0:
                out[ix, iy, k0:k1] = True
    if n_odd / float(nx * ny) > max_open_fraction:
        raise OpenSurfaceError(
            f"parity inconsistency on {n_odd} of {nx * ny} columns: surface not closed"
        )
    return out


def mesh_to_label_volume(m, dims, ndc, spacing, origin):
    """Voxelized anatomical labels of a reconstructed mesh (LV=1, RV=2, Myo=3)."""
    from . import anatomy

    lv = voxelize(m, (anatomy.LV_ENDO,), dims, ndc)
    rv = voxelize(m, (anatomy.RV_ENDO,), dims, ndc)
    hull = voxelize(m, (anatomy.LV_EPI, anatomy.RV_EPI), dims, ndc)
    labels = np.zeros(dims, dtype=np.uint8)
    labels[hull] = anatomy.MYO
    labels[rv & ~lv] = anatomy.RV
    labels[lv] = anatomy.LV
    return LabelVolume(labels=labels, spacing=spacing, origin=origin)


# ---------------------------------------------------------------------------
# Mesh file I/O (binary little-endian PLY with per-vertex anat_label)
# ---------------------------------------------------------------------------

_VERTEX_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("anat_label", "u1")])
_FACE_DTYPE = np.dtype([("n", "u1"), ("v", "<u4", (3,))])


def save_mesh(m, path):
    path = Path(path)
    header = "\n".join([
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {m.n_vertices}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar anat_label",
        f"element face {m.n_faces}",
        "property list uchar uint vertex_indices",
        "end_header",
    ]) + "\n"
    verts = np.empty(m.n_vertices, dtype=_VERTEX_DTYPE)
    verts["x"] = m.vertices[:, 0]
    verts["y"] = m.vertices[:, 1]
    verts["z"] = m.vertices[:, 2]
    verts["anat_label"] = m.labels
    faces = np.empty(m.n_faces, dtype=_FACE_DTYPE)
    faces["n"] = 3
    faces["v"] = m.faces
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(verts.tobytes())
        fh.write(faces.tobytes())
    return path


def load_mesh(path):
    path = Path(path)
    blob = path.read_bytes()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise MeshFormatError(f"{path}: not a PLY file")
    header = blob[:end].decode("ascii", errors="replace").splitlines()
    body = blob[end + len(b"end_header\n"):]

    if "format binary_little_endian 1.0" not in header:
        raise MeshFormatError(f"{path}: only binary little-endian PLY is supported")
    n_vertex = n_face = None
    vertex_props = []
    current = None
    for line in header:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "element":
            current = tok[1]
            if current == "vertex":
                n_vertex = int(tok[2])
            elif current == "face":
                n_face = int(tok[2])
        elif tok[0] == "property" and current == "vertex":
            vertex_props.append((tok[-1], tok[1]))
    if n_vertex is None or n_face is None:
        raise MeshFormatError(f"{path}: missing vertex/face elements")
    names = [p[0] for p in vertex_props]
    if "anat_label" not in names:
        raise MeshFormatError(f"{path}: missing label property 'anat_label'")
    for need in ("x", "y", "z"):
        if need not in names:
            raise MeshFormatError(f"{path}: missing vertex property '{need}'")
    type_map = {"float": "<f4", "uchar": "u1", "float32": "<f4", "uint8": "u1"}
    try:
        vdtype = np.dtype([(n, type_map[t]) for n, t in vertex_props])
    except KeyError as e:
        raise MeshFormatError(f"{path}: unsupported vertex property type {e}") from e

    vbytes = vdtype.itemsize * n_vertex
    if len(body) < vbytes:
        raise MeshFormatError(f"{path}: truncated vertex payload")
    vrec = np.frombuffer(body[:vbytes], dtype=vdtype)
    fbody = body[vbytes:]
    if n_face:
        if len(fbody) < 1:
            raise MeshFormatError(f"{path}: truncated face payload")
        if fbody[0] != 3:
            raise MeshFormatError(f"{path}: non-triangle faces (list count {fbody[0]})")
        if len(fbody) != _FACE_DTYPE.itemsize * n_face:
            raise MeshFormatError(f"{path}: face payload size mismatch (non-triangle faces?)")
        frec = np.frombuffer(fbody, dtype=_FACE_DTYPE)
        if np.any(frec["n"] != 3):
            raise MeshFormatError(f"{path}: non-triangle faces")
        faces = frec["v"].astype(np.int64)
    else:
        faces = np.zeros((0, 3), dtype=np.int64)
    vertices = np.stack([vrec["x"], vrec["y"], vrec["z"]], axis=1).astype(np.float64)
    return LabeledMesh(vertices=vertices, faces=faces,
                       labels=vrec["anat_label"].astype(np.uint8))


def save_obj(m, path):
    """Convenience OBJ export; labels land in a sidecar <name>.labels file."""
    path = Path(path)
    lines = [f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}" for v in m.vertices]
    lines += [f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}" for f in m.faces]
    path.write_text("\n".join(lines) + "\n")
    label_path = path.with_suffix(".labels")
    label_path.write_text("\n".join(str(int(l)) for l in m.labels) + "\n")
    return path, label_path
