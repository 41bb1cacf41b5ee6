"""Triangle meshes from the signed-distance field, plus BVH ray casting.

Extraction marches the blended field on a regular lattice, welds duplicate
vertices, and drops degenerate faces. The BVH is an immutable median-split
tree over triangle bounds; traversal and Moller-Trumbore run as numba
kernels so the material stage can afford per-sample visibility rays.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit
from skimage import measure

from . import tensogrid

WELD_TOL = 1e-7
MIN_FACE_AREA = 1e-12
LEAF_SIZE = 8


# ---------------------------------------------------------------------------
# mesh container


@dataclass
class TriangleMesh:
    """Vertices [V,3] float64, faces [F,3] int64, optional unit normals [V,3].

    Right-handed, +Y up; face winding is counter-clockwise seen from outside.
    """

    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or
                                self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, np.float64).reshape(-1, 3)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def area(self) -> float:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return float(0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1).sum())


def face_areas(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a, b, c = (verts[faces[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def vertex_normals(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals (unnormalized cross sums, then unit)."""
    a, b, c = (verts[faces[:, i]] for i in range(3))
    fn = np.cross(b - a, c - a)
    out = np.zeros_like(verts)
    for i in range(3):
        np.add.at(out, faces[:, i], fn)
    return out / np.maximum(np.linalg.norm(out, axis=1, keepdims=True), 1e-12)


def weld_vertices(verts: np.ndarray, faces: np.ndarray, tol: float = WELD_TOL):
    """Merge vertices closer than tol (on a quantization lattice), drop
    degenerate faces and unreferenced vertices."""
    key = np.round(verts / tol).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True,
                                  return_inverse=True)
    verts = verts[first]
    faces = inverse[faces]
    distinct = ((faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2])
                & (faces[:, 0] != faces[:, 2]))
    faces = faces[distinct]
    faces = faces[face_areas(verts, faces) > MIN_FACE_AREA]
    used, faces = np.unique(faces, return_inverse=True)
    return verts[used], faces.reshape(-1, 3)


def euler_characteristic(mesh: TriangleMesh) -> int:
    edges = mesh.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    edges = np.sort(edges, axis=1)
    n_edges = len(np.unique(edges, axis=0))
    return len(mesh.vertices) - n_edges + len(mesh.faces)


# ---------------------------------------------------------------------------
# level-set extraction


def extract_level_set(sdf_fn, resolution: int = 128, bound: float = 1.0,
                      chunk: int = 1 << 17) -> TriangleMesh:
    """Classic marching cubes over sdf_fn sampled on a resolution^3 lattice.

    sdf_fn: [N,3] -> [N]. An empty zero crossing yields an empty mesh with
    a warning rather than an error, so callers can treat it as a value.
    """
    xs = np.linspace(-bound, bound, resolution)
    pts = np.stack(np.meshgrid(xs, xs, xs, indexing="ij"), axis=-1).reshape(-1, 3)
    vol = np.empty(len(pts))
    for i in range(0, len(pts), chunk):
        vol[i:i + chunk] = sdf_fn(pts[i:i + chunk])
    vol = vol.reshape(resolution, resolution, resolution)
    if vol.min() > 0.0 or vol.max() < 0.0:
        warnings.warn("level set is empty; returning an empty mesh")
        empty = np.zeros((0, 3))
        return TriangleMesh(empty, np.zeros((0, 3), np.int64), empty.copy())
    dx = xs[1] - xs[0]
    verts, faces, _, _ = measure.marching_cubes(
        vol, 0.0, spacing=(dx, dx, dx), method="lorensen")
    verts = verts.astype(np.float64) - bound
    verts, faces = weld_vertices(verts, faces.astype(np.int64))
    return TriangleMesh(verts, faces, vertex_normals(verts, faces))


def marching_cubes(stack: tensogrid.MipStack, decoder, resolution: int = 128,
                   alpha: float | None = None, bound: float = 1.0,
                   chunk: int = 1 << 17) -> TriangleMesh:
    """Extract the blended level set; alpha overrides the stack's mix."""
    if alpha is not None and alpha != stack.alpha:
        stack = tensogrid.MipStack(stack.base, alpha)

    def sdf_fn(p):
        return tensogrid.blended_sdf_values(p.astype(np.float32), stack, decoder)

    return extract_level_set(sdf_fn, resolution, bound, chunk)


# ---------------------------------------------------------------------------
# BVH


@njit(cache=True)
def _traverse(o, d, bmin, bmax, left, right, start, count, v0, e1, e2,
              tri_id, t_min, t_max):
    n = o.shape[0]
    t_out = np.full(n, np.inf)
    id_out = np.full(n, -1, np.int64)
    stack = np.empty(128, np.int32)
    for i in range(n):
        ox, oy, oz = o[i, 0], o[i, 1], o[i, 2]
        dx, dy, dz = d[i, 0], d[i, 1], d[i, 2]
        best_t = t_max
        best_id = -1
        top = 0
        stack[0] = 0
        top += 1
        while top > 0:
            top -= 1
            node = stack[top]
            # slab test, axis by axis to dodge 0 * inf
            tnear = t_min
            tfar = best_t
            ok = True
            for ax in range(3):
                dv = d[i, ax]
                ov = o[i, ax]
                lo = bmin[node, ax]
                hi = bmax[node, ax]
                if abs(dv) < 1e-300:
                    if ov < lo or ov > hi:
                        ok = False
                        break
                else:
                    inv = 1.0 / dv
                    ta = (lo - ov) * inv
                    tb = (hi - ov) * inv
                    if ta > tb:
                        ta, tb = tb, ta
                    if ta > tnear:
                        tnear = ta
                    if tb < tfar:
                        tfar = tb
                    if tnear > tfar:
                        ok = False
                        break
            if not ok:
                continue
            if count[node] > 0:  # leaf
                for k in range(start[node], start[node] + count[node]):
                    # Moller-Trumbore, double sided
                    px = dy * e2[k, 2] - dz * e2[k, 1]
                    py = dz * e2[k, 0] - dx * e2[k, 2]
                    pz = dx * e2[k, 1] - dy * e2[k, 0]
                    det = e1[k, 0] * px + e1[k, 1] * py + e1[k, 2] * pz
                    if abs(det) < 1e-12:
                        continue
                    inv_det = 1.0 / det
                    tx = ox - v0[k, 0]
                    ty = oy - v0[k, 1]
                    tz = oz - v0[k, 2]
                    u = (tx * px + ty * py + tz * pz) * inv_det
                    if u < 0.0 or u > 1.0:
                        continue
                    qx = ty * e1[k, 2] - tz * e1[k, 1]
                    qy = tz * e1[k, 0] - tx * e1[k, 2]
                    qz = tx * e1[k, 1] - ty * e1[k, 0]
                    v = (dx * qx + dy * qy + dz * qz) * inv_det
                    if v < 0.0 or u + v > 1.0:
                        continue
                    t = (e2[k, 0] * qx + e2[k, 1] * qy + e2[k, 2] * qz) * inv_det
                    if t <= t_min or t > best_t:
                        continue
                    # equal depths resolve to the lowest triangle id
                    if t < best_t or (t == best_t and tri_id[k] < best_id) \
                            or best_id < 0:
                        best_t = t
                        best_id = tri_id[k]
            else:
                stack[top] = left[node]
                top += 1
                stack[top] = right[node]
                top += 1
        if best_id >= 0:
            t_out[i] = best_t
            id_out[i] = best_id
    return t_out, id_out


@njit(cache=True)
def _brute(o, d, v0, e1, e2, t_min, t_max):
    n = o.shape[0]
    m = v0.shape[0]
    t_out = np.full(n, np.inf)
    id_out = np.full(n, -1, np.int64)
    for i in range(n):
        ox, oy, oz = o[i, 0], o[i, 1], o[i, 2]
        dx, dy, dz = d[i, 0], d[i, 1], d[i, 2]
        best_t = t_max
        best_id = -1
        for k in range(m):  # ascending id: strict < keeps the lowest id on ties
            px = dy * e2[k, 2] - dz * e2[k, 1]
            py = dz * e2[k, 0] - dx * e2[k, 2]
            pz = dx * e2[k, 1] - dy * e2[k, 0]
            det = e1[k, 0] * px + e1[k, 1] * py + e1[k, 2] * pz
            if abs(det) < 1e-12:
                continue
            inv_det = 1.0 / det
            tx = ox - v0[k, 0]
            ty = oy - v0[k, 1]
            tz = oz - v0[k, 2]
            u = (tx * px + ty * py + tz * pz) * inv_det
            if u < 0.0 or u > 1.0:
                continue
            qx = ty * e1[k, 2] - tz * e1[k, 1]
            qy = tz * e1[k, 0] - tx * e1[k, 2]
            qz = tx * e1[k, 1] - ty * e1[k, 0]
            v = (dx * qx + dy * qy + dz * qz) * inv_det
            if v < 0.0 or u + v > 1.0:
                continue
            t = (e2[k, 0] * qx + e2[k, 1] * qy + e2[k, 2] * qz) * inv_det
            if t <= t_min or t > best_t:
                continue
            if t < best_t or best_id < 0:
                best_t = t
                best_id = k
        if best_id >= 0:
            t_out[i] = best_t
            id_out[i] = best_id
    return t_out, id_out


class Bvh:
    """Median-split AABB tree; immutable once built, safe to query
    concurrently. Triangles live in exactly one leaf."""

    def __init__(self, mesh: TriangleMesh, leaf_size: int = LEAF_SIZE):
        if mesh.is_empty:
            raise ValueError("cannot build a BVH over an empty mesh")
        tris = mesh.vertices[mesh.faces]
        lo = tris.min(axis=1)
        hi = tris.max(axis=1)
        cent = tris.mean(axis=1)

        bmin, bmax, left, right, start, count = [], [], [], [], [], []
        order: list[np.ndarray] = []
        cursor = [0]

        def build(idx: np.ndarray) -> int:
            node = len(bmin)
            bmin.append(lo[idx].min(axis=0))
            bmax.append(hi[idx].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(0)
            count.append(0)
            spread = cent[idx].max(axis=0) - cent[idx].min(axis=0)
            if len(idx) <= leaf_size or spread.max() == 0.0:
                start[node] = cursor[0]
                count[node] = len(idx)
                cursor[0] += len(idx)
                order.append(idx)
                return node
            axis = int(np.argmax(spread))
            mid = len(idx) // 2
            part = np.argpartition(cent[idx, axis], mid)
            left[node] = build(idx[part[:mid]])
            right[node] = build(idx[part[mid:]])
            return node

        build(np.arange(len(mesh.faces)))
        self.bmin = np.asarray(bmin)
        self.bmax = np.asarray(bmax)
        self.left = np.asarray(left, np.int32)
        self.right = np.asarray(right, np.int32)
        self.start = np.asarray(start, np.int32)
        self.count = np.asarray(count, np.int32)
        self.tri_id = np.concatenate(order)
        ordered = tris[self.tri_id]
        self.v0 = np.ascontiguousarray(ordered[:, 0])
        self.e1 = np.ascontiguousarray(ordered[:, 1] - ordered[:, 0])
        self.e2 = np.ascontiguousarray(ordered[:, 2] - ordered[:, 0])


def intersect_rays(bvh: Bvh, o: np.ndarray, d: np.ndarray,
                   t_min: float = 0.0, t_max: float = np.inf):
    """Nearest hits for a ray batch: (t [N], triangle id [N], -1 on miss)."""
    o = np.ascontiguousarray(o, np.float64)
    d = np.ascontiguousarray(d, np.float64)
    return _traverse(o, d, bvh.bmin, bvh.bmax, bvh.left, bvh.right,
                     bvh.start, bvh.count, bvh.v0, bvh.e1, bvh.e2,
                     bvh.tri_id, t_min, t_max)


def intersect_brute(mesh: TriangleMesh, o: np.ndarray, d: np.ndarray,
                    t_min: float = 0.0, t_max: float = np.inf):
    """All-triangles reference scan with the same hit rules as the BVH."""
    tris = mesh.vertices[mesh.faces]
    o = np.ascontiguousarray(o, np.float64)
    d = np.ascontiguousarray(d, np.float64)
    v0 = np.ascontiguousarray(tris[:, 0])
    e1 = np.ascontiguousarray(tris[:, 1] - tris[:, 0])
    e2 = np.ascontiguousarray(tris[:, 2] - tris[:, 0])
    return _brute(o, d, v0, e1, e2, t_min, t_max)


# ---------------------------------------------------------------------------
# mesh IO


def write_obj(path, mesh: TriangleMesh) -> None:
    with open(path, "w") as f:
        f.write("# sdfrecon mesh, right-handed +Y up\n")
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        if mesh.normals is not None:
            for n in mesh.normals:
                f.write(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}\n")
            for a, b, c in mesh.faces + 1:
                f.write(f"f {a}//{a} {b}//{b} {c}//{c}\n")
        else:
            for a, b, c in mesh.faces + 1:
                f.write(f"f {a} {b} {c}\n")


def read_obj(path) -> TriangleMesh:
    verts, norms, faces = [], [], []
    with open(path) as f:
        for line in f:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "vn":
                norms.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                faces.append([int(t.split("/")[0]) - 1 for t in tok[1:4]])
    return TriangleMesh(np.asarray(verts, np.float64).reshape(-1, 3),
                        np.asarray(faces, np.int64).reshape(-1, 3),
                        np.asarray(norms, np.float64) if norms else None)


def write_ply(path, mesh: TriangleMesh) -> None:
    """Binary little-endian PLY; float32 positions (and normals if present)."""
    has_n = mesh.normals is not None
    head = ["ply", "format binary_little_endian 1.0",
            f"element vertex {len(mesh.vertices)}",
            "property float x", "property float y", "property float z"]
    if has_n:
        head += ["property float nx", "property float ny", "property float nz"]
    head += [f"element face {len(mesh.faces)}",
             "property list uchar int vertex_indices", "end_header"]
    vdata = mesh.vertices if not has_n \
        else np.concatenate([mesh.vertices, mesh.normals], axis=1)
    fdata = np.empty(len(mesh.faces),
                     dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    fdata["n"] = 3
    fdata["idx"] = mesh.faces
    with open(path, "wb") as f:
        f.write(("\n".join(head) + "\n").encode())
        f.write(vdata.astype("<f4").tobytes())
        f.write(fdata.tobytes())


def read_ply(path) -> TriangleMesh:
    """Reads the subset written by write_ply."""
    with open(path, "rb") as f:
        props = []
        n_vert = n_face = 0
        for raw in iter(f.readline, b""):
            tok = raw.decode().strip().split()
            if tok[:2] == ["element", "vertex"]:
                n_vert = int(tok[2])
            elif tok[:2] == ["element", "face"]:
                n_face = int(tok[2])
            elif tok[0] == "property" and tok[1] == "float":
                props.append(tok[2])
            elif tok[0] == "end_header":
                break
        vdata = np.frombuffer(f.read(4 * len(props) * n_vert), "<f4")
        vdata = vdata.reshape(n_vert, len(props)).astype(np.float64)
        fdata = np.frombuffer(
            f.read(), dtype=[("n", "u1"), ("idx", "<i4", (3,))], count=n_face)
    normals = vdata[:, 3:6] if len(props) >= 6 else None
    return TriangleMesh(vdata[:, :3], fdata["idx"].astype(np.int64), normals)
