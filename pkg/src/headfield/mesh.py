"""Triangle meshes: OBJ/PLY I/O, vertex normals, cotangent Laplacian, surface distance."""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

COT_CLAMP = 1.0 / np.tan(np.deg2rad(1.0))  # caps cotangent weights on sliver triangles


class MeshError(ValueError):
    pass


class MeshParseError(MeshError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


@dataclass(frozen=True)
class TriMesh:
    """Indexed triangle mesh. Immutable; vertices (N,3) float64, faces (F,3) int64, CCW winding."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (N,3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must be (F,3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError("face index out of range")
        if f.size and (
            np.any(f[:, 0] == f[:, 1]) or np.any(f[:, 1] == f[:, 2]) or np.any(f[:, 0] == f[:, 2])
        ):
            raise MeshError("degenerate face: repeated vertex index")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        self.vertices.setflags(write=False)
        self.faces.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        """Same connectivity, new vertex positions."""
        return TriMesh(vertices, self.faces)

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def _parse_obj(path: Path) -> TriMesh:
    vertices = []
    faces = []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            tag = tokens[0]
            if tag == "v":
                if len(tokens) < 4:
                    raise MeshParseError(path, lineno, "vertex needs 3 coordinates")
                try:
                    vertices.append([float(t) for t in tokens[1:4]])
                except ValueError as e:
                    raise MeshParseError(path, lineno, f"bad vertex coordinate: {e}") from e
            elif tag == "f":
                idx = []
                for t in tokens[1:]:
                    head = t.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError as e:
                        raise MeshParseError(path, lineno, f"bad face index {head!r}") from e
                    if i <= 0:
                        raise MeshParseError(path, lineno, f"face index {i} not positive (1-indexed)")
                    idx.append(i - 1)
                if len(idx) < 3:
                    raise MeshParseError(path, lineno, "face needs at least 3 indices")
                for i in idx:
                    if i >= len(vertices):
                        raise MeshParseError(
                            path, lineno, f"face references vertex {i + 1} of {len(vertices)}"
                        )
                # fan-triangulate polygons
                for a, b in zip(idx[1:-1], idx[2:]):
                    faces.append([idx[0], a, b])
            # other records (vn, vt, o, g, usemtl, ...) ignored
    if not vertices:
        raise MeshParseError(path, 0, "no vertices")
    return TriMesh(np.array(vertices), np.array(faces, dtype=np.int64).reshape(-1, 3))


_PLY_DTYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply(path: Path) -> TriMesh:
    with open(path, "rb") as fh:
        data = fh.read()
    # header is ASCII up to "end_header"
    end = data.find(b"end_header")
    if end < 0:
        raise MeshParseError(path, 0, "no end_header in PLY")
    header_bytes = data[: end + len(b"end_header")]
    body = data[end + len(b"end_header"):]
    if body[:1] == b"\r":
        body = body[1:]
    if body[:1] == b"\n":
        body = body[1:]

    fmt = None
    elements = []  # (name, count, [(prop_kind, ...)])
    for lineno, raw in enumerate(header_bytes.decode("ascii", errors="replace").splitlines(), 1):
        tokens = raw.strip().split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise MeshParseError(path, lineno, "property before element")
            if tokens[1] == "list":
                elements[-1][2].append(("list", _PLY_DTYPES[tokens[2]], _PLY_DTYPES[tokens[3]], tokens[4]))
            else:
                elements[-1][2].append(("scalar", _PLY_DTYPES[tokens[1]], tokens[2]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshParseError(path, 0, f"unsupported PLY format {fmt!r}")

    vertices = None
    faces = []
    if fmt == "ascii":
        tokens = body.decode("ascii").split()
        pos = 0
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = {}
                for p in props:
                    if p[0] == "list":
                        n = int(tokens[pos]); pos += 1
                        row[p[3]] = [int(tokens[pos + i]) for i in range(n)]
                        pos += n
                    else:
                        row[p[2]] = float(tokens[pos]); pos += 1
                rows.append(row)
            if name == "vertex":
                vertices = np.array([[r["x"], r["y"], r["z"]] for r in rows])
            elif name == "face":
                key = "vertex_indices" if rows and "vertex_indices" in rows[0] else "vertex_index"
                for r in rows:
                    idx = r[key]
                    for a, b in zip(idx[1:-1], idx[2:]):
                        faces.append([idx[0], a, b])
    else:
        offset = 0
        for name, count, props in elements:
            if all(p[0] == "scalar" for p in props):
                dtype = np.dtype([(p[2], "<" + p[1]) for p in props])
                arr = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
                offset += dtype.itemsize * count
                if name == "vertex":
                    vertices = np.stack(
                        [arr["x"].astype(np.float64), arr["y"].astype(np.float64), arr["z"].astype(np.float64)],
                        axis=1,
                    )
            else:
                for _ in range(count):
                    row_lists = {}
                    for p in props:
                        if p[0] == "list":
                            cnt_dt = np.dtype("<" + p[1])
                            n = int(np.frombuffer(body, dtype=cnt_dt, count=1, offset=offset)[0])
                            offset += cnt_dt.itemsize
                            idx_dt = np.dtype("<" + p[2])
                            idx = np.frombuffer(body, dtype=idx_dt, count=n, offset=offset)
                            offset += idx_dt.itemsize * n
                            row_lists[p[3]] = idx
                        else:
                            dt = np.dtype("<" + p[1])
                            offset += dt.itemsize
                    if name == "face":
                        idx = row_lists.get("vertex_indices", row_lists.get("vertex_index"))
                        idx = [int(i) for i in idx]
                        for a, b in zip(idx[1:-1], idx[2:]):
                            faces.append([idx[0], a, b])
    if vertices is None:
        raise MeshParseError(path, 0, "PLY has no vertex element")
    try:
        return TriMesh(vertices, np.array(faces, dtype=np.int64).reshape(-1, 3))
    except MeshError as e:
        raise MeshParseError(path, 0, str(e)) from e


def load_mesh(path, fmt: str | None = None) -> TriMesh:
    """Load an ASCII OBJ or ASCII / binary little-endian PLY file.

    Format is inferred from the extension unless `fmt` ("obj" or "ply") is given.
    Vertex order is preserved from the file. Polygon faces are fan-triangulated.
    """
    path = Path(path)
    kind = (fmt or path.suffix.lstrip(".")).lower()
    if kind == "obj":
        return _parse_obj(path)
    if kind == "ply":
        return _parse_ply(path)
    raise MeshError(f"unsupported mesh format {kind!r} for {path}")


def save_mesh(mesh: TriMesh, path) -> None:
    """Write an ASCII OBJ. Coordinates use repr precision so load round-trips bitwise."""
    path = Path(path)
    if path.suffix.lower() != ".obj":
        raise MeshError(f"only OBJ output is supported, got {path.suffix!r}")
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def face_normals(mesh: TriMesh, normalize: bool = True) -> np.ndarray:
    v = mesh.vertices
    f = mesh.faces
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    if normalize:
        lens = np.linalg.norm(n, axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            n = np.where(lens > 0, n / lens, 0.0)
    return n


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted vertex normals, unit length.

    Degenerate (zero-area) faces contribute nothing. Isolated vertices get a
    zero vector and a warning.
    """
    cross = face_normals(mesh, normalize=False)  # |cross| = 2 * area
    acc = np.zeros_like(mesh.vertices)
    for c in range(3):
        np.add.at(acc, mesh.faces[:, c], cross)
    lens = np.linalg.norm(acc, axis=1, keepdims=True)
    touched = np.zeros(mesh.n_vertices, dtype=bool)
    touched[mesh.faces.ravel()] = True
    if not touched.all():
        warnings.warn(f"{int((~touched).sum())} isolated vertices get zero normals")
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(lens > 0, acc / lens, 0.0)
    out[~touched] = 0.0
    return out


def _edge_use_counts(faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0, return_counts=True)


def cotangent_laplacian(mesh: TriMesh) -> sp.csr_matrix:
    """Cotangent-weight graph Laplacian.

    Off-diagonal: -(cot a + cot b)/2 over the one or two triangles incident to
    the edge; diagonal: negative row sum, so rows sum to zero. Cotangents are
    clamped to +-cot(1 deg) to bound conditioning on sliver triangles.
    Raises on non-manifold edges (shared by more than two faces).
    """
    _, counts = _edge_use_counts(mesh.faces)
    if counts.size and counts.max() > 2:
        raise MeshError("non-manifold edge: shared by more than two faces")

    v = mesh.vertices
    f = mesh.faces
    rows, cols, vals = [], [], []
    for corner in range(3):
        i = f[:, (corner + 1) % 3]
        j = f[:, (corner + 2) % 3]
        k = f[:, corner]
        u = v[i] - v[k]
        w = v[j] - v[k]
        cross = np.linalg.norm(np.cross(u, w), axis=1)
        dot = np.einsum("ij,ij->i", u, w)
        with np.errstate(divide="ignore", invalid="ignore"):
            cot = np.where(cross > 0, dot / np.maximum(cross, 1e-300), COT_CLAMP)
        cot = np.clip(cot, -COT_CLAMP, COT_CLAMP)
        half = -0.5 * cot
        rows.extend([i, j])
        cols.extend([j, i])
        vals.extend([half, half])
    n = mesh.n_vertices
    off = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    return (off + sp.diags(diag)).tocsr()


def _closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest points on triangles (a,b,c) to points p; all inputs (M,3), paired row-wise."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def settle(mask, value):
        m = mask & ~done
        out[m] = value[m] if value.ndim == 2 else value
        done[m] = True

    settle((d1 <= 0) & (d2 <= 0), a)  # vertex a
    settle((d3 >= 0) & (d4 <= d3), b)  # vertex b
    settle((d6 >= 0) & (d5 <= d6), c)  # vertex c

    vc = d1 * d4 - d3 * d2
    with np.errstate(invalid="ignore", divide="ignore"):
        t_ab = d1 / np.where(d1 - d3 != 0, d1 - d3, 1.0)
    settle((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + t_ab[:, None] * ab)  # edge ab

    vb = d5 * d2 - d1 * d6
    with np.errstate(invalid="ignore", divide="ignore"):
        t_ac = d2 / np.where(d2 - d6 != 0, d2 - d6, 1.0)
    settle((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + t_ac[:, None] * ac)  # edge ac

    va = d3 * d6 - d5 * d4
    num = d4 - d3
    den = (d4 - d3) + (d5 - d6)
    with np.errstate(invalid="ignore", divide="ignore"):
        t_bc = num / np.where(den != 0, den, 1.0)
    settle((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), b + t_bc[:, None] * (c - b))  # edge bc

    denom = va + vb + vc
    with np.errstate(invalid="ignore", divide="ignore"):
        vw = np.where(denom[:, None] != 0, np.stack([vb, vc], axis=1) / denom[:, None], 1 / 3)
    interior = a + vw[:, :1] * ab + vw[:, 1:] * ac
    settle(np.ones(len(p), dtype=bool), interior)
    return out


class TriangleIndex:
    """Exact closest-point queries against a triangle soup.

    A k-d tree over triangle centroids prunes candidates; exact point-triangle
    distances decide. Per-triangle circumscribing radii guarantee no miss.
    """

    def __init__(self, mesh: TriMesh):
        if mesh.n_faces == 0:
            raise MeshError("cannot index an empty mesh")
        v = mesh.vertices
        f = mesh.faces
        self._a = v[f[:, 0]]
        self._b = v[f[:, 1]]
        self._c = v[f[:, 2]]
        self._centroids = (self._a + self._b + self._c) / 3.0
        self._radii = np.maximum.reduce([
            np.linalg.norm(self._a - self._centroids, axis=1),
            np.linalg.norm(self._b - self._centroids, axis=1),
            np.linalg.norm(self._c - self._centroids, axis=1),
        ])
        self._r_max = float(self._radii.max())
        self._tree = cKDTree(self._centroids)

    def query(self, points: np.ndarray, return_points: bool = False):
        """Unsigned distance from each point to the nearest triangle."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        q = len(p)
        k = min(8, len(self._centroids))
        cd, ci = self._tree.query(p, k=k)
        if k == 1:
            cd = cd[:, None]
            ci = ci[:, None]
        flat_p = np.repeat(p, k, axis=0)
        flat_i = ci.ravel()
        cp = _closest_point_on_triangles(flat_p, self._a[flat_i], self._b[flat_i], self._c[flat_i])
        d = np.linalg.norm(cp - flat_p, axis=1).reshape(q, k)
        best = np.argmin(d, axis=1)
        dist = d[np.arange(q), best]
        pts = cp.reshape(q, k, 3)[np.arange(q), best]

        # triangles whose centroid lies beyond the kth examined centroid may
        # still be closer than the current best; re-examine those queries
        unsafe = np.nonzero(cd[:, -1] < dist + self._r_max)[0]
        for qi in unsafe:
            cand = self._tree.query_ball_point(p[qi], dist[qi] + self._r_max)
            cand = np.asarray(cand, dtype=np.int64)
            if len(cand) == 0:
                continue
            cp2 = _closest_point_on_triangles(
                np.broadcast_to(p[qi], (len(cand), 3)).copy(),
                self._a[cand], self._b[cand], self._c[cand],
            )
            d2 = np.linalg.norm(cp2 - p[qi], axis=1)
            j = np.argmin(d2)
            if d2[j] < dist[qi]:
                dist[qi] = d2[j]
                pts[qi] = cp2[j]
        if return_points:
            return dist, pts
        return dist


def mesh_l2_distance(a: TriMesh, b: TriMesh) -> float:
    """Mean distance from vertices of `a` to the closest point on surface `b`.

    One-directional by definition; mesh_l2_distance(a, b) need not equal
    mesh_l2_distance(b, a).
    """
    if a.n_vertices == 0 or b.n_faces == 0:
        raise MeshError("mesh_l2_distance requires non-empty meshes")
    return float(TriangleIndex(b).query(a.vertices).mean())
