"""Triangle meshes with template tags: I/O, normals, volume and sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import DegenerateFaceError, MeshValidationError, OpenMeshError

DEGENERATE_EPS = 1e-12


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


class TriangleMesh:
    """Vertices (n, 3) in mm and counter-clockwise faces (m, 3).

    Connectivity never changes after construction; deformation produces a new
    mesh through :meth:`with_vertices`.
    """

    def __init__(self, vertices, faces):
        v = _frozen(vertices, np.float64)
        f = _frozen(np.asarray(faces).reshape(-1, 3), np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshValidationError("vertices must have shape (n, 3)")
        if not np.all(np.isfinite(v)):
            raise MeshValidationError("vertices contain non-finite values")
        n = v.shape[0]
        if f.size:
            bad = (f < 0) | (f >= n)
            if bad.any():
                row = int(np.nonzero(bad.any(axis=1))[0][0])
                raise MeshValidationError(
                    f"face {row} references vertex outside [0, {n}): {f[row].tolist()}"
                )
            dup = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if dup.any():
                row = int(np.nonzero(dup)[0][0])
                raise MeshValidationError(f"face {row} repeats a vertex: {f[row].tolist()}")
        self.vertices = v
        self.faces = f

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def with_vertices(self, vertices) -> "TriangleMesh":
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise MeshValidationError(
                f"vertex array shape {vertices.shape} != {self.vertices.shape}"
            )
        out = TriangleMesh.__new__(TriangleMesh)
        out.vertices = _frozen(vertices, np.float64)
        out.faces = self.faces
        return out

    def bbox_diagonal(self) -> float:
        if self.n_vertices == 0:
            return 0.0
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def __repr__(self):
        return f"TriangleMesh(n={self.n_vertices}, m={self.n_faces})"


@dataclass
class CapTag:
    name: str
    cap_faces: np.ndarray
    wall_faces: np.ndarray
    inlet: bool = False


@dataclass
class TemplateTags:
    """Structure, cap/wall and per-vertex weight annotations of a template."""

    structures: dict
    caps: list = field(default_factory=list)
    vertex_weights: np.ndarray | None = None

    def validate(self, mesh: TriangleMesh) -> "TemplateTags":
        m, n = mesh.n_faces, mesh.n_vertices

        def check_faces(label, idx):
            idx = np.asarray(idx, dtype=np.int64).ravel()
            if idx.size and (idx.min() < 0 or idx.max() >= m):
                raise MeshValidationError(f"{label}: face index outside [0, {m})")
            return idx

        structures = {}
        for name, idx in self.structures.items():
            idx = check_faces(f"structure {name!r}", idx)
            if idx.size == 0:
                raise MeshValidationError(f"structure {name!r} is empty")
            structures[name] = idx
        caps = []
        for cap in self.caps:
            cf = check_faces(f"cap {cap.name!r} cap_faces", cap.cap_faces)
            wf = check_faces(f"cap {cap.name!r} wall_faces", cap.wall_faces)
            if np.intersect1d(cf, wf).size:
                raise MeshValidationError(f"cap {cap.name!r}: cap and wall faces overlap")
            caps.append(CapTag(cap.name, cf, wf, bool(cap.inlet)))
        if self.vertex_weights is None:
            w = np.ones(n)
        else:
            w = np.asarray(self.vertex_weights, dtype=np.float64).ravel()
            if w.shape[0] != n:
                raise MeshValidationError(
                    f"vertex_weights has length {w.shape[0]}, mesh has {n} vertices"
                )
            if not np.all(np.isfinite(w)) or (w < 0).any():
                raise MeshValidationError("vertex_weights must be finite and >= 0")
        return TemplateTags(structures, caps, w)

    def to_json(self) -> dict:
        return {
            "structures": {k: np.asarray(v).tolist() for k, v in self.structures.items()},
            "caps": [
                {
                    "name": c.name,
                    "cap_faces": np.asarray(c.cap_faces).tolist(),
                    "wall_faces": np.asarray(c.wall_faces).tolist(),
                    **({"inlet": True} if c.inlet else {}),
                }
                for c in self.caps
            ],
            "vertex_weights": None
            if self.vertex_weights is None
            else [float(x) for x in self.vertex_weights],
        }

    @classmethod
    def from_json(cls, data: dict) -> "TemplateTags":
        try:
            structures = {str(k): v for k, v in data["structures"].items()}
            caps = [
                CapTag(
                    str(c["name"]),
                    np.asarray(c["cap_faces"], dtype=np.int64),
                    np.asarray(c["wall_faces"], dtype=np.int64),
                    bool(c.get("inlet", False)),
                )
                for c in data.get("caps", [])
            ]
        except (KeyError, TypeError, AttributeError, ValueError) as exc:
            raise MeshValidationError(f"malformed tags: {exc}") from exc
        return cls(structures, caps, data.get("vertex_weights"))


@dataclass
class TaggedMesh:
    mesh: TriangleMesh
    tags: TemplateTags

    def __post_init__(self):
        self.tags = self.tags.validate(self.mesh)


@dataclass
class SurfaceSamples:
    """Oriented surface points used as fitting targets."""

    points: np.ndarray
    normals: np.ndarray
    source_face: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        self.source_face = np.asarray(self.source_face, dtype=np.int64).ravel()
        if not (len(self.points) == len(self.normals) == len(self.source_face)):
            raise MeshValidationError("points, normals and source_face lengths differ")
        if len(self.normals) and np.abs(np.linalg.norm(self.normals, axis=1) - 1).max() > 1e-9:
            raise MeshValidationError("sample normals must be unit length")

    def __len__(self):
        return len(self.points)


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def read_obj(path) -> TriangleMesh:
    """Read ``v`` and ``f`` records of an OBJ file; other records are ignored."""
    verts, faces = [], []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise MeshValidationError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(verts[-1]) != 3:
                    raise ValueError("vertex needs 3 coordinates")
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) != 3:
                    raise ValueError("only triangular faces are supported")
                # negative indices are relative to the current vertex count
                faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
        except ValueError as exc:
            raise MeshValidationError(f"{path}:{lineno}: {exc}") from exc
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces).reshape(-1, 3))


def write_obj(path, mesh: TriangleMesh) -> None:
    lines = ["v %.17g %.17g %.17g" % tuple(v) for v in mesh.vertices]
    lines += ["f %d %d %d" % tuple(f + 1) for f in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_tags(path) -> TemplateTags:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MeshValidationError(f"cannot parse tags {path}: {exc}") from exc
    return TemplateTags.from_json(data)


def write_tags(path, tags: TemplateTags) -> None:
    Path(path).write_text(json.dumps(tags.to_json()) + "\n")


def load_tagged_mesh(mesh_path, tags_path) -> TaggedMesh:
    return TaggedMesh(read_obj(mesh_path), read_tags(tags_path))


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def face_cross(vertices, faces):
    v = np.asarray(vertices)
    return np.cross(v[faces[:, 1]] - v[faces[:, 0]], v[faces[:, 2]] - v[faces[:, 0]])


def face_areas(mesh: TriangleMesh) -> np.ndarray:
    return 0.5 * np.linalg.norm(face_cross(mesh.vertices, mesh.faces), axis=1)


def face_normals(mesh: TriangleMesh) -> np.ndarray:
    """Unit normals from the cross product of edges in winding order."""
    x = face_cross(mesh.vertices, mesh.faces)
    norm = np.linalg.norm(x, axis=1)
    bad = np.nonzero(norm < DEGENERATE_EPS)[0]
    if bad.size:
        raise DegenerateFaceError(f"degenerate faces (|cross| < 1e-12): {bad[:10].tolist()}")
    return x / norm[:, None]


def vertex_normals(mesh: TriangleMesh, faces=None) -> np.ndarray:
    """Area-weighted vertex normals, optionally restricted to a face subset.

    Vertices not touched by any of the faces get a zero vector.
    """
    f = mesh.faces if faces is None else mesh.faces[np.asarray(faces)]
    x = face_cross(mesh.vertices, f)
    acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(acc, f[:, k], x)
    norm = np.linalg.norm(acc, axis=1)
    out = np.zeros_like(acc)
    ok = norm > 0
    out[ok] = acc[ok] / norm[ok, None]
    return out


def boundary_edges(mesh: TriangleMesh) -> list:
    """Directed edges that are not matched by exactly one opposite edge."""
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    n = max(mesh.n_vertices, 1)
    key = e[:, 0] * n + e[:, 1]
    rkey = e[:, 1] * n + e[:, 0]
    uniq, counts = np.unique(key, return_counts=True)
    bad = ~np.isin(rkey, uniq) | np.isin(key, uniq[counts > 1]) | np.isin(rkey, uniq[counts > 1])
    return sorted({(int(a), int(b)) for a, b in e[bad]})


def is_closed(mesh: TriangleMesh) -> bool:
    return mesh.n_faces > 0 and not boundary_edges(mesh)


def require_closed(mesh: TriangleMesh, what: str = "operation") -> None:
    if mesh.n_faces == 0:
        raise OpenMeshError(f"{what} requires a closed mesh; mesh has no faces")
    bad = boundary_edges(mesh)
    if bad:
        raise OpenMeshError(
            f"{what} requires a closed, consistently oriented mesh; "
            f"{len(bad)} boundary/non-manifold edges, e.g. {bad[:5]}",
            bad,
        )


def signed_volume(mesh: TriangleMesh) -> float:
    """Divergence-theorem volume; positive for outward orientation."""
    require_closed(mesh, "enclosed_volume")
    # centering keeps the tetra-to-origin sum well conditioned
    v = mesh.vertices - mesh.vertices.mean(axis=0)
    f = mesh.faces
    return float(np.einsum("ij,ij->i", v[f[:, 0]], np.cross(v[f[:, 1]], v[f[:, 2]])).sum() / 6.0)


def enclosed_volume(mesh: TriangleMesh) -> float:
    return abs(signed_volume(mesh))


def surface_samples(mesh: TriangleMesh, count: int, seed: int = 0) -> SurfaceSamples:
    """Area-weighted uniform samples; identical seed gives identical bytes."""
    if count < 1:
        raise ValueError("count must be >= 1")
    normals = face_normals(mesh)
    areas = face_areas(mesh)
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(areas)
    u = rng.random(count) * cdf[-1]
    fidx = np.minimum(np.searchsorted(cdf, u, side="right"), mesh.n_faces - 1)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    tri = mesh.vertices[mesh.faces[fidx]]
    pts = (
        (1 - r1)[:, None] * tri[:, 0]
        + (r1 * (1 - r2))[:, None] * tri[:, 1]
        + (r1 * r2)[:, None] * tri[:, 2]
    )
    return SurfaceSamples(pts, normals[fidx], fidx)


def vertex_samples(mesh: TriangleMesh, faces=None) -> SurfaceSamples:
    """Use the vertices themselves (with vertex normals) as target samples."""
    fsel = np.arange(mesh.n_faces) if faces is None else np.asarray(faces)
    vn = vertex_normals(mesh, fsel)
    used = np.unique(mesh.faces[fsel])
    used = used[np.linalg.norm(vn[used], axis=1) > 0]
    owner = np.full(mesh.n_vertices, np.iinfo(np.int64).max, dtype=np.int64)
    sub = mesh.faces[fsel]
    for k in range(3):
        np.minimum.at(owner, sub[:, k], fsel)
    return SurfaceSamples(mesh.vertices[used], vn[used], owner[used])


def connected_component_labels(n_vertices: int, faces) -> np.ndarray:
    faces = np.asarray(faces).reshape(-1, 3)
    i = np.concatenate([faces[:, 0], faces[:, 1], faces[:, 2]])
    j = np.concatenate([faces[:, 1], faces[:, 2], faces[:, 0]])
    adj = sparse.coo_matrix((np.ones(i.size), (i, j)), shape=(n_vertices, n_vertices))
    _, labels = connected_components(adj, directed=False)
    return labels


def submesh(mesh: TriangleMesh, faces):
    """Extract a face subset; returns the mesh and the original vertex ids."""
    faces = np.asarray(faces, dtype=np.int64)
    f = mesh.faces[faces]
    used, inv = np.unique(f, return_inverse=True)
    return TriangleMesh(mesh.vertices[used], inv.reshape(-1, 3)), used


# ---------------------------------------------------------------------------
# Closest points on a triangle surface
# ---------------------------------------------------------------------------


def closest_point_on_triangles(p, a, b, c):
    """Vectorized closest point of p[i] on triangle (a[i], b[i], c[i]).

    Returns barycentric coordinates (k, 3). Region logic follows the usual
    Voronoi-region case split; vertex regions give exact one-hot weights.
    """
    p, a, b, c = (np.asarray(x, dtype=np.float64) for x in (p, a, b, c))
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    k = p.shape[0]
    bary = np.zeros((k, 3))
    done = np.zeros(k, dtype=bool)

    def assign(mask, w):
        nonlocal done
        m = mask & ~done
        bary[m] = w[m] if np.ndim(w) == 2 else w
        done |= m

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), np.array([1.0, 0.0, 0.0]))
        assign((d3 >= 0) & (d4 <= d3), np.array([0.0, 1.0, 0.0]))
        assign((d6 >= 0) & (d5 <= d6), np.array([0.0, 0.0, 1.0]))
        v = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), np.stack([1 - v, v, 0 * v], 1))
        w = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), np.stack([1 - w, 0 * w, w], 1))
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), np.stack([0 * w, 1 - w, w], 1))
        denom = 1.0 / (va + vb + vc)
        v, w = vb * denom, vc * denom
        assign(np.ones(k, dtype=bool), np.stack([1 - v - w, v, w], 1))
    return bary


def closest_points(mesh: TriangleMesh, queries):
    """Exact closest surface point for each query.

    Returns (face index, barycentric (k, 3), points (k, 3), distances).
    Ties between faces resolve to the lowest face index.
    """
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    V, F = mesh.vertices, mesh.faces
    if mesh.n_faces == 0:
        raise MeshValidationError("closest_points needs a mesh with faces")
    used = np.unique(F)
    vtree = cKDTree(V[used])
    d0, _ = vtree.query(q)
    cent = V[F].mean(axis=1)
    rad = np.linalg.norm(V[F] - cent[:, None, :], axis=2).max(axis=1)
    ctree = cKDTree(cent)
    cand = ctree.query_ball_point(q, d0 + rad.max() + 1e-12)
    qi = np.repeat(np.arange(len(q)), [len(c) for c in cand])
    fi = np.fromiter((f for c in cand for f in c), dtype=np.int64, count=qi.size)
    bary = closest_point_on_triangles(q[qi], V[F[fi, 0]], V[F[fi, 1]], V[F[fi, 2]])
    pts = np.einsum("ij,ijk->ik", bary, V[F[fi]])
    dist = np.linalg.norm(pts - q[qi], axis=1)
    order = np.lexsort((fi, dist, qi))
    first = order[np.r_[True, qi[order][1:] != qi[order][:-1]]]
    return fi[first], bary[first], pts[first], dist[first]
