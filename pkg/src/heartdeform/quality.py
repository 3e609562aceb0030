"""Simulation-readiness and accuracy metrics for predicted meshes."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import MeshValidationError
from .intersect import self_intersection_fraction
from .mesh import (
    TemplateTags,
    TriangleMesh,
    enclosed_volume,
    is_closed,
    require_closed,
    surface_samples,
    vertex_normals,
)

CWO_VARIANTS = ("formula", "centroid")


def _unit(v, what):
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise MeshValidationError(f"zero-length mean vector ({what})")
    return v / n


def _cap_vertex_sets(mesh: TriangleMesh, cap):
    cap_v = np.unique(mesh.faces[np.asarray(cap.cap_faces)])
    wall_v = np.setdiff1d(np.unique(mesh.faces[np.asarray(cap.wall_faces)]), cap_v)
    if cap_v.size == 0 or wall_v.size == 0:
        raise MeshValidationError(f"cap {cap.name!r}: empty cap or wall vertex set")
    return cap_v, wall_v


def cap_wall_orthogonality(mesh: TriangleMesh, tags: TemplateTags, variant: str = "formula") -> np.ndarray:
    """Per-cap ``1 - <a, mean cap normal>`` with both vectors unit length.

    ``formula``: ``a`` is the mean of wall-vertex normals.
    ``centroid``: ``a`` points from the wall-vertex centroid to the cap-vertex
    centroid, which is 0 for a cap orthogonal to a straight tube.
    Vertex normals are area-weighted over the cap faces (cap vertices) or the
    wall faces (wall vertices) only.
    """
    if variant not in CWO_VARIANTS:
        raise ValueError(f"variant must be one of {CWO_VARIANTS}")
    out = []
    for cap in tags.caps:
        cap_v, wall_v = _cap_vertex_sets(mesh, cap)
        cap_n = vertex_normals(mesh, cap.cap_faces)[cap_v].mean(axis=0)
        cap_n = _unit(cap_n, f"cap {cap.name!r} normal")
        if variant == "formula":
            a = vertex_normals(mesh, cap.wall_faces)[wall_v].mean(axis=0)
            a = _unit(a, f"cap {cap.name!r} wall normal")
        else:
            V = mesh.vertices
            a = _unit(V[cap_v].mean(axis=0) - V[wall_v].mean(axis=0), f"cap {cap.name!r} centroid vector")
        out.append(1.0 - float(np.clip(a @ cap_n, -1.0, 1.0)))
    return np.array(out)


def cap_coplanarity(mesh: TriangleMesh, tags: TemplateTags) -> np.ndarray:
    """Per-cap mean absolute distance of cap vertices to their principal plane (mm)."""
    out = []
    for cap in tags.caps:
        X = mesh.vertices[np.unique(mesh.faces[np.asarray(cap.cap_faces)])]
        if len(X) < 3:
            raise MeshValidationError(f"cap {cap.name!r} needs >= 3 vertices")
        Xc = X - X.mean(axis=0)
        _, s, vt = np.linalg.svd(Xc, full_matrices=False)
        if s[1] <= 1e-12 * max(s[0], 1e-300):
            raise MeshValidationError(f"cap {cap.name!r} vertices are collinear")
        out.append(float(np.abs(Xc @ vt[-1]).mean()))
    return np.array(out)


def chamfer_and_hausdorff(a: TriangleMesh, b: TriangleMesh, samples: int = 100_000, seed: int = 0):
    """Symmetric mean and max nearest-sample distances between two surfaces (mm).

    Chamfer is the average of the two directed mean distances.
    """
    sa = surface_samples(a, samples, seed).points
    sb = surface_samples(b, samples, seed).points
    dab, _ = cKDTree(sb).query(sa)
    dba, _ = cKDTree(sa).query(sb)
    return 0.5 * (float(dab.mean()) + float(dba.mean())), max(float(dab.max()), float(dba.max()))


def winding_numbers(mesh: TriangleMesh, points, chunk: int = 4096) -> np.ndarray:
    """Generalized winding number by summed signed solid angles."""
    T = mesh.vertices[mesh.faces]
    pts = np.asarray(points, dtype=np.float64)
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        p = pts[s:s + chunk]
        a = T[None, :, 0, :] - p[:, None, :]
        b = T[None, :, 1, :] - p[:, None, :]
        c = T[None, :, 2, :] - p[:, None, :]
        la, lb, lc = (np.linalg.norm(x, axis=2) for x in (a, b, c))
        det = np.einsum("pfi,pfi->pf", a, np.cross(b, c))
        den = (
            la * lb * lc
            + np.einsum("pfi,pfi->pf", a, b) * lc
            + np.einsum("pfi,pfi->pf", b, c) * la
            + np.einsum("pfi,pfi->pf", c, a) * lb
        )
        out[s:s + chunk] = 2.0 * np.arctan2(det, den).sum(axis=1) / (4 * np.pi)
    return out


def voxelize(mesh: TriangleMesh, origin, shape, spacing: float) -> np.ndarray:
    idx = np.stack(np.meshgrid(*[np.arange(k) for k in shape], indexing="ij"), -1).reshape(-1, 3)
    centers = np.asarray(origin) + (idx + 0.5) * spacing
    return (winding_numbers(mesh, centers) >= 0.5).reshape(shape)


def dice(a: TriangleMesh, b: TriangleMesh, spacing: float = 1.0) -> float:
    """Dice overlap of winding-number voxelizations on a shared grid."""
    require_closed(a, "dice")
    require_closed(b, "dice")
    lo = np.minimum(a.vertices.min(0), b.vertices.min(0))
    hi = np.maximum(a.vertices.max(0), b.vertices.max(0))
    shape = tuple(int(k) for k in np.maximum(np.ceil((hi - lo) / spacing - 1e-9), 1))
    va = voxelize(a, lo, shape, spacing)
    vb = voxelize(b, lo, shape, spacing)
    total = int(va.sum()) + int(vb.sum())
    if total == 0:
        return 0.0
    return 2.0 * int((va & vb).sum()) / total


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


def _sig9(x):
    if isinstance(x, float):
        return float(f"{x:.9g}")
    if isinstance(x, dict):
        return {k: _sig9(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_sig9(v) for v in x]
    return x


@dataclass
class QualityReport:
    cwo: dict = field(default_factory=dict)
    cwo_centroid: dict = field(default_factory=dict)
    coplanarity: dict = field(default_factory=dict)
    self_intersection_fraction: float = 0.0
    chamfer: float | None = None
    symmetric_hausdorff: float | None = None
    dice: float | None = None
    volume: float | None = None

    def to_json(self) -> str:
        return json.dumps(_sig9(asdict(self)), indent=2, sort_keys=True) + "\n"


def _per_cap(fn, mesh, tags, *args):
    out = {}
    for cap in tags.caps:
        one = TemplateTags(tags.structures, [cap], tags.vertex_weights)
        try:
            out[cap.name] = float(fn(mesh, one, *args)[0])
        except MeshValidationError:
            out[cap.name] = None
    return out


def evaluate(mesh: TriangleMesh, tags: TemplateTags | None = None, reference: TriangleMesh | None = None,
             spacing: float | None = None, samples: int = 100_000, seed: int = 0) -> QualityReport:
    rep = QualityReport(self_intersection_fraction=self_intersection_fraction(mesh))
    if tags is not None and tags.caps:
        rep.cwo = _per_cap(cap_wall_orthogonality, mesh, tags, "formula")
        rep.cwo_centroid = _per_cap(cap_wall_orthogonality, mesh, tags, "centroid")
        rep.coplanarity = _per_cap(cap_coplanarity, mesh, tags)
    if reference is not None:
        rep.chamfer, rep.symmetric_hausdorff = chamfer_and_hausdorff(mesh, reference, samples, seed)
        if spacing is not None:
            rep.dice = dice(mesh, reference, spacing)
    if is_closed(mesh):
        rep.volume = enclosed_volume(mesh)
    return rep
