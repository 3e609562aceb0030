"""Mesh fitting losses with analytic vertex gradients.

Nearest-neighbour correspondences are frozen inside one evaluation; each
:class:`LossValue` records them in ``discrete`` so a caller can tell whether
two evaluations used the same active set.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateFaceError, MeshValidationError
from .mesh import DEGENERATE_EPS, SurfaceSamples, TemplateTags, TriangleMesh

GEO_EPS = 1e-8
BBOX_EXPAND = 0.01


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.5
    inlet_weight: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {v}")
            setattr(self, f.name, v)
        if self.inlet_weight < 1:
            raise ValueError("inlet_weight must be >= 1")

    @classmethod
    def from_mapping(cls, data: dict | None) -> "LossWeights":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown [loss] keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class LossValue:
    value: float
    gradient: np.ndarray
    discrete: tuple = ()
    kink_margin: float = np.inf
    parts: dict = field(default_factory=dict)

    def __add__(self, other: "LossValue") -> "LossValue":
        return LossValue(
            self.value + other.value,
            self.gradient + other.gradient,
            self.discrete + other.discrete,
            min(self.kink_margin, other.kink_margin),
            {**self.parts, **other.parts},
        )

    def scaled(self, s: float) -> "LossValue":
        return LossValue(s * self.value, s * self.gradient, self.discrete, self.kink_margin, self.parts)


def same_active_set(a: LossValue, b: LossValue) -> bool:
    if len(a.discrete) != len(b.discrete):
        return False
    return all(np.array_equal(x, y) for x, y in zip(a.discrete, b.discrete))


def nearest(points, queries, tree=None):
    """Nearest point index per query; exact distance ties go to the lowest index."""
    points = np.asarray(points)
    tree = cKDTree(points) if tree is None else tree
    k = min(4, len(points))
    d, idx = tree.query(queries, k=k)
    if k == 1:
        return idx.reshape(-1), d.reshape(-1)
    d = np.asarray(d).reshape(len(queries), k)
    idx = np.asarray(idx).reshape(len(queries), k)
    tie = d == d[:, :1]
    best = np.where(tie, idx, np.iinfo(np.int64).max).min(axis=1)
    return best, d[:, 0]


# ---------------------------------------------------------------------------
# Face normal with backward pass
# ---------------------------------------------------------------------------


def _normals_fwd(V, F):
    e1 = V[F[:, 1]] - V[F[:, 0]]
    e2 = V[F[:, 2]] - V[F[:, 0]]
    x = np.cross(e1, e2)
    norm = np.linalg.norm(x, axis=1)
    bad = np.nonzero(norm < DEGENERATE_EPS)[0]
    if bad.size:
        raise DegenerateFaceError(f"degenerate faces: {bad[:10].tolist()}")
    return x / norm[:, None], (e1, e2, norm)


def _normals_bwd(grad_n, n, cache, F, n_vertices):
    """Scatter dL/dn (per face) into dL/dV."""
    e1, e2, norm = cache
    gx = (grad_n - np.einsum("ij,ij->i", grad_n, n)[:, None] * n) / norm[:, None]
    g1 = np.cross(e2, gx)
    g2 = np.cross(gx, e1)
    out = np.zeros((n_vertices, 3))
    np.add.at(out, F[:, 1], g1)
    np.add.at(out, F[:, 2], g2)
    np.add.at(out, F[:, 0], -(g1 + g2))
    return out


# ---------------------------------------------------------------------------
# Geometric consistency
# ---------------------------------------------------------------------------


def _check_target(target: SurfaceSamples):
    if target is None or len(target) == 0:
        raise MeshValidationError("target samples are empty")


def _point_term(V, vids, target, w, target_tree=None):
    n = len(vids)
    if n == 0:
        raise MeshValidationError("no mesh vertices to compare against the target")
    X = V[vids]
    P = target.points
    k = len(P)
    nn_t, _ = nearest(P, X, target_tree)
    nn_v, _ = nearest(X, P)
    d1 = X - P[nn_t]
    d2 = P - X[nn_v]
    value = float((w * np.einsum("ij,ij->i", d1, d1)).sum() / n + np.einsum("ij,ij->i", d2, d2).sum() / k)
    g = 2.0 * w[:, None] * d1 / n
    np.add.at(g, nn_v, -2.0 * d2 / k)
    grad = np.zeros_like(V)
    np.add.at(grad, vids, g)
    return value, grad, (nn_t, nn_v)


def _normal_term(V, F, target, w_vertex, target_tree=None):
    m = len(F)
    n_f, cache = _normals_fwd(V, F)
    cent = V[F].mean(axis=1)
    nn, _ = nearest(target.points, cent, target_tree)
    tn = target.normals[nn]
    wf = w_vertex[F].mean(axis=1)
    cos = np.einsum("ij,ij->i", n_f, tn)
    value = float((wf * (1.0 - cos)).sum() / m)
    grad = _normals_bwd(-wf[:, None] * tn / m, n_f, cache, F, len(V))
    return value, grad, (nn,)


def point_consistency(mesh: TriangleMesh, target: SurfaceSamples, weights=None) -> LossValue:
    """Weighted symmetric squared chamfer between mesh vertices and target points."""
    _check_target(target)
    V = mesh.vertices
    w = np.ones(len(V)) if weights is None else np.asarray(weights, dtype=np.float64)
    value, grad, disc = _point_term(V, np.arange(len(V)), target, w)
    return LossValue(value, grad, disc)


def normal_consistency(mesh: TriangleMesh, target: SurfaceSamples, weights=None) -> LossValue:
    """Mean weighted ``1 - <face normal, target normal at nearest sample>``."""
    _check_target(target)
    V = mesh.vertices
    w = np.ones(len(V)) if weights is None else np.asarray(weights, dtype=np.float64)
    value, grad, disc = _normal_term(V, mesh.faces, target, w)
    return LossValue(value, grad, disc)


def combine_geometric(point: LossValue, normal: LossValue, eps: float = GEO_EPS) -> LossValue:
    a, b = point.value + eps, normal.value + eps
    root = np.sqrt(a * b)
    grad = 0.5 / root * (b * point.gradient + a * normal.gradient)
    return LossValue(float(root - eps), grad, point.discrete + normal.discrete)


def geometric_consistency(mesh: TriangleMesh, target: SurfaceSamples, weights=None) -> LossValue:
    """Geometric mean of point and normal consistency."""
    return combine_geometric(
        point_consistency(mesh, target, weights), normal_consistency(mesh, target, weights)
    )


def structure_geometric(V, F_struct, target, w, target_tree=None) -> LossValue:
    vids = np.unique(F_struct)
    pv, pg, pd = _point_term(V, vids, target, w[vids], target_tree)
    nv, ng, nd = _normal_term(V, F_struct, target, w, target_tree)
    return combine_geometric(LossValue(pv, pg, pd), LossValue(nv, ng, nd))


# ---------------------------------------------------------------------------
# Cap regularization
# ---------------------------------------------------------------------------


def _cap_terms(mesh: TriangleMesh, tags: TemplateTags, which: str) -> LossValue:
    V = mesh.vertices
    total = 0.0
    grad = np.zeros_like(V)
    signs, margin = [], np.inf
    for cap in tags.caps:
        C = np.asarray(cap.cap_faces)
        if C.size == 0:
            raise MeshValidationError(f"cap {cap.name!r} has no faces")
        Fc = mesh.faces[C]
        nc, cc = _normals_fwd(V, Fc)
        mean = nc.mean(axis=0)
        if which == "coplanar":
            diff = nc - mean
            total += float(np.einsum("ij,ij->", diff, diff))
            grad += _normals_bwd(2.0 * diff, nc, cc, Fc, len(V))
            continue
        Wf = np.asarray(cap.wall_faces)
        if Wf.size == 0:
            raise MeshValidationError(f"cap {cap.name!r} has no wall faces")
        Fw = mesh.faces[Wf]
        nw, cw = _normals_fwd(V, Fw)
        dots = nw @ mean
        s = np.sign(dots)
        total += float(np.abs(dots).sum())
        margin = min(margin, float(np.abs(dots).min()))
        signs.append(s.astype(np.int8))
        grad += _normals_bwd(s[:, None] * mean[None, :], nw, cw, Fw, len(V))
        g_mean = (s[:, None] * nw).sum(axis=0)
        grad += _normals_bwd(np.tile(g_mean / len(C), (len(C), 1)), nc, cc, Fc, len(V))
    return LossValue(total, grad, tuple(signs), margin)


def coplanar_energy(mesh: TriangleMesh, tags: TemplateTags) -> LossValue:
    """Sum over caps of squared deviations of cap face normals from their mean."""
    return _cap_terms(mesh, tags, "coplanar")


def orthogonal_energy(mesh: TriangleMesh, tags: TemplateTags) -> LossValue:
    """Sum over caps of |<wall face normal, mean cap normal>|.

    Subgradient 0 where a dot product is exactly 0; ``kink_margin`` reports the
    smallest |dot| so finite-difference checks can skip the kink.
    """
    return _cap_terms(mesh, tags, "orthogonal")


def l2_consistency(S, V):
    """Squared Frobenius distance; returns (value, dL/dS, dL/dV)."""
    S = np.asarray(S, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if S.shape != V.shape:
        raise MeshValidationError(f"shape mismatch {S.shape} vs {V.shape}")
    d = S - V
    return float(np.einsum("ij,ij->", d, d)), 2.0 * d, -2.0 * d


# ---------------------------------------------------------------------------
# Total loss
# ---------------------------------------------------------------------------


def target_bbox(targets: dict, expand: float = BBOX_EXPAND):
    pts = [t.points for t in targets.values() if t is not None and len(t)]
    if not pts:
        return None
    allp = np.vstack(pts)
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    pad = expand * np.linalg.norm(hi - lo)
    return lo - pad, hi + pad


def mesh_vertex_weights(mesh: TriangleMesh, tags: TemplateTags, targets: dict, inlet_weight: float):
    """Per-vertex geometric-consistency weights.

    Base weights from the tags, zero outside the (expanded) bounding box of
    all targets, multiplied by ``inlet_weight`` on inlet wall vertices.
    """
    w = np.array(tags.vertex_weights if tags.vertex_weights is not None else np.ones(mesh.n_vertices))
    box = target_bbox(targets)
    inside = np.ones(mesh.n_vertices, dtype=bool)
    if box is not None:
        lo, hi = box
        inside = np.all((mesh.vertices >= lo) & (mesh.vertices <= hi), axis=1)
        w[~inside] = 0.0
    for cap in tags.caps:
        if cap.inlet:
            vids = np.unique(mesh.faces[np.asarray(cap.wall_faces)])
            w[vids] *= inlet_weight
    return w, inside


def total_mesh_loss(mesh: TriangleMesh, targets: dict, tags: TemplateTags, weights: LossWeights,
                    target_trees: dict | None = None) -> LossValue:
    """Sum of per-structure geometric consistency plus weighted cap terms.

    ``targets`` maps structure name to samples; ``None`` marks a structure
    as unsupervised. A structure without an entry is an error.
    """
    missing = [name for name in tags.structures if name not in targets]
    if missing:
        raise MeshValidationError(f"no target for supervised structure(s): {missing}")
    w, inside = mesh_vertex_weights(mesh, tags, targets, weights.inlet_weight)
    V = mesh.vertices
    total = LossValue(0.0, np.zeros_like(V), (inside,))
    trees = target_trees or {}
    for name, fidx in tags.structures.items():
        target = targets[name]
        if target is None:
            continue
        _check_target(target)
        part = structure_geometric(V, mesh.faces[np.asarray(fidx)], target, w, trees.get(name))
        total = total + part
        total.parts[f"geo:{name}"] = part.value
    if weights.alpha > 0 and tags.caps:
        cop = coplanar_energy(mesh, tags)
        reg = cop.scaled(weights.alpha)
        total.parts["coplanar"] = cop.value
        if weights.beta > 0:
            ortho = orthogonal_energy(mesh, tags)
            reg = reg + ortho.scaled(weights.alpha * weights.beta)
            total.parts["orthogonal"] = ortho.value
        total = total + reg
    return total


def as_structure_targets(tags: TemplateTags, target: SurfaceSamples) -> dict:
    return {name: target for name in tags.structures}


__all__ = [
    "LossWeights",
    "LossValue",
    "point_consistency",
    "normal_consistency",
    "geometric_consistency",
    "coplanar_energy",
    "orthogonal_energy",
    "l2_consistency",
    "total_mesh_loss",
    "mesh_vertex_weights",
]
