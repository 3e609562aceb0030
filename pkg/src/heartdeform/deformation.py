"""Biharmonic coordinates: energy assembly, handle sampling, W and transfer."""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .errors import DegenerateFaceError, MeshValidationError, SingularSystemError
from .mesh import (
    DEGENERATE_EPS,
    TriangleMesh,
    closest_points,
    connected_component_labels,
    face_cross,
)

log = logging.getLogger(__name__)

COT_CLAMP = (1e-6, 1e6)
DROP_TOL = 1e-10
PIVOT_PERTURBATION = 1e-12
REFINE_STEPS = 4

ENERGY_KINDS = ("cotangent_squared", "uniform_squared")
_KIND_ALIASES = {
    "cotan": "cotangent_squared",
    "cotangent": "cotangent_squared",
    "cotangent_squared": "cotangent_squared",
    "uniform": "uniform_squared",
    "uniform_squared": "uniform_squared",
}


def energy_kind(name: str) -> str:
    try:
        return _KIND_ALIASES[name]
    except KeyError:
        raise ValueError(f"unknown energy kind {name!r}; expected one of {sorted(_KIND_ALIASES)}")


@dataclass(frozen=True)
class EnergyMatrix:
    """Squared-Laplacian quadratic form ``A = L^T M^-1 L`` (sparse, n x n)."""

    A: sparse.csr_matrix
    kind: str
    components: np.ndarray

    @property
    def n(self) -> int:
        return self.A.shape[0]


def cotangent_laplacian(mesh: TriangleMesh):
    """Clamped cotangent stiffness matrix and barycentric lumped mass."""
    V, F = mesh.vertices, mesh.faces
    n = mesh.n_vertices
    cross = face_cross(V, F)
    dbl_area = np.linalg.norm(cross, axis=1)
    bad = np.nonzero(dbl_area < DEGENERATE_EPS)[0]
    if bad.size:
        raise DegenerateFaceError(f"cotangent energy needs non-degenerate faces: {bad[:10].tolist()}")
    rows, cols, vals = [], [], []
    for k in range(3):
        i, j, o = F[:, (k + 1) % 3], F[:, (k + 2) % 3], F[:, k]
        a, b = V[i] - V[o], V[j] - V[o]
        cot = np.einsum("ij,ij->i", a, b) / dbl_area
        rows += [i, j]
        cols += [j, i]
        vals += [0.5 * cot, 0.5 * cot]
    W = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    W.sum_duplicates()
    W.data = np.clip(W.data, *COT_CLAMP)
    L = sparse.diags(np.asarray(W.sum(axis=1)).ravel()) - W
    mass = np.zeros(n)
    for k in range(3):
        np.add.at(mass, F[:, k], dbl_area / 6.0)
    mass[mass == 0] = 1.0
    return L.tocsr(), mass


def uniform_laplacian(mesh: TriangleMesh):
    n = mesh.n_vertices
    F = mesh.faces
    i = np.concatenate([F[:, 0], F[:, 1], F[:, 2], F[:, 1], F[:, 2], F[:, 0]])
    j = np.concatenate([F[:, 1], F[:, 2], F[:, 0], F[:, 0], F[:, 1], F[:, 2]])
    adj = sparse.coo_matrix((np.ones(i.size), (i, j)), shape=(n, n)).tocsr()
    adj.data[:] = 1.0
    L = sparse.diags(np.asarray(adj.sum(axis=1)).ravel()) - adj
    return L.tocsr(), np.ones(n)


def build_energy(mesh: TriangleMesh, kind: str = "cotangent_squared") -> EnergyMatrix:
    kind = energy_kind(kind)
    if kind == "cotangent_squared":
        L, mass = cotangent_laplacian(mesh)
    else:
        L, mass = uniform_laplacian(mesh)
    A = (L.T @ sparse.diags(1.0 / mass) @ L).tocsr()
    A = ((A + A.T) * 0.5).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return EnergyMatrix(A, kind, connected_component_labels(mesh.n_vertices, mesh.faces))


# ---------------------------------------------------------------------------
# Handles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HandleSet:
    """Ordered handle vertex ids; the order fixes the columns of W and rows of P."""

    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).ravel()
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return len(self.indices)

    def validate(self, n: int, components=None) -> None:
        idx = self.indices
        if idx.size < 1:
            raise MeshValidationError("need at least one handle")
        if idx.min() < 0 or idx.max() >= n:
            raise MeshValidationError(f"handle index outside [0, {n})")
        if np.unique(idx).size != idx.size:
            raise MeshValidationError("handle indices must be distinct")
        if components is not None:
            missing = np.setdiff1d(np.unique(components), np.unique(components[idx]))
            if missing.size:
                sizes = [int((components == c).sum()) for c in missing[:5]]
                raise SingularSystemError(
                    f"{missing.size} connected component(s) have no handle "
                    f"(component ids {missing[:5].tolist()}, vertex counts {sizes}); "
                    "the constrained system is singular"
                )


def sample_handles(mesh: TriangleMesh, count: int, start_index: int = 0) -> HandleSet:
    """Euclidean farthest-point sampling; ties go to the lowest vertex index."""
    V = mesh.vertices
    n = V.shape[0]
    if count < 1:
        raise ValueError("count must be >= 1")
    if count > n:
        raise ValueError(f"cannot sample {count} handles from {n} vertices")
    if not 0 <= start_index < n:
        raise ValueError(f"start_index {start_index} outside [0, {n})")
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = start_index
    dist = np.linalg.norm(V - V[start_index], axis=1)
    dist[start_index] = -1.0
    for k in range(1, count):
        nxt = int(np.argmax(dist))
        chosen[k] = nxt
        dist = np.minimum(dist, np.linalg.norm(V - V[nxt], axis=1))
        dist[chosen[: k + 1]] = -1.0
    return HandleSet(chosen)


# ---------------------------------------------------------------------------
# Biharmonic map
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BiharmonicMap:
    """Linear map W (n x c, sparse) taking handle positions to vertex positions."""

    W: sparse.csr_matrix
    handle_set: HandleSet

    @property
    def source_vertex_count(self) -> int:
        return self.W.shape[0]

    @property
    def n_handles(self) -> int:
        return self.W.shape[1]

    def handle_identity_error(self) -> float:
        """max |Q W - I|; only meaningful for maps computed on their own mesh."""
        QW = self.W[self.handle_set.indices].toarray()
        return float(np.abs(QW - np.eye(self.n_handles)).max())

    def row_sum_error(self) -> float:
        return float(np.abs(np.asarray(self.W.sum(axis=1)).ravel() - 1.0).max())


def _sparsify(W: np.ndarray) -> sparse.csr_matrix:
    colmax = np.abs(W).max(axis=0)
    W = np.where(np.abs(W) < DROP_TOL * colmax[None, :], 0.0, W)
    W /= W.sum(axis=1, keepdims=True)
    out = sparse.csr_matrix(W)
    out.sort_indices()
    return out


def compute_biharmonic(energy: EnergyMatrix, handles: HandleSet) -> BiharmonicMap:
    """Solve for W with one factorization of the free-free block of A."""
    n = energy.n
    handles.validate(n, energy.components)
    h = handles.indices
    c = len(h)
    free = np.ones(n, dtype=bool)
    free[h] = False
    free_idx = np.nonzero(free)[0]
    W = np.zeros((n, c))
    W[h, np.arange(c)] = 1.0
    if free_idx.size:
        A = energy.A.tocsc()
        Aff = A[free_idx][:, free_idx]
        Afh = A[free_idx][:, h]
        shift = PIVOT_PERTURBATION * Aff.diagonal().sum() / free_idx.size
        Aff = (Aff + shift * sparse.identity(free_idx.size, format="csc")).tocsc()
        try:
            lu = splu(Aff)
        except RuntimeError as exc:
            raise SingularSystemError(f"factorization of the free-vertex block failed: {exc}") from exc
        rhs = -Afh.toarray()
        sol = lu.solve(rhs)
        # the shift only stabilizes the factorization; refine against the unshifted block
        A0 = Aff - shift * sparse.identity(free_idx.size, format="csc")
        res = rhs - A0 @ sol
        norm = np.abs(res).max()
        for _ in range(REFINE_STEPS):
            if not norm > 0:
                break
            trial = sol + lu.solve(res)
            trial_res = rhs - A0 @ trial
            trial_norm = np.abs(trial_res).max()
            if not trial_norm < norm:
                break
            sol, res, norm = trial, trial_res, trial_norm
        if not np.all(np.isfinite(sol)):
            raise SingularSystemError("biharmonic solve produced non-finite weights")
        W[free_idx] = sol
    return BiharmonicMap(_sparsify(W), handles)


def deform(bmap: BiharmonicMap, handle_positions, rest_vertices=None) -> np.ndarray:
    """Vertex positions ``W @ P``.

    With ``rest_vertices`` the rest-pose residual ``rest - W @ rest[handles]``
    is added back, so rest handle positions reproduce the rest mesh exactly.
    The residual vanishes at handle vertices.
    """
    P = np.asarray(handle_positions, dtype=np.float64)
    if P.shape != (bmap.n_handles, 3):
        raise MeshValidationError(f"handle positions must be ({bmap.n_handles}, 3), got {P.shape}")
    if not np.all(np.isfinite(P)):
        raise MeshValidationError("handle positions must be finite")
    V = bmap.W @ P
    if rest_vertices is not None:
        rest = np.asarray(rest_vertices, dtype=np.float64)
        if rest.shape != (bmap.source_vertex_count, 3):
            raise MeshValidationError("rest vertex count does not match the map")
        V = V + rest_residual(bmap, rest)
    return V


def rest_residual(bmap: BiharmonicMap, rest_vertices) -> np.ndarray:
    rest = np.asarray(rest_vertices, dtype=np.float64)
    R = rest - bmap.W @ rest[bmap.handle_set.indices]
    # exact zeros at handles; W rows there are one-hot
    R[bmap.handle_set.indices] = 0.0
    return R


def transfer_map(bmap: BiharmonicMap, source: TriangleMesh, target: TriangleMesh) -> BiharmonicMap:
    """Carry W onto another template by barycentric interpolation of W rows.

    Each target vertex takes the closest point on the source surface and mixes
    the W rows of that face's corners.
    """
    if target.n_vertices == 0:
        raise MeshValidationError("target mesh has no vertices")
    if source.n_vertices != bmap.source_vertex_count:
        raise MeshValidationError(
            f"map has {bmap.source_vertex_count} rows but source has {source.n_vertices} vertices"
        )
    fi, bary, _, dist = closest_points(source, target.vertices)
    diag = source.bbox_diagonal()
    if dist.size and dist.max() > 0.01 * diag:
        msg = f"target lies up to {dist.max():.4g} from source (> 1% of bbox diagonal {diag:.4g})"
        warnings.warn(msg, stacklevel=2)
        log.warning(msg)
    corners = source.faces[fi]
    rows = np.repeat(np.arange(target.n_vertices), 3)
    B = sparse.coo_matrix(
        (bary.ravel(), (rows, corners.ravel())), shape=(target.n_vertices, source.n_vertices)
    ).tocsr()
    B.eliminate_zeros()
    W = (B @ bmap.W).tocsr()
    W.sort_indices()
    return BiharmonicMap(W, bmap.handle_set)


# ---------------------------------------------------------------------------
# BHC1 binary format
# ---------------------------------------------------------------------------

MAGIC = b"BHC1"


def write_bhc1(path, bmap: BiharmonicMap) -> None:
    W = bmap.W.tocsr()
    W.sort_indices()
    n, c = W.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<QQQ", n, c, W.nnz))
        fh.write(np.asarray(W.indptr, dtype="<u8").tobytes())
        fh.write(np.asarray(W.indices, dtype="<u8").tobytes())
        fh.write(np.asarray(W.data, dtype="<f8").tobytes())
        fh.write(np.asarray(bmap.handle_set.indices, dtype="<u8").tobytes())


def read_bhc1(path) -> BiharmonicMap:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise MeshValidationError(f"cannot read {path}: {exc}") from exc
    if raw[:4] != MAGIC or len(raw) < 28:
        raise MeshValidationError(f"{path}: not a BHC1 file")
    n, c, nnz = struct.unpack_from("<QQQ", raw, 4)
    expected = 28 + 8 * (n + 1) + 8 * nnz + 8 * nnz + 8 * c
    if len(raw) != expected:
        raise MeshValidationError(f"{path}: size {len(raw)} != expected {expected}")
    off = 28
    indptr = np.frombuffer(raw, "<u8", n + 1, off).astype(np.int64)
    off += 8 * (n + 1)
    indices = np.frombuffer(raw, "<u8", nnz, off).astype(np.int64)
    off += 8 * nnz
    data = np.frombuffer(raw, "<f8", nnz, off).astype(np.float64)
    off += 8 * nnz
    handles = np.frombuffer(raw, "<u8", c, off).astype(np.int64)
    W = sparse.csr_matrix((data, indices, indptr), shape=(n, c))
    return BiharmonicMap(W, HandleSet(handles))
