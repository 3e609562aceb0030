"""Self-intersection detection: AABB tree broad phase, filtered exact predicates.

Orientation determinants are evaluated in double precision and trusted only
when they clear a relative margin of 1e-10; anything closer is recomputed in
exact rational arithmetic.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from .mesh import TriangleMesh

MARGIN = 1e-10
LEAF_SIZE = 8


class AABBTree:
    """Flat binary tree over face bounding boxes (median split on widest axis)."""

    def __init__(self, lo, hi):
        self.lo_in, self.hi_in = np.asarray(lo), np.asarray(hi)
        cent = 0.5 * (self.lo_in + self.hi_in)
        self.lo, self.hi, self.left, self.right, self.items = [], [], [], [], []
        self._build(np.arange(len(cent)), cent)
        self.lo, self.hi = np.array(self.lo), np.array(self.hi)

    def _build(self, idx, cent):
        node = len(self.lo)
        self.lo.append(self.lo_in[idx].min(axis=0))
        self.hi.append(self.hi_in[idx].max(axis=0))
        self.left.append(-1)
        self.right.append(-1)
        self.items.append(None)
        if len(idx) <= LEAF_SIZE:
            self.items[node] = idx
            return node
        c = cent[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        order = idx[np.argsort(c[:, axis], kind="stable")]
        half = len(order) // 2
        self.left[node] = self._build(order[:half], cent)
        self.right[node] = self._build(order[half:], cent)
        return node

    def _overlap(self, a, b):
        return bool(np.all(self.lo[a] <= self.hi[b]) and np.all(self.lo[b] <= self.hi[a]))

    def self_pairs(self):
        """Candidate (i, j), i < j, whose boxes overlap."""
        out = []
        stack = [(0, 0)]
        while stack:
            a, b = stack.pop()
            if a != b and not self._overlap(a, b):
                continue
            la, lb = self.items[a] is not None, self.items[b] is not None
            if la and lb:
                ia, ib = self.items[a], self.items[b]
                I, J = np.meshgrid(ia, ib, indexing="ij")
                I, J = I.ravel(), J.ravel()
                keep = I < J if a == b else I != J
                out.append(np.stack([np.minimum(I, J)[keep], np.maximum(I, J)[keep]], 1))
            elif a == b:
                l, r = self.left[a], self.right[a]
                stack += [(l, l), (r, r), (l, r)]
            elif la or (not lb and self._size(a) < self._size(b)):
                stack += [(a, self.left[b]), (a, self.right[b])]
            else:
                stack += [(self.left[a], b), (self.right[a], b)]
        if not out:
            return np.zeros((0, 2), dtype=np.int64)
        pairs = np.unique(np.concatenate(out), axis=0)
        lo, hi = self.lo_in, self.hi_in
        ok = np.all(lo[pairs[:, 0]] <= hi[pairs[:, 1]], axis=1) & np.all(lo[pairs[:, 1]] <= hi[pairs[:, 0]], axis=1)
        return pairs[ok]

    def _size(self, node):
        return float(np.prod(self.hi[node] - self.lo[node]))


# ---------------------------------------------------------------------------
# Predicates
# ---------------------------------------------------------------------------


def _orient3d(a, b, c, d):
    """Float orientation determinant and whether its sign is trustworthy."""
    u, v, w = b - a, c - a, d - a
    det = np.einsum("ij,ij->i", u, np.cross(v, w))
    scale = np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1) * np.linalg.norm(w, axis=1)
    sure = np.abs(det) > MARGIN * scale
    return np.sign(det) * sure, sure


def _q(p):
    return tuple(Fraction(float(x)) for x in p)


def _sub(a, b):
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


def _cross(u, v):
    return (u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0])


def _dot(u, v):
    return u[0] * v[0] + u[1] * v[1] + u[2] * v[2]


def _sgn(x):
    return (x > 0) - (x < 0)


def orient3d_exact(a, b, c, d):
    return _sgn(_dot(_sub(b, a), _cross(_sub(c, a), _sub(d, a))))


def _orient2d(a, b, c):
    return _sgn((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))


def _seg_seg_2d(p1, p2, q1, q2):
    o1, o2 = _orient2d(p1, p2, q1), _orient2d(p1, p2, q2)
    o3, o4 = _orient2d(q1, q2, p1), _orient2d(q1, q2, p2)
    if o1 * o2 < 0 and o3 * o4 < 0:
        return True

    def on(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    return (
        (o1 == 0 and on(p1, p2, q1)) or (o2 == 0 and on(p1, p2, q2))
        or (o3 == 0 and on(q1, q2, p1)) or (o4 == 0 and on(q1, q2, p2))
    )


def _point_in_tri_2d(p, a, b, c):
    s = [_orient2d(a, b, p), _orient2d(b, c, p), _orient2d(c, a, p)]
    return all(x >= 0 for x in s) or all(x <= 0 for x in s)


def _segment_triangle_exact(a, b, tri):
    p, q, r = tri
    da, db = orient3d_exact(p, q, r, a), orient3d_exact(p, q, r, b)
    if da * db > 0:
        return False
    if da == 0 and db == 0:
        nrm = _cross(_sub(q, p), _sub(r, p))
        ax = max(range(3), key=lambda k: abs(nrm[k]))
        if nrm[ax] == 0:
            return False  # degenerate triangle: covered by its own edges
        keep = [k for k in range(3) if k != ax]

        def pr(x):
            return (x[keep[0]], x[keep[1]])

        A, B, P, Q, R = map(pr, (a, b, p, q, r))
        if _point_in_tri_2d(A, P, Q, R) or _point_in_tri_2d(B, P, Q, R):
            return True
        return any(_seg_seg_2d(A, B, u, v) for u, v in ((P, Q), (Q, R), (R, P)))
    s1 = orient3d_exact(a, b, p, q)
    s2 = orient3d_exact(a, b, q, r)
    s3 = orient3d_exact(a, b, r, p)
    return (s1 >= 0 and s2 >= 0 and s3 >= 0) or (s1 <= 0 and s2 <= 0 and s3 <= 0)


def triangles_intersect_exact(t1, t2) -> bool:
    """Closed-set intersection test of two triangles in exact arithmetic."""
    t1 = [_q(p) for p in t1]
    t2 = [_q(p) for p in t2]
    for s, t in ((t1, t2), (t2, t1)):
        for i in range(3):
            if _segment_triangle_exact(s[i], s[(i + 1) % 3], t):
                return True
    return False


def _triangles_intersect_batch(T1, T2):
    """Vectorized test; returns (result, undecided mask)."""
    k = len(T1)
    hit = np.zeros(k, dtype=bool)
    unsure = np.zeros(k, dtype=bool)
    for S, T in ((T1, T2), (T2, T1)):
        p, q, r = T[:, 0], T[:, 1], T[:, 2]
        for i in range(3):
            a, b = S[:, i], S[:, (i + 1) % 3]
            da, sa = _orient3d(p, q, r, a)
            db, sb = _orient3d(p, q, r, b)
            s1, u1 = _orient3d(a, b, p, q)
            s2, u2 = _orient3d(a, b, q, r)
            s3, u3 = _orient3d(a, b, r, p)
            unsure |= ~(sa & sb)
            straddle = da * db < 0
            unsure |= straddle & ~(u1 & u2 & u3)
            inside = ((s1 > 0) & (s2 > 0) & (s3 > 0)) | ((s1 < 0) & (s2 < 0) & (s3 < 0))
            hit |= straddle & inside & u1 & u2 & u3
    return hit, unsure


def _separated_float(T1, T2):
    """Certify disjointness with a separating axis whose gap beats rounding error."""
    e1 = np.roll(T1, -1, axis=1) - T1
    e2 = np.roll(T2, -1, axis=1) - T2
    n1 = np.cross(e1[:, 0], e1[:, 1])
    n2 = np.cross(e2[:, 0], e2[:, 1])
    axes = [n1, n2]
    axes += [np.cross(e1[:, i], e2[:, j]) for i in range(3) for j in range(3)]
    axes += [np.cross(n1, e1[:, i]) for i in range(3)] + [np.cross(n2, e2[:, i]) for i in range(3)]
    ref = T1[:, 0]
    A, B = T1 - ref[:, None], T2 - ref[:, None]
    extent = np.maximum(np.abs(A).max(axis=(1, 2)), np.abs(B).max(axis=(1, 2)))
    sep = np.zeros(len(T1), dtype=bool)
    for ax in axes:
        pa = np.einsum("kij,kj->ki", A, ax)
        pb = np.einsum("kij,kj->ki", B, ax)
        gap = np.maximum(pb.min(1) - pa.max(1), pa.min(1) - pb.max(1))
        sep |= gap > 1e-9 * np.linalg.norm(ax, axis=1) * extent
    return sep


def intersecting_faces(mesh: TriangleMesh, pairs=None) -> np.ndarray:
    """Boolean mask of faces that intersect some face they share no vertex with."""
    V, F = mesh.vertices, mesh.faces
    m = len(F)
    flags = np.zeros(m, dtype=bool)
    if m < 2:
        return flags
    tri = V[F]
    if pairs is None:
        pairs = AABBTree(tri.min(axis=1), tri.max(axis=1)).self_pairs()
    if len(pairs) == 0:
        return flags
    fa, fb = F[pairs[:, 0]], F[pairs[:, 1]]
    shares = (fa[:, :, None] == fb[:, None, :]).any(axis=(1, 2))
    pairs = pairs[~shares]
    hit, unsure = _triangles_intersect_batch(tri[pairs[:, 0]], tri[pairs[:, 1]])
    if unsure.any():
        k = np.nonzero(unsure)[0]
        unsure[k[_separated_float(tri[pairs[k, 0]], tri[pairs[k, 1]])]] = False
    for k in np.nonzero(unsure)[0]:
        i, j = pairs[k]
        hit[k] = triangles_intersect_exact(tri[i], tri[j])
    flags[pairs[hit, 0]] = True
    flags[pairs[hit, 1]] = True
    return flags


def self_intersection_fraction(mesh: TriangleMesh) -> float:
    if mesh.n_faces == 0:
        return 0.0
    return float(intersecting_faces(mesh).sum() / mesh.n_faces)
