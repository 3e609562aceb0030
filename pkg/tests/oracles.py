"""Independent reference implementations used to freeze expected values.

Nothing here imports the package's numerical routines; each oracle is a
plain, slow, dense or brute-force evaluation of the same definition.
"""

from __future__ import annotations

import itertools

import numpy as np

# ---------------------------------------------------------------------------
# Dense biharmonic coordinates
# ---------------------------------------------------------------------------


def dense_cotan_laplacian(V, F, clamp=(1e-6, 1e6)):
    """Cotangent stiffness by angle loops; barycentric lumped mass."""
    V = np.asarray(V, dtype=float)
    n = len(V)
    W = np.zeros((n, n))
    mass = np.zeros(n)
    for f in F:
        for k in range(3):
            o, i, j = f[k], f[(k + 1) % 3], f[(k + 2) % 3]
            a, b = V[i] - V[o], V[j] - V[o]
            angle = np.arctan2(np.linalg.norm(np.cross(a, b)), a @ b)
            W[i, j] += 0.5 / np.tan(angle)
            W[j, i] += 0.5 / np.tan(angle)
        area = 0.5 * np.linalg.norm(np.cross(V[f[1]] - V[f[0]], V[f[2]] - V[f[0]]))
        mass[list(f)] += area / 3.0
    edge = W != 0
    W[edge] = np.clip(W[edge], *clamp)
    L = np.diag(W.sum(axis=1)) - W
    mass[mass == 0] = 1.0
    return L, mass


def dense_uniform_laplacian(n, F):
    adj = np.zeros((n, n))
    for f in F:
        for a, b in itertools.permutations(f, 2):
            adj[a, b] = 1.0
    return np.diag(adj.sum(axis=1)) - adj, np.ones(n)


def dense_biharmonic(V, F, handles, kind="cotangent"):
    """W = Q^T - T^T (T A T^T)^-1 T A Q^T with dense selectors."""
    n = len(V)
    if kind == "cotangent":
        L, m = dense_cotan_laplacian(V, F)
    else:
        L, m = dense_uniform_laplacian(n, F)
    A = L.T @ np.diag(1.0 / m) @ L
    handles = list(handles)
    free = [i for i in range(n) if i not in set(handles)]
    Q = np.eye(n)[handles]
    T = np.eye(n)[free]
    return Q.T - T.T @ np.linalg.solve(T @ A @ T.T, T @ A @ Q.T)


# ---------------------------------------------------------------------------
# Farthest-point sampling
# ---------------------------------------------------------------------------


def fps_bruteforce(V, count, start=0):
    chosen = [start]
    while len(chosen) < count:
        best, best_d = None, -1.0
        for i in range(len(V)):
            if i in chosen:
                continue
            d = min(float(np.sum((V[i] - V[j]) ** 2)) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


# ---------------------------------------------------------------------------
# Triangle-triangle intersection on integer coordinates
# ---------------------------------------------------------------------------


def _cross_i(u, v):
    return (u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0])


def _sub_i(a, b):
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


def _dot_i(u, v):
    return u[0] * v[0] + u[1] * v[1] + u[2] * v[2]


def triangles_intersect_sat(t1, t2) -> bool:
    """Closed-set overlap by the separating axis theorem on Python ints.

    Coordinates must be integers (scale dyadic grids up first). Candidate axes
    are both normals, the 9 edge-edge crosses and, for coplanar input, the
    in-plane edge normals. Degenerate (zero) axes are skipped.
    """
    t1 = [tuple(int(c) for c in p) for p in t1]
    t2 = [tuple(int(c) for c in p) for p in t2]
    e1 = [_sub_i(t1[(i + 1) % 3], t1[i]) for i in range(3)]
    e2 = [_sub_i(t2[(i + 1) % 3], t2[i]) for i in range(3)]
    n1, n2 = _cross_i(e1[0], e1[1]), _cross_i(e2[0], e2[1])
    axes = [n1, n2] + [_cross_i(a, b) for a in e1 for b in e2]
    axes += [_cross_i(n1, e) for e in e1] + [_cross_i(n2, e) for e in e2]
    for ax in axes:
        if ax == (0, 0, 0):
            continue
        p1 = [_dot_i(p, ax) for p in t1]
        p2 = [_dot_i(p, ax) for p in t2]
        if max(p1) < min(p2) or max(p2) < min(p1):
            return False
    return True


def intersecting_faces_bruteforce(V, F, quantum):
    """All-pairs flag vector; pairs sharing a vertex are not tested.

    Every pair is visited; an exact integer box-overlap test rejects pairs
    before the SAT test, which does not change the result.
    """
    Vi = np.rint(np.asarray(V) / quantum).astype(np.int64)
    T = Vi[np.asarray(F)]
    lo, hi = T.min(axis=1), T.max(axis=1)
    flags = np.zeros(len(F), dtype=bool)
    for i in range(len(F)):
        j = np.arange(i + 1, len(F))
        touch = np.all((lo[j] <= hi[i]) & (lo[i] <= hi[j]), axis=1)
        for jj in j[touch]:
            if set(F[i]) & set(F[jj]):
                continue
            if triangles_intersect_sat(T[i], T[jj]):
                flags[i] = flags[jj] = True
    return flags


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def central_difference(f, x, index, h):
    xp, xm = x.copy(), x.copy()
    xp[index] += h
    xm[index] -= h
    return (f(xp) - f(xm)) / (2 * h)


def nearest_bruteforce(points, queries):
    d = ((queries[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    return np.argmin(d, axis=1)


def _point_segment(p, a, b):
    ab = b - a
    t = np.clip((p - a) @ ab / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t * ab))


def point_triangle_distance(p, a, b, c):
    """Plane projection if it lands inside, else the nearest edge."""
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n)
    q = p - ((p - a) @ n) * n
    inside = all(np.cross(y - x, q - x) @ n >= 0 for x, y in ((a, b), (b, c), (c, a)))
    if inside:
        return abs((p - a) @ n)
    return min(_point_segment(p, a, b), _point_segment(p, b, c), _point_segment(p, c, a))
