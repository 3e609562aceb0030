"""Procedural test geometry: primitives and a tagged four-vessel template."""

from __future__ import annotations

import numpy as np

from .mesh import CapTag, TaggedMesh, TemplateTags, TriangleMesh


def unit_square() -> TriangleMesh:
    v = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]]
    return TriangleMesh(v, [[0, 1, 2], [0, 2, 3]])


def two_triangle_strip() -> TriangleMesh:
    """Four vertices, two triangles sharing the edge (1, 2)."""
    v = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.2]]
    return TriangleMesh(v, [[0, 1, 2], [1, 3, 2]])


def unit_cube() -> TriangleMesh:
    v = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    f = [
        [0, 1, 3], [0, 3, 2],  # x = 0
        [4, 6, 7], [4, 7, 5],  # x = 1
        [0, 4, 5], [0, 5, 1],  # y = 0
        [2, 3, 7], [2, 7, 6],  # y = 1
        [0, 2, 6], [0, 6, 4],  # z = 0
        [1, 5, 7], [1, 7, 3],  # z = 1
    ]
    return TriangleMesh(v, f)


def icosphere(level: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Subdivided icosahedron; level 3 has 642 vertices, level 2 has 162."""
    t = (1 + 5**0.5) / 2
    v = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    f = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(p, dtype=float) / np.linalg.norm(p) for p in v]
    for _ in range(level):
        cache = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return TriangleMesh(np.array(verts) * radius + np.asarray(center, dtype=float), f)


def ellipsoid(axes=(1.0, 0.8, 1.3), level: int = 4) -> TriangleMesh:
    s = icosphere(level)
    return s.with_vertices(s.vertices * np.asarray(axes, dtype=float))


def midpoint_subdivide(mesh: TriangleMesh) -> TriangleMesh:
    """1-to-4 split; original vertices keep their indices, new ones lie on edges."""
    f = mesh.faces
    e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    uniq, inv = np.unique(e, axis=0, return_inverse=True)
    inv = inv.ravel()
    n = mesh.n_vertices
    mids = 0.5 * (mesh.vertices[uniq[:, 0]] + mesh.vertices[uniq[:, 1]])
    m = f.shape[0]
    ab, bc, ca = (inv[k * m:(k + 1) * m] + n for k in range(3))
    a, b, c = f[:, 0], f[:, 1], f[:, 2]
    nf = np.concatenate([
        np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
        np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1),
    ])
    return TriangleMesh(np.vstack([mesh.vertices, mids]), nf)


def _ring_band(a, b):
    """Triangles joining two equally sized closed rings (outward for CCW rings)."""
    k = len(a)
    j = np.arange(k)
    j1 = (j + 1) % k
    return np.concatenate([np.stack([a[j], a[j1], b[j1]], 1), np.stack([a[j], b[j1], b[j]], 1)])


def _disc(ring, center_idx, inner_rings):
    faces = []
    outer = ring
    for inner in inner_rings:
        faces.append(_ring_band(outer, inner))
        outer = inner
    k = len(outer)
    j = np.arange(k)
    faces.append(np.stack([outer[j], outer[(j + 1) % k], np.full(k, center_idx)], 1))
    return np.concatenate(faces)


def capped_cylinder(radius=1.0, height=2.0, n_around=24, n_along=8, cap_rings=3, wall_bands=2):
    """Closed cylinder along +z with flat caps tagged at both ends.

    Each cap's wall set is the ``wall_bands`` rows of side faces next to it.
    """
    phi = 2 * np.pi * np.arange(n_around) / n_around
    verts, rings = [], []
    for i in range(n_along + 1):
        z = height * i / n_along
        rings.append(np.arange(len(verts), len(verts) + n_around))
        verts += [[radius * np.cos(p), radius * np.sin(p), z] for p in phi]
    side = [_ring_band(rings[i], rings[i + 1]) for i in range(n_along)]
    faces = list(side)
    caps_faces = []
    for end, z in ((n_along, height), (0, 0.0)):
        inner = []
        for q in range(1, cap_rings):
            r = radius * (cap_rings - q) / cap_rings
            inner.append(np.arange(len(verts), len(verts) + n_around))
            verts += [[r * np.cos(p), r * np.sin(p), z] for p in phi]
        center = len(verts)
        verts.append([0.0, 0.0, z])
        ring = rings[end]
        if end == 0:
            # bottom cap faces -z: reverse ring order
            disc = _disc(ring[::-1], center, [r[::-1] for r in inner])
        else:
            disc = _disc(ring, center, inner)
        caps_faces.append(disc)
    side_count = sum(len(s) for s in side)
    per_band = 2 * n_around
    top = np.arange(side_count, side_count + len(caps_faces[0]))
    bot = np.arange(top[-1] + 1, top[-1] + 1 + len(caps_faces[1]))
    faces += caps_faces
    mesh = TriangleMesh(np.array(verts), np.concatenate(faces))
    top_wall = np.arange(side_count - wall_bands * per_band, side_count)
    bot_wall = np.arange(0, wall_bands * per_band)
    tags = TemplateTags(
        {"all": np.arange(mesh.n_faces)},
        [CapTag("top", top, top_wall, True), CapTag("bottom", bot, bot_wall)],
    )
    return TaggedMesh(mesh, tags)


def four_vessel_template(
    body_radius=20.0,
    grid=12,
    hole=2,
    vessel_length=16.0,
    tube_rings=8,
    blend_rings=3,
    cap_rings=3,
    wall_bands=3,
) -> TaggedMesh:
    """Cube-sphere body with four capped tubes along +-x and +-y.

    Structures: ``body`` and one ``vessel_*`` per tube (tube wall plus cap).
    Caps on the x-axis vessels are flagged as inlets.
    """
    R = grid
    key = {}
    verts = []

    def lattice(i, j, k):
        t = (i, j, k)
        if t not in key:
            c = np.tan(np.pi / 4 * (2 * np.array(t, dtype=float) / R - 1))
            verts.append(body_radius * c / np.linalg.norm(c))
            key[t] = len(verts) - 1
        return key[t]

    lo, hi = R // 2 - hole, R // 2 + hole
    holes = {(0, R), (0, 0), (1, R), (1, 0)}
    faces, loops = [], {}
    for a in range(3):
        b, c = (a + 1) % 3, (a + 2) % 3
        for side in (0, R):
            for u in range(R):
                for v in range(R):
                    if (a, side) in holes and lo <= u < hi and lo <= v < hi:
                        continue
                    corner = []
                    for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        t = [0, 0, 0]
                        t[a], t[b], t[c] = side, u + du, v + dv
                        corner.append(lattice(*t))
                    q0, q1, q2, q3 = corner
                    if side == R:
                        faces += [(q0, q1, q2), (q0, q2, q3)]
                    else:
                        faces += [(q0, q2, q1), (q0, q3, q2)]
            if (a, side) in holes:
                ring = []
                for u in range(lo, hi + 1):
                    for v in range(lo, hi + 1):
                        if u in (lo, hi) or v in (lo, hi):
                            t = [0, 0, 0]
                            t[a], t[b], t[c] = side, u, v
                            ring.append(lattice(*t))
                loops[(a, side)] = np.array(ring)
    verts = list(verts)
    structures = {"body": np.arange(len(faces))}
    caps = []
    names = {(0, R): "px", (0, 0): "nx", (1, R): "py", (1, 0): "ny"}
    for (a, side), ring in loops.items():
        d = np.zeros(3)
        d[a] = 1.0 if side == R else -1.0
        e1 = np.zeros(3)
        e1[(a + 1) % 3] = 1.0
        e2 = np.cross(d, e1)
        P = np.array([verts[i] for i in ring])
        phi = np.arctan2(P @ e2, P @ e1)
        order = np.argsort(phi)
        ring, P, phi = ring[order], P[order], phi[order]
        axial0 = P @ d
        radial = P - axial0[:, None] * d
        rv = np.linalg.norm(radial, axis=1).mean()
        a0 = axial0.mean()
        dz = vessel_length / tube_rings
        circle = rv * (np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2)
        rings = [ring]
        for k in range(1, tube_rings + 1):
            s = min(1.0, k / blend_rings)
            s = s * s * (3 - 2 * s)
            ax = (1 - s) * axial0 + s * a0 + k * dz
            rad = (1 - s) * radial + s * circle
            idx = np.arange(len(verts), len(verts) + len(ring))
            verts += list(rad + ax[:, None] * d)
            rings.append(idx)
        tube = [_ring_band(rings[k], rings[k + 1]) for k in range(tube_rings)]
        end_ax = a0 + tube_rings * dz
        inner = []
        for q in range(1, cap_rings):
            r = (cap_rings - q) / cap_rings
            idx = np.arange(len(verts), len(verts) + len(ring))
            verts += list(r * circle + end_ax * d)
            inner.append(idx)
        center = len(verts)
        verts.append(end_ax * d)
        disc = _disc(rings[-1], center, inner)
        start = len(faces)
        tube_faces = np.concatenate(tube)
        faces += [tuple(x) for x in tube_faces]
        wall = np.arange(start + len(tube_faces) - wall_bands * 2 * len(ring), start + len(tube_faces))
        cap_start = len(faces)
        faces += [tuple(x) for x in disc]
        cap = np.arange(cap_start, len(faces))
        structures[f"vessel_{names[(a, side)]}"] = np.arange(start, len(faces))
        caps.append(CapTag(f"cap_{names[(a, side)]}", cap, wall, inlet=(a == 0)))
    mesh = TriangleMesh(np.array(verts), np.array(faces))
    return TaggedMesh(mesh, TemplateTags(structures, caps))


def crumpled_strip(n_quads: int = 120, seed: int = 0, quantum: float = 2.0**-10) -> TriangleMesh:
    """Random folded triangle strip with coordinates on a dyadic grid.

    Coordinates are multiples of ``quantum`` inside [-4, 4], which keeps exact
    integer arithmetic cheap in brute-force oracles.
    """
    rng = np.random.default_rng(seed)
    steps = rng.normal(size=(n_quads + 1, 3))
    steps /= np.linalg.norm(steps, axis=1, keepdims=True)
    spine = np.cumsum(0.35 * steps, axis=0)
    spine -= spine.mean(axis=0)
    spine *= 3.0 / max(np.abs(spine).max(), 1e-9)
    side = rng.normal(size=(n_quads + 1, 3))
    side /= np.linalg.norm(side, axis=1, keepdims=True)
    top = spine + 0.4 * side
    pts = np.empty((2 * (n_quads + 1), 3))
    pts[0::2], pts[1::2] = spine, np.clip(top, -3.9, 3.9)
    pts = np.round(pts / quantum) * quantum
    faces = []
    for q in range(n_quads):
        a, b, c, d = 2 * q, 2 * q + 1, 2 * q + 2, 2 * q + 3
        faces += [(a, c, b), (b, c, d)]
    return TriangleMesh(pts, faces)


def smooth_bump(vertices, center, amplitude: float, width: float) -> np.ndarray:
    """Push vertices radially (from the origin) by a Gaussian bump around ``center``."""
    V = np.asarray(vertices, dtype=np.float64)
    r = np.linalg.norm(V, axis=1, keepdims=True)
    out_dir = V / np.maximum(r, 1e-12)
    g = np.exp(-np.sum((V - np.asarray(center)) ** 2, axis=1) / (2 * width**2))
    return V + amplitude * g[:, None] * out_dir


def tilt_caps(tagged: TaggedMesh, vertices, angle: float, ramp: float = 6.0) -> np.ndarray:
    """Shear each vessel near its cap so the cap plane tilts by ``angle`` (radians).

    The shear ramps in smoothly over ``ramp`` mm behind the cap plane, leaving
    the rest of the vessel untouched.
    """
    V = np.array(vertices, dtype=np.float64)
    F = tagged.mesh.faces
    for k, cap in enumerate(tagged.tags.caps):
        cv = np.unique(F[np.asarray(cap.cap_faces)])
        c = V[cv].mean(axis=0)
        d = c / np.linalg.norm(c)  # vessels point away from the origin
        e = np.cross(d, [0.0, 0.0, 1.0] if abs(d[2]) < 0.9 else [1.0, 0.0, 0.0])
        e /= np.linalg.norm(e)
        if k % 2:
            e = np.cross(d, e)
        s = (V - c) @ d + ramp
        w = np.clip(s / ramp, 0.0, 1.0)
        w = w * w * (3 - 2 * w)
        V += (np.tan(angle) * w * ((V - c) @ e))[:, None] * d
    return V


def bumped_four_vessel(tagged: TaggedMesh | None = None, amplitude: float = 3.0, tilt: float = 0.2) -> TriangleMesh:
    """Four-vessel template deformed by a known smooth bump plus cap tilt."""
    tagged = tagged or four_vessel_template()
    V = tagged.mesh.vertices
    R = np.linalg.norm(V, axis=1).min()
    V = smooth_bump(V, (0.0, 0.6 * R, 0.8 * R), amplitude, 0.5 * R)
    V = tilt_caps(tagged, V, tilt)
    return tagged.mesh.with_vertices(V)
