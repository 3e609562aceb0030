"""Direct optimization of handle positions against target surfaces.

Stands in for a learned displacement predictor: each block samples handles,
builds biharmonic coordinates on the current shape and runs a first-order
optimizer on ``P`` with ``dL/dP = W^T dL/dV``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .deformation import (
    EnergyMatrix,
    build_energy,
    compute_biharmonic,
    energy_kind,
    rest_residual,
    sample_handles,
)
from .energies import LossWeights, _normals_fwd, same_active_set, total_mesh_loss
from .errors import DivergenceError, MeshValidationError
from .mesh import TaggedMesh, TemplateTags, TriangleMesh, closest_points
from .quality import _per_cap, cap_coplanarity, cap_wall_orthogonality

log = logging.getLogger(__name__)

OPTIMIZERS = ("adaptive_moments", "gradient_descent_momentum")


@dataclass
class FitConfig:
    schedule: list = field(default_factory=lambda: [75, 75, 600])
    iters_per_block: int = 300
    # fraction of the template bounding-box diagonal
    step_size: float = 1e-2
    optimizer: str = "adaptive_moments"
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    energy: str = "cotangent_squared"
    recompute_energy: bool = True
    preserve_rest: bool = True
    final_step_fraction: float = 1e-3
    warmup_fraction: float = 0.1
    momentum: float = 0.9
    # 0 -> target vertices are the samples; otherwise area-weighted samples
    target_samples: int = 0

    def __post_init__(self):
        self.schedule = [int(c) for c in self.schedule]
        if not self.schedule or min(self.schedule) < 1:
            raise ValueError("schedule must be a non-empty list of positive handle counts")
        if any(b < a for a, b in zip(self.schedule, self.schedule[1:])):
            warnings.warn(f"handle schedule {self.schedule} is not nondecreasing", stacklevel=2)
        if self.iters_per_block < 1:
            raise ValueError("iters_per_block must be positive")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if isinstance(self.loss, dict):
            self.loss = LossWeights.from_mapping(self.loss)
        self.energy = energy_kind(self.energy)

    @classmethod
    def from_mapping(cls, data: dict | None, loss: dict | None = None) -> "FitConfig":
        data = dict(data or {})
        known = set(cls.__dataclass_fields__) - {"loss"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown [fit] keys: {sorted(unknown)}")
        return cls(**data, loss=LossWeights.from_mapping(loss))


@dataclass
class FitResult:
    final_vertices: np.ndarray
    handle_trajectory: list
    loss_trace: np.ndarray  # rows: iter, block, loss, chamfer
    metrics_before: dict
    metrics_after: dict
    block_vertices: list
    final_loss: float

    @property
    def initial_loss(self) -> float:
        return float(self.loss_trace[0, 2])


def surface_chamfer(mesh: TriangleMesh, points, faces=None) -> float:
    """Symmetric mean distance between a mesh and target points (mm).

    Target-to-mesh uses exact closest points on the surface, mesh-to-target
    uses vertex-to-nearest-point distances.
    """
    pts = np.asarray(points).reshape(-1, 3)
    sub = mesh if faces is None else TriangleMesh(mesh.vertices, mesh.faces[faces])
    _, _, _, d_tm = closest_points(sub, pts)
    vids = np.unique(sub.faces)
    d_mt, _ = cKDTree(pts).query(mesh.vertices[vids])
    return 0.5 * (float(d_tm.mean()) + float(d_mt.mean()))


def _supervised_faces(tags: TemplateTags, targets: dict):
    keep = [np.asarray(f) for name, f in tags.structures.items() if targets.get(name) is not None]
    return np.unique(np.concatenate(keep)) if keep else np.zeros(0, dtype=np.int64)


def _target_points(targets: dict):
    pts = [t.points for t in targets.values() if t is not None]
    return np.vstack(pts) if pts else np.zeros((0, 3))


def fit_metrics(mesh: TriangleMesh, tags: TemplateTags, targets: dict) -> dict:
    faces = _supervised_faces(tags, targets)
    pts = _target_points(targets)
    return {
        "chamfer": surface_chamfer(mesh, pts, faces) if len(pts) and faces.size else None,
        "cwo": _per_cap(cap_wall_orthogonality, mesh, tags, "formula"),
        "cwo_centroid": _per_cap(cap_wall_orthogonality, mesh, tags, "centroid"),
        "coplanarity": _per_cap(cap_coplanarity, mesh, tags),
    }


class _Adam:
    def __init__(self, shape, b1=0.9, b2=0.999, eps=1e-12):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.b1, self.b2, self.eps = b1, b2, eps

    def step(self, g, lr):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        return -lr * mh / (np.sqrt(vh) + self.eps)


class _Momentum:
    """Dampened heavy-ball descent, gradient scaled by its first-step RMS.

    The ``1 - mu`` dampening keeps the steady-state step at ``lr``.
    """

    def __init__(self, shape, mu):
        self.vel = np.zeros(shape)
        self.mu = mu
        self.scale = None

    def step(self, g, lr):
        if self.scale is None:
            rms = float(np.sqrt(np.mean(g * g)))
            self.scale = 1.0 / rms if rms > 0 else 1.0
        self.vel = self.mu * self.vel - (1 - self.mu) * lr * self.scale * g
        return self.vel


def _lr(base, it, iters, final_fraction, warmup_fraction):
    # linear warmup, then cosine decay to base * final_fraction within one block
    warm = int(round(warmup_fraction * iters))
    if it < warm:
        return base * (it + 1) / (warm + 1)
    c = 0.5 * (1 + np.cos(np.pi * (it - warm) / max(iters - warm - 1, 1)))
    return base * (final_fraction + (1 - final_fraction) * c)


def fit_handles(template: TaggedMesh, energy: EnergyMatrix | None, targets: dict,
                config: FitConfig | None = None) -> FitResult:
    """Progressive coarse-to-fine handle fit of ``template`` to ``targets``.

    ``targets`` maps structure name to :class:`SurfaceSamples` (``None`` for
    unsupervised structures). The output of block b is the rest pose of
    block b + 1.
    """
    config = config or FitConfig()
    mesh, tags = template.mesh, template.tags
    n = mesh.n_vertices
    if max(config.schedule) > n:
        raise MeshValidationError(f"schedule {config.schedule} asks for more handles than {n} vertices")
    missing = [s for s in tags.structures if s not in targets]
    if missing:
        raise MeshValidationError(f"no target for supervised structure(s): {missing}")
    if energy is None:
        energy = build_energy(mesh, config.energy)
    trees = {k: cKDTree(t.points) for k, t in targets.items() if t is not None}
    sup_faces = _supervised_faces(tags, targets)
    sup_vids = np.unique(mesh.faces[sup_faces]) if sup_faces.size else np.arange(n)
    all_pts = _target_points(targets)
    all_tree = cKDTree(all_pts) if len(all_pts) else None

    def quick_chamfer(V):
        if all_tree is None:
            return float("nan")
        X = V[sup_vids]
        d1, _ = all_tree.query(X)
        d2, _ = cKDTree(X).query(all_pts)
        return 0.5 * (float(d1.mean()) + float(d2.mean()))

    diag = mesh.bbox_diagonal()
    base_lr = config.step_size * diag
    current = mesh.vertices.copy()
    metrics_before = fit_metrics(mesh, tags, targets)
    trace, trajectory, block_vertices = [], [], []
    initial_loss = None
    above = 0
    it_global = 0
    rest_energy = energy

    for block, count in enumerate(config.schedule):
        cur_mesh = mesh.with_vertices(current)
        if block == 0:
            blk_energy = energy
        elif config.recompute_energy:
            blk_energy = build_energy(cur_mesh, config.energy)
        else:
            blk_energy = rest_energy
        handles = sample_handles(cur_mesh, count, 0)
        bmap = compute_biharmonic(blk_energy, handles)
        W = bmap.W
        WT = W.T.tocsr()
        P0 = current[handles.indices].copy()
        R = rest_residual(bmap, current) if config.preserve_rest else np.zeros_like(current)
        P = P0.copy()
        opt = _Adam(P.shape) if config.optimizer == "adaptive_moments" else _Momentum(P.shape, config.momentum)
        best_val, best_P = np.inf, P.copy()

        for it in range(config.iters_per_block + 1):
            V = W @ P + R
            lv = total_mesh_loss(mesh.with_vertices(V), targets, tags, config.loss, trees)
            val = lv.value
            if not np.isfinite(val):
                raise DivergenceError(f"non-finite loss at block {block}, iteration {it}")
            if initial_loss is None:
                initial_loss = val
            trace.append((it_global, block, val, quick_chamfer(V)))
            it_global += 1
            if val < best_val:
                best_val, best_P = val, P.copy()
            above = above + 1 if val > 10 * initial_loss else 0
            if above >= 50:
                raise DivergenceError(
                    f"loss above 10x initial ({initial_loss:.4g}) for 50 iterations (block {block})"
                )
            if it == config.iters_per_block:
                break
            gP = WT @ lv.gradient
            P = P + opt.step(gP, _lr(base_lr, it, config.iters_per_block, config.final_step_fraction,
                                        config.warmup_fraction))

        current = W @ best_P + R
        trajectory.append({"block": block, "handles": handles.indices.copy(), "positions": best_P.copy()})
        block_vertices.append(current.copy())
        log.info("block %d (%d handles): best loss %.6g", block, count, best_val)

    final = mesh.with_vertices(current)
    return FitResult(
        final_vertices=current,
        handle_trajectory=trajectory,
        loss_trace=np.array(trace),
        metrics_before=metrics_before,
        metrics_after=fit_metrics(final, tags, targets),
        block_vertices=block_vertices,
        final_loss=float(best_val),
    )


def write_loss_csv(path, trace) -> None:
    lines = ["iter,block,loss,chamfer"]
    lines += ["%d,%d,%.17g,%.17g" % (int(r[0]), int(r[1]), r[2], r[3]) for r in trace]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------


@dataclass
class GradientCheckReport:
    max_rel_error: float
    checked: int
    skipped_kink: int
    skipped_switch: int
    analytic: np.ndarray
    numeric: np.ndarray


def gradient_check(template: TaggedMesh, targets: dict, weights: LossWeights, probe_count: int = 100,
                   seed: int = 0, bmap=None, handle_count: int = 75, handle_positions=None,
                   preserve_rest: bool = True, step: float = 1e-5, kink: float = 1e-3,
                   abs_floor: float = 1e-8) -> GradientCheckReport:
    """Compare ``W^T dL/dV`` against central differences in handle coordinates.

    A probe is skipped and counted when a wall-face orthogonality dot
    product within ``kink`` of the |.| kink moves by more than 1% of its
    distance to the kink (or crosses it), or when
    its +-h evaluations change a nearest-neighbour correspondence.
    """
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    mesh, tags = template.mesh, template.tags
    if bmap is None:
        bmap = compute_biharmonic(build_energy(mesh), sample_handles(mesh, handle_count, 0))
    W = bmap.W
    h_idx = bmap.handle_set.indices
    R = rest_residual(bmap, mesh.vertices) if preserve_rest else np.zeros_like(mesh.vertices)
    P = mesh.vertices[h_idx].copy() if handle_positions is None else np.array(handle_positions, dtype=float)
    trees = {k: cKDTree(t.points) for k, t in targets.items() if t is not None}

    def evaluate(P_):
        return total_mesh_loss(mesh.with_vertices(W @ P_ + R), targets, tags, weights, trees)

    base = evaluate(P)
    grad = W.T @ base.gradient
    h = step * max(mesh.bbox_diagonal(), 1e-12)
    rng = np.random.default_rng(seed)
    total = P.size
    flat = rng.choice(total, size=probe_count, replace=probe_count > total)

    check_kink = weights.alpha > 0 and weights.beta > 0 and bool(tags.caps)

    def wall_dots(P_):
        V = W @ P_ + R
        out = []
        for cap in tags.caps:
            nc, _ = _normals_fwd(V, mesh.faces[np.asarray(cap.cap_faces)])
            nw, _ = _normals_fwd(V, mesh.faces[np.asarray(cap.wall_faces)])
            out.append(nw @ nc.mean(axis=0))
        return np.concatenate(out)

    analytic, numeric, errs = [], [], []
    skipped_kink = skipped_switch = 0
    for f in flat:
        i, k = divmod(int(f), 3)
        Pp, Pm = P.copy(), P.copy()
        Pp[i, k] += h
        Pm[i, k] -= h
        if check_kink:
            dp, dm = wall_dots(Pp), wall_dots(Pm)
            dist = np.minimum(np.abs(dp), np.abs(dm))
            # moved by more than 1% of its distance to the kink, or crossed it
            moved = (np.abs(dp - dm) > 1e-2 * dist) | (np.sign(dp) != np.sign(dm))
            if (moved & (dist < kink)).any():
                skipped_kink += 1
                continue
        lp, lm = evaluate(Pp), evaluate(Pm)
        if not (same_active_set(lp, base) and same_active_set(lm, base)):
            skipped_switch += 1
            continue
        fd = (lp.value - lm.value) / (2 * h)
        a = grad[i, k]
        denom = max(abs(a), abs(fd))
        errs.append(0.0 if denom < abs_floor else abs(a - fd) / denom)
        analytic.append(a)
        numeric.append(fd)
    return GradientCheckReport(
        max(errs) if errs else 0.0,
        len(errs),
        skipped_kink,
        skipped_switch,
        np.array(analytic),
        np.array(numeric),
    )
