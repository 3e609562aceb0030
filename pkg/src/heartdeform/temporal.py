"""Cubic-spline interpolation of mesh motion between imaging time points."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import MeshValidationError
from .mesh import TriangleMesh, enclosed_volume, read_obj, require_closed, write_obj

FRAME_RE = re.compile(r"frame_(\d+)\.obj$")


@dataclass
class MotionSequence:
    """Vertex frames (T, n, 3) over one connectivity, at increasing times (s)."""

    frames: np.ndarray
    times: np.ndarray
    periodic: bool = False
    period: float | None = None

    def __post_init__(self):
        frames = [np.asarray(f, dtype=np.float64) for f in self.frames]
        if len(frames) < 2:
            raise MeshValidationError("a motion sequence needs at least 2 frames")
        shapes = {f.shape for f in frames}
        if len(shapes) != 1 or frames[0].ndim != 2 or frames[0].shape[1] != 3:
            raise MeshValidationError(f"frames must share one (n, 3) shape, got {sorted(shapes)}")
        self.frames = np.stack(frames)
        self.times = np.asarray(self.times, dtype=np.float64).ravel()
        if len(self.times) != len(self.frames):
            raise MeshValidationError("one time per frame required")
        if np.any(np.diff(self.times) <= 0):
            raise MeshValidationError("times must be strictly increasing (no duplicates)")
        if self.periodic:
            if self.period is None or not self.period > 0:
                raise MeshValidationError("periodic sequences need a positive period")
            if self.times[0] < 0 or self.times[-1] >= self.period:
                raise MeshValidationError("periodic times must lie in [0, period)")

    @property
    def n_vertices(self) -> int:
        return self.frames.shape[1]


class MotionSpline:
    """Per-vertex, per-coordinate C2 cubic spline through the frames."""

    def __init__(self, seq: MotionSequence):
        self.sequence = seq
        t, y = seq.times, seq.frames
        if seq.periodic:
            t = np.append(t, t[0] + seq.period)
            y = np.concatenate([y, y[:1]])
            self.bc = "periodic"
        else:
            self.bc = "natural"
        self.knots = t
        self._spline = CubicSpline(t, y, axis=0, bc_type=self.bc,
                                   extrapolate="periodic" if seq.periodic else False)

    @property
    def coefficients(self) -> np.ndarray:
        """Piecewise coefficients, shape (4, knots - 1, n, 3), highest power first."""
        return self._spline.c

    def __call__(self, t, nu: int = 0) -> np.ndarray:
        return self._spline(np.asarray(t, dtype=np.float64), nu)

    def span(self):
        return float(self.knots[0]), float(self.knots[-1])


def build_motion_spline(seq: MotionSequence) -> MotionSpline:
    return MotionSpline(seq)


def _frame_times(spline: MotionSpline, dt: float) -> np.ndarray:
    seq = spline.sequence
    if seq.periodic:
        span = seq.period
        if dt > span:
            raise ValueError(f"dt {dt} exceeds the period {span}")
        count = int(np.floor(span / dt + 1e-9))
        if count * dt >= span - 1e-9 * dt:
            count -= 1
        return np.arange(count + 1) * dt
    t0, t1 = spline.span()
    if dt > t1 - t0:
        raise ValueError(f"dt {dt} exceeds the knot span {t1 - t0}")
    count = int(np.floor((t1 - t0) / dt + 1e-9))
    return t0 + np.arange(count + 1) * dt


def sample_motion(spline: MotionSpline, dt: float) -> MotionSequence:
    """Evaluate the spline every ``dt`` seconds.

    Periodic splines give t = 0, dt, ... up to (not including) the period;
    aperiodic ones cover the knot span starting at the first knot.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    times = _frame_times(spline, dt)
    seq = spline.sequence
    if not seq.periodic:
        times = np.minimum(times, spline.knots[-1])
    frames = spline(times)
    return MotionSequence(frames, times, seq.periodic, seq.period)


def volume_trace(seq: MotionSequence, faces) -> np.ndarray:
    """(t, enclosed volume) per frame for the sub-mesh spanned by ``faces``."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    out = np.empty((len(seq.times), 2))
    for k, (t, V) in enumerate(zip(seq.times, seq.frames)):
        mesh = TriangleMesh(V, faces)
        try:
            require_closed(mesh, "volume_trace")
        except MeshValidationError as exc:
            raise type(exc)(f"frame {k}: {exc}") from exc
        out[k] = t, enclosed_volume(mesh)
    return out


# ---------------------------------------------------------------------------
# Frame directory I/O
# ---------------------------------------------------------------------------


def read_frames_dir(path):
    """Read ``frame_####.obj`` files plus ``times.json``; returns (sequence, faces)."""
    path = Path(path)
    if not path.is_dir():
        raise MeshValidationError(f"{path} is not a directory")
    files = sorted((int(m.group(1)), p) for p in path.iterdir() if (m := FRAME_RE.search(p.name)))
    if not files:
        raise MeshValidationError(f"no frame_####.obj files in {path}")
    try:
        meta = json.loads((path / "times.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MeshValidationError(f"cannot read {path / 'times.json'}: {exc}") from exc
    meshes = [read_obj(p) for _, p in files]
    faces = meshes[0].faces
    for (_, p), m in zip(files, meshes):
        if not np.array_equal(m.faces, faces):
            raise MeshValidationError(f"{p.name}: connectivity differs from the first frame")
    seq = MotionSequence(
        [m.vertices for m in meshes],
        meta.get("times", []),
        bool(meta.get("periodic", False)),
        meta.get("period"),
    )
    return seq, faces


def write_frames_dir(path, seq: MotionSequence, faces) -> list:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(seq.times) - 1)))
    written = []
    for k, V in enumerate(seq.frames):
        p = path / f"frame_{k:0{width}d}.obj"
        write_obj(p, TriangleMesh(V, faces))
        written.append(p)
    meta = {"times": [float(t) for t in seq.times], "periodic": bool(seq.periodic), "period": seq.period}
    (path / "times.json").write_text(json.dumps(meta) + "\n")
    return written
