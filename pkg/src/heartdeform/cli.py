"""Command-line front end: ``heartdeform <command> [options]``.

Every command writes a ``*.manifest.json`` next to its outputs. Exit codes:
0 success, 2 bad input, 3 solver failure, 4 optimizer divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import warnings
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .config import fit_config, load_config
from .deformation import (
    build_energy,
    compute_biharmonic,
    deform,
    read_bhc1,
    sample_handles,
    transfer_map,
    write_bhc1,
)
from .errors import DivergenceError, MeshValidationError, SingularSystemError
from .fitting import fit_handles, write_loss_csv
from .mesh import (
    TaggedMesh,
    TemplateTags,
    read_obj,
    read_tags,
    submesh,
    surface_samples,
    vertex_samples,
    write_obj,
)
from .quality import _sig9, evaluate
from .temporal import build_motion_spline, read_frames_dir, sample_motion, volume_trace, write_frames_dir

log = logging.getLogger("heartdeform")

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_DIVERGED = 0, 2, 3, 4


class Run:
    """Collects what a command read and wrote, then writes the manifest."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.config = {
            k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command", "verbose", "threads")
        }
        self.inputs: list = []
        self.outputs: list = []
        self.t0 = time.perf_counter()

    def read(self, path):
        self.inputs.append(str(path))
        return path

    def wrote(self, path):
        self.outputs.append(str(path))
        return path

    def finish(self, manifest_path, **extra) -> None:
        doc = {
            "command": self.command,
            "config": _jsonable({**self.config, **extra}),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "version": __version__,
            "duration_s": round(time.perf_counter() - self.t0, 3),
        }
        Path(manifest_path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, Path):
        return str(x)
    if isinstance(x, np.generic):
        return x.item()
    if hasattr(x, "__dataclass_fields__"):
        return _jsonable({k: getattr(x, k) for k in x.__dataclass_fields__})
    return x


def _manifest_for(path) -> Path:
    path = Path(path)
    return path / "manifest.json" if path.is_dir() else path.with_name(path.name + ".manifest.json")


def _load_template(run: Run, mesh_path, tags_path) -> TaggedMesh:
    mesh = read_obj(run.read(mesh_path))
    if tags_path is None:
        tags = TemplateTags({"all": np.arange(mesh.n_faces)}, [])
    else:
        tags = read_tags(run.read(tags_path))
    return TaggedMesh(mesh, tags)


def _read_handles(path) -> np.ndarray:
    path = Path(path)
    try:
        P = np.load(path) if path.suffix == ".npy" else np.loadtxt(path, ndmin=2)
    except (OSError, ValueError) as exc:
        raise MeshValidationError(f"cannot read handle positions {path}: {exc}") from exc
    P = np.asarray(P, dtype=np.float64)
    # sample-handles writes "index x y z" lines
    if P.ndim == 2 and P.shape[1] == 4:
        P = P[:, 1:]
    return P


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_precompute(args) -> int:
    run = Run("precompute", args)
    tm = _load_template(run, args.mesh, args.tags)
    energy = build_energy(tm.mesh, args.energy)
    handles = sample_handles(tm.mesh, args.handles_count, args.start_index)
    bmap = compute_biharmonic(energy, handles)
    write_bhc1(run.wrote(args.out), bmap)
    log.info("W: %d x %d, nnz %d, |QW - I| %.3g", *bmap.W.shape, bmap.W.nnz, bmap.handle_identity_error())
    run.finish(_manifest_for(args.out))
    return EXIT_OK


def _fit_targets(run: Run, target_path, tm: TaggedMesh, unsupervised, config):
    """Per-structure target samples plus the target mesh used as reference (if any)."""
    names = list(tm.tags.structures)
    unsupervised = set(unsupervised)

    def samples(mesh, faces=None):
        if config.target_samples > 0:
            sub = mesh if faces is None else submesh(mesh, faces)[0]
            return surface_samples(sub, config.target_samples, config.seed)
        return vertex_samples(mesh, faces)

    path = Path(target_path)
    targets = {}
    if path.is_dir():
        for name in names:
            p = path / f"{name}.obj"
            if name in unsupervised:
                targets[name] = None
            elif p.exists():
                targets[name] = samples(read_obj(run.read(p)))
            else:
                raise MeshValidationError(f"no target file {p} for structure {name!r}")
        return targets, None
    target = read_obj(run.read(path))
    same_connectivity = target.n_faces == tm.mesh.n_faces and np.array_equal(target.faces, tm.mesh.faces)
    for name in names:
        if name in unsupervised:
            targets[name] = None
        elif len(names) == 1:
            targets[name] = samples(target)
        elif same_connectivity:
            targets[name] = samples(target, tm.tags.structures[name])
        else:
            warnings.warn(f"one target mesh shared by all {len(names)} structures", stacklevel=2)
            targets[name] = samples(target)
    return targets, target


def cmd_fit(args) -> int:
    from .plotting import plot_loss_curve

    run = Run("fit", args)
    cfg = load_config(run.read(args.config) if args.config else None)
    overrides = {
        "schedule": args.schedule,
        "iters_per_block": args.iters,
        "optimizer": args.optimizer,
        "step_size": args.step_size,
        "seed": args.seed,
    }
    config = fit_config(cfg, overrides)
    tm = _load_template(run, args.template, args.tags)
    targets, reference = _fit_targets(run, args.target, tm, cfg["fit"].get("unsupervised", []), config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = fit_handles(tm, None, targets, config)
    for b, V in enumerate(result.block_vertices):
        write_obj(run.wrote(out / f"block_{b}.obj"), tm.mesh.with_vertices(V))
    final = tm.mesh.with_vertices(result.final_vertices)
    write_obj(run.wrote(out / "final.obj"), final)
    write_loss_csv(run.wrote(out / "loss.csv"), result.loss_trace)
    if not args.no_plot:
        plot_loss_curve(result.loss_trace, run.wrote(out / "loss.svg"))
    report = evaluate(final, tm.tags, reference, None, args.eval_samples, config.seed)
    (out / "report.json").write_text(report.to_json())
    run.wrote(out / "report.json")
    doc = {
        "metrics_before": result.metrics_before,
        "metrics_after": result.metrics_after,
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "bbox_diagonal": tm.mesh.bbox_diagonal(),
        "blocks": [
            {"block": t["block"], "handles": t["handles"].tolist(), "positions": t["positions"].tolist()}
            for t in result.handle_trajectory
        ],
    }
    (out / "fit.json").write_text(json.dumps(_sig9(_jsonable(doc)), indent=2, sort_keys=True) + "\n")
    run.wrote(out / "fit.json")
    chamfer = result.metrics_after["chamfer"]
    if chamfer is not None:
        log.info("final chamfer %.6g (%.3g of bbox diagonal)", chamfer, chamfer / tm.mesh.bbox_diagonal())
    run.finish(out / "manifest.json", fit_config=config)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    run = Run("evaluate", args)
    mesh = read_obj(run.read(args.mesh))
    tags = read_tags(run.read(args.tags)) if args.tags else None
    if tags is not None:
        tags.validate(mesh)
    ref = read_obj(run.read(args.reference)) if args.reference else None
    rep = evaluate(mesh, tags, ref, args.spacing, args.samples, args.seed)
    Path(run.wrote(args.out)).write_text(rep.to_json())
    run.finish(_manifest_for(args.out))
    return EXIT_OK


def cmd_interpolate(args) -> int:
    run = Run("interpolate", args)
    seq, faces = read_frames_dir(run.read(args.frames_dir))
    if args.period is not None:
        from .temporal import MotionSequence

        seq = MotionSequence(seq.frames, seq.times, True, args.period)
    out = Path(args.out_dir)
    dense = sample_motion(build_motion_spline(seq), args.dt)
    for p in write_frames_dir(out, dense, faces):
        run.wrote(p)
    run.wrote(out / "times.json")
    if args.volume:
        trace = volume_trace(dense, faces)
        lines = ["t,volume_mm3"] + ["%.17g,%.17g" % (t, v) for t, v in trace]
        (out / "volume.csv").write_text("\n".join(lines) + "\n")
        run.wrote(out / "volume.csv")
        if not args.no_plot:
            from .plotting import plot_volume_trace

            plot_volume_trace(trace, run.wrote(out / "volume.svg"))
    run.finish(out / "manifest.json", frames=len(dense.times))
    return EXIT_OK


def cmd_deform(args) -> int:
    run = Run("deform", args)
    mesh = read_obj(run.read(args.mesh))
    bmap = read_bhc1(run.read(args.bhc))
    if bmap.source_vertex_count != mesh.n_vertices:
        raise MeshValidationError(
            f"map has {bmap.source_vertex_count} rows but mesh has {mesh.n_vertices} vertices"
        )
    P = _read_handles(run.read(args.handles))
    rest = None if args.linear else mesh.vertices
    V = deform(bmap, P, rest)
    write_obj(run.wrote(args.out), mesh.with_vertices(V))
    run.finish(_manifest_for(args.out))
    return EXIT_OK


def cmd_sample_handles(args) -> int:
    run = Run("sample-handles", args)
    mesh = read_obj(run.read(args.mesh))
    try:
        hs = sample_handles(mesh, args.count, args.start_index)
    except ValueError as exc:
        raise MeshValidationError(str(exc)) from exc
    lines = ["%d %.17g %.17g %.17g" % (i, *mesh.vertices[i]) for i in hs.indices]
    Path(run.wrote(args.out)).write_text("\n".join(lines) + "\n")
    run.finish(_manifest_for(args.out))
    return EXIT_OK


def cmd_transfer(args) -> int:
    run = Run("transfer", args)
    bmap = read_bhc1(run.read(args.bhc))
    source = read_obj(run.read(args.source))
    target = read_obj(run.read(args.target))
    write_bhc1(run.wrote(args.out), transfer_map(bmap, source, target))
    run.finish(_manifest_for(args.out))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _int_list(text):
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected a list of integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="heartdeform", description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    ap.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP threads (default: all)")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("precompute", help="biharmonic coordinates to a BHC1 file")
    p.add_argument("--mesh", required=True)
    p.add_argument("--tags")
    p.add_argument("--handles-count", type=int, required=True)
    p.add_argument("--start-index", type=int, default=0)
    p.add_argument("--energy", choices=["cotan", "uniform"], default="cotan")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_precompute)

    p = sub.add_parser("fit", help="fit a template to a target by handle optimization")
    p.add_argument("--template", required=True)
    p.add_argument("--tags")
    p.add_argument("--target", required=True, help="target OBJ, or a directory of <structure>.obj")
    p.add_argument("--config", help="TOML or JSON with [fit] and [loss] sections")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--schedule", type=_int_list)
    p.add_argument("--iters", type=int)
    p.add_argument("--optimizer", choices=["adaptive_moments", "gradient_descent_momentum"])
    p.add_argument("--step-size", type=float)
    p.add_argument("--eval-samples", type=int, default=100_000)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", help="quality report for a mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--tags")
    p.add_argument("--reference")
    p.add_argument("--spacing", type=float)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("interpolate", help="cubic-spline motion between frames")
    p.add_argument("--frames-dir", required=True)
    p.add_argument("--dt", type=float, required=True)
    p.add_argument("--period", type=float, help="treat the sequence as periodic with this period")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--volume", action="store_true", help="write volume.csv (and volume.svg)")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("deform", help="apply handle positions through a BHC1 map")
    p.add_argument("--mesh", required=True, help="rest mesh the map was computed on")
    p.add_argument("--bhc", required=True)
    p.add_argument("--handles", required=True, help="c x 3 text or .npy handle positions")
    p.add_argument("--linear", action="store_true", help="plain W P without the rest residual")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_deform)

    p = sub.add_parser("sample-handles", help="farthest-point handle indices")
    p.add_argument("--mesh", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--start-index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample_handles)

    p = sub.add_parser("transfer", help="carry a BHC1 map onto another template")
    p.add_argument("--bhc", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transfer)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        limits = threadpool_limits(args.threads)
    else:
        limits = nullcontext()
    try:
        with limits:
            return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SingularSystemError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
