"""Command line pipeline: simulate, reconstruct, evaluate, compare.

Output layout under the run directory::

    manifest.json              sha256 of every file written below
    config.resolved.yaml
    ground_truth.vol
    projections.prj
    <solver>/checkpoint_0005.vol ...
    <solver>/final.vol
    <solver>/history.csv, history.png
    <solver>/metrics.csv
    <solver>/profile_<object>_<cp>.csv, asf_<object>_<cp>.csv
    <solver>/slices/<object>_<cp>.pgm
    <solver>/profile_<object>.png, asf_<object>.png

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import io as dio
from . import metrics as m
from . import plotting
from .config import ConfigError, PipelineConfig, load_config
from .phantom import PhantomError, generate_phantom, simulate_projections
from .projector import Projector
from .solvers import (
    SOLVERS,
    Problem,
    SolverError,
    cp_reconstruct,
    fp_reconstruct,
    initial_volume,
    sgp_reconstruct,
)

__all__ = [
    "ManifestError",
    "Manifest",
    "cmd_simulate",
    "cmd_reconstruct",
    "cmd_evaluate",
    "cmd_compare",
    "main",
]

log = logging.getLogger("dbtrecon")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
ABSENT = "absent"
HISTORY_COLUMNS = ("iter", "f", "LS", "TV", "lambda", "alpha", "backtracks", "budget")
METRIC_COLUMNS = ("object", "kind", "checkpoint", "metric", "value", "valid",
                  "fwhm_samples", "width_um", "fit_ok")


class ManifestError(IOError):
    pass


class Manifest:
    """Checksums of the files in a run directory, kept in ``manifest.json``."""

    NAME = "manifest.json"

    def __init__(self, root):
        self.root = Path(root)
        self.path = self.root / self.NAME
        self.files: dict = {}
        if self.path.exists():
            try:
                self.files = json.loads(self.path.read_text())["files"]
            except (ValueError, KeyError) as exc:
                raise ManifestError(f"{self.path}: unreadable manifest ({exc})") from None

    def add(self, path) -> None:
        rel = Path(path).resolve().relative_to(self.root.resolve()).as_posix()
        self.files[rel] = dio.sha256_file(path)

    def verify(self, path) -> Path:
        path = Path(path)
        rel = path.resolve().relative_to(self.root.resolve()).as_posix()
        if not path.exists():
            raise ManifestError(f"{path}: missing input")
        if rel not in self.files:
            raise ManifestError(f"{path}: not listed in {self.path}")
        if dio.sha256_file(path) != self.files[rel]:
            raise ManifestError(f"{path}: checksum does not match {self.path}")
        return path

    def save(self) -> Path:
        text = json.dumps({"files": dict(sorted(self.files.items()))}, indent=2) + "\n"
        return dio.atomic_write_text(self.path, text)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv_text(header: Sequence[str], rows, footer: Optional[str] = None) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    if footer:
        buf.write(footer + "\n")
    return buf.getvalue()


def _write(manifest: Manifest, path, text: str) -> Path:
    dio.atomic_write_text(path, text)
    manifest.add(path)
    return Path(path)


# ---------------------------------------------------------------------------
# simulate

def cmd_simulate(cfg: PipelineConfig) -> dict:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest(out)
    g = cfg.geometry
    x = generate_phantom(cfg.phantom, g.grid)
    b = simulate_projections(g, x, cfg.noise, Projector(g, workers=cfg.solver.workers))
    paths = {
        "ground_truth": dio.write_volume(out / "ground_truth.vol", x, g.grid.spacing, g.grid.origin),
        "projections": dio.write_projections(out / "projections.prj", b, g.detector.pitch,
                                             g.arc.angles_deg()),
    }
    for p in paths.values():
        man.add(p)
    resolved = dict(cfg.raw)
    resolved["output"] = str(cfg.output)
    _write(man, out / "config.resolved.yaml", yaml.safe_dump(resolved, sort_keys=True))
    man.save()
    log.info("simulated %d frames of %dx%d into %s", *b.shape, out)
    return paths


# ---------------------------------------------------------------------------
# reconstruct

def _checkpoint_name(c: int) -> str:
    return f"checkpoint_{c:04d}.vol"


def _run_solver(cfg: PipelineConfig, problem: Problem, x0, callback):
    s = cfg.solver
    if s.name == "sgp":
        return sgp_reconstruct(problem, s.options, x0=x0, callback=callback)
    if s.name == "fp":
        return fp_reconstruct(problem, s.options, x0=x0, callback=callback)
    return cp_reconstruct(problem, s.options, x0=x0, callback=callback)


def cmd_reconstruct(cfg: PipelineConfig) -> dict:
    """Run the configured solver, writing a volume at every checkpoint.

    Checkpoint ``c`` is the iterate after ``c`` objective-decreasing updates.
    For FP, ``c`` is a budget of outer plus inner iterations and maps to
    ``c // (cg_iter + 1)`` outer steps.
    """
    out = Path(cfg.output)
    man = Manifest(out)
    prj = dio.read_projections(man.verify(out / "projections.prj"))
    g = cfg.geometry
    if prj.values.shape != g.data_shape:
        raise ConfigError("geometry", f"projections have shape {prj.values.shape}, "
                                      f"geometry expects {g.data_shape}")
    s = cfg.solver
    lam = s.lam
    problem = Problem(Projector(g, workers=s.workers), prj.values, s.reg, lam=lam,
                      lambda_fallback=s.lambda_fallback)
    sdir = out / s.name
    sdir.mkdir(parents=True, exist_ok=True)
    x0 = initial_volume(problem, s.init)

    # outer iteration -> checkpoint labels written there
    due: dict = {}
    for c in s.checkpoints:
        due.setdefault(s.budget_outer(c), []).append(c)
    written = {}

    def save(k, x):
        for c in due.get(k, ()):
            p = dio.write_volume(sdir / _checkpoint_name(c), x, g.grid.spacing, g.grid.origin)
            man.add(p)
            written[c] = p
        if k in due:
            man.save()

    save(0, x0)
    try:
        result = _run_solver(cfg, problem, x0, save)
    except SolverError:
        man.save()
        raise
    missing = [c for c in s.checkpoints if c not in written]
    if missing:
        log.warning("run ended (%s) before checkpoints %s", result.termination_reason, missing)
    final = dio.write_volume(sdir / "final.vol", result.volume, g.grid.spacing, g.grid.origin)
    man.add(final)
    rows = [(h.k, h.f, h.ls, h.tv, h.lam, h.alpha, h.backtracks, h.budget) for h in result.history]
    footer = f"# termination_reason={result.termination_reason}"
    hist = _write(man, sdir / "history.csv", _csv_text(HISTORY_COLUMNS, rows, footer))
    man.add(plotting.plot_history(result.history, sdir / "history.png", title=s.name.upper()))
    man.save()
    return {"checkpoints": written, "final": final, "history": hist, "result": result}


def read_history(path):
    """Parse a history CSV into (rows, termination_reason)."""
    lines = Path(path).read_text().splitlines()
    reason = None
    body = []
    for line in lines:
        if line.startswith("# termination_reason="):
            reason = line.split("=", 1)[1]
        elif line:
            body.append(line)
    rows = list(csv.DictReader(body))
    return rows, reason


# ---------------------------------------------------------------------------
# evaluate

def _roi_metrics(vol, roi, neighbourhood, dy):
    mc = m.Roi(roi.center, roi.diameter, roi.slice)
    bg = m.Roi(roi.bg_center, roi.bg_diameter, roi.slice)
    if roi.kind == "MC":
        cnr = m.cnr_mc(vol, mc, bg)
    else:
        cnr = m.cnr_mass(vol, mc, bg)
    prof = fit = None
    if roi.profile_x is not None:
        prof = m.plane_profile(vol, roi.slice, roi.profile_x, roi.profile_y, spacing=dy)
        fit = m.fit_gaussian(prof)
    asf = None
    if roi.asf:
        asf = m.asf(vol, (*roi.center, roi.slice), roi.bg_center, neighbourhood)
    return cnr, prof, fit, asf


def evaluate_volume(vol, cfg: PipelineConfig, label) -> tuple[list, dict]:
    """Metric rows for one volume plus the raw profile/fit/ASF results per object."""
    dy = cfg.geometry.grid.dy
    rows, extras = [], {}
    for roi in cfg.metrics.rois:
        cnr, prof, fit, asf = _roi_metrics(vol, roi, cfg.metrics.asf_neighbourhood, dy)
        fw = m.fwhm(fit) if fit is not None and fit.ok else math.nan
        width = m.width_mm(fw, dy) * 1000.0 if fit is not None else math.nan
        metric = "cnr_mc" if roi.kind == "MC" else "cnr_mass"
        rows.append((roi.object, roi.kind, label, metric, cnr.value, cnr.valid, fw, width,
                     bool(fit.ok) if fit is not None else False))
        extras[roi.object] = (prof, fit, asf)
    return rows, extras


def cmd_evaluate(cfg: PipelineConfig) -> dict:
    out = Path(cfg.output)
    man = Manifest(out)
    s = cfg.solver
    sdir = out / s.name
    g = cfg.geometry
    rows = []
    profiles, fits, asfs = {}, {}, {}
    written = []
    for c in s.checkpoints:
        path = sdir / _checkpoint_name(c)
        if not path.exists():
            raise ManifestError(f"{path}: missing checkpoint volume")
        vol = dio.read_volume(man.verify(path)).values
        r, extras = evaluate_volume(vol, cfg, c)
        rows.extend(r)
        for roi in cfg.metrics.rois:
            prof, fit, asf = extras[roi.object]
            tag = f"{roi.object}_{c:04d}"
            if prof is not None:
                profiles.setdefault(roi.object, {})[c] = prof.samples
                fits.setdefault(roi.object, {})[c] = fit
                y = (np.arange(len(prof.samples)) + prof.anchor[2]) * prof.spacing
                written.append(_write(man, sdir / f"profile_{tag}.csv",
                                      _csv_text(("y_mm", "value"), zip(y, prof.samples))))
            if asf is not None:
                asfs.setdefault(roi.object, {})[c] = asf
                written.append(_write(man, sdir / f"asf_{tag}.csv",
                                      _csv_text(("z", "asf"), enumerate(asf))))
            pgm = dio.export_slice(vol, roi.slice, sdir / "slices" / f"{tag}.pgm",
                                   cfg.metrics.slice_window)
            man.add(pgm)
            written.append(pgm)
    metrics_csv = _write(man, sdir / "metrics.csv", _csv_text(METRIC_COLUMNS, rows))

    # the phantom itself, for reference
    truth_path = out / "ground_truth.vol"
    if truth_path.exists():
        truth = dio.read_volume(man.verify(truth_path)).values
        trows, _ = evaluate_volume(truth, cfg, "truth")
        written.append(_write(man, sdir / "truth_metrics.csv", _csv_text(METRIC_COLUMNS, trows)))

    for roi in cfg.metrics.rois:
        if roi.object in profiles:
            man.add(plotting.plot_profile(profiles[roi.object], fits[roi.object], g.grid.dy,
                                          sdir / f"profile_{roi.object}.png", title=roi.object))
        if roi.object in asfs:
            man.add(plotting.plot_asf(asfs[roi.object], roi.slice, sdir / f"asf_{roi.object}.png",
                                      title=roi.object))
    man.save()
    return {"metrics": metrics_csv, "rows": rows, "files": written}


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# compare

def cmd_compare(cfgs: Sequence[PipelineConfig], output) -> dict:
    """Merge metrics of several runs into one table keyed by (object, metric, checkpoint).

    One column per solver; a missing run or checkpoint shows ``absent``.
    ``best`` names the solver with the highest CNR in the row and ``spread``
    is max minus min over the present values.
    """
    rois = None
    for cfg in cfgs:
        decl = sorted((r.object, r.kind, r.center, r.slice, r.diameter) for r in cfg.metrics.rois)
        if rois is None:
            rois = decl
        elif decl != rois:
            raise ConfigError("metrics.rois", f"ROI declarations differ between runs "
                                              f"({cfgs[0].source} vs {cfg.source})")
    solvers = []
    table: dict = {}
    for cfg in cfgs:
        name = cfg.solver.name
        if name in solvers:
            name = f"{name}@{cfg.output}"
        solvers.append(name)
        path = Path(cfg.output) / cfg.solver.name / "metrics.csv"
        if not path.exists():
            log.warning("no metrics for %s at %s", name, path)
            continue
        for row in read_metrics(path):
            key = (row["object"], row["metric"], int(row["checkpoint"]))
            table.setdefault(key, {})[name] = float(row["value"])
            wkey = (row["object"], "width_um", int(row["checkpoint"]))
            if row["width_um"] not in ("", "nan"):
                table.setdefault(wkey, {})[name] = float(row["width_um"])
    for cfg in cfgs:
        for roi in cfg.metrics.rois:
            metric = "cnr_mc" if roi.kind == "MC" else "cnr_mass"
            for c in cfg.solver.checkpoints:
                table.setdefault((roi.object, metric, c), {})

    rows = []
    for key in sorted(table):
        vals = table[key]
        present = {s: v for s, v in vals.items() if math.isfinite(v)}
        cells = [vals[s] if s in vals else ABSENT for s in solvers]
        if present:
            best = max(present, key=present.get) if key[1].startswith("cnr") else ""
            spread = max(present.values()) - min(present.values())
        else:
            best, spread = "", math.nan
        rows.append((*key, *cells, best, spread))
    output = Path(output)
    output.mkdir(parents=True, exist_ok=True)
    header = ("object", "metric", "checkpoint", *solvers, "best", "spread")
    path = dio.atomic_write_text(output / "compare.csv", _csv_text(header, rows))
    figs = []
    for obj, metric in sorted({(k[0], k[1]) for k in table}):
        series = {s: {k[2]: table[k].get(s) for k in table if k[:2] == (obj, metric)} for s in solvers}
        figs.append(plotting.plot_compare(series, output / f"compare_{obj}_{metric}.png",
                                          ylabel=metric, title=obj))
    return {"table": path, "rows": rows, "solvers": solvers, "figures": figs}


# ---------------------------------------------------------------------------
# argument handling

def _parse_checkpoints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"checkpoints must be comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dbtrecon",
                                     description="Tomosynthesis simulation, reconstruction and evaluation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "reconstruct", "evaluate", "compare", "run"):
        p = sub.add_parser(name)
        p.add_argument("--config", action="append", default=None,
                       help="YAML config (repeat for compare)")
        p.add_argument("--output", help="run directory (overrides config)")
        p.add_argument("--seed", type=int, help="overrides config seed")
        p.add_argument("--solver", choices=SOLVERS, help="overrides config solver")
        p.add_argument("--checkpoints", type=_parse_checkpoints, help="e.g. 5,15,30")
        p.add_argument("--workers", type=int, help="projector threads")
    return parser


def _config_from_args(args, path) -> PipelineConfig:
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
        over["noise.seed"] = args.seed
    if args.solver:
        over["solver.name"] = args.solver
    if args.checkpoints is not None:
        over["solver.checkpoints"] = args.checkpoints
        over["solver.max_iter"] = max(args.checkpoints)
    if args.workers is not None:
        over["solver.workers"] = args.workers
    if args.output and args.command != "compare":
        over["output"] = args.output
    return load_config(path, overrides=over)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        paths = args.config or [None]
        if args.command == "compare":
            cfgs = [_config_from_args(args, p) for p in paths]
            out = Path(args.output) if args.output else Path(cfgs[0].output)
            res = cmd_compare(cfgs, out)
            print(res["table"])
            return EXIT_OK
        if len(paths) > 1:
            raise ConfigError("--config", f"{args.command} takes a single config")
        cfg = _config_from_args(args, paths[0])
        if args.command in ("simulate", "run"):
            cmd_simulate(cfg)
        if args.command in ("reconstruct", "run"):
            res = cmd_reconstruct(cfg)
            print(f"{cfg.solver.name}: {res['result'].termination_reason} after "
                  f"{res['result'].iterations} iterations")
        if args.command in ("evaluate", "run"):
            res = cmd_evaluate(cfg)
            print(res["metrics"])
        return EXIT_OK
    except (ConfigError, PhantomError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
