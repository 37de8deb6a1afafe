"""Pipeline configuration: YAML file to validated dataclasses.

Every validation error names the offending field and, when the value came
from a file, the line it was read from.
"""
from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from .geometry import DetectorSpec, Geometry, GeometryError, SourceArc, VoxelGrid, build_geometry
from .phantom import Cluster, NoiseSpec, PhantomError, PhantomSpec, SphereObject
from .regularizers import RegularizerConfig
from .solvers import SOLVERS, CpOptions, FpOptions, SgpOptions

__all__ = [
    "ConfigError",
    "RoiSpec",
    "MetricsSpec",
    "SolverSpec",
    "PipelineConfig",
    "DEFAULT_CONFIG",
    "load_config",
    "parse_config",
]

# fixed lambda defaults per solver when the config leaves it out
DEFAULT_LAMBDA = {"sgp": 0.005, "cp": 0.005, "fp": 0.001}

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "output": "out",
    "geometry": {
        "detector": {"n_u": 96, "n_v": 96, "pitch": 0.12},
        "arc": {"n_angles": 11, "span_deg": 30.0, "height": 700.0},
        "grid": {"shape": [64, 64, 16], "spacing": [0.09, 0.09, 1.0]},
    },
    "phantom": {
        "background": 0.05,
        "texture": 0.1,
        "objects": [
            {"name": "mc230", "kind": "MC", "voxel": [19.5, 32, 8], "diameter_um": 230.0,
             "contrast": 0.5},
            {"name": "ms1800", "kind": "MS", "voxel": [44, 32, 6], "diameter_um": 1800.0,
             "contrast": 0.03},
        ],
    },
    "noise": {"model": "gaussian", "sigma": 0.002},
    "solver": {
        "name": "sgp",
        "lambda": "auto",
        "max_iter": 30,
        "tol": 0.0,
        "checkpoints": [5, 15, 30],
        "init": "uniform",
    },
    "metrics": {
        "rois": [
            {"object": "mc230", "kind": "MC", "center": [20, 32], "slice": 8, "diameter": 5,
             "background": {"center": [32, 12], "diameter": 20},
             "profile": {"x": 20, "y_range": [24, 41]}, "asf": True},
            {"object": "ms1800", "kind": "MS", "center": [44, 32], "slice": 6, "diameter": 15,
             "background": {"center": [20, 12], "diameter": 20}},
        ],
    },
}


class ConfigError(ValueError):
    def __init__(self, field: str, message: str, line: Optional[int] = None):
        self.field = field
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{field}{where}: {message}")


# ---------------------------------------------------------------------------
# YAML loading with line numbers

def _construct(node, path: str, lines: dict):
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for key_node, value_node in node.value:
            key = key_node.value
            if key in out:
                raise ConfigError(f"{path}.{key}".lstrip("."), "duplicate key",
                                  key_node.start_mark.line + 1)
            out[key] = _construct(value_node, f"{path}.{key}".lstrip("."), lines)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_construct(v, f"{path}[{i}]", lines) for i, v in enumerate(node.value)]
    return _SCALAR_LOADER.construct_object(node, deep=True)


_SCALAR_LOADER = yaml.SafeLoader("")


def _load_yaml(text: str, source: str = "<config>"):
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(source, f"invalid YAML: {getattr(exc, 'problem', exc)}",
                          mark.line + 1 if mark else None) from None
    lines: dict = {}
    if node is None:
        return {}, lines
    data = _construct(node, "", lines)
    if not isinstance(data, dict):
        raise ConfigError(source, "top level must be a mapping", 1)
    return data, lines


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


# ---------------------------------------------------------------------------
# typed accessors

class _Reader:
    def __init__(self, data: dict, lines: dict):
        self.data = data
        self.lines = lines

    def line(self, path: str) -> Optional[int]:
        while path:
            if path in self.lines:
                return self.lines[path]
            path = re.sub(r"(\.[^.\[\]]+|\[\d+\])$", "", path)
        return None

    def error(self, path: str, message: str) -> ConfigError:
        return ConfigError(path, message, self.line(path))

    def get(self, path: str, default: Any = ...):
        node: Any = self.data
        for part in re.findall(r"[^.\[\]]+|\[\d+\]", path):
            if part.startswith("["):
                i = int(part[1:-1])
                found = isinstance(node, list) and i < len(node)
            else:
                i = part
                found = isinstance(node, dict) and part in node
            if not found:
                if default is ...:
                    raise self.error(path, "missing required field")
                return default
            node = node[i]
        return node

    def number(self, path, default: Any = ..., *, integer=False, positive=False,
               nonneg=False, value=None):
        v = self.get(path, default) if value is None else value
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise self.error(path, f"expected a number, got {v!r}")
        if integer:
            if float(v) != int(v):
                raise self.error(path, f"expected an integer, got {v!r}")
            v = int(v)
        else:
            v = float(v)
        if positive and not v > 0:
            raise self.error(path, f"must be positive, got {v}")
        if nonneg and v < 0:
            raise self.error(path, f"must be non-negative, got {v}")
        return v

    def vector(self, path, n, default: Any = ..., *, integer=False, value=None):
        v = self.get(path, default) if value is None else value
        if v is None:
            return None
        if not isinstance(v, (list, tuple)) or len(v) != n:
            raise self.error(path, f"expected a list of {n} numbers, got {v!r}")
        return tuple(self.number(f"{path}[{i}]", value=x, integer=integer) for i, x in enumerate(v))

    def choice(self, path, options, default: Any = ...):
        v = self.get(path, default)
        if v not in options:
            raise self.error(path, f"must be one of {', '.join(map(str, options))}; got {v!r}")
        return v


# ---------------------------------------------------------------------------
# typed sections

@dataclass(frozen=True)
class RoiSpec:
    object: str
    kind: str
    center: tuple
    slice: int
    diameter: float
    bg_center: tuple
    bg_diameter: float
    profile_x: Optional[int] = None
    profile_y: Optional[tuple] = None
    asf: bool = False


@dataclass(frozen=True)
class MetricsSpec:
    rois: tuple = ()
    asf_neighbourhood: str = "cross"
    slice_window: Optional[tuple] = None


@dataclass(frozen=True)
class SolverSpec:
    name: str
    lam: Union[float, str]
    max_iter: int
    tol: float
    checkpoints: tuple
    init: str
    reg: RegularizerConfig
    options: Any
    lambda_fallback: float = 0.005
    workers: int = 1

    def budget_outer(self, checkpoint: int) -> int:
        """Outer iterations that fit a checkpoint budget (differs from ``checkpoint`` for FP only)."""
        if self.name == "fp":
            return checkpoint // self.options.cost_per_outer
        return checkpoint


@dataclass(frozen=True)
class PipelineConfig:
    seed: int
    output: Path
    geometry: Geometry
    phantom: PhantomSpec
    noise: NoiseSpec
    solver: SolverSpec
    metrics: MetricsSpec
    raw: dict = field(repr=False, compare=False, default_factory=dict)
    source: Optional[str] = None


def _geometry(r: _Reader) -> Geometry:
    p = "geometry"
    try:
        n_u = r.number(f"{p}.detector.n_u", integer=True)
        n_v = r.number(f"{p}.detector.n_v", integer=True)
        pitch = r.number(f"{p}.detector.pitch", positive=True)
        origin = r.vector(f"{p}.detector.origin", 3, None)
        det = (DetectorSpec(n_u, n_v, pitch, origin) if origin is not None
               else DetectorSpec.centered(n_u, n_v, pitch))
    except GeometryError as exc:
        raise r.error(f"{p}.detector", str(exc)) from None
    try:
        n_angles = r.number(f"{p}.arc.n_angles", integer=True)
        span = r.number(f"{p}.arc.span_deg")
        if not 0.0 < span < 180.0:
            raise r.error(f"{p}.arc.span_deg", f"must lie strictly between 0 and 180 degrees, got {span}")
        height = r.number(f"{p}.arc.height", positive=True)
        arc = SourceArc(n_angles, span, height, r.vector(f"{p}.arc.center", 3, None))
    except GeometryError as exc:
        raise r.error(f"{p}.arc", str(exc)) from None
    shape = r.vector(f"{p}.grid.shape", 3, integer=True)
    spacing = r.vector(f"{p}.grid.spacing", 3)
    origin = r.vector(f"{p}.grid.origin", 3, None)
    try:
        grid = (VoxelGrid(*shape, *spacing, origin) if origin is not None
                else VoxelGrid.centered(shape, spacing, det.center))
    except GeometryError as exc:
        raise r.error(f"{p}.grid", str(exc)) from None
    try:
        return build_geometry(det, arc, grid)
    except GeometryError as exc:
        raise r.error(p, str(exc)) from None


def _object_center(r: _Reader, path: str, grid: VoxelGrid):
    # either a physical centre in mm or fractional voxel indices
    if r.get(f"{path}.center", None) is not None:
        return r.vector(f"{path}.center", 3)
    v = r.vector(f"{path}.voxel", 3)
    return tuple(grid.origin[a] + (v[a] + 0.5) * grid.spacing[a] for a in range(3))


def _phantom(r: _Reader, grid: VoxelGrid, seed: int) -> PhantomSpec:
    p = "phantom"
    objects, clusters = [], []
    for i, _ in enumerate(r.get(f"{p}.objects", [])):
        q = f"{p}.objects[{i}]"
        try:
            objects.append(SphereObject(r.choice(f"{q}.kind", ("MC", "MS")),
                                        _object_center(r, q, grid),
                                        r.number(f"{q}.diameter_um", positive=True),
                                        r.number(f"{q}.contrast")))
        except PhantomError as exc:
            raise r.error(q, str(exc)) from None
    for i, _ in enumerate(r.get(f"{p}.clusters", [])):
        q = f"{p}.clusters[{i}]"
        try:
            clusters.append(Cluster(_object_center(r, q, grid),
                                    r.number(f"{q}.count", integer=True, positive=True),
                                    r.number(f"{q}.spacing", positive=True),
                                    r.number(f"{q}.diameter_um", positive=True),
                                    r.number(f"{q}.contrast", positive=True)))
        except PhantomError as exc:
            raise r.error(q, str(exc)) from None
    return PhantomSpec(background=r.number(f"{p}.background", 0.05, nonneg=True),
                       texture=r.number(f"{p}.texture", 0.1, nonneg=True),
                       texture_seed=r.number(f"{p}.texture_seed", seed, integer=True),
                       texture_terms=r.number(f"{p}.texture_terms", 4, integer=True, positive=True),
                       objects=tuple(objects), clusters=tuple(clusters),
                       supersample=r.number(f"{p}.supersample", 1, integer=True, positive=True))


def _noise(r: _Reader, seed: int) -> NoiseSpec:
    p = "noise"
    return NoiseSpec(model=r.choice(f"{p}.model", ("none", "gaussian", "poisson"), "none"),
                     sigma=r.number(f"{p}.sigma", 0.0, nonneg=True),
                     i0=r.number(f"{p}.i0", 1e5, positive=True),
                     seed=r.number(f"{p}.seed", seed, integer=True))


_OPTION_TYPES = {"sgp": SgpOptions, "fp": FpOptions, "cp": CpOptions}


def _solver(r: _Reader) -> SolverSpec:
    p = "solver"
    name = r.choice(f"{p}.name", SOLVERS)
    lam = r.get(f"{p}.lambda", DEFAULT_LAMBDA[name])
    if lam != "auto":
        lam = r.number(f"{p}.lambda", value=lam, nonneg=True)
    max_iter = r.number(f"{p}.max_iter", 30, integer=True, nonneg=True)
    tol = r.number(f"{p}.tol", 0.0, nonneg=True)
    cps = r.get(f"{p}.checkpoints", [])
    if not isinstance(cps, list):
        raise r.error(f"{p}.checkpoints", "expected a list of iteration counts")
    cps = tuple(r.number(f"{p}.checkpoints[{i}]", value=c, integer=True, positive=True)
                for i, c in enumerate(cps))
    if any(b <= a for a, b in zip(cps, cps[1:])):
        raise r.error(f"{p}.checkpoints", f"must be strictly ascending, got {list(cps)}")
    if cps and cps[-1] > max_iter:
        raise r.error(f"{p}.checkpoints", f"last checkpoint {cps[-1]} exceeds max_iter {max_iter}")
    init = r.choice(f"{p}.init", ("backprojection", "uniform", "zeros"), "backprojection")
    weights = r.vector(f"{p}.weights", 3, (1.0, 1.0, 1.0))
    try:
        reg = RegularizerConfig(beta=r.number(f"{p}.beta", 0.001, positive=True), weights=weights)
    except ValueError as exc:
        raise r.error(f"{p}.beta", str(exc)) from None

    opts = dict(r.get(f"{p}.options", {}) or {})
    cls = _OPTION_TYPES[name]
    if name == "fp":
        opts.setdefault("cg_iter", 4)
        opts.setdefault("outer_iter", max_iter // (int(opts["cg_iter"]) + 1))
    else:
        opts.setdefault("max_iter", max_iter)
    opts.setdefault("tol", tol)
    fields = set(cls.__dataclass_fields__)
    for key in opts:
        if key not in fields:
            raise r.error(f"{p}.options.{key}", f"unknown {name} option; allowed: {', '.join(sorted(fields))}")
    try:
        options = cls(**opts)
    except (TypeError, ValueError) as exc:
        raise r.error(f"{p}.options", str(exc)) from None
    return SolverSpec(name=name, lam=lam, max_iter=max_iter, tol=tol, checkpoints=cps, init=init,
                      reg=reg, options=options,
                      lambda_fallback=r.number(f"{p}.lambda_fallback", 0.005, positive=True),
                      workers=r.number(f"{p}.workers", 1, integer=True, positive=True))


def _pair(r: _Reader, path: str):
    return r.vector(path, 2, integer=True)


def _metrics(r: _Reader, grid: VoxelGrid) -> MetricsSpec:
    p = "metrics"
    rois = []
    names = set()
    for i, _ in enumerate(r.get(f"{p}.rois", [])):
        q = f"{p}.rois[{i}]"
        name = str(r.get(f"{q}.object"))
        kind = r.choice(f"{q}.kind", ("MC", "MS"))
        if (name, kind) in names:
            raise r.error(f"{q}.object", f"duplicate ROI for {name!r}")
        names.add((name, kind))
        k = r.number(f"{q}.slice", integer=True)
        if not 0 <= k < grid.n_z:
            raise r.error(f"{q}.slice", f"slice {k} outside 0..{grid.n_z - 1}")
        px = r.get(f"{q}.profile.x", None)
        rois.append(RoiSpec(
            object=name, kind=kind, center=_pair(r, f"{q}.center"), slice=k,
            diameter=r.number(f"{q}.diameter", positive=True),
            bg_center=_pair(r, f"{q}.background.center"),
            bg_diameter=r.number(f"{q}.background.diameter", positive=True),
            profile_x=None if px is None else r.number(f"{q}.profile.x", integer=True),
            profile_y=None if px is None else _pair(r, f"{q}.profile.y_range"),
            asf=bool(r.get(f"{q}.asf", False))))
    return MetricsSpec(tuple(rois),
                       r.choice(f"{p}.asf_neighbourhood", ("cross", "disk"), "cross"),
                       r.vector(f"{p}.slice_window", 2, None))


def parse_config(data: dict, lines: Optional[dict] = None, source: Optional[str] = None,
                 overrides: Optional[dict] = None) -> PipelineConfig:
    """Validate a raw mapping (already merged with defaults) into a :class:`PipelineConfig`."""
    data = copy.deepcopy(data)
    for key, value in (overrides or {}).items():
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    r = _Reader(data, lines or {})
    seed = r.number("seed", 0, integer=True, nonneg=True)
    geom = _geometry(r)
    cfg = PipelineConfig(seed=seed, output=Path(str(r.get("output", "out"))), geometry=geom,
                         phantom=_phantom(r, geom.grid, seed), noise=_noise(r, seed),
                         solver=_solver(r), metrics=_metrics(r, geom.grid), raw=data, source=source)
    return cfg


_REPLACED = ("phantom", "metrics")


def load_config(path=None, overrides: Optional[dict] = None) -> PipelineConfig:
    """Read a YAML file on top of :data:`DEFAULT_CONFIG` (defaults only when ``path`` is None)."""
    if path is None:
        return parse_config(DEFAULT_CONFIG, overrides=overrides)
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc.strerror}") from None
    user, lines = _load_yaml(text, str(path))
    # object and ROI lists replace the defaults whole so stale entries never leak in
    base = {k: v for k, v in DEFAULT_CONFIG.items() if k not in _REPLACED or k not in user}
    data = _merge(base, user)
    return parse_config(data, lines, str(path), overrides)
