"""Experiment configuration: INI-style sections read as dotted keys.

A file looks like::

    [geometry]
    n_r = 32
    n_phi = 64

    [potentials]
    p = 0.5 + 0.3*x

Keys are addressed as ``section.key`` in error messages and in
``--set`` overrides. Expressions may use ``x``, ``y``, ``rho``, ``phi``,
``pi`` and the usual numpy functions.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from dynbc.errors import PreconditionError
from dynbc.forward import TimeWindow
from dynbc.grid import PolarGrid, State, build_grid
from dynbc.model import AdmissibleBounds, Coefficients, PotentialPair, check_admissible

OUT_ENV = "DYNBC_OUT"

_FUNCS = {
    name: getattr(np, name)
    for name in ("sin", "cos", "tan", "exp", "log", "sqrt", "abs", "tanh", "sinh", "cosh", "arctan2", "minimum", "maximum")
}
_FUNCS["pi"] = np.pi


class ConfigError(PreconditionError):
    """Malformed or inconsistent configuration; the message names the key path."""


def expression(src: str, key: str = "expression"):
    """Compile a field expression into a callable of ``(x, y)``."""
    try:
        code = compile(src, f"<{key}>", "eval")
    except SyntaxError as exc:
        raise ConfigError(f"{key}: cannot parse expression {src!r}: {exc.msg}") from None
    allowed = set(_FUNCS) | {"x", "y", "rho", "phi"}
    bad = sorted(set(code.co_names) - allowed)
    if bad:
        raise ConfigError(f"{key}: unknown names {', '.join(bad)} in {src!r}")

    def f(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        ns = dict(_FUNCS, x=x, y=y, rho=np.hypot(x, y), phi=np.arctan2(y, x))
        return np.broadcast_to(np.asarray(eval(code, {"__builtins__": {}}, ns), dtype=float), x.shape)

    f.source = src
    return f


@dataclass
class Geometry:
    n_r: int = 32
    n_phi: int = 64
    omega_radius: float = 0.3


@dataclass
class Window:
    T: float = 1.0
    t0: float = 0.25
    t1: float = 0.75


@dataclass
class Solver:
    dt: float = 0.0
    scheme: str = "implicit_euler"


@dataclass
class CoefficientSpec:
    preset: str = "variable"
    a: str = ""
    A11: str = ""
    A12: str = ""
    A22: str = ""
    B1: str = ""
    B2: str = ""
    D: str = ""
    b: str = ""
    beta: float = 0.5


@dataclass
class Potentials:
    p: str = "0.5 + 0.3*x"
    q: str = "0.4 + 0.2*x"


@dataclass
class Initial:
    Y0: str = "1.2 + 0.3*x*y + 0.2*y"


@dataclass
class Bounds:
    r: float = 0.5
    R: float = 2.0


@dataclass
class Carleman:
    lambda_: float = 2.0
    s: tuple[float, ...] = (16.0, 32.0, 64.0)
    n_fields: int = 50
    n_r: int = 16
    n_phi: int = 32
    dt: float = 0.0
    seed: int = 7


@dataclass
class Inversion:
    reg_beta: float = 0.0
    reg_kind: str = "gradient"
    max_iter: int = 300
    grad_tol: float = 1e-10
    noise: float = 0.0
    betas: tuple[float, ...] = tuple(10.0 ** (k / 2) for k in range(2, -9, -1))
    tau: float = 1.1
    seed: int = 11


@dataclass
class Harness:
    n_samples: int = 50
    scales: tuple[float, ...] = (1e-1, 1e-2, 1e-3)
    n_r: int = 16
    n_phi: int = 32
    max_mode: int = 8
    seed: int = 3


@dataclass
class Output:
    dir: str = "dynbc_out"


_SECTIONS = {
    "geometry": Geometry,
    "window": Window,
    "solver": Solver,
    "coefficients": CoefficientSpec,
    "potentials": Potentials,
    "initial": Initial,
    "bounds": Bounds,
    "carleman": Carleman,
    "inversion": Inversion,
    "harness": Harness,
    "output": Output,
}

PRESETS: dict[str, dict[str, str]] = {
    "default": {},
    # no reaction and constant data: the semigroup must keep the state at 1
    "markov": {"potentials.p": "0", "potentials.q": "0", "initial.Y0": "1", "bounds.r": "1", "bounds.R": "1"},
    "quick": {
        "geometry.n_r": "16",
        "geometry.n_phi": "32",
        "carleman.n_fields": "8",
        "harness.n_samples": "8",
        "inversion.max_iter": "150",
    },
}


def _attr(name: str) -> str:
    return "lambda_" if name == "lambda" else name


@dataclass
class ExperimentConfig:
    geometry: Geometry = field(default_factory=Geometry)
    window: Window = field(default_factory=Window)
    solver: Solver = field(default_factory=Solver)
    coefficients: CoefficientSpec = field(default_factory=CoefficientSpec)
    potentials: Potentials = field(default_factory=Potentials)
    initial: Initial = field(default_factory=Initial)
    bounds: Bounds = field(default_factory=Bounds)
    carleman: Carleman = field(default_factory=Carleman)
    inversion: Inversion = field(default_factory=Inversion)
    harness: Harness = field(default_factory=Harness)
    output: Output = field(default_factory=Output)
    preset: str = "default"

    # ------------------------------------------------------------------
    # parsing
    # ------------------------------------------------------------------
    @classmethod
    def from_pairs(cls, pairs: dict[str, str], base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        """Apply ``{"section.key": "value"}`` overrides to ``base`` (default values)."""
        cfg = base or cls()
        for path, raw in pairs.items():
            cfg = cfg.with_value(path, raw)
        return cfg

    def with_value(self, path: str, raw: str) -> "ExperimentConfig":
        if path == "experiment.preset":
            return self.with_preset(raw.strip())
        sec, _, key = path.partition(".")
        if sec not in _SECTIONS or not key:
            raise ConfigError(f"{path}: unknown section {sec!r}")
        block = getattr(self, sec)
        names = {f.name: f for f in fields(block)}
        attr = _attr(key)
        if attr not in names:
            raise ConfigError(f"{path}: unknown key")
        value = _convert(path, raw, names[attr].type)
        return replace(self, **{sec: replace(block, **{attr: value})})

    def with_preset(self, name: str) -> "ExperimentConfig":
        if name not in PRESETS:
            raise ConfigError(f"experiment.preset: unknown preset {name!r}; expected one of {', '.join(PRESETS)}")
        cfg = replace(self, preset=name)
        for path, raw in PRESETS[name].items():
            cfg = cfg.with_value(path, raw)
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike | None = None, overrides: dict[str, str] | None = None) -> "ExperimentConfig":
        """Read a configuration file (optional), apply ``overrides`` and validate."""
        pairs: dict[str, str] = {}
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
            parser.optionxform = str
            try:
                with open(path) as fh:
                    parser.read_file(fh)
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
            except configparser.Error as exc:
                raise ConfigError(f"malformed config {path}: {exc.message.splitlines()[0]}") from None
            # the preset goes first so explicit keys override it
            if parser.has_option("experiment", "preset"):
                pairs["experiment.preset"] = parser.get("experiment", "preset")
            for sec in parser.sections():
                for key, val in parser.items(sec):
                    if sec == "experiment" and key != "preset":
                        raise ConfigError(f"experiment.{key}: unknown key")
                    pairs.setdefault(f"{sec}.{key}", val)
        cfg = cls.from_pairs(pairs)
        if overrides:
            cfg = cls.from_pairs(overrides, cfg)
        cfg.validate()
        return cfg

    # ------------------------------------------------------------------
    # validation and construction
    # ------------------------------------------------------------------
    def validate(self) -> None:
        grid = self.make_grid()
        w = self.make_window()
        try:
            w.steps(self.dt)
        except PreconditionError as exc:
            raise ConfigError(f"solver.dt: {exc}") from None
        if self.solver.scheme not in ("implicit_euler", "crank_nicolson"):
            raise ConfigError("solver.scheme: expected implicit_euler or crank_nicolson")
        b = self.bounds
        if not 0 < b.r <= b.R:
            raise ConfigError("bounds: require 0 < r <= R")
        if self.carleman.lambda_ < 1:
            raise ConfigError("carleman.lambda: must be at least 1")
        if not self.carleman.s or min(self.carleman.s) <= 0:
            raise ConfigError("carleman.s: need positive values")
        inv = self.inversion
        if inv.reg_beta < 0 or inv.noise < 0:
            raise ConfigError("inversion: reg_beta and noise must be nonnegative")
        if inv.reg_kind not in ("L2", "gradient"):
            raise ConfigError("inversion.reg_kind: expected L2 or gradient")
        if self.harness.n_samples < 1 or self.carleman.n_fields < 1:
            raise ConfigError("harness.n_samples: need at least one sample")
        for expr_path in ("potentials.p", "potentials.q", "initial.Y0"):
            sec, key = expr_path.split(".")
            expression(getattr(getattr(self, sec), key), expr_path)
        self.make_coefficients(grid)

    def make_window(self) -> TimeWindow:
        w = self.window
        try:
            return TimeWindow(w.T, w.t0, w.t1)
        except PreconditionError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def dt(self) -> float:
        return self.solver.dt if self.solver.dt > 0 else self.make_window().default_dt()

    def make_grid(self, n_r: int | None = None, n_phi: int | None = None) -> PolarGrid:
        g = self.geometry
        try:
            return build_grid(n_r or g.n_r, n_phi or g.n_phi, g.omega_radius)
        except PreconditionError as exc:
            raise ConfigError(f"geometry: {exc}") from None

    def make_coefficients(self, grid: PolarGrid) -> Coefficients:
        c = self.coefficients
        custom = [k for k in ("a", "A11", "A12", "A22", "B1", "B2", "D", "b") if getattr(c, k)]
        if not custom:
            try:
                coeffs = Coefficients.preset(grid, c.preset)
            except PreconditionError as exc:
                raise ConfigError(f"coefficients.preset: {exc}") from None
        else:
            e = {k: expression(getattr(c, k), f"coefficients.{k}") for k in custom}
            A = None
            if any(k in e for k in ("A11", "A12", "A22")):
                if "a" in e:
                    raise ConfigError("coefficients.a: give either a or A11/A12/A22")
                one = expression("1")
                zero = expression("0")
                a11, a12, a22 = e.get("A11", one), e.get("A12", zero), e.get("A22", one)
                A = lambda x, y: (a11(x, y), a12(x, y), a22(x, y))  # noqa: E731
            B = None
            if "B1" in e or "B2" in e:
                zero = expression("0")
                b1, b2 = e.get("B1", zero), e.get("B2", zero)
                B = lambda x, y: (b1(x, y), b2(x, y))  # noqa: E731
            coeffs = Coefficients.from_functions(
                grid, a=e.get("a", 1.0), A=A, B=B, D=e.get("D", 1.0), b=e.get("b", 0.0), beta=c.beta
            )
        try:
            coeffs.validate(grid)
        except PreconditionError as exc:
            raise ConfigError(f"coefficients: {exc}") from None
        return coeffs

    def make_bounds(self) -> AdmissibleBounds:
        return AdmissibleBounds(self.bounds.r, self.bounds.R)

    def make_potentials(self, grid: PolarGrid) -> PotentialPair:
        p = self.potentials
        pq = PotentialPair.from_functions(grid, expression(p.p, "potentials.p"), expression(p.q, "potentials.q"))
        rep = check_admissible(grid, pq, self.make_bounds())
        if not rep:
            raise ConfigError("potentials: " + "; ".join(rep.violations))
        return pq

    def make_initial(self, grid: PolarGrid) -> State:
        Y0 = State.from_function(grid, expression(self.initial.Y0, "initial.Y0"))
        rep = check_admissible(grid, Y0, self.make_bounds())
        if not rep:
            raise ConfigError("initial.Y0: " + "; ".join(rep.violations))
        return Y0

    def output_dir(self, override: str | None = None) -> Path:
        """``override``, else ``$DYNBC_OUT``, else ``output.dir``."""
        return Path(override or os.environ.get(OUT_ENV) or self.output.dir)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(
            self,
            carleman=replace(self.carleman, seed=seed),
            inversion=replace(self.inversion, seed=seed),
            harness=replace(self.harness, seed=seed),
        )

    def to_pairs(self) -> dict[str, str]:
        out = {"experiment.preset": self.preset}
        for sec in _SECTIONS:
            block = getattr(self, sec)
            for f in fields(block):
                key = "lambda" if f.name == "lambda_" else f.name
                v = getattr(block, f.name)
                out[f"{sec}.{key}"] = ", ".join(repr(x) for x in v) if isinstance(v, tuple) else str(v)
        return out


def _convert(path: str, raw: str, typ: Any):
    raw = raw.strip()
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ.startswith("tuple"):
            return tuple(float(v) for v in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{path}: cannot read {raw!r} as {typ}") from None
    return raw
