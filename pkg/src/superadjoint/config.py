"""Scenario files: INI-style text parsed with :mod:`configparser`.

Example::

    [problem]
    name = double-integrator
    seed = 0

    [grid]
    t0 = 0
    T = 1
    n_steps = 400

    [control_set]
    kind = box
    lower = -1
    upper = 1

    [initial]
    x0 = 0, 0

    [params]
    target = 0.25, 0.4

A ``[meanfield]`` section with ``N`` and ``init = gaussian(mean, std, seed)``
or ``init = grid(lo, hi)`` turns the file into a particle scenario; ``name``
then refers to the mean-field registry.  Atom control sets use
``kind = atoms`` and ``atoms = -1; 0; 1`` (points separated by ``;``,
coordinates by ``,``).
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import scenarios
from .descent import DescentConfig
from .errors import ConfigError
from .problem import Atoms, Box, Control, TimeGrid

_INIT = re.compile(r"^\s*(gaussian|grid)\s*\((.*)\)\s*$")


def _floats(text: str, where: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.replace(" ", "").split(",") if v], dtype=float)
    except ValueError:
        raise ConfigError(f"{where}: expected comma-separated numbers, got {text!r}") from None


def _require(cp: configparser.ConfigParser, section: str, key: str, where: str) -> str:
    if not cp.has_section(section):
        raise ConfigError(f"{where}: missing section [{section}]")
    if not cp.has_option(section, key):
        raise ConfigError(f"{where}: missing key {key!r} in [{section}]")
    return cp.get(section, key)


def _number(text: str, kind, where: str):
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"{where}: expected {kind.__name__}, got {text!r}") from None


@dataclass
class MeanFieldBlock:
    particles: int
    init: str
    args: tuple


@dataclass
class Scenario:
    """Parsed scenario file.

    Attributes
    ----------
    name : registry name of the built-in problem.
    grid, control_set : discretization and admissible set.
    x0 : initial state (classical scenarios only).
    params : raw ``[params]`` values as float arrays.
    descent : settings for the feedback descent.
    initial_control : constant value for the starting control.
    meanfield : particle block, or None for an ODE scenario.
    """

    name: str
    grid: TimeGrid
    control_set: object
    x0: Optional[np.ndarray]
    params: dict
    descent: DescentConfig
    initial_control: Optional[np.ndarray] = None
    meanfield: Optional[MeanFieldBlock] = None
    seed: int = 0
    source: str = ""
    scenario_id: str = field(default="")

    @property
    def is_mean_field(self) -> bool:
        return self.meanfield is not None

    def with_steps(self, n_steps: int) -> "Scenario":
        out = _copy(self)
        out.grid = self.grid.with_steps(int(n_steps))
        return out

    def with_particles(self, particles: int) -> "Scenario":
        if self.meanfield is None:
            raise ConfigError(f"{self.source}: --particles needs a [meanfield] section")
        out = _copy(self)
        out.meanfield = MeanFieldBlock(int(particles), self.meanfield.init, self.meanfield.args)
        return out

    def with_seed(self, seed: int) -> "Scenario":
        out = _copy(self)
        out.seed = int(seed)
        mf = out.meanfield
        if mf is not None and mf.init == "gaussian":
            # an explicit seed flag overrides the one inside ``init``
            out.meanfield = MeanFieldBlock(mf.particles, mf.init, mf.args[:2])
        return out

    def ensemble(self) -> np.ndarray:
        mf = self.meanfield
        dim = self.control_set.dim
        if mf.init == "gaussian":
            mean, std = mf.args[0], mf.args[1]
            seed = int(mf.args[2]) if len(mf.args) > 2 else self.seed
            return scenarios.gaussian_ensemble(mf.particles, dim, mean, std, seed)
        return scenarios.grid_ensemble(mf.particles, mf.args[0], mf.args[1])

    def problem(self):
        """Instantiate the registered problem."""
        try:
            if self.is_mean_field:
                return scenarios.build_mean_field(self.name, self.grid, self.control_set,
                                                  self.ensemble(), self.params)
            return scenarios.build(self.name, self.grid, self.control_set, self.x0, self.params)
        except KeyError as exc:
            raise ConfigError(f"{self.source}: {exc.args[0]}") from None
        except ValueError as exc:
            raise ConfigError(f"{self.source}: {exc}") from None

    def start_control(self) -> Control:
        value = self.initial_control
        if value is None:
            cs = self.control_set
            value = cs.center if isinstance(cs, Box) else cs.atoms[0]
        return Control.constant(self.grid, value)


def _copy(s: Scenario) -> Scenario:
    return Scenario(s.name, s.grid, s.control_set, s.x0, dict(s.params), s.descent,
                    s.initial_control, s.meanfield, s.seed, s.source, s.scenario_id)


def parse_scenario(text: str, source: str = "<string>") -> Scenario:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.optionxform = str  # keep ``T`` distinct from ``t0``
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None

    name = _require(cp, "problem", "name", source).strip()
    seed = _number(cp.get("problem", "seed", fallback="0"), int, source)

    try:
        grid = TimeGrid(
            _number(cp.get("grid", "t0", fallback="0"), float, source),
            _number(_require(cp, "grid", "T", source), float, source),
            _number(_require(cp, "grid", "n_steps", source), int, source),
        )
    except ValueError as exc:
        raise ConfigError(f"{source}: [grid] {exc}") from None

    kind = _require(cp, "control_set", "kind", source).strip().lower()
    try:
        if kind == "box":
            control_set = Box(_floats(_require(cp, "control_set", "lower", source), source),
                              _floats(_require(cp, "control_set", "upper", source), source))
        elif kind == "atoms":
            raw = _require(cp, "control_set", "atoms", source)
            control_set = Atoms(np.array([_floats(p, source) for p in raw.split(";") if p.strip()]))
        else:
            raise ConfigError(f"{source}: control_set kind must be 'box' or 'atoms', got {kind!r}")
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None

    params = {}
    if cp.has_section("params"):
        for key, value in cp.items("params"):
            vec = _floats(value, f"{source} [params] {key}")
            params[key] = vec if vec.size > 1 else float(vec[0])

    meanfield = None
    if cp.has_section("meanfield"):
        particles = _number(_require(cp, "meanfield", "N", source), int, source)
        if particles < 1:
            raise ConfigError(f"{source}: [meanfield] N must be positive")
        m = _INIT.match(_require(cp, "meanfield", "init", source))
        if m is None:
            raise ConfigError(f"{source}: [meanfield] init must be gaussian(mean, std, seed) or grid(lo, hi)")
        args = tuple(_floats(m.group(2), source))
        if (m.group(1) == "gaussian" and len(args) not in (2, 3)) or (m.group(1) == "grid" and len(args) != 2):
            raise ConfigError(f"{source}: wrong number of arguments in init {m.group(0).strip()!r}")
        meanfield = MeanFieldBlock(particles, m.group(1), args)

    x0 = None
    if meanfield is None:
        x0 = _floats(_require(cp, "initial", "x0", source), source)

    dc = DescentConfig()
    if cp.has_section("descent"):
        sec = cp["descent"]
        try:
            dc = DescentConfig(
                max_iters=int(sec.get("max_iters", dc.max_iters)),
                cost_tol=float(sec.get("cost_tol", dc.cost_tol)),
                stall_iters=int(sec.get("stall_iters", dc.stall_iters)),
                sample_partition=int(sec.get("sample_partition", dc.sample_partition)),
                track_residual=sec.getboolean("track_residual", dc.track_residual),
            )
        except ValueError as exc:
            raise ConfigError(f"{source}: [descent] {exc}") from None
    initial_control = None
    if cp.has_option("descent", "initial_control"):
        initial_control = _floats(cp.get("descent", "initial_control"), source)
        if initial_control.size != control_set.dim:
            raise ConfigError(f"{source}: initial_control has {initial_control.size} entries, "
                              f"control dimension is {control_set.dim}")

    return Scenario(name, grid, control_set, x0, params, dc, initial_control, meanfield, seed,
                    source, Path(source).stem)


def load_scenario(path) -> Scenario:
    """Read and parse a scenario file; :class:`ConfigError` names the path on failure."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {str(path)!r}: {exc.strerror}") from None
    return parse_scenario(text, str(path))
