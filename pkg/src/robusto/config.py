"""Run configuration: INI-style sections of ``key = value`` lines.

Every key belongs to a section; unknown sections or keys are errors so
that typos never silently fall back to defaults.  Command-line overrides
use ``section.key=value``; a bare ``key=value`` is accepted when the key
name is unique across sections.
"""

from __future__ import annotations

import configparser
import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

MODES = ("baseline", "evaluate", "robust", "gradcheck", "oracle")
PRESETS = ("cantilever",)


class ConfigError(ValueError):
    """Parse or validation failure; ``problems`` lists every issue found."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass
class GridSection:
    nx: int = 120
    ny: int = 60
    width: float = 2.0
    height: float = 1.0


@dataclass
class MaterialSection:
    E0: float = 1.0
    ED: float = 0.75
    nu: float = 0.3
    p: float = 5.0
    rho_min: float = 1e-2
    plane_model: str = "strain"


@dataclass
class ConstraintsSection:
    V: float = 0.5
    D: float = 0.02
    mean_norm: str = "material"


@dataclass
class FilterSection:
    # None means 7 element lengths at 400 elements across, scaled with nx.
    radius_elements: float | None = None


@dataclass
class LoadSection:
    extent: float = 0.05


@dataclass
class InnerSection:
    mu_star: float = 1e-6
    kkt_tol: float = 1e-10
    max_newton: int = 100
    solver: str = "schur"


@dataclass
class OuterSection:
    max_iters: int = 300
    move_limit: float = 0.2
    change_tol: float = 1e-3
    asyinit: float = 0.5
    conservative: bool = False


@dataclass
class IoSection:
    output_dir: str = "out"
    input_density_path: str | None = None


@dataclass
class GradcheckSection:
    probes: int = 8
    h: float = 1e-5
    tol: float = 1e-12


@dataclass
class OracleSection:
    resolution: int = 720


@dataclass
class RunSection:
    seed: int = 0
    threads: int | None = None


SECTIONS = {
    "grid": GridSection, "material": MaterialSection, "constraints": ConstraintsSection,
    "filter": FilterSection, "load": LoadSection, "inner": InnerSection, "outer": OuterSection,
    "io": IoSection, "gradcheck": GradcheckSection, "oracle": OracleSection, "run": RunSection,
}


@dataclass
class RunConfig:
    mode: str = "baseline"
    preset: str = "cantilever"
    grid: GridSection = field(default_factory=GridSection)
    material: MaterialSection = field(default_factory=MaterialSection)
    constraints: ConstraintsSection = field(default_factory=ConstraintsSection)
    filter: FilterSection = field(default_factory=FilterSection)
    load: LoadSection = field(default_factory=LoadSection)
    inner: InnerSection = field(default_factory=InnerSection)
    outer: OuterSection = field(default_factory=OuterSection)
    io: IoSection = field(default_factory=IoSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    run: RunSection = field(default_factory=RunSection)

    @property
    def radius(self) -> float:
        r = self.filter.radius_elements
        return 7.0 * self.grid.nx / 400.0 if r is None else r

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["filter"]["radius_elements"] = self.radius
        return out

    def replace(self, **sections):
        """Copy with some fields of some sections changed, e.g. ``replace(grid={"nx": 4})``."""
        new = copy.deepcopy(self)
        for name, values in sections.items():
            if name in ("mode", "preset"):
                setattr(new, name, values)
            else:
                setattr(new, name, dataclasses.replace(getattr(self, name), **values))
        return new


def _field_types(section_cls):
    return {f.name: f.type for f in dataclasses.fields(section_cls)}


def _convert(text: str, type_name: str):
    text = text.strip()
    optional = "None" in type_name
    if optional and text.lower() in ("", "none"):
        return None
    if type_name.startswith("int"):
        return int(text)
    if type_name.startswith("float"):
        return float(text)
    if type_name.startswith("bool"):
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return text


def _assign(cfg: RunConfig, section: str, key: str, value: str, where: str, problems: list):
    if section not in SECTIONS:
        problems.append(f"{where}: unknown section [{section}]")
        return
    types = _field_types(SECTIONS[section])
    if key not in types:
        problems.append(f"{where}: unknown key '{key}' in [{section}] "
                        f"(allowed: {', '.join(types)})")
        return
    try:
        setattr(getattr(cfg, section), key, _convert(value, str(types[key])))
    except ValueError as exc:
        problems.append(f"{where}: [{section}] {key}: {exc}")


def _key_index():
    index: dict[str, list[str]] = {}
    for name, cls in SECTIONS.items():
        for key in _field_types(cls):
            index.setdefault(key, []).append(name)
    return index


def parse_config(path: str | Path | None = None, mode: str = "baseline", preset: str = "cantilever",
                 overrides: Iterable[str] = ()) -> RunConfig:
    """Read, override and validate a configuration.

    Parameters
    ----------
    path : path-like, optional
        INI file; ``None`` uses the preset defaults only.
    overrides : iterable of str
        ``section.key=value`` (or unique ``key=value``) items applied last.
    """
    cfg = RunConfig(mode=mode, preset=preset)
    problems: list[str] = []
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError([f"{path}: {exc}"]) from exc
        for section in parser.sections():
            if section not in SECTIONS:
                problems.append(f"{path}: unknown section [{section}]")
                continue
            for key, value in parser.items(section):
                _assign(cfg, section, key, value, f"{path} [{section}] {key}", problems)

    index = _key_index()
    for item in overrides:
        if "=" not in item:
            problems.append(f"override '{item}': expected key=value")
            continue
        key, value = item.split("=", 1)
        key = key.strip()
        if "." in key:
            section, key = key.split(".", 1)
        else:
            owners = index.get(key, [])
            if len(owners) != 1:
                problems.append(f"override '{item}': " + (
                    f"ambiguous key, use one of {', '.join(o + '.' + key for o in owners)}"
                    if owners else "unknown key"))
                continue
            section = owners[0]
        _assign(cfg, section, key, value, f"override '{item}'", problems)

    try:
        validate(cfg)
    except ConfigError as exc:
        problems += exc.problems
    if problems:
        raise ConfigError(problems)
    return cfg


def validate(cfg: RunConfig) -> RunConfig:
    """Check every range; raises :class:`ConfigError` listing all violations."""
    bad = []

    def need(cond, msg):
        if not cond:
            bad.append(msg)

    need(cfg.mode in MODES, f"mode must be one of {MODES}, got {cfg.mode!r}")
    need(cfg.preset in PRESETS, f"preset must be one of {PRESETS}, got {cfg.preset!r}")
    g, m, c = cfg.grid, cfg.material, cfg.constraints
    need(g.nx >= 1, f"grid.nx must be >= 1, got {g.nx}")
    need(g.ny >= 1, f"grid.ny must be >= 1, got {g.ny}")
    need(g.width > 0, f"grid.width must be > 0, got {g.width}")
    need(g.height > 0, f"grid.height must be > 0, got {g.height}")
    need(m.E0 > 0, f"material.E0 must be > 0, got {m.E0}")
    need(0 < m.ED <= m.E0, f"material.ED must be in (0, E0={m.E0}], got {m.ED}")
    need(0 <= m.nu < 0.5, f"material.nu must be in [0, 0.5), got {m.nu}")
    need(m.p >= 1, f"material.p must be >= 1, got {m.p}")
    need(0 < m.rho_min < 1, f"material.rho_min must be in (0, 1), got {m.rho_min}")
    need(m.plane_model in ("strain", "stress"),
         f"material.plane_model must be 'strain' or 'stress', got {m.plane_model!r}")
    need(0 < c.V <= 1, f"constraints.V must be in (0, 1], got {c.V}")
    need(0 < c.D < 0.25, f"constraints.D must be in (0, 0.25), got {c.D}")
    need(c.mean_norm in ("material", "domain"),
         f"constraints.mean_norm must be 'material' or 'domain', got {c.mean_norm!r}")
    r = cfg.filter.radius_elements
    need(r is None or r > 0, f"filter.radius_elements must be > 0, got {r}")
    need(0 < cfg.load.extent <= 1, f"load.extent must be in (0, 1], got {cfg.load.extent}")
    i, o = cfg.inner, cfg.outer
    need(0 < i.mu_star < 1, f"inner.mu_star must be in (0, 1), got {i.mu_star}")
    need(i.kkt_tol > 0, f"inner.kkt_tol must be > 0, got {i.kkt_tol}")
    need(i.max_newton >= 1, f"inner.max_newton must be >= 1, got {i.max_newton}")
    need(i.solver in ("schur", "full"), f"inner.solver must be 'schur' or 'full', got {i.solver!r}")
    need(o.max_iters >= 0, f"outer.max_iters must be >= 0, got {o.max_iters}")
    need(0 < o.move_limit <= 1, f"outer.move_limit must be in (0, 1], got {o.move_limit}")
    need(o.change_tol > 0, f"outer.change_tol must be > 0, got {o.change_tol}")
    need(0 < o.asyinit <= 1, f"outer.asyinit must be in (0, 1], got {o.asyinit}")
    need(cfg.gradcheck.probes >= 1, f"gradcheck.probes must be >= 1, got {cfg.gradcheck.probes}")
    need(1e-8 <= cfg.gradcheck.h <= 1e-4, f"gradcheck.h must be in [1e-8, 1e-4], got {cfg.gradcheck.h}")
    need(cfg.oracle.resolution >= 8, f"oracle.resolution must be >= 8, got {cfg.oracle.resolution}")
    t = cfg.run.threads
    need(t is None or t >= 1, f"run.threads must be >= 1, got {t}")
    need(cfg.mode != "evaluate" or cfg.io.input_density_path,
         "mode 'evaluate' requires io.input_density_path")
    if bad:
        raise ConfigError(bad)
    return cfg
