"""Flat ``key = value`` configuration files.

Lines hold one ``key = value`` pair; ``#`` starts a comment.  System
parameters use their ``SystemConfig`` field names, optionally under a
``system.`` prefix; everything else lives under a section prefix such as
``scenario.kind``, ``sweep.grid`` or ``fig2.weight_law``.  Lists are
comma-separated.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .allocator import ScenarioKind, ScenarioSpec, SolverOptions
from .model import ParameterError, SystemConfig

SECTIONS = ("system", "scenario", "sweep", "estimation", "solver", "fig2", "validate", "audit",
            "solve")


class ConfigError(ValueError):
    """Malformed configuration content (as opposed to an unreadable file)."""


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``{dotted key: value string}`` mapping; later duplicates override earlier ones."""
    entries = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        entries[key.lower()] = value
    return entries


def _float_list(value: str) -> tuple[float, ...]:
    return tuple(float(v) for v in value.split(",") if v.strip())


def _bool(value: str) -> bool:
    v = value.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


_SYSTEM_TYPES = {
    "n_users": int, "n_subcarriers": int, "p_total": float, "i_threshold": float,
    "ber_target": float, "noise_power": float, "primary_interference_power": float,
    "direct_mean_range": _float_list, "cross_mean": lambda v: complex(v.replace(" ", "")),
    "cross_variance": float, "rng_seed": int, "sinr_reference": str,
}

_SECTION_TYPES = {
    "scenario": {"kind": str, "rho": float, "pr": float, "eps": float},
    "estimation": {"estimate_variance": float},
    "sweep": {"variable": str, "grid": _float_list, "trials": int, "shared_power": _bool,
              "quantized": _bool, "kkt_tol": float},
    "solver": {"max_iter": int, "tol": float, "patience": int, "step_scale": float,
               "polish": _bool},
    "fig2": {"weight_law": str, "shape": float, "scale": float, "location": float, "mean": float,
             "k": int, "samples": int, "variance": float},
    "validate": {"samples": int, "direct_mean": float, "convention": str},
    "audit": {"trials": int, "zero_power": _bool},
    "solve": {"direct_gains": _float_list, "cross_gains": lambda v: tuple(
        complex(x.replace(" ", "")) for x in v.split(",") if x.strip())},
}


@dataclass
class RunConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    scenario: ScenarioSpec = field(default_factory=lambda: ScenarioSpec(ScenarioKind.PERFECT))
    solver: SolverOptions = field(default_factory=SolverOptions)
    estimate_variance: float | None = None
    sections: dict = field(default_factory=dict)

    def section(self, name: str) -> dict:
        return self.sections.get(name, {})


def build(entries: dict[str, str], source: str = "<config>") -> RunConfig:
    system, sections = {}, {name: {} for name in SECTIONS if name != "system"}
    for key, raw in entries.items():
        section, _, name = key.rpartition(".")
        section = section or "system"
        if section == "system":
            types = _SYSTEM_TYPES
            target = system
        elif section in _SECTION_TYPES:
            types = _SECTION_TYPES[section]
            target = sections[section]
        else:
            raise ConfigError(f"{source}: unknown section {section!r} in key {key!r}")
        if name not in types:
            raise ConfigError(f"{source}: unknown key {key!r}")
        try:
            target[name] = types[name](raw)
        except ValueError as exc:
            raise ConfigError(f"{source}: bad value for {key!r}: {exc}") from None
    try:
        cfg = SystemConfig(**system)
        sc_fields = dict(sections["scenario"])
        scenario = ScenarioSpec(sc_fields.pop("kind", "perfect"), **sc_fields)
        solver = SolverOptions(**sections["solver"])
    except (ParameterError, ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return RunConfig(cfg, scenario, solver, sections["estimation"].get("estimate_variance"),
                     sections)


def load(path: str | Path) -> RunConfig:
    """Read and validate a config file; ``OSError`` propagates for unreadable files."""
    text = Path(path).read_text(encoding="utf-8")
    return build(parse_text(text, str(path)), str(path))


def system_keys() -> list[str]:
    return [f.name for f in fields(SystemConfig)]
