"""Campaign configuration files (INI syntax, read with :mod:`configparser`).

See ``docs/campaign.ini`` for a commented template.  A ``[campaign]``
section holds global settings, an optional ``[rom]`` section the low-rank
integrator options, and each ``[case <id>]`` section one initial condition.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

from .harness import (
    DEFAULT_RATE_FLOOR,
    DEFAULT_THRESHOLD_RISE,
    DEFAULT_TOLERANCE,
    IGNITION_CRITERIA,
    CaseSpec,
)
from .tdbcur import (
    DEFAULT_OVERSAMPLING,
    DEFAULT_WARMUP,
    ROW_SOLVES,
    S_SIGMA_MODES,
)


BUNDLED = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data")


class ConfigError(ValueError):
    """Invalid or incomplete campaign configuration."""


@dataclass
class CampaignConfig:
    path: str
    mechanism: str  # resolved path
    rank: int
    n_keep: list
    cases: list
    tolerance: float = DEFAULT_TOLERANCE
    keep_always: tuple | None = None
    ignition: dict = field(default_factory=dict)
    rom_options: dict = field(default_factory=dict)
    snapshot_every: int = 1
    fom_snapshot_every: int = 0
    compare_fom: bool = True
    svg: bool = False


def parse_composition(text):
    """``"CH4:1, N2:3.76"`` -> ``{"CH4": 1.0, "N2": 3.76}``."""
    comp = {}
    for item in text.replace(";", ",").split(","):
        item = item.strip()
        if not item:
            continue
        name, sep, value = item.partition(":")
        if not sep:
            raise ConfigError(f"composition entry {item!r} is not NAME:VALUE")
        try:
            comp[name.strip()] = float(value)
        except ValueError:
            raise ConfigError(f"bad mole amount in {item!r}") from None
    if not comp:
        raise ConfigError("empty composition")
    return comp


def _ints(text):
    try:
        return [int(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected a list of integers, got {text!r}") from None


def _get(section, key, conv, default=None):
    if key not in section:
        if default is None:
            raise ConfigError(f"[{section.name}] is missing {key!r}")
        return default
    raw = section[key]
    try:
        if conv is bool:
            return section.getboolean(key)
        return conv(raw)
    except ValueError:
        raise ConfigError(f"[{section.name}] {key} = {raw!r} is not a valid {conv.__name__}") from None


def _choice(section, key, options, default):
    value = section.get(key, default).strip()
    if value not in options:
        raise ConfigError(f"[{section.name}] {key} must be one of {options}, got {value!r}")
    return value


def load_config(path, mechanism=None):
    """Read a campaign file; ``mechanism`` overrides its mechanism path."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if "campaign" not in parser:
        raise ConfigError(f"{path}: no [campaign] section")
    camp = parser["campaign"]
    base = os.path.dirname(os.path.abspath(path))
    mech = mechanism or camp.get("mechanism", "").strip()
    if not mech:
        raise ConfigError("no mechanism given (config or --mech)")
    if mechanism is None:
        local = os.path.join(base, mech)
        bundled = os.path.join(BUNDLED, mech)
        # a bare file name not found next to the config may name a bundled mechanism
        if not os.path.exists(local) and os.path.basename(mech) == mech and os.path.exists(bundled):
            local = bundled
        mech = local
    fuel = parse_composition(_get(camp, "fuel", str))
    oxidizer = parse_composition(_get(camp, "oxidizer", str))
    keep = camp.get("keep_always", "").strip()
    keep_always = tuple(s.strip() for s in keep.split(",") if s.strip()) or None
    ignition = {"criterion": _choice(camp, "ignition", IGNITION_CRITERIA, "max-rate")}
    ignition["floor"] = _get(camp, "rate_floor", float, DEFAULT_RATE_FLOOR)
    ignition["rise"] = _get(camp, "threshold_rise", float, DEFAULT_THRESHOLD_RISE)

    rom = parser["rom"] if "rom" in parser else parser[parser.default_section]
    rom_options = {
        "warmup_steps": _get(rom, "warmup", int, DEFAULT_WARMUP),
        "oversampling": _get(rom, "oversampling", int, DEFAULT_OVERSAMPLING),
        "refresh_every": _get(rom, "refresh_every", int, 1),
        "row_solve": _choice(rom, "row_solve", ROW_SOLVES, "exact"),
        "s_sigma": _choice(rom, "s_sigma", S_SIGMA_MODES, "unit"),
        "criterion": _choice(rom, "criterion", ("bound", "exact"), "bound"),
    }

    cases = []
    for name in parser.sections():
        if not name.startswith("case"):
            continue
        case_id = name[4:].strip()
        if not case_id:
            raise ConfigError(f"section [{name}] needs an id, e.g. [case c1]")
        sec = parser[name]
        try:
            cases.append(CaseSpec.make(
                case_id, _get(sec, "T0", float), _get(sec, "P_atm", float),
                _get(sec, "phi", float),
                parse_composition(sec["fuel"]) if "fuel" in sec else fuel,
                parse_composition(sec["oxidizer"]) if "oxidizer" in sec else oxidizer,
                _get(sec, "dt", float), _get(sec, "t_end", float)))
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if not cases:
        raise ConfigError(f"{path}: no [case ...] sections")
    if len({c.case_id for c in cases}) != len(cases):
        raise ConfigError("duplicate case ids")
    return CampaignConfig(
        path=os.path.abspath(path),
        mechanism=mech,
        rank=_get(camp, "rank", int, 7),
        n_keep=_ints(camp.get("n_keep", "")),
        cases=cases,
        tolerance=_get(camp, "tolerance", float, DEFAULT_TOLERANCE),
        keep_always=keep_always,
        ignition=ignition,
        rom_options=rom_options,
        snapshot_every=_get(camp, "snapshot_every", int, 1),
        fom_snapshot_every=_get(camp, "fom_snapshot_every", int, 0),
        compare_fom=_get(camp, "compare_fom", bool, True),
        svg=_get(camp, "svg", bool, False),
    )
