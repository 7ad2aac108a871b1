"""INI run configuration.

The file layout is::

    [GENERAL]
    Kernel= Stencil
    WorkerCount = 128
    CheckpointLevel = 2
    Checkpoint = Y
    Recovery = Dependency
    Fail = Y
    MTBF = 1800
    Seed = 1
    Scheduler= Horizontal
    [Stencil]
    BackupCost = 0.0013
    ProcessCost = 7.1
    StencilSize =128
    Timesteps = 128

``[Stencil]`` may also carry ``LogCost`` (default 0) and ``FetchCost``
(default: BackupCost). Key names are case sensitive; unknown keys are errors.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, fields, replace

from .errors import ConfigError
from .stencil import GridSpec

GENERAL_KEYS = ("Kernel", "WorkerCount", "CheckpointLevel", "Checkpoint",
                "Recovery", "Fail", "MTBF", "Seed", "Scheduler")
STENCIL_KEYS = ("BackupCost", "ProcessCost", "StencilSize", "Timesteps")
OPTIONAL_KEYS = ("LogCost", "FetchCost")

# key -> (attribute, parser kind)
_KEYMAP = {
    "Kernel": ("kernel", "kernel"),
    "WorkerCount": ("worker_count", "int"),
    "CheckpointLevel": ("checkpoint_level", "int"),
    "Checkpoint": ("checkpoint", "yn"),
    "Recovery": ("recovery", "recovery"),
    "Fail": ("fail", "yn"),
    "MTBF": ("mtbf", "float"),
    "Seed": ("seed", "int"),
    "Scheduler": ("scheduler", "scheduler"),
    "BackupCost": ("backup_cost", "float"),
    "ProcessCost": ("process_cost", "float"),
    "StencilSize": ("stencil_size", "int"),
    "Timesteps": ("timesteps", "int"),
    "LogCost": ("log_cost", "float"),
    "FetchCost": ("fetch_cost", "float"),
}
_ATTR_TO_KEY = {attr: key for key, (attr, _) in _KEYMAP.items()}
_ENUMS = {
    "kernel": ("Stencil",),
    "recovery": ("Default", "Dependency"),
    "scheduler": ("Horizontal",),
    "yn": ("Y", "N"),
}


@dataclass(frozen=True)
class SimConfig:
    worker_count: int
    checkpoint_level: int = 1
    checkpoint: bool = True
    recovery: str = "Default"
    fail: bool = False
    mtbf: float = 1800.0
    seed: int = 0
    backup_cost: float = 0.0013
    process_cost: float = 7.1
    stencil_size: int = 128
    timesteps: int = 128
    log_cost: float = 0.0
    fetch_cost: float | None = None
    kernel: str = "Stencil"
    scheduler: str = "Horizontal"

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.stencil_size, self.timesteps)

    @property
    def effective_fetch_cost(self) -> float:
        return self.backup_cost if self.fetch_cost is None else self.fetch_cost

    def with_values(self, **changes) -> "SimConfig":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        """Values keyed by their INI names, in file order."""
        out = {}
        for key in GENERAL_KEYS + STENCIL_KEYS + OPTIONAL_KEYS:
            attr = _KEYMAP[key][0]
            value = getattr(self, attr)
            if key == "FetchCost" and value is None:
                continue
            if _KEYMAP[key][1] == "yn":
                value = "Y" if value else "N"
            out[key] = value
        return out


def _parse_value(key, raw, line=None):
    attr, kind = _KEYMAP[key]
    raw = raw.strip()
    if kind in _ENUMS:
        allowed = _ENUMS[kind]
        if raw not in allowed:
            raise ConfigError(
                f"{key} must be one of {'|'.join(allowed)}, got {raw!r}",
                key=key, line=line)
        return attr, (raw == "Y") if kind == "yn" else raw
    try:
        return attr, int(raw) if kind == "int" else float(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {key} value {raw!r} as {kind}",
                          key=key, line=line) from None


def _line_of(text: str, key: str) -> int | None:
    pat = re.compile(rf"^\s*{re.escape(key)}\s*[=:]")
    for no, line in enumerate(text.splitlines(), 1):
        if pat.match(line):
            return no
    return None


def parse_config(text: str, overrides: dict[str, str] | None = None
                 ) -> SimConfig:
    """Parse INI text; ``overrides`` (INI key -> raw value) win over the file."""
    cp = configparser.ConfigParser(interpolation=None,
                                   inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from None
    if "GENERAL" not in cp:
        raise ConfigError("missing [GENERAL] section")
    kernel = cp["GENERAL"].get("Kernel", "").strip()
    if kernel and kernel not in _ENUMS["kernel"]:
        raise ConfigError(f"Kernel must be Stencil, got {kernel!r}",
                          key="Kernel", line=_line_of(text, "Kernel"))
    allowed = {"GENERAL": set(GENERAL_KEYS),
               "Stencil": set(STENCIL_KEYS) | set(OPTIONAL_KEYS)}
    raw: dict[str, tuple[str, int | None]] = {}
    for section in cp.sections():
        if section not in allowed:
            raise ConfigError(f"unknown section [{section}]")
        for key, value in cp[section].items():
            if key not in allowed[section]:
                raise ConfigError(f"unknown key in [{section}]", key=key,
                                  line=_line_of(text, key))
            raw[key] = (value, _line_of(text, key))
    for key, value in (overrides or {}).items():
        if key not in _KEYMAP:
            raise ConfigError("unknown override key", key=key)
        raw[key] = (value, None)
    missing = [k for k in GENERAL_KEYS + STENCIL_KEYS if k not in raw]
    if missing:
        raise ConfigError(f"missing mandatory key(s): {', '.join(missing)}",
                          key=missing[0])
    values = {}
    for key, (value, line) in raw.items():
        attr, parsed = _parse_value(key, value, line)
        values[attr] = parsed
    config = SimConfig(**values)
    validate(config)
    return config


def format_config(config: SimConfig) -> str:
    d = config.as_dict()
    lines = ["[GENERAL]"]
    lines += [f"{k} = {d[k]}" for k in GENERAL_KEYS]
    lines.append("[Stencil]")
    lines += [f"{k} = {d[k]}" for k in STENCIL_KEYS + OPTIONAL_KEYS if k in d]
    return "\n".join(lines) + "\n"


def validate(config: SimConfig) -> None:
    """Raise ConfigError listing every violated constraint."""
    problems = []
    try:
        config.grid.check_level(config.checkpoint_level)
    except ConfigError as exc:
        problems.append(str(exc))
    if config.timesteps < 1:
        problems.append("Timesteps must be >= 1")
    needs_ring = config.checkpoint or config.fail
    if config.worker_count < 1 or (needs_ring and config.worker_count < 2):
        problems.append(
            f"WorkerCount must be >= 2 for a guard/protectee ring "
            f"(got {config.worker_count})")
    for attr in ("backup_cost", "process_cost", "log_cost"):
        if getattr(config, attr) < 0:
            problems.append(f"{_ATTR_TO_KEY[attr]} must be >= 0")
    if config.fetch_cost is not None and config.fetch_cost < 0:
        problems.append("FetchCost must be >= 0")
    if config.process_cost <= 0:
        problems.append("ProcessCost must be > 0")
    if config.fail and config.mtbf <= 0:
        problems.append("MTBF must be > 0 when Fail = Y")
    for f in fields(config):
        if f.name in ("kernel", "recovery", "scheduler"):
            kind = f.name
            if getattr(config, f.name) not in _ENUMS[kind]:
                problems.append(f"{_ATTR_TO_KEY[f.name]} has unknown value "
                                f"{getattr(config, f.name)!r}")
    if problems:
        raise ConfigError("; ".join(problems))


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out
