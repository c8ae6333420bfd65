import dataclasses
import hashlib
import json
import logging
import os
import platform
import time
from pathlib import Path

from dotenv import dotenv_values, load_dotenv

__version__ = "0.3.0"

ENV_PREFIX = "SDRNN_"

logger = logging.getLogger(__name__)


# ----------------------
# Errors
# ----------------------
class SdrnnError(Exception):
    exit_code = 1


class ConfigError(SdrnnError):
    exit_code = 2


class SchemaError(SdrnnError):
    exit_code = 2


class CheckpointError(SdrnnError):
    exit_code = 4


class GradientCheckError(SdrnnError):
    exit_code = 3


class ShapeError(ValueError):
    """Dimension mismatch between two operands; both shapes are in the message."""

    def __init__(self, what, left, right):
        super().__init__(f"{what}: shape {tuple(left)} incompatible with {tuple(right)}")
        self.left = tuple(left)
        self.right = tuple(right)


def check_shape(what, actual, expected):
    if tuple(actual) != tuple(expected):
        raise ShapeError(what, actual, expected)


# ----------------------
# Configuration
# ----------------------
def _cast(field, raw):
    kind = field.type if isinstance(field.type, str) else getattr(field.type, "__name__", str(field.type))
    try:
        if kind == "bool":
            lowered = str(raw).strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return str(raw).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value for '{field.name}': {raw!r} (expected {kind})") from None


def read_config_file(path):
    """Flat key=value file, parsed the way .env files are."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return {k.strip().lower(): v for k, v in dotenv_values(path).items() if v is not None}


def resolve_config(cls, path=None, overrides=None, use_env=True, base=None):
    """Build a config dataclass from defaults (or ``base``), then the file, then SDRNN_* env vars.

    Unknown keys in the file or in ``overrides`` are hard errors.
    """
    fields = {f.name: f for f in dataclasses.fields(cls)}
    values = dataclasses.asdict(base) if base is not None else {}

    if path is not None:
        for key, raw in read_config_file(path).items():
            if key not in fields:
                raise ConfigError(f"unknown config key '{key}' in {path}")
            values[key] = _cast(fields[key], raw)

    if use_env:
        load_dotenv()
        for name, field in fields.items():
            raw = os.getenv(ENV_PREFIX + name.upper())
            if raw is not None:
                values[name] = _cast(field, raw)

    for key, raw in (overrides or {}).items():
        if key not in fields:
            raise ConfigError(f"unknown config key '{key}'")
        if raw is not None:
            values[key] = _cast(fields[key], raw)

    try:
        return cls(**values)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def config_to_text(cfg):
    return "".join(f"{k}={v}\n" for k, v in dataclasses.asdict(cfg).items())


def get_log_level():
    load_dotenv()
    return os.getenv(ENV_PREFIX + "LOG_LEVEL", "INFO").upper()


# ----------------------
# Digests and run manifests
# ----------------------
def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def ids_digest(ids):
    return hashlib.sha256("\n".join(sorted(ids)).encode("utf-8")).hexdigest()


class RunManifest:
    """Everything needed to reproduce one command, written next to its outputs."""

    def __init__(self, command, config=None, seeds=None, inputs=None):
        self.command = command
        self.config = config or {}
        self.seeds = list(seeds or [])
        self.inputs = {str(p): file_digest(p) for p in (inputs or [])}
        self.timings = {}
        self._started = time.perf_counter()

    def mark(self, label):
        self.timings[label] = round(time.perf_counter() - self._started, 3)

    def to_dict(self):
        return {
            "command": self.command,
            "config": self.config,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "tool_version": __version__,
            "python": platform.python_version(),
            "timings_s": self.timings,
        }

    def write(self, out_dir):
        self.mark("total")
        out = Path(out_dir) / "manifest.json"
        out.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        logger.info("wrote run manifest %s", out)
        return out
