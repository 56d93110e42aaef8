"""``key = value`` run-configuration files.

Blank lines and ``#`` comments are ignored; unknown or repeated keys are
rejected rather than skipped, so a typo cannot silently change an ablation.
"""

from dataclasses import fields

from .errors import ConfigError
from .training import RunConfig

_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


def _coerce(key, kind, raw):
    try:
        if kind is bool or kind == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for key {key}", key=key) from None
    return raw


def parse_config(text, source="<config>"):
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'", key=line)
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key}", key=key)
        if key in values:
            raise ConfigError(f"{source}:{lineno}: key {key} given twice", key=key)
        values[key] = _coerce(key, types[key], raw)
    return RunConfig(**values)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), source=str(path))


def format_config(cfg):
    out = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        out.append(f"{f.name} = {v}")
    return "\n".join(out) + "\n"
