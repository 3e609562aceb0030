"""Run configuration files (TOML or JSON) with ``[fit]`` and ``[loss]`` sections."""

from __future__ import annotations

import json
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import MeshValidationError
from .fitting import FitConfig

SECTIONS = ("fit", "loss")


def load_config(path=None) -> dict:
    """Read a config file into ``{"fit": {...}, "loss": {...}}``; missing sections are empty."""
    if path is None:
        return {s: {} for s in SECTIONS}
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise MeshValidationError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(raw)
        else:
            data = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise MeshValidationError(f"{path}: {exc}") from exc
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise MeshValidationError(f"{path}: unknown sections {sorted(unknown)}")
    return {s: dict(data.get(s, {})) for s in SECTIONS}


def fit_config(cfg: dict, overrides: dict | None = None) -> FitConfig:
    """Build a :class:`FitConfig`; non-None ``overrides`` win over the file."""
    fit = dict(cfg.get("fit", {}))
    fit.pop("unsupervised", None)
    fit.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return FitConfig.from_mapping(fit, cfg.get("loss"))
    except (TypeError, ValueError) as exc:
        raise MeshValidationError(f"invalid configuration: {exc}") from exc
