"""Run configuration (INI), manifests (JSON) and CSV tables for the command-line front-end."""

from __future__ import annotations

import configparser
import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .mesh import MESH_PRESETS, SpatialMesh, build_mesh

OUTPUT_ENV = "KINHYDRO_OUTPUT_DIR"

DEFAULTS = {
    "run": {"output_dir": "runs", "seed": "0", "threads": "1", "cache_dir": ""},
    "physics": {"eps": "0.1", "c": "0.05,0,0"},
    "grid": {"n_per_axis": "12", "v_max": "6.0"},
    "mesh": {"preset": "desk"},
    "tolerances": {"tol_outer": "1e-6", "max_outer": "50", "tol_inner": "1e-8"},
    "scan": {"q": "1.75", "ell": "0", "sigma": "0.1", "beta": "1.0", "box": "32", "refinements": "2",
             "c_list": "0.1,0.05,0.025,0.0125"},
    "ns": {"box": "32", "modes": "48", "tol": "1e-8", "max_iter": "30"},
    "scaling": {"eps_list": "0.2,0.1,0.05", "c_list": "0.05,0.025"},
    "norms": {"rho": "0.1", "sigma": "0.02", "beta": "0.01", "beta_prime": "4"},
}


class ConfigError(ValueError):
    pass


def parse_vector(text: str, n: int | None = 3) -> tuple:
    try:
        vals = tuple(float(x) for x in str(text).replace(" ", "").split(",") if x != "")
    except ValueError as exc:
        raise ConfigError(f"not a list of numbers: {text!r}") from exc
    if n is not None and len(vals) != n:
        raise ConfigError(f"expected {n} comma-separated numbers, got {text!r}")
    if not all(np.isfinite(vals)):
        raise ConfigError(f"non-finite value in {text!r}")
    return vals


@dataclass
class RunConfig:
    subcommand: str
    parser: configparser.ConfigParser
    extras: dict = field(default_factory=dict)

    def get(self, section: str, key: str) -> str:
        return self.parser.get(section, key)

    def getfloat(self, section: str, key: str) -> float:
        try:
            v = self.parser.getfloat(section, key)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} must be a number") from exc
        if not np.isfinite(v):
            raise ConfigError(f"[{section}] {key} must be finite")
        return v

    def getint(self, section: str, key: str) -> int:
        try:
            return self.parser.getint(section, key)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} must be an integer") from exc

    def vector(self, section: str, key: str, n: int | None = 3) -> tuple:
        return parse_vector(self.get(section, key), n)

    @property
    def output_dir(self) -> str:
        return os.environ.get(OUTPUT_ENV) or self.get("run", "output_dir")

    @property
    def cache_dir(self) -> str | None:
        return self.get("run", "cache_dir") or None

    def text(self) -> str:
        lines = []
        for sec in self.parser.sections():
            lines.append(f"[{sec}]")
            lines.extend(f"{k} = {v}" for k, v in self.parser.items(sec))
            lines.append("")
        return "\n".join(lines)

    def mesh(self) -> SpatialMesh:
        name = self.get("mesh", "preset")
        if name in MESH_PRESETS:
            return build_mesh(**MESH_PRESETS[name])
        if os.path.isfile(name):
            return load_mesh_file(name)
        raise ConfigError(f"unknown mesh preset or file {name!r}")


def load_mesh_file(path: str) -> SpatialMesh:
    """Mesh description file: a [mesh] section with n_shells, n_theta, n_phi, r_far, grading."""
    cp = configparser.ConfigParser()
    try:
        cp.read(path, encoding="utf-8")
        sec = cp["mesh"]
        return build_mesh(sec.getint("n_shells", 8), sec.getint("n_theta", 4), sec.getint("n_phi", 8),
                          sec.getfloat("r_far", 8.0), sec.get("grading", "geometric"))
    except (KeyError, ValueError, configparser.Error) as exc:
        raise ConfigError(f"bad mesh file {path}: {exc}") from exc


def load_config(subcommand: str, path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the INI file, then command-line overrides {(section, key): value}."""
    cp = configparser.ConfigParser()
    cp.read_dict(DEFAULTS)
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        unknown = [s for s in cp.sections() if s not in DEFAULTS]
        if unknown:
            raise ConfigError(f"unknown config sections {unknown}")
        for sec in DEFAULTS:
            extra = set(cp[sec]) - set(DEFAULTS[sec])
            if extra:
                raise ConfigError(f"unknown keys {sorted(extra)} in [{sec}]")
    for (sec, key), val in (overrides or {}).items():
        if val is not None:
            cp.set(sec, key, str(val))
    return RunConfig(subcommand, cp)


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, (np.integer, int)) and not isinstance(obj, bool):
        return int(obj)
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    return obj if isinstance(obj, (str, type(None))) else str(obj)


def write_manifest(path: str, data: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(to_jsonable(data), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_csv(path: str, rows: list[dict], columns: list | tuple | None = None) -> None:
    """Comma-separated, header row, LF line endings; floats in repr form."""
    if columns is None:
        columns = []
        for r in rows:
            columns.extend(k for k in r if k not in columns)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(columns)
        for r in rows:
            wr.writerow([_fmt(r.get(c, "")) for c in columns])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def read_csv(path: str) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
