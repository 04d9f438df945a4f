"""Flat ``key = value`` study configuration.

Lines starting with ``#`` are comments. Unknown keys and out-of-range values
raise ConfigError naming the key. ``StudyConfig.to_text`` writes every key in a
fixed order, and parsing that text gives back an equal config.
"""
from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, fields, replace
from typing import Optional

from .errors import ConfigError
from .estimators import QoISpec
from .specfun import SUPPORTED_NU
from .transport import CouplingPolicy

STUDIES = ("solve", "convergence", "epscost", "kl-check")
SOLVERS = ("source_iteration", "direct")


def _int_list(text):
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _float_list(text):
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt(conv):
    def parse(text):
        return None if text.strip().lower() in ("", "none", "auto") else conv(text)
    return parse


def _fmt(value):
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class StudyConfig:
    study: str = "solve"
    # physics
    nu: float = 1.5
    lambda_c: float = 1.0
    sigma_var2: float = 1.0
    sigma_a: float = math.exp(0.5)
    source: float = math.e
    # constant scattering cross-section for `solve`; auto draws a random field
    sigma_s: Optional[float] = None
    breakpoints: tuple = (0.0, 1.0)
    # discretisation
    cells: int = 256
    angles: Optional[int] = None
    coupling: Optional[str] = None
    solver: str = "source_iteration"
    tol: float = 1e-10
    max_iter: int = 10_000
    stability: bool = False
    stability_k: float = 1.0
    stability_eta: float = 0.5
    stability_max_cells: int = 4096
    # random field
    kl_method: str = "auto"
    quad_points: int = 512
    modes_coef: Optional[float] = None
    modes_cap: Optional[int] = None
    qoi: str = "l1(1)"
    # sampling
    seed: int = 20240601
    sample_index: int = 0
    # auto: one per logical core
    workers: Optional[int] = None
    # convergence study
    ladder: tuple = (8, 16, 32, 64, 128)
    samples: int = 256
    ref_cells: int = 512
    ref_angles: int = 256
    ref_modes: Optional[int] = None
    # eps-cost study
    epsilons: tuple = (1e-3, 5e-4, 2.5e-4, 1.25e-4, 6.25e-5)
    methods: tuple = ("mc", "mlmc")
    cells0: int = 8
    max_levels: int = 8
    warmup: int = 32
    ref_factor: float = 4.0
    max_work: float = math.inf
    # kl-check
    check_modes: int = 20
    check_points: int = 256
    out: str = "out"

    def __post_init__(self):
        self.validate()

    # -- derived --------------------------------------------------------------
    @property
    def coupling_policy(self):
        if self.coupling is None:
            return CouplingPolicy("sqrt" if self.nu == 0.5 else "linear")
        return CouplingPolicy.parse(self.coupling)

    @property
    def qoi_spec(self):
        return QoISpec.parse(self.qoi)

    @property
    def worker_count(self):
        return (os.cpu_count() or 1) if self.workers is None else self.workers

    def digest(self):
        """Hash of every key that can change results (not ``out`` or ``workers``)."""
        return hashlib.sha256(self.to_text(include_runtime=False).encode()).hexdigest()[:16]

    # -- serialisation ----------------------------------------------------------
    def to_text(self, include_runtime=True):
        lines = []
        for f in fields(self):
            if f.name in ("out", "workers") and not include_runtime:
                continue
            lines.append(f"{f.name} = {_fmt(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, overrides=None):
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'", key=line)
            key, value = (p.strip() for p in line.split("=", 1))
            values[key.replace("-", "_")] = value
        for key, value in (overrides or {}).items():
            if value is not None:
                values[key.replace("-", "_")] = str(value) if not isinstance(value, str) else value
        return cls.from_mapping(values)

    @classmethod
    def from_file(cls, path, overrides=None):
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}", key="config") from exc
        return cls.from_text(text, overrides)

    @classmethod
    def from_mapping(cls, values):
        kwargs = {}
        for key, value in values.items():
            if key not in _PARSERS:
                raise ConfigError(f"unknown config key {key!r}", key=key)
            try:
                kwargs[key] = _PARSERS[key](value) if isinstance(value, str) else value
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})", key=key) from exc
        return cls(**kwargs)

    def with_overrides(self, **kw):
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    # -- validation -------------------------------------------------------------
    def validate(self):
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(f"{key}: {msg}", key=key)

        need(self.study in STUDIES, "study", f"must be one of {', '.join(STUDIES)}")
        need(self.nu in SUPPORTED_NU, "nu", f"must be one of {SUPPORTED_NU}")
        for key in ("lambda_c", "sigma_var2", "sigma_a", "tol", "stability_k", "ref_factor", "max_work"):
            need(getattr(self, key) > 0, key, "must be positive")
        need(self.source >= 0, "source", "must be non-negative")
        need(self.sigma_s is None or self.sigma_s >= 0, "sigma_s", "must be non-negative")
        bp = self.breakpoints
        need(len(bp) >= 2 and bp[0] == 0.0 and bp[-1] == 1.0 and all(a < b for a, b in zip(bp, bp[1:])),
             "breakpoints", "must increase from 0 to 1")
        need(self.cells >= 1, "cells", "must be >= 1")
        need(self.angles is None or self.angles >= 1, "angles", "must be >= 1")
        need(self.solver in SOLVERS, "solver", f"must be one of {', '.join(SOLVERS)}")
        need(self.max_iter >= 1, "max_iter", "must be >= 1")
        need(self.stability_max_cells >= 1, "stability_max_cells", "must be >= 1")
        need(0 < self.stability_eta < 1, "stability_eta", "must lie in (0, 1)")
        need(self.kl_method in ("auto", "analytic", "nystrom"), "kl_method", "must be auto, analytic or nystrom")
        need(self.kl_method != "analytic" or self.nu == 0.5, "kl_method", "analytic eigenpairs need nu = 0.5")
        need(self.quad_points >= 4, "quad_points", "must be >= 4")
        need(self.modes_coef is None or self.modes_coef > 0, "modes_coef", "must be positive")
        need(self.modes_cap is None or self.modes_cap >= 1, "modes_cap", "must be >= 1")
        need(self.sample_index >= 0, "sample_index", "must be >= 0")
        need(self.seed >= 0, "seed", "must be >= 0")
        need(self.workers is None or self.workers >= 1, "workers", "must be >= 1")
        need(all(m >= 1 for m in self.ladder), "ladder", "cell counts must be >= 1")
        need(self.samples >= 1, "samples", "must be >= 1")
        need(self.ref_cells >= 1 and self.ref_angles >= 1, "ref_cells", "must be >= 1")
        need(all(self.ref_cells % m == 0 and m < self.ref_cells for m in self.ladder), "ref_cells",
             "reference mesh must be strictly finer than, and nested with, every ladder mesh")
        need(self.ref_modes is None or self.ref_modes >= 1, "ref_modes", "must be >= 1")
        need(all(e > 0 for e in self.epsilons), "epsilons", "must be positive")
        need(set(self.methods) <= {"mc", "mlmc"} and len(self.methods) > 0, "methods", "subset of mc,mlmc")
        need(self.cells0 >= 1 and self.max_levels >= 1, "cells0", "ladder must have a level")
        need(self.warmup >= 2, "warmup", "must be >= 2")
        need(1 <= self.check_modes and 1 <= self.check_points, "check_modes", "must be >= 1")
        for key, parse in (("coupling", CouplingPolicy.parse), ("qoi", QoISpec.parse)):
            value = getattr(self, key)
            if value is None:
                continue
            try:
                parse(value)
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"{key}: {exc}", key=key) from exc


_PARSERS = {
    "study": str.strip, "nu": float, "lambda_c": float, "sigma_var2": float, "sigma_a": float,
    "source": float, "sigma_s": _opt(float), "breakpoints": _float_list, "cells": int,
    "angles": _opt(int), "coupling": _opt(str.strip), "solver": str.strip, "tol": float, "max_iter": int,
    "stability": _bool, "stability_k": float, "stability_eta": float, "stability_max_cells": int,
    "kl_method": str.strip,
    "quad_points": int, "modes_coef": _opt(float), "modes_cap": _opt(int), "qoi": str.strip,
    "seed": int, "sample_index": int, "workers": _opt(int), "ladder": _int_list, "samples": int,
    "ref_cells": int, "ref_angles": int, "ref_modes": _opt(int), "epsilons": _float_list,
    "methods": lambda t: tuple(v.strip() for v in t.split(",") if v.strip()), "cells0": int,
    "max_levels": int, "warmup": int, "ref_factor": float, "max_work": float, "check_modes": int,
    "check_points": int, "out": str.strip,
}
