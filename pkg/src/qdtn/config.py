"""Run configuration: a documented key-value text format.

Lines are ``key = value`` with ``#`` comments; vectors and lists are space
separated.  Unknown keys are rejected so typos fail loudly.  Example::

    # grid and domain
    grid.dims = 32 32 32
    grid.box = -1.5 -1.5 -1.5 1.5 1.5 1.5
    domain.shape = ball
    domain.center = 0 0 0
    domain.radius = 1.0

    # phantom
    phantom.preset = combined
    phantom.gamma_contrast = 0.1
    phantom.b_scale = 0.5
    phantom.remainder_scale = 0.4
    phantom.gradient_ball = 0.8

    # measurement and reconstruction
    eps.schedule = 0.02 0.014 0.01 0.007 0.005
    gamma.xi_max = 8.0
    gamma.s_ladder = 4.0 6.0 9.0
    gamma.path = born
    gamma.boundary_freqs = 6.0 12.0
    b.xi_max = 10.0
    b.s_ladder = 2.0 3.0 4.5
    b.gamma_mode = oracle
    solver.tol = 1e-12
    seed = 1234
    out.dir = runs/demo
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np


@dataclass
class RunConfig:
    grid_dims: tuple = (32, 32, 32)
    grid_box: tuple = (-1.5, -1.5, -1.5, 1.5, 1.5, 1.5)
    domain_shape: str = "ball"
    domain_center: tuple = (0.0, 0.0, 0.0)
    domain_radius: float = 1.0
    domain_corners: tuple = (-1.0, -1.0, -1.0, 1.0, 1.0, 1.0)
    phantom_preset: str = "combined"
    phantom_gamma_contrast: float = 0.1
    phantom_b_scale: float = 0.5
    phantom_remainder_scale: float = 0.4
    phantom_gradient_ball: float = 0.8
    eps_schedule: tuple = (0.02, 0.014, 0.01, 0.007, 0.005)
    gamma_xi_max: float = 8.0
    gamma_s_ladder: tuple = (4.0, 6.0, 9.0)
    gamma_path: str = "born"
    gamma_boundary_freqs: tuple = (6.0, 12.0)
    b_xi_max: float = 10.0
    b_s_ladder: tuple = (2.0, 3.0, 4.5)
    b_gamma_mode: str = "oracle"
    solver_tol: float = 1e-12
    seed: int = 1234
    out_dir: str = "runs/out"

    def validate(self):
        if len(self.grid_dims) != 3 or any(d < 8 for d in self.grid_dims):
            raise ValueError("grid.dims needs three entries >= 8")
        if self.domain_shape not in ("ball", "box"):
            raise ValueError("domain.shape must be ball or box")
        if self.gamma_path not in ("born", "exact"):
            raise ValueError("gamma.path must be born or exact")
        if self.b_gamma_mode not in ("oracle", "reconstructed"):
            raise ValueError("b.gamma_mode must be oracle or reconstructed")
        if self.phantom_gamma_contrast > 0.5:
            raise ValueError("gamma contrast outside the small-data regime")
        if any(e <= 0 for e in self.eps_schedule):
            raise ValueError("eps schedule must be positive")
        return self


_KEYMAP = {
    "grid.dims": ("grid_dims", "int_list"),
    "grid.box": ("grid_box", "float_list"),
    "domain.shape": ("domain_shape", "str"),
    "domain.center": ("domain_center", "float_list"),
    "domain.radius": ("domain_radius", "float"),
    "domain.corners": ("domain_corners", "float_list"),
    "phantom.preset": ("phantom_preset", "str"),
    "phantom.gamma_contrast": ("phantom_gamma_contrast", "float"),
    "phantom.b_scale": ("phantom_b_scale", "float"),
    "phantom.remainder_scale": ("phantom_remainder_scale", "float"),
    "phantom.gradient_ball": ("phantom_gradient_ball", "float"),
    "eps.schedule": ("eps_schedule", "float_list"),
    "gamma.xi_max": ("gamma_xi_max", "float"),
    "gamma.s_ladder": ("gamma_s_ladder", "float_list"),
    "gamma.path": ("gamma_path", "str"),
    "gamma.boundary_freqs": ("gamma_boundary_freqs", "float_list"),
    "b.xi_max": ("b_xi_max", "float"),
    "b.s_ladder": ("b_s_ladder", "float_list"),
    "b.gamma_mode": ("b_gamma_mode", "str"),
    "solver.tol": ("solver_tol", "float"),
    "seed": ("seed", "int"),
    "out.dir": ("out_dir", "str"),
}

_FIELDMAP = {attr: key for key, (attr, _) in _KEYMAP.items()}


def _parse_value(raw: str, kind: str):
    if kind == "str":
        return raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    parts = raw.split()
    if kind == "int_list":
        return tuple(int(p) for p in parts)
    return tuple(float(p) for p in parts)


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _KEYMAP:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        attr, kind = _KEYMAP[key]
        setattr(cfg, attr, _parse_value(raw, kind))
    return cfg.validate()


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def _format_value(v):
    if isinstance(v, tuple):
        return " ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        key = _FIELDMAP[f.name]
        lines.append(f"{key} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"
