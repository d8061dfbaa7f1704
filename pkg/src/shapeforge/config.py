"""Flat key-value run configuration.

The file format is one `dotted.key = value` pair per line, with `#` starting
a comment. Unknown keys are rejected by name so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .flow import InflowSpec, SolverConfig
from .forms import ObjectiveParams
from .optimizer import OptimizerSettings


class ConfigError(ValueError):
    pass


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ("on", "true", "yes", "1"):
        return True
    if lowered in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_tristate(text):
    lowered = text.strip().lower()
    if lowered == "auto":
        return "auto"
    return "on" if _parse_bool(lowered) else "off"


@dataclass
class RunConfig:
    mesh_source: str = "fixture"
    mesh_refinements: int = 0

    viscosity: float = 0.1
    inflow_diameter: float = 6.0
    inflow_scale: float = 1.0
    inflow_center: float = 0.0

    alpha: float = 1e-2
    beta: float = 100.0
    theta: float = 1e-3
    det_lower_bound: float = 0.001
    eta_lb: float = 0.0
    eta_ub: float = 1.0
    eta_init: float = 0.5

    tau0: float = 1.0
    tau_inc: float = 2.0
    lambda_inc: float = 1.0
    eps_g: float = 1e-3
    eps_inner: float = 1e-4
    eps_outer: float = 1e-5
    max_inner: int = 100
    max_outer: int = 30
    lbfgs_memory: int = 10
    active_set_sigma: float = 1e-8

    newton_abs_tol: float = 1e-14
    newton_rel_tol: float = 1e-8
    newton_max_iter: int = 50
    damping: str = "auto"
    linear_rel_tol: float = 1e-3
    linear_abs_tol: float = 1e-12
    adjoint_abs_tol: float = 1e-12
    linear_max_iter: int = 500
    direct_threshold: int = 50000
    smoother_flow: str = "ilu0"
    smoother_extension: str = "jacobi"
    jacobi_omega: float = 0.66
    pre_smooth: int = 3
    post_smooth: int = 3

    steps: int = 100
    output_directory: str = "out"
    vtk_every: int = 0
    figures: bool = True
    seed: int = 0

    def damping_enabled(self):
        if self.damping == "auto":
            return self.viscosity <= 0.03
        return self.damping == "on"

    def objective_params(self):
        return ObjectiveParams(
            nu=self.viscosity, alpha=self.alpha, beta=self.beta,
            theta=self.theta, det_floor=self.det_lower_bound,
            eta_lb=self.eta_lb, eta_ub=self.eta_ub)

    def inflow(self):
        return InflowSpec(diameter=self.inflow_diameter,
                          scale=self.inflow_scale,
                          center_y=self.inflow_center)

    def solver_config(self):
        return SolverConfig(
            newton_abs_tol=self.newton_abs_tol,
            newton_rel_tol=self.newton_rel_tol,
            newton_max_iter=self.newton_max_iter,
            damping=self.damping_enabled(),
            linear_rel_tol=self.linear_rel_tol,
            linear_abs_tol=self.linear_abs_tol,
            adjoint_abs_tol=self.adjoint_abs_tol,
            linear_max_iter=self.linear_max_iter,
            direct_threshold=self.direct_threshold,
            smoother_flow=self.smoother_flow,
            smoother_extension=self.smoother_extension,
            jacobi_omega=self.jacobi_omega,
            pre_smooth=self.pre_smooth,
            post_smooth=self.post_smooth)

    def optimizer_settings(self):
        return OptimizerSettings(
            tau0=self.tau0, tau_inc=self.tau_inc, lam_inc=self.lambda_inc,
            eps_g=self.eps_g, eps_inner=self.eps_inner,
            eps_outer=self.eps_outer, max_inner=self.max_inner,
            max_outer=self.max_outer, max_total_steps=self.steps,
            memory=self.lbfgs_memory, sigma=self.active_set_sigma)


_KEYS = {
    "mesh.source": ("mesh_source", str),
    "mesh.refinements": ("mesh_refinements", int),
    "physics.viscosity": ("viscosity", float),
    "physics.inflow_diameter": ("inflow_diameter", float),
    "physics.inflow_scale": ("inflow_scale", float),
    "physics.inflow_center": ("inflow_center", float),
    "control.alpha": ("alpha", float),
    "control.beta": ("beta", float),
    "control.theta": ("theta", float),
    "control.det_lower_bound": ("det_lower_bound", float),
    "control.eta_lb": ("eta_lb", float),
    "control.eta_ub": ("eta_ub", float),
    "control.eta_init": ("eta_init", float),
    "outer.tau0": ("tau0", float),
    "outer.tau_inc": ("tau_inc", float),
    "outer.lambda_inc": ("lambda_inc", float),
    "outer.eps_g": ("eps_g", float),
    "outer.eps_inner": ("eps_inner", float),
    "outer.eps_outer": ("eps_outer", float),
    "outer.max_inner": ("max_inner", int),
    "outer.max_outer": ("max_outer", int),
    "outer.lbfgs_memory": ("lbfgs_memory", int),
    "outer.active_set_sigma": ("active_set_sigma", float),
    "solver.newton_abs_tol": ("newton_abs_tol", float),
    "solver.newton_rel_tol": ("newton_rel_tol", float),
    "solver.newton_max_iter": ("newton_max_iter", int),
    "solver.damping": ("damping", _parse_tristate),
    "solver.linear_rel_tol": ("linear_rel_tol", float),
    "solver.linear_abs_tol": ("linear_abs_tol", float),
    "solver.adjoint_abs_tol": ("adjoint_abs_tol", float),
    "solver.linear_max_iter": ("linear_max_iter", int),
    "solver.direct_threshold": ("direct_threshold", int),
    "solver.smoother_flow": ("smoother_flow", str),
    "solver.smoother_extension": ("smoother_extension", str),
    "solver.jacobi_omega": ("jacobi_omega", float),
    "solver.pre_smooth": ("pre_smooth", int),
    "solver.post_smooth": ("post_smooth", int),
    "run.steps": ("steps", int),
    "output.directory": ("output_directory", str),
    "output.vtk_every": ("vtk_every", int),
    "output.figures": ("figures", _parse_bool),
    "seed": ("seed", int),
}

_POSITIVE = (
    "viscosity", "inflow_diameter", "beta", "tau0", "tau_inc",
    "eps_g", "eps_inner", "eps_outer", "newton_abs_tol", "newton_rel_tol",
    "linear_rel_tol", "linear_abs_tol", "adjoint_abs_tol", "jacobi_omega",
)
_NONNEGATIVE = (
    "mesh_refinements", "alpha", "theta", "det_lower_bound", "lambda_inc",
    "active_set_sigma", "vtk_every", "seed",
)
_AT_LEAST_ONE = (
    "max_inner", "max_outer", "lbfgs_memory", "newton_max_iter",
    "linear_max_iter", "steps", "pre_smooth", "post_smooth",
)


def parse_config(text, base=None):
    cfg = base if base is not None else RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        attr, conv = _KEYS[key]
        try:
            setattr(cfg, attr, conv(value))
        except ValueError as exc:
            raise ConfigError(
                f"line {lineno}: bad value for {key!r}: {exc}") from exc
    validate_config(cfg)
    return cfg


def load_config(path):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_config(p.read_text())


def validate_config(cfg):
    for name in _POSITIVE:
        if not getattr(cfg, name) > 0:
            raise ConfigError(f"{name} must be positive, got {getattr(cfg, name)}")
    for name in _NONNEGATIVE:
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must not be negative, got {getattr(cfg, name)}")
    for name in _AT_LEAST_ONE:
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be at least 1, got {getattr(cfg, name)}")
    if not cfg.eta_lb <= cfg.eta_init <= cfg.eta_ub:
        raise ConfigError(
            f"eta_init {cfg.eta_init} outside bounds "
            f"[{cfg.eta_lb}, {cfg.eta_ub}]")
    if cfg.eta_lb >= cfg.eta_ub:
        raise ConfigError(f"eta bounds empty: [{cfg.eta_lb}, {cfg.eta_ub}]")
    if cfg.smoother_flow not in ("jacobi", "ilu0"):
        raise ConfigError(f"unknown smoother {cfg.smoother_flow!r}")
    if cfg.smoother_extension not in ("jacobi", "ilu0"):
        raise ConfigError(f"unknown smoother {cfg.smoother_extension!r}")
    if cfg.det_lower_bound >= 1.0:
        raise ConfigError(
            f"det_lower_bound must be below 1, got {cfg.det_lower_bound}")
    return cfg


def describe_config(cfg):
    """Resolved settings, one per line, in config-file syntax."""
    reverse = {attr: key for key, (attr, _) in _KEYS.items()}
    lines = []
    for f in fields(cfg):
        key = reverse[f.name]
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "on" if value else "off"
        lines.append(f"{key} = {value}")
    return "\n".join(lines)
