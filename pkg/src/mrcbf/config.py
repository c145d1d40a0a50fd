"""Run configuration: schema, parsing, validation, and object assembly.

Two on-disk formats are accepted: JSON (canonical, machine-friendly) and
an INI-style text file whose values are JSON fragments.  Unknown keys are
rejected by name so typos fail loudly.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .barriers import (BarrierFunction, LipschitzBundle, SegwayBarrierConfig,
                       estimate_lipschitz, segway_barriers)
from .dynamics import ControlAffineSystem, SegwayParams, segway_system
from .perception import (MeasurementModel, NonparametricBound, NWRegressor,
                         TrainingSet, make_training_set, nonparam_error_bound,
                         nw_fit, position_submodel, synthetic_measurement_map)
from .sim import PDGains, Scenario


class ConfigError(ValueError):
    """Malformed configuration; message names the offending section/key."""


DEFAULTS: dict[str, dict[str, Any]] = {
    "scenario": {
        "kind": "perfect_state",
        "filter": "cbf_qp",
        "offset_eps": 0.2,
        "initial_state": [0.0, 0.0, 0.138, 0.0],
        "duration": 3.0,
        "control_rate": 100.0,
        "integrator_dt": 0.001,
        "noise_seed": 0,
        "perception_rate": 15.0,
        "eps_mode": "fixed",
        "eps_fixed": 0.2,
        "eps_max": 0.5,
        "relax_penalty": 1000.0,
    },
    "segway": {
        "wheel_mass": 2.0,
        "body_mass": 44.8,
        "wheel_radius": 0.195,
        "com_distance": 0.28,
        "body_inertia": 3.343,
        "wheel_inertia": 0.038,
        "gravity": 9.81,
        "torque_constant": 1.0,
        "friction": 0.0,
        "equilibrium_pitch": 0.138,
    },
    "barrier": {
        "half_width": 0.4,
        "rate_gain": 4.0,
        "class_k_gain": 50.0,
    },
    "lipschitz": {
        "box": [[-2.0, 2.0], [-3.6, 3.6], [-0.512, 0.788], [-3.6, 3.6]],
        "resolution": 15,
        "safety_factor": 1.2,
    },
    "controller": {
        "gains": [-0.5, -3.0, -60.0, -8.0],
    },
    "filter": {
        "gap_tol": 1e-8,
        "feas_tol": 1e-8,
        "max_iters": 100,
    },
    "perception": {
        "train_r": [-2.0, 4.0],
        "train_theta": [-0.512, 0.788],
        "train_grid": [40, 20],
        "sigma_w": 0.1,
        "radius": 0.25,
        "seed": 1234,
        "gamma": 0.2,
        "bound_L": 2.0,
        "bound_sigma": 0.3,
    },
    "field": {
        "theta_span": 1.2,
        "thetadot_span": 1.2,
        "resolution": 50,
    },
    "output": {
        "out_dir": "out",
        "prefix": "run",
    },
}


def _merge(defaults: dict, user: dict, path: str = "") -> dict:
    out = {}
    for key, val in user.items():
        if key not in defaults:
            raise ConfigError(f"unknown key {path + key!r}")
    for key, dval in defaults.items():
        if key in user:
            uval = user[key]
            if isinstance(dval, dict):
                if not isinstance(uval, dict):
                    raise ConfigError(f"section {path + key!r} must be a table")
                out[key] = _merge(dval, uval, path + key + ".")
            else:
                out[key] = uval
        else:
            out[key] = dval if not isinstance(dval, dict) else _merge(dval, {}, path + key + ".")
    return out


def load_config(path) -> dict:
    """Parse and validate a config file; fill unset keys from defaults."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    if path.suffix.lower() == ".json":
        try:
            user = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"JSON parse error in {path}: {exc}") from exc
    else:
        parser = configparser.ConfigParser()
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"parse error in {path}: {exc}") from exc
        user = {}
        for section in parser.sections():
            user[section] = {}
            for key, raw in parser.items(section):
                try:
                    user[section][key] = json.loads(raw)
                except json.JSONDecodeError as exc:
                    raise ConfigError(
                        f"value of {section}.{key} is not a JSON fragment: "
                        f"{raw!r}") from exc
    if not isinstance(user, dict):
        raise ConfigError("top-level config must be a table of sections")
    return _merge(DEFAULTS, user)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def provenance_lines(cfg: dict, seed) -> list[str]:
    return [f"config_sha256={config_hash(cfg)}",
            f"seed={seed}",
            f"version={__version__}"]


@dataclass
class RunContext:
    """Everything a scenario run needs, assembled from one config."""

    cfg: dict
    sys: ControlAffineSystem
    barrier_cfg: SegwayBarrierConfig
    barriers: tuple[BarrierFunction, BarrierFunction]
    lips: LipschitzBundle
    gains: PDGains
    scenario: Scenario
    model: MeasurementModel | None = None
    regressor: NWRegressor | None = None
    training: TrainingSet | None = None
    bound: NonparametricBound | None = None

    def eps_of_xhat(self, x_hat: np.ndarray) -> float:
        if self.bound is None or self.training is None:
            return self.scenario.eps_max
        return nonparam_error_bound(self.bound, self.training,
                                    np.asarray(x_hat)[[0, 2]])


def build_context(cfg: dict, seed_override: int | None = None) -> RunContext:
    """Instantiate the system, barriers, constants, and scenario objects."""
    seg = cfg["segway"]
    params = SegwayParams(**seg)
    sys = segway_system(params)

    bar = cfg["barrier"]
    bcfg = SegwayBarrierConfig(half_width=bar["half_width"],
                               rate_gain=bar["rate_gain"],
                               theta_star=seg["equilibrium_pitch"],
                               class_k_gain=bar["class_k_gain"])
    h1, h2 = segway_barriers(bcfg)

    lip = cfg["lipschitz"]
    lips = estimate_lipschitz(h1, sys, [tuple(b) for b in lip["box"]],
                              lip["resolution"],
                              safety_factor=lip["safety_factor"])

    gk = cfg["controller"]["gains"]
    gains = PDGains(position=gk[0], velocity=gk[1], pitch=gk[2],
                    pitch_rate=gk[3])

    sc = cfg["scenario"]
    scenario = Scenario(kind=sc["kind"], filter=sc["filter"],
                        offset_eps=sc["offset_eps"],
                        initial_state=tuple(sc["initial_state"]),
                        duration=sc["duration"],
                        control_rate=sc["control_rate"],
                        integrator_dt=sc["integrator_dt"],
                        noise_seed=(seed_override if seed_override is not None
                                    else sc["noise_seed"]),
                        perception_rate=sc["perception_rate"],
                        eps_mode=sc["eps_mode"], eps_fixed=sc["eps_fixed"],
                        eps_max=sc["eps_max"],
                        relax_penalty=sc["relax_penalty"])
    scenario.validate()

    ctx = RunContext(cfg=cfg, sys=sys, barrier_cfg=bcfg, barriers=(h1, h2),
                     lips=lips, gains=gains, scenario=scenario)

    if scenario.kind == "learned_perception":
        per = cfg["perception"]
        # the regressor learns the position/pitch features (the leading
        # four components of the full sensor map)
        submodel = position_submodel()
        r_ax = np.linspace(*per["train_r"], per["train_grid"][0])
        th_ax = np.linspace(*per["train_theta"], per["train_grid"][1])
        states = np.stack(np.meshgrid(r_ax, th_ax, indexing="ij"),
                          axis=-1).reshape(-1, 2)
        rng = np.random.default_rng(per["seed"] + scenario.noise_seed)
        training = make_training_set(submodel, states, per["sigma_w"], rng)
        ctx.model = synthetic_measurement_map()
        ctx.training = training
        ctx.regressor = nw_fit(training, per["radius"])
        ctx.bound = NonparametricBound(L=per["bound_L"],
                                       sigma=per["bound_sigma"],
                                       gamma=per["gamma"])
    return ctx
