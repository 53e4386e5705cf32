"""Flat key = value experiment configuration with bracketed sections.

The format is intentionally small: `[section]` headers, `key = value`
lines, `#`/`;` comments, blank lines. Every recognized key carries a
type, a default, and a one-line description in `SCHEMA`; the combined
reference page is generated from it (`python -m rvmb.config` prints
it). Unknown sections or keys are rejected by name so that typos fail
loudly instead of silently running with defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constants import PhysicalConstants
from .equilibria import JuttnerState, GlobalMaxwellianParams

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "SCHEMA",
    "parse_config",
    "load_config",
    "reference_page",
]


class ConfigError(ValueError):
    """Malformed configuration: the message names the offending key."""


def _eps_list(raw: str) -> tuple:
    return tuple(float(tok) for tok in raw.replace(",", " ").split())


# section -> key -> (parser, default, description)
SCHEMA: dict[str, dict[str, tuple]] = {
    "constants": {
        "m": (float, 1.0, "particle mass"),
        "c": (float, 1.0, "speed of light"),
        "k_B": (float, 1.0, "Boltzmann constant"),
        "e_minus": (float, 1.0, "elementary charge magnitude"),
        "n_bar": (float, 1.0, "neutralizing charge density"),
        "beta": (float, 8.0, "angular kernel decay exponent (>= 8)"),
    },
    "state": {
        "n0": (float, 1.0, "equilibrium number density"),
        "u1": (float, 0.0, "bulk velocity, x component"),
        "u2": (float, 0.0, "bulk velocity, y component"),
        "u3": (float, 0.0, "bulk velocity, z component"),
        "T0": (float, 0.4, "local temperature"),
        "n_M": (float, 1.0, "reference global equilibrium density"),
        "T_M": (float, 0.25, "reference global temperature (window T_M < T0 < 2 T_M)"),
    },
    "grid": {
        "momentum_nodes": (int, 12, "momentum grid nodes per axis"),
        "p_max": (float, 0.0, "momentum box half width (0 = derive from tail)"),
        "tail": (float, 3e-6, "equilibrium tail level sizing the box when p_max = 0"),
        "angular_polar": (int, 4, "polar nodes of the scattering-angle rule"),
        "angular_azimuth": (int, 8, "azimuthal nodes of the scattering-angle rule"),
        "spatial_cells": (int, 12, "periodic spatial cells"),
        "dt": (float, 0.01, "window output spacing"),
        "steps": (int, 5, "window output count"),
    },
    "moments": {
        "n_states": (int, 5, "sampled states for the moment identities"),
        "n_nodes": (int, 48, "quadrature nodes per axis"),
    },
    "collision": {
        "grid_n": (int, 16, "nodes per axis for the bilinear-form checks"),
        "grid_tail": (float, 1e-10, "tail level for the bilinear-form grid"),
        "invariant_n": (int, 12, "nodes per axis for the invariant-integral checks"),
        "invariant_pmax": (float, 2.8125, "box half width for the invariant checks"),
        "invariant_T0": (float, 1.0 / 6.0, "temperature for the invariant checks"),
        "perturbation": (float, 0.1, "relative size of the invariant test perturbations"),
        "operator_n": (int, 12, "nodes per axis for the linearized-operator checks"),
        "operator_tail": (float, 1e-8, "tail level for the operator grid"),
        "jacobian_step": (float, 1e-6, "finite-difference step for the map Jacobian"),
    },
    "kernel": {
        "coarse_n": (int, 10, "coarse grid nodes for the two-route comparison"),
        "n_samples": (int, 1000, "sampled pairs for the kernel bounds"),
        "p_box": (float, 3.0, "sampling box half width"),
    },
    "chars": {
        "n_samples": (int, 100, "sampled trajectories for the distortion band"),
        "field_bound": (float, 0.1, "sup bound of the sampled fields"),
        "tau_max": (float, 0.2, "maximum elapsed time"),
    },
    "fields": {
        "nx": (int, 64, "FDTD cells per axis"),
        "steps": (int, 1000, "FDTD steps for the divergence check"),
        "courant": (float, 0.5, "FDTD Courant number"),
    },
    "hilbert": {
        "nx": (int, 8, "spatial cells for the built stage"),
        "grid_n": (int, 10, "momentum nodes per axis for the built stage"),
        "det_sweep": (int, 40, "gamma samples in the determinant sweep"),
        "refinements": (int, 4, "dt/dx refinement levels for the stepper order"),
    },
    "limit": {
        "stages": (int, 2, "highest truncation order to study"),
        "epsilons": (_eps_list, (1.0, 0.31622776601683794, 0.1, 0.03162277660168379, 0.01),
                     "scale separations, whitespace or comma separated"),
        "nx": (int, 12, "spatial cells of the manufactured background"),
        "grid_n": (int, 12, "momentum nodes per axis"),
        "amplitude": (float, 1e-3, "relative size of the background modulation"),
        "T_base": (float, 1.0 / 6.0, "background mean temperature"),
    },
    "run": {
        "seed": (int, 20260814, "RNG seed for sampled states"),
        "threads": (int, 1, "worker pool size for data-parallel regions"),
    },
}


def parse_config(text: str) -> dict[str, dict[str, str]]:
    """Parse sectioned key = value text into raw string maps."""
    out: dict[str, dict[str, str]] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not section:
                raise ConfigError(f"line {lineno}: empty section name")
            out.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside of any [section]")
        key, _, value = line.partition("=")
        out[section][key.strip()] = value.split("#", 1)[0].strip()
    return out


@dataclass
class ExperimentConfig:
    """Typed configuration: schema defaults overlaid with file values."""

    values: dict[str, dict] = field(default_factory=dict)
    seed: int = 0
    threads: int = 1

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def constants(self) -> PhysicalConstants:
        c = self.values["constants"]
        return PhysicalConstants(
            m=c["m"], c=c["c"], k_B=c["k_B"], e_minus=c["e_minus"],
            n_bar=c["n_bar"], beta=c["beta"],
        )

    def state(self) -> JuttnerState:
        s = self.values["state"]
        return JuttnerState(
            n0=s["n0"], u=np.array([s["u1"], s["u2"], s["u3"]]), T0=s["T0"]
        )

    def echo(self) -> dict:
        """JSON-ready copy of every effective value.

        The worker-pool size is omitted on purpose: reports must come out
        byte-identical for any thread count, so only values that can change
        the numbers belong in the echo.
        """
        out = {sec: dict(vals) for sec, vals in self.values.items()}
        for sec in out:
            for key, val in out[sec].items():
                if isinstance(val, tuple):
                    out[sec][key] = list(val)
        out["run"] = {"seed": self.seed}
        return out


def load_config(text: str | None) -> ExperimentConfig:
    """Build the typed config from optional file text, validating names.

    The reference window constraint between the local and reference
    temperatures is enforced here so a bad pairing fails before any
    computation starts.
    """
    raw = parse_config(text) if text else {}
    values: dict[str, dict] = {}
    for section, keys in SCHEMA.items():
        values[section] = {key: default for key, (_, default, _) in keys.items()}
    for section, kv in raw.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, sval in kv.items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            parser = SCHEMA[section][key][0]
            try:
                values[section][key] = parser(sval)
            except ValueError as exc:
                raise ConfigError(
                    f"key {key!r} in section [{section}]: cannot parse {sval!r}"
                ) from exc
    cfg = ExperimentConfig(
        values=values, seed=values["run"]["seed"], threads=values["run"]["threads"]
    )
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    cons = cfg.values["constants"]
    for key in ("m", "c", "k_B", "e_minus", "n_bar"):
        if cons[key] <= 0:
            raise ConfigError(f"key {key!r} in section [constants] must be positive")
    if cons["beta"] < 8.0:
        raise ConfigError("key 'beta' in section [constants] must be >= 8")
    st = cfg.values["state"]
    if st["n0"] <= 0 or st["T0"] <= 0 or st["n_M"] <= 0 or st["T_M"] <= 0:
        raise ConfigError("keys in section [state] must define positive density/temperature")
    if not (st["T_M"] < st["T0"] < 2.0 * st["T_M"]):
        raise ConfigError(
            "key 'T_M' in section [state]: reference window requires T_M < T0 < 2 T_M, "
            f"got T_M={st['T_M']} T0={st['T0']}"
        )
    uu = np.sqrt(st["u1"] ** 2 + st["u2"] ** 2 + st["u3"] ** 2)
    if uu >= cons["c"]:
        raise ConfigError("keys 'u*' in section [state]: |u| must stay below c")
    grid = cfg.values["grid"]
    for key in ("momentum_nodes", "spatial_cells", "steps"):
        if grid[key] < 2:
            raise ConfigError(f"key {key!r} in section [grid] must be at least 2")
    if cfg.threads < 1:
        raise ConfigError("key 'threads' in section [run] must be at least 1")


def reference_page() -> str:
    """Generated documentation of every configuration key."""
    lines = ["Configuration reference (key = default  -- description)", ""]
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (_, default, desc) in keys.items():
            if isinstance(default, tuple):
                default = " ".join(repr(v) for v in default)
            lines.append(f"  {key} = {default}  -- {desc}")
        lines.append("")
    return "\n".join(lines)


def global_reference(cfg: ExperimentConfig) -> GlobalMaxwellianParams:
    """Reference equilibrium from the [state] section, window-checked."""
    st = cfg.values["state"]
    gm = GlobalMaxwellianParams.from_temperature(st["n_M"], st["T_M"], cfg.constants())
    gm.check_window(st["T0"])
    return gm


if __name__ == "__main__":
    print(reference_page())
