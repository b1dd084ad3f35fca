"""INI-style experiment configuration with strict key validation."""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass

import numpy as np

from .datasets import DatasetSpec
from .fields import ControlSynthField, MlpField
from .finetune import MleConfig
from .rng import Rng
from .solvers import SolverConfig
from .training import TrainConfig

OUTPUT_ROOT_ENV = "FLOWTUNE_OUTPUT_ROOT"

_KNOWN_KEYS = {
    "dataset": {"name", "noise_scale", "sample_count", "shift"},
    "field": {"kind", "hidden", "time_features", "block_dims", "activations",
              "slopes", "cond_dim"},
    "solver": {"method", "step_count", "rtol", "atol", "h_init", "h_min",
               "h_max"},
    "train": {"batch_size", "steps", "learning_rate", "grad_clip", "beta1",
              "beta2", "adam_eps", "coupling", "seed", "checkpoint_interval"},
    "finetune": {"learning_rate", "residual_learning_rate", "steps",
                 "batch_size", "sigma", "horizon_t", "lambda_omega", "eps_a",
                 "solver_method", "solver_steps", "grad_clip", "coupling",
                 "repair_per_batch", "freeze_pretrained", "seed",
                 "checkpoint_interval"},
    "stability": {"attempts", "tol", "probe_horizon", "probe_count",
                  "probe_scale"},
    "output": {"dir"},
}

_DEFAULTS = {
    "dataset": {"name": "two_moons", "noise_scale": "1.0", "sample_count": "256",
                "shift": "0,0"},
    "field": {"kind": "mlp", "hidden": "64,64", "time_features": "8",
              "block_dims": "16", "activations": "tanh", "slopes": "",
              "cond_dim": ""},
    "solver": {"method": "dopri5", "step_count": "100", "rtol": "1e-6",
               "atol": "1e-8", "h_init": "1e-2", "h_min": "1e-9", "h_max": "10.0"},
    "train": {"batch_size": "128", "steps": "2000", "learning_rate": "1e-4",
              "grad_clip": "1.0", "beta1": "0.9", "beta2": "0.999",
              "adam_eps": "1e-8", "coupling": "minibatch_ot", "seed": "0",
              "checkpoint_interval": "500"},
    "finetune": {"learning_rate": "5e-6", "residual_learning_rate": "1e-3",
                 "steps": "200", "batch_size": "128", "sigma": "1.0",
                 "horizon_t": "0.0", "lambda_omega": "0.0", "eps_a": "1e-6",
                 "solver_method": "euler", "solver_steps": "16",
                 "grad_clip": "1.0", "coupling": "minibatch_ot",
                 "repair_per_batch": "true", "freeze_pretrained": "true",
                 "seed": "0", "checkpoint_interval": "100"},
    "stability": {"attempts": "400", "tol": "1e-9", "probe_horizon": "1.0",
                  "probe_count": "100", "probe_scale": "0.1"},
    "output": {"dir": "runs/default"},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Validated view over the config file's sections."""

    raw: dict

    def get(self, section: str, key: str) -> str:
        return self.raw[section][key]

    # typed accessors ----------------------------------------------------

    def dataset_spec(self, sample_count: int | None = None) -> DatasetSpec:
        d = self.raw["dataset"]
        shift = tuple(float(v) for v in d["shift"].split(","))
        return DatasetSpec(d["name"], float(d["noise_scale"]),
                           sample_count or int(d["sample_count"]), shift)

    def solver_config(self, record: bool = False) -> SolverConfig:
        s = self.raw["solver"]
        return SolverConfig(method=s["method"], step_count=int(s["step_count"]),
                            rtol=float(s["rtol"]), atol=float(s["atol"]),
                            h_init=float(s["h_init"]), h_min=float(s["h_min"]),
                            h_max=float(s["h_max"]), record_trajectory=record)

    def train_config(self) -> TrainConfig:
        t = self.raw["train"]
        return TrainConfig(
            batch_size=int(t["batch_size"]), steps=int(t["steps"]),
            learning_rate=float(t["learning_rate"]),
            grad_clip=float(t["grad_clip"]), beta1=float(t["beta1"]),
            beta2=float(t["beta2"]), adam_eps=float(t["adam_eps"]),
            coupling=t["coupling"], seed=int(t["seed"]),
            checkpoint_interval=int(t["checkpoint_interval"]))

    def mle_config(self) -> MleConfig:
        f = self.raw["finetune"]
        sigma = _parse_sigma(f["sigma"])
        solver = SolverConfig(method=f["solver_method"],
                              step_count=int(f["solver_steps"]))
        return MleConfig(
            solver=solver, learning_rate=float(f["learning_rate"]),
            residual_learning_rate=float(f["residual_learning_rate"]),
            sigma=sigma, horizon=float(f["horizon_t"]),
            lambda_omega=float(f["lambda_omega"]), eps_a=float(f["eps_a"]),
            batch_size=int(f["batch_size"]), steps=int(f["steps"]),
            grad_clip=float(f["grad_clip"]), coupling=f["coupling"],
            repair_per_batch=_parse_bool(f["repair_per_batch"]),
            seed=int(f["seed"]),
            checkpoint_interval=int(f["checkpoint_interval"]))

    def freeze_pretrained(self) -> bool:
        return _parse_bool(self.raw["finetune"]["freeze_pretrained"])

    def make_field(self, dim: int = 2, seed: int | None = None):
        f = self.raw["field"]
        rng = Rng(int(self.raw["train"]["seed"]) if seed is None else seed).split(99)
        if f["kind"] == "mlp":
            hidden = tuple(int(h) for h in f["hidden"].split(",") if h)
            return MlpField(dim, hidden, int(f["time_features"]), rng=rng)
        if f["kind"] == "controlsynth":
            return self.make_residual_field(dim, seed)
        raise ConfigError(f"unknown field kind {f['kind']!r}")

    def make_residual_field(self, dim: int = 2, seed: int | None = None):
        f = self.raw["field"]
        rng = Rng(int(self.raw["finetune"]["seed"]) if seed is None else seed).split(98)
        block_dims = tuple(int(k) for k in f["block_dims"].split(",") if k)
        acts = tuple(a.strip() for a in f["activations"].split(",") if a.strip())
        slopes_raw = [s for s in f["slopes"].split(",")] if f["slopes"] else []
        slopes = tuple(float(s) if s.strip() else None for s in slopes_raw) \
            if slopes_raw else tuple(None for _ in acts)
        cond = int(f["cond_dim"]) if f["cond_dim"] else None
        return ControlSynthField(dim, block_dims, acts, slopes, cond, rng=rng)

    def output_dir(self) -> str:
        base = self.raw["output"]["dir"]
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return os.path.join(root, base) if root else base

    def snapshot(self) -> dict:
        return {s: dict(kv) for s, kv in self.raw.items()}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_sigma(text: str):
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) == 1:
        return float(parts[0])
    return np.array([float(p) for p in parts])


def load_config(path: str | None = None,
                overrides: list[str] | None = None) -> RunConfig:
    """Load and validate a config file; unknown sections or keys fail fast.

    Overrides take the form section.key=value and are validated the same way.
    """
    raw = {s: dict(kv) for s, kv in _DEFAULTS.items()}
    unknown = []
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in _KNOWN_KEYS:
                unknown.append(section)
                continue
            for key, value in parser.items(section):
                if key not in _KNOWN_KEYS[section]:
                    unknown.append(f"{section}.{key}")
                else:
                    raw[section][key] = value
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        target, value = item.split("=", 1)
        section, key = target.split(".", 1)
        if section not in _KNOWN_KEYS or key not in _KNOWN_KEYS[section]:
            unknown.append(target)
        else:
            raw[section][key] = value
    if unknown:
        raise ConfigError("unknown configuration keys: " + ", ".join(sorted(unknown)))
    return RunConfig(raw)
