"""Experiment configuration: flat ``key=value`` files plus overrides."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .core import ConfigError
from .priors import DiffOperator, FoEPrior, HuberTVPrior, default_foe_spec, load_foe_csv
from .samplers import UlaConfig, UlpdaConfig

PRIORS = ("tv", "huber_tv", "foe")
SAMPLERS = ("ula", "ulpda", "pula")


def _floats(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).replace(";", ",").split(",") if v.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    prior: str = "tv"
    sampler: str = "ulpda"
    noise_sigma: float = 15.0 / 255.0
    lam: float = 0.05
    tau: float = 5e-5
    # 0 selects sigma_dual = 1 / (tau * L^2)
    sigma_dual: float = 0.0
    theta: float = 1.0
    iterations: int = 20_000
    burn_in: int = 0
    thinning: int = 1
    huber_delta: float = 0.01
    foe_kernels: str = ""
    q: tuple = (0.9,)
    bins: int = 25
    bin_scale: str = "log"
    ess_sup: float = 1.0
    seed: int = 0
    pooling: str = "joint"
    crop: int = 64
    labels: int = 256
    bp_iterations: int = 10
    thinning_list: tuple = (1, 5, 10)
    toy_centers: tuple = (-1.0, 0.0, 1.0)
    toy_sigma_x: float = 0.05
    toy_weights: tuple = ()
    toy_sigma_z: float = 0.3
    toy_m: int = 200_000
    toy_n: int = 10_000
    # not hashed: execution details that do not change results
    workers: int = field(default=1, metadata={"hash": False})
    trace_every: int = field(default=0, metadata={"hash": False})

    # --- construction -------------------------------------------------
    @classmethod
    def from_mapping(cls, values: Mapping[str, object], base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        base = base or cls()
        known = {f.name: f for f in dataclasses.fields(cls)}
        aliases = {"lambda": "lam"}
        updates = {}
        for key, raw in values.items():
            name = aliases.get(key, key)
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            updates[name] = _convert(name, getattr(base, name), raw)
        return dataclasses.replace(base, **updates)

    @classmethod
    def load(cls, path, overrides: Mapping[str, object] | None = None) -> "ExperimentConfig":
        values = parse_kv(Path(path).read_text()) if path else {}
        cfg = cls.from_mapping(values)
        return cls.from_mapping(overrides or {}, cfg)

    # --- derived ------------------------------------------------------
    def canonical(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            if f.metadata.get("hash", True):
                lines.append(f"{f.name}={_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def header(self) -> str:
        return f"# config_hash={self.hash()}"

    def dual_step(self) -> float:
        return self.sigma_dual or 1.0 / (self.tau * DiffOperator.norm_bound**2)

    def foe_spec(self):
        return load_foe_csv(self.foe_kernels) if self.foe_kernels else default_foe_spec()

    def sampler_config(self, seed: int | None = None):
        seed = self.seed if seed is None else seed
        if self.sampler == "ulpda":
            return UlpdaConfig(
                tau=self.tau,
                sigma=self.dual_step(),
                theta=self.theta,
                iterations=self.iterations,
                burn_in=self.burn_in,
                thinning=self.thinning,
                seed=seed,
            )
        return UlaConfig(self.tau, self.iterations, self.burn_in, self.thinning, seed)

    # --- validation ---------------------------------------------------
    def validate(self) -> "ExperimentConfig":
        if self.prior not in PRIORS:
            raise ConfigError(f"prior must be one of {PRIORS}, got {self.prior!r}")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.sampler == "ulpda" and self.prior != "tv":
            raise ConfigError("sampler ulpda requires prior tv")
        if self.sampler in ("ula", "pula") and self.prior == "tv":
            raise ConfigError(f"sampler {self.sampler} requires a differentiable prior (huber_tv or foe)")
        if not self.noise_sigma > 0:
            raise ConfigError("noise_sigma must be positive")
        if not self.lam > 0:
            raise ConfigError("lambda must be positive")
        if not self.huber_delta > 0:
            raise ConfigError("huber_delta must be positive")
        if not self.q or not all(0.0 < v < 1.0 for v in self.q):
            raise ConfigError("every q must lie in (0, 1)")
        if self.bins < 1:
            raise ConfigError("bins must be >= 1")
        if self.bin_scale not in ("log", "linear"):
            raise ConfigError("bin_scale must be log or linear")
        if not self.ess_sup > 0:
            raise ConfigError("ess_sup must be positive")
        if self.pooling not in ("joint", "separate"):
            raise ConfigError("pooling must be joint or separate")
        if self.labels < 1 or self.bp_iterations < 1:
            raise ConfigError("labels and bp_iterations must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not self.thinning_list or min(self.thinning_list) < 1:
            raise ConfigError("thinning_list entries must be >= 1")
        scfg = self.sampler_config()  # checks tau, theta, chain lengths
        if self.sampler == "ulpda":
            scfg.check_steps(DiffOperator.norm_bound)
        else:
            self._check_smooth_step()
        return self

    def _check_smooth_step(self) -> None:
        # Lipschitz bounds do not depend on the grid size beyond tiny images; 64x64 is representative
        shape = (max(self.crop, 8),) * 2
        prior = HuberTVPrior(shape, self.huber_delta) if self.prior == "huber_tv" else FoEPrior(shape, self.foe_spec())
        lp = prior.lipschitz / self.lam
        if self.sampler == "ula":
            bound = 2.0 / (1.0 / self.noise_sigma**2 + lp)
        else:
            bound = 2.0 / lp
        if not self.tau < bound:
            raise ConfigError(f"tau={self.tau:g} exceeds the stability bound {bound:.6g} for {self.sampler}")


def _convert(name: str, current, raw):
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if name == "thinning_list":
            return tuple(int(v) for v in _floats(raw))
        if isinstance(current, tuple):
            return _floats(raw)
        if isinstance(current, bool):
            return str(raw).lower() in ("1", "true", "yes")
        if isinstance(current, int):
            return int(float(raw)) if not isinstance(raw, int) else raw
        if isinstance(current, float):
            return _parse_float(raw)
        return str(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def _parse_float(raw) -> float:
    # allow simple fractions such as 15/255
    if isinstance(raw, str) and "/" in raw:
        num, den = raw.split("/", 1)
        return float(num) / float(den)
    return float(raw)


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(repr(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def parse_kv(text: str) -> dict[str, str]:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected key=value")
        key, val = line.split("=", 1)
        values[key.strip()] = val.strip()
    return values
