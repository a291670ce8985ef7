"""Run configuration: one YAML file drives simulate, fit, estimate and report.

Command-line flags are applied on top of the file and win over its values.
The resolved configuration is hashed (sha256 of its canonical JSON form) and
the hash is stamped into every artifact a run writes.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from . import __version__
from .data import CsvSchema, StrataConfig
from .model import FAMILIES, PriorSpec
from .sampler import HmcConfig

__all__ = ["ConfigError", "DataSource", "EstimandConfig", "RunConfig", "load_config"]

ESTIMAND_KINDS = ("survival", "spce", "race", "itt", "km")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSource:
    path: str | None = None
    schema: CsvSchema = field(default_factory=CsvSchema)
    standardize: bool = True

    def to_dict(self) -> dict:
        return {"path": self.path, "schema": self.schema.to_dict(),
                "standardize": self.standardize}


@dataclass(frozen=True)
class EstimandConfig:
    points: int = 101
    t_max: float | None = None
    kinds: tuple[str, ...] = ESTIMAND_KINDS
    integration: str = "closed"
    k: int = 1000
    level: float = 0.95
    max_draws: int | None = None  # thin evenly to at most this many draws
    per_draw: bool = False

    def __post_init__(self):
        if self.points < 2:
            raise ConfigError("estimands.points must be at least 2")
        if self.t_max is not None and not self.t_max > 0:
            raise ConfigError("estimands.t_max must be positive")
        unknown = set(self.kinds) - set(ESTIMAND_KINDS)
        if unknown:
            raise ConfigError(f"unknown estimand kinds: {', '.join(sorted(unknown))}")
        if self.integration not in ("closed", "trapezoid", "simpson"):
            raise ConfigError("estimands.integration must be closed, trapezoid or simpson")
        if self.k < 2:
            raise ConfigError("estimands.k must be at least 2")
        if self.integration == "simpson" and self.k % 2:
            raise ConfigError("Simpson integration needs an even k")
        if not 0 < self.level < 1:
            raise ConfigError("estimands.level must lie in (0, 1)")
        if self.max_draws is not None and self.max_draws < 1:
            raise ConfigError("estimands.max_draws must be positive")

    def to_dict(self) -> dict:
        return {"points": self.points, "t_max": self.t_max, "kinds": list(self.kinds),
                "integration": self.integration, "k": self.k, "level": self.level,
                "max_draws": self.max_draws, "per_draw": self.per_draw}


@dataclass(frozen=True)
class RunConfig:
    data: DataSource = field(default_factory=DataSource)
    strata: StrataConfig = field(default_factory=StrataConfig.default)
    family: str = "weibull"
    prior: PriorSpec = field(default_factory=PriorSpec)
    hmc: HmcConfig = field(default_factory=HmcConfig)
    estimands: EstimandConfig = field(default_factory=EstimandConfig)
    simulation: dict | None = None  # preset name plus overrides, or a full scenario
    output: str = "pstrata-out"
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {', '.join(FAMILIES)}")
        if self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")

    def to_dict(self) -> dict:
        hmc = self.hmc.to_dict()
        hmc.pop("seed")  # the run seed is the single source of randomness
        return {
            "data": self.data.to_dict(),
            "strata": self.strata.to_dict(),
            "family": self.family,
            "prior": self.prior.to_dict(),
            "hmc": hmc,
            "estimands": self.estimands.to_dict(),
            "simulation": self.simulation,
            "output": self.output,
            "seed": self.seed,
        }

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def metadata(self) -> dict:
        """Stamp written into every artifact."""
        return {"config_hash": self.hash(), "seed": self.seed, "version": __version__}

    def hmc_seeded(self) -> HmcConfig:
        return replace(self.hmc, seed=self.seed)

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = dict(d or {})
        unknown = set(d) - {"data", "strata", "family", "prior", "hmc", "estimands",
                            "simulation", "output", "seed"}
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")
        try:
            data = d.get("data") or {}
            source = DataSource(path=data.get("path"),
                                schema=CsvSchema.from_dict(data.get("schema")),
                                standardize=bool(data.get("standardize", True)))
            hmc = dict(d.get("hmc") or {})
            hmc.pop("seed", None)
            est = dict(d.get("estimands") or {})
            if "kinds" in est:
                est["kinds"] = tuple(est["kinds"])
            return cls(
                data=source,
                strata=StrataConfig.from_dict(d.get("strata") or {}),
                family=d.get("family", "weibull"),
                prior=PriorSpec(**(d.get("prior") or {})),
                hmc=HmcConfig(**hmc),
                estimands=EstimandConfig(**est),
                simulation=d.get("simulation"),
                output=str(d.get("output", "pstrata-out")),
                seed=int(d.get("seed", 0)),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if d is not None and not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(d)
