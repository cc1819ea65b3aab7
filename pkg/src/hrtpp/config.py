"""Run configuration loaded from JSON.

Layout (every key optional; defaults shown)::

    {
      "seed": 0,                      # single source of randomness for fit splits and mining
      "encoding": {
        "delta": null,                # null -> 0.05 x mean positive inter-event gap of the corpus
        "rule_decay_rate": 1.0,
        "num_decay_rate": 1.0,
        "max_predicates": 3,
        "integrate_to": "horizon",    # or "last_event"
        "numeric": true,
        "numeric_mask": "rules"       # or "all"
      },
      "fit": {"max_epochs": 500, "learning_rate": 0.05, "convergence_tol": 1e-9, "l2_weight": 1e-4},
      "mining": {"subset_size": 10, "budget": 100, "batch_size": 5, "epsilon": 0.1,
                 "elite_quantile": 0.25, "smoothing": 0.7, "p_min": 0.01, "p_max": 0.99,
                 "pool_cap": 5000, "filter_tolerance": 1e-3, "all_predicate_leaves": false,
                 "holdout_fraction": 0.2, "record_wall_time": false},
      "paths": {"corpus": null, "rules": null, "out": null}
    }

Unknown keys at any level raise :class:`ConfigError`.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .mining import MiningConfig
from .training import EncodingConfig, FitConfig

PATH_KEYS = ("corpus", "rules", "out")


class ConfigError(ValueError):
    pass


def _build(cls, section: str, data, **extra):
    if not isinstance(data, dict):
        raise ConfigError(f"'{section}' must be an object")
    known = {f.name for f in fields(cls)} - set(extra)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(unknown)}")
    try:
        return cls(**data, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{section}' section: {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    encoding: EncodingConfig = EncodingConfig()
    fit: FitConfig = FitConfig()
    mining: MiningConfig = MiningConfig()
    paths: dict = field(default_factory=lambda: dict.fromkeys(PATH_KEYS))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(d) - {"seed", "encoding", "fit", "mining", "paths"})
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("'seed' must be a non-negative integer")
        paths = d.get("paths", {})
        if not isinstance(paths, dict) or set(paths) - set(PATH_KEYS):
            raise ConfigError(f"'paths' accepts only {', '.join(PATH_KEYS)}")
        return cls(seed=seed,
                   encoding=_build(EncodingConfig, "encoding", d.get("encoding", {})),
                   fit=_build(FitConfig, "fit", d.get("fit", {}), seed=seed),
                   mining=_build(MiningConfig, "mining", d.get("mining", {})),
                   paths={k: paths.get(k) for k in PATH_KEYS})

    @classmethod
    def load(cls, path: str | os.PathLike | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(data)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, fit=replace(self.fit, seed=seed))
