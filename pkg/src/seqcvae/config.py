"""Run configuration: one JSON document with a section per stage.

Flags override file values; unknown sections or keys are rejected so that a
typo fails before any work starts.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

from .trainer import TrainConfig

SECTION_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "corpus": {
        "n_scenes": 600,
        "captions_per_scene": 5,
        "ratios": [500 / 600, 50 / 600, 50 / 600],
        "grammar": None,
        "feature_dim": 32,
        "noise": 0.1,
    },
    "sample": {"k": 20, "temperature": 1.0, "max_len": 16, "split": "test", "mean_mode": False, "workers": 1},
    "evaluate": {"top": 5, "rerank": True, "neighbors": 8, "histogram_n": [2, 4]},
    "interpolate": {"alphas": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0], "pairs": 5, "max_len": 16},
    "export": {"k": 1, "split": "test", "temperature": 1.0, "max_len": 16},
    "gradcheck": {"variants": ["seq_cvae"], "eps": 1e-4, "threshold": 1e-4},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    sections: Dict[str, Dict[str, Any]] = field(default_factory=lambda: copy.deepcopy(SECTION_DEFAULTS))

    def __getitem__(self, section: str) -> Dict[str, Any]:
        return self.sections[section]

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "RunConfig":
        d = dict(d or {})
        known = {"seed", "train", *SECTION_DEFAULTS}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls(seed=int(d.get("seed", 0)))
        for name, defaults in SECTION_DEFAULTS.items():
            given = d.get(name) or {}
            bad = set(given) - set(defaults)
            if bad:
                raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
            cfg.sections[name].update(given)
        train = dict(d.get("train") or {})
        train.setdefault("seed", cfg.seed)
        try:
            cfg.train = TrainConfig.from_dict(train)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"section 'train': {exc}") from None
        return cfg

    @classmethod
    def load(cls, path: Optional[str]) -> "RunConfig":
        if path is None:
            return cls.from_dict({})
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def override(self, seed: Optional[int] = None, variant: Optional[str] = None, k: Optional[int] = None, workers: Optional[int] = None) -> "RunConfig":
        d = self.to_dict()
        if seed is not None:
            d["seed"] = seed
            d["train"]["seed"] = seed
        if variant is not None:
            d["train"]["variant"] = variant
        if k is not None:
            d["sample"]["k"] = k
        if workers is not None:
            d["sample"]["workers"] = workers
        return RunConfig.from_dict(d)

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "train": self.train.to_dict()}
        d.update(copy.deepcopy(self.sections))
        return d

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


__all__ = ["RunConfig", "ConfigError", "SECTION_DEFAULTS"]
