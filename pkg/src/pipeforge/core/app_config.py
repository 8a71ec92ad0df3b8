#!/usr/bin/env python3
"""
Application Config Loader

Loads configuration from config/pipeforge.conf (flat ``key = value`` lines,
``#`` comments) on top of built-in defaults. Command-line flags override the
file; PIPEFORGE_SEED supplies the seed when neither sets it.
"""

import os
from typing import Any, Dict, List, Mapping, Optional

from .errors import ConfigError, DataError, SearchError
from ..services.data_service import Metric
from ..services.engine_service import RunConfig
from ..services.search_service import PolicyParams

DEFAULT_PATH = os.path.join("config", "pipeforge.conf")
SEED_ENV = "PIPEFORGE_SEED"
MIB = 1024 * 1024

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class AppConfig:
    def __init__(
        self,
        path: Optional[str] = None,
        overrides: Optional[Mapping[str, Any]] = None,
        env: Optional[Mapping[str, str]] = None,
    ):
        self.path = path if path is not None else DEFAULT_PATH
        self.explicit = path is not None
        self.env = os.environ if env is None else env
        self.config = self._load(overrides or {})

    def _defaults(self) -> Dict[str, Any]:
        return {
            "metric": "balanced_accuracy",
            "budget": 60.0,
            "seed": 0,
            "workers": 1,
            "cache_mib": 512,
            "metabase": "",
            "use_prior": True,
            "valid_fraction": 0.2,
            "eval_timeout": 10.0,
            "l_max": 5,
            "c_overfit": 2.0,
            "w": 0.6,
            "e_max": 3,
            "n_hpo_per_visit": 2,
            "pool_size": 50,
            "ensemble_rounds": 10,
            "max_iterations": 0,
            "hpo_warm_start": False,
            "missing_tokens": ",?,NA",
            "target": "class",
            "log_level": "INFO",
            "log_file": "",
        }

    def _coerce(self, key: str, raw: Any) -> Any:
        default = self._defaults()[key]
        value = raw.strip() if isinstance(raw, str) else raw
        try:
            # bool before int: bool is an int subclass
            if isinstance(default, bool):
                if isinstance(value, bool):
                    return value
                lowered = str(value).lower()
                if lowered in _TRUE:
                    return True
                if lowered in _FALSE:
                    return False
                raise ValueError(f"expected a boolean, got '{raw}'")
            if isinstance(default, int):
                return int(value)
            if isinstance(default, float):
                return float(value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid value for '{key}': {e}") from e
        return str(value)

    def _check_key(self, key: str, where: str) -> None:
        if key not in self._defaults():
            raise ConfigError(f"unknown configuration key '{key}' ({where})")

    def _read_file(self) -> Dict[str, str]:
        values: Dict[str, str] = {}
        with open(self.path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                text = line.strip()
                if not text or text.startswith("#"):
                    continue
                if "=" not in text:
                    raise ConfigError(f"{self.path}:{lineno}: expected 'key = value'")
                key, value = text.split("=", 1)
                key = key.strip()
                self._check_key(key, f"{self.path}:{lineno}")
                values[key] = value.split(" #", 1)[0].strip()
        return values

    def _load(self, overrides: Mapping[str, Any]) -> Dict[str, Any]:
        cfg = self._defaults()
        from_file: Dict[str, str] = {}
        if os.path.exists(self.path):
            from_file = self._read_file()
        elif self.explicit:
            raise ConfigError(f"config file not found: {self.path}")
        for key, value in from_file.items():
            cfg[key] = self._coerce(key, value)

        if "seed" not in from_file and self.env.get(SEED_ENV):
            cfg["seed"] = self._coerce("seed", self.env[SEED_ENV])

        for key, value in overrides.items():
            if value is None:
                continue
            self._check_key(key, "command line")
            cfg[key] = self._coerce(key, value)
        return cfg

    def get(self, key: str) -> Any:
        self._check_key(key, "lookup")
        return self.config[key]

    # Getters
    def get_metric(self) -> Metric:
        try:
            return Metric.from_name(self.config["metric"])
        except DataError as e:
            raise ConfigError(str(e)) from e

    def get_budget(self) -> float:
        return float(self.config["budget"])

    def get_seed(self) -> int:
        return int(self.config["seed"])

    def get_workers(self) -> int:
        return int(self.config["workers"])

    def get_metabase_path(self) -> Optional[str]:
        path = str(self.config["metabase"]).strip()
        return path or None

    def is_prior_enabled(self) -> bool:
        return bool(self.config["use_prior"])

    def get_missing_tokens(self) -> List[str]:
        return str(self.config["missing_tokens"]).split(",")

    def get_target(self) -> str:
        return str(self.config["target"])

    def get_log_level(self) -> str:
        return str(self.config["log_level"]).upper()

    def get_log_file(self) -> Optional[str]:
        path = str(self.config["log_file"]).strip()
        return path or None

    def get_policy_params(self) -> PolicyParams:
        try:
            return PolicyParams(
                l_max=int(self.config["l_max"]),
                c_overfit=float(self.config["c_overfit"]),
                w=float(self.config["w"]),
                e_max=int(self.config["e_max"]),
                t_max=self.get_budget(),
                n_hpo_per_visit=int(self.config["n_hpo_per_visit"]),
            )
        except SearchError as e:
            raise ConfigError(str(e)) from e

    def to_run_config(self) -> RunConfig:
        """Engine settings; rejects values outside their valid ranges"""
        valid_fraction = float(self.config["valid_fraction"])
        if not 0.0 < valid_fraction < 0.5:
            raise ConfigError(f"valid_fraction must lie in (0, 0.5), got {valid_fraction}")
        if float(self.config["eval_timeout"]) <= 0:
            raise ConfigError("eval_timeout must be positive")
        if int(self.config["cache_mib"]) < 1:
            raise ConfigError("cache_mib must be at least 1")
        return RunConfig(
            metric=self.get_metric(),
            t_max=self.get_budget(),
            params=self.get_policy_params(),
            seed=self.get_seed(),
            workers=self.get_workers(),
            cache_bytes=int(self.config["cache_mib"]) * MIB,
            metabase=self.get_metabase_path(),
            use_prior=self.is_prior_enabled(),
            valid_fraction=valid_fraction,
            eval_timeout=float(self.config["eval_timeout"]),
            pool_size=int(self.config["pool_size"]),
            ensemble_rounds=int(self.config["ensemble_rounds"]),
            max_iterations=int(self.config["max_iterations"]),
            hpo_warm_start=bool(self.config["hpo_warm_start"]),
        )
