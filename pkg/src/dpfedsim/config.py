"""Experiment configuration: flat dotted keys with full defaulting.

A config file is plain text, one ``key = value`` per line, ``#`` for
comments. Every key has a default, and the fully resolved mapping is
written into each run's sidecar so runs are self-describing. Validation
failures name the offending field path (usage errors, CLI exit code 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .adversary import AttackConfig
from .detection import DetectorConfig
from .federation import FederationConfig
from .model import Architecture, OptimizerConfig
from .privacy import PrivacySpec


class ConfigError(ValueError):
    """Invalid configuration; carries the dotted field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.field_path = path


DEFAULTS: dict[str, object] = {
    "data.source": "synthetic",  # synthetic | csv | cache
    "data.path": "",
    "data.n_samples": 3000,
    "data.noise_scale": 0.05,
    "data.server_split": 0.02,
    "data.cache_dir": "",
    "model.hidden": "16,8",
    "federation.nodes": 100,
    "federation.participants": 30,
    "federation.episodes": 30,
    "federation.workers": 0,
    "privacy.epsilon": 0.7,
    "privacy.delta": 0.001,
    "privacy.clip": 1.0,
    "privacy.stop_threshold": 0.01,
    "attack.mode": "none",  # none | rmd | mpelm
    "attack.m": 0,
    "attack.theta": 0.0,
    "attack.rho": 0.1,
    "attack.gamma0": "",  # empty: defaults to privacy.epsilon
    "attack.r_hi": 1.5,
    "attack.r_lo": 0.5,
    "attack.gamma_fixed": "",  # empty: adaptive
    "attack.stop_fraction": 1.0,
    "detector.kind": "off",  # off | norm | accuracy | mix
    "detector.beta1": 1.0,
    "detector.beta2": 0.1,
    "detector.d_max": 10.0,
    "detector.orientation": "reversed",  # reversed | as_written
    "optimizer.kind": "mbgd",  # mbgd | adamax
    "optimizer.learning_rate": 0.001,
    "optimizer.batch_size": 32,
    "optimizer.local_steps": 5,
    "optimizer.early_stop": "on",
    "optimizer.patience": 3,
    "seed": 0,
}

_BOOLS = {"on": True, "off": False, "true": True, "false": False, "yes": True, "no": False}


def _coerce(key: str, raw, default) -> object:
    if isinstance(raw, str):
        raw = raw.strip()
    if raw == "" or raw is None:
        return ""
    try:
        if isinstance(default, bool):
            return _BOOLS[str(raw).lower()]
        if isinstance(default, int) and not isinstance(default, bool):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except (ValueError, KeyError) as exc:
        raise ConfigError(key, f"cannot parse {raw!r}") from exc
    return str(raw)


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; later keys override earlier ones."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.split("#", 1)[0].strip()
    return values


@dataclass
class ExperimentConfig:
    """Fully resolved experiment settings (one federation run)."""

    values: dict[str, object] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, overrides: dict) -> "ExperimentConfig":
        values = dict(DEFAULTS)
        for key, raw in overrides.items():
            if key not in DEFAULTS:
                raise ConfigError(key, "unknown configuration key")
            values[key] = _coerce(key, raw, DEFAULTS[key])
        cfg = cls(values=values)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_dict(parse_config_text(Path(path).read_text()))

    def __getitem__(self, key: str):
        return self.values[key]

    def resolved(self) -> dict[str, object]:
        """Every key with its effective value, defaults included."""
        out = dict(self.values)
        if out["attack.gamma0"] == "":
            out["attack.gamma0"] = out["privacy.epsilon"]
        return out

    def validate(self) -> None:
        v = self.values
        if v["data.source"] not in ("synthetic", "csv", "cache"):
            raise ConfigError("data.source", f"unknown source {v['data.source']!r}")
        if v["data.source"] in ("csv", "cache") and not v["data.path"]:
            raise ConfigError("data.path", "required when data.source is csv or cache")
        if v["data.source"] == "synthetic" and v["data.n_samples"] < v["federation.nodes"]:
            raise ConfigError("data.n_samples", "need at least one sample per node")
        k, n, m = v["federation.nodes"], v["federation.participants"], v["attack.m"]
        if not 1 <= n <= k:
            raise ConfigError("federation.participants", f"need 1 <= {n} <= federation.nodes ({k})")
        if not 0 <= m <= n:
            raise ConfigError("attack.m", f"need 0 <= {m} <= federation.participants ({n})")
        if v["attack.mode"] == "none" and m != 0:
            raise ConfigError("attack.m", "must be 0 when attack.mode is none")
        if v["attack.mode"] not in ("none", "rmd", "mpelm"):
            raise ConfigError("attack.mode", f"unknown mode {v['attack.mode']!r}")
        if v["federation.episodes"] < 1:
            raise ConfigError("federation.episodes", "must be >= 1")
        try:
            self.architecture()
        except (ValueError, TypeError) as exc:
            raise ConfigError("model.hidden", str(exc)) from exc
        for key, build in (
            ("privacy", self.privacy_spec),
            ("optimizer", self.optimizer_config),
            ("detector", self.detector_config),
        ):
            try:
                build()
            except ValueError as exc:
                raise ConfigError(key, str(exc)) from exc
        if v["attack.mode"] != "none":
            try:
                self.attack_config()
            except ValueError as exc:
                raise ConfigError("attack", str(exc)) from exc

    # Typed views over the flat mapping

    def architecture(self) -> Architecture:
        hidden = tuple(int(h) for h in str(self.values["model.hidden"]).split(",") if h.strip())
        if len(hidden) != 2 or any(h < 1 for h in hidden):
            raise ValueError(f"model.hidden must be two positive widths, got {self.values['model.hidden']!r}")
        return Architecture(hidden=hidden)

    def privacy_spec(self) -> PrivacySpec:
        return PrivacySpec(
            epsilon=self.values["privacy.epsilon"],
            delta=self.values["privacy.delta"],
            clip_c=self.values["privacy.clip"],
        )

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            kind=self.values["optimizer.kind"],
            learning_rate=self.values["optimizer.learning_rate"],
            batch_size=self.values["optimizer.batch_size"],
            local_steps=self.values["optimizer.local_steps"],
            early_stop=bool(_BOOLS.get(str(self.values["optimizer.early_stop"]).lower(), True)),
            patience=self.values["optimizer.patience"],
        )

    def federation_config(self) -> FederationConfig:
        return FederationConfig(
            k=self.values["federation.nodes"],
            n=self.values["federation.participants"],
            episodes=self.values["federation.episodes"],
            seed=self.values["seed"],
            privacy=self.privacy_spec(),
            optimizer=self.optimizer_config(),
            stop_threshold=self.values["privacy.stop_threshold"],
            workers=self.values["federation.workers"],
        )

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(
            kind=self.values["detector.kind"],
            beta1=self.values["detector.beta1"],
            beta2=self.values["detector.beta2"],
            d_max=self.values["detector.d_max"],
            orientation=self.values["detector.orientation"],
        )

    def attack_config(self) -> AttackConfig:
        gamma0 = self.values["attack.gamma0"]
        gamma_fixed = self.values["attack.gamma_fixed"]
        return AttackConfig(
            compromised=frozenset(range(self.values["attack.m"])),
            theta=self.values["attack.theta"],
            rho=self.values["attack.rho"],
            gamma0=self.values["privacy.epsilon"] if gamma0 == "" else float(gamma0),
            r_hi=self.values["attack.r_hi"],
            r_lo=self.values["attack.r_lo"],
            stop_fraction=self.values["attack.stop_fraction"],
            gamma_fixed=None if gamma_fixed == "" else float(gamma_fixed),
        )
