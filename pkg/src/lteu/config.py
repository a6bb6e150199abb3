"""Scenario parameters, presets and the keyed-text configuration format.

A configuration file is an INI document with up to five sections::

    [scene]        geometry, radio and WiFi parameters
    [types]        the user type grid and valuation scale
    [contract]     pricing and Monte-Carlo sample counts
    [matching]     file chunking, quotas and priority coefficients
    [experiment]   mechanism, sweep and replication settings

Every key is optional; missing keys take the defaults below, which
reproduce the reference deployment (20 BSs, 10 WAPs, 12 unlicensed
channels, 120 licensed resource blocks, 1 GHz, 1 km square, exponent 3).
List values are comma separated.  ``LTEU_SEED`` and ``LTEU_OUT`` in the
environment override the base seed and the output directory.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

MBPS = 1e6

# Required rate per type, in Mbps.
RATE_PRESETS = {
    "low": (0.0, 0.2, 0.4, 0.5, 0.6, 0.7),
    "high": (200.0, 250.0, 350.0, 450.0, 550.0, 650.0),
}

MECHANISMS = ("proposed", "complete-info", "uniform-price", "random")
SWEEP_VARIABLES = ("num_users", "num_bs")


@dataclass
class SceneParams:
    num_bs: int = 20
    num_waps: int = 10
    num_users: int = 200
    area_side: float = 1000.0
    path_loss_exponent: float = 3.0
    noise_psd_dbm_hz: float = -174.0
    licensed_rbs: int = 120
    unlicensed_channels: int = 12
    total_bandwidth_hz: float = 1e9
    unlicensed_channel_hz: float = 20e6
    bs_range: float = 200.0
    wap_range: float = 90.0
    wap_power_w: float = 0.1
    # Number of BSs sharing each licensed resource block.
    licensed_reuse: int = 2
    wifi_activity: float = 0.5
    # None -> derived so that one active WAP at its range triggers backoff.
    i_th_w: float | None = None
    power_cap_w: float | None = None
    # Per-link cap used only when the uncapped targets are jointly infeasible.
    fallback_power_cap_w: float = 40.0
    nominal_snr_db: float = 0.0
    log_base: str = "e"

    @property
    def rb_bandwidth_hz(self):
        return self.total_bandwidth_hz / self.licensed_rbs

    @property
    def noise_psd_w_hz(self):
        return 10.0 ** ((self.noise_psd_dbm_hz - 30.0) / 10.0)

    @property
    def interference_threshold(self):
        if self.i_th_w is not None:
            return self.i_th_w
        # Strictly below the level of a WAP at its range, so that WAP blocks.
        return 0.999 * self.wap_power_w * self.wap_range ** (-self.path_loss_exponent)

    def validate(self):
        for name in ("area_side", "path_loss_exponent", "total_bandwidth_hz",
                     "unlicensed_channel_hz", "bs_range", "wap_range"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"scene.{name} must be positive")
        for name in ("num_bs", "num_waps", "num_users", "licensed_rbs",
                     "unlicensed_channels"):
            if getattr(self, name) < 0:
                raise ConfigError(f"scene.{name} must be non-negative")
        if self.num_bs < 1:
            raise ConfigError("scene.num_bs must be at least 1")
        if self.licensed_reuse < 1:
            raise ConfigError("scene.licensed_reuse must be at least 1")
        if not 0.0 <= self.wifi_activity <= 1.0:
            raise ConfigError("scene.wifi_activity must lie in [0, 1]")
        if self.wap_power_w < 0:
            raise ConfigError("scene.wap_power_w must be non-negative")
        if self.power_cap_w is not None and self.power_cap_w <= 0:
            raise ConfigError("scene.power_cap_w must be positive when set")
        if not self.fallback_power_cap_w > 0:
            raise ConfigError("scene.fallback_power_cap_w must be positive")
        if self.log_base not in ("e", "2"):
            raise ConfigError("scene.log_base must be 'e' or '2'")


@dataclass
class TypeParams:
    rate_preset: str = "low"
    required_rates_mbps: tuple | None = None
    type_values: tuple | None = None
    type_probs: tuple | None = None
    eta_v: float = 1.0
    # Nominal licensed share per type; None -> k/K.
    alpha_policy: tuple | None = None

    @property
    def rates_mbps(self):
        if self.required_rates_mbps is not None:
            return tuple(float(r) for r in self.required_rates_mbps)
        return RATE_PRESETS[self.rate_preset]

    @property
    def num_types(self):
        return len(self.rates_mbps)

    @property
    def thetas(self):
        if self.type_values is not None:
            return tuple(float(t) for t in self.type_values)
        return tuple(float(k) for k in range(1, self.num_types + 1))

    @property
    def probs(self):
        if self.type_probs is not None:
            return tuple(float(p) for p in self.type_probs)
        k = self.num_types
        return tuple(1.0 / k for _ in range(k))

    @property
    def alphas(self):
        if self.alpha_policy is not None:
            return tuple(float(a) for a in self.alpha_policy)
        k = self.num_types
        return tuple((j + 1) / k for j in range(k))

    def validate(self):
        if self.required_rates_mbps is None and self.rate_preset not in RATE_PRESETS:
            raise ConfigError(f"unknown rate preset {self.rate_preset!r}")
        k = self.num_types
        if k < 1:
            raise ConfigError("at least one type is required")
        for name, seq in (("type_values", self.thetas), ("type_probs", self.probs),
                          ("alpha_policy", self.alphas)):
            if len(seq) != k:
                raise ConfigError(f"types.{name} must have {k} entries")
        if any(r < 0 for r in self.rates_mbps):
            raise ConfigError("required rates must be non-negative")
        if any(b <= a for a, b in zip(self.thetas, self.thetas[1:])):
            raise ConfigError("type values must be strictly increasing")
        if self.thetas[0] <= 0:
            raise ConfigError("type values must be positive")
        if any(p < 0 for p in self.probs) or abs(sum(self.probs) - 1.0) > 1e-12:
            raise ConfigError("type probabilities must be non-negative and sum to 1")
        if any(not 0.0 <= a <= 1.0 for a in self.alphas):
            raise ConfigError("alpha policy entries must lie in [0, 1]")
        if self.eta_v <= 0:
            raise ConfigError("types.eta_v must be positive")


@dataclass
class ContractParams:
    # Unlicensed chunk price as a fraction of the licensed chunk price.
    unlicensed_discount: float = 1.0
    cost_per_watt: float = 1.0
    type_samples: int = 8
    activity_samples: int = 32

    def validate(self):
        if not 0.0 <= self.unlicensed_discount <= 1.0:
            raise ConfigError("contract.unlicensed_discount must lie in [0, 1]")
        if self.cost_per_watt < 0:
            raise ConfigError("contract.cost_per_watt must be non-negative")
        if self.type_samples < 1 or self.activity_samples < 1:
            raise ConfigError("sample counts must be at least 1")


@dataclass
class MatchingParams:
    file_size_bits: float = 50e6
    chunk_size_bits: float = 5e6
    num_files: int = 100
    priority_coeffs: tuple = (1.0, 2.0, 4.0)
    pad_last_chunk: bool = False
    quota_licensed: int | None = None
    quota_unlicensed: int | None = None

    def validate(self):
        if self.chunk_size_bits <= 0:
            raise ConfigError("matching.chunk_size_bits must be positive")
        if self.file_size_bits < 0:
            raise ConfigError("matching.file_size_bits must be non-negative")
        if self.num_files < 1:
            raise ConfigError("matching.num_files must be at least 1")
        eta = tuple(float(x) for x in self.priority_coeffs)
        if len(eta) != 3 or any(x <= 0 for x in eta) or not eta[0] < eta[1] < eta[2]:
            raise ConfigError("priority_coeffs must be three increasing positive values")
        for name in ("quota_licensed", "quota_unlicensed"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ConfigError(f"matching.{name} must be non-negative")


@dataclass
class ExperimentParams:
    mechanism: str = "proposed"
    sweep_variable: str = "num_users"
    sweep_values: tuple = (200, 400, 600, 800, 1000)
    replications: int = 20
    base_seed: int = 0
    # Grow the population with a single type (index from 1); None = mixed.
    type_preset: int | None = None
    base_population: int = 0

    def validate(self):
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"mechanism must be one of {MECHANISMS}")
        if self.sweep_variable not in SWEEP_VARIABLES:
            raise ConfigError(f"sweep_variable must be one of {SWEEP_VARIABLES}")
        if len(self.sweep_values) == 0:
            raise ConfigError("sweep_values must be non-empty")
        if self.replications < 1:
            raise ConfigError("replications must be at least 1")
        if self.base_population < 0:
            raise ConfigError("base_population must be non-negative")


@dataclass
class Scenario:
    scene: SceneParams = field(default_factory=SceneParams)
    types: TypeParams = field(default_factory=TypeParams)
    contract: ContractParams = field(default_factory=ContractParams)
    matching: MatchingParams = field(default_factory=MatchingParams)
    experiment: ExperimentParams = field(default_factory=ExperimentParams)

    def validate(self):
        self.scene.validate()
        self.types.validate()
        self.contract.validate()
        self.matching.validate()
        self.experiment.validate()
        preset = self.experiment.type_preset
        if preset is not None and not 1 <= preset <= self.types.num_types:
            raise ConfigError("experiment.type_preset must name an existing type")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        sections = {}
        for f in fields(cls):
            sub_cls = type(getattr(cls(), f.name))
            raw = dict(data.get(f.name, {}))
            known = {g.name for g in fields(sub_cls)}
            unknown = set(raw) - known
            if unknown:
                raise ConfigError(f"unknown keys in [{f.name}]: {sorted(unknown)}")
            for key, value in raw.items():
                if isinstance(value, list):
                    raw[key] = tuple(value)
            sections[f.name] = sub_cls(**raw)
        return cls(**sections).validate()

    def replace(self, **sections):
        """Copy with some sections replaced by ``{key: value}`` updates."""
        kwargs = {}
        for f in fields(self):
            current = getattr(self, f.name)
            updates = sections.get(f.name)
            kwargs[f.name] = dataclasses.replace(current, **updates) if updates else current
        return Scenario(**kwargs)

    def content_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _coerce(raw, annotation_default):
    """Convert an INI string using the type of the field default."""
    text = raw.strip()
    if text.lower() in ("none", ""):
        return None
    if isinstance(annotation_default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(annotation_default, tuple) or "," in text:
        return tuple(float(x) for x in text.split(",") if x.strip())
    if isinstance(annotation_default, int):
        return int(float(text)) if float(text).is_integer() else float(text)
    if isinstance(annotation_default, float):
        return float(text)
    if isinstance(annotation_default, str):
        return text
    # Optional fields default to None: guess numeric first.
    try:
        number = float(text)
    except ValueError:
        return text
    return int(number) if number.is_integer() and "." not in text and "e" not in text.lower() else number


# Optional-by-default fields whose concrete type is a tuple or an int.
_TUPLE_FIELDS = {"required_rates_mbps", "type_values", "type_probs", "alpha_policy"}
_INT_FIELDS = {"quota_licensed", "quota_unlicensed", "type_preset"}


def parse_config(text):
    """Parse the keyed-text format into a validated :class:`Scenario`."""
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse configuration: {exc}") from exc
    defaults = Scenario()
    data = {}
    for section in parser.sections():
        if not hasattr(defaults, section):
            raise ConfigError(f"unknown section [{section}]")
        sub = getattr(defaults, section)
        values = {}
        for key, raw in parser.items(section):
            if not hasattr(sub, key):
                raise ConfigError(f"unknown key {section}.{key}")
            try:
                if key in _TUPLE_FIELDS:
                    value = _coerce(raw, ())
                elif key in _INT_FIELDS:
                    value = _coerce(raw, 0)
                else:
                    value = _coerce(raw, getattr(sub, key))
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc
            if key == "sweep_values" and value is not None:
                value = tuple(int(v) for v in (value if isinstance(value, tuple) else (value,)))
            values[key] = value
        data[section] = values
    return Scenario.from_dict(data)


def load_config(path, environ=None):
    """Read a configuration file and apply environment overrides."""
    environ = os.environ if environ is None else environ
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"configuration file not found: {path}")
    scenario = parse_config(path.read_text())
    if environ.get("LTEU_SEED"):
        try:
            seed = int(environ["LTEU_SEED"])
        except ValueError as exc:
            raise ConfigError("LTEU_SEED must be an integer") from exc
        scenario = scenario.replace(experiment={"base_seed": seed})
    return scenario


def dump_config(scenario):
    """Render a scenario back to the keyed-text format."""
    lines = []
    for section, values in scenario.to_dict().items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            if value is None:
                text = "none"
            elif isinstance(value, (list, tuple)):
                text = ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{key} = {text}")
        lines.append("")
    return "\n".join(lines)
