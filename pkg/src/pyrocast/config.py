"""Run configuration: INI sections with typed defaults.

Every key has a default below; a config file may override any of them and
``section.key=value`` overrides from the command line win over the file.
Unknown sections or keys are rejected.
"""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .ca import CaParams, WindField
from .diffusion import DiffusionConfig
from .errors import InvalidConfig
from .metrics import DEFAULT_THRESHOLDS
from .unet import PAPER_CONFIG, NetConfig, reduced_config

_NET_FIELDS = {f.name: f for f in fields(NetConfig)}

DEFAULTS: dict[str, dict[str, object]] = {
    "run": {"master_seed": 0, "output_dir": "out"},
    "terrain": {"path": "", "height": 64, "width": 64, "seed": 0, "cell_size": 1.0, "relief": 1.0,
                "unburnable_fraction": 0.05, "correlation": 4.0},
    "ca": {"p_h": 0.58, "a_slope": 0.078, "wind_speed": 0.0, "wind_direction": 0.0, "c1": 0.045,
           "c2": 0.131, "n_steps": 50},
    "dataset": {"kind": "train", "n": 0, "m": 50, "stride": 10, "n_steps": 50},
    # empty betas follow the T-scaled default range
    "diffusion": {**DiffusionConfig().to_dict(), "beta_start": "", "beta_end": ""},
    # empty values fall back to the preset (image_size: to the data)
    "net": {"preset": "paper", **{name: "" for name in _NET_FIELDS}},
    "train": {"steps": 1000, "batch_size": 16, "lr": 1e-4, "grad_clip": 1.0, "checkpoint_every": 500,
              "seed": 0},
    "eval": {"M": 20, "epsilon": 0.2, "thresholds": ",".join(f"{t:g}" for t in DEFAULT_THRESHOLDS),
             "seed": 0, "mismatch_pngs": True},
}

# paper defaults for the dataset sizes, per kind
DATASET_SIZES = {"train": 900, "ensemble": 50}


def _convert(section: str, key: str, raw: str):
    default = DEFAULTS[section][key]
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise InvalidConfig(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]] = field(
        default_factory=lambda: {s: dict(kv) for s, kv in DEFAULTS.items()})

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    def set(self, section: str, key: str, raw: str) -> None:
        if section not in DEFAULTS:
            raise InvalidConfig(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise InvalidConfig(f"unknown key {key!r} in [{section}]")
        self.values[section][key] = _convert(section, key, raw)

    def override(self, assignment: str) -> None:
        """Apply a ``section.key=value`` override."""
        lhs, sep, value = assignment.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise InvalidConfig(f"override {assignment!r} is not of the form section.key=value")
        self.set(section, key, value)

    @property
    def master_seed(self) -> int:
        return int(self["run"]["master_seed"])

    @property
    def output_dir(self) -> Path:
        return Path(str(self["run"]["output_dir"]))

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for section, kv in self.values.items():
            cp[section] = {k: str(v) for k, v in kv.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode("utf-8")).hexdigest()[:16]

    # typed views ------------------------------------------------------

    def ca_params(self) -> CaParams:
        c = self["ca"]
        wind = WindField(speed=c["wind_speed"], direction_deg=c["wind_direction"], c1=c["c1"], c2=c["c2"])
        return CaParams(p_h=c["p_h"], a_slope=c["a_slope"], wind=wind, seed=self.master_seed)

    def diffusion_config(self) -> DiffusionConfig:
        d = dict(self["diffusion"])
        try:
            for key in ("beta_start", "beta_end"):
                d[key] = None if d[key] == "" else float(d[key])
        except ValueError:
            raise InvalidConfig(f"[diffusion] {key}: cannot parse {d[key]!r}") from None
        return DiffusionConfig(**d)

    def net_config(self, in_channels: int = 2, image_size: int | None = None) -> NetConfig:
        n = self["net"]
        preset = str(n["preset"]).lower()
        overrides = {k: v for k, v in n.items() if k != "preset" and v != ""}
        size = int(overrides.pop("image_size", image_size or PAPER_CONFIG.image_size))
        if image_size is not None and size != image_size:
            raise InvalidConfig(f"[net] image_size={size} but the data are {image_size}x{image_size}")
        if preset == "paper":
            base = NetConfig(image_size=size, in_channels=in_channels).to_dict()
        elif preset == "reduced":
            base = reduced_config(size, in_channels).to_dict()
        else:
            raise InvalidConfig(f"unknown net preset {preset!r} (paper or reduced)")
        for key, raw in overrides.items():
            kind = _NET_FIELDS[key].type
            try:
                if "tuple" in str(kind):
                    base[key] = tuple(int(v) for v in str(raw).split(",") if v.strip())
                elif "bool" in str(kind):
                    base[key] = str(raw).lower() in ("1", "true", "yes", "on")
                elif "float" in str(kind):
                    base[key] = float(raw)
                else:
                    base[key] = int(raw)
            except ValueError:
                raise InvalidConfig(f"[net] {key}: cannot parse {raw!r}") from None
        return NetConfig(**base)

    def thresholds(self) -> tuple[float, ...]:
        try:
            return tuple(float(v) for v in str(self["eval"]["thresholds"]).split(",") if v.strip())
        except ValueError:
            raise InvalidConfig(f"[eval] thresholds: {self['eval']['thresholds']!r}") from None


def load_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            with open(path, encoding="utf-8") as f:
                cp.read_file(f)
        except configparser.Error as exc:
            raise InvalidConfig(f"{path}: {exc}") from None
        for section in cp.sections():
            for key, raw in cp[section].items():
                cfg.set(section, key, raw)
    for assignment in overrides:
        cfg.override(assignment)
    return cfg
