"""Pipeline configuration: defaults, INI loading and ``key=value`` overrides.

The file format is INI with two sections::

    [pipeline]
    threshold = 0.03125
    tau = 0.01
    luminance_fusion = true

    [scene]
    low_light = true
    translation = 0.1, 0.0, 0.0

Keys are the field names of :class:`PipelineConfig` and
:class:`~hvmflow.synthetic.SceneParams`. Overrides use ``name=value`` for
pipeline keys and ``scene.name=value`` for scene keys.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigError
from .synthetic import SceneParams


@dataclass(frozen=True)
class PipelineConfig:
    # loss weights for adversarial, consistency, pseudo-label and KL terms
    lambda_adv: float = 1.0
    lambda_consis: float = 0.1
    lambda_pse: float = 1.0
    lambda_kl: float = 0.5
    threshold: float = 1.0 / 32.0
    slices: int = 10
    knn: int = 5
    samples: int = 1000
    radius: int = 4
    patch: int = 2
    refine_rounds: int = 2
    clusters: int = 64
    cluster_iters: int = 10
    n_s: float = 16.0
    tau: float = 0.001
    occlusion_tau: float = None
    rho: float = 0.2
    rho_max: float = 0.3
    z_step: float = 0.05
    w_event: float = 1.0
    w_rgb: float = 1.0
    seed: int = 0
    luminance_fusion: bool = True
    structure_fusion: bool = True
    motion_fusion: bool = True
    scene: SceneParams = field(default_factory=SceneParams)

    def __post_init__(self):
        for name in ("lambda_adv", "lambda_consis", "lambda_pse", "lambda_kl",
                     "w_event", "w_rgb"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("threshold", "slices", "knn", "samples", "radius", "clusters",
                     "cluster_iters", "n_s", "tau", "rho", "rho_max", "z_step"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.patch < 0:
            raise ConfigError("patch must be >= 0")
        if self.occlusion_tau is not None and not self.occlusion_tau > 0:
            raise ConfigError("occlusion_tau must be positive")
        if self.w_event + self.w_rgb <= 0:
            raise ConfigError("w_event + w_rgb must be positive")

    @property
    def lambdas(self):
        return (self.lambda_adv, self.lambda_consis, self.lambda_pse, self.lambda_kl)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["scene"] = dataclasses.asdict(self.scene)
        return d


_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


def _coerce(cls, name, text):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if name not in fields:
        raise ConfigError(f"unknown key {name!r}")
    default = getattr(cls(), name) if cls is SceneParams else fields[name].default
    text = text.strip()
    try:
        if name == "occlusion_tau":
            return None if text.lower() in ("", "none", "auto") else float(text)
        if isinstance(default, bool):
            if text.lower() not in _BOOL:
                raise ValueError(text)
            return _BOOL[text.lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            vals = tuple(float(t) for t in text.replace(",", " ").split())
            if len(vals) != len(default):
                raise ValueError(f"expected {len(default)} values")
            return vals
    except ValueError as exc:
        raise ConfigError(f"bad value for {name!r}: {text!r} ({exc})") from None
    raise ConfigError(f"key {name!r} is not configurable")


def apply_overrides(cfg, pairs):
    """Return ``cfg`` updated by ``name=value`` / ``scene.name=value`` strings."""
    top, scene = {}, {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        key = key.strip()
        if key.startswith("scene."):
            k = key[len("scene."):]
            scene[k] = _coerce(SceneParams, k, value)
        elif key == "scene":
            raise ConfigError("scene is a section, set scene.<key> instead")
        else:
            top[key] = _coerce(PipelineConfig, key, value)
    try:
        if scene:
            top["scene"] = dataclasses.replace(cfg.scene, **scene)
        return dataclasses.replace(cfg, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, overrides=()):
    """Read an INI file (optional) and apply overrides on top of the defaults."""
    cfg = PipelineConfig()
    pairs = []
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (configparser.Error, UnicodeDecodeError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        for section in parser.sections():
            if section not in ("pipeline", "scene"):
                raise ConfigError(f"unknown section [{section}]")
            prefix = "scene." if section == "scene" else ""
            pairs += [f"{prefix}{k}={v}" for k, v in parser.items(section)]
    return apply_overrides(cfg, list(pairs) + list(overrides))


def dump_config(cfg):
    """INI text that :func:`load_config` reads back to an equal config."""
    lines = ["[pipeline]"]
    for f in dataclasses.fields(cfg):
        if f.name == "scene":
            continue
        lines.append(f"{f.name} = {_fmt(getattr(cfg, f.name))}")
    lines += ["", "[scene]"]
    for f in dataclasses.fields(cfg.scene):
        lines.append(f"{f.name} = {_fmt(getattr(cfg.scene, f.name))}")
    return "\n".join(lines) + "\n"


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    return repr(v)
