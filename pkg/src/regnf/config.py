"""Pipeline configuration and its JSON round trip."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .coarse import CoarseConfig
from .fine import KernelParams, OptimizerConfig
from .sampling import ResamplerParams, SamplingConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RegistrationConfig:
    """Every knob of one registration run.

    ``scene_sampling`` overrides ``sampling`` for the scene side only, which
    is how single-view experiments are expressed. ``view_distance`` is the
    camera distance in units of the target's half diagonal.
    """

    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    scene_sampling: SamplingConfig | None = None
    coarse: CoarseConfig = field(default_factory=CoarseConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    view_distance: float = 2.5
    region_padding: float = 0.05

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "RegistrationConfig":
        d = dict(d or {})
        try:
            sampling = _build(SamplingConfig, d.pop("sampling", None))
            scene_sampling = d.pop("scene_sampling", None)
            scene_sampling = None if scene_sampling is None else _build(SamplingConfig, scene_sampling)
            coarse = _build(CoarseConfig, d.pop("coarse", None))
            opt = dict(d.pop("optimizer", None) or {})
            resampler = _build(ResamplerParams, opt.pop("resampler", None))
            kinit = opt.pop("kernel_init", None)
            kinit = None if kinit is None else _build(KernelParams, kinit)
            optimizer = _build(OptimizerConfig, opt, resampler=resampler, kernel_init=kinit)
            return cls(sampling=sampling, scene_sampling=scene_sampling, coarse=coarse,
                       optimizer=optimizer, **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RegistrationConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _build(klass, d, **extra):
    d = dict(d or {})
    names = {f.name for f in dataclasses.fields(klass)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {klass.__name__} keys: {sorted(unknown)}")
    for k, v in d.items():
        if isinstance(v, list):
            d[k] = tuple(v)
    d.update(extra)
    return klass(**d)
