"""Experiment configuration: YAML files, shipped presets and environment overrides.

Schema (all sections optional except where a stage needs them)::

    direction: drive2stare
    seed: 0
    deterministic: true
    output: runs/drive2stare
    data:     {source, target, test, channels, class_names}
    model:    ModelConfig fields (init_seed comes from ``seed``)
    loss:     LossConfig fields; fractions such as "4/3" are accepted
    train_da: TrainConfig fields for the Cycle-GAN stage (seed from ``seed``)
    train_seg: TrainConfig fields for the downstream segmenter
    crops:    {train_da, translate, test}: CropSpec dicts or null
    synth:    SyntheticSpec fields plus ``root`` (synthetic presets only)

String values may reference ``${output}``. Any key can be overridden from the
environment: ``SPCG_TRAIN_DA__TOTAL_EPOCHS=5`` sets ``train_da.total_epochs``.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field, replace
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Optional

import yaml

from .data.synthetic import SyntheticSpec
from .data.transforms import CropSpec
from .errors import MissingArtifactError, ValidationError
from .losses import LossConfig
from .models import ModelConfig
from .training import TrainConfig

ENV_PREFIX = "SPCG_"
CROP_STAGES = ("train_da", "translate", "test")
PRESETS = ("stare2drive", "drive2stare", "ct2mr", "mr2ct", "synthetic", "synthetic_cardiac")


def _number(v):
    """YAML 1.1 reads ``2e-4`` as a string; also accept fractions like ``4/3``."""
    if isinstance(v, str):
        try:
            return float(Fraction(v.strip()))
        except (ValueError, ZeroDivisionError):
            return v
    return v


def _coerce(d: dict) -> dict:
    return {k: _number(v) for k, v in d.items()}


def deep_merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def env_overrides(environ=None, prefix: str = ENV_PREFIX) -> dict:
    """Collect ``PREFIX_SECTION__KEY=value`` variables into a nested dict."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name, raw in environ.items():
        if not name.startswith(prefix):
            continue
        path = [p.lower() for p in name[len(prefix):].split("__") if p]
        if not path:
            continue
        node = out
        for p in path[:-1]:
            node = node.setdefault(p, {})
        node[path[-1]] = yaml.safe_load(raw)
    return out


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ValidationError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return resources.files("spcyclegan.presets").joinpath(f"{name}.yaml").read_text()


def load_raw(config_path=None, preset: Optional[str] = None, environ=None) -> dict:
    raw: dict = {}
    if preset:
        raw = yaml.safe_load(preset_text(preset)) or {}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ValidationError(f"config file {path} does not exist")
        raw = deep_merge(raw, yaml.safe_load(path.read_text()) or {})
    return deep_merge(raw, env_overrides(environ))


@dataclass
class ExperimentConfig:
    direction: str
    model: ModelConfig
    loss: LossConfig
    train_da: TrainConfig
    train_seg: TrainConfig
    output: Path
    source: Optional[Path] = None
    target: Optional[Path] = None
    test: Optional[Path] = None
    channels: int = 3
    class_names: dict = field(default_factory=dict)
    crops: dict = field(default_factory=dict)
    deterministic: bool = True
    seed: int = 0
    synth: Optional[SyntheticSpec] = None
    synth_root: Optional[Path] = None

    @property
    def num_label_classes(self) -> int:
        return 2 if self.model.num_classes == 1 else self.model.num_classes

    def require_data(self, *names: str) -> None:
        """Raise if any referenced dataset directory is missing."""
        for name in names:
            path = getattr(self, name)
            if path is None:
                raise ValidationError(f"data.{name} is not configured")
            if not Path(path).is_dir():
                hint = " (run the synth command first)" if self.synth is not None else ""
                raise MissingArtifactError(f"data.{name} directory {path} does not exist{hint}")

    def to_dict(self) -> dict:
        return {
            "direction": self.direction,
            "seed": self.seed,
            "deterministic": self.deterministic,
            "model": self.model.to_dict(),
            "loss": self.loss.to_dict(),
            "train_da": self.train_da.to_dict(),
            "train_seg": self.train_seg.to_dict(),
            "crops": {k: (v.to_dict() if v else None) for k, v in self.crops.items()},
        }


def _section(raw: dict, name: str) -> dict:
    sec = raw.get(name) or {}
    if not isinstance(sec, dict):
        raise ValidationError(f"config section {name!r} must be a mapping")
    return sec


def build_config(raw: dict, *, seed: Optional[int] = None, output=None,
                 deterministic: Optional[bool] = None) -> ExperimentConfig:
    """Validate a raw config mapping; CLI-level overrides win over file values."""
    raw = copy.deepcopy(raw)
    if seed is not None:
        raw["seed"] = seed
    if output is not None:
        raw["output"] = str(output)
    if deterministic is not None:
        raw["deterministic"] = deterministic
    if "output" not in raw:
        raise ValidationError("config needs an output directory (output: or --output)")
    out = Path(raw["output"])
    run_seed = int(raw.get("seed", 0))

    def subst(v):
        return v.replace("${output}", str(out)) if isinstance(v, str) else v

    try:
        loss = LossConfig(**_coerce(_section(raw, "loss")))
        model = ModelConfig.from_dict(dict(_coerce(_section(raw, "model")), init_seed=run_seed))
        train_da = TrainConfig.from_dict(dict(_coerce(_section(raw, "train_da")),
                                              loss=loss, seed=run_seed))
        train_seg = TrainConfig.from_dict(dict(_coerce(_section(raw, "train_seg")),
                                               loss=loss, seed=run_seed))
    except TypeError as exc:
        raise ValidationError(f"invalid config: {exc}") from exc

    crops_raw = _section(raw, "crops")
    unknown = set(crops_raw) - set(CROP_STAGES)
    if unknown:
        raise ValidationError(f"unknown crop stages {sorted(unknown)}; expected {CROP_STAGES}")
    crops = {stage: CropSpec.from_dict(crops_raw.get(stage)) for stage in CROP_STAGES}

    data = _section(raw, "data")
    paths = {k: Path(subst(data[k])) if data.get(k) else None for k in ("source", "target", "test")}
    channels = int(data.get("channels", model.image_channels))
    if channels != model.image_channels:
        raise ValidationError(f"data.channels={channels} disagrees with model.image_channels={model.image_channels}")

    synth = synth_root = None
    if raw.get("synth"):
        s = dict(_section(raw, "synth"))
        synth_root = Path(subst(s.pop("root", "${output}/data")))
        s.setdefault("seed", run_seed)
        synth = SyntheticSpec.from_dict(s)

    return ExperimentConfig(
        direction=str(raw.get("direction", "custom")),
        model=model,
        loss=loss,
        train_da=train_da,
        train_seg=train_seg,
        output=out,
        channels=channels,
        class_names={int(k): str(v) for k, v in (data.get("class_names") or {}).items()},
        crops=crops,
        deterministic=bool(raw.get("deterministic", True)),
        seed=run_seed,
        synth=synth,
        synth_root=synth_root,
        **paths,
    )


def load_config(config_path=None, preset: Optional[str] = None, *, seed=None, output=None,
                deterministic=None, environ=None) -> ExperimentConfig:
    if not config_path and not preset:
        raise ValidationError("give --config and/or --preset")
    raw = load_raw(config_path, preset, environ)
    return build_config(raw, seed=seed, output=output, deterministic=deterministic)


def with_zeta(cfg: TrainConfig, zeta: float) -> TrainConfig:
    return replace(cfg, loss=replace(cfg.loss, zeta=zeta))
