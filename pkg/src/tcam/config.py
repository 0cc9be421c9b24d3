"""Declarative run configuration for the command-line tools.

A run config is one JSON document::

    {
      "seed": 0,
      "synth":      {...SynthConfig fields...},
      "classifier": {"arch": "small_resnet", "width": 16, "input_size": 96, "epochs": 10, ...},
      "cam":        {"kind": "layercam", "target_layer": null},
      "train":      {...TrainConfig fields except seed...},
      "loss":       {...LossConfig fields...},
      "decoder":    {"width": 32},
      "tau": null,
      "pretrain":   null | {"epochs": 8, "synth": {...pool SynthConfig overrides...}},
      "paths":      {"data": null, "classifier": null, "cams": null, "decoder": null}
    }

Every section is optional and falls back to the defaults. Unknown keys are
rejected. ``paths`` entries point a stage at artifacts from another run (for
example one CAM cache shared by an n-sweep); when given they must exist.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .cams import CamMethod
from .data import SynthConfig
from .decoder import TrainConfig
from .losses import LossConfig

CLASSIFIER_DEFAULTS = {"arch": "small_resnet", "width": 16, "input_size": 96, "epochs": 10,
                       "lr": 0.05, "batch_size": 32, "momentum": 0.9, "weight_decay": 1e-4,
                       "backbone_weights": None}
PATH_KEYS = ("data", "classifier", "cams", "decoder")
TOP_KEYS = ("seed", "synth", "classifier", "cam", "train", "loss", "decoder", "tau", "pretrain",
            "paths")


class ConfigError(ValueError):
    pass


def pool_config(pretrain: dict) -> SynthConfig:
    """The pretraining pool: the package defaults with the config's overrides."""
    from .pipeline import POOL_DEFAULTS

    synth = {**POOL_DEFAULTS, **pretrain.get("synth", {})}
    if "object_size" in synth:
        synth["object_size"] = tuple(synth["object_size"])
    return SynthConfig(**synth)


def _check_keys(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {unknown}")


def _names(cls) -> list[str]:
    return [f.name for f in fields(cls)]


@dataclass
class RunConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    classifier: dict = field(default_factory=lambda: dict(CLASSIFIER_DEFAULTS))
    cam: CamMethod = field(default_factory=CamMethod)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    decoder: dict = field(default_factory=lambda: {"width": 32})
    tau: float | None = None
    pretrain: dict | None = None
    paths: dict = field(default_factory=lambda: dict.fromkeys(PATH_KEYS))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _check_keys("config", d, TOP_KEYS)
        synth = dict(d.get("synth", {}))
        _check_keys("synth", synth, _names(SynthConfig))
        if "object_size" in synth:
            synth["object_size"] = tuple(synth["object_size"])
        clf = dict(d.get("classifier", {}))
        _check_keys("classifier", clf, CLASSIFIER_DEFAULTS)
        cam = d.get("cam", {})
        _check_keys("cam", cam, _names(CamMethod))
        train = d.get("train", {})
        _check_keys("train", train, [n for n in _names(TrainConfig) if n != "seed"])
        loss = d.get("loss", {})
        _check_keys("loss", loss, _names(LossConfig))
        dec = d.get("decoder", {})
        _check_keys("decoder", dec, ["width"])
        paths = d.get("paths", {})
        _check_keys("paths", paths, PATH_KEYS)
        tau = d.get("tau")
        if tau is not None and not 0.0 < float(tau) < 1.0:
            raise ConfigError("tau must lie in (0, 1)")
        pretrain = d.get("pretrain")
        if pretrain is not None:
            _check_keys("pretrain", pretrain, ["epochs", "synth"])
            _check_keys("pretrain.synth", pretrain.get("synth", {}), _names(SynthConfig))
            pretrain = {"epochs": int(pretrain.get("epochs", 8)), "synth": dict(pretrain.get("synth", {}))}
        seed = int(d.get("seed", 0))
        try:
            if pretrain is not None:
                pool_config(pretrain)
            return cls(
                seed=seed,
                synth=SynthConfig(**synth),
                classifier={**CLASSIFIER_DEFAULTS, **clf},
                cam=CamMethod(**cam),
                train=TrainConfig(**{**train, "seed": seed}),
                loss=LossConfig(**loss),
                decoder={"width": 32, **dec},
                tau=None if tau is None else float(tau),
                pretrain=pretrain,
                paths={**dict.fromkeys(PATH_KEYS), **paths},
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None

    def with_seed(self, seed: int) -> "RunConfig":
        out = copy.deepcopy(self)
        out.seed = int(seed)
        out.train.seed = int(seed)
        return out

    def to_dict(self) -> dict:
        synth = asdict(self.synth)
        synth["object_size"] = list(synth["object_size"])
        train = asdict(self.train)
        train.pop("seed")
        return {
            "seed": self.seed, "synth": synth, "classifier": dict(self.classifier),
            "cam": asdict(self.cam), "train": train, "loss": self.loss.to_dict(),
            "decoder": dict(self.decoder), "tau": self.tau,
            "pretrain": copy.deepcopy(self.pretrain), "paths": dict(self.paths),
        }

    def config_hash(self) -> str:
        """Hash of everything except the seed; the run directory adds the seed."""
        body = self.to_dict()
        body.pop("seed")
        blob = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def run_name(self) -> str:
        return f"{self.config_hash()}-s{self.seed}"

    def check_paths(self) -> None:
        for key, value in self.paths.items():
            if value is not None and not Path(value).exists():
                raise ConfigError(f"paths.{key} does not exist: {value}")
