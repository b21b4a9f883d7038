"""Run configuration documents, hashing and ablation presets."""

import dataclasses
import json
import os
from dataclasses import dataclass
from typing import Optional

from .errors import ConfigError
from .model import ModelConfig, ToyModel
from .srctc import SrCtcConfig
from .train import TrainConfig, config_hash

SEED_ENV = "DCAC_SEED"


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a training run except file locations.

    ``model.seed`` is ignored; the run seed drives both initialisation and
    shuffling.
    """

    seed: int = 0
    model: ModelConfig = ModelConfig(sr=SrCtcConfig())
    train: TrainConfig = TrainConfig()

    @property
    def sr(self) -> Optional[SrCtcConfig]:
        return self.model.sr

    def model_config(self):
        return dataclasses.replace(self.model, seed=self.seed)

    def build_model(self):
        return ToyModel(self.model_config())

    def to_dict(self):
        model = self.model.to_dict()
        model.pop("seed")
        sr = model.pop("sr")
        return {"seed": int(self.seed), "model": model, "sr": sr, "train": self.train.to_dict()}

    @classmethod
    def from_dict(cls, d):
        known = {"seed", "model", "sr", "train"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        try:
            model = dict(d.get("model", {}))
            model.pop("seed", None)
            sr = d["sr"] if "sr" in d else SrCtcConfig().to_dict()
            model["sr"] = sr
            return cls(
                seed=int(d.get("seed", 0)),
                model=ModelConfig.from_dict(model),
                train=TrainConfig.from_dict(d.get("train", {})),
            )
        except TypeError as exc:
            raise ConfigError(f"invalid config: {exc}") from None

    @property
    def hash(self):
        return config_hash(self.to_dict())

    def replace(self, **model_changes):
        return dataclasses.replace(self, model=dataclasses.replace(self.model, **model_changes))


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return RunConfig.from_dict(doc)


def apply_seed_env(cfg, environ=None):
    environ = os.environ if environ is None else environ
    value = environ.get(SEED_ENV)
    if value is None or value == "":
        return cfg
    try:
        return dataclasses.replace(cfg, seed=int(value))
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {value!r}") from None


# ---------------------------------------------------------------- presets


def _sr(cfg, **changes):
    base = cfg.sr if cfg.sr is not None else SrCtcConfig()
    return cfg.replace(sr=dataclasses.replace(base, **changes))


def _presets():
    p = {
        "full": lambda c: _sr(c, stages=(2, 3, 4)).replace(dcac_after=(2, 3, 4)),
        "baseline": lambda c: c.replace(sr=None, dcac_after=()),
        "dcac-only": lambda c: c.replace(sr=None, dcac_after=(2, 3, 4)),
        "sr-only": lambda c: _sr(c).replace(dcac_after=()),
    }
    for L in ((3, 3, 3), (3, 5, 7), (3, 7, 11), (5, 7, 9), (5, 9, 13), (13, 13, 13)):
        p["table3-L-" + "-".join(map(str, L))] = lambda c, L=L: c.replace(L=L, dcac_after=(2, 3, 4))
    for name, stages in (
        ("none", ()),
        ("stage2", (2,)),
        ("stage3", (3,)),
        ("stage4", (4,)),
        ("stage34", (3, 4)),
        ("stage234", (2, 3, 4)),
    ):
        p[f"table4-{name}"] = lambda c, s=stages: c.replace(dcac_after=s, sr=None)
    for i, mode in enumerate(("shared_aux_only", "shared_frozen", "all_shared", "unshared"), start=1):
        p[f"table6-mode{i}"] = lambda c, m=mode: _sr(c, classifier_mode=m)
    for name, stages in (("stage4-only", (4,)), ("stage34", (3, 4)), ("stage234", (2, 3, 4))):
        p[f"table7-{name}"] = lambda c, s=stages: _sr(c, stages=s)
    return p


PRESETS = _presets()


def apply_preset(cfg, name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
    return PRESETS[name](cfg)
