"""Small multi-seed training grids on the synthetic world."""

import dataclasses
import time

import numpy as np

from .data import SyntheticGlossWorld
from .model import ModelConfig, ToyModel
from .srctc import SrCtcConfig
from .train import TrainConfig, train

ARMS = {
    "dcac+sr": dict(dcac_after=(2, 3, 4), sr=SrCtcConfig(stages=(2, 3, 4))),
    "dcac": dict(dcac_after=(2, 3, 4), sr=None),
    "plain": dict(dcac_after=(), sr=None),
}


@dataclasses.dataclass
class RunSummary:
    arm: str
    seed: int
    final_dev_wer: float
    best_dev_wer: float
    stage2_zero_late: float
    seconds: float
    dev_wer_curve: list


def run_arm(arm, seed, n_train=200, n_dev=50, epochs=30, late=(20, 30), model=None, log=None):
    """Train one arm from scratch on the default world; ``late`` bounds the zero-fraction window."""
    world = SyntheticGlossWorld()
    train_set = world.make_split(seed, "train", n_train)
    dev_set = world.make_split(seed, "dev", n_dev)
    cfg = dataclasses.replace(model or ModelConfig(), seed=seed, **ARMS[arm])
    tcfg = TrainConfig(epochs=epochs)
    start = time.perf_counter()
    records = train(ToyModel(cfg), train_set, dev_set, tcfg, seed=seed, log=log)
    window = [r for r in records if late[0] <= r.epoch <= late[1]] or records[-1:]
    z2 = float(np.mean([r.stage_diagnostics.get(2, {}).get("zero_fraction", np.nan) for r in window]))
    return RunSummary(
        arm,
        seed,
        records[-1].dev_wer,
        min(r.dev_wer for r in records),
        z2,
        time.perf_counter() - start,
        [r.dev_wer for r in records],
    )


def run_grid(arms=tuple(ARMS), seeds=(0, 1, 2), **kwargs):
    return [run_arm(arm, seed, **kwargs) for arm in arms for seed in seeds]


def arm_means(runs):
    out = {}
    for arm in {r.arm for r in runs}:
        rs = [r for r in runs if r.arm == arm]
        out[arm] = {
            "final_dev_wer": float(np.mean([r.final_dev_wer for r in rs])),
            "stage2_zero_late": float(np.mean([r.stage2_zero_late for r in rs])),
            "seconds": float(sum(r.seconds for r in rs)),
        }
    return out
