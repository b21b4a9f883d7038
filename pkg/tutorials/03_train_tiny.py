"""Train the toy model with and without intermediate CTC supervision for a few epochs."""

import dataclasses

from dcacnet.data import SyntheticGlossWorld
from dcacnet.model import ModelConfig, ToyModel
from dcacnet.srctc import SrCtcConfig
from dcacnet.train import TrainConfig, train

world = SyntheticGlossWorld()
train_set = world.make_split(0, "train", 40)
dev_set = world.make_split(0, "dev", 10)
tcfg = TrainConfig(epochs=4, decay_epochs=(3,))

for name, sr in (("baseline", None), ("with SR", SrCtcConfig())):
    model = ToyModel(dataclasses.replace(ModelConfig(), sr=sr))
    records = train(model, train_set, dev_set, tcfg, seed=0)
    last = records[-1]
    z2 = last.stage_diagnostics[2]["zero_fraction"]
    print(f"{name:9s} dev WER {last.dev_wer:.3f}  stage-2 zero fraction {z2:.4f}")
