import csv
import dataclasses
import json

import numpy as np
import pytest

from dcacnet import tensor as tt
from dcacnet.config import PRESETS, RunConfig, apply_preset, apply_seed_env, load_config
from dcacnet.data import Sample, SyntheticGlossWorld
from dcacnet.errors import ConfigError, IntegrityError, TrainingDivergedError
from dcacnet.model import ModelConfig, ModelOutput, ToyModel
from dcacnet.srctc import SrCtcConfig
from dcacnet.train import (
    METRIC_COLUMNS,
    Adam,
    TrainConfig,
    aggregate,
    config_hash,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

SMALL = ModelConfig(widths=(4, 4, 8, 8), reduction=2, num_experts=2, temporal_dim=8, rnn_hidden=4)


def tiny_data(n_train=4, n_dev=2, seed=0):
    world = SyntheticGlossWorld(max_length=2, max_duration=9)
    return world.make_split(seed, "train", n_train), world.make_split(seed, "dev", n_dev)


class OracleModel:
    """Emits a peaked path spelling each sample's own labels (keyed by its first pixel)."""

    training = True

    def __init__(self, samples, V=13):
        self.table = {float(s.video.ravel()[0]): s.labels for s in samples}
        self.V = V

    def eval(self):
        self.training = False

    def train(self, mode=True):
        self.training = mode

    def __call__(self, video):
        labels = self.table[float(video.ravel()[0])]
        path = []
        for g in labels:
            path += [g, 0]
        lp = np.full((len(path), self.V), -20.0)
        lp[np.arange(len(path)), path] = 0.0
        return ModelOutput(tt.Tensor(lp), [])


def test_lr_schedule():
    cfg = TrainConfig()
    assert [cfg.lr_at(e) for e in (1, 15, 16, 22, 23, 30)] == pytest.approx([1e-3, 1e-3, 2e-4, 2e-4, 4e-5, 4e-5])
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)


def test_adam_minimises_quadratic():
    p = tt.parameter(np.array([3.0, -2.0]))
    opt = Adam([p])
    for _ in range(3000):
        p.zero_grad()
        (p * p).sum().backward()
        opt.step(0.01)
    assert np.abs(p.data).max() < 1e-2


def test_adam_skips_frozen_and_applies_decay():
    frozen = tt.Tensor(np.ones(2))
    p = tt.parameter(np.ones(2))
    opt = Adam([frozen, p], weight_decay=0.5)
    opt.step(0.1)  # no gradient: decay alone moves p
    assert np.array_equal(frozen.data, np.ones(2)) and np.all(p.data < 1)


def test_evaluate_perfect_model():
    samples = SyntheticGlossWorld().make_split(0, "dev", 3)
    rep = evaluate(OracleModel(samples), samples)
    assert (rep.wer, rep.del_rate, rep.ins_rate) == (0.0, 0.0, 0.0)


def test_aggregate_is_corpus_level():
    # per-sample WERs 1/1, 0/4, 1/5: the mean would be 0.4, the corpus rate is 2/10
    rep = aggregate([("a", [1], [2]), ("b", [1, 2, 3, 4], [1, 2, 3, 4]), ("c", [1, 2, 3, 4, 5], [1, 2, 3, 4])])
    assert rep.wer == pytest.approx(0.2) and rep.del_rate == pytest.approx(0.1)
    assert rep.totals.substitutions == 1 and rep.ins_rate == 0.0


def test_checkpoint_round_trip(tmp_path, rng):
    train_set, dev_set = tiny_data()
    cfg = RunConfig(model=SMALL)
    m = cfg.build_model()
    for p in m.parameters():
        p.data = rng.normal(size=p.shape).astype(np.float32).astype(np.float64)
    before = evaluate(m, dev_set)
    save_checkpoint(m, tmp_path / "ck", cfg.to_dict(), 3, before.wer)
    m2 = cfg.build_model()
    manifest = load_checkpoint(m2, tmp_path / "ck", cfg.hash)
    assert manifest["epoch"] == 3 and manifest["config_hash"] == cfg.hash
    after = evaluate(m2, dev_set)
    assert after.wer == before.wer and after.rows == before.rows
    for (n, a), (_, b) in zip(sorted(m.state_dict().items()), sorted(m2.state_dict().items())):
        assert np.array_equal(a, b), n


def test_checkpoint_integrity(tmp_path):
    cfg = RunConfig(model=SMALL)
    m = cfg.build_model()
    save_checkpoint(m, tmp_path / "ck", cfg.to_dict(), 1, 0.5)
    with pytest.raises(IntegrityError):
        load_checkpoint(cfg.build_model(), tmp_path / "ck", "0" * 64)
    victim = next((tmp_path / "ck").glob("classifier.w.dct"))
    raw = bytearray(victim.read_bytes())
    raw[-1] ^= 0xFF
    victim.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        load_checkpoint(cfg.build_model(), tmp_path / "ck")


def _run(tmp_path, name, model_cfg, seed=0, epochs=2):
    train_set, dev_set = tiny_data()
    cfg = RunConfig(seed=seed, model=model_cfg, train=TrainConfig(epochs=epochs, decay_epochs=(1,)))
    out = tmp_path / name
    recs = train(cfg.build_model(), train_set, dev_set, cfg.train, cfg.seed, out, cfg.to_dict())
    return recs, out


def test_training_outputs_and_determinism(tmp_path):
    cfg = dataclasses.replace(SMALL, sr=SrCtcConfig())
    recs, out = _run(tmp_path, "a", cfg)
    _, out2 = _run(tmp_path, "b", cfg)
    assert (out / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()
    assert (out / "metrics.jsonl").read_bytes() == (out2 / "metrics.jsonl").read_bytes()
    rows = list(csv.reader((out / "metrics.csv").open()))
    assert tuple(rows[0]) == METRIC_COLUMNS and len(rows) == 3
    manifest = json.loads((out / "checkpoint" / "manifest.json").read_text())
    assert {"epoch", "dev_wer", "config_hash"} <= set(manifest)
    assert manifest["dev_wer"] == min(r.dev_wer for r in recs)
    assert all(r.loss_sr > 0 for r in recs)


def test_disabled_sr_reproduces_baseline(tmp_path):
    base, _ = _run(tmp_path, "base", SMALL)
    off, _ = _run(tmp_path, "off", dataclasses.replace(SMALL, sr=SrCtcConfig(lam=0.0)))
    empty, _ = _run(tmp_path, "empty", dataclasses.replace(SMALL, sr=SrCtcConfig(stages=())))
    for a, b, c in zip(base, off, empty):
        assert a.csv_row() == b.csv_row() == c.csv_row()


class Exploding(ToyModel):
    """Poisons a weight after a set number of forward passes."""

    def __init__(self, cfg, after):
        super().__init__(cfg)
        self._calls = 0
        self._after = after

    def __call__(self, video):
        self._calls += 1
        if self._calls == self._after:
            self.classifier.w.data[:] = np.nan
        return super().__call__(video)


def test_divergence_keeps_last_checkpoint(tmp_path):
    train_set, dev_set = tiny_data()
    # epoch 1 runs 4 training + 2 dev forwards; poison early in epoch 2
    m = Exploding(SMALL, after=8)
    with pytest.raises(TrainingDivergedError) as info:
        train(m, train_set, dev_set, TrainConfig(epochs=3), 0, tmp_path, {})
    assert info.value.epoch == 2
    assert info.value.checkpoint == str(tmp_path / "checkpoint")
    assert json.loads((tmp_path / "checkpoint" / "manifest.json").read_text())["epoch"] == 1


# ------------------------------------------------------------ config


def test_run_config_round_trip_and_hash():
    cfg = RunConfig()
    doc = cfg.to_dict()
    assert RunConfig.from_dict(doc) == cfg
    assert cfg.hash == config_hash(json.loads(json.dumps(doc)))
    assert RunConfig(seed=1).hash != cfg.hash
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"lr": 1e-3, "momentum": 0.9}})


def test_seed_env_override():
    assert apply_seed_env(RunConfig(), {"DCAC_SEED": "7"}).seed == 7
    assert apply_seed_env(RunConfig(seed=2), {}).seed == 2
    with pytest.raises(ConfigError):
        apply_seed_env(RunConfig(), {"DCAC_SEED": "x"})


def test_presets():
    base = RunConfig()
    assert apply_preset(base, "table7-stage4-only").sr.stages == (4,)
    assert apply_preset(base, "table3-L-3-7-11").model.L == (3, 7, 11)
    assert apply_preset(base, "table3-L-13-13-13").model.L == (13, 13, 13)
    assert apply_preset(base, "table6-mode3").sr.classifier_mode == "all_shared"
    assert apply_preset(base, "table6-mode2").sr.classifier_mode == "shared_frozen"
    assert apply_preset(base, "table4-stage34").model.dcac_after == (3, 4)
    b = apply_preset(base, "baseline")
    assert b.sr is None and b.model.dcac_after == ()
    with pytest.raises(ConfigError):
        apply_preset(base, "table9")
    assert len(PRESETS) >= 19


def test_load_config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 4, "sr": None, "model": {"L": [5, 9, 13]}}))
    cfg = load_config(path)
    assert cfg.seed == 4 and cfg.sr is None and cfg.model.L == (5, 9, 13)
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)
