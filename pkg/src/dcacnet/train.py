"""Optimisation, evaluation and checkpoints for the toy recogniser.

Parameters are rounded to float32 after every optimiser step, so a model
saved in the float32 tensor format and loaded back evaluates bit-identically.
"""

import csv
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tt
from .ctc import decode_beam, decode_greedy, frame_grad_norms, spike_diagnostics
from .data import stretch_video
from .errors import ConfigError, IntegrityError, NumericError, TrainingDivergedError
from .metrics import WerBreakdown, wer
from .srctc import total_loss

METRIC_COLUMNS = (
    "epoch",
    "loss_final",
    "loss_sr",
    "dev_wer",
    "stage2_zero_frac",
    "stage3_zero_frac",
    "stage4_zero_frac",
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 1e-3
    decay_epochs: tuple = (15, 22)
    decay: float = 0.2
    batch_size: int = 2
    beam: int = 10
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.epochs < 1 or self.batch_size < 1 or self.beam < 1:
            raise ConfigError("epochs, batch_size and beam must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be > 0 and weight_decay >= 0")

    def lr_at(self, epoch):
        """Learning rate for a 1-based epoch."""
        n = sum(1 for e in self.decay_epochs if epoch > e)
        return self.lr * self.decay**n

    def to_dict(self):
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def round_f32(model):
    for p in model.parameters():
        p.data = p.data.astype(np.float32).astype(np.float64)
    for _, bn in model.named_bn_states():
        bn.running_mean = bn.running_mean.astype(np.float32).astype(np.float64)
        bn.running_var = bn.running_var.astype(np.float32).astype(np.float64)


class Adam:
    """Adam with L2 weight decay added to the gradient; frozen tensors are skipped."""

    def __init__(self, params, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            g = g + self.weight_decay * p.data
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ------------------------------------------------------------ evaluation


@dataclass
class EvalReport:
    wer: float
    del_rate: float
    ins_rate: float
    sub_rate: float
    totals: WerBreakdown
    rows: list = field(default_factory=list)

    def to_dict(self):
        return {
            "wer": self.wer,
            "del": self.del_rate,
            "ins": self.ins_rate,
            "sub": self.sub_rate,
            "errors": self.totals.errors,
            "ref_length": self.totals.ref_length,
            "num_samples": len(self.rows),
        }

    def write_csv(self, fh):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "ref", "hyp", "substitutions", "insertions", "deletions", "ref_length"])
        for r in self.rows:
            b = r["breakdown"]
            writer.writerow(
                [r["id"], " ".join(map(str, r["ref"])), " ".join(map(str, r["hyp"])), b.substitutions, b.insertions, b.deletions, b.ref_length]
            )


def aggregate(pairs):
    """Corpus WER from (id, ref, hyp) triples: summed errors over summed reference length."""
    totals = WerBreakdown(0, 0, 0, 0)
    rows = []
    for sid, ref, hyp in pairs:
        b = wer(ref, hyp)
        totals = totals + b
        rows.append({"id": sid, "ref": list(ref), "hyp": list(hyp), "breakdown": b})
    if totals.ref_length == 0:
        raise ConfigError("cannot evaluate an empty split")
    n = totals.ref_length
    return EvalReport(totals.wer, totals.deletions / n, totals.insertions / n, totals.substitutions / n, totals, rows)


def predict(model, video, beam=10):
    with tt.no_grad():
        lp = model(video).log_probs.data
    return decode_greedy(lp) if beam == 1 else decode_beam(lp, beam)


def evaluate(model, samples, beam=10, stretch=None):
    """Beam-decode every sample in eval mode and aggregate the error counts."""
    was_training = model.training
    model.eval()
    try:
        pairs = []
        for s in samples:
            video = s.video if stretch is None else stretch_video(s.video, stretch)
            pairs.append((s.id, s.labels, predict(model, video, beam)))
    finally:
        model.train(was_training)
    return aggregate(pairs)


# ------------------------------------------------------------ checkpoints


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(config_dict):
    return hashlib.sha256(canonical_json(config_dict).encode("utf-8")).hexdigest()


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1, ensure_ascii=False)
        fh.write("\n")


def save_checkpoint(model, path, config, epoch, dev_wer):
    """Directory of ``<name>.dct`` tensors plus ``manifest.json``."""
    os.makedirs(path, exist_ok=True)
    files = {}
    for name, array in sorted(model.state_dict().items()):
        fname = f"{name}.dct"
        tt.save_tensor(os.path.join(path, fname), array)
        with open(os.path.join(path, fname), "rb") as fh:
            files[name] = {"file": fname, "sha256": hashlib.sha256(fh.read()).hexdigest()}
    manifest = {
        "epoch": int(epoch),
        "dev_wer": float(dev_wer),
        "config_hash": config_hash(config),
        "config": config,
        "tensors": files,
    }
    write_json(os.path.join(path, "manifest.json"), manifest)
    return manifest


def read_manifest(path):
    with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
        return json.load(fh)


def load_checkpoint(model, path, expected_hash=None):
    """Load tensors into ``model`` after checking hashes; returns the manifest."""
    manifest = read_manifest(path)
    if config_hash(manifest["config"]) != manifest["config_hash"]:
        raise IntegrityError("manifest config does not match its config_hash")
    if expected_hash is not None and expected_hash != manifest["config_hash"]:
        raise IntegrityError(f"checkpoint config_hash {manifest['config_hash'][:12]} != expected {expected_hash[:12]}")
    state = {}
    for name, entry in manifest["tensors"].items():
        fpath = os.path.join(path, entry["file"])
        with open(fpath, "rb") as fh:
            raw = fh.read()
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise IntegrityError(f"tensor {name} does not match its recorded digest")
        state[name] = tt.load_tensor(fpath)
    model.load_state_dict(state)
    return manifest


# ------------------------------------------------------------ training


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_final: float
    loss_sr: float
    dev_wer: float
    dev_del: float
    dev_ins: float
    stage_diagnostics: dict

    def csv_row(self):
        z = {s: self.stage_diagnostics.get(s, {}).get("zero_fraction", math.nan) for s in (2, 3, 4)}
        return [self.epoch, self.loss_final, self.loss_sr, self.dev_wer, z[2], z[3], z[4]]

    def to_dict(self):
        d = asdict(self)
        d["stage_diagnostics"] = {str(k): v for k, v in self.stage_diagnostics.items()}
        return d


def _diverged(msg, epoch, ckpt):
    return TrainingDivergedError(f"{msg} (epoch {epoch})", epoch=epoch, checkpoint=ckpt)


def train(model, train_samples, dev_samples, cfg=None, seed=0, out_dir=None, config=None, log=None):
    """Train in place; returns the list of :class:`EpochRecord`.

    With ``out_dir`` set, writes ``metrics.csv``, ``metrics.jsonl`` and the
    lowest-dev-WER checkpoint under ``out_dir/checkpoint``.  ``config`` is
    the run description embedded in the checkpoint manifest.
    """
    cfg = TrainConfig() if cfg is None else cfg
    config = {} if config is None else config
    if not train_samples or not dev_samples:
        raise ConfigError("training needs non-empty train and dev splits")
    rng = np.random.default_rng([int(seed), 7919])
    round_f32(model)
    opt = Adam(model.parameters(), cfg.weight_decay, cfg.betas, cfg.eps)
    head = getattr(model, "sr", None)
    ckpt = os.path.join(out_dir, "checkpoint") if out_dir else None
    best = math.inf
    saved = None
    records = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRIC_COLUMNS)
        open(os.path.join(out_dir, "metrics.jsonl"), "w").close()
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        model.train()
        order = rng.permutation(len(train_samples))
        loss_final = loss_sr = 0.0
        norms = {2: [], 3: [], 4: []}
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            model.zero_grad()
            for idx in batch:
                s = train_samples[idx]
                parts = {}
                try:
                    out = model(s.video)
                    loss = total_loss(out.log_probs, out.taps, s.labels, head, parts=parts)
                except NumericError as exc:
                    raise _diverged(f"non-finite activations: {exc}", epoch, saved) from None
                if not np.isfinite(loss.item()):
                    raise _diverged("loss is not finite", epoch, saved)
                (loss * (1.0 / len(batch))).backward()
                loss_final += parts["final"]
                loss_sr += parts["sr"]
                for tap in out.taps:
                    if tap.feature.grad is not None:
                        norms[tap.stage_id].append(frame_grad_norms(tap.feature.grad))
            opt.step(lr)
            round_f32(model)
            if not all(np.isfinite(p.data).all() for p in opt.params):
                raise _diverged("parameters are not finite", epoch, saved)
        n = len(train_samples)
        diags = {}
        for stage, series in norms.items():
            if series:
                per = [spike_diagnostics(x) for x in series]
                diags[stage] = {k: float(np.mean([d[k] for d in per])) for k in per[0]}
        report = evaluate(model, dev_samples, cfg.beam)
        rec = EpochRecord(epoch, lr, loss_final / n, loss_sr / n, report.wer, report.del_rate, report.ins_rate, diags)
        records.append(rec)
        if report.wer < best:
            best = report.wer
            if ckpt:
                save_checkpoint(model, ckpt, config, epoch, report.wer)
                saved = ckpt
        if out_dir:
            with open(os.path.join(out_dir, "metrics.csv"), "a", encoding="utf-8", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(rec.csv_row())
            with open(os.path.join(out_dir, "metrics.jsonl"), "a", encoding="utf-8") as fh:
                fh.write(canonical_json(rec.to_dict()) + "\n")
        if log:
            z = " ".join(f"z{s}={d['zero_fraction']:.3f}" for s, d in sorted(diags.items()))
            log(f"epoch {epoch:3d} lr {lr:.2e} loss {rec.loss_final:.4f} sr {rec.loss_sr:.4f} dev_wer {rec.dev_wer:.4f} {z}")
    return records


def stretch_robustness(model, samples, beam=10, factors=(0.8, 1.2)):
    """Dev WER on unstretched and time-stretched inputs, plus the largest absolute change."""
    base = evaluate(model, samples, beam).wer
    out = {"base": base}
    for f in factors:
        out[f"x{f:g}"] = evaluate(model, samples, beam, stretch=f).wer
    out["max_abs_delta"] = max(abs(out[f"x{f:g}"] - base) for f in factors)
    return out
