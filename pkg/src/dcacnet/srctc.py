"""Auxiliary CTC supervision of intermediate stages.

Each supervised stage output goes through a light spatial downsampler
(one strided Conv2D + global average pooling), a light temporal model
(K5, P2, K5, P2) and a classifier, and contributes its own CTC loss.  The
total training loss is ``L_ctc(final) + lambda * sum_i L_ctc(stage i)``.

Classifier topologies (``classifier_mode``):

``shared_aux_only``
    one classifier shared by the auxiliary stages, a separate final one
``shared_frozen``
    as above, with the shared auxiliary classifier frozen at its init
``all_shared``
    one classifier object for the auxiliary stages and the final output
``unshared``
    a separate classifier everywhere
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .ctc import ctc_loss_tensor
from .errors import ConfigError, InfeasibleAlignmentError, ShapeError
from .layers import Conv1dSeq, Conv3d, Linear, Module

CLASSIFIER_MODES = ("shared_aux_only", "shared_frozen", "all_shared", "unshared")
STAGES = (2, 3, 4)


@dataclass(frozen=True)
class SrCtcConfig:
    lam: float = 0.1
    stages: tuple = STAGES
    classifier_mode: str = "all_shared"
    ltm_shared: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(sorted(int(s) for s in self.stages)))
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if not set(self.stages) <= set(STAGES):
            raise ConfigError(f"supervised stages must be a subset of {STAGES}, got {self.stages}")
        if self.classifier_mode not in CLASSIFIER_MODES:
            raise ConfigError(f"unknown classifier_mode {self.classifier_mode!r}")

    def to_dict(self):
        return {
            "lambda": self.lam,
            "stages": list(self.stages),
            "classifier_mode": self.classifier_mode,
            "ltm_shared": self.ltm_shared,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            lam=float(d.get("lambda", 0.1)),
            stages=tuple(d.get("stages", STAGES)),
            classifier_mode=d.get("classifier_mode", "all_shared"),
            ltm_shared=bool(d.get("ltm_shared", True)),
        )


@dataclass
class StageTap:
    stage_id: object
    feature: tt.Tensor
    supervised: bool = False


class Lsd(Module):
    """Strided Conv2D to a ``grid x grid`` map with ``dim`` channels, then GAP."""

    def __init__(self, c_in, height, width, dim, seed, name, grid=None):
        grid = min(7, height) if grid is None else grid
        if height < grid or width < grid:
            raise ConfigError(f"feature {height}x{width} is smaller than the {grid}x{grid} grid")
        self._kernel = (1, height // grid, width // grid)
        self._omit = height == grid and width == grid and c_in == dim
        self.conv = None
        if not self._omit:
            self.conv = Conv3d(c_in, dim, self._kernel, seed, name, stride=self._kernel, padding=(0, 0, 0))
        self._dim = dim

    def __call__(self, x):
        if self.conv is not None:
            x = self.conv(x)
        C, T = x.shape[:2]
        return tt.global_avg_pool(x, (2, 3)).reshape(C, T).transpose(1, 0)


def lsd(x, module):
    return module(x)


class Ltm(Module):
    """Conv1D(k5) -> ReLU -> MaxPool(2) -> Conv1D(k5) -> ReLU -> MaxPool(2)."""

    def __init__(self, d_in, dim, seed, name):
        self.conv_a = Conv1dSeq(d_in, dim, 5, seed, f"{name}.conv_a")
        self.conv_b = Conv1dSeq(dim, dim, 5, seed, f"{name}.conv_b")

    def __call__(self, x):
        if x.shape[0] < 4:
            raise ShapeError(f"temporal model needs >= 4 frames, got {x.shape[0]}")
        x = tt.max_pool_time(tt.relu(self.conv_a(x)), 2)
        return tt.max_pool_time(tt.relu(self.conv_b(x)), 2)


def ltm(x, module):
    return module(x)


def stage_logits(x, classifier):
    """Per-frame log-probabilities from a (possibly shared) classifier."""
    return tt.log_softmax(classifier(x), axis=-1)


class SrCtcHead(Module):
    """Training-only auxiliary branches for the configured stages.

    ``stage_shapes`` maps stage id -> (channels, height, width).
    """

    def __init__(self, cfg, stage_shapes, num_classes, final_classifier, seed, lsd_dim=512, ltm_dim=1024, grid=None):
        self._cfg = cfg
        self.lsd = {
            str(s): Lsd(*stage_shapes[s], lsd_dim, seed, f"sr.lsd.{s}", grid=grid) for s in cfg.stages
        }
        if cfg.ltm_shared:
            shared = Ltm(lsd_dim, ltm_dim, seed, "sr.ltm")
            self.ltm = {str(s): shared for s in cfg.stages}
        else:
            self.ltm = {str(s): Ltm(lsd_dim, ltm_dim, seed, f"sr.ltm.{s}") for s in cfg.stages}
        mode = cfg.classifier_mode
        if mode == "all_shared":
            if final_classifier.w.shape[0] != ltm_dim:
                raise ConfigError("all_shared needs the final classifier input to equal ltm_dim")
            self.classifier = {str(s): final_classifier for s in cfg.stages}
        elif mode in ("shared_aux_only", "shared_frozen"):
            aux = Linear(ltm_dim, num_classes, seed, "sr.classifier")
            if mode == "shared_frozen":
                aux.w.requires_grad = False
                aux.b.requires_grad = False
            self.classifier = {str(s): aux for s in cfg.stages}
        else:
            self.classifier = {str(s): Linear(ltm_dim, num_classes, seed, f"sr.classifier.{s}") for s in cfg.stages}

    @property
    def cfg(self):
        return self._cfg

    def stage_log_probs(self, tap):
        key = str(tap.stage_id)
        x = self.lsd[key](tap.feature)
        x = self.ltm[key](x)
        return stage_logits(x, self.classifier[key])


def sr_ctc_loss(taps, target, head, per_stage=None):
    """Sum of CTC losses over the supervised taps; zero when none are supervised."""
    total = None
    for tap in taps:
        if not tap.supervised:
            continue
        try:
            loss = ctc_loss_tensor(head.stage_log_probs(tap), target)
        except InfeasibleAlignmentError as exc:
            raise InfeasibleAlignmentError(f"stage {tap.stage_id}: {exc}") from None
        if per_stage is not None:
            per_stage[tap.stage_id] = loss.item()
        total = loss if total is None else total + loss
    return tt.Tensor(np.zeros(1)) if total is None else total


def total_loss(final_log_probs, taps, target, head=None, lam=None, parts=None):
    """``L_ctc(final) + lambda * L_sr``; the auxiliary sum is skipped when lambda is 0."""
    final = ctc_loss_tensor(final_log_probs, target)
    if parts is not None:
        parts["final"] = final.item()
        parts["sr"] = 0.0
    if head is None:
        return final
    lam = head.cfg.lam if lam is None else lam
    if lam == 0:
        return final
    stage_losses = {}
    sr = sr_ctc_loss(taps, target, head, per_stage=stage_losses)
    if parts is not None:
        parts["sr"] = sr.item()
        parts["stages"] = stage_losses
    return final + lam * sr
