"""Toy sequence recogniser: conv stages with DCAC insertions, temporal modules, classifier.

Input is one ``C x T x H x W`` clip.  Four stages (3x3 conv, ReLU, 2x2 average
pool) halve the spatial size each; a residual DCAC block can follow stages
2-4.  The last stage is pooled to a ``T x D`` sequence, downsampled 4x in
time by a K5-P2-K5-P2 stack, passed through a two-layer bidirectional Elman
recurrence and classified per frame.  When auxiliary CTC supervision is
configured, its branches live in ``model.sr`` and only run inside
:func:`~dcacnet.srctc.total_loss`.
"""

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple, Optional

from . import tensor as tt
from .dcac import DcacConfig, DcacModule
from .errors import ConfigError, ShapeError
from .layers import BiRnn, Conv1dSeq, Conv3d, Linear, Module
from .srctc import SrCtcConfig, SrCtcHead, StageTap

MIN_FRAMES = 16


@dataclass(frozen=True)
class ModelConfig:
    num_glosses: int = 12
    in_channels: int = 1
    image_size: int = 16
    widths: tuple = (8, 16, 32, 64)
    dcac_after: tuple = (2, 3, 4)
    # temporal kernel size per DCAC insertion after stages 2, 3, 4
    L: tuple = (3, 7, 11)
    num_experts: int = 6
    reduction: int = 16
    ctx_kernel: int = 1
    temporal_dim: int = 128
    rnn_hidden: int = 64
    rnn_layers: int = 2
    lsd_grid: Optional[int] = None
    sr: Optional[SrCtcConfig] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        object.__setattr__(self, "dcac_after", tuple(sorted(self.dcac_after)))
        object.__setattr__(self, "L", tuple(self.L))
        if len(self.widths) != 4 or len(self.L) != 3:
            raise ConfigError("need four stage widths and three DCAC kernel sizes")
        if not set(self.dcac_after) <= {2, 3, 4}:
            raise ConfigError("DCAC can follow stages 2, 3 and 4 only")
        if self.image_size % 16:
            raise ConfigError("image_size must be a multiple of 16 (four 2x poolings)")

    @property
    def num_classes(self):
        return self.num_glosses + 1

    def stage_shape(self, stage):
        size = self.image_size >> stage
        return (self.widths[stage - 1], size, size)

    def dcac_config(self, stage):
        c = self.widths[stage - 1]
        return DcacConfig.depthwise(
            c, self.L[stage - 2], num_experts=self.num_experts, reduction=self.reduction, ctx_kernel=self.ctx_kernel
        )

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["sr"] = None if self.sr is None else self.sr.to_dict()
        for key in ("widths", "dcac_after", "L"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        sr = d.pop("sr", None)
        return cls(sr=None if sr is None else SrCtcConfig.from_dict(sr), **d)


class ModelOutput(NamedTuple):
    log_probs: tt.Tensor
    taps: list


class ToyModel(Module):
    def __init__(self, cfg):
        self._cfg = cfg
        seed = cfg.seed
        c_prev = cfg.in_channels
        self.stages = []
        for i, width in enumerate(cfg.widths, start=1):
            self.stages.append(Conv3d(c_prev, width, (1, 3, 3), seed, f"stages.{i}"))
            c_prev = width
        self.dcac = {str(s): DcacModule(cfg.dcac_config(s), seed, f"dcac.{s}") for s in cfg.dcac_after}
        d = cfg.temporal_dim
        self.temporal_a = Conv1dSeq(cfg.widths[-1], d, 5, seed, "temporal_a")
        self.temporal_b = Conv1dSeq(d, d, 5, seed, "temporal_b")
        self.rnn = BiRnn(d, cfg.rnn_hidden, cfg.rnn_layers, seed, "rnn")
        self.classifier = Linear(2 * cfg.rnn_hidden, cfg.num_classes, seed, "classifier")
        self.sr = None
        if cfg.sr is not None:
            shapes = {s: cfg.stage_shape(s) for s in (2, 3, 4)}
            self.sr = SrCtcHead(
                cfg.sr,
                shapes,
                cfg.num_classes,
                self.classifier,
                seed,
                lsd_dim=cfg.widths[-1],
                ltm_dim=2 * cfg.rnn_hidden,
                grid=cfg.lsd_grid,
            )

    @property
    def cfg(self):
        return self._cfg

    def __call__(self, video):
        return forward(self, video)


def _pool2(x):
    C, T, H, W = x.shape
    return x.reshape(C, T, H // 2, 2, W // 2, 2).mean(axis=(3, 5))


def forward(model, video):
    """Final T' x V log-probs and the stage 2-4 taps."""
    x = tt.as_tensor(video)
    cfg = model.cfg
    if x.ndim != 4 or x.shape[0] != cfg.in_channels or x.shape[2:] != (cfg.image_size,) * 2:
        raise ShapeError(f"expected {cfg.in_channels} x T x {cfg.image_size} x {cfg.image_size}, got {x.shape}")
    if x.shape[1] < MIN_FRAMES:
        raise ShapeError(f"clip has {x.shape[1]} frames, need >= {MIN_FRAMES}")
    supervised = set(cfg.sr.stages) if cfg.sr is not None else set()
    taps = []
    for i, conv in enumerate(model.stages, start=1):
        x = _pool2(tt.relu(conv(x)))
        if str(i) in model.dcac:
            x = model.dcac[str(i)](x)
        if i >= 2:
            taps.append(StageTap(i, x, i in supervised))
    C, T = x.shape[:2]
    seq = tt.global_avg_pool(x, (2, 3)).reshape(C, T).transpose(1, 0)
    seq = tt.max_pool_time(tt.relu(model.temporal_a(seq)), 2)
    seq = tt.max_pool_time(tt.relu(model.temporal_b(seq)), 2)
    seq = model.rnn(seq)
    return ModelOutput(tt.log_softmax(model.classifier(seq), axis=-1), taps)


def output_frames(T):
    return (T // 2) // 2


def backbone_cost(cfg, T):
    """Multiply counts and parameter counts of everything except the DCAC blocks."""
    flops = params = 0
    c_prev = cfg.in_channels
    for i, width in enumerate(cfg.widths, start=1):
        size = cfg.image_size >> (i - 1)
        flops += width * c_prev * 9 * T * size * size
        params += width * c_prev * 9 + width
        c_prev = width
    d = cfg.temporal_dim
    flops += d * c_prev * 5 * T + d * d * 5 * (T // 2)
    params += d * c_prev * 5 + d + d * d * 5 + d
    t_out, d_in, h = output_frames(T), d, cfg.rnn_hidden
    for _ in range(cfg.rnn_layers):
        flops += 2 * t_out * (d_in * h + h * h)
        params += 2 * (d_in * h + h * h + h)
        d_in = 2 * h
    flops += t_out * d_in * cfg.num_classes
    params += d_in * cfg.num_classes + cfg.num_classes
    return {"flops": flops, "params": params}
