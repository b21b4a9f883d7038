"""Dynamic context-aware convolution and stage-wise CTC supervision on a small numpy autodiff engine."""

from .config import PRESETS, RunConfig, apply_preset, load_config
from .ctc import (
    Vocabulary,
    collapse,
    ctc_grad,
    ctc_grad_logits,
    ctc_lattice,
    ctc_loss,
    decode_beam,
    decode_greedy,
    frame_grad_norms,
    spike_diagnostics,
)
from .data import Sample, SyntheticGlossWorld, generate_dataset, load_split
from .dcac import DcacConfig, DcacModule, cost_model, dcac_forward, dcac_residual
from .errors import (
    ConfigError,
    ConsistencyError,
    DcacError,
    DegenerateBatchError,
    InfeasibleAlignmentError,
    IntegrityError,
    NumericError,
    ShapeError,
    TensorFormatError,
    TrainingDivergedError,
)
from .metrics import WerBreakdown, wer
from .model import ModelConfig, ToyModel, forward
from .srctc import SrCtcConfig, SrCtcHead, sr_ctc_loss, total_loss
from .tensor import Tensor, backward, no_grad
from .train import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
