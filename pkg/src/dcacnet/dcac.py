"""Dynamic context-aware convolution.

A dual-branch convolution over ``C_i x T x H x W`` features::

    out = conv(x; W_cakg[t]) + conv(x; W_static)

where frame ``t`` gets its own kernel ``W_cakg[t] = W_inter[t] * W_intra[t]``.
``W_intra`` mixes ``n`` shared experts with per-frame attention (SE style,
four heads); ``W_inter`` is generated from a temporal window of pooled
context around the frame.  The block is inserted residually with a scalar
gate initialised to zero, so a fresh block is an exact identity.

All convolutions run as unfold + weighted sum, frame by frame for the
dynamic branch.
"""

import dataclasses
import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as tt
from .errors import ConfigError, ShapeError
from .layers import Linear, Module, kaiming, module_rng
from .tensor import BnState, parameter


@dataclass(frozen=True)
class DcacConfig:
    c_in: int
    c_out: int
    groups: int
    kernel: tuple = (3, 1, 1)
    num_experts: int = 6
    reduction: int = 16
    # temporal kernel of the context Conv1D (C_i -> C_i) before pooling
    ctx_kernel: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        if min(self.c_in, self.c_out, self.groups, self.num_experts, self.reduction) < 1:
            raise ConfigError(f"non-positive field in {self}")
        if self.c_in % self.groups or self.c_out % self.groups:
            raise ConfigError(f"groups={self.groups} must divide c_in={self.c_in} and c_out={self.c_out}")
        if len(self.kernel) != 3 or any(k < 1 or k % 2 == 0 for k in self.kernel):
            raise ConfigError(f"kernel sizes must be odd and positive, got {self.kernel}")
        if self.ctx_kernel < 1 or self.ctx_kernel % 2 == 0:
            raise ConfigError(f"ctx_kernel must be odd, got {self.ctx_kernel}")
        if self.c_in // self.reduction < 1:
            raise ConfigError(f"c_in/r = {self.c_in}/{self.reduction} < 1")

    @classmethod
    def depthwise(cls, channels, k_t, **kw):
        """Deployment default: k_h = k_w = 1, G = C, n = 6, r = 16."""
        return cls(channels, channels, channels, (k_t, 1, 1), **kw)

    @property
    def group_in(self):
        return self.c_in // self.groups

    @property
    def hidden(self):
        return self.c_in // self.reduction

    @property
    def k_size(self):
        kt, kh, kw = self.kernel
        return kt * kh * kw

    @property
    def kernel_shape(self):
        return (self.c_out, self.group_in) + self.kernel

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["kernel"] = list(self.kernel)
        return d


class AttentionFactors(NamedTuple):
    alpha_f: tt.Tensor  # T x C_o, output-channel axis
    alpha_c: tt.Tensor  # T x C_i/G, input-channel axis
    alpha_t: tt.Tensor  # T x k_t, temporal kernel axis
    alpha_w: tt.Tensor  # T x n, expert mixture (softmax)


class KernelSet(NamedTuple):
    w_static: tt.Tensor
    w_intra: tt.Tensor
    w_inter: tt.Tensor
    w_cakg: tt.Tensor


class DcacModule(Module):
    """Parameters of one DCAC block (kernel generator, static kernel, gate)."""

    def __init__(self, cfg, seed=0, name="dcac"):
        self._cfg = cfg
        c, hid, n = cfg.c_in, cfg.hidden, cfg.num_experts
        kshape = cfg.kernel_shape
        fan_in = cfg.group_in * cfg.k_size
        rng = module_rng(seed, f"{name}.experts")
        self.experts = [parameter(kaiming(rng, kshape, fan_in)) for _ in range(n)]
        self.fc_shared = Linear(c, hid, seed, f"{name}.fc_shared", bias=False)
        self.bn = BnState(hid, name=f"{name}.bn")
        self.fc_f = Linear(hid, cfg.c_out, seed, f"{name}.fc_f", bias=False)
        self.fc_c = Linear(hid, cfg.group_in, seed, f"{name}.fc_c", bias=False)
        self.fc_t = Linear(hid, cfg.kernel[0], seed, f"{name}.fc_t", bias=False)
        self.fc_w = Linear(hid, n, seed, f"{name}.fc_w", bias=False)
        kc = cfg.ctx_kernel
        self.conv1 = parameter(kaiming(module_rng(seed, f"{name}.conv1"), (c, c, kc, 1, 1), c * kc))
        m = cfg.c_out * cfg.group_in * cfg.kernel[1] * cfg.kernel[2]
        self.conv2 = Linear(c, m, seed, f"{name}.conv2", bias=False)
        self.static = parameter(kaiming(module_rng(seed, f"{name}.static"), kshape, fan_in))
        self.gate = parameter(np.zeros(1))

    @property
    def cfg(self):
        return self._cfg

    def __call__(self, x):
        return dcac_residual(x, self)


def _check_input(x, cfg):
    if x.ndim != 4 or x.shape[0] != cfg.c_in:
        raise ShapeError(f"expected {cfg.c_in} x T x H x W input, got {x.shape}")


def intra_frame_attention(x, params):
    """Per-frame attention factors and the attention-weighted expert mixture."""
    cfg = params.cfg
    _check_input(x, cfg)
    C, T = x.shape[:2]
    pooled = tt.global_avg_pool(x, (2, 3)).reshape(C, T).transpose(1, 0)
    h = tt.relu(tt.batch_norm(params.fc_shared(pooled), params.bn, params.training))
    alpha_f = tt.sigmoid(params.fc_f(h))
    alpha_c = tt.sigmoid(params.fc_c(h))
    alpha_t = tt.sigmoid(params.fc_t(h))
    alpha_w = tt.softmax(params.fc_w(h), axis=-1)
    experts = tt.stack(params.experts, axis=0)
    mix = tt.einsum("tn,nocabd->tocabd", alpha_w, experts)
    o, cg, kt = cfg.c_out, cfg.group_in, cfg.kernel[0]
    w_intra = mix * alpha_f.reshape(T, o, 1, 1, 1, 1)
    w_intra = w_intra * alpha_c.reshape(T, 1, cg, 1, 1, 1)
    w_intra = w_intra * alpha_t.reshape(T, 1, 1, kt, 1, 1)
    return AttentionFactors(alpha_f, alpha_c, alpha_t, alpha_w), w_intra


def inter_frame_context(x, params):
    """Kernels initialised from each frame's temporal neighbourhood of pooled context."""
    cfg = params.cfg
    _check_input(x, cfg)
    C, T = x.shape[:2]
    kt, kh, kw = cfg.kernel
    kc = cfg.ctx_kernel
    ctx = tt.unfold3d(x, (kc, 1, 1), padding=(kc // 2, 0, 0))
    ctx = tt.einsum("ckthw,dck->dthw", ctx, params.conv1.reshape(C, C, kc))
    pooled = tt.global_avg_pool(ctx, (2, 3))  # C x T x 1 x 1
    windows = tt.unfold3d(pooled, (kt, 1, 1), padding=(kt // 2, 0, 0)).reshape(C, kt, T)
    cols = windows.transpose(2, 1, 0)  # T x k_t x C
    w = params.conv2(cols)  # T x k_t x (C_o * C_i/G * k_h * k_w)
    w = w.reshape(T, kt, cfg.c_out, cfg.group_in, kh, kw)
    return w.transpose(0, 2, 3, 1, 4, 5)


def cakg(x, params):
    """Per-frame dynamic kernels ``W_inter * W_intra`` (T x C_o x C_i/G x k)."""
    _, w_intra = intra_frame_attention(x, params)
    w_inter = inter_frame_context(x, params)
    return w_inter * w_intra


def generate_kernels(x, params):
    factors, w_intra = intra_frame_attention(x, params)
    w_inter = inter_frame_context(x, params)
    return factors, KernelSet(params.static, w_intra, w_inter, w_inter * w_intra)


def _neighbourhoods(x, cfg):
    kt, kh, kw = cfg.kernel
    cols = tt.unfold3d(x, cfg.kernel, padding=(kt // 2, kh // 2, kw // 2))
    C, K, T, H, W = cols.shape
    return cols.reshape(cfg.groups, cfg.group_in, K, T, H, W)


def dynamic_conv(cols, w_dyn, cfg):
    T = w_dyn.shape[0]
    G = cfg.groups
    wk = w_dyn.reshape(T, G, cfg.c_out // G, cfg.group_in, cfg.k_size)
    return tt.einsum("gckthw,tgock->gothw", cols, wk)


def static_conv(cols, w_static, cfg):
    G = cfg.groups
    wk = w_static.reshape(G, cfg.c_out // G, cfg.group_in, cfg.k_size)
    return tt.einsum("gckthw,gock->gothw", cols, wk)


def dcac_forward(x, params, w_cakg=None):
    """Dual-branch convolution; ``w_cakg`` overrides the generated kernels."""
    cfg = params.cfg
    _check_input(x, cfg)
    C, T, H, W = x.shape
    if w_cakg is None:
        w_cakg = cakg(x, params)
    w_cakg = tt.as_tensor(w_cakg)
    if w_cakg.shape != (T,) + cfg.kernel_shape:
        raise ShapeError(f"dynamic kernels {w_cakg.shape} do not match {(T,) + cfg.kernel_shape}")
    cols = _neighbourhoods(x, cfg)
    out = dynamic_conv(cols, w_cakg, cfg) + static_conv(cols, params.static, cfg)
    return out.reshape(cfg.c_out, T, H, W)


def dcac_residual(x, params):
    """``x + gate * DCAC(x)``; requires c_in == c_out."""
    cfg = params.cfg
    if cfg.c_in != cfg.c_out:
        raise ConfigError("residual DCAC needs c_in == c_out")
    return x + params.gate * dcac_forward(x, params)


# ------------------------------------------------------------- cost model

# counting convention: one FLOP per multiply-accumulate in linear maps and
# per element touched by unfold, pooling, normalisation and rescaling


@dataclass
class CostReport:
    config: dict
    T: int
    H: int
    W: int
    terms: dict
    flops_static: int
    flops_dynamic: int
    flops_total: int
    flops_dynamic_approx: float
    flops_approx: float
    param_terms: dict
    params_static: int
    params_dynamic: int
    params_total: int
    params_dynamic_approx: float
    params_approx: float

    def to_record(self):
        return {
            "config": self.config,
            "T": self.T,
            "H": self.H,
            "W": self.W,
            "flops_exact": self.flops_total,
            "flops_approx": self.flops_approx,
            "params_exact": self.params_total,
            "params_approx": self.params_approx,
        }

    def to_json(self):
        return json.dumps(self.to_record(), sort_keys=True) + "\n"


def flop_terms(cfg, T, H, W):
    """Every dynamic-branch FLOP term, keyed by stage name, plus the static conv."""
    if min(T, H, W) < 1:
        raise ShapeError("extents must be positive")
    ci, co, n = cfg.c_in, cfg.c_out, cfg.num_experts
    cg, hid, K = cfg.group_in, cfg.hidden, cfg.k_size
    kt, kh, kw = cfg.kernel
    thw = T * H * W
    return {
        "unfold_x": ci * thw * K,
        "gap_intra": ci * thw,
        "fc": ci * hid * T,
        "bn": hid * T,
        "fcs": hid * (cg + co + kt + n) * T,
        "mul1": n * co * cg * T * K,
        "scale": 3 * co * cg * T * K,
        "conv1": ci * ci * cfg.ctx_kernel * thw,
        "gap_inter": ci * thw,
        "unfold_ctx": ci * T * kt,
        "conv2": ci * cg * co * T * K,
        "mul2": cg * co * T * K,
        "conv3d": cg * co * thw * K,
        "static": co * cg * K * thw,
    }


def param_terms(cfg):
    ci, co, n = cfg.c_in, cfg.c_out, cfg.num_experts
    cg, hid, K = cfg.group_in, cfg.hidden, cfg.k_size
    kt, kh, kw = cfg.kernel
    return {
        "fc": ci * hid,
        "bn": 2 * hid,
        "fcs": hid * (cg + co + kt + n),
        "experts": n * co * cg * K,
        "conv1": ci * ci * cfg.ctx_kernel,
        "conv2": ci * cg * co * kh * kw,
        "static": co * cg * K,
        "gate": 1,
    }


def cost_model(cfg, T, H, W):
    """Exact term-by-term and dominant-term FLOP/parameter counts of one block."""
    terms = flop_terms(cfg, T, H, W)
    pterms = param_terms(cfg)
    ci, co, G = cfg.c_in, cfg.c_out, cfg.groups
    kt, kh, kw = cfg.kernel
    K, hw = cfg.k_size, H * W
    dyn_approx = ci * T * (ci * hw + co * K / G * (ci + hw))
    total_approx = ci * T * (ci * hw + co * K / G * (ci + 2 * hw))
    params_dyn_approx = ci * ci * (1 + co * kh * kw / G)
    params_approx = ci * co * kh * kw / G * (ci + kt) + ci * ci
    static = terms["static"]
    dynamic = sum(v for k, v in terms.items() if k != "static")
    p_static = pterms["static"]
    p_dynamic = sum(v for k, v in pterms.items() if k not in ("static", "gate"))
    return CostReport(
        config=cfg.to_dict(),
        T=T,
        H=H,
        W=W,
        terms=terms,
        flops_static=static,
        flops_dynamic=dynamic,
        flops_total=static + dynamic,
        flops_dynamic_approx=dyn_approx,
        flops_approx=total_approx,
        param_terms=pterms,
        params_static=p_static,
        params_dynamic=p_dynamic,
        params_total=p_static + p_dynamic + pterms["gate"],
        params_dynamic_approx=params_dyn_approx,
        params_approx=params_approx,
    )
