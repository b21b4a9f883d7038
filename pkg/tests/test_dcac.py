import numpy as np
import pytest

from dcacnet import tensor as tt
from dcacnet.dcac import (
    DcacConfig,
    DcacModule,
    cakg,
    cost_model,
    dcac_forward,
    dcac_residual,
    flop_terms,
    inter_frame_context,
    intra_frame_attention,
    param_terms,
)
from dcacnet.errors import ConfigError, ShapeError
from dcacnet.layers import conv3d
from dcacnet.reference import count_executed_flops, dcac_reference, module_arrays
from dcacnet.tensor import Tensor

from conftest import grad_close, numeric_grad


def randomize(mod, rng, gate=0.7):
    for p in mod.parameters():
        p.data = rng.uniform(-1, 1, p.shape)
    mod.gate.data = np.array([gate])
    return mod


def dense_conv(x, w, groups):
    """Grouped 3D convolution by direct summation over an explicitly padded input."""
    co, cg, kt, kh, kw = w.shape
    C, T, H, W = x.shape
    xp = np.pad(x, ((0, 0), (kt // 2,) * 2, (kh // 2,) * 2, (kw // 2,) * 2))
    out = np.zeros((co, T, H, W))
    og = co // groups
    for o in range(co):
        g = o // og
        for c in range(cg):
            for a in range(kt):
                for b in range(kh):
                    for d in range(kw):
                        out[o] += w[o, c, a, b, d] * xp[g * cg + c, a : a + T, b : b + H, d : d + W]
    return out


def test_config_validation():
    with pytest.raises(ConfigError):
        DcacConfig(4, 4, 3)
    with pytest.raises(ConfigError):
        DcacConfig(4, 4, 4, kernel=(2, 1, 1))
    with pytest.raises(ConfigError):
        DcacConfig(8, 8, 8, reduction=16)
    cfg = DcacConfig.depthwise(64, 7)
    assert (cfg.groups, cfg.kernel, cfg.num_experts, cfg.reduction) == (64, (7, 1, 1), 6, 16)


def test_zero_fc_gives_uniform_attention(rng):
    cfg = DcacConfig(4, 4, 2, kernel=(3, 1, 1), num_experts=3, reduction=2)
    mod = randomize(DcacModule(cfg, seed=1), rng)
    for fc in (mod.fc_shared, mod.fc_f, mod.fc_c, mod.fc_t, mod.fc_w):
        fc.w.data[:] = 0.0
    factors, w_intra = intra_frame_attention(Tensor(rng.normal(size=(4, 3, 2, 2))), mod)
    for a in factors[:3]:
        assert np.allclose(a.data, 0.5)
    assert np.allclose(factors.alpha_w.data, 1 / 3)
    mean_expert = np.mean([e.data for e in mod.experts], axis=0)
    for t in range(3):
        assert np.allclose(w_intra.data[t], 0.125 * mean_expert, atol=1e-14)


def test_single_expert_single_frame(rng):
    cfg = DcacConfig(4, 4, 4, num_experts=1, reduction=2)
    mod = randomize(DcacModule(cfg), rng)
    mod.eval()  # one frame cannot be batch-normalised
    factors, w_intra = intra_frame_attention(Tensor(rng.normal(size=(4, 1, 2, 2))), mod)
    assert factors.alpha_w.data.tolist() == [[1.0]]
    af, ac, at = (f.data[0] for f in factors[:3])
    expect = mod.experts[0].data * af[:, None, None, None, None] * ac[None, :, None, None, None] * at[None, None, :, None, None]
    assert np.allclose(w_intra.data[0], expect, atol=1e-15)


def test_attention_ranges(rng):
    cfg = DcacConfig(8, 8, 8, kernel=(5, 1, 1), num_experts=4, reduction=4)
    mod = randomize(DcacModule(cfg), rng)
    factors, _ = intra_frame_attention(Tensor(3 * rng.normal(size=(8, 6, 3, 3))), mod)
    assert np.allclose(factors.alpha_w.data.sum(axis=1), 1.0, atol=1e-10)
    for a in factors[:3]:
        assert np.all((a.data > 0) & (a.data < 1))


@pytest.mark.parametrize(
    "cfg,shape",
    [
        (DcacConfig(4, 4, 4, kernel=(3, 1, 1), num_experts=2, reduction=2), (4, 3, 2, 2)),
        (DcacConfig(2, 2, 1, kernel=(3, 1, 1), num_experts=2, reduction=1), (2, 4, 2, 2)),
        (DcacConfig(4, 4, 2, kernel=(3, 3, 1), num_experts=3, reduction=2, ctx_kernel=3), (4, 3, 3, 2)),
        (DcacConfig(4, 4, 4, kernel=(3, 1, 1), num_experts=2, reduction=2), (4, 5, 3, 3)),
    ],
)
def test_matches_loop_oracle(cfg, shape, rng):
    mod = randomize(DcacModule(cfg, seed=3), rng)
    x = rng.normal(size=shape)
    ref = dcac_reference(x, cfg, module_arrays(mod))
    factors, w_intra = intra_frame_attention(Tensor(x), mod)
    w_inter = inter_frame_context(Tensor(x), mod)
    assert np.abs(w_intra.data - ref["w_intra"]).max() < 1e-12
    assert np.abs(w_inter.data - ref["w_inter"]).max() < 1e-12
    assert np.abs(cakg(Tensor(x), mod).data - ref["w_cakg"]).max() < 1e-12
    assert np.abs(dcac_forward(Tensor(x), mod).data - ref["out"]).max() < 1e-10


def test_oracle_in_eval_mode(rng):
    cfg = DcacConfig(4, 4, 4, num_experts=2, reduction=2)
    mod = randomize(DcacModule(cfg), rng)
    mod.bn.running_mean = rng.normal(size=2)
    mod.bn.running_var = rng.uniform(0.5, 2, size=2)
    mod.eval()
    x = rng.normal(size=(4, 3, 2, 2))
    ref = dcac_reference(x, cfg, module_arrays(mod), training=False)
    assert np.abs(dcac_forward(Tensor(x), mod).data - ref["out"]).max() < 1e-10


def test_inter_degenerate_window(rng):
    cfg = DcacConfig(4, 4, 4, kernel=(1, 1, 1), num_experts=2, reduction=2)
    mod = randomize(DcacModule(cfg), rng)
    x = rng.normal(size=(4, 1, 2, 2))
    w = inter_frame_context(Tensor(x), mod).data
    pooled = mod.conv1.data.reshape(4, 4) @ x.mean(axis=(2, 3))[:, 0]
    assert np.allclose(w.reshape(-1), pooled @ mod.conv2.w.data, atol=1e-14)


def test_inter_constant_in_time(rng):
    cfg = DcacConfig(4, 4, 4, kernel=(3, 1, 1), num_experts=2, reduction=2)
    mod = randomize(DcacModule(cfg), rng)
    frame = rng.normal(size=(4, 1, 2, 2))
    w = inter_frame_context(Tensor(np.repeat(frame, 5, axis=1)), mod).data
    # interior frames see identical windows; boundary frames see zero padding
    for t in (2, 3):
        assert np.allclose(w[t], w[1], atol=1e-14)


def test_inter_translation_equivariance(rng):
    cfg = DcacConfig(4, 4, 4, kernel=(3, 1, 1), num_experts=2, reduction=2)
    mod = randomize(DcacModule(cfg), rng)
    x = np.zeros((4, 8, 2, 2))
    x[:, 2:4] = rng.normal(size=(4, 2, 2, 2))
    shifted = np.roll(x, 1, axis=1)
    a = inter_frame_context(Tensor(x), mod).data
    b = inter_frame_context(Tensor(shifted), mod).data
    assert np.allclose(b[2:7], a[1:6], atol=1e-14)


def test_cakg_identities(rng):
    cfg = DcacConfig(4, 4, 4, num_experts=2, reduction=2)
    mod = randomize(DcacModule(cfg), rng)
    x = Tensor(rng.normal(size=(4, 3, 2, 2)))
    w_inter = inter_frame_context(x, mod).data
    assert np.array_equal(w_inter * np.ones_like(w_inter), w_inter)
    mod.conv2.w.data[:] = 0.0
    assert not cakg(x, mod).data.any()


def test_dead_dynamic_branch_is_static_conv(rng):
    cfg = DcacConfig(4, 4, 2, kernel=(3, 3, 1), num_experts=2, reduction=2)
    mod = randomize(DcacModule(cfg), rng)
    x = rng.normal(size=(4, 4, 3, 2))
    w_zero = np.zeros((4,) + cfg.kernel_shape)
    out = dcac_forward(Tensor(x), mod, w_cakg=w_zero).data
    assert np.abs(out - dense_conv(x, mod.static.data, 2)).max() < 1e-12
    # zeroing the generator parameters has the same effect
    for p in mod.experts + [mod.conv2.w]:
        p.data[:] = 0.0
    out2 = dcac_forward(Tensor(x), mod).data
    assert np.abs(out2 - dense_conv(x, mod.static.data, 2)).max() < 1e-12


def test_identity_kernel(rng):
    cfg = DcacConfig(3, 3, 3, kernel=(1, 1, 1), num_experts=2, reduction=1)
    mod = DcacModule(cfg)
    mod.static.data = np.ones(cfg.kernel_shape)
    x = rng.normal(size=(3, 4, 2, 2))
    out = dcac_forward(Tensor(x), mod, w_cakg=np.zeros((4,) + cfg.kernel_shape)).data
    assert np.array_equal(out, x)


def test_forward_shape_errors(rng):
    mod = DcacModule(DcacConfig(4, 4, 4, reduction=2))
    with pytest.raises(ShapeError):
        dcac_forward(Tensor(np.ones((3, 2, 2, 2))), mod)
    with pytest.raises(ShapeError):
        dcac_forward(Tensor(np.ones((4, 2, 2, 2))), mod, w_cakg=np.zeros((3, 4, 1, 3, 1, 1)))


def test_residual_identity_and_linear_gate(rng):
    cfg = DcacConfig(4, 4, 4, num_experts=2, reduction=2)
    mod = DcacModule(cfg, seed=5)
    x = Tensor(rng.normal(size=(4, 5, 3, 3)))
    assert np.array_equal(dcac_residual(x, mod).data, x.data)
    mod.gate.data = np.array([1.0])
    for p in mod.experts + [mod.static, mod.conv2.w]:
        p.data[:] = 0.0
    assert np.array_equal(dcac_residual(x, mod).data, x.data)
    mod = randomize(DcacModule(cfg, seed=5), rng, gate=0.5)
    d = dcac_forward(x, mod).data
    assert np.allclose(dcac_residual(x, mod).data, x.data + 0.5 * d, atol=1e-15)


def test_residual_needs_square():
    mod = DcacModule(DcacConfig(4, 8, 4, reduction=2))
    with pytest.raises(ConfigError):
        dcac_residual(Tensor(np.ones((4, 2, 2, 2))), mod)


def test_grouped_conv_matches_dense(rng):
    x = rng.normal(size=(4, 3, 4, 4))
    w = rng.normal(size=(6, 2, 3, 3, 1))
    out = conv3d(Tensor(x), Tensor(w), groups=2).data
    assert np.abs(out - dense_conv(x, w, 2)).max() < 1e-12


def test_every_parameter_class_gradient(rng):
    cfg = DcacConfig(4, 4, 2, kernel=(3, 1, 1), num_experts=2, reduction=2, ctx_kernel=3)
    mod = randomize(DcacModule(cfg, seed=2), rng)
    x = Tensor(rng.normal(size=(4, 4, 2, 2)))
    r = rng.normal(size=x.shape)

    def f():
        return float((dcac_residual(x, mod).data * r).sum())

    mod.zero_grad()
    (dcac_residual(x, mod) * r).sum().backward()
    names = dict(mod.named_parameters())
    for prefix in ("experts", "fc_shared", "bn.gamma", "bn.beta", "fc_f", "fc_c", "fc_t", "fc_w", "conv1", "conv2", "static", "gate"):
        group = [(n, p) for n, p in names.items() if n.startswith(prefix)]
        assert group, prefix
        for n, p in group:
            assert grad_close(p.grad, numeric_grad(f, p.data)), n


# ------------------------------------------------------------ cost model


def test_static_flops_example():
    cfg = DcacConfig(64, 64, 1, kernel=(3, 3, 3), reduction=16)
    rep = cost_model(cfg, 8, 8, 8)
    assert rep.flops_static == 64 * 64 * 27 * 512 == 56_623_104


@pytest.mark.parametrize(
    "cfg,shape",
    [
        (DcacConfig(4, 4, 4, kernel=(3, 1, 1), num_experts=2, reduction=2), (4, 3, 2, 2)),
        (DcacConfig(4, 4, 2, kernel=(3, 3, 1), num_experts=3, reduction=2, ctx_kernel=3), (4, 2, 3, 2)),
        (DcacConfig(2, 4, 1, kernel=(1, 1, 3), num_experts=1, reduction=1), (2, 3, 1, 3)),
    ],
)
def test_exact_cost_equals_instrumented_count(cfg, shape, rng):
    mod = DcacModule(cfg)
    counts = count_executed_flops(mod, rng.normal(size=shape))
    terms = flop_terms(cfg, *shape[1:])
    assert counts == terms
    assert cost_model(cfg, *shape[1:]).flops_total == sum(counts.values())


def test_param_count_matches_module():
    for cfg in (DcacConfig(4, 4, 2, kernel=(3, 3, 1), num_experts=3, reduction=2, ctx_kernel=3), DcacConfig.depthwise(64, 11)):
        mod = DcacModule(cfg)
        assert cost_model(cfg, 4, 2, 2).params_total == sum(p.size for p in mod.parameters())
        assert sum(param_terms(cfg).values()) == sum(p.size for p in mod.parameters())


def test_cost_increasing_in_kt():
    totals = [cost_model(DcacConfig.depthwise(64, k), 100, 7, 7).flops_total for k in (1, 3, 5, 7, 9, 11, 13)]
    assert all(b > a for a, b in zip(totals, totals[1:]))


@pytest.mark.parametrize("C,kt,n", [(64, 3, 6), (128, 7, 6), (256, 13, 8), (96, 5, 12)])
def test_approximation_in_dominance_regime(C, kt, n):
    cfg = DcacConfig.depthwise(C, kt, num_experts=n)
    assert C >= 8 * max(n, kt)
    for H in (4, 7, 14):
        rep = cost_model(cfg, 100, H, H)
        assert abs(rep.flops_approx - rep.flops_total) / rep.flops_total < 0.15
