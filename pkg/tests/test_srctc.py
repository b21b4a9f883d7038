import numpy as np
import pytest

from dcacnet import tensor as tt
from dcacnet.ctc import ctc_loss, ctc_loss_tensor
from dcacnet.errors import ConfigError, InfeasibleAlignmentError, ShapeError
from dcacnet.layers import Linear
from dcacnet.model import ModelConfig, ToyModel
from dcacnet.srctc import (
    SrCtcConfig,
    SrCtcHead,
    StageTap,
    Lsd,
    Ltm,
    sr_ctc_loss,
    stage_logits,
    total_loss,
)
from dcacnet.tensor import Tensor, parameter

from conftest import grad_close, numeric_grad

SHAPES = {2: (4, 4, 4), 3: (6, 2, 2), 4: (8, 1, 1)}


def make_head(rng, mode="all_shared", stages=(2, 3, 4), lam=0.1, ltm_shared=True, V=4):
    final = Linear(12, V, 0, "classifier")
    head = SrCtcHead(SrCtcConfig(lam, stages, mode, ltm_shared), SHAPES, V, final, seed=0, lsd_dim=8, ltm_dim=12, grid=None)
    for p in head.parameters() + final.parameters():
        p.data = rng.uniform(-0.5, 0.5, p.shape)
    return head, final


def make_taps(rng, T=16, stages=(2, 3, 4)):
    return [StageTap(s, parameter(rng.normal(size=(SHAPES[s][0], T) + SHAPES[s][1:])), s in stages) for s in (2, 3, 4)]


def test_config_json_block():
    cfg = SrCtcConfig()
    assert cfg.to_dict() == {"lambda": 0.1, "stages": [2, 3, 4], "classifier_mode": "all_shared", "ltm_shared": True}
    assert SrCtcConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        SrCtcConfig(stages=(1, 2))
    with pytest.raises(ConfigError):
        SrCtcConfig(lam=-1)
    with pytest.raises(ConfigError):
        SrCtcConfig(classifier_mode="nope")


def test_lsd_shapes_and_degenerate_grid(rng):
    lsd = Lsd(8, 7, 7, 8, 0, "lsd")
    assert lsd.conv is None
    x = rng.normal(size=(8, 5, 7, 7))
    assert lsd(Tensor(x)).shape == (5, 8)
    lsd = Lsd(4, 7, 7, 8, 0, "lsd")
    assert lsd.conv.w.shape == (8, 4, 1, 1, 1) and lsd(Tensor(rng.normal(size=(4, 5, 7, 7)))).shape == (5, 8)
    lsd = Lsd(4, 14, 14, 8, 0, "lsd")
    assert lsd.conv.w.shape == (8, 4, 1, 2, 2)
    with pytest.raises(ConfigError):
        Lsd(4, 2, 2, 8, 0, "lsd", grid=4)


def test_lsd_constant_input(rng):
    lsd = Lsd(3, 4, 4, 5, 0, "lsd", grid=2)
    frame = rng.normal(size=(3, 1, 1, 1))
    x = np.broadcast_to(frame, (3, 2, 4, 4)).copy()
    out = lsd(Tensor(x)).data
    cell = lsd.conv(Tensor(x)).data[:, :, 0, 0].T
    assert np.allclose(out, cell, atol=1e-14)


def test_lsd_gradient(rng):
    lsd = Lsd(3, 4, 4, 5, 0, "lsd", grid=2)
    x = parameter(rng.normal(size=(3, 2, 4, 4)))
    r = rng.normal(size=(2, 5))
    f = lambda: float((lsd(x).data * r).sum())
    (lsd(x) * r).sum().backward()
    for p in [x] + lsd.parameters():
        assert grad_close(p.grad, numeric_grad(f, p.data))


def test_ltm_lengths(rng):
    ltm = Ltm(4, 6, 0, "ltm")
    assert ltm(Tensor(rng.normal(size=(8, 4)))).shape == (2, 6)
    assert ltm(Tensor(rng.normal(size=(100, 4)))).shape == (25, 6)
    with pytest.raises(ShapeError):
        ltm(Tensor(rng.normal(size=(3, 4))))


def test_ltm_pooling_selects_max():
    ltm = Ltm(1, 1, 0, "ltm")
    for conv in (ltm.conv_a, ltm.conv_b):
        conv.w.data = np.zeros((1, 1, 5, 1, 1))
        conv.w.data[0, 0, 2] = 1.0  # identity tap
        conv.b.data[:] = 0.0
    x = np.zeros((8, 1))
    x[5] = 3.0
    out = ltm(Tensor(x)).data.ravel()
    pooled = [max(x[i : i + 2, 0]) for i in range(0, 8, 2)]
    pooled = [max(pooled[i : i + 2]) for i in range(0, 4, 2)]
    assert out.tolist() == pooled == [0.0, 3.0]


def test_stage_logits_zero_classifier():
    clf = Linear(4, 5, 0, "c", init="zeros")
    out = stage_logits(Tensor(np.ones((3, 4))), clf).data
    assert np.allclose(out, -np.log(5))


def test_empty_stage_set_is_zero(rng):
    head, _ = make_head(rng, stages=())
    assert sr_ctc_loss(make_taps(rng, stages=()), [1, 2], head).item() == 0.0


def test_singleton_equals_standalone(rng):
    head, _ = make_head(rng, stages=(4,))
    taps = make_taps(rng, stages=(4,))
    alone = ctc_loss(head.stage_log_probs(taps[2]).data, [1, 2])[0]
    assert sr_ctc_loss(taps, [1, 2], head).item() == alone


def test_additivity(rng):
    head, _ = make_head(rng)
    taps = make_taps(rng)
    full = sr_ctc_loss(taps, [1, 3], head).item()
    parts = 0.0
    for i in range(3):
        single = [StageTap(t.stage_id, t.feature, j == i) for j, t in enumerate(taps)]
        parts += sr_ctc_loss(single, [1, 3], head).item()
    per_stage = sum(ctc_loss(head.stage_log_probs(t).data, [1, 3])[0] for t in taps)
    assert abs(full - parts) < 1e-12 and abs(full - per_stage) < 1e-12


def test_infeasible_stage_named(rng):
    head, _ = make_head(rng)
    taps = make_taps(rng, T=4)
    with pytest.raises(InfeasibleAlignmentError, match="stage 2"):
        sr_ctc_loss(taps, [1, 2, 3], head)


class Scripted:
    """Stand-in head whose per-stage log-probs give fixed CTC losses."""

    def __init__(self, cfg, losses):
        self.cfg = cfg
        self.losses = losses

    def stage_log_probs(self, tap):
        # one frame, target [1]: loss = -log p(1)
        p1 = np.exp(-self.losses[tap.stage_id])
        return Tensor(np.log([[1 - p1, p1]]))


def test_total_loss_scripted():
    final = Tensor(np.log([[1 - np.exp(-4.0), np.exp(-4.0)]]))
    taps = [StageTap(s, None, True) for s in (2, 3, 4)]
    head = Scripted(SrCtcConfig(lam=0.1), {2: 1.0, 3: 2.0, 4: 3.0})
    assert abs(total_loss(final, taps, [1], head).item() - 4.6) < 1e-12
    head = Scripted(SrCtcConfig(lam=0.0), {2: 1.0, 3: 2.0, 4: 3.0})
    assert total_loss(final, taps, [1], head).item() == total_loss(final, taps, [1]).item()


def test_total_loss_gradient_is_sum_of_terms(rng):
    head, final = make_head(rng)
    taps = make_taps(rng)
    seq = parameter(rng.normal(size=(4, 12)))
    target = [1, 2]

    def final_lp():
        return tt.log_softmax(final(seq), axis=-1)

    params = head.parameters() + [t.feature for t in taps] + [seq]
    tt.zero_grads(params)
    total_loss(final_lp(), taps, target, head).backward()
    combined = [p.grad.copy() for p in params]
    tt.zero_grads(params)
    ctc_loss_tensor(final_lp(), target).backward()
    (sr_ctc_loss(taps, target, head) * 0.1).backward()
    for g, p in zip(combined, params):
        assert np.allclose(g, p.grad, atol=1e-12)


# ------------------------------------------------ classifier topology


def test_topology_by_identity(rng):
    head, final = make_head(rng, mode="shared_aux_only")
    c = head.classifier
    assert c["2"] is c["3"] is c["4"] and c["2"] is not final
    head, final = make_head(rng, mode="shared_frozen")
    assert head.classifier["2"] is head.classifier["4"] and not head.classifier["2"].w.requires_grad
    head, final = make_head(rng, mode="all_shared")
    assert all(head.classifier[s] is final for s in "234")
    head, final = make_head(rng, mode="unshared")
    objs = [head.classifier[s] for s in "234"] + [final]
    assert len({id(o) for o in objs}) == 4


def test_all_shared_identical_inputs_identical_logits(rng):
    head, _ = make_head(rng)
    x = Tensor(rng.normal(size=(3, 12)))
    assert np.array_equal(stage_logits(x, head.classifier["2"]).data, stage_logits(x, head.classifier["4"]).data)


def test_shared_grad_accumulates_all_stages(rng):
    head, final = make_head(rng, mode="all_shared")
    taps = make_taps(rng)
    head.zero_grad()
    sr_ctc_loss(taps, [1, 2], head).backward()
    together = final.w.grad.copy()
    acc = np.zeros_like(together)
    for i in range(3):
        head.zero_grad()
        single = [StageTap(t.stage_id, t.feature, j == i) for j, t in enumerate(taps)]
        sr_ctc_loss(single, [1, 2], head).backward()
        assert np.abs(final.w.grad).sum() > 0
        acc += final.w.grad
    assert np.allclose(together, acc, atol=1e-12)


def test_frozen_classifier_gets_no_gradient(rng):
    head, final = make_head(rng, mode="shared_frozen")
    before = head.classifier["2"].w.data.copy()
    sr_ctc_loss(make_taps(rng), [1, 2], head).backward()
    assert head.classifier["2"].w.grad is None and head.classifier["2"].b.grad is None
    assert np.array_equal(before, head.classifier["2"].w.data)
    assert head.ltm["2"].conv_a.w.grad is not None


def test_ltm_sharing(rng):
    head, _ = make_head(rng, ltm_shared=True)
    assert head.ltm["2"] is head.ltm["3"]
    head, _ = make_head(rng, ltm_shared=False)
    assert head.ltm["2"] is not head.ltm["3"]


def test_all_shared_needs_matching_width():
    with pytest.raises(ConfigError):
        SrCtcHead(SrCtcConfig(), SHAPES, 4, Linear(10, 4, 0, "c"), 0, lsd_dim=8, ltm_dim=12)
