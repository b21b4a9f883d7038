"""Scalar-loop reference evaluation of a DCAC block, with operation counters.

Independent of the unfold/einsum path in :mod:`dcacnet.dcac`: every value is
produced by explicit index arithmetic over plain Python floats, and every
multiply-accumulate (or element touched by unfold/pooling/normalisation) is
counted under the stage name used by :func:`dcacnet.dcac.flop_terms`.
Meant for tiny shapes only.
"""

import math
from collections import Counter

import numpy as np


def module_arrays(params):
    """Plain-list copies of a :class:`~dcacnet.dcac.DcacModule`'s weights."""
    cfg = params.cfg
    C, kc = cfg.c_in, cfg.ctx_kernel
    return {
        "experts": [e.data.tolist() for e in params.experts],
        "fc_shared": params.fc_shared.w.data.tolist(),
        "bn_gamma": params.bn.gamma.data.tolist(),
        "bn_beta": params.bn.beta.data.tolist(),
        "bn_mean": params.bn.running_mean.tolist(),
        "bn_var": params.bn.running_var.tolist(),
        "bn_eps": params.bn.eps,
        "fc_f": params.fc_f.w.data.tolist(),
        "fc_c": params.fc_c.w.data.tolist(),
        "fc_t": params.fc_t.w.data.tolist(),
        "fc_w": params.fc_w.w.data.tolist(),
        "conv1": params.conv1.data.reshape(C, C, kc).tolist(),
        "conv2": params.conv2.w.data.tolist(),
        "static": params.static.data.tolist(),
        "gate": float(params.gate.data[0]),
    }


def _sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v)) if v >= 0 else math.exp(v) / (1.0 + math.exp(v))


def _fc(rows, w, count, key):
    d_in, d_out = len(w), len(w[0])
    out = []
    for row in rows:
        vec = []
        for j in range(d_out):
            acc = 0.0
            for i in range(d_in):
                acc += row[i] * w[i][j]
                count[key] += 1
            vec.append(acc)
        out.append(vec)
    return out


def intra(x, cfg, p, training=True, count=None):
    """Attention factors and W_intra (nested lists indexed [t][o][c][a][b][d])."""
    count = Counter() if count is None else count
    C, T, H, W = len(x), len(x[0]), len(x[0][0]), len(x[0][0][0])
    kt, kh, kw = cfg.kernel
    Co, cg, n = cfg.c_out, cfg.group_in, cfg.num_experts
    pooled = [[0.0] * C for _ in range(T)]
    for c in range(C):
        for t in range(T):
            acc = 0.0
            for h in range(H):
                for w in range(W):
                    acc += x[c][t][h][w]
                    count["gap_intra"] += 1
            pooled[t][c] = acc / (H * W)
    z = _fc(pooled, p["fc_shared"], count, "fc")
    hid = len(z[0])
    hrow = [[0.0] * hid for _ in range(T)]
    for j in range(hid):
        if training:
            mu = sum(z[t][j] for t in range(T)) / T
            var = sum((z[t][j] - mu) ** 2 for t in range(T)) / T
        else:
            mu, var = p["bn_mean"][j], p["bn_var"][j]
        for t in range(T):
            v = (z[t][j] - mu) / math.sqrt(var + p["bn_eps"]) * p["bn_gamma"][j] + p["bn_beta"][j]
            count["bn"] += 1
            hrow[t][j] = max(v, 0.0)
    alpha_f = [[_sigmoid(v) for v in r] for r in _fc(hrow, p["fc_f"], count, "fcs")]
    alpha_c = [[_sigmoid(v) for v in r] for r in _fc(hrow, p["fc_c"], count, "fcs")]
    alpha_t = [[_sigmoid(v) for v in r] for r in _fc(hrow, p["fc_t"], count, "fcs")]
    alpha_w = []
    for r in _fc(hrow, p["fc_w"], count, "fcs"):
        m = max(r)
        e = [math.exp(v - m) for v in r]
        s = sum(e)
        alpha_w.append([v / s for v in e])
    w_intra = []
    for t in range(T):
        frame = []
        for o in range(Co):
            oc = []
            for c in range(cg):
                ka = []
                for a in range(kt):
                    kb = []
                    for b in range(kh):
                        kd = []
                        for d in range(kw):
                            mix = 0.0
                            for i in range(n):
                                mix += alpha_w[t][i] * p["experts"][i][o][c][a][b][d]
                                count["mul1"] += 1
                            v = alpha_f[t][o] * alpha_c[t][c] * alpha_t[t][a] * mix
                            count["scale"] += 3
                            kd.append(v)
                        kb.append(kd)
                    ka.append(kb)
                oc.append(ka)
            frame.append(oc)
        w_intra.append(frame)
    return (alpha_f, alpha_c, alpha_t, alpha_w), w_intra


def inter(x, cfg, p, count=None):
    """W_inter by explicit zero-padded windows, indexed [t][o][c][a][b][d]."""
    count = Counter() if count is None else count
    C, T, H, W = len(x), len(x[0]), len(x[0][0]), len(x[0][0][0])
    kt, kh, kw = cfg.kernel
    Co, cg, kc = cfg.c_out, cfg.group_in, cfg.ctx_kernel
    half = kc // 2
    y = [[[[0.0] * W for _ in range(H)] for _ in range(T)] for _ in range(C)]
    for d in range(C):
        for t in range(T):
            for h in range(H):
                for w in range(W):
                    acc = 0.0
                    for c in range(C):
                        for j in range(kc):
                            src = t + j - half
                            val = x[c][src][h][w] if 0 <= src < T else 0.0
                            acc += p["conv1"][d][c][j] * val
                            count["conv1"] += 1
                    y[d][t][h][w] = acc
    pooled = [[0.0] * T for _ in range(C)]
    for c in range(C):
        for t in range(T):
            acc = 0.0
            for h in range(H):
                for w in range(W):
                    acc += y[c][t][h][w]
                    count["gap_inter"] += 1
            pooled[c][t] = acc / (H * W)
    half_t = kt // 2
    window = [[[0.0] * kt for _ in range(T)] for _ in range(C)]
    for c in range(C):
        for t in range(T):
            for j in range(kt):
                src = t + j - half_t
                window[c][t][j] = pooled[c][src] if 0 <= src < T else 0.0
                count["unfold_ctx"] += 1
    w2 = p["conv2"]
    w_inter = []
    for t in range(T):
        frame = [[[[[0.0] * kw for _ in range(kh)] for _ in range(kt)] for _ in range(cg)] for _ in range(Co)]
        for j in range(kt):
            m = 0
            for o in range(Co):
                for c in range(cg):
                    for b in range(kh):
                        for d in range(kw):
                            acc = 0.0
                            for ci in range(C):
                                acc += window[ci][t][j] * w2[ci][m]
                                count["conv2"] += 1
                            frame[o][c][j][b][d] = acc
                            m += 1
        w_inter.append(frame)
    return w_inter


def _neighbourhood(x, c, t, h, w, kernel, count):
    C, T, H, W = len(x), len(x[0]), len(x[0][0]), len(x[0][0][0])
    kt, kh, kw = kernel
    vals = []
    for a in range(kt):
        for b in range(kh):
            for d in range(kw):
                tt_, hh, ww = t + a - kt // 2, h + b - kh // 2, w + d - kw // 2
                inside = 0 <= tt_ < T and 0 <= hh < H and 0 <= ww < W
                vals.append(x[c][tt_][hh][ww] if inside else 0.0)
                count["unfold_x"] += 1
    return vals


def conv_loops(x, cfg, w_dyn, w_static, count=None):
    """Dual-branch grouped convolution by nested loops over every output element.

    ``w_dyn`` is indexed [t][o][c][a][b][d]; ``w_static`` [o][c][a][b][d].
    """
    count = Counter() if count is None else count
    C, T, H, W = len(x), len(x[0]), len(x[0][0]), len(x[0][0][0])
    kt, kh, kw = cfg.kernel
    Co, cg = cfg.c_out, cfg.group_in
    og = Co // cfg.groups
    nb = {}
    for c in range(C):
        for t in range(T):
            for h in range(H):
                for w in range(W):
                    nb[c, t, h, w] = _neighbourhood(x, c, t, h, w, cfg.kernel, count)
    out = np.zeros((Co, T, H, W))
    for o in range(Co):
        g = o // og
        for t in range(T):
            for h in range(H):
                for w in range(W):
                    dyn = 0.0
                    sta = 0.0
                    for c in range(cg):
                        vals = nb[g * cg + c, t, h, w]
                        k = 0
                        for a in range(kt):
                            for b in range(kh):
                                for d in range(kw):
                                    dyn += w_dyn[t][o][c][a][b][d] * vals[k]
                                    sta += w_static[o][c][a][b][d] * vals[k]
                                    count["conv3d"] += 1
                                    count["static"] += 1
                                    k += 1
                    out[o, t, h, w] = dyn + sta
    return out


def dcac_reference(x, cfg, p, training=True, count=None):
    """Full block by loops; returns dict of factors, kernels and output arrays."""
    count = Counter() if count is None else count
    x = np.asarray(x, dtype=float).tolist()
    factors, w_intra = intra(x, cfg, p, training=training, count=count)
    w_inter = inter(x, cfg, p, count=count)
    T = len(w_intra)
    w_cakg = np.asarray(w_inter) * np.asarray(w_intra)
    count["mul2"] += w_cakg.size
    out = conv_loops(x, cfg, w_cakg.tolist(), p["static"], count=count)
    return {
        "alpha_f": np.asarray(factors[0]),
        "alpha_c": np.asarray(factors[1]),
        "alpha_t": np.asarray(factors[2]),
        "alpha_w": np.asarray(factors[3]),
        "w_intra": np.asarray(w_intra),
        "w_inter": np.asarray(w_inter),
        "w_cakg": w_cakg,
        "out": out,
        "T": T,
        "counts": dict(count),
    }


def count_executed_flops(params, x):
    """Run the loop reference and return its per-stage operation counts."""
    res = dcac_reference(x, params.cfg, module_arrays(params))
    return res["counts"]
