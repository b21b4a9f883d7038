"""Connectionist temporal classification in the log domain.

Blank is symbol 0.  The lattice runs over the blank-extended target
``[-, g1, -, g2, ..., -, gN, -]`` (length ``2N + 1``).  Both ``log_alpha``
and ``log_beta`` include the emission at their own frame, so
``log_alpha[t, s] + log_beta[t, s] - log y_t(ext[s])`` is the log-mass of
all valid paths through state ``s`` at frame ``t``.
"""

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .errors import ConfigError, ConsistencyError, InfeasibleAlignmentError, ShapeError

BLANK = 0
NEG_INF = -np.inf


@dataclass(frozen=True)
class Vocabulary:
    """Gloss symbols 1..num_glosses plus blank at index 0."""

    num_glosses: int
    names: tuple = ()
    blank_id: int = BLANK

    def __post_init__(self):
        if self.num_glosses < 1:
            raise ConfigError("vocabulary needs at least one gloss")
        if self.names and len(self.names) != self.num_glosses:
            raise ConfigError("names must list every gloss")

    def __len__(self):
        return self.num_glosses + 1

    @property
    def glosses(self):
        return tuple(range(1, self.num_glosses + 1))

    def name(self, gloss_id):
        if gloss_id == self.blank_id:
            return "-"
        return self.names[gloss_id - 1] if self.names else f"g{gloss_id}"


def check_target(target):
    target = [int(g) for g in target]
    if any(g == BLANK for g in target):
        raise ValueError("targets must not contain the blank symbol")
    return target


def required_frames(target):
    """Shortest input length that can emit ``target`` (N plus blanks between repeats)."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def extend_with_blanks(target):
    ext = [BLANK]
    for g in target:
        ext.extend([g, BLANK])
    return np.asarray(ext, dtype=np.int64)


@dataclass
class CtcLattice:
    log_alpha: np.ndarray
    log_beta: np.ndarray
    log_p_target: float
    ext: np.ndarray
    log_probs: np.ndarray = field(repr=False)

    def state_occupancy(self):
        """Log posterior of being in extended state s at frame t (T' x S)."""
        emit = self.log_probs[:, self.ext]
        return self.log_alpha + self.log_beta - emit - self.log_p_target

    def symbol_occupancy(self):
        """Posterior probability of emitting symbol k at frame t (T' x V)."""
        occ = np.exp(self.state_occupancy())
        gamma = np.zeros_like(self.log_probs)
        np.add.at(gamma.T, self.ext, occ.T)
        return gamma


def _lse(a, b):
    m = np.maximum(a, b)
    out = np.full_like(m, NEG_INF)
    ok = m > NEG_INF
    out[ok] = m[ok] + np.log(np.exp(a[ok] - m[ok]) + np.exp(b[ok] - m[ok]))
    return out


def ctc_lattice(log_probs, target):
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if log_probs.ndim != 2:
        raise ShapeError(f"log_probs must be T' x V, got {log_probs.shape}")
    target = check_target(target)
    T, V = log_probs.shape
    if any(g >= V for g in target):
        raise ShapeError("target symbol outside the vocabulary")
    need = required_frames(target)
    if T < need:
        raise InfeasibleAlignmentError(f"{T} frames cannot emit a target that needs {need}")
    ext = extend_with_blanks(target)
    S = len(ext)
    # skip transition s-2 -> s allowed into a label that differs from the label two back
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    emit = log_probs[:, ext]

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = _lse(acc[1:], prev[:-1])
        shifted = np.full(S, NEG_INF)
        shifted[2:] = np.where(skip[2:], prev[:-2], NEG_INF)
        acc = _lse(acc, shifted)
        alpha[t] = acc + emit[t]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = _lse(acc[:-1], nxt[1:])
        shifted = np.full(S, NEG_INF)
        shifted[:-2] = np.where(skip[2:], nxt[2:], NEG_INF)
        acc = _lse(acc, shifted)
        beta[t] = acc + emit[t]

    ends = alpha[T - 1, S - 2 :] if S > 1 else alpha[T - 1]
    log_p = float(np.logaddexp.reduce(ends))
    if not np.isfinite(log_p):
        raise InfeasibleAlignmentError("target has zero probability under these log-probs")
    return CtcLattice(alpha, beta, log_p, ext, log_probs.copy())


def ctc_loss(log_probs, target):
    """Negative log-likelihood of ``target`` summed over all alignments.

    ``log_probs`` is T' x V (rows are log-softmax outputs).  Returns
    ``(loss, lattice)``.
    """
    lattice = ctc_lattice(log_probs, target)
    return -lattice.log_p_target, lattice


def ctc_grad(lattice, log_probs):
    """dL/dp(k | frame t): -(1/p(G|Z)) (1/p_t(k)) * mass of paths emitting k at t."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if log_probs.shape != lattice.log_probs.shape or not np.array_equal(log_probs, lattice.log_probs):
        raise ConsistencyError("lattice was computed from different log-probs")
    return -lattice.symbol_occupancy() / np.exp(log_probs)


def ctc_grad_logits(lattice):
    """dL/dlogits when the log-probs came from a softmax: p - occupancy."""
    return np.exp(lattice.log_probs) - lattice.symbol_occupancy()


class CtcLossFn(tt.Function):
    """Recorded CTC loss over a T' x V log-prob tensor; backward uses the occupancy."""

    def forward(self, log_probs, target):
        loss, self.lattice = ctc_loss(log_probs, target)
        return np.array([loss])

    def backward(self, grad):
        return (-self.lattice.symbol_occupancy() * grad[0],)


def ctc_loss_tensor(log_probs, target):
    return CtcLossFn.apply(log_probs, target=target)


# ------------------------------------------------------------- decoding


def collapse(path):
    """Merge repeats, then drop blanks."""
    out = []
    prev = None
    for s in path:
        s = int(s)
        if s != prev and s != BLANK:
            out.append(s)
        prev = s
    return out


def decode_greedy(log_probs):
    """Best path: per-frame argmax (ties to the lowest id), collapsed."""
    return collapse(np.argmax(np.asarray(log_probs), axis=1))


def decode_beam(log_probs, width=10):
    """Prefix beam search.

    Hypotheses are (prefix, ends-in-blank) states carrying log-probabilities;
    paths reaching the same state are merged with log-sum-exp, the beam keeps
    the ``width`` best states, and the final answer merges both endings of
    each prefix.  Ordering is by log-prob, then lexicographic prefix.
    """
    if width < 1:
        raise ConfigError("beam width must be >= 1")
    log_probs = np.asarray(log_probs, dtype=np.float64)
    T, V = log_probs.shape
    beam = {((), True): 0.0}
    for t in range(T):
        row = log_probs[t]
        nxt = defaultdict(lambda: NEG_INF)
        for (prefix, ends_blank), lp in beam.items():
            key = (prefix, True)
            nxt[key] = np.logaddexp(nxt[key], lp + row[BLANK])
            last = prefix[-1] if prefix else None
            for c in range(1, V):
                if c == last and not ends_blank:
                    key = (prefix, False)
                else:
                    key = (prefix + (c,), False)
                nxt[key] = np.logaddexp(nxt[key], lp + row[c])
        ranked = sorted(nxt.items(), key=lambda kv: (-kv[1], kv[0][0], not kv[0][1]))
        beam = dict(ranked[:width])
    totals = defaultdict(lambda: NEG_INF)
    for (prefix, _), lp in beam.items():
        totals[prefix] = np.logaddexp(totals[prefix], lp)
    best = min(totals.items(), key=lambda kv: (-kv[1], kv[0]))
    return list(best[0])


# ---------------------------------------------------------- diagnostics


def spike_diagnostics(series, rel_tau=1e-3, abs_floor=1e-12):
    """Summaries of a per-frame gradient-norm series.

    ``zero_fraction`` counts frames whose norm falls below
    ``max(rel_tau * max, abs_floor)``; ``entropy`` is the Shannon entropy of
    the normalised norms divided by ``log(T)``.
    """
    x = np.asarray(series, dtype=np.float64).ravel()
    if x.size == 0:
        raise ShapeError("empty gradient-norm series")
    peak = float(x.max())
    tau = max(rel_tau * peak, abs_floor)
    zero_fraction = float(np.mean(x < tau))
    med = float(np.median(x))
    if peak <= 0:
        ratio = 1.0
    elif med <= 0:
        ratio = math.inf
    else:
        ratio = peak / med
    total = float(x.sum())
    if total <= 0:
        entropy = 0.0
    elif x.size == 1:
        entropy = 1.0
    else:
        p = x[x > 0] / total
        entropy = float(-(p * np.log(p)).sum() / np.log(x.size))
    return {"zero_fraction": zero_fraction, "peak_to_median": ratio, "entropy": entropy}


def frame_grad_norms(grad):
    """Per-frame L2 norm of a C x T x ... feature gradient (or T x D sequence)."""
    g = np.asarray(grad)
    if g.ndim == 2:
        return np.sqrt((g**2).sum(axis=1))
    moved = np.moveaxis(g, 1, 0).reshape(g.shape[1], -1)
    return np.sqrt((moved**2).sum(axis=1))


def norms_to_csv(norms, stage, fh=None):
    """Rows ``frame_index,grad_l2,stage``; returns the text when ``fh`` is None."""
    own = fh is None
    fh = io.StringIO() if own else fh
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["frame_index", "grad_l2", "stage"])
    for i, v in enumerate(norms):
        writer.writerow([i, repr(float(v)), stage])
    return fh.getvalue() if own else None
