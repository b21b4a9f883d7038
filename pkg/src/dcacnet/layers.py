"""Parameter containers and the small layer set the models are built from.

Feature maps are ``C x T x H x W`` per sample; sequences are ``T x D``.
Each module seeds its own generator from ``(seed, module name)`` so adding or
removing one module never changes another module's initial weights.
"""

import zlib

import numpy as np

from . import tensor as tt
from .tensor import BnState, Tensor, parameter


def module_rng(seed, name):
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


def kaiming(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Module:
    """Walks attributes for parameters, sub-modules and BatchNorm states.

    Containers (lists, tuples, dicts) of modules or tensors are followed.
    Objects reachable along several paths are reported once, under the
    first name encountered.
    """

    training = True

    def _children(self):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield key, value

    def _walk(self, prefix, seen):
        for key, value in self._children():
            yield from _walk_value(f"{prefix}{key}", value, seen)

    def named_parameters(self):
        return [(n, v) for n, v in self._walk("", set()) if isinstance(v, Tensor)]

    def parameters(self):
        return [v for _, v in self.named_parameters()]

    def named_bn_states(self):
        return [(n, v) for n, v in self._walk("", set()) if isinstance(v, BnState)]

    def modules(self):
        out = [self]
        for _, value in self._children():
            out.extend(_submodules(value))
        return out

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        tt.zero_grads(self.parameters())

    def state_dict(self):
        """Flat name -> ndarray map of parameters and BatchNorm statistics."""
        state = {}
        for name, v in self._walk("", set()):
            if isinstance(v, Tensor):
                state[name] = v.data
            else:
                state[f"{name}.running_mean"] = v.running_mean
                state[f"{name}.running_var"] = v.running_var
        return state

    def load_state_dict(self, state):
        missing = []
        for name, v in self._walk("", set()):
            if isinstance(v, Tensor):
                if name not in state:
                    missing.append(name)
                    continue
                v.data = np.array(state[name], dtype=np.float64).reshape(v.shape)
            else:
                for stat in ("running_mean", "running_var"):
                    key = f"{name}.{stat}"
                    if key not in state:
                        missing.append(key)
                        continue
                    setattr(v, stat, np.array(state[key], dtype=np.float64))
        if missing:
            raise KeyError(f"state is missing {missing[:5]}")


def _walk_value(name, value, seen):
    if isinstance(value, (Tensor, BnState)):
        if id(value) in seen:
            return
        seen.add(id(value))
        yield name, value
        if isinstance(value, BnState):
            yield from _walk_value(f"{name}.gamma", value.gamma, seen)
            yield from _walk_value(f"{name}.beta", value.beta, seen)
    elif isinstance(value, Module):
        if id(value) in seen:
            return
        seen.add(id(value))
        yield from value._walk(f"{name}.", seen)
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk_value(f"{name}.{i}", item, seen)
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk_value(f"{name}.{key}", item, seen)


def _submodules(value):
    if isinstance(value, Module):
        return value.modules()
    if isinstance(value, (list, tuple)):
        return [m for item in value for m in _submodules(item)]
    if isinstance(value, dict):
        return [m for item in value.values() for m in _submodules(item)]
    return []


class Linear(Module):
    def __init__(self, d_in, d_out, seed, name, bias=True, init="kaiming"):
        rng = module_rng(seed, name)
        if init == "zeros":
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal(0.0, np.sqrt(1.0 / d_in), size=(d_in, d_out))
        self.w = parameter(w)
        self.b = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        return tt.matmul_fc(x, self.w, self.b)


def conv3d(x, w, bias=None, stride=(1, 1, 1), padding=None, groups=1):
    """Grouped 3D convolution of a C x T x H x W map via unfold + einsum.

    ``w`` is C_out x C_in/G x k_t x k_h x k_w; ``padding`` defaults to
    same-padding (k-1)/2 on each axis.
    """
    c_out, cg, kt, kh, kw = w.shape
    c_in = x.shape[0]
    if c_in != cg * groups or c_out % groups:
        raise tt.ShapeError(f"conv3d: input {x.shape} / weight {w.shape} / groups {groups} disagree")
    if padding is None:
        padding = (kt // 2, kh // 2, kw // 2)
    cols = tt.unfold3d(x, (kt, kh, kw), stride, padding)
    _, k, T, H, W = cols.shape
    cols = cols.reshape(groups, cg, k, T, H, W)
    wk = w.reshape(groups, c_out // groups, cg, k)
    out = tt.einsum("gckthw,gock->gothw", cols, wk).reshape(c_out, T, H, W)
    if bias is not None:
        out = out + bias.reshape(c_out, 1, 1, 1)
    return out


class Conv3d(Module):
    def __init__(self, c_in, c_out, kernel, seed, name, groups=1, stride=(1, 1, 1), padding=None, bias=True):
        rng = module_rng(seed, name)
        kt, kh, kw = kernel
        fan_in = (c_in // groups) * kt * kh * kw
        self.w = parameter(kaiming(rng, (c_out, c_in // groups, kt, kh, kw), fan_in))
        self.b = parameter(np.zeros(c_out)) if bias else None
        self._groups = groups
        self._stride = tuple(stride)
        self._padding = padding

    def __call__(self, x):
        return conv3d(x, self.w, self.b, self._stride, self._padding, self._groups)


class Conv1dSeq(Module):
    """Temporal convolution of a T x D sequence with same-padding."""

    def __init__(self, d_in, d_out, k, seed, name, bias=True):
        rng = module_rng(seed, name)
        self.w = parameter(kaiming(rng, (d_out, d_in, k, 1, 1), d_in * k))
        self.b = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        T, D = x.shape
        fmap = x.transpose(1, 0).reshape(D, T, 1, 1)
        out = conv3d(fmap, self.w, self.b)
        return out.reshape(out.shape[0], T).transpose(1, 0)


class BiRnn(Module):
    """Stacked bidirectional Elman layers; output is T x 2*hidden."""

    def __init__(self, d_in, hidden, layers, seed, name):
        self.cells = []
        for layer in range(layers):
            cell = {}
            for direction in ("fwd", "bwd"):
                rng = module_rng(seed, f"{name}.{layer}.{direction}")
                cell[direction] = {
                    "wx": parameter(rng.uniform(-1, 1, (d_in, hidden)) / np.sqrt(hidden)),
                    "wh": parameter(rng.uniform(-1, 1, (hidden, hidden)) / np.sqrt(hidden)),
                    "b": parameter(np.zeros(hidden)),
                }
            self.cells.append(cell)
            d_in = 2 * hidden

    def __call__(self, x):
        for cell in self.cells:
            f, b = cell["fwd"], cell["bwd"]
            hf = tt.rnn_tanh(x, f["wx"], f["wh"], f["b"], reverse=False)
            hb = tt.rnn_tanh(x, b["wx"], b["wh"], b["b"], reverse=True)
            x = tt.concat([hf, hb], axis=-1)
        return x
