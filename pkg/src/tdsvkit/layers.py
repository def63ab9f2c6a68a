"""Layer toolkit built on the autograd tape: modules, norms, attention blocks."""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ShapeError

_BN_CAPTURE = threading.local()


@contextmanager
def bn_stat_capture(sink: list):
    """Divert BatchNorm running-stat updates into ``sink`` for this thread.

    Worker threads share BatchNorm modules; capturing (module, mean, var, n)
    tuples and applying them later in a fixed order keeps training both
    race-free and bit-deterministic regardless of the worker count.
    """
    prev = getattr(_BN_CAPTURE, "sink", None)
    _BN_CAPTURE.sink = sink
    try:
        yield sink
    finally:
        _BN_CAPTURE.sink = prev


def apply_bn_stats(sink: list):
    for module, mean, var, n in sink:
        module.update_running_stats(mean, var, n)


class Module:
    """Minimal module base: tracks parameters, buffers and child modules."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array: np.ndarray):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_store(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own_params = dict(self.named_parameters())
        own_buffers = dict(self.named_buffers())
        for name, arr in state.items():
            if name in own_params:
                tgt = own_params[name]
                if tgt.data.shape != arr.shape:
                    raise ShapeError(f"parameter {name}: shape {arr.shape} != {tgt.data.shape}")
                tgt.data = arr.astype(tgt.data.dtype, copy=True)
            elif name in own_buffers:
                own_buffers[name][...] = arr
            else:
                raise KeyError(f"unknown state entry {name!r}")
        missing = (set(own_params) | set(own_buffers)) - set(state)
        if missing:
            raise KeyError(f"state dict missing entries: {sorted(missing)}")

    def train(self, mode: bool = True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._list = []
        for m in modules:
            self.append(m)

    def append(self, module: Module):
        self._children[str(len(self._list))] = module
        self._list.append(module)

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, i):
        return self._list[i]


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64, bias: bool = True):
        super().__init__()
        self.w = Tensor(xavier_uniform(rng, n_in, n_out, (n_in, n_out), dtype), requires_grad=True)
        self.b = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ag.linear(x, self.w, self.b)

    __call__ = forward


class Conv1d(Module):
    """1-D convolution over [C_in, T]; padding 'same' requires odd kernels."""

    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding="same", dilation=1,
                 dtype=np.float64, bias=True):
        super().__init__()
        if padding == "same":
            if kernel % 2 == 0:
                raise ShapeError("'same' padding requires an odd kernel size")
            padding = dilation * (kernel - 1) // 2
        self.stride = stride
        self.padding = int(padding)
        self.dilation = int(dilation)
        fan_in, fan_out = c_in * kernel, c_out * kernel
        self.w = Tensor(xavier_uniform(rng, fan_in, fan_out, (c_out, c_in, kernel), dtype), requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ag.conv1d(x, self.w, self.b, stride=self.stride, padding=self.padding,
                         dilation=self.dilation)

    __call__ = forward


class BatchNorm1d(Module):
    """Per-channel normalization over every non-channel axis.

    channel_axis selects the layout: 0 for [C, T] inputs, 1 for [B, C] or
    [B, C, T].  Train mode uses batch statistics (and updates the running
    EMA, momentum 0.1); eval mode normalizes by the running statistics.
    """

    def __init__(self, num_features, rng=None, channel_axis=0, eps=1e-5, momentum=0.1, dtype=np.float64):
        super().__init__()
        self.num_features = num_features
        self.channel_axis = channel_axis
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(num_features, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(num_features, dtype=dtype))
        self.register_buffer("running_var", np.ones(num_features, dtype=dtype))

    def _bshape(self, ndim):
        shape = [1] * ndim
        shape[self.channel_axis] = self.num_features
        return tuple(shape)

    def update_running_stats(self, mean: np.ndarray, var: np.ndarray, n: int):
        unbiased = var * (n / (n - 1)) if n > 1 else var
        m = self.momentum
        self.running_mean[...] = (1 - m) * self.running_mean + m * mean
        self.running_var[...] = (1 - m) * self.running_var + m * unbiased

    def forward(self, x: Tensor) -> Tensor:
        ndim = x.data.ndim
        axes = tuple(i for i in range(ndim) if i != self.channel_axis)
        bshape = self._bshape(ndim)
        gamma = ag.reshape(self.gamma, bshape)
        beta = ag.reshape(self.beta, bshape)
        if self.training:
            mu = ag.mean(x, axis=axes, keepdims=True)
            centered = ag.sub(x, mu)
            var = ag.mean(ag.mul(centered, centered), axis=axes, keepdims=True)
            n = int(np.prod([x.data.shape[i] for i in axes]))
            sink = getattr(_BN_CAPTURE, "sink", None)
            if sink is not None:
                sink.append((self, mu.data.reshape(self.num_features).copy(),
                             var.data.reshape(self.num_features).copy(), n))
            else:
                self.update_running_stats(mu.data.reshape(self.num_features),
                                          var.data.reshape(self.num_features), n)
            inv = ag.pow_const(ag.add(var, self.eps), -0.5)
            xhat = ag.mul(centered, inv)
        else:
            mu = Tensor(self.running_mean.reshape(bshape).astype(x.data.dtype))
            inv = Tensor((1.0 / np.sqrt(self.running_var + self.eps)).reshape(bshape).astype(x.data.dtype))
            xhat = ag.mul(ag.sub(x, mu), inv)
        return ag.add(ag.mul(xhat, gamma), beta)

    __call__ = forward


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5, dtype=np.float64):
        super().__init__()
        self.eps = eps
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gamma, self.beta, self.eps)

    __call__ = forward


# ---------------------------------------------------------------------------
# attention and transformer blocks (time-major [T, d_model] activations)
# ---------------------------------------------------------------------------


def sinusoidal_positions(n_pos: int, d_model: int, dtype=np.float64) -> np.ndarray:
    """PE[t, 2i] = sin(t / 10000^(2i/d)); PE[t, 2i+1] = cos(same argument)."""
    if d_model % 2 != 0:
        raise ShapeError("sinusoidal positions require an even model dimension")
    t = np.arange(n_pos, dtype=np.float64)[:, None]
    i = np.arange(d_model // 2, dtype=np.float64)[None, :]
    angle = t / np.power(10000.0, 2.0 * i / d_model)
    pe = np.zeros((n_pos, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe.astype(dtype)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None):
    """softmax(Q K^T / sqrt(d_k)) V with optional additive mask.

    Works on [T, d] or batched [..., T, d] operands; returns (attended, weights).
    """
    if q.data.shape[-1] != k.data.shape[-1]:
        raise ShapeError("query/key depth mismatch")
    if k.data.shape[-2] != v.data.shape[-2]:
        raise ShapeError("key/value length mismatch")
    d_k = q.data.shape[-1]
    scores = ag.mul(ag.matmul(q, ag.transpose(k, _swap_last(k.data.ndim))), float(1.0 / np.sqrt(d_k)))
    if mask is not None:
        scores = ag.add(scores, Tensor(mask.astype(scores.data.dtype)))
    weights = ag.softmax(scores, axis=-1)
    return ag.matmul(weights, v), weights


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


class MultiHeadAttention(Module):
    """Multi-head attention with a fused QKV projection; self- or cross-."""

    def __init__(self, d_model, heads, rng, dtype=np.float64):
        super().__init__()
        if d_model % heads != 0:
            raise ShapeError("d_model must be divisible by the head count")
        self.heads = heads
        self.d_model = d_model
        self.d_k = d_model // heads
        self.wqkv = Linear(d_model, 3 * d_model, rng, dtype)
        self.wo = Linear(d_model, d_model, rng, dtype)

    def _split(self, x: Tensor, length: int) -> Tensor:
        # [T, d_model] -> [heads, T, d_k]
        return ag.transpose(ag.reshape(x, (length, self.heads, self.d_k)), (1, 0, 2))

    def forward(self, x: Tensor, memory: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
        t_q = x.data.shape[0]
        src = x if memory is None else memory
        t_kv = src.data.shape[0]
        d = self.d_model
        if memory is None:
            qkv = self.wqkv(x)
            q = self._split(qkv[:, :d], t_q)
            k = self._split(qkv[:, d : 2 * d], t_kv)
            v = self._split(qkv[:, 2 * d :], t_kv)
        else:
            wq, wkv = self.wqkv.w[:, :d], self.wqkv.w[:, d:]
            bq, bkv = self.wqkv.b[:d], self.wqkv.b[d:]
            q = self._split(ag.linear(x, wq, bq), t_q)
            kv = ag.linear(src, wkv, bkv)
            k = self._split(kv[:, :d], t_kv)
            v = self._split(kv[:, d:], t_kv)
        attended, _ = scaled_dot_attention(q, k, v, mask=mask)
        merged = ag.reshape(ag.transpose(attended, (1, 0, 2)), (t_q, self.d_model))
        return self.wo(merged)

    __call__ = forward


class FeedForward(Module):
    def __init__(self, d_model, d_ff, rng, dtype=np.float64):
        super().__init__()
        self.fc1 = Linear(d_model, d_ff, rng, dtype)
        self.fc2 = Linear(d_ff, d_model, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ag.relu(self.fc1(x)))

    __call__ = forward


class EncoderBlock(Module):
    """Pre-norm transformer encoder block."""

    def __init__(self, d_model, heads, d_ff, rng, dtype=np.float64):
        super().__init__()
        self.ln1 = LayerNorm(d_model, dtype=dtype)
        self.attn = MultiHeadAttention(d_model, heads, rng, dtype)
        self.ln2 = LayerNorm(d_model, dtype=dtype)
        self.ffn = FeedForward(d_model, d_ff, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = ag.add(x, self.attn(self.ln1(x)))
        return ag.add(x, self.ffn(self.ln2(x)))

    __call__ = forward

    def forward_packed(self, x: Tensor, spans: list[tuple[int, int]]) -> Tensor:
        """Same math as forward() for several utterances packed along time.

        Frame-wise pieces (LN, projections, FFN) run on the packed [sum_T, d]
        tensor; self-attention is evaluated inside each utterance's span so
        no frame ever attends across an utterance boundary.
        """
        attn = self.attn
        y = self.ln1(x)
        qkv = attn.wqkv(y)
        d = attn.d_model
        merged = []
        for a, b in spans:
            t = b - a
            q = attn._split(qkv[a:b, :d], t)
            k = attn._split(qkv[a:b, d : 2 * d], t)
            v = attn._split(qkv[a:b, 2 * d :], t)
            att, _ = scaled_dot_attention(q, k, v)
            merged.append(ag.reshape(ag.transpose(att, (1, 0, 2)), (t, d)))
        x = ag.add(x, attn.wo(ag.concat(merged, axis=0)))
        return ag.add(x, self.ffn(self.ln2(x)))


class DecoderBlock(Module):
    """Pre-norm decoder block: causal self-attention + cross-attention + FFN."""

    def __init__(self, d_model, heads, d_ff, rng, dtype=np.float64):
        super().__init__()
        self.ln1 = LayerNorm(d_model, dtype=dtype)
        self.self_attn = MultiHeadAttention(d_model, heads, rng, dtype)
        self.ln2 = LayerNorm(d_model, dtype=dtype)
        self.cross_attn = MultiHeadAttention(d_model, heads, rng, dtype)
        self.ln3 = LayerNorm(d_model, dtype=dtype)
        self.ffn = FeedForward(d_model, d_ff, rng, dtype)

    def forward(self, x: Tensor, memory: Tensor, causal_mask: np.ndarray) -> Tensor:
        x = ag.add(x, self.self_attn(self.ln1(x), mask=causal_mask))
        x = ag.add(x, self.cross_attn(self.ln2(x), memory=memory))
        return ag.add(x, self.ffn(self.ln3(x)))

    __call__ = forward


def causal_mask(length: int) -> np.ndarray:
    """Additive mask blocking attention to future positions."""
    m = np.zeros((length, length))
    m[np.triu_indices(length, k=1)] = -1e9
    return m
