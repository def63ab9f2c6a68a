"""Attentive statistics pooling: ASP, multi-head ASP, and sliding-window ASP.

Plain ASP computes channel-wise attention weights over time and pools
first/second-order moments.  MHASP first routes the frames through one
multi-head self-attention block, derives the weights from the attended
features, and accumulates the moments of the *input* frames (a config
switch can pool the attended features instead).  SWASP applies MHASP to
overlapping time windows and then once more across the per-window
summaries, which injects sensitivity to the order of spoken content that
plain ASP lacks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ShapeError, TooShortError
from .layers import Linear, Module

VAR_EPS = 1e-8


@dataclass
class SwaspConfig:
    window_len: int = 50
    stride: int = 25
    heads: int = 2
    segment_proj_dim: int = 1536
    out_dim: int = 192
    asp_hidden: int = 128
    stats_source: str = "input"  # or "attended"

    def __post_init__(self):
        if not (1 <= self.stride <= self.window_len):
            raise ShapeError("require 1 <= stride <= window_len")


@dataclass
class PoolingStats:
    """Attention-weighted moments: mu/sigma2 are [C] (or [n, C] batched);
    attn sums to 1 over time per channel row."""

    mu: Tensor
    sigma2: Tensor
    attn: Tensor

    def sigma(self) -> Tensor:
        return ag.sqrt(ag.add(self.sigma2, VAR_EPS))


class AspScorer(Module):
    """Frame scorer: alpha = softmax_t(w2^T tanh(w1^T x_t + b1) + b2)."""

    def __init__(self, channels: int, hidden: int, rng, dtype=np.float64):
        super().__init__()
        from .layers import xavier_uniform

        self.w1 = Tensor(xavier_uniform(rng, channels, hidden, (channels, hidden), dtype), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.w2 = Tensor(xavier_uniform(rng, hidden, channels, (hidden, channels), dtype), requires_grad=True)
        self.b2 = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        """x: [C, T] or [n, C, T] -> attention weights of the same shape."""
        nd = x.data.ndim
        xt = ag.transpose(x, (1, 0) if nd == 2 else (0, 2, 1))
        e = ag.tanh(ag.linear(xt, self.w1, self.b1))
        scores = ag.linear(e, self.w2, self.b2)
        scores = ag.transpose(scores, (1, 0) if nd == 2 else (0, 2, 1))
        return ag.softmax(scores, axis=-1)

    __call__ = forward


def weighted_stats(x: Tensor, alpha: Tensor) -> tuple[Tensor, Tensor]:
    """mu = sum_t alpha_t * x_t, sigma2 = sum_t alpha_t * x_t^2 - mu^2,
    floored at zero."""
    mu = ag.sum_(ag.mul(alpha, x), axis=-1)
    second = ag.sum_(ag.mul(alpha, ag.mul(x, x)), axis=-1)
    sigma2 = ag.relu(ag.sub(second, ag.mul(mu, mu)))
    return mu, sigma2


def asp(x: Tensor, scorer: AspScorer) -> PoolingStats:
    """Attentive statistics pooling of [C, T] frames (or [n, C, T] batched)."""
    alpha = scorer(x)
    mu, sigma2 = weighted_stats(x, alpha)
    return PoolingStats(mu=mu, sigma2=sigma2, attn=alpha)


def segment_starts(n_frames: int, window_len: int, stride: int) -> list[int]:
    """Window offsets 0, s, 2s, ... while they fit; a tail window [T-w, T]
    is appended when the last regular window does not already end at T."""
    if window_len > n_frames:
        raise TooShortError(f"window {window_len} exceeds {n_frames} frames")
    starts = list(range(0, n_frames - window_len + 1, stride))
    if starts[-1] + window_len != n_frames:
        starts.append(n_frames - window_len)
    return starts


def segment(m: Tensor, window_len: int, stride: int) -> list[Tensor]:
    """Slice [C, T] features into overlapping windows of width window_len."""
    starts = segment_starts(m.data.shape[-1], window_len, stride)
    return [m[:, s : s + window_len] for s in starts]


class Mhasp(Module):
    """One multi-head self-attention block followed by attentive pooling.

    Input [C, T] (or [n, C, T]); output [out_dim] (or [n, out_dim]).
    Weights are derived from the attended features A; statistics are
    accumulated over the block input X unless stats_source="attended".
    """

    def __init__(self, channels: int, heads: int, rng, out_dim: int,
                 asp_hidden: int = 128, stats_source: str = "input", dtype=np.float64):
        super().__init__()
        if channels % heads != 0:
            raise ShapeError(f"channels {channels} not divisible by heads {heads}")
        if stats_source not in ("input", "attended"):
            raise ShapeError("stats_source must be 'input' or 'attended'")
        self.channels = channels
        self.heads = heads
        self.d_k = channels // heads
        self.stats_source = stats_source
        self.wq = Linear(channels, channels, rng, dtype)
        self.wk = Linear(channels, channels, rng, dtype)
        self.wv = Linear(channels, channels, rng, dtype)
        self.scorer = AspScorer(channels, asp_hidden, rng, dtype)
        self.proj = Linear(2 * channels, out_dim, rng, dtype)

    def attend(self, x: Tensor) -> Tensor:
        """Multi-head self-attention over time; returns A with x's layout."""
        nd = x.data.ndim
        if nd == 2:
            c, t = x.data.shape
            xt = ag.transpose(x, (1, 0))
            split = lambda z: ag.transpose(ag.reshape(z, (t, self.heads, self.d_k)), (1, 0, 2))
            merge = lambda z: ag.reshape(ag.transpose(z, (1, 0, 2)), (t, c))
        else:
            n, c, t = x.data.shape
            xt = ag.transpose(x, (0, 2, 1))
            split = lambda z: ag.transpose(ag.reshape(z, (n, t, self.heads, self.d_k)), (0, 2, 1, 3))
            merge = lambda z: ag.reshape(ag.transpose(z, (0, 2, 1, 3)), (n, t, c))
        q = split(self.wq(xt))
        k = split(self.wk(xt))
        v = split(self.wv(xt))
        scores = ag.mul(ag.matmul(q, ag.transpose(k, _swap_last(k.data.ndim))), float(1.0 / np.sqrt(self.d_k)))
        weights = ag.softmax(scores, axis=-1)
        at = merge(ag.matmul(weights, v))
        return ag.transpose(at, (1, 0) if nd == 2 else (0, 2, 1))

    def forward(self, x: Tensor) -> Tensor:
        a = self.attend(x)
        alpha = self.scorer(a)
        source = x if self.stats_source == "input" else a
        mu, sigma2 = weighted_stats(source, alpha)
        sigma = ag.sqrt(ag.add(sigma2, VAR_EPS))
        pooled = ag.concat([mu, sigma], axis=-1)
        if x.data.ndim == 2:
            out = self.proj(ag.reshape(pooled, (1, -1)))
            return ag.reshape(out, (out.data.shape[-1],))
        return self.proj(pooled)

    __call__ = forward


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


class Swasp(Module):
    """Sliding-window MHASP: pool each window, then pool the window summaries.

    Per-window parameters are shared; the second stage has its own set.
    """

    def __init__(self, channels: int, cfg: SwaspConfig, rng, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        self.seg_mhasp = Mhasp(channels, cfg.heads, rng, cfg.segment_proj_dim,
                               cfg.asp_hidden, cfg.stats_source, dtype)
        self.out_mhasp = Mhasp(cfg.segment_proj_dim, cfg.heads, rng, cfg.out_dim,
                               cfg.asp_hidden, cfg.stats_source, dtype)

    def forward(self, m: Tensor) -> Tensor:
        starts = segment_starts(m.data.shape[-1], self.cfg.window_len, self.cfg.stride)
        windows = ag.gather_windows(m, starts, self.cfg.window_len)  # [n, C, w]
        seg_vecs = self.seg_mhasp(windows)  # [n, proj]
        pseudo_time = ag.transpose(seg_vecs, (1, 0))  # [proj, n]
        return self.out_mhasp(pseudo_time)

    __call__ = forward


class PoolingHead(Module):
    """Configurable pooling stack over MFA-style frame features [C, T].

    mode is a '+'-joined subset of {A, M, S}: plain ASP, single MHASP,
    and SWASP.  Branch outputs (embed_dim each) are concatenated and mixed
    down to embed_dim by a final linear layer.
    """

    MODES = ("A", "M", "S", "A+S", "M+S", "A+M+S")

    def __init__(self, channels: int, cfg: SwaspConfig, rng, mode: str = "A+S",
                 embed_dim: int = 192, dtype=np.float64):
        super().__init__()
        parts = mode.split("+")
        if not parts or any(p not in ("A", "M", "S") for p in parts) or len(set(parts)) != len(parts):
            raise ShapeError(f"bad pooling mode {mode!r}")
        self.mode = mode
        self.parts = [p for p in ("A", "M", "S") if p in parts]
        self.embed_dim = embed_dim
        if "A" in self.parts:
            self.asp_scorer = AspScorer(channels, cfg.asp_hidden, rng, dtype)
            self.asp_proj = Linear(2 * channels, embed_dim, rng, dtype)
        if "M" in self.parts:
            self.mhasp = Mhasp(channels, cfg.heads, rng, embed_dim, cfg.asp_hidden,
                               cfg.stats_source, dtype)
        if "S" in self.parts:
            self.swasp = Swasp(channels, cfg, rng, dtype)
        self.mix = Linear(len(self.parts) * embed_dim, embed_dim, rng, dtype)

    def branch_outputs(self, m: Tensor) -> dict[str, Tensor]:
        outs = {}
        for p in self.parts:
            if p == "A":
                stats = asp(m, self.asp_scorer)
                pooled = ag.concat([stats.mu, stats.sigma()], axis=-1)
                outs["A"] = self.asp_proj(ag.reshape(pooled, (1, -1)))
            elif p == "M":
                outs["M"] = ag.reshape(self.mhasp(m), (1, -1))
            else:
                outs["S"] = ag.reshape(self.swasp(m), (1, -1))
        return outs

    def forward(self, m: Tensor) -> Tensor:
        outs = self.branch_outputs(m)
        joined = ag.concat([outs[p] for p in self.parts], axis=-1)
        return ag.reshape(self.mix(joined), (self.embed_dim,))

    __call__ = forward


def combined_pool(m: Tensor, head: PoolingHead) -> Tensor:
    """Speaker embedding from frame features via the configured pooling head."""
    return head(m)
