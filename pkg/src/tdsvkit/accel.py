"""Dual-path numeric kernels: numba ``@njit`` loops with pure-numpy fallbacks.

The kernels here are the sequential/gather-heavy inner loops that dominate
runtime and that BLAS cannot help with (the CTC lattice recursion and
windowed-sinc resampling).  Matrix-multiply-bound work elsewhere in the
package stays on numpy/BLAS, which is faster than a jitted loop for those
shapes.

Path selection: the numba path is used when numba imports cleanly and the
environment variable ``TDSV_NO_NUMBA`` is unset/"0"; otherwise the numpy
fallback is used.  Both variants of every kernel are importable regardless
of the flag so tests and ``benchmarks/bench_kernels.py`` can compare them.
"""

from __future__ import annotations

import os

import numpy as np

NEG_INF = -np.inf


def _numba_requested() -> bool:
    flag = os.environ.get("TDSV_NO_NUMBA", "0").strip().lower()
    return flag in ("", "0", "false", "no")


try:
    if not _numba_requested():
        raise ImportError("numba disabled via TDSV_NO_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env flag in CI
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        # identity decorator so the "numba" symbols still exist
        if len(args) == 1 and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap


USE_NUMBA = HAVE_NUMBA


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# CTC forward (loss) and forward-backward (gradient) over the blank-expanded
# label lattice.  log_probs is [T, V] log-softmax output; labels_ext is the
# int32 sequence [blank, l1, blank, l2, ..., blank] of length S = 2L+1.
# ---------------------------------------------------------------------------


def _ctc_alpha_numpy(log_probs: np.ndarray, labels_ext: np.ndarray) -> np.ndarray:
    T = log_probs.shape[0]
    S = labels_ext.shape[0]
    # skip transition s-2 -> s is legal when ext[s] is a label differing
    # from ext[s-2]
    skip = np.zeros(S, dtype=bool)
    if S > 2:
        skip[2:] = (labels_ext[2:] != labels_ext[:-2]) & (labels_ext[2:] != labels_ext[0])
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = log_probs[0, labels_ext[0]]
    if S > 1:
        alpha[0, 1] = log_probs[0, labels_ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        if S > 2:
            acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + log_probs[t, labels_ext]
    return alpha


def ctc_loss_numpy(log_probs: np.ndarray, labels_ext: np.ndarray) -> float:
    alpha = _ctc_alpha_numpy(log_probs, labels_ext)
    S = labels_ext.shape[0]
    tail = alpha[-1, S - 1]
    if S > 1:
        tail = np.logaddexp(tail, alpha[-1, S - 2])
    return float(-tail)


def ctc_grad_numpy(log_probs: np.ndarray, labels_ext: np.ndarray):
    """Loss and d(loss)/d(log_probs) via the alpha-beta recursion."""
    T, V = log_probs.shape
    S = labels_ext.shape[0]
    skip = np.zeros(S, dtype=bool)
    if S > 2:
        skip[2:] = (labels_ext[2:] != labels_ext[:-2]) & (labels_ext[2:] != labels_ext[0])
    alpha = _ctc_alpha_numpy(log_probs, labels_ext)
    beta = np.full((T, S), NEG_INF)
    beta[-1, S - 1] = log_probs[-1, labels_ext[S - 1]]
    if S > 1:
        beta[-1, S - 2] = log_probs[-1, labels_ext[S - 2]]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        if S > 2:
            # transition s -> s+2 mirrors the forward skip mask at s+2
            acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + log_probs[t, labels_ext]
    log_p = alpha[-1, S - 1]
    if S > 1:
        log_p = np.logaddexp(log_p, alpha[-1, S - 2])
    # posterior over lattice states; each state contributes -gamma to its label
    gamma = alpha + beta - log_probs[:, labels_ext] - log_p
    grad = np.zeros_like(log_probs)
    rows = np.broadcast_to(np.arange(T)[:, None], (T, S))
    cols = np.broadcast_to(labels_ext[None, :], (T, S))
    np.add.at(grad, (rows.ravel(), cols.ravel()), -np.exp(gamma).ravel())
    return float(-log_p), grad


@njit(cache=True)
def _lse2(a, b):  # pragma: no cover - numba-compiled
    if a < b:
        a, b = b, a
    if b == -np.inf:
        return a
    return a + np.log1p(np.exp(b - a))


@njit(cache=True)
def _ctc_alpha_nb(log_probs, labels_ext):  # pragma: no cover - numba-compiled
    T = log_probs.shape[0]
    S = labels_ext.shape[0]
    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = log_probs[0, labels_ext[0]]
    if S > 1:
        alpha[0, 1] = log_probs[0, labels_ext[1]]
    for t in range(1, T):
        for s in range(S):
            a = alpha[t - 1, s]
            if s >= 1:
                a = _lse2(a, alpha[t - 1, s - 1])
            if s >= 2 and labels_ext[s] != labels_ext[0] and labels_ext[s] != labels_ext[s - 2]:
                a = _lse2(a, alpha[t - 1, s - 2])
            alpha[t, s] = a + log_probs[t, labels_ext[s]]
    return alpha


@njit(cache=True)
def _ctc_loss_nb(log_probs, labels_ext):  # pragma: no cover - numba-compiled
    alpha = _ctc_alpha_nb(log_probs, labels_ext)
    S = labels_ext.shape[0]
    tail = alpha[-1, S - 1]
    if S > 1:
        tail = _lse2(tail, alpha[-1, S - 2])
    return -tail


@njit(cache=True)
def _ctc_grad_nb(log_probs, labels_ext):  # pragma: no cover - numba-compiled
    T = log_probs.shape[0]
    V = log_probs.shape[1]
    S = labels_ext.shape[0]
    alpha = _ctc_alpha_nb(log_probs, labels_ext)
    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = log_probs[T - 1, labels_ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = log_probs[T - 1, labels_ext[S - 2]]
    for t in range(T - 2, -1, -1):
        for s in range(S):
            b = beta[t + 1, s]
            if s + 1 < S:
                b = _lse2(b, beta[t + 1, s + 1])
            if s + 2 < S and labels_ext[s + 2] != labels_ext[0] and labels_ext[s + 2] != labels_ext[s]:
                b = _lse2(b, beta[t + 1, s + 2])
            beta[t, s] = b + log_probs[t, labels_ext[s]]
    log_p = alpha[T - 1, S - 1]
    if S > 1:
        log_p = _lse2(log_p, alpha[T - 1, S - 2])
    grad = np.zeros((T, V), dtype=log_probs.dtype)
    for t in range(T):
        for s in range(S):
            g = alpha[t, s] + beta[t, s] - log_probs[t, labels_ext[s]] - log_p
            grad[t, labels_ext[s]] -= np.exp(g)
    return -log_p, grad


def ctc_loss_numba(log_probs: np.ndarray, labels_ext: np.ndarray) -> float:
    return float(_ctc_loss_nb(log_probs, labels_ext))


def ctc_grad_numba(log_probs: np.ndarray, labels_ext: np.ndarray):
    loss, grad = _ctc_grad_nb(log_probs, labels_ext)
    return float(loss), grad


# ---------------------------------------------------------------------------
# Windowed-sinc resampling, 16 taps per side, Hann-windowed, with anti-alias
# cutoff when downsampling.  `step` is input samples per output sample.
# ---------------------------------------------------------------------------

SINC_TAPS = 16


def resample_sinc_numpy(x: np.ndarray, n_out: int, step: float) -> np.ndarray:
    cutoff = min(1.0, 1.0 / step)
    pos = np.arange(n_out, dtype=np.float64) * step
    base = np.floor(pos).astype(np.int64)
    k = np.arange(-SINC_TAPS + 1, SINC_TAPS + 1)
    idx = base[:, None] + k[None, :]
    delta = pos[:, None] - idx
    win = 0.5 + 0.5 * np.cos(np.pi * delta / SINC_TAPS)
    kern = cutoff * np.sinc(cutoff * delta) * win
    valid = (idx >= 0) & (idx < x.shape[0])
    gathered = np.where(valid, x[np.clip(idx, 0, x.shape[0] - 1)], 0.0)
    return np.sum(gathered * kern, axis=1)


@njit(cache=True)
def _resample_sinc_nb(x, n_out, step):  # pragma: no cover - numba-compiled
    taps = SINC_TAPS
    cutoff = min(1.0, 1.0 / step)
    y = np.zeros(n_out, dtype=np.float64)
    n_in = x.shape[0]
    for n in range(n_out):
        pos = n * step
        base = int(np.floor(pos))
        acc = 0.0
        for k in range(-taps + 1, taps + 1):
            j = base + k
            if j < 0 or j >= n_in:
                continue
            d = pos - j
            win = 0.5 + 0.5 * np.cos(np.pi * d / taps)
            arg = cutoff * d
            if arg == 0.0:
                s = 1.0
            else:
                s = np.sin(np.pi * arg) / (np.pi * arg)
            acc += x[j] * cutoff * s * win
        y[n] = acc
    return y


def resample_sinc_numba(x: np.ndarray, n_out: int, step: float) -> np.ndarray:
    return _resample_sinc_nb(np.ascontiguousarray(x, dtype=np.float64), n_out, float(step))


# active implementations
if USE_NUMBA:
    ctc_loss_kernel = ctc_loss_numba
    ctc_grad_kernel = ctc_grad_numba
    resample_kernel = resample_sinc_numba
else:
    ctc_loss_kernel = ctc_loss_numpy
    ctc_grad_kernel = ctc_grad_numpy
    resample_kernel = resample_sinc_numpy
