"""CTC loss as an autograd primitive.

Forward runs the alpha recursion over the blank-expanded label lattice in
log space; backward uses the alpha-beta posterior.  Both directions run on
the accelerated kernels from :mod:`tdsvkit.accel`.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .accel import ctc_grad_kernel, ctc_loss_kernel
from .autograd import Tensor
from .errors import DomainError, InfeasibleError
from .tokens import CTC_BLANK


def expand_labels(target, blank: int = CTC_BLANK) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int32)
    ext[1::2] = np.asarray(target, dtype=np.int32)
    return ext


def min_frames(target) -> int:
    """Shortest T admitting an alignment: one frame per label plus a blank
    between adjacent repeats."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_loss(log_probs: Tensor, target, blank: int = CTC_BLANK) -> Tensor:
    """Negative log-likelihood of `target` under per-frame log_probs [T, V].

    target is a sequence of label ids (no blanks).  Raises InfeasibleError
    when T is too short for any valid alignment.
    """
    target = list(target)
    if len(target) == 0:
        raise DomainError("CTC target must be non-empty")
    if any(t == blank for t in target):
        raise DomainError("CTC target must not contain the blank symbol")
    t_frames, vocab = log_probs.data.shape
    if any(t < 0 or t >= vocab for t in target):
        raise DomainError("CTC target symbol outside the vocabulary")
    if t_frames < min_frames(target):
        raise InfeasibleError(
            f"{t_frames} frames cannot align a target of {len(target)} labels")
    ext = expand_labels(target, blank)
    lp64 = np.ascontiguousarray(log_probs.data, dtype=np.float64)
    loss = ctc_loss_kernel(lp64, ext)

    def bwd(g):
        _, grad = ctc_grad_kernel(lp64, ext)
        return ((float(g) * grad).astype(log_probs.data.dtype, copy=False),)

    return ag._node(np.asarray(loss, dtype=log_probs.data.dtype), (log_probs,), bwd)
