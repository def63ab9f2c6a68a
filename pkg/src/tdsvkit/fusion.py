"""Embedding fusion (addition / Hadamard product / learned CNN mixing) and
cosine trial scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .errors import DegenerateError, ShapeError
from .layers import Conv1d, Module
from .metrics import ScoreSet
from .speakernet import Embedding

STRATEGIES = ("add", "mul", "cnn")


@dataclass
class FusedEmbedding:
    vector: np.ndarray
    strategy: str


class CnnFusion(Module):
    """Learned fusion: stack the two embeddings as a 2-channel map over the
    embedding axis, apply two same-padded Conv1d+ReLU layers, and collapse
    the channels with a 1x1 conv."""

    def __init__(self, dim: int, rng, dtype=np.float64):
        super().__init__()
        self.dim = dim
        self.conv1 = Conv1d(2, 2, 3, rng, padding="same", dtype=dtype)
        self.conv2 = Conv1d(2, 2, 3, rng, padding="same", dtype=dtype)
        self.collapse = Conv1d(2, 1, 1, rng, padding=0, dtype=dtype)

    def forward(self, e_text: Tensor, e_spk: Tensor) -> Tensor:
        stacked = ag.stack([e_text, e_spk], axis=0)  # [2, dim]
        h = ag.relu(self.conv1(stacked))
        h = ag.relu(self.conv2(h))
        return ag.reshape(self.collapse(h), (self.dim,))

    __call__ = forward


def _vec(e) -> np.ndarray:
    if isinstance(e, (Embedding, FusedEmbedding)):
        return e.vector
    if isinstance(e, Tensor):
        return e.data
    return np.asarray(e, dtype=np.float64)


def fuse(e_text, e_spk, strategy: str, cnn: CnnFusion | None = None) -> FusedEmbedding:
    """Combine a text and a speaker embedding of equal dimension."""
    a, b = _vec(e_text), _vec(e_spk)
    if a.shape != b.shape:
        raise ShapeError(f"embedding dims differ: {a.shape} vs {b.shape}")
    if strategy == "add":
        return FusedEmbedding(a + b, "add")
    if strategy == "mul":
        return FusedEmbedding(a * b, "mul")
    if strategy == "cnn":
        if cnn is None:
            raise ShapeError("cnn strategy requires a trained CnnFusion module")
        with no_grad():
            out = cnn(Tensor(a.astype(cnn.conv1.w.data.dtype)),
                      Tensor(b.astype(cnn.conv1.w.data.dtype)))
        return FusedEmbedding(out.data.astype(np.float64), "cnn")
    raise ShapeError(f"unknown fusion strategy {strategy!r}")


def cosine_score(a, b) -> float:
    """Cosine similarity in [-1, 1]; rejects zero vectors."""
    va, vb = _vec(a), _vec(b)
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise DegenerateError("cosine of a zero vector is undefined")
    return float(np.dot(va, vb) / (na * nb))


def score_trials(trials, embeddings: dict, label_policy: str = "strict") -> ScoreSet:
    """Cosine-score each trial, output order = input order.

    label_policy selects the target definition: "strict" counts a trial as
    target only when it is same-speaker AND text-matched (the TD-SV task);
    "speaker" uses the same-speaker flag alone.
    """
    if label_policy not in ("strict", "speaker"):
        raise ShapeError(f"unknown label policy {label_policy!r}")
    scores = np.zeros(len(trials))
    labels = np.zeros(len(trials), dtype=bool)
    for i, t in enumerate(trials):
        for utt in (t.enroll_utt, t.test_utt):
            if utt not in embeddings:
                raise LookupError(f"no embedding for utterance {utt!r}")
        scores[i] = cosine_score(embeddings[t.enroll_utt], embeddings[t.test_utt])
        labels[i] = t.is_target and (t.text_matched or label_policy == "speaker")
    return ScoreSet(scores=scores, labels=labels)
