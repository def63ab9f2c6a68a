"""Transformer text-embedding extractor with the triple training loss.

One encoder feeds three heads: a classifier over the rhythm classes (whose
pooled activations are the 192-dim text embedding), a CTC head over the
digit/pause vocabulary, and a teacher-forced transformer decoder.  The
total loss is the fixed 0.6/0.2/0.2 blend of the three.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .ctc import ctc_loss
from .errors import DomainError
from .layers import (Conv1d, BatchNorm1d, DecoderBlock, EncoderBlock, LayerNorm,
                     Linear, Module, ModuleList, causal_mask, sinusoidal_positions)
from .pooling import AspScorer, asp
from .tokens import CTC_VOCAB, DEC_EOS, DEC_SOS, DEC_VOCAB, LABEL_IDS, canonical, label_index

LOSS_WEIGHTS = (0.6, 0.2, 0.2)


@dataclass
class TextExtractorConfig:
    input_dim: int = 20
    encoder_blocks: int = 4
    decoder_blocks: int = 4
    heads: int = 4
    d_k: int = 64
    ff_dim: int = 1024
    embed_dim: int = 192
    n_classes: int = 6
    head_channels: int = 128
    asp_hidden: int = 128
    decoder_targets: str = "predicted"  # or "ground_truth"

    @property
    def d_model(self) -> int:
        return self.heads * self.d_k


@dataclass
class LossBreakdown:
    """Triple loss: total = 0.6*l1 + 0.2*l2 + 0.2*l3 (built from the same
    tensors, so the identity holds at full precision)."""

    l1: Tensor
    l2: Tensor
    l3: Tensor
    total: Tensor
    weights: tuple = LOSS_WEIGHTS

    def as_floats(self):
        return (float(self.l1.data), float(self.l2.data), float(self.l3.data),
                float(self.total.data))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean CE of [K] or [B, K] logits against integer labels."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if logits.data.ndim == 1:
        logits = ag.reshape(logits, (1, -1))
    lsm = ag.log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.data.shape, dtype=logits.data.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return ag.mul(ag.sum_(ag.mul(lsm, Tensor(onehot))), -1.0 / len(labels))


_PE_CACHE: dict = {}


def _positions(n: int, d: int, dtype) -> np.ndarray:
    key = (d, np.dtype(dtype).name)
    cached = _PE_CACHE.get(key)
    if cached is None or cached.shape[0] < n:
        size = max(n, 512)
        if cached is not None:
            size = max(size, 2 * cached.shape[0])
        _PE_CACHE[key] = sinusoidal_positions(size, d, dtype)
        cached = _PE_CACHE[key]
    return cached[:n]


class TextExtractor(Module):
    def __init__(self, cfg: TextExtractorConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        d = cfg.d_model
        hc = cfg.head_channels
        self.input_proj = Linear(cfg.input_dim, d, rng, dtype)
        self.enc_blocks = ModuleList(
            [EncoderBlock(d, cfg.heads, cfg.ff_dim, rng, dtype) for _ in range(cfg.encoder_blocks)])
        self.enc_norm = LayerNorm(d, dtype=dtype)
        # classifier head: Conv1D -> ReLU -> BN -> ASP -> proj(192), then FC -> BN -> classes
        self.cls_conv = Conv1d(d, hc, 3, rng, padding="same", dtype=dtype)
        self.cls_bn = BatchNorm1d(hc, channel_axis=0, dtype=dtype)
        self.cls_asp = AspScorer(hc, cfg.asp_hidden, rng, dtype)
        self.cls_proj = Linear(2 * hc, cfg.embed_dim, rng, dtype)
        self.cls_fc = Linear(cfg.embed_dim, cfg.n_classes, rng, dtype)
        self.cls_fc_bn = BatchNorm1d(cfg.n_classes, channel_axis=1, dtype=dtype)
        # CTC head: three Conv1D -> ReLU -> BN blocks, then linear to the CTC vocab
        self.ctc_convs = ModuleList([Conv1d(d if i == 0 else hc, hc, 3, rng, padding="same", dtype=dtype)
                                     for i in range(3)])
        self.ctc_bns = ModuleList([BatchNorm1d(hc, channel_axis=0, dtype=dtype) for _ in range(3)])
        self.ctc_out = Linear(hc, CTC_VOCAB, rng, dtype)
        # decoder
        self.tok_emb = Tensor(
            (rng.standard_normal((DEC_VOCAB, d)) * 0.02).astype(dtype), requires_grad=True)
        self.dec_blocks = ModuleList(
            [DecoderBlock(d, cfg.heads, cfg.ff_dim, rng, dtype) for _ in range(cfg.decoder_blocks)])
        self.dec_norm = LayerNorm(d, dtype=dtype)
        self.dec_out = Linear(d, DEC_VOCAB, rng, dtype)

    # -- encoder ---------------------------------------------------------
    def encode(self, feats) -> Tensor:
        """MFCC frames [T, n_in] -> encoder states [d_model, T]."""
        frames = feats.frames if hasattr(feats, "frames") else feats
        x = Tensor(np.ascontiguousarray(frames, dtype=self.dtype))
        h = self.input_proj(x)
        h = ag.add(h, Tensor(_positions(h.data.shape[0], self.cfg.d_model, self.dtype)))
        for blk in self.enc_blocks:
            h = blk(h)
        h = self.enc_norm(h)
        return ag.transpose(h, (1, 0))

    def encode_batch(self, frames_list) -> list[Tensor]:
        """encode() for a batch, packed along time for GEMM throughput.

        Frame-wise layers run once on the [sum_T, d_model] concatenation;
        attention stays inside per-utterance spans, so each returned
        [d_model, T_i] tensor matches encode() on that utterance alone.
        """
        arrs = [f.frames if hasattr(f, "frames") else f for f in frames_list]
        spans = []
        off = 0
        for a in arrs:
            spans.append((off, off + a.shape[0]))
            off += a.shape[0]
        packed = np.concatenate([np.ascontiguousarray(a, dtype=self.dtype) for a in arrs])
        h = self.input_proj(Tensor(packed))
        pe = np.concatenate([_positions(a.shape[0], self.cfg.d_model, self.dtype) for a in arrs])
        h = ag.add(h, Tensor(pe))
        for blk in self.enc_blocks:
            h = blk.forward_packed(h, spans)
        h = self.enc_norm(h)
        return [ag.transpose(h[a:b], (1, 0)) for a, b in spans]

    # -- classifier head ---------------------------------------------------
    def text_embedding(self, states: Tensor) -> Tensor:
        """Encoder states [d, T] -> 192-dim text embedding."""
        h = self.cls_bn(ag.relu(self.cls_conv(states)))
        stats = asp(h, self.cls_asp)
        pooled = ag.concat([stats.mu, stats.sigma()], axis=-1)
        e = self.cls_proj(ag.reshape(pooled, (1, -1)))
        return ag.reshape(e, (self.cfg.embed_dim,))

    def class_logits(self, e_text: Tensor) -> Tensor:
        """Text embeddings [B, 192] (or [192]) -> class logits via FC + BN.

        The BN here normalizes across the batch; with a single sample in
        train mode the batch statistics are degenerate, so meaningful
        training requires batches of at least two (the trainer stacks
        embeddings before calling this).
        """
        single = e_text.data.ndim == 1
        if single:
            e_text = ag.reshape(e_text, (1, -1))
        logits = self.cls_fc_bn(self.cls_fc(e_text))
        return ag.reshape(logits, (self.cfg.n_classes,)) if single else logits

    def classify_text(self, states: Tensor):
        """Returns (E_text [192], logits [n_classes]) for one utterance."""
        e = self.text_embedding(states)
        return e, self.class_logits(e)

    # -- CTC head ----------------------------------------------------------
    def ctc_log_probs(self, states: Tensor) -> Tensor:
        h = states
        for conv, bn in zip(self.ctc_convs, self.ctc_bns):
            h = bn(ag.relu(conv(h)))
        logits = self.ctc_out(ag.transpose(h, (1, 0)))
        return ag.log_softmax(logits, axis=-1)

    # -- decoder ----------------------------------------------------------
    def decode_logits(self, states: Tensor, target) -> Tensor:
        """Teacher-forced decoder logits [len(target)+1, DEC_VOCAB]."""
        target = list(target)
        if not target:
            raise DomainError("decoder target must be non-empty")
        dec_in = np.array([DEC_SOS] + target, dtype=np.int64)
        memory = ag.transpose(states, (1, 0))
        h = ag.take_rows(self.tok_emb, dec_in)
        h = ag.add(h, Tensor(_positions(len(dec_in), self.cfg.d_model, self.dtype)))
        mask = causal_mask(len(dec_in))
        for blk in self.dec_blocks:
            h = blk(h, memory, mask)
        return self.dec_out(self.dec_norm(h))

    def decode_loss(self, states: Tensor, target) -> Tensor:
        """Mean token-level CE against target + EOS under teacher forcing."""
        logits = self.decode_logits(states, target)
        labels = list(target) + [DEC_EOS]
        return cross_entropy(logits, labels)

    # -- combined ----------------------------------------------------------
    def text_total_loss(self, feats, label_id: str, transcript=None) -> LossBreakdown:
        """Triple loss for one utterance (see class_logits for the BN caveat)."""
        states = self.encode(feats)
        e_text, logits = self.classify_text(states)
        l1 = cross_entropy(logits, [label_index(label_id)])
        tokens = tuple(transcript) if transcript is not None else canonical(label_id)
        l2 = ctc_loss(self.ctc_log_probs(states), tokens)
        if self.cfg.decoder_targets == "ground_truth":
            dec_target = canonical(label_id)
        else:
            pred = int(np.argmax(logits.data))
            dec_target = canonical(LABEL_IDS[pred])
        l3 = self.decode_loss(states, dec_target)
        return compose_loss(l1, l2, l3)

    def extract_text_embedding(self, feats) -> np.ndarray:
        """Inference path: encoder + classifier pooling, eval-mode BN."""
        with no_grad():
            return self.text_embedding(self.encode(feats)).data.copy()


def compose_loss(l1: Tensor, l2: Tensor, l3: Tensor) -> LossBreakdown:
    a, b, c = LOSS_WEIGHTS
    total = ag.add(ag.add(ag.mul(l1, a), ag.mul(l2, b)), ag.mul(l3, c))
    return LossBreakdown(l1=l1, l2=l2, l3=l3, total=total)
