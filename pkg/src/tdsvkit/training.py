"""Training loops for the three trainable branches plus shared plumbing
(feature caching, cropping, embedding extraction, evaluation helpers).

Batches are processed as independent per-utterance graphs so the heavy
forward/backward work can run on a thread pool.  Gradients land in
per-utterance maps that are merged in utterance order, and BatchNorm
running-stat updates are captured and applied in the same order, so the
arithmetic is bit-identical for any worker count.  Cross-utterance pieces
(the classifier's batch BN + CE, the AAM head) run on the main thread
between the two phases; their gradient w.r.t. each stacked embedding is
injected back into the per-utterance graphs as a seeded backward term.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from pathlib import Path

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    def threadpool_limits(*args, **kwargs):
        return nullcontext()

from . import autograd as ag
from .audio import MfccConfig, load_wav, mfcc, resample
from .autograd import Tensor, no_grad
from .config import RunConfig
from .corpus import CorpusManifest
from .ctc import ctc_loss
from .errors import DomainError
from .fusion import CnnFusion
from .layers import apply_bn_stats, bn_stat_capture
from .optim import Adam, clip_grad_norm
from .speakernet import AamHead, SpeakerExtractor, aam_softmax_loss
from .textnet import TextExtractor, compose_loss, cross_entropy
from .tokens import LABEL_IDS, canonical, label_index


def np_dtype(name: str):
    return np.float32 if name == "float32" else np.float64


def compute_features(manifest: CorpusManifest, corpus_dir, mfcc_cfg: MfccConfig,
                     dtype=np.float32) -> dict[str, np.ndarray]:
    """MFCC cache keyed by utterance id; resamples on ingestion if needed."""
    corpus_dir = Path(corpus_dir)
    feats = {}
    for rec in manifest:
        w = load_wav(corpus_dir / rec.audio_path)
        if w.sample_rate != mfcc_cfg.target_rate_hz:
            w = resample(w, mfcc_cfg.target_rate_hz)
        feats[rec.utt_id] = mfcc(w, mfcc_cfg, source_id=rec.utt_id).frames.astype(dtype)
    return feats


def crop_or_pad(frames: np.ndarray, n_frames: int, rng: np.random.Generator | None = None):
    """Fixed-length view for paper-shape runs: random crop when training
    (rng given) or center crop otherwise; reflect-pad if too short."""
    t = frames.shape[0]
    if t < n_frames:
        if t > 1:
            return np.pad(frames, [(0, n_frames - t), (0, 0)], mode="reflect")
        return np.pad(frames, [(0, n_frames - t), (0, 0)], mode="edge")
    if t == n_frames:
        return frames
    start = int(rng.integers(0, t - n_frames + 1)) if rng is not None else (t - n_frames) // 2
    return frames[start : start + n_frames]


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


def _resolve_workers(requested: int, batch_size: int) -> int:
    if requested > 0:
        return min(requested, batch_size)
    return max(1, min(os.cpu_count() or 1, batch_size, 8))


class _Pool:
    """Order-preserving map over a reusable thread pool (inline when 1 worker)."""

    def __init__(self, n_workers: int):
        self.n_workers = n_workers
        self._ex = ThreadPoolExecutor(max_workers=n_workers) if n_workers > 1 else None

    def map(self, fn, items):
        if self._ex is None:
            return [fn(it) for it in items]
        return list(self._ex.map(fn, items))

    def close(self):
        if self._ex is not None:
            self._ex.shutdown()


def _merge_grads(grad_maps: list[dict]):
    for gm in grad_maps:
        for p, g in gm.items():
            p.grad = g if p.grad is None else p.grad + g


def _inject(node: Tensor, seed: np.ndarray) -> Tensor:
    """Scalar term whose backward seeds `node` with exactly `seed`."""
    return ag.sum_(ag.mul(node, Tensor(seed)))


def _tsum(tensors):
    out = tensors[0]
    for t in tensors[1:]:
        out = ag.add(out, t)
    return out


# ---------------------------------------------------------------------------
# text branch
# ---------------------------------------------------------------------------


def train_text_branch(train_manifest: CorpusManifest, features: dict, cfg: RunConfig,
                      model: TextExtractor | None = None, log=None):
    """Adam training of the transformer text branch under the triple loss.

    Returns (model, history); history rows carry per-epoch mean branch
    losses, the recomposed total, and the learning rate in force.
    """
    tc = cfg.train_text
    dtype = np_dtype(tc.dtype)
    rng = np.random.default_rng([cfg.seed, 101])
    if model is None:
        model = TextExtractor(cfg.text, np.random.default_rng([cfg.seed, 100]), dtype=dtype)
    model.train()
    opt = Adam(model.param_store(), lr=tc.lr, lr_decay=tc.lr_decay)
    recs = sorted(train_manifest, key=lambda r: r.utt_id)
    history = []
    for epoch in range(tc.epochs):
        order = rng.permutation(len(recs))
        sums = np.zeros(3, dtype=np.float64)
        seen = 0
        for batch_idx in _chunks(order, tc.batch_size):
            batch = [recs[i] for i in batch_idx]
            b = len(batch)
            states = model.encode_batch([features[r.utt_id] for r in batch])
            e_stack = ag.concat(
                [ag.reshape(model.text_embedding(s), (1, -1)) for s in states], axis=0)
            logits = model.class_logits(e_stack)
            labels = [label_index(r.label_id) for r in batch]
            l1 = cross_entropy(logits, labels)
            preds = np.argmax(logits.data, axis=1)
            l2s, l3s = [], []
            for i, rec in enumerate(batch):
                l2s.append(ctc_loss(model.ctc_log_probs(states[i]), rec.tokens))
                if cfg.text.decoder_targets == "ground_truth":
                    tgt = canonical(rec.label_id)
                else:
                    tgt = canonical(LABEL_IDS[int(preds[i])])
                l3s.append(model.decode_loss(states[i], tgt))
            l2 = ag.mul(_tsum(l2s), 1.0 / b)
            l3 = ag.mul(_tsum(l3s), 1.0 / b)
            breakdown = compose_loss(l1, l2, l3)
            breakdown.total.backward()
            clip_grad_norm(opt.params, tc.clip_norm)
            opt.step()
            opt.zero_grad()
            vals = breakdown.as_floats()
            sums += np.array(vals[:3]) * b
            seen += b
        m1, m2, m3 = sums / seen
        row = {"epoch": epoch, "l1": m1, "l2": m2, "l3": m3,
               "total": 0.6 * m1 + 0.2 * m2 + 0.2 * m3, "lr": opt.lr}
        history.append(row)
        if log:
            log(row)
        opt.epoch_end()
    return model, history


def eval_text_accuracy(model: TextExtractor, manifest: CorpusManifest, features: dict) -> float:
    model.eval()
    hits = 0
    with no_grad():
        for rec in manifest:
            e = model.text_embedding(model.encode(features[rec.utt_id]))
            logits = model.class_logits(e)
            hits += int(np.argmax(logits.data) == label_index(rec.label_id))
    model.train()
    return hits / len(manifest)


# ---------------------------------------------------------------------------
# speaker branch
# ---------------------------------------------------------------------------


def train_speaker_branch(train_manifest: CorpusManifest, features: dict, cfg: RunConfig,
                         mode: str | None = None, model: SpeakerExtractor | None = None,
                         log=None):
    """AAM-softmax training of the TDNN + pooling speaker branch."""
    tc = cfg.train_speaker
    dtype = np_dtype(tc.dtype)
    speakers = train_manifest.speakers()
    if len(speakers) < 2:
        raise DomainError("speaker training needs at least two speakers")
    spk_index = {s: i for i, s in enumerate(speakers)}
    rng = np.random.default_rng([cfg.seed, 201])
    if model is None:
        model = SpeakerExtractor(cfg.speaker_encoder, cfg.swasp,
                                 np.random.default_rng([cfg.seed, 200]),
                                 mode=mode or cfg.pooling_mode, dtype=dtype)
    head = AamHead(model.embed_dim, len(speakers), np.random.default_rng([cfg.seed, 202]),
                   cfg.aam, dtype=dtype)
    model.train()
    params = model.param_store()
    params.update({"aam." + k: v for k, v in head.param_store().items()})
    opt = Adam(params, lr=tc.lr, lr_decay=tc.lr_decay)
    recs = sorted(train_manifest, key=lambda r: r.utt_id)
    n_workers = _resolve_workers(tc.n_workers, tc.batch_size)
    pool = _Pool(n_workers)
    limits = threadpool_limits(limits=1) if n_workers > 1 else nullcontext()
    history = []
    try:
        with limits:
            for epoch in range(tc.epochs):
                order = rng.permutation(len(recs))
                total = 0.0
                seen = 0
                for batch_idx in _chunks(order, tc.batch_size):
                    batch = [recs[i] for i in batch_idx]
                    b = len(batch)
                    crop_starts = []
                    for rec in batch:
                        t = features[rec.utt_id].shape[0]
                        if cfg.crop_frames and t > cfg.crop_frames:
                            crop_starts.append(int(rng.integers(0, t - cfg.crop_frames + 1)))
                        else:
                            crop_starts.append(0)

                    def phase1(i):
                        rec = batch[i]
                        frames = features[rec.utt_id]
                        if cfg.crop_frames:
                            t = frames.shape[0]
                            if t > cfg.crop_frames:
                                s = crop_starts[i]
                                frames = frames[s : s + cfg.crop_frames]
                            elif t < cfg.crop_frames:
                                frames = crop_or_pad(frames, cfg.crop_frames)
                        sink = []
                        with bn_stat_capture(sink):
                            emb = model(frames)
                        return emb, sink

                    part1 = pool.map(phase1, list(range(b)))
                    for _, sink in part1:
                        apply_bn_stats(sink)
                    e_leaf = Tensor(np.stack([e.data for e, _ in part1]), requires_grad=True)
                    labels = [spk_index[r.speaker_id] for r in batch]
                    loss = aam_softmax_loss(e_leaf, labels, head)
                    gm_head: dict = {}
                    loss.backward(grad_map=gm_head)
                    ge = gm_head.pop(e_leaf)

                    def phase2(i):
                        emb, _ = part1[i]
                        gm: dict = {}
                        _inject(emb, ge[i]).backward(grad_map=gm)
                        return gm

                    part2 = pool.map(phase2, list(range(b)))
                    _merge_grads([gm_head] + part2)
                    clip_grad_norm(opt.params, tc.clip_norm)
                    opt.step()
                    opt.zero_grad()
                    total += float(loss.data) * b
                    seen += b
                row = {"epoch": epoch, "aam_loss": total / seen, "lr": opt.lr}
                history.append(row)
                if log:
                    log(row)
                opt.epoch_end()
    finally:
        pool.close()
    return model, head, history


def train_accuracy_speaker(model: SpeakerExtractor, head: AamHead,
                           manifest: CorpusManifest, features: dict) -> float:
    """Top-1 accuracy of the AAM classifier over the training inventory."""
    speakers = manifest.speakers()
    spk_index = {s: i for i, s in enumerate(speakers)}
    model.eval()
    hits = 0
    with no_grad():
        wn = head.w.data / np.linalg.norm(head.w.data, axis=0, keepdims=True)
        for rec in manifest:
            v = model(features[rec.utt_id]).data
            v = v / np.linalg.norm(v)
            hits += int(np.argmax(v @ wn) == spk_index[rec.speaker_id])
    model.train()
    return hits / len(manifest)


# ---------------------------------------------------------------------------
# embedding extraction
# ---------------------------------------------------------------------------


def extract_embeddings(model, manifest: CorpusManifest, features: dict,
                       crop_frames: int = 0) -> dict[str, np.ndarray]:
    """Eval-mode embeddings for every utterance; deterministic."""
    model.eval()
    out = {}
    with no_grad():
        for rec in manifest:
            frames = features[rec.utt_id]
            if crop_frames:
                frames = crop_or_pad(frames, crop_frames)
            if isinstance(model, TextExtractor):
                vec = model.text_embedding(model.encode(frames)).data
            else:
                vec = model(frames).data
            out[rec.utt_id] = vec.astype(np.float64).copy()
    model.train()
    return out


# ---------------------------------------------------------------------------
# CNN fusion branch
# ---------------------------------------------------------------------------


def _pair_inventory(manifest: CorpusManifest, rng: np.random.Generator, n_pairs: int):
    """Balanced target/nontarget pairs under the strict TD-SV label."""
    recs = sorted(manifest, key=lambda r: r.utt_id)
    pos, neg = [], []
    for i in range(len(recs)):
        for j in range(i + 1, len(recs)):
            a, b = recs[i], recs[j]
            same = a.speaker_id == b.speaker_id and a.label_id == b.label_id
            (pos if same else neg).append((a.utt_id, b.utt_id))
    if not pos or not neg:
        raise DomainError("need both target and nontarget pairs for fusion training")
    half = n_pairs // 2
    pick_pos = rng.choice(len(pos), size=min(half, len(pos)), replace=False)
    pick_neg = rng.choice(len(neg), size=min(half, len(neg)), replace=False)
    pairs = [(pos[int(i)], 1.0) for i in pick_pos] + [(neg[int(i)], -1.0) for i in pick_neg]
    order = rng.permutation(len(pairs))
    return [pairs[int(i)] for i in order]


def train_cnn_fusion(text_emb: dict, spk_emb: dict, train_manifest: CorpusManifest,
                     cfg: RunConfig, log=None):
    """Train the CNN fusion head on frozen embeddings with a binary
    verification objective: softplus(-y * 10 * cosine(fused_a, fused_b))."""
    tc = cfg.train_fusion
    dtype = np_dtype(tc.dtype)
    rng = np.random.default_rng([cfg.seed, 301])
    dim = len(next(iter(text_emb.values())))
    model = CnnFusion(dim, np.random.default_rng([cfg.seed, 300]), dtype=dtype)
    model.train()
    opt = Adam(model.param_store(), lr=tc.lr, lr_decay=tc.lr_decay)
    pairs = _pair_inventory(train_manifest, rng, n_pairs=40 * tc.batch_size)
    history = []
    for epoch in range(tc.epochs):
        order = rng.permutation(len(pairs))
        total = 0.0
        for batch_idx in _chunks(order, tc.batch_size):
            losses = []
            for bi in batch_idx:
                (ua, ub), y = pairs[int(bi)]
                fa = _fuse_tensor(model, text_emb[ua], spk_emb[ua], dtype)
                fb = _fuse_tensor(model, text_emb[ub], spk_emb[ub], dtype)
                cos = _cosine_tensor(fa, fb)
                margin = ag.mul(cos, -10.0 * y)
                losses.append(ag.log(ag.add(ag.exp(margin), 1.0)))
            loss = ag.mul(_tsum(losses), 1.0 / len(batch_idx))
            loss.backward()
            clip_grad_norm(opt.params, tc.clip_norm)
            opt.step()
            opt.zero_grad()
            total += float(loss.data) * len(batch_idx)
        row = {"epoch": epoch, "fusion_loss": total / len(pairs), "lr": opt.lr}
        history.append(row)
        if log:
            log(row)
        opt.epoch_end()
    return model, history


def _fuse_tensor(model: CnnFusion, e_text: np.ndarray, e_spk: np.ndarray, dtype):
    return model(Tensor(e_text.astype(dtype)), Tensor(e_spk.astype(dtype)))


def _cosine_tensor(a: Tensor, b: Tensor) -> Tensor:
    num = ag.sum_(ag.mul(a, b))
    den = ag.mul(ag.sqrt(ag.add(ag.sum_(ag.mul(a, a)), 1e-12)),
                 ag.sqrt(ag.add(ag.sum_(ag.mul(b, b)), 1e-12)))
    return ag.div(num, den)
