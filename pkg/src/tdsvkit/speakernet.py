"""Speaker embedding branch: dilated TDNN encoder, pooling head, AAM loss.

The frame encoder is a small stand-in exposing the same contract as an
ECAPA-style trunk: stacked dilated Conv1D/ReLU/BN layers whose outputs are
concatenated channel-wise and mixed by a 1x1 conv (multi-layer feature
aggregation), yielding [mfa_channels, T] frame states for the pooling head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .errors import DomainError, ShapeError
from .layers import BatchNorm1d, Conv1d, Linear, Module, ModuleList, xavier_uniform
from .pooling import PoolingHead, SwaspConfig
from .textnet import cross_entropy


@dataclass
class SpeakerEncoderConfig:
    input_dim: int = 20
    channels: tuple = (128, 128, 128)
    dilations: tuple = (1, 2, 3)
    kernel: int = 3
    mfa_channels: int = 256


@dataclass
class AamConfig:
    scale: float = 30.0
    margin: float = 0.2

    def __post_init__(self):
        if self.scale <= 0:
            raise DomainError("AAM scale must be positive")
        if not (0.0 <= self.margin < np.pi / 2):
            raise DomainError("AAM margin must lie in [0, pi/2)")


@dataclass
class Embedding:
    """A 192-dim embedding vector tagged with its source branch."""

    vector: np.ndarray
    kind: str = "speaker"  # text | speaker | fused


COS_CLIP = 1e-7


class TdnnEncoder(Module):
    def __init__(self, cfg: SpeakerEncoderConfig, rng, dtype=np.float64):
        super().__init__()
        if len(cfg.channels) != len(cfg.dilations):
            raise ShapeError("channels and dilations must have equal length")
        self.cfg = cfg
        convs, bns = [], []
        prev = cfg.input_dim
        for ch, dil in zip(cfg.channels, cfg.dilations):
            convs.append(Conv1d(prev, ch, cfg.kernel, rng, padding="same", dilation=dil, dtype=dtype))
            bns.append(BatchNorm1d(ch, channel_axis=0, dtype=dtype))
            prev = ch
        self.convs = ModuleList(convs)
        self.bns = ModuleList(bns)
        self.mfa = Conv1d(sum(cfg.channels), cfg.mfa_channels, 1, rng, padding=0, dtype=dtype)

    def forward(self, feats) -> Tensor:
        """MFCC frames [T, n_in] -> MFA frame states [mfa_channels, T]."""
        frames = feats.frames if hasattr(feats, "frames") else feats
        dtype = self.mfa.w.data.dtype
        x = ag.transpose(Tensor(np.ascontiguousarray(frames, dtype=dtype)), (1, 0))
        outs = []
        h = x
        for conv, bn in zip(self.convs, self.bns):
            h = bn(ag.relu(conv(h)))
            outs.append(h)
        return self.mfa(ag.concat(outs, axis=0))

    __call__ = forward


class SpeakerExtractor(Module):
    def __init__(self, enc_cfg: SpeakerEncoderConfig, pool_cfg: SwaspConfig, rng,
                 mode: str = "A+S", embed_dim: int = 192, dtype=np.float64):
        super().__init__()
        self.encoder = TdnnEncoder(enc_cfg, rng, dtype)
        self.pool = PoolingHead(enc_cfg.mfa_channels, pool_cfg, rng, mode=mode,
                                embed_dim=embed_dim, dtype=dtype)
        self.embed_dim = embed_dim

    def forward(self, feats) -> Tensor:
        return self.pool(self.encoder(feats))

    __call__ = forward

    def speaker_embed(self, feats) -> Embedding:
        """Inference path with frozen parameters and eval-mode BN."""
        with no_grad():
            vec = self.forward(feats).data.copy()
        return Embedding(vector=vec, kind="speaker")


class AamHead(Module):
    """Class weight matrix for additive-angular-margin softmax."""

    def __init__(self, embed_dim: int, n_speakers: int, rng, cfg: AamConfig | None = None,
                 dtype=np.float64):
        super().__init__()
        self.cfg = cfg or AamConfig()
        self.n_speakers = n_speakers
        self.w = Tensor(xavier_uniform(rng, embed_dim, n_speakers, (embed_dim, n_speakers), dtype),
                        requires_grad=True)


def aam_softmax_loss(emb: Tensor, labels, head: AamHead) -> Tensor:
    """AAM-softmax CE: target logit s*cos(theta+m), others s*cos(theta).

    emb is [D] or [B, D]; embeddings and class weights are L2-normalized, so
    the loss is invariant to positive rescaling of the embeddings.
    """
    cfg = head.cfg
    single = emb.data.ndim == 1
    if single:
        emb = ag.reshape(emb, (1, -1))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.max() >= head.n_speakers:
        raise DomainError("label outside the speaker inventory")
    norm = ag.sqrt(ag.sum_(ag.mul(emb, emb), axis=-1, keepdims=True))
    e_hat = ag.div(emb, norm)
    wnorm = ag.sqrt(ag.sum_(ag.mul(head.w, head.w), axis=0, keepdims=True))
    w_hat = ag.div(head.w, wnorm)
    cos = ag.clamp(ag.matmul(e_hat, w_hat), -1.0 + COS_CLIP, 1.0 - COS_CLIP)
    cos_m = float(np.cos(cfg.margin))
    sin_m = float(np.sin(cfg.margin))
    if cfg.margin == 0.0:
        logits = ag.mul(cos, cfg.scale)
    else:
        sin = ag.sqrt(ag.clamp(ag.sub(1.0, ag.mul(cos, cos)), 0.0, 1.0))
        phi = ag.sub(ag.mul(cos, cos_m), ag.mul(sin, sin_m))
        onehot = np.zeros(cos.data.shape, dtype=cos.data.dtype)
        onehot[np.arange(len(labels)), labels] = 1.0
        margin_delta = ag.mul(ag.sub(phi, cos), Tensor(onehot))
        logits = ag.mul(ag.add(cos, margin_delta), cfg.scale)
    return cross_entropy(logits, labels)
