"""Verification metrics: EER, minimum DCF, and ROC-AUC.

Thresholds are swept at the midpoints between adjacent distinct scores
(plus sentinels below/above all scores).  At threshold t:
FAR(t) = fraction of nontarget scores >= t, FRR(t) = fraction of target
scores < t.  The EER is linearly interpolated at the operating point where
FAR - FRR changes sign, with ties broken toward the lower threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError


@dataclass
class ScoreSet:
    """Parallel arrays: real-valued scores and boolean target labels."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.scores.shape != self.labels.shape:
            raise DomainError("scores and labels must have equal length")


@dataclass
class DcfConfig:
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.p_target < 1.0):
            raise DomainError("p_target must lie in (0, 1)")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise DomainError("detection costs must be positive")


def _check_two_classes(s: ScoreSet):
    if not s.labels.any() or s.labels.all():
        raise DomainError("need at least one target and one nontarget score")


def _candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    uniq = np.unique(scores)
    mids = (uniq[:-1] + uniq[1:]) / 2.0
    return np.concatenate([[uniq[0] - 1.0], mids, [uniq[-1] + 1.0]])


def _rates(s: ScoreSet, thresholds: np.ndarray):
    tar = np.sort(s.scores[s.labels])
    non = np.sort(s.scores[~s.labels])
    frr = np.searchsorted(tar, thresholds, side="left") / len(tar)
    far = (len(non) - np.searchsorted(non, thresholds, side="left")) / len(non)
    return far, frr


def compute_eer(s: ScoreSet) -> tuple[float, float]:
    """Equal error rate and the threshold where it occurs.

    Returns (eer, threshold); eer in [0, 1].
    """
    _check_two_classes(s)
    thr = _candidate_thresholds(s.scores)
    far, frr = _rates(s, thr)
    diff = far - frr  # decreasing from +1 to -1 as thresholds rise
    for i in range(len(thr)):
        if diff[i] == 0.0:
            return float(far[i]), float(thr[i])
        if diff[i] > 0 and i + 1 < len(thr) and diff[i + 1] < 0:
            # linear interpolation between the adjacent operating points
            frac = diff[i] / (diff[i] - diff[i + 1])
            eer = far[i] + frac * (far[i + 1] - far[i])
            return float(eer), float(thr[i] + frac * (thr[i + 1] - thr[i]))
    raise DomainError("no EER crossing found (degenerate score set)")


def compute_min_dcf(s: ScoreSet, cfg: DcfConfig | None = None) -> float:
    """Normalized minimum detection cost over all thresholds."""
    cfg = cfg or DcfConfig()
    _check_two_classes(s)
    thr = _candidate_thresholds(s.scores)
    far, frr = _rates(s, thr)
    dcf = cfg.c_miss * cfg.p_target * frr + cfg.c_fa * (1.0 - cfg.p_target) * far
    norm = min(cfg.c_miss * cfg.p_target, cfg.c_fa * (1.0 - cfg.p_target))
    return float(dcf.min() / norm)


def roc_auc(s: ScoreSet) -> float:
    """Area under the ROC curve (rank statistic, ties get average rank)."""
    _check_two_classes(s)
    order = np.argsort(s.scores, kind="mergesort")
    ranks = np.empty(len(s.scores), dtype=np.float64)
    sorted_scores = s.scores[order]
    i = 0
    r = 1.0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (r + r + (j - i)) / 2.0
        r += j - i + 1
        i = j + 1
    n_t = int(s.labels.sum())
    n_n = len(s.labels) - n_t
    u = ranks[s.labels].sum() - n_t * (n_t + 1) / 2.0
    return float(u / (n_t * n_n))
