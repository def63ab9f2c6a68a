"""Token inventory and the six digit-string rhythm classes.

Base tokens are the digits 0-9 plus PAUSE.  The CTC vocabulary appends a
BLANK symbol; the decoder vocabulary instead appends SOS/EOS markers.
Rhythm classes share a fixed digit order and differ only in where pauses
fall: d001-d004 read "8173259604" and d005-d006 read "9405372681".
"""

from __future__ import annotations

PAUSE = 10
N_BASE = 11  # digits + PAUSE

CTC_BLANK = 11
CTC_VOCAB = 12  # digits + PAUSE + BLANK

DEC_SOS = 11
DEC_EOS = 12
DEC_VOCAB = 13  # digits + PAUSE + SOS + EOS


def _seq(spec: str) -> tuple[int, ...]:
    out = []
    for ch in spec:
        out.append(PAUSE if ch == "|" else int(ch))
    return tuple(out)


# "|" marks a rhythm break (pause); digit groups follow the recording table
TEXT_LABELS: dict[str, tuple[int, ...]] = {
    "d001": _seq("8173259604"),
    "d002": _seq("8173|2596|04"),
    "d003": _seq("817|325|960|4"),
    "d004": _seq("81|73|25|96|04"),
    "d005": _seq("9405|3726|81"),
    "d006": _seq("940|537|268|1"),
}

LABEL_IDS = tuple(TEXT_LABELS.keys())


def canonical(label_id: str) -> tuple[int, ...]:
    """Canonical token sequence (digits + PAUSE markers) for a label."""
    return TEXT_LABELS[label_id]


def label_index(label_id: str) -> int:
    return LABEL_IDS.index(label_id)


def digits_only(tokens) -> tuple[int, ...]:
    return tuple(t for t in tokens if t != PAUSE)


def token_names(tokens) -> str:
    return " ".join("<p>" if t == PAUSE else str(t) for t in tokens)
