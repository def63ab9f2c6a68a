"""Synthetic digit-string corpus: parametric speakers, tone-coded digits,
manifest handling, train/eval splitting and trial-list generation.

Each digit is rendered as a DTMF-style two-tone burst (a fixed, documented
frequency pair per digit) so the spoken content is acoustically
recoverable; speaker identity is carried by a base-pitch tone, a spectral
tilt, and resonance-band gains.  Pauses are near-silent gaps at the rhythm
breaks of the six text labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .audio import Waveform, save_wav, speed_perturb
from .errors import DomainError, ProtocolError
from .tokens import LABEL_IDS, PAUSE, canonical

RATE = 16000

# DTMF keypad frequency pairs (Hz), row x column
DIGIT_TONES = {
    1: (697, 1209), 2: (697, 1336), 3: (697, 1477),
    4: (770, 1209), 5: (770, 1336), 6: (770, 1477),
    7: (852, 1209), 8: (852, 1336), 9: (852, 1477),
    0: (941, 1336),
}

F0_RANGE = (90.0, 260.0)
F0_REF = 160.0
F0_MIN_GAP = 4.0
TILT_RANGE = (-0.3, 0.3)
TILT_MIN_GAP = 0.02
RESONANCE_CENTERS = (2600.0, 3400.0, 4300.0)

DIGIT_MS = (180.0, 260.0)
PAUSE_MS = (150.0, 350.0)
GAP_MS = 30.0
EDGE_MS = (60.0, 120.0)
SNR_DB = 30.0
PAUSE_FLOOR_DB = -50.0


@dataclass
class SpeakerProfile:
    speaker_id: str
    f0_hz: float
    formant_shift: float
    resonance_gains: tuple
    seed: int


@dataclass
class UttRecord:
    utt_id: str
    speaker_id: str
    label_id: str
    tokens: list
    audio_path: str
    augmentation: str = "orig"  # orig | speed0.9 | speed1.1

    def origin_id(self) -> str:
        if self.augmentation == "orig":
            return self.utt_id
        return self.utt_id.rsplit("_sp", 1)[0]


class CorpusManifest:
    """Ordered utterance records with id lookup; serialized as a JSON array."""

    def __init__(self, records: list[UttRecord]):
        self.records = list(records)
        self._by_id = {r.utt_id: r for r in self.records}
        if len(self._by_id) != len(self.records):
            raise DomainError("duplicate utterance ids in manifest")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def get(self, utt_id: str) -> UttRecord:
        return self._by_id[utt_id]

    def speakers(self) -> list[str]:
        return sorted({r.speaker_id for r in self.records})

    def save(self, path):
        payload = [asdict(r) for r in self.records]
        Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls([UttRecord(**entry) for entry in payload])


# ---------------------------------------------------------------------------
# speakers
# ---------------------------------------------------------------------------


def synth_speaker(index: int, seed: int, attempt: int = 0) -> SpeakerProfile:
    """Deterministic draw of one speaker's voice parameters."""
    rng = np.random.default_rng([seed, index, attempt])
    return SpeakerProfile(
        speaker_id=f"s{index:03d}",
        f0_hz=float(rng.uniform(*F0_RANGE)),
        formant_shift=float(rng.uniform(*TILT_RANGE)),
        resonance_gains=tuple(float(g) for g in rng.uniform(0.2, 1.0, size=3)),
        seed=seed,
    )


def build_speakers(n_speakers: int, seed: int) -> list[SpeakerProfile]:
    """Draw n speakers, rejection-resampling until every pair is separated
    by an f0 gap >= 4 Hz or a spectral-tilt gap >= 0.02."""
    out: list[SpeakerProfile] = []
    for idx in range(n_speakers):
        attempt = 0
        while True:
            cand = synth_speaker(idx, seed, attempt)
            ok = all(
                abs(cand.f0_hz - p.f0_hz) >= F0_MIN_GAP
                or abs(cand.formant_shift - p.formant_shift) >= TILT_MIN_GAP
                for p in out
            )
            if ok:
                out.append(cand)
                break
            attempt += 1
            if attempt > 10000:
                raise DomainError("could not place a sufficiently distinct speaker")
    return out


# ---------------------------------------------------------------------------
# utterance synthesis
# ---------------------------------------------------------------------------


def _tone(freq: float, n: int, phase: float, tilt: float) -> np.ndarray:
    t = np.arange(n) / RATE
    amp = (freq / 1000.0) ** tilt
    return amp * np.sin(2 * np.pi * freq * t + phase)


def _envelope(n: int) -> np.ndarray:
    edge = min(int(0.010 * RATE), n // 2)
    env = np.ones(n)
    if edge > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(edge) / edge)
        env[:edge] = ramp
        env[-edge:] = ramp[::-1]
    return env


def synth_utterance(profile: SpeakerProfile, label_id: str, utt_seed: int):
    """Render one utterance; returns (Waveform at 16 kHz, token transcript).

    Digits become pitch-shifted two-tone bursts (180-260 ms), pauses become
    near-silence (150-350 ms at -50 dB), inter-digit gaps are 30 ms, and
    white noise is added at 30 dB SNR.  Fully deterministic given the
    profile, label and utt_seed.
    """
    tokens = canonical(label_id)
    rng = np.random.default_rng([int(utt_seed), LABEL_IDS.index(label_id)])
    ratio = profile.f0_hz / F0_REF
    tilt = profile.formant_shift
    pieces = [np.zeros(int(rng.uniform(*EDGE_MS) / 1000.0 * RATE))]
    gap = np.zeros(int(GAP_MS / 1000.0 * RATE))
    prev_digit = False
    for tok in tokens:
        if tok == PAUSE:
            n = int(rng.uniform(*PAUSE_MS) / 1000.0 * RATE)
            floor = 10.0 ** (PAUSE_FLOOR_DB / 20.0)
            pieces.append(rng.standard_normal(n) * floor)
            prev_digit = False
            continue
        if prev_digit:
            pieces.append(gap)
        n = int(rng.uniform(*DIGIT_MS) / 1000.0 * RATE)
        f1, f2 = DIGIT_TONES[tok]
        sig = 0.30 * _tone(f1 * ratio, n, rng.uniform(0, 2 * np.pi), tilt)
        sig += 0.30 * _tone(f2 * ratio, n, rng.uniform(0, 2 * np.pi), tilt)
        sig += 0.15 * _tone(profile.f0_hz, n, rng.uniform(0, 2 * np.pi), 0.0)
        for center, gain in zip(RESONANCE_CENTERS, profile.resonance_gains):
            sig += 0.05 * gain * _tone(center, n, rng.uniform(0, 2 * np.pi), tilt)
        pieces.append(sig * _envelope(n))
        prev_digit = True
    pieces.append(np.zeros(int(rng.uniform(*EDGE_MS) / 1000.0 * RATE)))
    x = np.concatenate(pieces)
    rms = float(np.sqrt(np.mean(x**2)))
    noise_rms = rms / (10.0 ** (SNR_DB / 20.0))
    x = x + rng.standard_normal(len(x)) * noise_rms
    peak = float(np.max(np.abs(x)))
    if peak > 0.98:
        x = x * (0.98 / peak)
    return Waveform(samples=x, sample_rate=RATE), tokens


def _utt_seed(seed: int, spk: int, lab: int, utt: int) -> int:
    return int(np.random.SeedSequence(entropy=[seed, spk, lab, utt]).generate_state(1)[0])


def build_corpus(out_dir, n_speakers: int, utts_per_label: int, seed: int,
                 augment: bool = False) -> CorpusManifest:
    """Generate speakers x labels x utterances, write WAVs and the manifest.

    With augment=True every original also gets 0.9x and 1.1x speed
    variants, tripling the corpus.
    """
    if n_speakers < 2:
        raise DomainError("need at least two speakers")
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    speakers = build_speakers(n_speakers, seed)
    records: list[UttRecord] = []

    def emit(w: Waveform, utt_id: str, spk: str, label: str, tokens, tag: str):
        rel = f"wav/{utt_id}.wav"
        save_wav(out_dir / rel, w)
        records.append(UttRecord(utt_id=utt_id, speaker_id=spk, label_id=label,
                                 tokens=list(tokens), audio_path=rel, augmentation=tag))

    for si, prof in enumerate(speakers):
        for li, label in enumerate(LABEL_IDS):
            for u in range(utts_per_label):
                w, tokens = synth_utterance(prof, label, _utt_seed(seed, si, li, u))
                base = f"{prof.speaker_id}_{label}_u{u:02d}"
                emit(w, base, prof.speaker_id, label, tokens, "orig")
                if augment:
                    emit(speed_perturb(w, 0.9), f"{base}_sp090", prof.speaker_id,
                         label, tokens, "speed0.9")
                    emit(speed_perturb(w, 1.1), f"{base}_sp110", prof.speaker_id,
                         label, tokens, "speed1.1")
    manifest = CorpusManifest(records)
    manifest.save(out_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# splitting and trials
# ---------------------------------------------------------------------------


def split_train_eval(manifest: CorpusManifest, ratio: float = 0.8, seed: int = 0):
    """Stratified split over (speaker, label) cells of the original
    utterances; augmented variants follow their original to the same side."""
    rng = np.random.default_rng([seed, 8020])
    cells: dict[tuple, list[UttRecord]] = {}
    for rec in manifest:
        if rec.augmentation == "orig":
            cells.setdefault((rec.speaker_id, rec.label_id), []).append(rec)
    side: dict[str, str] = {}
    for key in sorted(cells):
        recs = sorted(cells[key], key=lambda r: r.utt_id)
        order = rng.permutation(len(recs))
        n_train = int(round(ratio * len(recs)))
        if len(recs) >= 2:
            n_train = min(max(n_train, 1), len(recs) - 1)
        for pos, idx in enumerate(order):
            side[recs[idx].utt_id] = "train" if pos < n_train else "eval"
    train, evals = [], []
    for rec in manifest:
        dest = side[rec.origin_id()]
        (train if dest == "train" else evals).append(rec)
    return CorpusManifest(train), CorpusManifest(evals)


@dataclass
class Trial:
    enroll_utt: str
    test_utt: str
    is_target: bool  # same speaker
    text_matched: bool  # same text label

    def family(self) -> str:
        spk = "target" if self.is_target else "nontarget"
        txt = "matched" if self.text_matched else "mismatched"
        return f"{spk}/{txt}"


@dataclass
class TrialPolicy:
    n_per_family: int = 200
    seed: int = 0


FAMILIES = ("target/matched", "nontarget/matched", "target/mismatched", "nontarget/mismatched")


def make_trials(eval_manifest: CorpusManifest, policy: TrialPolicy) -> list[Trial]:
    """Sample the four trial families (same/different speaker x same/different
    text) without replacement; deterministic under the policy seed."""
    recs = sorted(eval_manifest, key=lambda r: r.utt_id)
    if len({r.speaker_id for r in recs}) < 2:
        raise ProtocolError("trial generation needs at least two speakers")
    pools: dict[str, list[tuple[str, str]]] = {f: [] for f in FAMILIES}
    for i in range(len(recs)):
        for j in range(i + 1, len(recs)):
            a, b = recs[i], recs[j]
            fam = Trial(a.utt_id, b.utt_id, a.speaker_id == b.speaker_id,
                        a.label_id == b.label_id).family()
            pools[fam].append((a.utt_id, b.utt_id))
    rng = np.random.default_rng([policy.seed, 4242])
    trials: list[Trial] = []
    for fam in FAMILIES:
        pool = pools[fam]
        if len(pool) < policy.n_per_family:
            raise ProtocolError(
                f"family {fam}: requested {policy.n_per_family} trials, only {len(pool)} available")
        pick = rng.choice(len(pool), size=policy.n_per_family, replace=False)
        for idx in sorted(int(i) for i in pick):
            enroll, test = pool[idx]
            spk, txt = fam.split("/")
            trials.append(Trial(enroll, test, spk == "target", txt == "matched"))
    return trials


def write_trials(path, trials: list[Trial]):
    lines = []
    for t in trials:
        spk = "target" if t.is_target else "nontarget"
        txt = "matched" if t.text_matched else "mismatched"
        lines.append(f"{t.enroll_utt} {t.test_utt} {spk} {txt}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_trials(path) -> list[Trial]:
    trials = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        enroll, test, spk, txt = line.split()
        trials.append(Trial(enroll, test, spk == "target", txt == "matched"))
    return trials
