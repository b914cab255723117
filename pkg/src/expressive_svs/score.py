"""Musical score arithmetic and model input assembly."""
import math
from dataclasses import dataclass

import numpy as np

from .corpus import REST_MARKERS, REST_PITCH
from .errors import PitchOutOfRange, RestPitch, UnknownPhoneme

PAD = "<pad>"


def pitch_id_to_frequency(p):
    """MIDI pitch id to Hz, ``440 * 2 ** ((p - 69) / 12)``."""
    if not 0 <= p <= 127:
        raise PitchOutOfRange(f"pitch id {p} outside [0, 127]")
    return 440.0 * 2.0 ** ((p - 69) / 12.0)


def lf0_of_pitch(p):
    """Natural log of the note frequency. Rests have no pitch."""
    if p == REST_PITCH:
        raise RestPitch("rest carries no pitch; mask rests before calling")
    return math.log(pitch_id_to_frequency(p))


def frames_for_duration(dur, sr, wl, hl):
    """Frame count of a note: ``floor((dur*sr - wl) / hl + 1)``, at least 1."""
    samples = dur * sr
    if abs(samples - round(samples)) < 1e-6:
        samples = round(samples)  # 5120/24000 s must give 5120 samples, not 5119.999...
    frames = math.floor((samples - wl) / hl + 1)
    return max(1, frames)


@dataclass(frozen=True)
class QuantizerSpec:
    n_bins: int
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"need lo < hi, got {self.lo}, {self.hi}")
        if self.n_bins < 2:
            raise ValueError("need at least 2 bins")

    @property
    def width(self):
        return (self.hi - self.lo) / self.n_bins

    def to_dict(self):
        return {"n_bins": self.n_bins, "lo": self.lo, "hi": self.hi}


def quantize(value, spec):
    """Uniform bin index, clamped to ``[0, n_bins - 1]``. Works on arrays."""
    v = np.asarray(value, dtype=np.float64)
    bins = np.floor((v - spec.lo) / (spec.hi - spec.lo) * spec.n_bins)
    bins = np.clip(bins, 0, spec.n_bins - 1).astype(np.int64)
    return int(bins) if bins.ndim == 0 else bins


def dequantize(bin_id, spec):
    return spec.lo + (np.asarray(bin_id, dtype=np.float64) + 0.5) * spec.width


def pitch_quantizer(n_bins=256, low_pitch=30, high_pitch=100):
    """Uniform LF0 bins spanning MIDI ``low_pitch``..``high_pitch``.

    The embedding table gets one extra row (index ``n_bins``) for unvoiced
    and rest frames.
    """
    return QuantizerSpec(n_bins, lf0_of_pitch(low_pitch), lf0_of_pitch(high_pitch))


def quantize_lf0(lf0, spec):
    """Like :func:`quantize`, but ``lf0 <= 0`` maps to the unvoiced bin."""
    lf0 = np.asarray(lf0, dtype=np.float64)
    bins = np.asarray(quantize(lf0, spec))
    return np.where(lf0 > 0, bins, spec.n_bins)


def energy_quantizer(log_energies, n_bins=256, lower_pct=0.1, upper_pct=99.9):
    lo, hi = np.percentile(np.asarray(log_energies, dtype=np.float64), [lower_pct, upper_pct])
    if hi <= lo:
        hi = lo + 1.0
    return QuantizerSpec(n_bins, float(lo), float(hi))


class PhonemeVocab:
    """Phoneme symbol <-> integer id. Id 0 is padding."""

    def __init__(self, symbols):
        ordered = [PAD] + sorted(set(symbols) - {PAD} | set(REST_MARKERS))
        self.symbols = ordered
        self.index = {s: i for i, s in enumerate(ordered)}

    def __len__(self):
        return len(self.symbols)

    def encode(self, phonemes):
        try:
            return [self.index[p] for p in phonemes]
        except KeyError as e:
            raise UnknownPhoneme(f"phoneme {e.args[0]!r} not in vocabulary") from e

    def to_list(self):
        return list(self.symbols)

    @classmethod
    def from_list(cls, symbols):
        vocab = cls.__new__(cls)
        vocab.symbols = list(symbols)
        vocab.index = {s: i for i, s in enumerate(vocab.symbols)}
        return vocab


@dataclass
class ScoreFeatures:
    phoneme_ids: np.ndarray
    note_pitch_ids: np.ndarray
    note_frame_counts: np.ndarray
    slur_ids: np.ndarray
    note_lf0: np.ndarray

    def __len__(self):
        return len(self.phoneme_ids)


def build_score_features(utt, vocab, stft_cfg):
    """Assemble the per-phoneme model inputs for one utterance."""
    sr, wl, hl = stft_cfg.sample_rate, stft_cfg.window_length, stft_cfg.hop_length
    pitches = np.asarray(utt.note_pitches, dtype=np.int64)
    note_lf0 = np.array([0.0 if p == REST_PITCH else lf0_of_pitch(int(p)) for p in pitches])
    return ScoreFeatures(
        phoneme_ids=np.asarray(vocab.encode(utt.phonemes), dtype=np.int64),
        note_pitch_ids=pitches,
        note_frame_counts=np.array([frames_for_duration(d, sr, wl, hl) for d in utt.note_durations_sec], dtype=np.int64),
        slur_ids=np.asarray(utt.slur_flags, dtype=np.int64),
        note_lf0=note_lf0,
    )


def phoneme_frame_counts(phoneme_durations_sec, n_frames, sr, hl):
    """Distribute ``n_frames`` analysis frames over phonemes by boundary.

    Phoneme boundaries are rounded to the hop grid; every phoneme keeps at
    least one frame, and the total is forced to ``n_frames`` by adjusting the
    longest phonemes.
    """
    ends = np.cumsum(np.asarray(phoneme_durations_sec, dtype=np.float64))
    bounds = np.concatenate([[0], np.round(ends * sr / hl)]).astype(np.int64)
    counts = np.maximum(np.diff(bounds), 1)
    excess = int(counts.sum()) - int(n_frames)
    while excess != 0:
        i = int(np.argmax(counts))
        if excess > 0:
            if counts[i] <= 1:
                break
            step = min(excess, int(counts[i]) - 1)
            counts[i] -= step
            excess -= step
        else:
            counts[i] -= excess
            excess = 0
    return counts
