"""Opencpop-format corpus ingestion.

Transcription format (one utterance per line, UTF-8, ``|``-separated)::

    id|text|phonemes|note pitches|note durations|phoneme durations|slur flags

* ``text``: the lyric characters, no separators.
* ``phonemes``: space-separated phoneme symbols; ``SP`` (silence) and ``AP``
  (aspiration) appear as literal markers.
* ``note pitches``: one note name per phoneme (``C4``, ``C#4/Db4``) or
  ``rest``. Plain integers are accepted as MIDI ids.
* ``note durations``: seconds of the note each phoneme belongs to.
* ``phoneme durations``: seconds of each phoneme.
* ``slur flags``: ``0``/``1`` per phoneme.
"""
import json
import logging
import math
import random
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import (
    InsufficientData,
    LengthMismatch,
    MalformedLine,
    UnknownPhoneme,
    UnreadableAudio,
    UnsupportedRate,
    WriteFailure,
)

logger = logging.getLogger(__name__)

REST_MARKERS = ("SP", "AP")
REST_PITCH = 0
SAMPLE_RATE = 24000
MAX_RESAMPLE_FACTOR = 4096

_NOTE_STEPS = {"C": 0, "D": 2, "E": 4, "F": 5, "G": 7, "A": 9, "B": 11}
_SHARP_NAMES = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"]
_FLAT_NAMES = ["C", "Db", "D", "Eb", "E", "F", "Gb", "G", "Ab", "A", "Bb", "B"]


@dataclass
class Utterance:
    id: str
    text: str
    phonemes: list
    note_pitches: list
    note_durations_sec: list
    phoneme_durations_sec: list
    slur_flags: list
    audio_path: str = ""

    def __len__(self):
        return len(self.phonemes)

    @property
    def duration_sec(self):
        return float(sum(self.phoneme_durations_sec))

    def to_record(self):
        return {
            "id": self.id,
            "text": self.text,
            "phonemes": list(self.phonemes),
            "note_pitches": list(self.note_pitches),
            "note_durations_sec": list(self.note_durations_sec),
            "phoneme_durations_sec": list(self.phoneme_durations_sec),
            "slur_flags": list(self.slur_flags),
            "audio_path": self.audio_path,
        }

    @classmethod
    def from_record(cls, record):
        return cls(**record)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)

    def __len__(self):
        return len(self.samples)

    @property
    def duration_sec(self):
        return len(self.samples) / self.sample_rate


@dataclass
class DatasetSplit:
    train: list
    eval: list
    seed: int

    def to_dict(self):
        return {"train": list(self.train), "eval": list(self.eval), "seed": self.seed}


@dataclass
class PhonemeDict:
    """Pinyin syllable to phoneme sequence mapping shipped with the corpus."""

    entries: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path):
        entries = {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                syllable, _, phones = line.partition("\t")
                if not phones:
                    syllable, *rest = line.split()
                    phones = " ".join(rest)
                entries[syllable.strip()] = tuple(phones.split())
        return cls(entries)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for syllable in sorted(self.entries):
                f.write(f"{syllable}\t{' '.join(self.entries[syllable])}\n")

    def __getitem__(self, syllable):
        return self.entries[syllable]

    def __contains__(self, syllable):
        return syllable in self.entries

    def get(self, syllable, default=None):
        return self.entries.get(syllable, default)

    @property
    def inventory(self):
        return sorted({p for phones in self.entries.values() for p in phones})

    @property
    def initials(self):
        """Phonemes that only ever start a multi-phoneme syllable."""
        starts = {v[0] for v in self.entries.values() if len(v) > 1}
        others = {p for v in self.entries.values() for p in v[1:]}
        others |= {v[0] for v in self.entries.values() if len(v) == 1}
        return starts - others


def note_to_midi(name):
    """``C#4/Db4`` -> 61, ``rest`` -> REST_PITCH, ``"60"`` -> 60."""
    name = name.strip()
    if name == "rest":
        return REST_PITCH
    if name.lstrip("-").isdigit():
        return int(name)
    token = name.split("/")[0]
    letter = token[0].upper()
    if letter not in _NOTE_STEPS:
        raise ValueError(f"bad note name {name!r}")
    i = 1
    step = _NOTE_STEPS[letter]
    while i < len(token) and token[i] in "#b":
        step += 1 if token[i] == "#" else -1
        i += 1
    octave = int(token[i:])
    return 12 * (octave + 1) + step


def midi_to_note(p):
    if p == REST_PITCH:
        return "rest"
    octave, step = divmod(p, 12)
    octave -= 1
    sharp, flat = _SHARP_NAMES[step], _FLAT_NAMES[step]
    if sharp == flat:
        return f"{sharp}{octave}"
    return f"{sharp}{octave}/{flat}{octave}"


def parse_transcription(line, phoneme_dict=None):
    """Parse one transcription line into an :class:`Utterance`.

    ``phoneme_dict`` (a :class:`PhonemeDict` or any container of phoneme
    symbols) enables the unknown-phoneme check.
    """
    fields = line.rstrip("\r\n").split("|")
    if len(fields) != 7:
        raise MalformedLine(f"expected 7 fields, got {len(fields)}: {line[:60]!r}")
    uid, text, phonemes, pitches, note_durs, phone_durs, slurs = fields
    seqs = [s.split() for s in (phonemes, pitches, note_durs, phone_durs, slurs)]
    lengths = [len(s) for s in seqs]
    if len(set(lengths)) != 1:
        raise LengthMismatch(f"{uid}: parallel sequence lengths differ {lengths}")
    if lengths[0] == 0:
        raise MalformedLine(f"{uid}: empty phoneme sequence")
    phones, pitch_tokens, nd, pd, sl = seqs

    if phoneme_dict is not None:
        known = set(phoneme_dict.inventory) if isinstance(phoneme_dict, PhonemeDict) else set(phoneme_dict)
        for ph in phones:
            if ph not in REST_MARKERS and ph not in known:
                raise UnknownPhoneme(f"{uid}: phoneme {ph!r} not in dictionary")

    try:
        note_pitches = [note_to_midi(t) for t in pitch_tokens]
        note_durations = [float(x) for x in nd]
        phone_durations = [float(x) for x in pd]
        slur_flags = [int(x) for x in sl]
    except ValueError as e:
        raise MalformedLine(f"{uid}: {e}") from e

    for i, ph in enumerate(phones):
        if ph in REST_MARKERS:
            note_pitches[i] = REST_PITCH
        elif not 0 <= note_pitches[i] <= 127:
            raise MalformedLine(f"{uid}: pitch id {note_pitches[i]} outside [0, 127]")
    if any(d <= 0 or not math.isfinite(d) for d in note_durations + phone_durations):
        raise MalformedLine(f"{uid}: non-positive duration")
    if any(s not in (0, 1) for s in slur_flags):
        raise MalformedLine(f"{uid}: slur flags must be 0/1")

    return Utterance(uid, text, phones, note_pitches, note_durations, phone_durations, slur_flags)


def serialize_transcription(utt):
    return "|".join([
        utt.id,
        utt.text,
        " ".join(utt.phonemes),
        " ".join(midi_to_note(p) for p in utt.note_pitches),
        " ".join(repr(float(d)) for d in utt.note_durations_sec),
        " ".join(repr(float(d)) for d in utt.phoneme_durations_sec),
        " ".join(str(int(s)) for s in utt.slur_flags),
    ])


def load_transcriptions(path, phoneme_dict=None, wav_dir=None):
    """Parse a transcription file.

    Returns ``(utterances, errors)``; every line ends up in exactly one of
    the two lists (errors as ``(line_number, exception)``).
    """
    path = Path(path)
    wav_dir = Path(wav_dir) if wav_dir is not None else path.parent / "wavs"
    utterances, errors = [], []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                utt = parse_transcription(line, phoneme_dict)
            except (MalformedLine, LengthMismatch, UnknownPhoneme) as e:
                errors.append((lineno, e))
                continue
            utt.audio_path = str(wav_dir / f"{utt.id}.wav")
            utterances.append(utt)
    return utterances, errors


def ingest_audio(path, target_rate=SAMPLE_RATE):
    """Read a PCM wav file and resample it to ``target_rate``.

    Audio already at the target rate is returned untouched (only converted
    to float). Multi-channel audio is averaged to mono.
    """
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as e:
        raise UnreadableAudio(f"{path}: {e}") from e
    if data.size == 0:
        raise UnreadableAudio(f"{path}: no samples")
    if np.issubdtype(data.dtype, np.integer):
        scale = float(np.iinfo(data.dtype).max) + 1.0
        if data.dtype == np.uint8:
            samples = (data.astype(np.float64) - 128.0) / 128.0
        else:
            samples = data.astype(np.float64) / scale
    else:
        samples = data.astype(np.float64)
    if samples.ndim > 1:
        samples = samples.mean(axis=1)
    return Waveform(resample(samples, rate, target_rate), target_rate)


def resample(samples, source_rate, target_rate):
    if source_rate == target_rate:
        return np.asarray(samples, dtype=np.float64)
    ratio = Fraction(int(target_rate), int(source_rate))
    if ratio.numerator > MAX_RESAMPLE_FACTOR or ratio.denominator > MAX_RESAMPLE_FACTOR:
        raise UnsupportedRate(f"cannot resample {source_rate} Hz -> {target_rate} Hz")
    out = resample_poly(samples, ratio.numerator, ratio.denominator)
    peak = np.max(np.abs(out)) if out.size else 0.0
    if peak > 1.0:
        out = out / peak
    return out


def write_wav(path, waveform):
    pcm = np.clip(np.round(np.asarray(waveform.samples) * 32767.0), -32768, 32767).astype(np.int16)
    try:
        wavfile.write(path, int(waveform.sample_rate), pcm)
    except OSError as e:
        raise WriteFailure(f"cannot write {path}: {e}") from e


def check_duration(utt, waveform, hop_length=256):
    """Difference in seconds between audio length and annotated length, and
    whether it is inside the two-hop tolerance."""
    slack = 2 * hop_length / waveform.sample_rate
    diff = waveform.duration_sec - utt.duration_sec
    return diff, abs(diff) <= slack


def split_dataset(utterances, n_train, seed=1234):
    ids = [u.id if isinstance(u, Utterance) else str(u) for u in utterances]
    if len(set(ids)) != len(ids):
        raise InsufficientData("duplicate utterance ids")
    if n_train < 0 or n_train >= len(ids):
        raise InsufficientData(f"n_train={n_train} needs a corpus larger than {len(ids)}")
    order = sorted(ids)
    random.Random(seed).shuffle(order)
    train = sorted(order[:n_train])
    held = sorted(order[n_train:])
    return DatasetSplit(train, held, seed)


def write_manifest(path, utterances):
    with open(path, "w", encoding="utf-8") as f:
        for utt in utterances:
            f.write(json.dumps(utt.to_record(), ensure_ascii=False) + "\n")


def read_manifest(path):
    with open(path, encoding="utf-8") as f:
        return [Utterance.from_record(json.loads(line)) for line in f if line.strip()]


def note_groups(utt, initials):
    """Split phoneme positions into notes.

    A new note starts at every rest marker, after every rest marker, at every
    slurred phoneme, and at any phoneme not preceded by an initial consonant.
    """
    groups = []
    for i, ph in enumerate(utt.phonemes):
        prev = utt.phonemes[i - 1] if i else None
        joins = (
            prev is not None
            and prev not in REST_MARKERS
            and ph not in REST_MARKERS
            and prev in initials
            and not utt.slur_flags[i]
        )
        if joins:
            groups[-1].append(i)
        else:
            groups.append([i])
    return groups
