"""Synthetic Opencpop-format corpus for offline tests and demos.

The bundled fixture (``data/fixture``) holds 50 transcription lines and a
pinyin dictionary; :func:`render_fixture_corpus` writes them together with
44.1 kHz 16-bit audio rendered by additive synthesis, so the full pipeline
(resampling included) can run without the real corpus.
"""
import shutil
from importlib import resources
from pathlib import Path

import numpy as np

from .corpus import PhonemeDict, Utterance, Waveform, load_transcriptions, serialize_transcription, write_wav
from .score import pitch_id_to_frequency

INITIALS = ("zh", "ch", "sh", "b", "p", "m", "f", "d", "t", "n", "l", "g", "k", "h", "j", "q", "x", "r", "z", "c", "s", "y", "w")
FIXTURE_CHARS = "我你他的是在有一天风花雪月爱心星光梦想春秋山水歌唱飞走看听说笑哭远近长夜晚红白蓝海云雨声音不要回家永远"
SOURCE_RATE = 44100


def split_syllable(syllable):
    for ini in INITIALS:
        if syllable.startswith(ini) and len(syllable) > len(ini):
            final = syllable[len(ini):]
            if ini in ("j", "q", "x", "y") and final.startswith("u"):
                final = "v" + final[1:]
            return (ini, final)
    return (syllable,)


def build_phoneme_dict(chars=FIXTURE_CHARS):
    from pypinyin import Style, pinyin

    entries = {}
    for c in chars:
        for reading in pinyin(c, style=Style.NORMAL, heteronym=True)[0]:
            entries[reading] = split_syllable(reading)
    return PhonemeDict(entries)


def make_transcriptions(n_utterances=50, seed=2022, chars=FIXTURE_CHARS):
    """Generate random but well-formed annotated utterances."""
    from pypinyin import Style, lazy_pinyin

    rng = np.random.default_rng(seed)
    pdict = build_phoneme_dict(chars)
    utterances = []
    for k in range(n_utterances):
        n_chars = int(rng.integers(3, 7))
        text = "".join(rng.choice(list(chars), n_chars))
        readings = lazy_pinyin(text, style=Style.NORMAL)
        phones, pitches, note_durs, phone_durs, slurs = [], [], [], [], []

        def add(ph, pitch, note_dur, dur, slur=0):
            phones.append(ph)
            pitches.append(pitch)
            note_durs.append(round(note_dur, 5))
            phone_durs.append(round(dur, 5))
            slurs.append(slur)

        lead = float(rng.uniform(0.1, 0.25))
        add("SP", 0, lead, lead)
        pitch = int(rng.integers(60, 70))
        for i, reading in enumerate(readings):
            pitch = int(np.clip(pitch + rng.integers(-4, 5), 57, 74))
            note = float(rng.uniform(0.25, 0.55))
            syll = pdict[reading]
            if len(syll) == 2:
                ini = float(rng.uniform(0.04, 0.08))
                add(syll[0], pitch, note, ini)
                add(syll[1], pitch, note, note - ini)
            else:
                add(syll[0], pitch, note, note)
            if rng.random() < 0.25:
                slur_pitch = int(np.clip(pitch + rng.choice([-2, -1, 1, 2]), 55, 76))
                slur_note = float(rng.uniform(0.15, 0.35))
                add(syll[-1], slur_pitch, slur_note, slur_note, slur=1)
                pitch = slur_pitch
            if i < len(readings) - 1 and rng.random() < 0.15:
                gap = float(rng.uniform(0.1, 0.2))
                add("AP", 0, gap, gap)
        tail = float(rng.uniform(0.1, 0.25))
        add("SP", 0, tail, tail)
        utterances.append(Utterance(f"fx{k:04d}", text, phones, pitches, note_durs, phone_durs, slurs))
    return utterances, pdict


def render_audio(utt, sample_rate=SOURCE_RATE, seed=0):
    """Sing ``utt``: harmonic tones on finals, noise on initials and breaths."""
    rng = np.random.default_rng(seed)
    initials = set(INITIALS)
    bounds = np.round(np.cumsum([0.0] + list(utt.phoneme_durations_sec)) * sample_rate).astype(int)
    out = np.zeros(bounds[-1])
    phase = 0.0
    for i, ph in enumerate(utt.phonemes):
        a, b = bounds[i], bounds[i + 1]
        n = b - a
        t = np.arange(n) / sample_rate
        if ph == "SP":
            continue
        if ph == "AP" or ph in initials:
            amp = 0.02 if ph == "AP" else 0.05
            noise = rng.standard_normal(n)
            noise = np.convolve(noise, np.ones(4) / 4, mode="same")
            out[a:b] = amp * noise * np.hanning(n) if n > 1 else 0.0
            continue
        f0 = pitch_id_to_frequency(utt.note_pitches[i])
        vibrato = 1.0 + 0.006 * np.sin(2 * np.pi * 5.5 * t) * np.clip(t / 0.15, 0, 1)
        inst = np.cumsum(2 * np.pi * f0 * vibrato / sample_rate) + phase
        phase = float(inst[-1]) if n else phase
        tone = sum((0.6 / h) * np.sin(h * inst) for h in range(1, 6))
        fade = min(n // 2, int(0.02 * sample_rate))
        env = np.ones(n)
        if fade > 0:
            env[:fade] = np.linspace(0, 1, fade)
            env[-fade:] = np.linspace(1, 0.3, fade)
        dynamics = 0.6 + 0.4 * np.sin(np.pi * np.arange(n) / max(n, 1)) ** 0.5
        out[a:b] = 0.35 * tone * env * dynamics
    out += 1e-5 * rng.standard_normal(len(out))
    return Waveform(np.clip(out, -0.99, 0.99), sample_rate)


def fixture_files():
    root = resources.files("expressive_svs") / "data" / "fixture"
    return Path(str(root / "transcriptions.txt")), Path(str(root / "pinyin_dict.txt"))


def load_fixture(limit=None):
    trans, dict_path = fixture_files()
    pdict = PhonemeDict.load(dict_path)
    utts, errors = load_transcriptions(trans, pdict)
    if errors:
        raise RuntimeError(f"bundled fixture has bad lines: {errors}")
    return (utts[:limit] if limit else utts), pdict


def render_fixture_corpus(out_dir, limit=None):
    """Write an Opencpop-style directory: transcriptions.txt, dict, wavs/."""
    out_dir = Path(out_dir)
    (out_dir / "wavs").mkdir(parents=True, exist_ok=True)
    utts, pdict = load_fixture(limit)
    trans, dict_path = fixture_files()
    shutil.copy(dict_path, out_dir / "pinyin_dict.txt")
    with open(out_dir / "transcriptions.txt", "w", encoding="utf-8") as f:
        for k, utt in enumerate(utts):
            f.write(serialize_transcription(utt) + "\n")
            wav_path = out_dir / "wavs" / f"{utt.id}.wav"
            if not wav_path.exists():
                write_wav(wav_path, render_audio(utt, seed=k))
    return out_dir


def write_bundled_fixture(root, n_utterances=50, seed=2022):
    """Regenerate the bundled transcription and dictionary files."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    utts, pdict = make_transcriptions(n_utterances, seed)
    pdict.save(root / "pinyin_dict.txt")
    with open(root / "transcriptions.txt", "w", encoding="utf-8") as f:
        for utt in utts:
            f.write(serialize_transcription(utt) + "\n")
