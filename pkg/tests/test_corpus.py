import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import wavfile

from expressive_svs.corpus import (
    REST_PITCH,
    Utterance,
    Waveform,
    check_duration,
    ingest_audio,
    load_transcriptions,
    midi_to_note,
    note_groups,
    note_to_midi,
    parse_transcription,
    read_manifest,
    resample,
    serialize_transcription,
    split_dataset,
    write_manifest,
    write_wav,
)
from expressive_svs.dsp import StftConfig, frame_energy, stft
from expressive_svs.errors import (
    InsufficientData,
    LengthMismatch,
    MalformedLine,
    UnknownPhoneme,
    UnreadableAudio,
    UnsupportedRate,
)
from expressive_svs.fixtures import fixture_files

LINE = "u1|是啊|sh i SP a|C4 C4 rest D4|0.3 0.3 0.1 0.4|0.1 0.2 0.1 0.4|0 0 0 0"


def test_parse_valid_line():
    utt = parse_transcription(LINE, {"sh", "i", "a"})
    assert utt.phonemes == ["sh", "i", "SP", "a"]
    assert utt.note_pitches == [60, 60, REST_PITCH, 62]
    assert len(utt.note_durations_sec) == len(utt.phoneme_durations_sec) == len(utt.slur_flags) == 4


def test_parse_length_mismatch():
    bad = "u1|是啊|sh i SP a x|C4 C4 rest D4|0.3 0.3 0.1 0.4|0.1 0.2 0.1 0.4|0 0 0 0"
    with pytest.raises(LengthMismatch):
        parse_transcription(bad)


def test_parse_field_count():
    with pytest.raises(MalformedLine):
        parse_transcription("u1|是啊|sh i")


def test_parse_unknown_phoneme():
    with pytest.raises(UnknownPhoneme):
        parse_transcription(LINE, {"sh", "i"})


def test_rest_forced_on_markers():
    line = "u1|啊|AP a|C4 D4|0.1 0.4|0.1 0.4|0 0"
    assert parse_transcription(line).note_pitches[0] == REST_PITCH


def test_parse_bad_values():
    with pytest.raises(MalformedLine):
        parse_transcription("u1|啊|a|C4|-0.1|0.1|0")
    with pytest.raises(MalformedLine):
        parse_transcription("u1|啊|a|C4|0.1|0.1|2")


@pytest.mark.parametrize("name,midi", [("C4", 60), ("A4", 69), ("C#4/Db4", 61), ("A#3/Bb3", 58), ("rest", 0), ("Db4", 61)])
def test_note_names(name, midi):
    assert note_to_midi(name) == midi


@given(st.integers(1, 127))
def test_note_name_round_trip(p):
    assert note_to_midi(midi_to_note(p)) == p


def test_fixture_round_trip():
    trans, _ = fixture_files()
    lines = [l.rstrip("\n") for l in trans.read_text(encoding="utf-8").splitlines() if l.strip()]
    for line in lines:
        utt = parse_transcription(line)
        again = parse_transcription(serialize_transcription(utt))
        assert again == utt
    # the fixture file is stored in canonical form, so the first line reproduces verbatim
    assert serialize_transcription(parse_transcription(lines[0])) == lines[0]


@settings(max_examples=50)
@given(
    st.lists(
        st.tuples(
            st.sampled_from(["sh", "i", "a", "SP", "AP"]),
            st.integers(1, 127),
            st.floats(1e-3, 5.0),
            st.floats(1e-3, 5.0),
            st.integers(0, 1),
        ),
        min_size=1,
        max_size=12,
    )
)
def test_serialize_round_trip_property(rows):
    ph, p, nd, pd, sl = map(list, zip(*rows))
    utt = Utterance("x", "啊", ph, p, nd, pd, sl)
    parsed = parse_transcription(serialize_transcription(utt))
    again = parse_transcription(serialize_transcription(parsed))
    assert again == parsed
    assert parsed.note_durations_sec == nd and parsed.phoneme_durations_sec == pd


def test_load_is_total(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text(LINE + "\n" + "broken|line\n" + LINE.replace("sh i", "sh zz") + "\n\n", encoding="utf-8")
    utts, errors = load_transcriptions(path, {"sh", "i", "a"})
    assert len(utts) == 1 and len(errors) == 2
    assert {type(e) for _, e in errors} == {MalformedLine, UnknownPhoneme}
    assert utts[0].audio_path.endswith("wavs/u1.wav")


def _write(path, rate, x):
    wavfile.write(path, rate, np.round(x * 32767).astype(np.int16))


def test_ingest_resample_length(tmp_path):
    t = np.arange(44100) / 44100
    _write(tmp_path / "a.wav", 44100, 0.5 * np.sin(2 * np.pi * 440 * t))
    w = ingest_audio(tmp_path / "a.wav", 24000)
    assert w.sample_rate == 24000
    assert abs(len(w) - 24000) <= 1
    assert np.max(np.abs(w.samples)) <= 1.0


def test_ingest_identity_at_target_rate(tmp_path):
    x = np.random.default_rng(0).integers(-20000, 20000, 5000).astype(np.int16)
    wavfile.write(tmp_path / "b.wav", 24000, x)
    w = ingest_audio(tmp_path / "b.wav", 24000)
    assert np.array_equal(w.samples, x / 32768.0)


def test_resampled_sine_peak(tmp_path):
    t = np.arange(44100) / 44100
    _write(tmp_path / "s.wav", 44100, 0.5 * np.sin(2 * np.pi * 440 * t))
    w = ingest_audio(tmp_path / "s.wav", 24000)
    cfg = StftConfig()
    mag = np.abs(stft(w, cfg)).mean(axis=0)
    expected_bin = 440 * cfg.fft_size / cfg.sample_rate
    assert abs(int(np.argmax(mag)) - expected_bin) <= 1


def test_ingest_errors(tmp_path):
    (tmp_path / "junk.wav").write_bytes(b"not a wav")
    with pytest.raises(UnreadableAudio):
        ingest_audio(tmp_path / "junk.wav")
    with pytest.raises(UnreadableAudio):
        ingest_audio(tmp_path / "missing.wav")
    with pytest.raises(UnsupportedRate):
        resample(np.zeros(100), 44101, 24000)


def test_write_read_wav(tmp_path):
    w = Waveform(0.25 * np.ones(100), 24000)
    write_wav(tmp_path / "o.wav", w)
    back = ingest_audio(tmp_path / "o.wav", 24000)
    np.testing.assert_allclose(back.samples, w.samples, atol=1 / 32767)


def test_split_opencpop_sizes():
    ids = [f"u{i:04d}" for i in range(3756)]
    split = split_dataset(ids, 3550, seed=3)
    assert len(split.train) == 3550 and len(split.eval) == 206
    assert set(split.train).isdisjoint(split.eval)
    assert set(split.train) | set(split.eval) == set(ids)


def test_split_deterministic_and_boundary():
    ids = [f"u{i}" for i in range(20)]
    assert split_dataset(ids, 15, seed=1) == split_dataset(list(reversed(ids)), 15, seed=1)
    zero = split_dataset(ids, 0, seed=1)
    assert zero.train == [] and sorted(zero.eval) == sorted(ids)
    with pytest.raises(InsufficientData):
        split_dataset(ids, 20)


@given(st.integers(2, 60), st.data())
def test_split_partition_property(n, data):
    ids = [f"u{i}" for i in range(n)]
    k = data.draw(st.integers(0, n - 1))
    s = split_dataset(ids, k, seed=data.draw(st.integers(0, 10**6)))
    assert len(s.train) == k and sorted(s.train + s.eval) == sorted(ids)


def test_manifest_round_trip(tmp_path, fixture_corpus):
    utts, _ = fixture_corpus
    write_manifest(tmp_path / "m.jsonl", utts)
    assert read_manifest(tmp_path / "m.jsonl") == utts


def test_rendered_durations_within_slack(corpus_dir):
    utts, errors = load_transcriptions(corpus_dir / "transcriptions.txt")
    assert not errors
    for utt in utts:
        _, ok = check_duration(utt, ingest_audio(utt.audio_path), 256)
        assert ok


def test_duration_check_flags_mismatch():
    utt = parse_transcription(LINE)
    _, ok = check_duration(utt, Waveform(np.zeros(24000 * 2)), 256)
    assert not ok


def test_note_groups(fixture_corpus):
    utts, pdict = fixture_corpus
    utt = parse_transcription("g|是啊|SP sh i i a|rest C4 C4 D4 E4|0.1 0.3 0.3 0.2 0.2|0.1 0.1 0.2 0.2 0.2|0 0 0 1 0")
    assert note_groups(utt, {"sh"}) == [[0], [1, 2], [3], [4]]
    for u in utts:
        groups = note_groups(u, pdict.initials)
        assert sum(len(g) for g in groups) == len(u)
        for g in groups:
            # phonemes of one note share the note annotation
            assert len({u.note_durations_sec[i] for i in g}) == 1


def test_energy_of_fixture_audio_nonzero(corpus_dir):
    utts, _ = load_transcriptions(corpus_dir / "transcriptions.txt")
    w = ingest_audio(utts[0].audio_path)
    assert frame_energy(stft(w)).max() > 0
