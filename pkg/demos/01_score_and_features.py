"""
Score arithmetic and acoustic features
======================================

Walks one fixture utterance from its transcription line to the frame-level
arrays the model sees: note frequencies, frame counts, pitch bins, STFT
energy, mel spectrogram and F0.
"""
import numpy as np

from expressive_svs.corpus import ingest_audio, serialize_transcription
from expressive_svs.dsp import StftConfig, compute_features
from expressive_svs.fixtures import load_fixture, render_fixture_corpus
from expressive_svs.score import frames_for_duration, lf0_of_pitch, pitch_id_to_frequency, pitch_quantizer, quantize_lf0

# one line of the bundled corpus, in the id|text|phonemes|notes|durs|durs|slur format
utts, pdict = load_fixture(limit=1)
utt = utts[0]
print(serialize_transcription(utt))

# MIDI ids map to Hz on the equal-tempered scale
for p in (57, 60, 69):
    print(p, pitch_id_to_frequency(p))

# frames per note: no centring, so a window must fit entirely inside the note
cfg = StftConfig()
print("5120 samples ->", frames_for_duration(5120 / cfg.sample_rate, cfg.sample_rate, cfg.window_length, cfg.hop_length), "frames")

# render the audio and analyse it
corpus = render_fixture_corpus("/tmp/svs_demo_corpus", limit=1)
wav = ingest_audio(corpus / "wavs" / f"{utt.id}.wav")
feats = compute_features(wav, cfg)
print("frames", feats.n_frames, "mel", feats.mel_spec.shape, "linear", feats.linear_spec.shape)

# sung pitch vs. note pitch on voiced frames
voiced = feats.voicing > 0
print("voiced fraction %.2f" % voiced.mean())
print("median F0 %.1f Hz" % np.median(np.exp(feats.lf0[voiced])))

# pitch bins: 256 uniform LF0 bins over MIDI 30..100, bin 256 = unvoiced
q = pitch_quantizer()
bins = quantize_lf0(np.where(voiced, feats.lf0, 0.0), q)
print("pitch bins used:", np.unique(bins)[:10], "...")
print("LF0 of A4 =", lf0_of_pitch(69))

# energy is the L2 norm of each magnitude frame
print("energy range %.3f .. %.3f" % (feats.energy.min(), feats.energy.max()))
