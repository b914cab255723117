import dataclasses
import json

import numpy as np
import pytest
from conftest import train_tiny
from hypothesis import given, settings
from hypothesis import strategies as st

from expressive_svs.corpus import Waveform
from expressive_svs.dsp import extract_f0
from expressive_svs.errors import ConfigError, ConfigHashMismatch, WriteFailure
from expressive_svs.evaluation import (
    MetricEntry,
    MetricReport,
    Synthesizer,
    _Contours,
    analyse,
    compute_metrics,
    dur_mae,
    evaluate,
    features_of,
    metrics_from_features,
    plot_report,
    variant_name,
)
from expressive_svs.config import RunConfig, apply_variant

SR = 24000


def _glide(f_start, f_end, seconds=1.0, amp=0.4):
    """Sine whose frequency moves geometrically from f_start to f_end."""
    t = np.arange(int(seconds * SR)) / SR
    f = f_start * (f_end / f_start) ** (t / seconds)
    return Waveform(amp * np.sin(2 * np.pi * np.cumsum(f) / SR), SR)


def _ref_wave(prepared, k=0):
    uid = prepared.split["train"][k]
    return uid, Waveform(prepared.arrays(uid)["wav"].astype(np.float64), SR)


# ------------------------------------------------------------------ metrics


@pytest.mark.parametrize("k", range(3))
def test_metric_symmetry(prepared, k):
    uid, ref = _ref_wave(prepared, k)
    frames = prepared.arrays(uid)["phone_frames"]
    m = compute_metrics(ref, ref, annotated_frames=frames, predicted_frames=frames.copy(), uid=uid)
    assert (m.f0_mae, m.dur_mae, m.energy_mae) == (0.0, 0.0, 0.0)


def test_f0_mae_gain_invariant(prepared):
    _, ref = _ref_wave(prepared)
    quiet = Waveform(0.5 * ref.samples, SR)
    m = compute_metrics(ref, quiet)
    assert m.f0_mae == 0.0
    # frame energy is linear in gain
    e = analyse(ref).energy
    assert m.energy_mae == pytest.approx(0.5 * e.mean(), rel=1e-9)


def test_energy_constant_offset(prepared):
    _, ref = _ref_wave(prepared)
    c = analyse(ref)
    shifted = _Contours(c.lf0, c.voicing, c.energy + 2.0)
    assert metrics_from_features(c, shifted).energy_mae == pytest.approx(2.0, abs=1e-12)


def test_semitone_shift_oracle():
    ratio = 2 ** (1 / 12)
    ref = _glide(180.0, 300.0)
    syn = _glide(180.0 * ratio, 300.0 * ratio)
    m = compute_metrics(ref, syn)
    # brute force per frame on the extracted contours
    lr, vr = extract_f0(ref)
    ls, vs = extract_f0(syn)
    diffs = [abs(np.exp(a) - np.exp(b)) for a, b, x, y in zip(lr, ls, vr, vs) if x and y]
    assert m.f0_mae == pytest.approx(np.mean(diffs), rel=1e-12)
    mean_f0 = np.mean([np.exp(a) for a, x, y in zip(lr, vr, vs) if x and y])
    assert m.f0_mae == pytest.approx(mean_f0 * (ratio - 1), rel=0.03)


def test_empty_overlap_is_absent_not_zero():
    ref = _glide(200.0, 200.0)
    silence = Waveform(np.zeros(SR), SR)
    m = compute_metrics(ref, silence)
    assert m.f0_mae is None
    assert m.energy_mae > 0


def test_length_mismatch_truncates():
    ref = _glide(220.0, 220.0, 1.0)
    longer = Waveform(np.concatenate([ref.samples, np.zeros(4000)]), SR)
    assert compute_metrics(ref, longer).energy_mae == 0.0


def test_wrong_rate_rejected():
    with pytest.raises(ConfigError):
        compute_metrics(Waveform(np.zeros(44100), 44100), Waveform(np.zeros(SR), SR))


def test_dur_mae():
    assert dur_mae([3, 4, 5], [3, 4, 5]) == 0
    assert dur_mae([3, 4, 5], [4, 4, 2]) == pytest.approx(4 / 3)
    with pytest.raises(ValueError):
        dur_mae([1, 2], [1])


entry = st.builds(
    MetricEntry,
    st.text(min_size=1, max_size=4),
    st.one_of(st.none(), st.floats(0, 100)),
    st.floats(0, 50),
    st.floats(0, 100),
)


@settings(max_examples=50, deadline=None)
@given(st.lists(entry, min_size=1, max_size=8))
def test_report_aggregate_is_mean(entries):
    r = MetricReport.aggregate(entries)
    assert r.n_utterances == len(entries)
    assert r.dur_mae == pytest.approx(np.mean([e.dur_mae for e in entries]))
    f0 = [e.f0_mae for e in entries if e.f0_mae is not None]
    assert (r.f0_mae is None) == (not f0)
    if f0:
        assert r.f0_mae == pytest.approx(np.mean(f0))
    for v in (r.f0_mae, r.dur_mae, r.energy_mae):
        assert v is None or v >= 0


def test_report_files(tmp_path):
    r = MetricReport.aggregate([MetricEntry("a", 1.0, 2.0, 3.0), MetricEntry("b", None, 4.0, 5.0)], "no-sem")
    r.save(tmp_path / "r.json")
    r.save_table(tmp_path / "r.tsv")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["variant"] == "no-sem" and d["f0_mae"] == 1.0 and d["dur_mae"] == 3.0
    rows = (tmp_path / "r.tsv").read_text().splitlines()
    assert rows[0].split("\t") == ["variant", "id", "f0_mae", "dur_mae", "energy_mae"]
    assert rows[2].split("\t")[2] == ""
    assert rows[-1].split("\t")[:2] == ["no-sem", "*"]


# -------------------------------------------------------------- synthesis


def test_synthesis_deterministic(prepared, tiny_checkpoint):
    synth = Synthesizer(tiny_checkpoint)
    item = prepared.items(prepared.split["eval"][:1])[0]
    a, fa = synth.synthesize_item(item, seed=3)
    b, fb = synth.synthesize_item(item, seed=3)
    assert np.array_equal(a.samples, b.samples) and np.array_equal(fa, fb)
    c, _ = synth.synthesize_item(item, seed=4)
    assert not np.array_equal(a.samples, c.samples)


def test_synthesis_duration_matches_predicted_frames(prepared, tiny_checkpoint):
    synth = Synthesizer(tiny_checkpoint)
    item = prepared.items(prepared.split["eval"][:1])[0]
    wave, frames = synth.synthesize_item(item)
    s = synth.cfg.stft
    assert len(frames) == len(item["phoneme_ids"])
    # decoder output plus the analysis-window overhang, so re-analysis gives the same frame count
    assert len(wave) == frames.sum() * s.hop_length + s.window_length - s.hop_length
    assert features_of(wave, synth.cfg).n_frames == frames.sum()


def test_synthesis_refuses_other_config(tiny_checkpoint):
    synth = Synthesizer(tiny_checkpoint)
    other = dataclasses.replace(synth.cfg, model=dataclasses.replace(synth.cfg.model, latent_dim=synth.cfg.model.latent_dim + 2))
    with pytest.raises(ConfigHashMismatch):
        Synthesizer(tiny_checkpoint, other)


def test_sem_off_and_standard_both_synthesize(prepared, tmp_path, tiny_checkpoint):
    off = Synthesizer(train_tiny(prepared, tmp_path / "off", variant="no-sem"))
    std = Synthesizer(tiny_checkpoint)
    assert (off.variant, std.variant) == ("no-sem", "proposed")
    item = prepared.items(prepared.split["eval"][:1])[0]
    a, _ = off.synthesize_item(item)
    b, _ = std.synthesize_item(item)
    assert np.isfinite(a.samples).all() and np.isfinite(b.samples).all()
    assert not (len(a) == len(b) and np.array_equal(a.samples, b.samples))


def test_variant_names():
    cfg = RunConfig()
    assert [variant_name(apply_variant(cfg, v)) for v in ("proposed", "no-energy", "no-sem", "reversed-sem")] == [
        "proposed", "no-energy", "no-sem", "reversed-sem",
    ]


def test_evaluate_report(prepared, prepared_dir, tiny_checkpoint):
    report = evaluate(tiny_checkpoint, prepared_dir, ids=prepared.split["eval"])
    assert report.n_utterances == len(prepared.split["eval"]) == len(report.per_utterance)
    assert report.variant == "proposed"
    assert report.dur_mae >= 0 and report.energy_mae >= 0
    with pytest.raises(ConfigError):
        evaluate(tiny_checkpoint, prepared_dir, variant="no-sem")


# ------------------------------------------------------------------- plots


def _png_pixels(path):
    import matplotlib.image as mpimg

    return mpimg.imread(path)


def test_plot_identity_and_sidecar(prepared, tmp_path):
    cfg = prepared.apply_to(RunConfig())
    _, ref = _ref_wave(prepared)
    feats = features_of(ref, cfg)
    out = plot_report(feats, feats, tmp_path / "p.png", cfg.stft, title="x")
    assert out.exists() and out.stat().st_size > 0
    side = json.loads((tmp_path / "p.png.json").read_text())
    px = _png_pixels(out)
    (ax0, ay0, ax1, ay1), (bx0, by0, bx1, by1) = (side["panels"][p]["pixel_box"] for p in ("reference", "synthesized"))
    assert (ax1 - ax0, ay1 - ay0) == (bx1 - bx0, by1 - by0)
    assert np.array_equal(px[ay0:ay1, ax0:ax1], px[by0:by1, bx0:bx1])

    for name in ("reference", "synthesized"):
        panel = side["panels"][name]
        f0 = np.where(feats.voicing > 0, np.exp(feats.lf0), np.nan)
        assert [None if np.isnan(v) else float(v) for v in f0] == panel["f0_hz"]
        assert panel["energy"] == np.asarray(feats.energy, dtype=np.float64).tolist()
        assert len(panel["energy_plotted"]) == feats.n_frames


def test_plot_sidecar_matches_artist_data(prepared, tmp_path, monkeypatch):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    lines = []
    real_close = plt.close

    def grab(fig=None):
        if fig is not None:
            lines.extend(ax.get_lines() for ax in fig.axes)
        real_close(fig)

    monkeypatch.setattr(plt, "close", grab)
    cfg = prepared.apply_to(RunConfig())
    _, ref = _ref_wave(prepared)
    syn = Waveform(0.7 * ref.samples, SR)
    plot_report(features_of(ref, cfg), features_of(syn, cfg), tmp_path / "q.png", cfg.stft)
    side = json.loads((tmp_path / "q.png.json").read_text())
    for axis_lines, name in zip(lines, ("reference", "synthesized")):
        f0_line, energy_line = axis_lines
        plotted_f0 = [None if np.isnan(v) else float(v) for v in f0_line.get_ydata()]
        assert plotted_f0 == side["panels"][name]["f0_hz"]
        assert list(map(float, energy_line.get_ydata())) == side["panels"][name]["energy_plotted"]


def test_plot_write_failure(prepared, tmp_path):
    cfg = prepared.apply_to(RunConfig())
    _, ref = _ref_wave(prepared)
    feats = features_of(ref, cfg)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(WriteFailure):
        plot_report(feats, feats, blocker / "sub" / "p.png", cfg.stft)


@pytest.mark.slow
@pytest.mark.xfail(
    reason="8 training utterances are too few for the duration predictor to generalise: "
    "held-out consonants get note-length durations (measured +17% / -8.5% on the two held-out items)",
    strict=False,
)
def test_held_out_duration_after_smoke(prepared, smoke_run):
    """Duration-predictor sanity: synthesis length tracks the score on unseen utterances."""
    trainer = smoke_run[0]
    synth = Synthesizer(trainer.out_dir / "ckpt_last.pt")
    off = {}
    for uid in prepared.split["eval"]:
        wave, _ = synth.synthesize_item(dict(prepared.arrays(uid), id=uid))
        target = prepared.utterances[uid].duration_sec
        off[uid] = wave.duration_sec / target - 1
    assert all(abs(v) <= 0.05 for v in off.values()), off
