"""Inference, objective metrics and report plots.

Metric conventions:

* F0 MAE: Hz, over frames voiced in both reference and synthesis.
* Dur MAE: frames per phoneme, predicted vs annotated counts.
* Energy MAE: raw frame energy (STFT-magnitude L2 norm).

Frame-level sequences of different lengths are truncated to the shorter one.
"""
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .corpus import Waveform
from .data import PreparedData, collate
from .dsp import StftConfig, compute_features, extract_f0, frame_energy, stft
from .errors import ConfigError, EmptyOverlap, WriteFailure
from .semantic import load_provider
from .training import load_checkpoint

logger = logging.getLogger(__name__)


@dataclass
class MetricEntry:
    id: str
    f0_mae: Optional[float]
    dur_mae: Optional[float]
    energy_mae: Optional[float]


@dataclass
class MetricReport:
    f0_mae: Optional[float]
    dur_mae: Optional[float]
    energy_mae: Optional[float]
    per_utterance: list = field(default_factory=list)
    n_utterances: int = 0
    variant: str = "proposed"

    @classmethod
    def aggregate(cls, entries, variant="proposed"):
        def mean(name):
            vals = [getattr(e, name) for e in entries if getattr(e, name) is not None]
            return float(np.mean(vals)) if vals else None

        return cls(mean("f0_mae"), mean("dur_mae"), mean("energy_mae"), list(entries), len(entries), variant)

    def to_dict(self):
        return dataclasses.asdict(self)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=1)

    def table_rows(self):
        """Flat rows: variant, id, f0_mae, dur_mae, energy_mae ('*' = corpus mean)."""
        rows = [(self.variant, e.id, e.f0_mae, e.dur_mae, e.energy_mae) for e in self.per_utterance]
        rows.append((self.variant, "*", self.f0_mae, self.dur_mae, self.energy_mae))
        return rows

    def save_table(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("variant\tid\tf0_mae\tdur_mae\tenergy_mae\n")
            for row in self.table_rows():
                f.write("\t".join("" if v is None else (f"{v:.6g}" if isinstance(v, float) else str(v)) for v in row) + "\n")


def f0_mae(ref_lf0, ref_voicing, syn_lf0, syn_voicing):
    n = min(len(ref_lf0), len(syn_lf0))
    both = (np.asarray(ref_voicing[:n]) > 0) & (np.asarray(syn_voicing[:n]) > 0)
    if not both.any():
        raise EmptyOverlap("no frames voiced in both signals")
    return float(np.mean(np.abs(np.exp(ref_lf0[:n][both]) - np.exp(syn_lf0[:n][both]))))


def energy_mae(ref_energy, syn_energy):
    n = min(len(ref_energy), len(syn_energy))
    return float(np.mean(np.abs(np.asarray(ref_energy[:n]) - np.asarray(syn_energy[:n]))))


def dur_mae(annotated_frames, predicted_frames):
    a, p = np.asarray(annotated_frames), np.asarray(predicted_frames)
    if a.shape != p.shape:
        raise ValueError(f"{a.shape} vs {p.shape} phoneme counts")
    return float(np.mean(np.abs(a - p)))


def metrics_from_features(ref, syn, annotated_frames=None, predicted_frames=None, uid=""):
    """Metrics from precomputed features (anything with lf0/voicing/energy)."""
    try:
        f0 = f0_mae(ref.lf0, ref.voicing, syn.lf0, syn.voicing)
    except EmptyOverlap:
        logger.info("%s: no mutually voiced frames, F0 MAE absent", uid)
        f0 = None
    dur = dur_mae(annotated_frames, predicted_frames) if annotated_frames is not None and predicted_frames is not None else None
    return MetricEntry(uid, f0, dur, energy_mae(ref.energy, syn.energy))


@dataclass
class _Contours:
    lf0: np.ndarray
    voicing: np.ndarray
    energy: np.ndarray


def analyse(waveform, cfg=StftConfig(), fmin=65.0, fmax=1000.0):
    lf0, voicing = extract_f0(waveform, cfg, fmin, fmax)
    return _Contours(lf0, voicing, frame_energy(stft(waveform, cfg)))


def compute_metrics(ref, syn, cfg=StftConfig(), annotated_frames=None, predicted_frames=None, fmin=65.0, fmax=1000.0, uid=""):
    """Compare two 24 kHz waveforms (plus optional phoneme frame counts)."""
    for w in (ref, syn):
        if getattr(w, "sample_rate", cfg.sample_rate) != cfg.sample_rate:
            raise ConfigError(f"waveforms must be at {cfg.sample_rate} Hz")
    return metrics_from_features(analyse(ref, cfg, fmin, fmax), analyse(syn, cfg, fmin, fmax), annotated_frames, predicted_frames, uid)


class Synthesizer:
    """Read-only inference wrapper around a checkpoint."""

    def __init__(self, checkpoint, expected_config=None):
        self.model, self.cfg, state = load_checkpoint(checkpoint, expected_config)
        self.step = state["step"]
        self.vocab = state["vocab"]
        self.variant = variant_name(self.cfg)

    def provider(self):
        """Embedding provider for fresh scores; the no-sem model ignores it."""
        if self.cfg.semantic.variant == "off":
            return load_provider("stub")
        return load_provider(self.cfg.provider)

    def synthesize_batch(self, batch, seed=0, noise_scale=0.667, durations=None):
        """Returns (list of Waveform, list of predicted frame-count arrays)."""
        gen = torch.Generator().manual_seed(seed)
        y, prior = self.model.infer(batch, noise_scale=noise_scale, generator=gen, durations=durations)
        cfg = self.cfg.stft
        pad = (cfg.window_length - cfg.hop_length) // 2
        waves, frames = [], []
        for b in range(y.size(0)):
            T = int(prior["frame_lengths"][b])
            n = int(batch["phone_lengths"][b])
            samples = y[b, 0, : T * cfg.hop_length].double().numpy()
            # centre decoder frames on the analysis windows they were trained against
            samples = np.pad(samples, (pad, cfg.window_length - cfg.hop_length - pad))
            waves.append(Waveform(samples, cfg.sample_rate))
            frames.append(prior["pred_durations"][b, :n].numpy())
        return waves, frames

    def synthesize_item(self, item, seed=0, noise_scale=0.667):
        waves, frames = self.synthesize_batch(collate([item], self.cfg.stft), seed, noise_scale)
        return waves[0], frames[0]


def variant_name(cfg):
    sem = cfg.semantic.variant
    if not cfg.model.use_energy_predictor:
        return "no-energy"
    return {"standard": "proposed", "off": "no-sem", "reversed": "reversed-sem"}[sem]


def evaluate(checkpoint, data_dir, ids=None, seed=0, noise_scale=0.667, variant=None, split="eval"):
    """Synthesize ``ids`` (default: the ``split`` list) and score them against the references."""
    synth = Synthesizer(checkpoint)
    if variant is not None and variant != synth.variant:
        raise ConfigError(f"checkpoint is a {synth.variant!r} model, not {variant!r}")
    data = PreparedData.load(data_dir)
    ids = list(ids) if ids else list(data.split[split])
    cfg = synth.cfg
    entries = []
    for uid in ids:
        item = dict(data.arrays(uid), id=uid)
        wave, pred = synth.synthesize_item(item, seed, noise_scale)
        ref = Waveform(item["wav"].astype(np.float64), cfg.stft.sample_rate)
        entries.append(compute_metrics(ref, wave, cfg.stft, item["phone_frames"], pred, cfg.f0_min, cfg.f0_max, uid))
    return MetricReport.aggregate(entries, synth.variant)


def plot_report(ref, syn, out_path, cfg=StftConfig(), title=""):
    """Spectrograms with pitch (blue) and energy (yellow) contours, reference left.

    ``ref``/``syn`` are FrameFeatures. Writes ``out_path`` and a sidecar
    ``<out_path>.json`` holding the plotted contour values and the pixel
    boxes of both panels.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_path = Path(out_path)
    # panels sit on whole pixels so identical inputs rasterise identically
    width, height, dpi = 1200, 400, 100
    fig = plt.figure(figsize=(width / dpi, height / dpi), dpi=dpi)
    axes = [fig.add_axes((x0 / width, 50 / height, 500 / width, 300 / height)) for x0 in (70, 640)]
    sidecar = {"hop_seconds": cfg.hop_length / cfg.sample_rate, "panels": {}}
    for ax, name, feats in zip(axes, ("reference", "synthesized"), (ref, syn)):
        spec_db = 20 * np.log10(np.maximum(feats.linear_spec.T, 1e-5))
        n_frames = spec_db.shape[1]
        nyq = cfg.sample_rate / 2
        ax.imshow(spec_db, origin="lower", aspect="auto", cmap="magma", extent=(0, n_frames, 0, nyq), vmin=-100, vmax=max(float(spec_db.max()), -99))
        f0 = np.where(feats.voicing > 0, np.exp(feats.lf0), np.nan)
        ax.plot(np.arange(n_frames) + 0.5, f0, color="tab:blue", lw=1.5)
        energy = np.asarray(feats.energy, dtype=np.float64)
        scaled = energy / max(float(energy.max()), 1e-12) * nyq * 0.9
        ax.plot(np.arange(n_frames) + 0.5, scaled, color="gold", lw=1.2)
        ax.set_xlim(0, n_frames)
        ax.set_ylim(0, nyq)
        sidecar["panels"][name] = {
            "f0_hz": [None if np.isnan(v) else float(v) for v in f0],
            "energy": energy.tolist(),
            "energy_plotted": scaled.tolist(),
        }
    axes[0].set_ylabel("Hz")
    for ax, name in zip(axes, ("reference", "synthesized")):
        ax.set_xlabel("frame")
        ax.set_title(name)
    if title:
        fig.suptitle(title)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out_path)
        fig.canvas.draw()
        for ax, name in zip(axes, ("reference", "synthesized")):
            x0, y0, x1, y1 = ax.get_window_extent().extents
            sidecar["panels"][name]["pixel_box"] = [int(np.ceil(x0)), int(np.ceil(height - y1)), int(np.floor(x1)), int(np.floor(height - y0))]
        with open(str(out_path) + ".json", "w") as f:
            json.dump(sidecar, f)
    except OSError as e:
        raise WriteFailure(f"cannot write {out_path}: {e}") from e
    finally:
        plt.close(fig)
    return out_path


def features_of(waveform, cfg):
    return compute_features(waveform, cfg.stft, cfg.n_mels, cfg.f0_min, cfg.f0_max)
