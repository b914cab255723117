"""Frame-level signal analysis.

Framing convention: frame ``t`` covers samples ``[t*hop, t*hop + win)`` with
no centre padding, so a signal of ``n`` samples yields
``floor((n - win) / hop) + 1`` frames (the same arithmetic as the note frame
count). Signals shorter than one window are zero-padded to one frame.
"""
from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window

from .errors import ConfigInvalid

MEL_FLOOR = 1e-5


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 1024
    window_length: int = 1024
    hop_length: int = 256
    window: str = "hann"
    sample_rate: int = 24000

    def validate(self):
        if min(self.fft_size, self.window_length, self.hop_length, self.sample_rate) <= 0:
            raise ConfigInvalid(f"non-positive STFT parameter in {self}")
        if not self.hop_length <= self.window_length <= self.fft_size:
            raise ConfigInvalid("need hop_length <= window_length <= fft_size")
        try:
            get_window(self.window, self.window_length)
        except ValueError as e:
            raise ConfigInvalid(str(e)) from e
        return self

    @property
    def n_bins(self):
        return self.fft_size // 2 + 1


@dataclass
class FrameFeatures:
    linear_spec: np.ndarray  # (frames, bins)
    mel_spec: np.ndarray  # (frames, n_mels), log-compressed
    energy: np.ndarray  # (frames,)
    lf0: np.ndarray  # (frames,), 0 where unvoiced
    voicing: np.ndarray  # (frames,) in {0, 1}

    @property
    def n_frames(self):
        return len(self.energy)


def num_frames(n_samples, cfg):
    if n_samples <= cfg.window_length:
        return 1
    return (n_samples - cfg.window_length) // cfg.hop_length + 1


def _samples(waveform):
    return np.asarray(getattr(waveform, "samples", waveform), dtype=np.float64)


def frame_signal(x, cfg):
    x = np.asarray(x, dtype=np.float64)
    n = num_frames(len(x), cfg)
    need = (n - 1) * cfg.hop_length + cfg.window_length
    if len(x) < need:
        x = np.pad(x, (0, need - len(x)))
    return np.lib.stride_tricks.sliding_window_view(x, cfg.window_length)[:: cfg.hop_length][:n]


def stft(waveform, cfg=StftConfig()):
    """Complex STFT, shape (frames, fft_size // 2 + 1)."""
    cfg.validate()
    x = _samples(waveform)
    if x.size == 0:
        raise ConfigInvalid("empty waveform")
    frames = frame_signal(x, cfg) * get_window(cfg.window, cfg.window_length)
    return np.fft.rfft(frames, n=cfg.fft_size, axis=-1)


def frame_energy(stft_frames):
    """Per-frame L2 norm of the STFT magnitudes."""
    mag = np.abs(np.asarray(stft_frames))
    return np.sqrt(np.sum(mag * mag, axis=-1))


def hz_to_mel(f):
    # Slaney: linear below 1 kHz, logarithmic above
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    mels = f / f_sp
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-10) / min_log_hz) / logstep, mels)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_filterbank(sample_rate, fft_size, n_mels=80, fmin=0.0, fmax=None):
    """Slaney-normalised triangular filters, shape (n_mels, fft_size//2 + 1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    fft_freqs = np.linspace(0, sample_rate / 2, fft_size // 2 + 1)
    mel_f = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fdiff = np.diff(mel_f)
    ramps = mel_f[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0, np.minimum(lower, upper))
    weights *= (2.0 / (mel_f[2 : n_mels + 2] - mel_f[:n_mels]))[:, None]
    return weights


def mel_spectrogram(waveform, cfg=StftConfig(), n_mels=80, fmin=0.0, fmax=None):
    """Log mel magnitudes, shape (frames, n_mels), floored at ``MEL_FLOOR``."""
    mag = np.abs(stft(waveform, cfg))
    fb = mel_filterbank(cfg.sample_rate, cfg.fft_size, n_mels, fmin, fmax)
    return np.log(np.maximum(mag @ fb.T, MEL_FLOOR))


def extract_f0(waveform, cfg=StftConfig(), fmin=65.0, fmax=1000.0, threshold=0.15, silence_rms=1e-3):
    """YIN pitch tracking on the STFT frame grid.

    Returns ``(lf0, voicing)`` where ``lf0`` is the natural log of F0 on
    voiced frames and 0 elsewhere.
    """
    cfg.validate()
    sr = cfg.sample_rate
    if not 0 < fmin < fmax <= sr / 2:
        raise ConfigInvalid(f"need 0 < fmin < fmax <= Nyquist, got {fmin}, {fmax}")
    tau_min = max(2, int(np.floor(sr / fmax)))
    tau_max = int(np.ceil(sr / fmin)) + 1
    width = cfg.window_length - tau_max - 1
    if width < tau_max // 2:
        raise ConfigInvalid("window too short for the requested fmin")

    frames = frame_signal(_samples(waveform), cfg)
    n_frames, wl = frames.shape
    nfft = 1 << int(np.ceil(np.log2(wl + width)))

    head = frames[:, :width]
    spec = np.fft.rfft(frames, nfft) * np.conj(np.fft.rfft(head, nfft))
    acf = np.fft.irfft(spec, nfft)[:, : tau_max + 2]
    csum = np.concatenate([np.zeros((n_frames, 1)), np.cumsum(frames**2, axis=1)], axis=1)
    taus = np.arange(tau_max + 2)
    energy_shift = csum[:, taus + width] - csum[:, taus]
    diff = np.maximum(energy_shift[:, :1] + energy_shift - 2 * acf, 0.0)

    cum = np.cumsum(diff[:, 1:], axis=1)
    cmnd = np.ones_like(diff)
    with np.errstate(divide="ignore", invalid="ignore"):
        cmnd[:, 1:] = np.where(cum > 0, diff[:, 1:] * taus[1:] / cum, 1.0)

    rms = np.sqrt(np.mean(frames**2, axis=1))
    lf0 = np.zeros(n_frames)
    voicing = np.zeros(n_frames, dtype=np.int64)
    for t in range(n_frames):
        if rms[t] < silence_rms:
            continue
        row = cmnd[t]
        below = np.nonzero(row[tau_min : tau_max + 1] < threshold)[0]
        if below.size == 0:
            continue
        tau = tau_min + below[0]
        while tau + 1 <= tau_max and row[tau + 1] < row[tau]:
            tau += 1
        d = diff[t]
        denom = d[tau - 1] - 2 * d[tau] + d[tau + 1]
        shift = 0.5 * (d[tau - 1] - d[tau + 1]) / denom if denom > 0 else 0.0
        f0 = sr / (tau + float(np.clip(shift, -1, 1)))
        if fmin <= f0 <= fmax:
            lf0[t] = np.log(f0)
            voicing[t] = 1
    return lf0, voicing


def compute_features(waveform, cfg=StftConfig(), n_mels=80, fmin=65.0, fmax=1000.0):
    """All frame-level training targets for one waveform, on one frame grid."""
    spec = stft(waveform, cfg)
    mag = np.abs(spec)
    fb = mel_filterbank(cfg.sample_rate, cfg.fft_size, n_mels)
    lf0, voicing = extract_f0(waveform, cfg, fmin, fmax)
    return FrameFeatures(
        linear_spec=mag,
        mel_spec=np.log(np.maximum(mag @ fb.T, MEL_FLOOR)),
        energy=frame_energy(spec),
        lf0=lf0,
        voicing=voicing,
    )
