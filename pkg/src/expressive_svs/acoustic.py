"""Variational end-to-end acoustic model.

Prior path: summed score embeddings -> phoneme FFT encoder (+ lyric
semantics) -> duration predictor -> length regulator -> singing adaptor
(pitch-ratio and energy predictors whose quantised outputs are embedded and
added back) -> frame prior network. Posterior path: linear spectrogram ->
WaveNet encoder. A coupling flow maps posterior samples into the prior
space and a source-excited upsampling decoder produces the waveform.
"""
import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ShapeMismatch
from .layers import ConvStack, FFTEncoder, WN, get_padding, leaky, length_regulate, sequence_mask
from .semantic import SemanticEncoder


@dataclass
class ModelConfig:
    n_phonemes: int = 64
    hidden_dim: int = 192
    filter_dim: int = 768
    n_heads: int = 2
    kernel_size: int = 3
    dropout: float = 0.1
    phoneme_encoder_blocks: int = 6
    duration_predictor_layers: int = 3
    pitch_predictor_layers: int = 5
    energy_predictor_layers: int = 2
    frame_prior_layers: int = 4
    n_pitch_bins: int = 256
    n_energy_bins: int = 256
    use_energy_predictor: bool = True
    latent_dim: int = 16
    spec_channels: int = 513
    posterior_channels: int = 192
    posterior_layers: int = 8
    flow_channels: int = 192
    flow_couplings: int = 4
    flow_wn_layers: int = 2
    decoder_channels: int = 128
    decoder_upsample_factors: tuple = (8, 8, 4)
    decoder_upsample_kernels: tuple = (16, 16, 8)
    resblock_kernels: tuple = (3, 5)
    resblock_dilations: tuple = ((1, 3), (1, 3))
    source_excitation: bool = True
    n_harmonics: int = 4
    disc_periods: tuple = (2,)
    disc_scales: int = 1
    disc_channels: int = 32
    sample_rate: int = 24000
    hop_length: int = 256

    def __post_init__(self):
        self.decoder_upsample_factors = tuple(self.decoder_upsample_factors)
        self.decoder_upsample_kernels = tuple(self.decoder_upsample_kernels)
        self.resblock_kernels = tuple(self.resblock_kernels)
        self.resblock_dilations = tuple(tuple(d) for d in self.resblock_dilations)
        self.disc_periods = tuple(self.disc_periods)
        if math.prod(self.decoder_upsample_factors) != self.hop_length:
            raise ValueError("product of decoder_upsample_factors must equal hop_length")
        if min(self.hidden_dim, self.latent_dim, self.decoder_channels, self.n_phonemes) <= 0:
            raise ValueError("dimensions must be positive")

    @property
    def n_discriminators(self):
        return len(self.disc_periods) + self.disc_scales


def quantize_torch(value, lo, hi, n_bins):
    bins = torch.floor((value - lo) / (hi - lo) * n_bins)
    return bins.clamp(0, n_bins - 1).long()


# --------------------------------------------------------------------- prior


class PitchPredictor(nn.Module):
    """Predicts the ratio of sung LF0 to note LF0 for every frame."""

    def __init__(self, cfg):
        super().__init__()
        self.net = ConvStack(cfg.hidden_dim, cfg.hidden_dim, 1, cfg.pitch_predictor_layers, cfg.kernel_size, cfg.dropout)
        nn.init.zeros_(self.net.proj.weight)
        nn.init.zeros_(self.net.proj.bias)

    def forward(self, h, mask):
        return (1.0 + self.net(h, mask)[:, 0]) * mask[:, 0]


class EnergyPredictor(nn.Module):
    """Two conv layers (ReLU, LayerNorm, dropout) and a linear output, log domain."""

    def __init__(self, cfg):
        super().__init__()
        self.net = ConvStack(cfg.hidden_dim, cfg.hidden_dim, 1, cfg.energy_predictor_layers, cfg.kernel_size, cfg.dropout)

    def forward(self, h, mask):
        return self.net(h, mask)[:, 0]


class PriorEncoder(nn.Module):
    def __init__(self, cfg, sem_cfg, pitch_q, energy_q):
        super().__init__()
        self.cfg = cfg
        self.sem_cfg = sem_cfg
        self.pitch_q = pitch_q
        self.energy_q = energy_q
        h = cfg.hidden_dim
        self.phoneme_emb = nn.Embedding(cfg.n_phonemes, h, padding_idx=0)
        self.note_pitch_emb = nn.Embedding(128, h)
        self.slur_emb = nn.Embedding(2, h)
        self.note_dur_proj = nn.Linear(1, h)
        for emb in (self.phoneme_emb, self.note_pitch_emb, self.slur_emb):
            nn.init.normal_(emb.weight, 0.0, h**-0.5)
        self.encoder = FFTEncoder(h, cfg.filter_dim, cfg.n_heads, cfg.phoneme_encoder_blocks, cfg.kernel_size, cfg.dropout)
        self.semantic = SemanticEncoder(sem_cfg) if sem_cfg.variant != "off" else None
        self.duration_predictor = ConvStack(h, h, 1, cfg.duration_predictor_layers, cfg.kernel_size, cfg.dropout)
        self.pitch_predictor = PitchPredictor(cfg)
        self.pitch_emb = nn.Embedding(cfg.n_pitch_bins + 1, h)
        if cfg.use_energy_predictor:
            self.energy_predictor = EnergyPredictor(cfg)
            self.energy_emb = nn.Embedding(cfg.n_energy_bins, h)
        else:
            self.energy_predictor = None
            self.energy_emb = None
        self.frame_prior = ConvStack(h, h, 2 * cfg.latent_dim, cfg.frame_prior_layers, cfg.kernel_size, cfg.dropout)

    def semantic_hidden(self, batch, phone_mask):
        """Phoneme-level semantic hidden states (B, H, N), zeros when disabled."""
        B, N = batch["phoneme_ids"].shape
        if self.semantic is None:
            return phone_mask.new_zeros(B, self.cfg.hidden_dim, N)
        words = batch["word_emb"].to(phone_mask.dtype)
        index = batch["sem_index"]
        if self.sem_cfg.variant == "standard":
            x = gather_rows(words, index)
            return self.semantic(x, batch["phone_lengths"]) * phone_mask
        h = self.semantic(words, batch["word_lengths"])  # (B, H, W)
        return gather_rows(h.transpose(1, 2), index).transpose(1, 2) * phone_mask

    def encode_phonemes(self, batch):
        ids = batch["phoneme_ids"]
        phone_mask = sequence_mask(batch["phone_lengths"], ids.size(1)).unsqueeze(1).to(self.phoneme_emb.weight.dtype)
        x = (
            self.phoneme_emb(ids)
            + self.note_pitch_emb(batch["note_pitch_ids"])
            + self.slur_emb(batch["slur_ids"])
            + self.note_dur_proj(torch.log1p(batch["note_frames"].to(phone_mask.dtype))[..., None])
        ).transpose(1, 2)
        h = self.encoder(x * phone_mask, phone_mask)
        sem = self.semantic_hidden(batch, phone_mask)
        return h + sem, phone_mask, sem

    def forward(self, batch, durations=None, gt_lf0=None, gt_log_energy=None):
        """Run the prior path.

        ``durations`` (B, N) selects teacher-forced length regulation; when
        ``None`` the predicted durations are used. ``gt_lf0`` /
        ``gt_log_energy`` (B, T), when given, feed the pitch/energy
        embeddings instead of the predictions.
        """
        h_ph, phone_mask, sem = self.encode_phonemes(batch)
        dur_ratio = self.duration_predictor(h_ph, phone_mask)[:, 0]
        pred_frames = predicted_frames(dur_ratio, batch["note_frames"], phone_mask[:, 0])
        used = durations if durations is not None else pred_frames
        h_frame, frame_lengths = length_regulate(h_ph, used)
        T = h_frame.size(2)
        frame_mask = sequence_mask(frame_lengths, T).unsqueeze(1).to(h_frame.dtype)
        note_lf0, _ = length_regulate(batch["note_lf0"].to(h_frame.dtype)[:, None], used, T)
        note_lf0 = note_lf0[:, 0]

        ratio = self.pitch_predictor(h_frame, frame_mask)
        lf0_hat = predict_pitch(ratio, note_lf0)
        pitch_src = gt_lf0 if gt_lf0 is not None else lf0_hat.detach()
        pitch_src = pitch_src * frame_mask[:, 0]
        q = self.pitch_q
        pitch_bins = torch.where(pitch_src > 0, quantize_torch(pitch_src, q.lo, q.hi, q.n_bins), torch.full_like(pitch_src, q.n_bins, dtype=torch.long))
        h_adapted = h_frame + self.pitch_emb(pitch_bins).transpose(1, 2) * frame_mask

        log_energy_hat = None
        if self.energy_predictor is not None:
            log_energy_hat = self.energy_predictor(h_frame, frame_mask)
            e_src = gt_log_energy if gt_log_energy is not None else log_energy_hat.detach()
            eq = self.energy_q
            e_bins = quantize_torch(e_src, eq.lo, eq.hi, eq.n_bins)
            h_adapted = h_adapted + self.energy_emb(e_bins).transpose(1, 2) * frame_mask

        stats = self.frame_prior(h_adapted, frame_mask)
        m_p, logs_p = stats.split(self.cfg.latent_dim, dim=1)
        return {
            "phone_hidden": h_ph,
            "semantic_hidden": sem,
            "phone_mask": phone_mask,
            "dur_ratio": dur_ratio,
            "pred_durations": pred_frames,
            "frame_hidden": h_frame,
            "adapted_hidden": h_adapted,
            "frame_mask": frame_mask,
            "frame_lengths": frame_lengths,
            "note_lf0_frames": note_lf0,
            "pred_ratio": ratio,
            "pred_lf0_hat": lf0_hat,
            "pred_log_energy": log_energy_hat,
            "prior_mean": m_p,
            "prior_logstd": logs_p * frame_mask,
        }


def gather_rows(x, index):
    """x: (B, W, D); index: (B, N) with -1 for zero rows -> (B, N, D)."""
    B, W, D = x.shape
    padded = torch.cat([x, x.new_zeros(B, 1, D)], dim=1)
    idx = torch.where(index >= 0, index, torch.full_like(index, W))
    return torch.gather(padded, 1, idx[..., None].expand(-1, -1, D))


def predicted_frames(dur_ratio, note_frames, mask):
    """Phoneme frame counts from note-normalised ratios: round half up, min 1."""
    frames = torch.floor(dur_ratio.detach() * note_frames.to(dur_ratio.dtype) + 0.5).clamp(min=1).long()
    return frames * mask.long()


def predict_pitch(ratio, note_lf0_frames):
    """LF0-hat = ratio * note LF0, elementwise."""
    if ratio.shape != note_lf0_frames.shape:
        raise ShapeMismatch(f"{tuple(ratio.shape)} vs {tuple(note_lf0_frames.shape)}")
    return ratio * note_lf0_frames


# ----------------------------------------------------------------- posterior


class PosteriorEncoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.pre = nn.Conv1d(cfg.spec_channels, cfg.posterior_channels, 1)
        self.wn = WN(cfg.posterior_channels, 5, 1, cfg.posterior_layers)
        self.proj = nn.Conv1d(cfg.posterior_channels, 2 * cfg.latent_dim, 1)

    def forward(self, spec, lengths, deterministic=False, generator=None):
        if spec.dim() != 3 or spec.size(1) != self.cfg.spec_channels or spec.size(2) < 1:
            raise ShapeMismatch(f"expected (B, {self.cfg.spec_channels}, T>=1), got {tuple(spec.shape)}")
        mask = sequence_mask(lengths, spec.size(2)).unsqueeze(1).to(spec.dtype)
        h = self.wn(self.pre(spec) * mask, mask)
        m, logs = (self.proj(h) * mask).split(self.cfg.latent_dim, dim=1)
        if deterministic:
            z = m
        else:
            noise = torch.randn(m.shape, generator=generator, dtype=m.dtype, device=m.device)
            z = m + noise * torch.exp(logs)
        return z * mask, m, logs, mask


def gaussian_kl_standard(m, logs):
    """Closed-form KL(N(m, exp(logs)^2) || N(0, 1)), elementwise."""
    return 0.5 * (torch.exp(2 * logs) + m**2 - 1.0) - logs


# ---------------------------------------------------------------------- flow


class AffineCoupling(nn.Module):
    def __init__(self, channels, hidden, n_layers, cond_channels):
        super().__init__()
        self.half = channels // 2
        self.pre = nn.Conv1d(self.half, hidden, 1)
        self.wn = WN(hidden, 5, 1, n_layers, cond_channels=cond_channels)
        self.post = nn.Conv1d(hidden, 2 * (channels - self.half), 1)
        nn.init.zeros_(self.post.weight)
        nn.init.zeros_(self.post.bias)

    def forward(self, x, mask, cond=None, reverse=False):
        x0, x1 = x[:, : self.half], x[:, self.half :]
        h = self.wn(self.pre(x0) * mask, mask, cond)
        m, logs = (self.post(h) * mask).chunk(2, dim=1)
        logs = torch.tanh(logs)
        if not reverse:
            x1 = (m + x1 * torch.exp(logs)) * mask
            return torch.cat([x0, x1], 1), torch.sum(logs * mask, dim=(1, 2))
        x1 = ((x1 - m) * torch.exp(-logs)) * mask
        return torch.cat([x0, x1], 1), None


class Flow(nn.Module):
    """Stack of affine couplings with channel flips in between."""

    def __init__(self, cfg):
        super().__init__()
        self.couplings = nn.ModuleList(
            AffineCoupling(cfg.latent_dim, cfg.flow_channels, cfg.flow_wn_layers, cfg.hidden_dim) for _ in range(cfg.flow_couplings)
        )

    def forward(self, z, mask, cond=None, reverse=False):
        if z.dim() != 3 or mask.size(-1) != z.size(-1):
            raise ShapeMismatch(f"latent {tuple(z.shape)} vs mask {tuple(mask.shape)}")
        if not reverse:
            logdet = z.new_zeros(z.size(0))
            for c in self.couplings:
                z, ld = c(z, mask, cond)
                logdet = logdet + ld
                z = torch.flip(z, [1])
            return z, logdet
        for c in reversed(self.couplings):
            z = torch.flip(z, [1])
            z, _ = c(z, mask, cond, reverse=True)
        return z, None


# ------------------------------------------------------------------- decoder


class ResBlock(nn.Module):
    def __init__(self, channels, kernel_size, dilations):
        super().__init__()
        self.convs1 = nn.ModuleList(nn.Conv1d(channels, channels, kernel_size, dilation=d, padding=get_padding(kernel_size, d)) for d in dilations)
        self.convs2 = nn.ModuleList(nn.Conv1d(channels, channels, kernel_size, padding=get_padding(kernel_size)) for _ in dilations)

    def forward(self, x):
        for c1, c2 in zip(self.convs1, self.convs2):
            x = x + c2(leaky(c1(leaky(x))))
        return x


def harmonic_source(f0, hop, sample_rate, n_harmonics, generator=None, deterministic=False):
    """Sum-of-harmonics excitation at the sample rate from frame-level F0 (Hz).

    Unvoiced frames (f0 == 0) get low-level noise. f0: (B, T) -> (B, 1, T*hop).
    """
    f0_up = torch.repeat_interleave(f0, hop, dim=1)
    voiced = (f0_up > 0).to(f0.dtype)
    B = f0.size(0)
    if deterministic:
        phase0 = f0.new_zeros(B, 1)
    else:
        phase0 = 2 * math.pi * torch.rand(B, 1, generator=generator, dtype=f0.dtype, device=f0.device)
    phase = torch.cumsum(2 * math.pi * f0_up / sample_rate, dim=1) + phase0
    harmonics = torch.arange(1, n_harmonics + 1, dtype=f0.dtype, device=f0.device)
    nyquist_ok = (f0_up[..., None] * harmonics < sample_rate / 2).to(f0.dtype)
    tone = torch.sum(torch.sin(phase[..., None] * harmonics) * nyquist_ok / harmonics, dim=-1) * 0.1
    src = tone * voiced
    if not deterministic:
        noise = torch.randn(f0_up.shape, generator=generator, dtype=f0.dtype, device=f0.device)
        src = src + (1 - voiced) * 0.003 * noise
    return src[:, None]


class Decoder(nn.Module):
    """HiFi-GAN style upsampler with an optional harmonic excitation branch."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        ch = cfg.decoder_channels
        self.pre = nn.Conv1d(cfg.latent_dim, ch, 7, padding=3)
        self.ups = nn.ModuleList()
        self.source_convs = nn.ModuleList()
        self.resblocks = nn.ModuleList()
        factors = cfg.decoder_upsample_factors
        for i, (u, k) in enumerate(zip(factors, cfg.decoder_upsample_kernels)):
            c_in, c_out = ch // 2**i, ch // 2 ** (i + 1)
            self.ups.append(nn.ConvTranspose1d(c_in, c_out, k, u, padding=(k - u) // 2))
            if cfg.source_excitation:
                stride = math.prod(factors[i + 1 :])
                if stride > 1:
                    self.source_convs.append(nn.Conv1d(1, c_out, 2 * stride, stride, padding=stride // 2))
                else:
                    self.source_convs.append(nn.Conv1d(1, c_out, 1))
            self.resblocks.append(nn.ModuleList(ResBlock(c_out, kk, dd) for kk, dd in zip(cfg.resblock_kernels, cfg.resblock_dilations)))
        self.post = nn.Conv1d(ch // 2 ** len(factors), 1, 7, padding=3, bias=True)

    def forward(self, z, f0=None, generator=None, deterministic=False):
        """z: (B, latent, K) -> (B, 1, K * hop)."""
        if z.dim() != 3 or z.size(1) != self.cfg.latent_dim:
            raise ShapeMismatch(f"expected (B, {self.cfg.latent_dim}, K), got {tuple(z.shape)}")
        K = z.size(2)
        src = None
        if self.cfg.source_excitation and f0 is not None:
            src = harmonic_source(f0.to(z.dtype), self.cfg.hop_length, self.cfg.sample_rate, self.cfg.n_harmonics, generator, deterministic)
        x = self.pre(z)
        n = K
        for i, up in enumerate(self.ups):
            n *= self.cfg.decoder_upsample_factors[i]
            x = up(leaky(x))[..., :n]
            if src is not None:
                x = x + self.source_convs[i](src)[..., :n]
            x = sum(rb(x) for rb in self.resblocks[i]) / len(self.resblocks[i])
        return torch.tanh(self.post(leaky(x)))


# ------------------------------------------------------------- discriminator


class PeriodDiscriminator(nn.Module):
    def __init__(self, period, ch=32):
        super().__init__()
        self.period = period
        chans = [1, ch // 2, ch, ch * 2]
        self.convs = nn.ModuleList(nn.Conv2d(a, b, (5, 1), (3, 1), padding=(2, 0)) for a, b in zip(chans[:-1], chans[1:]))
        self.post = nn.Conv2d(chans[-1], 1, (3, 1), padding=(1, 0))

    def forward(self, x):
        b, c, t = x.shape
        if t % self.period:
            pad = self.period - t % self.period
            x = F.pad(x, (0, pad), "reflect")
            t += pad
        x = x.view(b, c, t // self.period, self.period)
        fmaps = []
        for conv in self.convs:
            x = leaky(conv(x))
            fmaps.append(x)
        x = self.post(x)
        fmaps.append(x)
        return torch.flatten(x, 1), fmaps


class ScaleDiscriminator(nn.Module):
    def __init__(self, ch=32, pool=1):
        super().__init__()
        self.pool = nn.AvgPool1d(pool * 2, pool, padding=pool) if pool > 1 else nn.Identity()
        spec = [(1, ch // 2, 15, 1, 1), (ch // 2, ch, 41, 4, 4), (ch, ch * 2, 41, 4, 8), (ch * 2, ch * 2, 5, 1, 1)]
        self.convs = nn.ModuleList(nn.Conv1d(a, b, k, s, groups=g, padding=k // 2) for a, b, k, s, g in spec)
        self.post = nn.Conv1d(ch * 2, 1, 3, padding=1)

    def forward(self, x):
        x = self.pool(x)
        fmaps = []
        for conv in self.convs:
            x = leaky(conv(x))
            fmaps.append(x)
        x = self.post(x)
        fmaps.append(x)
        return torch.flatten(x, 1), fmaps


class Discriminator(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        subs = [ScaleDiscriminator(cfg.disc_channels, 2**i) for i in range(cfg.disc_scales)]
        subs += [PeriodDiscriminator(p, cfg.disc_channels) for p in cfg.disc_periods]
        self.subs = nn.ModuleList(subs)

    def forward(self, y):
        """Returns (scores, feature maps), one entry per sub-discriminator."""
        scores, fmaps = [], []
        for d in self.subs:
            s, f = d(y)
            scores.append(s)
            fmaps.append(f)
        return scores, fmaps


# --------------------------------------------------------------------- model


class SingingVoiceModel(nn.Module):
    """Generator side: prior encoder, posterior encoder, flow and decoder."""

    def __init__(self, cfg, sem_cfg, pitch_q, energy_q):
        super().__init__()
        self.cfg = cfg
        self.sem_cfg = sem_cfg
        self.prior = PriorEncoder(cfg, sem_cfg, pitch_q, energy_q)
        self.posterior = PosteriorEncoder(cfg)
        self.flow = Flow(cfg)
        self.decoder = Decoder(cfg)

    def forward(self, batch, segment_frames, teacher_pitch=True, teacher_energy=True, deterministic=False, segment_starts=None, generator=None):
        frame_lengths = batch["frame_lengths"]
        prior = self.prior(
            batch,
            durations=batch["phone_frames"],
            gt_lf0=batch["lf0"] if teacher_pitch else None,
            gt_log_energy=batch["log_energy"] if teacher_energy else None,
        )
        if not torch.equal(prior["frame_lengths"], frame_lengths):
            raise ShapeMismatch("phoneme frame counts do not sum to the spectrogram length")
        z, m_q, logs_q, fmask = self.posterior(batch["spec"], frame_lengths, deterministic, generator)
        z_p, logdet = self.flow(z, fmask, prior["adapted_hidden"])

        K = min(segment_frames, int(frame_lengths.min()))
        if segment_starts is None:
            hi = (frame_lengths - K + 1).to(torch.float64)
            segment_starts = torch.floor(torch.rand(len(hi), generator=generator, dtype=torch.float64) * hi).long()
        z_slice = slice_segments(z, segment_starts, K)
        f0 = torch.exp(batch["lf0"]) * batch["voicing"]
        f0_slice = slice_segments(f0[:, None], segment_starts, K)[:, 0]
        y_hat = self.decoder(z_slice, f0_slice, generator, deterministic)
        return {
            **prior,
            "z": z,
            "z_p": z_p,
            "logdet": logdet,
            "post_mean": m_q,
            "post_logstd": logs_q,
            "y_hat": y_hat,
            "segment_starts": segment_starts,
            "segment_frames": K,
        }

    @torch.no_grad()
    def infer(self, batch, noise_scale=0.667, generator=None, durations=None, deterministic=False):
        """Full prior-path synthesis. Returns waveform (B, 1, T*hop) and prior outputs."""
        prior = self.prior(batch, durations=durations)
        mask = prior["frame_mask"]
        m_p, logs_p = prior["prior_mean"], prior["prior_logstd"]
        if deterministic or noise_scale == 0:
            z_p = m_p
        else:
            z_p = m_p + torch.randn(m_p.shape, generator=generator, dtype=m_p.dtype) * torch.exp(logs_p) * noise_scale
        z, _ = self.flow(z_p * mask, mask, prior["adapted_hidden"], reverse=True)
        voiced = (prior["note_lf0_frames"] > 0).to(m_p.dtype)
        f0 = torch.exp(prior["pred_lf0_hat"]) * voiced * mask[:, 0]
        y = self.decoder(z * mask, f0, generator, deterministic=True)
        return y, prior


def slice_segments(x, starts, size):
    return torch.stack([x[b, :, int(s) : int(s) + size] for b, s in enumerate(starts)])


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())
