"""Losses, optimisation loop and checkpoints."""
import dataclasses
import json
import logging
import math
import os
import random
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .acoustic import Discriminator, SingingVoiceModel
from .config import RunConfig
from .data import PreparedData, bucket_batches, collate
from .dsp import MEL_FLOOR, mel_filterbank
from .errors import CheckpointWriteFailure, ConfigHashMismatch, DataError, NonFiniteLoss, ShapeMismatch

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------- loss terms


def _check_same(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{tuple(a.shape)} vs {tuple(b.shape)}")


def pitch_loss(lf0_wav, lf0_hat, voicing_mask):
    """L2 norm of the masked LF0 residual divided by the voiced-frame count.

    Works on 1-D sequences or (B, T) batches (one value per row).
    """
    lf0_wav, lf0_hat, voicing_mask = map(torch.as_tensor, (lf0_wav, lf0_hat, voicing_mask))
    _check_same(lf0_wav, lf0_hat)
    _check_same(lf0_wav, voicing_mask)
    mask = voicing_mask.to(lf0_hat.dtype)
    resid = (lf0_wav - lf0_hat) * mask
    n = mask.sum(-1)
    norm = _safe_norm(resid)
    return torch.where(n > 0, norm / n.clamp(min=1), torch.zeros_like(norm))


def energy_loss(E, E_hat, mask=None):
    """Per-frame RMS of the log-energy residual: ||E - E_hat||_2 / sqrt(T)."""
    E, E_hat = torch.as_tensor(E), torch.as_tensor(E_hat)
    _check_same(E, E_hat)
    mask = torch.ones_like(E_hat) if mask is None else torch.as_tensor(mask).to(E_hat.dtype)
    n = mask.sum(-1)
    return _safe_norm((E - E_hat) * mask) / torch.sqrt(n.clamp(min=1))


def _safe_norm(x):
    sq = torch.sum(x * x, dim=-1)
    # gradient of sqrt at 0 is infinite; treat an exact zero residual as a flat point
    # (sq * 0 rather than zeros keeps a NaN residual visible)
    return torch.where(sq > 0, torch.sqrt(torch.where(sq > 0, sq, torch.ones_like(sq))), sq * 0)


def duration_loss(pred_ratio, target_ratio, mask):
    mask = mask.to(pred_ratio.dtype)
    return torch.sum((pred_ratio - target_ratio) ** 2 * mask, -1) / mask.sum(-1).clamp(min=1)


def kl_loss(z_p, logs_q, m_p, logs_p, logdet, mask):
    """Monte-Carlo KL(q(z|x) || p(z|c, s)) through the flow, per utterance per frame."""
    kl = logs_p - logs_q - 0.5 + 0.5 * (z_p - m_p) ** 2 * torch.exp(-2.0 * logs_p)
    frames = mask.sum(dim=(1, 2)).clamp(min=1)
    return (torch.sum(kl * mask, dim=(1, 2)) - logdet) / frames


def mel_loss(mel_hat, mel):
    """Mean absolute log-mel error per utterance; inputs (B, frames, bands)."""
    _check_same(mel_hat, mel)
    return torch.mean(torch.abs(mel_hat - mel), dim=(1, 2))


def discriminator_loss(real_scores, fake_scores):
    return sum(torch.mean((1 - r) ** 2) + torch.mean(g**2) for r, g in zip(real_scores, fake_scores))


def generator_adv_loss(fake_scores):
    return sum(torch.mean((1 - g) ** 2) for g in fake_scores)


def feature_matching_loss(real_fmaps, fake_fmaps):
    return sum(torch.mean(torch.abs(r.detach() - g)) for fr, fg in zip(real_fmaps, fake_fmaps) for r, g in zip(fr, fg))


class MelTransform(nn.Module):
    """Differentiable log-mel matching :func:`expressive_svs.dsp.mel_spectrogram`."""

    def __init__(self, stft_cfg, n_mels=80):
        super().__init__()
        self.cfg = stft_cfg
        self.register_buffer("window", torch.hann_window(stft_cfg.window_length, periodic=True, dtype=torch.float64))
        fb = mel_filterbank(stft_cfg.sample_rate, stft_cfg.fft_size, n_mels)
        self.register_buffer("fb", torch.as_tensor(fb))

    def forward(self, y):
        """y: (B, S) or (B, 1, S) -> (B, frames, n_mels)."""
        if y.dim() == 3:
            y = y[:, 0]
        c = self.cfg
        if y.size(-1) < c.window_length:
            y = nn.functional.pad(y, (0, c.window_length - y.size(-1)))
        spec = torch.stft(y, c.fft_size, c.hop_length, c.window_length, self.window.to(y.dtype), center=False, return_complex=True)
        mag = torch.sqrt(spec.real**2 + spec.imag**2 + 1e-12)
        mel = torch.matmul(self.fb.to(y.dtype), mag)
        return torch.log(torch.clamp(mel, min=MEL_FLOOR)).transpose(1, 2)


def real_segments(wav, starts, frames, stft_cfg):
    """Waveform samples aligned with decoder output for frame windows."""
    hl = stft_cfg.hop_length
    offset = (stft_cfg.window_length - hl) // 2
    return torch.stack([wav[b, offset + int(s) * hl : offset + (int(s) + frames) * hl] for b, s in enumerate(starts)])[:, None]


def generator_terms(batch, out, mel_fn, stft_cfg):
    """Per-utterance reconstruction/prior terms, each a (B,) tensor."""
    phone_mask = out["phone_mask"][:, 0]
    fmask = out["frame_mask"]
    target_ratio = batch["phone_frames"].to(out["dur_ratio"].dtype) / batch["note_frames"].clamp(min=1).to(out["dur_ratio"].dtype)
    pitch_mask = fmask[:, 0] * batch["voicing"].to(fmask.dtype) * (out["note_lf0_frames"] > 0).to(fmask.dtype)
    y = real_segments(batch["wav"].to(out["y_hat"].dtype), out["segment_starts"], out["segment_frames"], stft_cfg)
    terms = {
        "l_duration": duration_loss(out["dur_ratio"], target_ratio, phone_mask),
        "l_pitch": pitch_loss(batch["lf0"].to(fmask.dtype), out["pred_lf0_hat"], pitch_mask),
        "l_kl": kl_loss(out["z_p"], out["post_logstd"], out["prior_mean"], out["prior_logstd"], out["logdet"], fmask),
        "l_mel": mel_loss(mel_fn(out["y_hat"]), mel_fn(y)),
    }
    if out["pred_log_energy"] is not None:
        terms["l_energy"] = energy_loss(batch["log_energy"].to(fmask.dtype), out["pred_log_energy"], fmask[:, 0])
    else:
        terms["l_energy"] = torch.zeros_like(terms["l_mel"])
    return terms, y


@dataclass
class LossReport:
    l_pitch: float = 0.0
    l_energy: float = 0.0
    l_duration: float = 0.0
    l_kl: float = 0.0
    l_mel: float = 0.0
    l_adv_g: float = 0.0
    l_adv_d: float = 0.0
    l_fm: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0
    step: int = 0
    lr: float = 0.0

    def to_dict(self):
        return dataclasses.asdict(self)


GENERATOR_WEIGHTS = {"l_mel": "mel", "l_kl": "kl", "l_duration": "duration", "l_pitch": "pitch", "l_energy": "energy", "l_fm": "fm", "l_adv_g": "adv"}


def weighted_total(terms, weights):
    """Weighted sum of scalar generator terms."""
    return sum(getattr(weights, GENERATOR_WEIGHTS[k]) * v for k, v in terms.items() if k in GENERATOR_WEIGHTS)


def composite_losses(batch, out, disc_out, weights, mel_fn, stft_cfg, step=0, d_loss=None):
    """All generator terms, their weighted total, and a serialisable report.

    ``disc_out`` is ``(real_scores, fake_scores, real_fmaps, fake_fmaps)``
    evaluated on the current generator output. Returns
    ``(report, total_g, per_utterance_terms)``.
    """
    per_utt, _ = generator_terms(batch, out, mel_fn, stft_cfg)
    terms = {k: v.mean() for k, v in per_utt.items()}
    real_scores, fake_scores, real_fmaps, fake_fmaps = disc_out
    terms["l_adv_g"] = generator_adv_loss(fake_scores)
    terms["l_fm"] = feature_matching_loss(real_fmaps, fake_fmaps)
    total_g = weighted_total(terms, weights)
    if d_loss is None:
        d_loss = discriminator_loss(real_scores, [f.detach() for f in fake_scores])
    values = {k: float(v.detach()) for k, v in terms.items()}
    d_loss = float(d_loss.detach()) if torch.is_tensor(d_loss) else float(d_loss)
    values.update(total_g=float(total_g.detach()), l_adv_d=d_loss, total_d=d_loss)
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        raise NonFiniteLoss(f"non-finite loss terms {bad} at step {step}", batch.get("ids", ()))
    return LossReport(step=step, **values), total_g, per_utt


# ------------------------------------------------------------- checkpoints


def save_checkpoint(path, cfg, model, disc=None, opt_g=None, opt_d=None, step=0, epoch=0, vocab=None, extra=None):
    path = Path(path)
    state = {
        "model": model.state_dict(),
        "disc": disc.state_dict() if disc is not None else None,
        "opt_g": opt_g.state_dict() if opt_g is not None else None,
        "opt_d": opt_d.state_dict() if opt_d is not None else None,
        "config": cfg.to_dict(),
        "config_hash": cfg.model_hash(),
        "step": step,
        "epoch": epoch,
        "vocab": vocab,
        **(extra or {}),
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        os.close(fd)
        torch.save(state, tmp)
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointWriteFailure(f"cannot write {path}: {e}") from e
    return path


def load_checkpoint(path, expected=None):
    """Load a checkpoint; if ``expected`` (a RunConfig) is given its model hash must match."""
    try:
        state = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    cfg = RunConfig.from_dict(state["config"])
    if cfg.model_hash() != state["config_hash"]:
        raise ConfigHashMismatch(f"{path}: stored config does not match its hash")
    if expected is not None and expected.model_hash() != state["config_hash"]:
        raise ConfigHashMismatch(f"{path}: checkpoint was trained with a different model config")
    model = build_model(cfg)
    model.load_state_dict(state["model"])
    model.eval()
    return model, cfg, state


def build_model(cfg):
    return SingingVoiceModel(cfg.model, cfg.semantic, cfg.pitch_quantizer, cfg.energy_quantizer)


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


# -------------------------------------------------------------------- loop


class Trainer:
    """Owns the model, discriminator and optimisers for one run."""

    def __init__(self, cfg, data, out_dir, train_ids=None):
        self.cfg = data.apply_to(cfg)
        self.data = data
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        seed_everything(cfg.train.seed)
        self.model = build_model(cfg)
        self.disc = Discriminator(cfg.model)
        o = cfg.optimizer
        adam = dict(lr=o.lr0, betas=(o.beta1, o.beta2), eps=o.epsilon)
        self.opt_g = torch.optim.AdamW(self.model.parameters(), **adam)
        self.opt_d = torch.optim.AdamW(self.disc.parameters(), **adam)
        self.mel_fn = MelTransform(cfg.stft, cfg.n_mels).float()
        self.train_ids = list(train_ids if train_ids is not None else data.split["train"])
        self.items = data.items(self.train_ids)
        self.lengths = [len(it["energy"]) for it in self.items]
        self.generator = torch.Generator().manual_seed(cfg.train.seed)
        self.step = 0
        self.epoch = 0
        self.epoch_pos = 0  # batches already consumed in the current epoch
        self.cfg.save(self.out_dir / "config.json")

    @property
    def steps_per_epoch(self):
        return math.ceil(len(self.items) / self.cfg.train.batch_size)

    def lr(self):
        unit = self.epoch if self.cfg.optimizer.decay_unit == "epoch" else self.step
        return self.cfg.optimizer.lr_at(unit)

    def _set_lr(self):
        lr = self.lr()
        for opt in (self.opt_g, self.opt_d):
            for g in opt.param_groups:
                g["lr"] = lr

    def _epoch_batches(self):
        rng = random.Random(self.cfg.train.seed * 100003 + self.epoch)
        return bucket_batches(self.lengths, self.cfg.train.batch_size, rng)

    def train_step(self, batch):
        cfg = self.cfg
        self.model.train()
        self.disc.train()
        teacher = self.step < cfg.train.teacher_forcing_steps
        out = self.model(batch, cfg.train.segment_frames, teacher_pitch=teacher, teacher_energy=teacher, generator=self.generator)
        y = real_segments(batch["wav"], out["segment_starts"], out["segment_frames"], cfg.stft)

        real_scores, _ = self.disc(y)
        fake_scores, _ = self.disc(out["y_hat"].detach())
        l_d = discriminator_loss(real_scores, fake_scores)
        if not torch.isfinite(l_d):
            raise NonFiniteLoss(f"non-finite discriminator loss at step {self.step}", batch["ids"])
        self.opt_d.zero_grad()
        l_d.backward()
        self.opt_d.step()

        real_scores, real_fmaps = self.disc(y)
        fake_scores, fake_fmaps = self.disc(out["y_hat"])
        report, total_g, _ = composite_losses(
            batch, out, (real_scores, fake_scores, real_fmaps, fake_fmaps), cfg.loss_weights, self.mel_fn, cfg.stft, self.step, float(l_d.detach())
        )
        self.opt_g.zero_grad()
        total_g.backward()
        if cfg.train.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.train.grad_clip)
        self.opt_g.step()
        report.lr = self.opt_g.param_groups[0]["lr"]
        return report

    def run(self, steps, log_path=None, checkpoint_interval=None):
        """Train until ``steps`` total steps; returns the list of LossReports."""
        log_path = Path(log_path) if log_path else self.out_dir / "loss_log.jsonl"
        interval = checkpoint_interval or self.cfg.train.checkpoint_interval
        reports = []
        with open(log_path, "a", encoding="utf-8") as log:
            while self.step < steps:
                for idx in self._epoch_batches()[self.epoch_pos :]:
                    if self.step >= steps:
                        break
                    self.epoch_pos += 1
                    self._set_lr()
                    batch = collate([self.items[i] for i in idx], self.cfg.stft)
                    try:
                        report = self.train_step(batch)
                    except NonFiniteLoss as e:
                        logger.warning("skipping step %d: %s (batch %s)", self.step, e, e.batch_ids)
                        self.step += 1
                        continue
                    log.write(json.dumps(report.to_dict()) + "\n")
                    reports.append(report)
                    self.step += 1
                    if self.step % interval == 0:
                        self.save(self.out_dir / f"ckpt_{self.step:07d}.pt")
                else:
                    self.epoch += 1
                    self.epoch_pos = 0
                    continue
                break
        self.save(self.out_dir / "ckpt_last.pt")
        return reports

    def resume(self, path):
        """Restore model, discriminator, optimisers and counters from a checkpoint."""
        _, _, state = load_checkpoint(path, self.cfg)
        self.model.load_state_dict(state["model"])
        self.disc.load_state_dict(state["disc"])
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        self.step, self.epoch = state["step"], state["epoch"]
        self.epoch_pos = state.get("epoch_pos", 0)
        if state.get("rng") is not None:
            self.generator.set_state(state["rng"])
        if state.get("torch_rng") is not None:
            torch.set_rng_state(state["torch_rng"])
        return self

    def save(self, path):
        return save_checkpoint(
            path, self.cfg, self.model, self.disc, self.opt_g, self.opt_d, self.step, self.epoch, self.data.vocab.to_list(),
            extra={"epoch_pos": self.epoch_pos, "rng": self.generator.get_state(), "torch_rng": torch.get_rng_state()},
        )


def train(data_dir, cfg, out_dir, steps=None, train_ids=None, resume=None):
    """Train from a prepared data directory. Returns the Trainer."""
    data = PreparedData.load(data_dir)
    trainer = Trainer(cfg, data, out_dir, train_ids)
    if resume:
        trainer.resume(resume)
    trainer.run(steps if steps is not None else cfg.train.steps)
    return trainer
