import dataclasses
import json

import pytest
import torch
from conftest import tiny_config, tiny_setup

from expressive_svs.config import LossWeights, OptimizerSchedule, RunConfig
from expressive_svs.data import collate
from expressive_svs.errors import ConfigHashMismatch, NonFiniteLoss, ShapeMismatch
from expressive_svs.training import (
    LossReport,
    MelTransform,
    Trainer,
    composite_losses,
    energy_loss,
    generator_terms,
    load_checkpoint,
    pitch_loss,
    weighted_total,
)


def test_pitch_loss_examples():
    x = torch.tensor([5.0, 6.0])
    assert pitch_loss(x, x, torch.ones(2)).item() == 0
    assert pitch_loss(x, x + 1, torch.zeros(2)).item() == 0
    assert pitch_loss(torch.tensor([3.0, 4.0]), torch.zeros(2), torch.ones(2)).item() == pytest.approx(2.5)
    with pytest.raises(ShapeMismatch):
        pitch_loss(torch.ones(2), torch.ones(3), torch.ones(2))


def test_energy_loss_examples():
    e = torch.randn(50, dtype=torch.float64)
    assert energy_loss(e, e).item() == 0
    assert energy_loss(e, e + 0.37).item() == pytest.approx(0.37)
    assert energy_loss(e, e - 1.5).item() == pytest.approx(1.5)
    assert energy_loss(torch.tensor([1.0]), torch.tensor([3.0])).item() == pytest.approx(2.0)
    with pytest.raises(ShapeMismatch):
        energy_loss(torch.ones(2), torch.ones(3))


def test_lr_schedule_closed_form():
    s = OptimizerSchedule()
    assert s.lr_at(2) == pytest.approx(1e-4 * 0.999875**2, rel=1e-15)
    for bad in (dict(decay_per_epoch=0.0), dict(decay_per_epoch=1.1), dict(lr0=0.0), dict(decay_unit="hour")):
        with pytest.raises(ValueError):
            OptimizerSchedule(**bad)


# ----------------------------------------------------------- gradient checks


def _forward(model, batch, cfg, segment=4):
    out = model(batch, segment, teacher_pitch=True, teacher_energy=True, deterministic=True, segment_starts=torch.zeros(len(batch["ids"]), dtype=torch.long))
    mel_fn = MelTransform(cfg.stft, cfg.n_mels).double()
    terms, _ = generator_terms(batch, out, mel_fn, cfg.stft)
    return terms


PARAM_FOR = {
    "l_pitch": "prior.pitch_predictor.net.convs.0.weight",
    "l_energy": "prior.energy_predictor.net.proj.weight",
    "l_duration": "prior.duration_predictor.convs.0.weight",
    "l_kl": "prior.frame_prior.proj.weight",
    "l_mel": "decoder.pre.weight",
}


@pytest.fixture(scope="module")
def dim8(prepared):
    cfg, model, batch = tiny_setup(prepared, dtype=torch.float64, hidden_dim=8, filter_dim=16, latent_dim=4, flow_channels=8, posterior_channels=8, decoder_channels=8)
    model.eval()
    # give the zero-initialised ratio head something to differentiate
    with torch.no_grad():
        model.prior.pitch_predictor.net.proj.weight.normal_(0, 0.1)
    return cfg, model, batch


@pytest.mark.parametrize("term", sorted(PARAM_FOR))
def test_loss_gradients_central_difference(dim8, term):
    cfg, model, batch = dim8
    param = dict(model.named_parameters())[PARAM_FOR[term]]
    model.zero_grad()
    _forward(model, batch, cfg)[term].sum().backward()
    grad = param.grad.clone()
    g = torch.Generator().manual_seed(1)
    idx = torch.randperm(param.numel(), generator=g)[:4]
    eps = 1e-6
    flat = param.data.view(-1)
    for i in idx:
        old = flat[i].item()
        with torch.no_grad():
            flat[i] = old + eps
            up = _forward(model, batch, cfg)[term].sum().item()
            flat[i] = old - eps
            down = _forward(model, batch, cfg)[term].sum().item()
            flat[i] = old
        num = (up - down) / (2 * eps)
        ana = grad.view(-1)[i].item()
        scale = max(abs(num), abs(ana), 1e-8)
        assert abs(num - ana) / scale < 1e-3, (term, num, ana)


def test_total_gradient_central_difference(dim8):
    cfg, model, batch = dim8
    from expressive_svs.acoustic import Discriminator

    torch.manual_seed(0)
    disc = Discriminator(cfg.model).double().eval()
    mel_fn = MelTransform(cfg.stft, cfg.n_mels).double()
    starts = torch.zeros(2, dtype=torch.long)

    def total():
        out = model(batch, 4, deterministic=True, segment_starts=starts)
        _, y = generator_terms(batch, out, mel_fn, cfg.stft)
        rs, rf = disc(y)
        fs, ff = disc(out["y_hat"])
        return composite_losses(batch, out, (rs, fs, rf, ff), cfg.loss_weights, mel_fn, cfg.stft)[1]

    model.zero_grad()
    total().backward()
    named = [(n, p) for n, p in model.named_parameters() if p.grad is not None and p.grad.abs().sum() > 0]
    params = [p for _, p in named]
    g = torch.Generator().manual_seed(5)
    for k in torch.randperm(len(params), generator=g)[:5]:
        p = params[k]
        i = int(torch.argmax(p.grad.abs()))
        flat = p.data.view(-1)
        old = flat[i].item()
        with torch.no_grad():
            flat[i] = old + 1e-6
            up = total().item()
            flat[i] = old - 1e-6
            down = total().item()
            flat[i] = old
        num = (up - down) / 2e-6
        ana = p.grad.view(-1)[i].item()
        assert abs(num - ana) / max(abs(num), abs(ana), 1e-8) < 1e-2, (named[k][0], i, num, ana)


# ----------------------------------------------------------- composite loss


def _report_for(model, batch, cfg, weights):
    from expressive_svs.acoustic import Discriminator

    torch.manual_seed(0)
    dtype = next(model.parameters()).dtype
    disc = Discriminator(cfg.model).to(dtype)
    mel_fn = MelTransform(cfg.stft, cfg.n_mels).to(dtype)
    out = model(batch, 4, deterministic=True, segment_starts=torch.zeros(len(batch["ids"]), dtype=torch.long))
    _, y = generator_terms(batch, out, mel_fn, cfg.stft)
    rs, rf = disc(y)
    fs, ff = disc(out["y_hat"])
    return composite_losses(batch, out, (rs, fs, rf, ff), weights, mel_fn, cfg.stft)


def test_total_is_weighted_sum(prepared):
    cfg, model, batch = tiny_setup(prepared, dtype=torch.float64)
    model.eval()
    report, total, _ = _report_for(model, batch, cfg, cfg.loss_weights)
    terms = {k: getattr(report, k) for k in ("l_mel", "l_kl", "l_duration", "l_pitch", "l_energy", "l_fm", "l_adv_g")}
    assert report.total_g == pytest.approx(weighted_total(terms, cfg.loss_weights), rel=1e-5)
    doubled = dataclasses.replace(cfg.loss_weights, pitch=2 * cfg.loss_weights.pitch)
    report2, _, _ = _report_for(model, batch, cfg, doubled)
    assert report2.total_g - report.total_g == pytest.approx(report.l_pitch * cfg.loss_weights.pitch, rel=1e-9)
    json.dumps(report.to_dict())


def test_equilibrium_decomposition():
    # zero residuals and discriminator scores at the LSGAN equilibrium 0.5
    w = LossWeights()
    terms = {k: torch.tensor(0.0) for k in ("l_mel", "l_kl", "l_duration", "l_pitch", "l_energy", "l_fm")}
    terms["l_adv_g"] = torch.tensor((1 - 0.5) ** 2 * 2)
    assert weighted_total(terms, w).item() == pytest.approx(w.adv * 0.5)


def test_non_finite_raises(prepared):
    cfg, model, batch = tiny_setup(prepared)
    batch = dict(batch)
    batch["lf0"] = batch["lf0"].clone()
    batch["lf0"][0, 5] = float("nan")
    batch["voicing"] = torch.ones_like(batch["voicing"])
    with pytest.raises(NonFiniteLoss) as info:
        _report_for(model, batch, cfg, cfg.loss_weights)
    assert list(info.value.batch_ids) == batch["ids"]


def test_padding_invariance(prepared):
    cfg, model, _ = tiny_setup(prepared)
    model.eval()
    items = prepared.items(prepared.split["train"][:2])
    items.sort(key=lambda it: len(it["energy"]))
    single = collate(items[:1], cfg.stft)
    pair = collate(items, cfg.stft)
    assert pair["spec"].shape[-1] > single["spec"].shape[-1]
    mel_fn = MelTransform(cfg.stft, cfg.n_mels)
    with torch.no_grad():
        a = model(single, 4, deterministic=True, segment_starts=torch.tensor([3]))
        b = model(pair, 4, deterministic=True, segment_starts=torch.tensor([3, 0]))
        ta, _ = generator_terms(single, a, mel_fn, cfg.stft)
        tb, _ = generator_terms(pair, b, mel_fn, cfg.stft)
    for k in ta:
        assert ta[k][0].item() == pytest.approx(tb[k][0].item(), rel=1e-5, abs=1e-5), k


# ------------------------------------------------------------------- loop


def _trainer(prepared, out_dir, **train):
    cfg = tiny_config()
    cfg.train = dataclasses.replace(cfg.train, **train)
    return Trainer(cfg, prepared, out_dir, prepared.split["train"][:4])


def test_two_step_determinism(prepared, tmp_path):
    a = _trainer(prepared, tmp_path / "a").run(2)
    b = _trainer(prepared, tmp_path / "b").run(2)
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]
    assert (tmp_path / "a" / "loss_log.jsonl").read_text() == (tmp_path / "b" / "loss_log.jsonl").read_text()


def test_lr_decays_per_epoch(prepared, tmp_path):
    tr = _trainer(prepared, tmp_path, batch_size=2)
    reports = tr.run(2 * tr.steps_per_epoch + 1)
    lr0 = tr.cfg.optimizer.lr0
    assert reports[-1].lr == pytest.approx(lr0 * 0.999875**2, rel=1e-15)
    assert reports[0].lr == lr0


def test_resume_matches_uninterrupted(prepared, tmp_path):
    straight = _trainer(prepared, tmp_path / "s", batch_size=2).run(5)
    first = _trainer(prepared, tmp_path / "r", batch_size=2)
    first.run(3)
    second = _trainer(prepared, tmp_path / "r2", batch_size=2).resume(tmp_path / "r" / "ckpt_last.pt")
    rest = second.run(5)
    assert [r.to_dict() for r in straight[3:]] == [r.to_dict() for r in rest]


def test_checkpoint_round_trip_and_hash(prepared, tmp_path):
    tr = _trainer(prepared, tmp_path)
    path = tr.save(tmp_path / "c.pt")
    assert not list(tmp_path.glob("*.tmp"))
    model, cfg, state = load_checkpoint(path, tr.cfg)
    assert cfg.model_hash() == tr.cfg.model_hash() == state["config_hash"]
    for k, v in tr.model.state_dict().items():
        assert torch.equal(v, model.state_dict()[k])
    other = dataclasses.replace(tr.cfg, model=dataclasses.replace(tr.cfg.model, latent_dim=8))
    with pytest.raises(ConfigHashMismatch):
        load_checkpoint(path, other)
    state["config_hash"] = "0" * 64
    torch.save(state, tmp_path / "bad.pt")
    with pytest.raises(ConfigHashMismatch):
        load_checkpoint(tmp_path / "bad.pt")


def test_config_file_round_trip(prepared, tmp_path):
    cfg = prepared.apply_to(tiny_config())
    cfg.save(tmp_path / "c.json")
    again = RunConfig.load(tmp_path / "c.json")
    assert again == cfg and again.model_hash() == cfg.model_hash()


def test_loss_report_fields():
    fields = {f.name for f in dataclasses.fields(LossReport)}
    assert {"l_pitch", "l_energy", "l_duration", "l_kl", "l_mel", "l_adv_g", "l_adv_d", "l_fm", "total_g", "total_d", "step"} <= fields


def test_mel_transform_matches_numpy(prepared):
    from expressive_svs.dsp import mel_spectrogram

    cfg = tiny_config()
    wav = prepared.arrays(prepared.split["train"][0])["wav"][:24000].astype("float64")
    ref = mel_spectrogram(wav, cfg.stft)
    ours = MelTransform(cfg.stft).double()(torch.tensor(wav)[None])[0].numpy()
    assert ours.shape == ref.shape
    assert abs(ours - ref).max() < 1e-4
