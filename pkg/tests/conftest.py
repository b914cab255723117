import dataclasses

import pytest

from expressive_svs.config import desk_config
from expressive_svs.data import PreparedData, prepare_data
from expressive_svs.fixtures import load_fixture, render_fixture_corpus


@pytest.fixture(scope="session")
def fixture_corpus():
    """(utterances, phoneme dict) of the bundled 50-line fixture."""
    return load_fixture()


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    return render_fixture_corpus(tmp_path_factory.mktemp("corpus"), limit=12)


@pytest.fixture(scope="session")
def prepared_dir(corpus_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("prepared")
    prepare_data(corpus_dir, out, desk_config(), seed=7, n_train=10)
    return out


@pytest.fixture(scope="session")
def prepared(prepared_dir):
    return PreparedData.load(prepared_dir)


def tiny_config(**model_overrides):
    """A few-thousand-parameter model for fast structural tests."""
    cfg = desk_config(batch_size=2, segment_frames=4, teacher_forcing_steps=10)
    m = dict(
        hidden_dim=16, filter_dim=32, phoneme_encoder_blocks=1, posterior_channels=16, posterior_layers=2,
        flow_channels=16, flow_couplings=2, decoder_channels=16, disc_channels=8, frame_prior_layers=1,
        pitch_predictor_layers=2,
    )
    m.update(model_overrides)
    cfg.model = dataclasses.replace(cfg.model, **m)
    cfg.semantic = dataclasses.replace(cfg.semantic, n_fft_blocks=1, block_dim=16, filter_dim=32, hidden_dim=m["hidden_dim"])
    return cfg


def tiny_setup(prepared, n_items=2, dtype=None, **model_overrides):
    """(cfg, model, batch) for a tiny model on prepared fixture items."""
    import torch

    from expressive_svs.data import batch_to, collate
    from expressive_svs.training import build_model

    cfg = prepared.apply_to(tiny_config(**model_overrides))
    torch.manual_seed(0)
    model = build_model(cfg)
    batch = collate(prepared.items(prepared.split["train"][:n_items]), cfg.stft)
    if dtype is not None:
        model = model.to(dtype)
        batch = batch_to(batch, dtype)
    return cfg, model, batch


def train_tiny(prepared, out_dir, steps=2, variant=None, n_items=4, **train):
    """Train a tiny model for a few steps; returns the checkpoint path."""
    from expressive_svs.config import apply_variant
    from expressive_svs.training import Trainer

    cfg = tiny_config()
    if variant:
        cfg = apply_variant(cfg, variant)
    cfg.train = dataclasses.replace(cfg.train, **train)
    Trainer(cfg, prepared, out_dir, prepared.split["train"][:n_items]).run(steps)
    return out_dir / "ckpt_last.pt"


@pytest.fixture(scope="session")
def tiny_checkpoint(prepared, tmp_path_factory):
    return train_tiny(prepared, tmp_path_factory.mktemp("tiny_ckpt"))


SMOKE_STEPS = 2000
SMOKE_UTTERANCES = 8


@pytest.fixture(scope="session")
def smoke_run(prepared, tmp_path_factory):
    """Overfit run on 8 training utterances at the desk config (slow: ~30 min on one core)."""
    from expressive_svs.training import Trainer

    out = tmp_path_factory.mktemp("smoke")
    ids = prepared.split["train"][:SMOKE_UTTERANCES]
    trainer = Trainer(desk_config(), prepared, out, ids)
    reports = trainer.run(SMOKE_STEPS, checkpoint_interval=10**9)
    return trainer, reports, ids
