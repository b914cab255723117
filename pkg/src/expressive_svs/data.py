"""Corpus preparation and training batches.

``prepare_data`` turns an Opencpop-style directory into::

    out_dir/
      manifest.jsonl      one Utterance record per line (audio_path resolved)
      split.json          {"train": [...], "eval": [...], "seed": n}
      vocab.json          phoneme symbols, index = id
      quantizers.json     pitch and energy QuantizerSpecs
      excluded.json       utterances dropped, with the reason
      features/<id>-<hash>.npz   per-utterance cached features
"""
import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .corpus import PhonemeDict, check_duration, ingest_audio, load_transcriptions, read_manifest, split_dataset, write_manifest
from .dsp import compute_features, num_frames
from .errors import AlignmentFailure, ConfigHashMismatch, DataError, InsufficientData, TokenizationMismatch
from .score import PhonemeVocab, QuantizerSpec, build_score_features, energy_quantizer, phoneme_frame_counts, pitch_quantizer
from .semantic import PinyinLexicon, build_expansion_plan, embed_words, load_provider

logger = logging.getLogger(__name__)

ENERGY_FLOOR = 1e-5


def log_energy(energy):
    return np.log(np.maximum(np.asarray(energy), ENERGY_FLOOR))


def find_dict(corpus_dir):
    for name in ("pinyin_dict.txt", "opencpop-strict.txt", "dict.txt"):
        p = Path(corpus_dir) / name
        if p.exists():
            return p
    raise DataError(f"no pinyin-to-phoneme dictionary in {corpus_dir}")


def score_arrays(utt, cfg, vocab, pdict, lexicon, provider):
    """Score, lyric and semantic arrays; everything the model reads at inference."""
    score = build_score_features(utt, vocab, cfg.stft)
    plan = build_expansion_plan(utt.text, utt.phonemes, lexicon, pdict, utt.slur_flags)
    words = embed_words(utt.text, provider)
    return {
        "phoneme_ids": score.phoneme_ids,
        "note_pitch_ids": score.note_pitch_ids,
        "note_frames": score.note_frame_counts,
        "slur_ids": score.slur_ids,
        "note_lf0": score.note_lf0,
        "word_emb": words.vectors.astype(np.float32),
        "sem_index": plan.source_index(),
        "n1": np.asarray(plan.n1),
        "n2": np.asarray(plan.n2),
        "rest_indices": np.asarray(plan.rest_indices, dtype=np.int64),
    }


def utterance_arrays(utt, cfg, vocab, pdict, lexicon, provider):
    """Every per-utterance array the model needs, as a dict."""
    wav = ingest_audio(utt.audio_path, cfg.stft.sample_rate)
    diff, ok = check_duration(utt, wav, cfg.stft.hop_length)
    if not ok:
        raise DataError(f"{utt.id}: audio and annotation lengths differ by {diff:.3f}s")
    feats = compute_features(wav, cfg.stft, cfg.n_mels, cfg.f0_min, cfg.f0_max)
    frames = phoneme_frame_counts(utt.phoneme_durations_sec, feats.n_frames, cfg.stft.sample_rate, cfg.stft.hop_length)
    if frames.sum() != feats.n_frames:
        raise DataError(f"{utt.id}: too many phonemes for {feats.n_frames} frames")
    return {
        "wav": wav.samples.astype(np.float32),
        "linear_spec": feats.linear_spec.astype(np.float32),
        "mel_spec": feats.mel_spec.astype(np.float32),
        "energy": feats.energy.astype(np.float32),
        "lf0": feats.lf0.astype(np.float32),
        "voicing": feats.voicing.astype(np.int8),
        "phone_frames": frames.astype(np.int64),
        **score_arrays(utt, cfg, vocab, pdict, lexicon, provider),
    }


def inference_item(utt, cfg, vocab, pdict, lexicon, provider):
    """Item for ``collate`` built from the score alone (no audio).

    Acoustic slots hold a single silent frame; ``phone_frames`` carries the
    annotated durations so duration error can still be measured.
    """
    item = score_arrays(utt, cfg, vocab, pdict, lexicon, provider)
    n_frames = max(1, num_frames(round(utt.duration_sec * cfg.stft.sample_rate), cfg.stft))
    item.update(
        id=utt.id,
        wav=np.zeros(cfg.stft.window_length, np.float32),
        linear_spec=np.zeros((1, cfg.stft.n_bins), np.float32),
        mel_spec=np.zeros((1, cfg.n_mels), np.float32),
        energy=np.zeros(1, np.float32),
        lf0=np.zeros(1, np.float32),
        voicing=np.zeros(1, np.int8),
        phone_frames=phoneme_frame_counts(utt.phoneme_durations_sec, n_frames, cfg.stft.sample_rate, cfg.stft.hop_length).astype(np.int64),
    )
    return item


def prepare_data(corpus_dir, out_dir, cfg, seed=1234, n_train=None, wav_dir=None):
    """Parse, validate, featurise and split a corpus. Returns the updated config."""
    corpus_dir, out_dir = Path(corpus_dir), Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    dict_path = find_dict(corpus_dir)
    pdict = PhonemeDict.load(dict_path)
    utts, errors = load_transcriptions(corpus_dir / "transcriptions.txt", pdict, wav_dir or corpus_dir / "wavs")
    excluded = [{"line": ln, "reason": str(e)} for ln, e in errors]
    vocab = PhonemeVocab(pdict.inventory)
    lexicon = PinyinLexicon()
    provider = load_provider(cfg.provider, seed=seed)
    fhash = cfg.feature_hash()

    kept = []
    for utt in utts:
        path = out_dir / "features" / f"{utt.id}-{fhash}.npz"
        if not path.exists():
            try:
                arrays = utterance_arrays(utt, cfg, vocab, pdict, lexicon, provider)
            except (DataError, AlignmentFailure, TokenizationMismatch) as e:
                logger.warning("excluding %s: %s", utt.id, e)
                excluded.append({"id": utt.id, "reason": str(e)})
                continue
            np.savez(path, **arrays)
        kept.append(utt)
    if len(kept) < 2:
        raise InsufficientData(f"only {len(kept)} usable utterances")

    if n_train is None:
        n_train = cfg.train.n_train
    if n_train is None:
        n_train = max(1, len(kept) - max(1, round(len(kept) * cfg.train.eval_fraction)))
    split = split_dataset(kept, n_train, seed)

    train_ids = set(split.train)
    energies = [log_energy(np.load(out_dir / "features" / f"{u.id}-{fhash}.npz")["energy"]) for u in kept if u.id in train_ids]
    cfg.energy_quantizer = energy_quantizer(np.concatenate(energies), cfg.model.n_energy_bins)
    cfg.pitch_quantizer = pitch_quantizer(cfg.model.n_pitch_bins)
    cfg.model.n_phonemes = len(vocab)

    write_manifest(out_dir / "manifest.jsonl", kept)
    with open(out_dir / "split.json", "w") as f:
        json.dump(split.to_dict(), f, indent=1)
    with open(out_dir / "vocab.json", "w") as f:
        json.dump(vocab.to_list(), f, ensure_ascii=False)
    with open(out_dir / "quantizers.json", "w") as f:
        json.dump({"pitch": cfg.pitch_quantizer.to_dict(), "energy": cfg.energy_quantizer.to_dict(), "feature_hash": fhash}, f, indent=1)
    with open(out_dir / "excluded.json", "w") as f:
        json.dump(excluded, f, indent=1, ensure_ascii=False)
    shutil.copyfile(dict_path, out_dir / "phoneme_dict.txt")
    cfg.save(out_dir / "config.json")
    return cfg


@dataclass
class PreparedData:
    root: Path
    utterances: dict
    split: dict
    vocab: PhonemeVocab
    pitch_q: QuantizerSpec
    energy_q: QuantizerSpec
    feature_hash: str

    @classmethod
    def load(cls, root):
        root = Path(root)
        try:
            utts = {u.id: u for u in read_manifest(root / "manifest.jsonl")}
            split = json.loads((root / "split.json").read_text())
            vocab = PhonemeVocab.from_list(json.loads((root / "vocab.json").read_text(encoding="utf-8")))
            q = json.loads((root / "quantizers.json").read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"{root} is not a prepared data directory: {e}") from e
        return cls(root, utts, split, vocab, QuantizerSpec(**q["pitch"]), QuantizerSpec(**q["energy"]), q["feature_hash"])

    def apply_to(self, cfg):
        """Fill the data-derived fields of ``cfg`` in place."""
        if cfg.feature_hash() != self.feature_hash:
            raise ConfigHashMismatch(f"{self.root} was prepared with different analysis settings")
        cfg.pitch_quantizer = self.pitch_q
        cfg.energy_quantizer = self.energy_q
        cfg.model.n_phonemes = len(self.vocab)
        return cfg

    def arrays(self, uid):
        with np.load(self.root / "features" / f"{uid}-{self.feature_hash}.npz") as z:
            return {k: z[k] for k in z.files}

    def items(self, ids):
        return [dict(self.arrays(i), id=i) for i in ids]


def collate(items, stft_cfg):
    """Pad a list of per-utterance array dicts into a batch of tensors."""
    B = len(items)
    N = max(len(it["phoneme_ids"]) for it in items)
    W = max(len(it["word_emb"]) for it in items)
    T = max(len(it["energy"]) for it in items)
    hl, wl = stft_cfg.hop_length, stft_cfg.window_length
    S = T * hl + (wl - hl)
    D = items[0]["word_emb"].shape[1]
    F = items[0]["linear_spec"].shape[1]

    def zeros(*shape, dtype=torch.float32):
        return torch.zeros(*shape, dtype=dtype)

    batch = {
        "ids": [it["id"] for it in items],
        "phoneme_ids": zeros(B, N, dtype=torch.long),
        "note_pitch_ids": zeros(B, N, dtype=torch.long),
        "note_frames": zeros(B, N, dtype=torch.long),
        "slur_ids": zeros(B, N, dtype=torch.long),
        "note_lf0": zeros(B, N),
        "phone_frames": zeros(B, N, dtype=torch.long),
        "phone_lengths": zeros(B, dtype=torch.long),
        "sem_index": torch.full((B, N), -1, dtype=torch.long),
        "word_emb": zeros(B, W, D),
        "word_lengths": zeros(B, dtype=torch.long),
        "spec": zeros(B, F, T),
        "lf0": zeros(B, T),
        "voicing": zeros(B, T),
        "log_energy": zeros(B, T),
        "energy": zeros(B, T),
        "mel": zeros(B, T, items[0]["mel_spec"].shape[1]),
        "frame_lengths": zeros(B, dtype=torch.long),
        "wav": zeros(B, S),
    }
    for b, it in enumerate(items):
        n, w, t = len(it["phoneme_ids"]), len(it["word_emb"]), len(it["energy"])
        for key in ("phoneme_ids", "note_pitch_ids", "slur_ids", "phone_frames", "sem_index"):
            batch[key][b, :n] = torch.as_tensor(it[key], dtype=torch.long)
        batch["note_frames"][b, :n] = torch.as_tensor(it["note_frames"], dtype=torch.long)
        batch["note_lf0"][b, :n] = torch.as_tensor(it["note_lf0"])
        batch["phone_lengths"][b] = n
        batch["word_emb"][b, :w] = torch.as_tensor(it["word_emb"])
        batch["word_lengths"][b] = w
        batch["spec"][b, :, :t] = torch.as_tensor(it["linear_spec"]).t()
        batch["lf0"][b, :t] = torch.as_tensor(it["lf0"])
        batch["voicing"][b, :t] = torch.as_tensor(it["voicing"].astype(np.float32))
        batch["energy"][b, :t] = torch.as_tensor(it["energy"])
        batch["log_energy"][b, :t] = torch.as_tensor(log_energy(it["energy"]).astype(np.float32))
        batch["mel"][b, :t] = torch.as_tensor(it["mel_spec"])
        batch["frame_lengths"][b] = t
        wav = torch.as_tensor(it["wav"])[:S]
        batch["wav"][b, : len(wav)] = wav
    return batch


def batch_to(batch, dtype):
    return {k: (v.to(dtype) if isinstance(v, torch.Tensor) and v.is_floating_point() else v) for k, v in batch.items()}


def bucket_batches(lengths, batch_size, rng):
    """Group utterance indices of similar length, then shuffle the groups."""
    order = np.argsort(lengths, kind="stable")
    batches = [order[i : i + batch_size].tolist() for i in range(0, len(order), batch_size)]
    rng.shuffle(batches)
    return batches
