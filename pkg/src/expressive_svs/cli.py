"""Command line entry point.

    expressive-svs prepare-data --corpus-dir C --out-dir D
    expressive-svs train --data-dir D --out-dir R [--config cfg.json] [--steps N]
    expressive-svs synth --checkpoint R/ckpt_last.pt --data-dir D --out-dir W
    expressive-svs eval  --checkpoint R/ckpt_last.pt --data-dir D [--variant V]
    expressive-svs plot  --checkpoint R/ckpt_last.pt --data-dir D --id ID --out fig.png

Exit codes: 0 success, 2 configuration error, 3 data error, 1 anything else.
"""
import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import VARIANTS, RunConfig, apply_variant, desk_config
from .errors import ConfigError, DataError, SVSError

logger = logging.getLogger("expressive_svs")


def _run_config(args, data_dir=None):
    if getattr(args, "config", None):
        return RunConfig.load(args.config)
    if data_dir and (Path(data_dir) / "config.json").exists():
        return RunConfig.load(Path(data_dir) / "config.json")
    return RunConfig()


def _with_sem_variant(cfg, sem_variant):
    if sem_variant:
        cfg.semantic = dataclasses.replace(cfg.semantic, variant=sem_variant)
    return cfg


def cmd_init_config(args):
    cfg = desk_config() if args.desk else RunConfig()
    if args.variant:
        cfg = apply_variant(cfg, args.variant)
    if args.provider:
        cfg.provider = args.provider
    cfg = _with_sem_variant(cfg, args.sem_variant)
    cfg.save(args.out)
    print(args.out)


def cmd_make_fixture(args):
    from .fixtures import render_fixture_corpus

    render_fixture_corpus(args.out_dir, args.limit)
    print(args.out_dir)


def cmd_prepare_data(args):
    from .data import prepare_data

    cfg = _run_config(args)
    if args.sample_rate != cfg.stft.sample_rate:
        cfg.stft = dataclasses.replace(cfg.stft, sample_rate=args.sample_rate)
        cfg.model = dataclasses.replace(cfg.model, sample_rate=args.sample_rate)
    cfg.stft.validate()
    cfg = prepare_data(args.corpus_dir, args.out_dir, cfg, seed=args.seed, n_train=args.n_train, wav_dir=args.wav_dir)
    excluded = json.loads((Path(args.out_dir) / "excluded.json").read_text(encoding="utf-8"))
    split = json.loads((Path(args.out_dir) / "split.json").read_text())
    print(f"train {len(split['train'])}  eval {len(split['eval'])}  excluded {len(excluded)}")


def cmd_train(args):
    from .data import PreparedData
    from .training import Trainer

    cfg = _run_config(args, args.data_dir)
    if args.variant:
        cfg = apply_variant(cfg, args.variant)
    cfg = _with_sem_variant(cfg, args.sem_variant)
    if args.seed is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    data = PreparedData.load(args.data_dir)
    ids = list(data.split["train"])
    if args.limit_utterances:
        ids = ids[: args.limit_utterances]
    trainer = Trainer(cfg, data, args.out_dir, ids)
    if args.resume:
        trainer.resume(args.resume)
    steps = args.steps if args.steps is not None else cfg.train.steps
    reports = trainer.run(steps)
    if reports:
        r = reports[-1]
        print(f"step {trainer.step}  mel {r.l_mel:.4f}  kl {r.l_kl:.4f}  dur {r.l_duration:.4f}")


def _items_for_synthesis(args, synth):
    from .corpus import PhonemeDict, load_transcriptions
    from .data import PreparedData, inference_item
    from .score import PhonemeVocab
    from .semantic import PinyinLexicon

    if args.transcriptions:
        dict_path = args.dict or (Path(args.data_dir) / "phoneme_dict.txt" if args.data_dir else None)
        if dict_path is None:
            raise ConfigError("--transcriptions needs --dict or --data-dir")
        pdict = PhonemeDict.load(dict_path)
        utts, errors = load_transcriptions(args.transcriptions, pdict)
        for line, err in errors:
            logger.warning("line %s skipped: %s", line, err)
        vocab = PhonemeVocab.from_list(synth.vocab)
        provider = synth.provider()
        lexicon = PinyinLexicon()
        return [inference_item(u, synth.cfg, vocab, pdict, lexicon, provider) for u in utts]
    if not args.data_dir:
        raise ConfigError("give --data-dir or --transcriptions")
    data = PreparedData.load(args.data_dir)
    ids = args.ids or data.split[args.split]
    return data.items(ids)


def cmd_synth(args):
    from .corpus import write_wav
    from .evaluation import Synthesizer

    synth = Synthesizer(args.checkpoint, RunConfig.load(args.config) if args.config else None)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for item in _items_for_synthesis(args, synth):
        wave, frames = synth.synthesize_item(item, seed=args.seed, noise_scale=args.noise_scale)
        write_wav(out / f"{item['id']}.wav", wave)
        np.save(out / f"{item['id']}.frames.npy", frames)
        print(f"{item['id']}\t{wave.duration_sec:.3f}s")


def cmd_eval(args):
    from .evaluation import evaluate

    report = evaluate(args.checkpoint, args.data_dir, ids=args.ids or None, seed=args.seed, variant=args.variant, split=args.split)
    if args.out:
        report.save(args.out)
        report.save_table(str(Path(args.out).with_suffix(".tsv")))

    def fmt(v):
        return "n/a" if v is None else f"{v:.4f}"

    print(f"{report.variant}\tn={report.n_utterances}\tF0 MAE {fmt(report.f0_mae)} Hz\tDur MAE {fmt(report.dur_mae)} frames\tEnergy MAE {fmt(report.energy_mae)}")


def cmd_plot(args):
    from .corpus import Waveform
    from .data import PreparedData
    from .evaluation import Synthesizer, features_of, plot_report

    synth = Synthesizer(args.checkpoint)
    data = PreparedData.load(args.data_dir)
    if args.id not in data.utterances:
        raise DataError(f"unknown utterance {args.id!r}")
    item = dict(data.arrays(args.id), id=args.id)
    wave, _ = synth.synthesize_item(item, seed=args.seed)
    cfg = synth.cfg
    ref = features_of(Waveform(item["wav"].astype(np.float64), cfg.stft.sample_rate), cfg)
    plot_report(ref, features_of(wave, cfg), args.out, cfg.stft, title=args.id)
    print(args.out)


def build_parser():
    p = argparse.ArgumentParser(prog="expressive-svs")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init-config", help="write a run configuration file")
    s.add_argument("--out", required=True)
    s.add_argument("--desk", action="store_true", help="CPU-sized widths and schedule")
    s.add_argument("--variant", choices=sorted(VARIANTS))
    s.add_argument("--provider", help="'stub' or a local BERT checkpoint directory")
    s.add_argument("--sem-variant", choices=("standard", "reversed", "off"))
    s.set_defaults(func=cmd_init_config)

    s = sub.add_parser("make-fixture", help="render the bundled synthetic corpus")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--limit", type=int)
    s.set_defaults(func=cmd_make_fixture)

    s = sub.add_parser("prepare-data")
    s.add_argument("--corpus-dir", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--wav-dir")
    s.add_argument("--sample-rate", type=int, default=24000)
    s.add_argument("--seed", type=int, default=1234)
    s.add_argument("--n-train", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_prepare_data)

    s = sub.add_parser("train")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--config", help="defaults to the config written by prepare-data")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--variant", choices=sorted(VARIANTS))
    s.add_argument("--sem-variant", choices=("standard", "reversed", "off"))
    s.add_argument("--resume")
    s.add_argument("--limit-utterances", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("synth")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--data-dir")
    s.add_argument("--ids", nargs="*")
    s.add_argument("--split", default="eval", choices=("train", "eval"))
    s.add_argument("--transcriptions", help="score file to render instead of prepared items")
    s.add_argument("--dict")
    s.add_argument("--config", help="refuse checkpoints trained with a different model config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise-scale", type=float, default=0.667)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("eval")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data-dir", required=True)
    s.add_argument("--ids", nargs="*")
    s.add_argument("--split", default="eval", choices=("train", "eval"))
    s.add_argument("--variant", choices=sorted(VARIANTS))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("plot")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data-dir", required=True)
    s.add_argument("--id", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except SVSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
