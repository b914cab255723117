"""
Overfitting a handful of utterances
===================================

Prepares the synthetic corpus, trains the desk-sized model on 8 utterances,
then synthesises one of them and scores it. STEPS=2000 reproduces the smoke
check (about half an hour on one CPU core); the default is a quick look.
"""
import os

from expressive_svs.config import desk_config
from expressive_svs.corpus import write_wav
from expressive_svs.data import PreparedData, prepare_data
from expressive_svs.evaluation import Synthesizer, compute_metrics, features_of, plot_report
from expressive_svs.corpus import Waveform
from expressive_svs.fixtures import render_fixture_corpus
from expressive_svs.training import Trainer

STEPS = int(os.environ.get("STEPS", 200))
root = "/tmp/svs_demo"

corpus = render_fixture_corpus(f"{root}/corpus", limit=12)
prepare_data(corpus, f"{root}/data", desk_config(), seed=7, n_train=10)
data = PreparedData.load(f"{root}/data")

ids = data.split["train"][:8]
trainer = Trainer(desk_config(), data, f"{root}/run", ids)
reports = trainer.run(STEPS, checkpoint_interval=10**9)
print("l_mel %.3f -> %.3f" % (reports[0].l_mel, reports[-1].l_mel))

synth = Synthesizer(f"{root}/run/ckpt_last.pt")
uid = ids[0]
item = dict(data.arrays(uid), id=uid)
wave, frames = synth.synthesize_item(item, seed=0)
write_wav(f"{root}/{uid}.wav", wave)

ref = Waveform(item["wav"], wave.sample_rate)
m = compute_metrics(ref, wave, synth.cfg.stft, item["phone_frames"], frames, uid=uid)
print(m)

# reference on the left, synthesis on the right; pitch in blue, energy in yellow
plot_report(features_of(ref, synth.cfg), features_of(wave, synth.cfg), f"{root}/{uid}.png", synth.cfg.stft, title=uid)
print("wrote", f"{root}/{uid}.png")
