"""
Ablation systems through the CLI
================================

Trains each ablation briefly and evaluates it on the held-out utterances.
At this scale the numbers only show that the harness runs end to end; they
say nothing about which system is better.
"""
import json
import os

from expressive_svs.cli import main

STEPS = os.environ.get("STEPS", "20")
root = "/tmp/svs_ablation"

main(["make-fixture", "--out-dir", f"{root}/corpus", "--limit", "12"])
main(["init-config", "--out", f"{root}/desk.json", "--desk"])
main(["prepare-data", "--corpus-dir", f"{root}/corpus", "--out-dir", f"{root}/data", "--n-train", "10", "--config", f"{root}/desk.json"])

for variant in ("proposed", "no-energy", "no-sem", "reversed-sem"):
    main(["train", "--data-dir", f"{root}/data", "--out-dir", f"{root}/{variant}", "--variant", variant, "--steps", STEPS, "--limit-utterances", "4"])
    main(["eval", "--checkpoint", f"{root}/{variant}/ckpt_last.pt", "--data-dir", f"{root}/data", "--variant", variant, "--out", f"{root}/{variant}.json"])

rows = [json.load(open(f"{root}/{v}.json")) for v in ("proposed", "no-energy", "no-sem", "reversed-sem")]
for r in rows:
    print(r["variant"], r["f0_mae"], r["dur_mae"], r["energy_mae"])
