#!/usr/bin/env python3
"""Desk-scale ranking experiment: build the desk corpus, label it with FRC,
train the network and check how it orders the noise-free blur and vignetting
series. Writes history, model, per-image scores and a small summary to --out.
"""

import argparse
import csv
import json
import logging
from pathlib import Path

from mudeepiqa.degrade import build_dataset, preset
from mudeepiqa.evaluate import grouped_krcc
from mudeepiqa.frc import label_manifest
from mudeepiqa.net import init_model, save_model
from mudeepiqa.predict import predict_image
from mudeepiqa.train import TrainConfig, train_model, write_history


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=7, help="global dataset seed")
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--batch", type=int, default=16)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out)

    manifest = build_dataset(preset("desk", global_seed=args.seed), out / "desk")
    labels = label_manifest(manifest)
    for e in manifest.entries:
        e.label = labels[e.id]
    manifest.label_source = "frc_resolution"
    manifest.save(out / "desk" / "manifest.json")

    config = TrainConfig(epochs=args.epochs, batch_patches=args.batch, learning_rate=args.lr, seed=0)
    model, history = train_model(init_model(seed=0), manifest, config=config)
    write_history(history, out / "history.csv")
    save_model(model, out / "model.bin")

    noisefree = build_dataset(preset("noisefree", global_seed=args.seed), out / "noisefree")
    summary = {"epochs": len(history), "final_train_E_wp": history[-1]["train_E_wp"], "krcc": {}}
    with open(out / "noisefree_scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "kind", "level", "score"])
        for kind in ("blur", "vignetting"):
            entries = [e for e in noisefree.entries if e.artifact.kind == kind and e.level]
            scores = [predict_image(model, noisefree.load(e)).score for e in entries]
            for e, s in zip(entries, scores):
                w.writerow([e.id, kind, e.level, repr(s)])
            tau = grouped_krcc(scores, [e.level for e in entries], higher_is_better=model.higher_is_better)
            summary["krcc"][kind] = tau
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary, indent=1))


if __name__ == "__main__":
    main()
