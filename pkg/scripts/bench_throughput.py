#!/usr/bin/env python3
"""Wall-clock of direct single-image FRC against CNN prediction on the same
synthetic 512 px images (baseline detector noise). Prints the report as JSON.
"""

import argparse
import json

import torch

from mudeepiqa.degrade import BASELINE_NOISE, NOISE_KEYS, ArtifactSpec, apply_artifact, derive_seed
from mudeepiqa.evaluate import bench
from mudeepiqa.net import init_model, load_model
from mudeepiqa.synth import STRUCTURE_KINDS, gen_structure, make_spec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=100)
    ap.add_argument("--size", type=int, default=512)
    ap.add_argument("--model", help="trained model file; an untrained network times the same")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out")
    args = ap.parse_args()
    torch.set_num_threads(args.threads)
    model = load_model(args.model) if args.model else init_model(seed=0)
    images = []
    for i in range(args.n):
        kind = STRUCTURE_KINDS[i % len(STRUCTURE_KINDS)]
        clean = gen_structure(make_spec(kind, canvas=(args.size, args.size), seed=derive_seed(0, i)))
        noise = {k: BASELINE_NOISE for k in NOISE_KEYS}
        images.append(apply_artifact(clean, ArtifactSpec("reference", noise, derive_seed(0, i, 1))))
    report = bench(images, model)
    if args.out:
        report.save(args.out)
    print(json.dumps(report.to_dict(), indent=1))


if __name__ == "__main__":
    main()
