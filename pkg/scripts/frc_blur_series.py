#!/usr/bin/env python3
"""FRC resolution along the blur levels of the noise-free set, with and
without baseline detector noise, for each structure family.
"""

import argparse

import numpy as np

from mudeepiqa.degrade import BASELINE_NOISE, NOISE_KEYS, NOISEFREE_LEVELS, ArtifactSpec, apply_artifact, derive_seed
from mudeepiqa.frc import frc_resolution
from mudeepiqa.synth import STRUCTURE_KINDS, gen_structure, make_spec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=512)
    ap.add_argument("--seeds", type=int, default=3)
    args = ap.parse_args()
    levels = NOISEFREE_LEVELS["blur"][1]
    print("kind,seed,noise," + ",".join(f"sigma={v}" for v in levels))
    for kind in STRUCTURE_KINDS:
        for s in range(args.seeds):
            clean = gen_structure(make_spec(kind, canvas=(args.size, args.size), seed=100 + s))
            for noise in (0.0, BASELINE_NOISE):
                res = []
                for i, sigma in enumerate(levels):
                    spec = ArtifactSpec("blur", {"sigma_blur": sigma, **{k: noise for k in NOISE_KEYS}}, derive_seed(s, i))
                    res.append(frc_resolution(apply_artifact(clean, spec)).resolution_px)
                print(f"{kind},{s},{noise}," + ",".join(f"{r:.3f}" for r in np.round(res, 3)))


if __name__ == "__main__":
    main()
