"""Acceptance suite: one verdict line per criterion (see the summary section).

Criterion 7 trains the full network on the desk preset and takes roughly
45 minutes on one CPU core.
"""

import hashlib
import itertools
import time

import numpy as np
import pytest
import torch

from mudeepiqa.degrade import (
    BASELINE_NOISE,
    NOISE_KEYS,
    NOISEFREE_LEVELS,
    ArtifactSpec,
    Recipe,
    apply_artifact,
    build_dataset,
    derive_seed,
    mpg_noise_raw,
    preset,
)
from mudeepiqa.evaluate import KendallUndefined, grouped_krcc, kendall_tau
from mudeepiqa.frc import frc_resolution, label_manifest
from mudeepiqa.imagecore import Image, partition_patches
from mudeepiqa.net import ModelSpec, PatchPrediction, aggregate, forward_patches, init_model, load_model, save_model
from mudeepiqa.predict import predict_image
from mudeepiqa.synth import gen_structure, make_spec
from mudeepiqa.train import TrainConfig, _PatchCache, image_estimate, loss_wp, parameter_digest, train_model
from oracles import gradient_mismatches, tau_b_bruteforce

DESK_SEED = 7


def noisy_512(kind, seed, sub=0):
    clean = gen_structure(make_spec(kind, canvas=(512, 512), seed=seed))
    art = ArtifactSpec("reference", {k: BASELINE_NOISE for k in NOISE_KEYS}, derive_seed(seed, sub))
    return apply_artifact(clean, art)


def test_c01_parameter_count(record_criterion):
    t = time.perf_counter()
    n = init_model(seed=0).n_parameters()
    dt = time.perf_counter() - t
    assert record_criterion(1, "architecture parameter count", n == 5_237_986 and dt < 1, f"{n} params in {dt:.2f}s")


def test_c02_loss_cases(record_criterion):
    cases = [
        ((0.0, 1.0), (1.0, 3.0), 0.75, (0.0, 0.5, 0.5)),
        ((0.0, 1.0), (1.0, 3.0), 0.5, (0.25, 0.5, 0.75)),
        ((2.0, 2.0, 2.0), (1.0, 5.0, 9.0), 2.0, (0.0, 0.0, 0.0)),
        ((-1.0, 1.0), (1.0, 1.0), 1.0, (1.0, 1.0, 2.0)),
    ]
    worst = 0.0
    for y, a, q, expected in cases:
        b = loss_wp(PatchPrediction(np.array(y), np.array(a)), q)
        worst = max(worst, *(abs(u - v) for u, v in zip((b.E_w, b.E_p, b.E_wp), expected)))
    assert record_criterion(2, "loss arithmetic", worst <= 1e-12, f"max abs error {worst:.1e} over {len(cases)} cases")


def test_c03_aggregation_homogeneity(record_criterion):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 300))
        y = rng.normal(size=n)
        a = rng.uniform(1e-6, 10, n)
        base = aggregate(PatchPrediction(y, a))
        for c in (1e-3, 1.0, 1e3):
            worst = max(worst, abs(aggregate(PatchPrediction(y, c * a)) - base))
    assert record_criterion(3, "aggregation homogeneity", worst <= 1e-12, f"max deviation {worst:.1e} over 1000 cases")


def test_c04_gradients(record_criterion):
    net = init_model(ModelSpec.scaled(8), seed=11).net.double().eval()
    x = torch.from_numpy(np.random.default_rng(0).random((6, 1, 32, 32)))
    checked, bad = gradient_mismatches(net, x, 0.3, rtol=1e-4)
    ok = checked >= 100 and not bad
    assert record_criterion(4, "gradient correctness", ok, f"{checked} coordinates, {len(bad)} beyond 1e-4 relative")


def test_c05_noise_moments(record_criterion):
    settings = [  # (s, lambda_dark, sigma2_read, alpha_shot), spanning the sampling ranges
        (0.5, 0.3, 0.7, 1.0),
        (0.2, 0.5, 1.5, 5.0),
        (0.8, 0.4, 1.1, 3.0),
        (1.0, 0.3, 1.5, 1.0),
        (0.1, 0.5, 0.7, 5.0),
    ]
    worst = 0.0
    for i, (s, lam, s2, alpha) in enumerate(settings):
        x = mpg_noise_raw(np.full(10**6, s), lam, s2, alpha, np.random.default_rng(i))
        worst = max(worst, abs(x.mean() / (s + lam) - 1), abs(x.var() / (lam + s2 + alpha * s) - 1))
    assert record_criterion(5, "MPG noise moments", worst < 0.02, f"max relative error {worst:.4f} at 1e6 samples")


def test_c06_frc_blur_ordering(record_criterion):
    levels = NOISEFREE_LEVELS["blur"][1]

    def series(clean, noise, seed):
        # one noise realization per series so only the blur changes along it
        out = []
        for sigma in levels:
            params = {"sigma_blur": sigma, **{k: noise for k in NOISE_KEYS}}
            out.append(frc_resolution(apply_artifact(clean, ArtifactSpec("blur", params, derive_seed(seed)))).resolution_px)
        return out

    # (a) baseline detector noise: resolution worsens with every blur step
    taus = []
    for kind in ("disks", "filaments", "rings"):
        for s in range(10):
            clean = gen_structure(make_spec(kind, canvas=(512, 512), seed=100 + s))
            taus.append(kendall_tau(series(clean, BASELINE_NOISE, s), levels))
    ok_a = all(t == 1.0 for t in taus)

    # (b) without noise the ordering breaks down
    clean = gen_structure(make_spec("disks", canvas=(512, 512), seed=100))
    quiet = series(clean, 0.0, 0)
    try:
        tau_b = kendall_tau(quiet, levels)
    except KendallUndefined:
        tau_b = float("nan")  # every level assigned the same resolution
    ok_b = not tau_b == 1.0
    detail = f"(a) {sum(t == 1.0 for t in taus)}/{len(taus)} series with tau=1; (b) noise-free resolutions {np.round(quiet, 2).tolist()}, tau={tau_b}"
    assert record_criterion(6, "FRC blur ordering with and without noise", ok_a and ok_b, detail)


@pytest.fixture(scope="module")
def desk_model(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    manifest = build_dataset(preset("desk", global_seed=DESK_SEED), root / "train")
    labels = label_manifest(manifest)
    for e in manifest.entries:
        e.label = labels[e.id]
    manifest.label_source = "frc_resolution"
    config = TrainConfig(epochs=100, batch_patches=16, learning_rate=1e-4, seed=0)
    model, history = train_model(init_model(seed=0), manifest, config=config)
    noisefree = build_dataset(preset("noisefree", global_seed=DESK_SEED), root / "noisefree")
    return model, history, noisefree


def test_c07_desk_ranking(desk_model, record_criterion):
    model, history, noisefree = desk_model
    result = {}
    for kind in ("blur", "vignetting"):
        entries = [e for e in noisefree.entries if e.artifact.kind == kind and e.level]
        scores = [predict_image(model, noisefree.load(e)).score for e in entries]
        result[kind] = grouped_krcc(scores, [e.level for e in entries], higher_is_better=model.higher_is_better)
    ok = len(history) >= 100 and all(v >= 0.6 for v in result.values())
    detail = f"blur {result['blur']:.2f}, vignetting {result['vignetting']:.2f} after {len(history)} epochs"
    assert record_criterion(7, "desk-scale ranking regularization", ok, detail)


def test_c08_single_image_overfit(tmp_path, record_criterion):
    recipe = Recipe(
        name="single",
        image_size=512,
        structures=["filaments"],
        fovs_structure={"train": 1, "val": 0, "test": 0},
        fovs_experimental={"train": 0, "val": 0, "test": 0},
        artifacts=["blur"],
        global_seed=1,
    )
    manifest = build_dataset(recipe, tmp_path)
    (entry,) = manifest.entries
    target = 0.8
    config = TrainConfig(epochs=200, batch_patches=128, seed=0, label_stats=(0.0, 1.0))
    model, _ = train_model(init_model(seed=0), manifest, {entry.id: target}, config)
    e_w = abs(image_estimate(model, _PatchCache(manifest)(entry)) - target)
    assert record_criterion(8, "single-image overfit", e_w < 0.05, f"E_w {e_w:.4f} after 200 epochs")


def test_c09_patch_maps(record_criterion):
    model = init_model(seed=3, label_mean=4.0, label_std=1.5)
    res = predict_image(model, noisy_512("disks", 1))
    again = aggregate(PatchPrediction(res.patch_quality.ravel(), res.patch_weight.ravel()))
    dev = abs(again - res.score)
    ok = res.grid_shape == (16, 16) and dev <= 1e-9 and res.patch_weight.min() >= 1e-6
    detail = f"grid {res.grid_shape}, aggregate deviation {dev:.1e}, min weight {res.patch_weight.min():.3g}"
    assert record_criterion(9, "patch-map geometry", ok, detail)


@pytest.mark.xfail(strict=True, reason="CPU-only single core: the CNN is slower than FFT-based FRC here")
def test_c10_throughput(record_criterion):
    torch.set_num_threads(1)
    model = init_model(seed=0)
    images = [noisy_512(("disks", "filaments", "rings", "blobs", "grid")[i % 5], 200 + i) for i in range(100)]
    t = time.perf_counter()
    for img in images:
        frc_resolution(img)
    t_frc = time.perf_counter() - t
    t = time.perf_counter()
    for img in images:
        predict_image(model, img)
    t_model = time.perf_counter() - t
    detail = f"model {t_model:.1f}s vs FRC {t_frc:.1f}s on 100 images at 512 px, 1 thread"
    assert record_criterion(10, "throughput direction", t_model < t_frc, detail)


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_c11_determinism(tmp_path, record_criterion):
    a = build_dataset(preset("desk", global_seed=3), tmp_path / "a")
    build_dataset(preset("desk", global_seed=3), tmp_path / "b")
    same_data = _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")

    model = init_model(seed=5)
    path = save_model(model, tmp_path / "m.bin")
    image = a.load(a.entries[0])
    p1 = forward_patches(model, partition_patches(image))
    p2 = forward_patches(load_model(path), partition_patches(image))
    same_inference = np.array_equal(p1.qualities, p2.qualities) and np.array_equal(p1.weights, p2.weights)

    small = Recipe(
        name="small",
        image_size=64,
        structures=["disks"],
        fovs_structure={"train": 2, "val": 1, "test": 0},
        fovs_experimental={"train": 0, "val": 0, "test": 0},
        artifacts=["reference", "blur"],
    )
    m = build_dataset(small, tmp_path / "small")
    labels = label_manifest(m)
    digests = []
    for _ in range(2):
        trained, _ = train_model(init_model(ModelSpec.scaled(4), seed=1), m, labels, TrainConfig(epochs=2, batch_patches=4))
        digests.append(parameter_digest(trained))
    same_training = digests[0] == digests[1]
    ok = same_data and same_inference and same_training
    detail = f"dataset {same_data}, inference {same_inference}, training (torch CPU, tolerance 0) {same_training}"
    assert record_criterion(11, "determinism", ok, detail)


def test_c12_kendall_oracle(record_criterion):
    mismatches = checked = 0
    for n in range(2, 9):
        ref = np.arange(n)
        for perm in itertools.permutations(range(n)):
            checked += 1
            mismatches += kendall_tau(ref, perm) != pytest.approx(tau_b_bruteforce(ref, perm), abs=1e-12)
    rng = np.random.default_rng(0)
    tied = 0
    while tied < 1000:
        n = int(rng.integers(2, 30))
        x, y = rng.integers(0, 4, n), rng.integers(0, 4, n)
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            continue
        tied += 1
        mismatches += kendall_tau(x, y) != pytest.approx(tau_b_bruteforce(x, y), abs=1e-12)
    ok = mismatches == 0
    assert record_criterion(12, "Kendall tau-b oracle", ok, f"{checked} permutations + {tied} tied cases, {mismatches} mismatches")
