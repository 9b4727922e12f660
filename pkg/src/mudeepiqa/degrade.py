"""Simulated acquisition artifacts and semisynthetic corpus assembly."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imagecore import RAW_SUFFIX, Image, read_image, rescale_unit, write_image
from .synth import STRUCTURE_KINDS, StructureSpec, gen_structure, ingest_clean, make_spec

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
ARTIFACT_KINDS = ("reference", "blur", "dark_noise", "readout_noise", "shot_noise", "vignetting")
NOISE_KEYS = ("lambda_dark", "sigma2_read", "alpha_shot")
TRUNCATE = 4.0

# Min/max of the parameter distributions for sampled corpora.
PARAM_RANGES = {
    "blur": ("sigma_blur", 1.0, 8.0),
    "dark_noise": ("lambda_dark", 0.3, 0.5),
    "readout_noise": ("sigma2_read", 0.7, 1.5),
    "shot_noise": ("alpha_shot", 1.0, 5.0),
    "vignetting": ("sigma_ill", 0.2, 0.6),
}
BASELINE_NOISE = 0.005

# Fixed levels for the noise-free prediction corpus, mildest first.
NOISEFREE_LEVELS = {
    "blur": ("sigma_blur", (1.0, 2.75, 4.5, 6.25, 8.0)),
    "vignetting": ("sigma_ill", (0.6, 0.5, 0.4, 0.3, 0.2)),
}
NOISEFREE_REFERENCE_NOISE = 0.05
NOISEFREE_REPEATS = 5

# Per-row increments for spatially graded artifacts, starting from 0 at the top row.
GRADED_INCREMENTS = {
    "blur": {"sigma_blur": 0.02},
    "mpg_noise": {"lambda_dark": 0.001, "sigma2_read": 0.007, "alpha_shot": 0.007},
}


class RecipeError(ValueError):
    pass


def derive_seed(global_seed: int, *keys: int) -> int:
    """64-bit seed for a (global_seed, keys...) tuple, independent of call order."""
    ss = np.random.SeedSequence(entropy=int(global_seed), spawn_key=tuple(int(k) for k in keys))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)


@dataclass(frozen=True)
class ArtifactSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ARTIFACT_KINDS and self.kind not in ("graded_blur", "graded_mpg_noise"):
            raise ValueError(f"unknown artifact kind {self.kind!r}")
        for k, v in self.params.items():
            if not np.isscalar(v) or not np.isfinite(v) or v < 0:
                raise ValueError(f"artifact parameter {k}={v!r} must be a finite value >= 0")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, d: dict) -> "ArtifactSpec":
        return cls(d["kind"], dict(d.get("params", {})), int(d.get("seed", 0)))


@dataclass(frozen=True)
class GradedArtifactSpec:
    kind: str  # "blur" or "mpg_noise"
    start: dict
    per_row_increase: dict

    def __post_init__(self):
        if self.kind not in GRADED_INCREMENTS:
            raise ValueError(f"graded kind must be one of {tuple(GRADED_INCREMENTS)}")
        for d in (self.start, self.per_row_increase):
            if any(v < 0 for v in d.values()):
                raise ValueError("graded parameters must be >= 0")

    @classmethod
    def table(cls, kind: str) -> "GradedArtifactSpec":
        inc = GRADED_INCREMENTS[kind]
        return cls(kind, {k: 0.0 for k in inc}, dict(inc))

    def row_values(self, n_rows: int) -> dict[str, np.ndarray]:
        r = np.arange(n_rows, dtype=np.float64)
        keys = set(self.start) | set(self.per_row_increase)
        return {k: self.start.get(k, 0.0) + r * self.per_row_increase.get(k, 0.0) for k in keys}


# --------------------------------------------------------------------------- artifacts


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(TRUNCATE * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def apply_blur(image: Image, sigma_blur: float) -> Image:
    """Isotropic Gaussian PSF, kernel truncated at 4 sigma, reflective borders."""
    if sigma_blur < 0:
        raise ValueError("sigma_blur must be >= 0")
    if sigma_blur == 0:
        return image
    out = ndimage.gaussian_filter(
        image.pixels.astype(np.float64), sigma_blur, mode="reflect", truncate=TRUNCATE
    )
    return image.with_pixels(out)


def mpg_noise_raw(pixels, lambda_dark, sigma2_read, alpha_shot, rng) -> np.ndarray:
    """Pre-rescale mixed Poisson-Gaussian realization.

    dark ~ Poisson(lambda_dark), read ~ N(0, sigma2_read) and signal-dependent
    shot noise with mean s and variance alpha_shot * s. Shot noise uses the
    Gaussian form because unit-interval intensities make integer Poisson
    counts degenerate. Parameters may be arrays broadcastable to ``pixels``.
    """
    s = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, None)
    shape = s.shape
    lam = np.broadcast_to(np.asarray(lambda_dark, dtype=np.float64), shape)
    dark = rng.poisson(lam).astype(np.float64)
    read = rng.standard_normal(shape) * np.sqrt(np.asarray(sigma2_read, dtype=np.float64))
    shot = s + rng.standard_normal(shape) * np.sqrt(np.asarray(alpha_shot, dtype=np.float64) * s)
    return dark + read + shot


def apply_mpg_noise(image: Image, lambda_dark, sigma2_read, alpha_shot, seed) -> Image:
    rng = np.random.default_rng(seed)
    raw = mpg_noise_raw(image.pixels, lambda_dark, sigma2_read, alpha_shot, rng)
    return rescale_unit(image.with_pixels(raw))


def vignetting_mask(shape: tuple[int, int], sigma_ill: float) -> np.ndarray:
    """Max-normalized Gaussian illumination centered on pixel (h//2, w//2).

    ``sigma_ill`` is a fraction of the lateral size, taken as the larger
    image dimension.
    """
    h, w = shape
    sigma = sigma_ill * max(h, w)
    yy = np.arange(h, dtype=np.float64)[:, None] - h // 2
    xx = np.arange(w, dtype=np.float64)[None, :] - w // 2
    return np.exp(-(yy**2 + xx**2) / (2 * sigma**2))


def apply_vignetting(image: Image, sigma_ill: float) -> Image:
    if sigma_ill <= 0:
        raise ValueError("sigma_ill must be > 0")
    return image.with_pixels(image.pixels * vignetting_mask(image.shape, sigma_ill))


def _graded_blur(px: np.ndarray, sigmas: np.ndarray) -> np.ndarray:
    """Each output row is the 2-D Gaussian blur of the input at that row with its own sigma.

    The Gaussian is separable, so row r is a vertical weighted sum of input
    rows followed by a horizontal 1-D convolution of the resulting line.
    """
    h, _ = px.shape
    out = np.empty_like(px)
    rmax = int(TRUNCATE * sigmas.max() + 0.5) if sigmas.size else 0
    padded = np.pad(px, ((rmax, rmax), (0, 0)), mode="symmetric")
    for r in range(h):
        sigma = sigmas[r]
        if sigma <= 0:
            out[r] = px[r]
            continue
        k = gaussian_kernel1d(sigma)
        rad = (k.size - 1) // 2
        line = k @ padded[r + rmax - rad : r + rmax + rad + 1]
        out[r] = ndimage.correlate1d(line, k, mode="reflect")
    return out


def apply_graded(image: Image, spec: GradedArtifactSpec, seed: int = 0, baseline: dict | None = None) -> Image:
    """Artifact whose strength grows linearly from the top row downwards.

    ``baseline`` adds a uniform low-noise triplet on top (MPG: summed with the
    per-row values; blur: applied after blurring). Output is rescaled.
    """
    px = image.pixels.astype(np.float64)
    rows = spec.row_values(image.height)
    base = {k: 0.0 for k in NOISE_KEYS}
    if baseline:
        base.update({k: baseline.get(k, 0.0) for k in NOISE_KEYS})
    rng = np.random.default_rng(seed)
    if spec.kind == "blur":
        px = _graded_blur(px, rows["sigma_blur"])
        noise = {k: base[k] for k in NOISE_KEYS}
    else:
        noise = {k: base[k] + rows.get(k, np.zeros(image.height))[:, None] for k in NOISE_KEYS}
    if spec.kind == "mpg_noise" or any(np.any(np.asarray(v) > 0) for v in noise.values()):
        px = mpg_noise_raw(px, noise["lambda_dark"], noise["sigma2_read"], noise["alpha_shot"], rng)
    return rescale_unit(image.with_pixels(px))


def sample_artifact_params(kind: str, rng: np.random.Generator) -> ArtifactSpec:
    """Draw one artifact realization for a sampled corpus.

    The free parameter follows Normal((min+max)/2, (max-min)/4) clipped to
    [min, max]; every kind carries the low baseline noise triplet.
    """
    if kind not in ARTIFACT_KINDS:
        raise ValueError(f"unknown artifact kind {kind!r}")
    params = {k: BASELINE_NOISE for k in NOISE_KEYS}
    if kind != "reference":
        name, lo, hi = PARAM_RANGES[kind]
        value = rng.normal((lo + hi) / 2, (hi - lo) / 4)
        params[name] = float(np.clip(value, lo, hi))
    seed = int(rng.integers(0, 2**63 - 1))
    return ArtifactSpec(kind, params, seed)


def apply_artifact(clean: Image, spec: ArtifactSpec) -> Image:
    """Full degradation of a clean image: optics, then detector noise, then rescale."""
    p = spec.params
    img = clean
    if spec.kind in ("graded_blur", "graded_mpg_noise"):
        kind = spec.kind.removeprefix("graded_")
        inc = {k: p[f"{k}_increase"] for k in GRADED_INCREMENTS[kind]}
        start = {k: p.get(f"{k}_start", 0.0) for k in GRADED_INCREMENTS[kind]}
        base = {k: p.get(k, 0.0) for k in NOISE_KEYS}
        return apply_graded(clean, GradedArtifactSpec(kind, start, inc), spec.seed, base)
    if spec.kind == "blur":
        img = apply_blur(img, p["sigma_blur"])
    elif spec.kind == "vignetting":
        img = apply_vignetting(img, p["sigma_ill"])
    noise = [p.get(k, 0.0) for k in NOISE_KEYS]
    if any(noise):
        rng = np.random.default_rng(spec.seed)
        return rescale_unit(img.with_pixels(mpg_noise_raw(img.pixels, *noise, rng)))
    return rescale_unit(img)


# --------------------------------------------------------------------------- corpora

SPLITS = ("train", "val", "test")


@dataclass
class Recipe:
    """Declarative description of a corpus.

    ``mode`` selects what is generated from the clean FOVs: ``sampled``
    (random artifact parameters, train/val/test), ``noisefree`` (fixed levels
    on the first test FOV of each sample) or ``graded`` (row-wise artifacts
    on every test FOV).
    """

    name: str = "custom"
    mode: str = "sampled"
    image_size: int = 512
    structures: list = field(default_factory=lambda: list(STRUCTURE_KINDS))
    experimental: list = field(default_factory=list)  # directories of clean FOV images
    stand_in_experimental: int = 0
    fovs_structure: dict = field(default_factory=lambda: {"train": 24, "val": 3, "test": 3})
    fovs_experimental: dict = field(default_factory=lambda: {"train": 16, "val": 2, "test": 2})
    artifacts: list = field(default_factory=lambda: list(ARTIFACT_KINDS))
    global_seed: int = 0

    def validate(self):
        if self.mode not in ("sampled", "noisefree", "graded"):
            raise RecipeError(f"unknown recipe mode {self.mode!r}")
        if self.image_size < 64:
            raise RecipeError("image_size must be >= 64")
        for kind in self.structures:
            if kind not in STRUCTURE_KINDS:
                raise RecipeError(f"unknown structure {kind!r}")
        for kind in self.artifacts:
            if kind not in ARTIFACT_KINDS:
                raise RecipeError(f"unknown artifact {kind!r}")
        for fovs in (self.fovs_structure, self.fovs_experimental):
            if set(fovs) != set(SPLITS) or any(int(v) < 0 for v in fovs.values()):
                raise RecipeError(f"FOV counts must give non-negative train/val/test, got {fovs}")
        if self.mode != "sampled" and self.fovs_structure["test"] + self.fovs_experimental["test"] == 0:
            raise RecipeError("prediction corpora need at least one test FOV")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Recipe":
        return cls(**d)


def preset(name: str, global_seed: int = 0, **overrides) -> Recipe:
    """Named recipes: ``paper``, ``desk``, ``noisefree``, ``graded``.

    ``paper`` reproduces the full corpus composition; without experimental
    directories its nine experimental samples are filled by parametric
    stand-ins. ``desk`` is a reduced corpus sized for CPU training.
    ``noisefree``/``graded`` derive their FOVs from the desk test split
    unless overridden (pass the full-size FOV layout via overrides to scale up).
    """
    desk = dict(
        image_size=128,
        structures=["disks", "filaments", "blobs"],
        fovs_structure={"train": 8, "val": 2, "test": 2},
        fovs_experimental={"train": 0, "val": 0, "test": 0},
    )
    if name == "paper":
        base = dict(stand_in_experimental=9)
        if overrides.get("experimental"):
            base["stand_in_experimental"] = 0
    elif name == "desk":
        base = desk
    elif name in ("noisefree", "graded"):
        base = dict(desk, mode=name)
    else:
        raise RecipeError(f"unknown preset {name!r}")
    base.update(overrides)
    return Recipe(name=name, global_seed=global_seed, **base)


@dataclass
class ManifestEntry:
    id: str
    clean_source: dict  # {"structure": StructureSpec dict} or {"path": str}
    artifact: ArtifactSpec
    split: str
    sample: str
    fov: int
    level: int | None = None
    label: float | None = None
    path: str | None = None  # image file, relative to the manifest directory

    def to_dict(self) -> dict:
        d = asdict(self)
        d["artifact"] = self.artifact.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        d = dict(d)
        d["artifact"] = ArtifactSpec.from_dict(d["artifact"])
        return cls(**d)


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    global_seed: int
    recipe: Recipe | None = None
    presets: list = field(default_factory=list)
    label_source: str | None = None
    root: Path | None = None

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entries:
            out[e.split] = out.get(e.split, 0) + 1
        return out

    def image_path(self, entry: ManifestEntry) -> Path:
        if entry.path is None:
            raise FileNotFoundError(f"entry {entry.id} has no image file")
        p = Path(entry.path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def load(self, entry: ManifestEntry) -> Image:
        return read_image(self.image_path(entry))

    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "global_seed": self.global_seed,
            "presets": list(self.presets),
            "recipe": self.recipe.to_dict() if self.recipe else None,
            "label_source": self.label_source,
            "entries": [e.to_dict() for e in self.entries],
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load_json(cls, path) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        if d.get("version") != MANIFEST_VERSION:
            raise RecipeError(f"incompatible manifest version {d.get('version')!r}")
        return cls(
            entries=[ManifestEntry.from_dict(e) for e in d["entries"]],
            global_seed=d["global_seed"],
            recipe=Recipe.from_dict(d["recipe"]) if d.get("recipe") else None,
            presets=d.get("presets", []),
            label_source=d.get("label_source"),
            root=path.parent,
        )


@dataclass(frozen=True)
class _Sample:
    name: str
    index: int
    kind: str | None = None  # structure kind, or None for experimental directories
    files: tuple = ()


def _samples(recipe: Recipe) -> list[_Sample]:
    out = [_Sample(k, i, kind=k) for i, k in enumerate(recipe.structures)]
    base = len(out)
    for j, d in enumerate(recipe.experimental):
        files = sorted(p for p in Path(d).iterdir() if p.suffix.lower() in (".png", ".tif", ".tiff", RAW_SUFFIX))
        out.append(_Sample(Path(d).name, base + j, files=tuple(str(f) for f in files)))
    base = len(out)
    for j in range(recipe.stand_in_experimental):
        out.append(_Sample(f"standin{j}", base + j, kind="mixed"))
    return out


def _fov_counts(recipe: Recipe, sample: _Sample) -> dict:
    return recipe.fovs_experimental if sample.kind is None or sample.name.startswith("standin") else recipe.fovs_structure


def _clean_sources(recipe: Recipe) -> list[tuple[_Sample, str, int, dict]]:
    """(sample, split, fov index, clean_source) for every clean FOV of the recipe."""
    out = []
    canvas = (recipe.image_size, recipe.image_size)
    for sample in _samples(recipe):
        counts = _fov_counts(recipe, sample)
        offset = 0
        for s_idx, split in enumerate(SPLITS):
            for fov in range(int(counts[split])):
                if sample.kind is None:
                    if offset >= len(sample.files):
                        raise RecipeError(
                            f"sample {sample.name}: needs {sum(counts.values())} FOV files, found {len(sample.files)}"
                        )
                    source = {"path": sample.files[offset]}
                else:
                    seed = derive_seed(recipe.global_seed, 1, sample.index, s_idx, fov)
                    overrides = {}
                    if sample.name.startswith("standin"):
                        # each stand-in sample gets its own object density and size scale
                        srng = np.random.default_rng(derive_seed(recipe.global_seed, 3, sample.index))
                        scale = recipe.image_size / 512
                        lo = float(srng.uniform(1.5, 6.0))
                        overrides = dict(
                            object_count=max(int(srng.integers(20, 90) * scale * scale), 3),
                            size_range=(max(lo * scale, 0.8), max(lo * srng.uniform(1.5, 4.0) * scale, 1.0)),
                        )
                    spec = make_spec(sample.kind, canvas=canvas, seed=seed, **overrides)
                    source = {"structure": spec.to_dict()}
                out.append((sample, split, fov, source))
                offset += 1
    return out


def plan_dataset(recipe: Recipe) -> DatasetManifest:
    """Enumerate manifest entries (no pixels rendered)."""
    recipe.validate()
    entries: list[ManifestEntry] = []
    sources = _clean_sources(recipe)
    for n, (sample, split, fov, source) in enumerate(sources):
        if recipe.mode == "sampled":
            for a_idx, kind in enumerate(recipe.artifacts):
                rng = np.random.default_rng(derive_seed(recipe.global_seed, 2, n, a_idx))
                art = sample_artifact_params(kind, rng)
                eid = f"{split}_{sample.name}_f{fov:03d}_{kind}"
                entries.append(ManifestEntry(eid, source, art, split, sample.name, fov))
            continue
        if split != "test":
            continue
        if recipe.mode == "noisefree":
            if fov != 0:
                continue
            zero = {k: 0.0 for k in NOISE_KEYS}
            for kind, (name, levels) in NOISEFREE_LEVELS.items():
                for lvl, value in enumerate(levels, start=1):
                    art = ArtifactSpec(kind, {name: value, **zero}, 0)
                    eid = f"nf_{sample.name}_{kind}_l{lvl}"
                    entries.append(ManifestEntry(eid, source, art, "predict", sample.name, fov, level=lvl))
            for rep in range(NOISEFREE_REPEATS):
                seed = derive_seed(recipe.global_seed, 4, n, rep)
                art = ArtifactSpec("reference", {k: NOISEFREE_REFERENCE_NOISE for k in NOISE_KEYS}, seed)
                eid = f"nf_{sample.name}_reference_r{rep + 1}"
                entries.append(ManifestEntry(eid, source, art, "predict", sample.name, fov, level=0))
        else:
            for g_idx, kind in enumerate(GRADED_INCREMENTS):
                params = {f"{k}_increase": v for k, v in GRADED_INCREMENTS[kind].items()}
                params.update({k: BASELINE_NOISE for k in NOISE_KEYS})
                seed = derive_seed(recipe.global_seed, 5, n, g_idx)
                art = ArtifactSpec(f"graded_{kind}", params, seed)
                eid = f"gr_{sample.name}_f{fov:03d}_{kind}"
                entries.append(ManifestEntry(eid, source, art, "predict", sample.name, fov))
    return DatasetManifest(entries, recipe.global_seed, recipe, presets=[recipe.name])


def render_clean(source: dict, size: int) -> Image:
    if "structure" in source:
        return gen_structure(StructureSpec.from_dict(source["structure"]))
    img = ingest_clean(source["path"]).image
    h, w = img.shape
    if h < size or w < size:
        raise RecipeError(f"{source['path']}: {h}x{w} smaller than image_size {size}")
    y0, x0 = (h - size) // 2, (w - size) // 2
    return rescale_unit(img.with_pixels(img.pixels[y0 : y0 + size, x0 : x0 + size]))


def build_dataset(recipe: Recipe, out_dir, workers: int = 1) -> DatasetManifest:
    """Render every entry of ``recipe`` to ``out_dir/images`` and write ``manifest.json``.

    Output is a pure function of the recipe; ``workers`` only changes speed.
    """
    manifest = plan_dataset(recipe)
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RecipeError(f"cannot write to {out_dir}: {exc}") from exc

    groups: dict[str, list[ManifestEntry]] = {}
    for e in manifest.entries:
        groups.setdefault(json.dumps(e.clean_source, sort_keys=True), []).append(e)

    def work(item):
        key, entries = item
        clean = render_clean(json.loads(key), recipe.image_size)
        for e in entries:
            rel = Path("images") / f"{e.id}{RAW_SUFFIX}"
            write_image(apply_artifact(clean, e.artifact), out_dir / rel)
            e.path = str(rel)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(work, groups.items()))
    else:
        for item in groups.items():
            work(item)
    manifest.root = out_dir
    manifest.save(out_dir / "manifest.json")
    log.info("wrote %d images to %s", len(manifest.entries), out_dir)
    return manifest


def with_recipe_mode(recipe: Recipe, mode: str) -> Recipe:
    return replace(recipe, mode=mode, name=mode)
