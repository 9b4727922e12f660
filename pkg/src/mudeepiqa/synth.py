"""Clean sample generation: parametric structures and ingestion of user images."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erfc

from .imagecore import Image, read_image, rescale_unit

STRUCTURE_KINDS = ("disks", "filaments", "blobs", "rings", "grid", "mixed")


@dataclass(frozen=True)
class StructureSpec:
    kind: str
    object_count: int
    size_range: tuple[float, float]
    orientation_range: tuple[float, float] = (0.0, np.pi)
    intensity_range: tuple[float, float] = (0.5, 1.0)
    canvas: tuple[int, int] = (512, 512)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in STRUCTURE_KINDS:
            raise ValueError(f"unknown structure kind {self.kind!r}")
        if self.object_count < 0:
            raise ValueError("object_count must be >= 0")
        for name in ("size_range", "orientation_range", "intensity_range"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise ValueError(f"{name} must be a finite (min, max) pair, got {(lo, hi)}")
        if self.size_range[0] <= 0:
            raise ValueError("size_range must be positive")
        if min(self.canvas) < 64:
            raise ValueError("canvas must be at least 64x64")
        # normalize sequences coming from JSON into tuples
        for name in ("size_range", "orientation_range", "intensity_range", "canvas"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StructureSpec":
        return cls(**d)


@dataclass
class _Canvas:
    """Accumulator that renders objects only inside their bounding boxes."""

    height: int
    width: int
    buf: np.ndarray = field(init=False)

    def __post_init__(self):
        self.buf = np.zeros((self.height, self.width), dtype=np.float64)

    def window(self, cy, cx, reach):
        y0, y1 = max(int(np.floor(cy - reach)), 0), min(int(np.ceil(cy + reach)) + 1, self.height)
        x0, x1 = max(int(np.floor(cx - reach)), 0), min(int(np.ceil(cx + reach)) + 1, self.width)
        if y0 >= y1 or x0 >= x1:
            return None
        yy, xx = np.mgrid[y0:y1, x0:x1]
        return (slice(y0, y1), slice(x0, x1)), yy.astype(np.float64), xx.astype(np.float64)


# soft edges: a hard boundary blurred by a unit-width Gaussian
def _soft_step(signed_dist):
    return 0.5 * erfc(signed_dist / np.sqrt(2.0))


def _draw_disk(cv, rng, spec, amp):
    r = rng.uniform(*spec.size_range)
    cy, cx = rng.uniform(0, cv.height), rng.uniform(0, cv.width)
    win = cv.window(cy, cx, r + 5)
    if win is not None:
        sl, yy, xx = win
        d = np.hypot(yy - cy, xx - cx)
        cv.buf[sl] += amp * _soft_step(d - r)
    return cy, cx, r


def _draw_segment(cv, cy, cx, length, width, theta, amp):
    dy, dx = np.sin(theta), np.cos(theta)
    half = length / 2
    win = cv.window(cy, cx, half + 4 * width + 2)
    if win is None:
        return
    sl, yy, xx = win
    py, px = yy - cy, xx - cx
    t = np.clip(py * dy + px * dx, -half, half)
    d2 = (py - t * dy) ** 2 + (px - t * dx) ** 2
    cv.buf[sl] += amp * np.exp(-d2 / (2 * width**2))


def _draw_filament(cv, rng, spec, amp):
    width = rng.uniform(*spec.size_range)
    length = rng.uniform(0.2, 0.6) * min(cv.height, cv.width)
    theta = rng.uniform(*spec.orientation_range)
    _draw_segment(cv, rng.uniform(0, cv.height), rng.uniform(0, cv.width), length, width, theta, amp)


def _draw_blob(cv, rng, spec, amp):
    s_major = rng.uniform(*spec.size_range)
    s_minor = s_major * rng.uniform(0.5, 1.0)
    theta = rng.uniform(*spec.orientation_range)
    cy, cx = rng.uniform(0, cv.height), rng.uniform(0, cv.width)
    win = cv.window(cy, cx, 4 * s_major)
    if win is None:
        return
    sl, yy, xx = win
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    cv.buf[sl] += amp * np.exp(-0.5 * ((u / s_major) ** 2 + (v / s_minor) ** 2))


def _draw_ring(cv, rng, spec, amp):
    r = rng.uniform(*spec.size_range)
    thickness = max(1.0, r / 6)
    cy, cx = rng.uniform(0, cv.height), rng.uniform(0, cv.width)
    win = cv.window(cy, cx, r + 4 * thickness)
    if win is None:
        return
    sl, yy, xx = win
    d = np.hypot(yy - cy, xx - cx)
    cv.buf[sl] += amp * np.exp(-((d - r) ** 2) / (2 * thickness**2))


def _draw_grid(cv, rng, spec, n_lines):
    """Two families of parallel lines, ``n_lines`` each, rotated as a whole."""
    theta = rng.uniform(*spec.orientation_range)
    width = rng.uniform(*spec.size_range)
    span = np.hypot(cv.height, cv.width)
    spacing = span / max(n_lines, 1)
    cy, cx = cv.height / 2, cv.width / 2
    for family, angle in enumerate((theta, theta + np.pi / 2)):
        normal = angle + np.pi / 2
        for k in range(n_lines):
            offset = (k - (n_lines - 1) / 2) * spacing
            amp = rng.uniform(*spec.intensity_range)
            _draw_segment(
                cv, cy + offset * np.sin(normal), cx + offset * np.cos(normal), span, width, angle, amp
            )


_DRAWERS = {
    "disks": _draw_disk,
    "filaments": _draw_filament,
    "blobs": _draw_blob,
    "rings": _draw_ring,
}


def gen_structure(spec: StructureSpec) -> Image:
    """Render a clean, artifact-free image from ``spec``.

    Objects are accumulated additively on a zero background and the result is
    rescaled to [0, 1]. Output depends only on ``spec``.
    """
    rng = np.random.default_rng(spec.seed)
    cv = _Canvas(*spec.canvas)
    if spec.kind == "grid":
        if spec.object_count:
            _draw_grid(cv, rng, spec, spec.object_count)
    elif spec.kind == "mixed":
        kinds = list(_DRAWERS)
        for _ in range(spec.object_count):
            kind = kinds[rng.integers(len(kinds))]
            _DRAWERS[kind](cv, rng, spec, rng.uniform(*spec.intensity_range))
    else:
        draw = _DRAWERS[spec.kind]
        for _ in range(spec.object_count):
            draw(cv, rng, spec, rng.uniform(*spec.intensity_range))
    return rescale_unit(Image(cv.buf))


def disk_layout(spec: StructureSpec) -> list[tuple[float, float, float]]:
    """Centers and radii that ``gen_structure`` draws for a ``disks`` spec."""
    if spec.kind != "disks":
        raise ValueError("disk_layout only applies to disks specs")
    rng = np.random.default_rng(spec.seed)
    out = []
    for _ in range(spec.object_count):
        rng.uniform(*spec.intensity_range)
        r = rng.uniform(*spec.size_range)
        out.append((rng.uniform(0, spec.canvas[0]), rng.uniform(0, spec.canvas[1]), r))
    return out


def default_structures(canvas=(512, 512)) -> dict[str, dict]:
    """Parameter templates for the six structure classes, scaled to ``canvas``.

    Counts and sizes are chosen to span sparse/thick to dense/thin content.
    """
    scale = min(canvas) / 512
    s = lambda lo, hi: (max(lo * scale, 0.8), max(hi * scale, 0.8))  # noqa: E731
    n = lambda k: max(int(round(k * scale * scale)), 3)  # noqa: E731
    return {
        "disks": dict(kind="disks", object_count=n(40), size_range=s(6, 18)),
        "filaments": dict(kind="filaments", object_count=n(60), size_range=(0.8, 1.8)),
        "blobs": dict(kind="blobs", object_count=n(50), size_range=s(4, 14)),
        "rings": dict(kind="rings", object_count=n(25), size_range=s(8, 24)),
        "grid": dict(kind="grid", object_count=max(int(round(12 * scale)), 3), size_range=(1.0, 2.5)),
        "mixed": dict(kind="mixed", object_count=n(60), size_range=s(2, 14)),
    }


def make_spec(kind: str, canvas=(512, 512), seed: int = 0, **overrides) -> StructureSpec:
    params = dict(default_structures(canvas)[kind])
    params.update(overrides)
    return StructureSpec(canvas=tuple(canvas), seed=seed, **params)


@dataclass(frozen=True, eq=False)
class CleanSample:
    image: Image
    sample: str
    source: str


def ingest_clean(path, sample: str | None = None) -> CleanSample:
    """Read a user-provided clean image and rescale it to [0, 1]."""
    path = Path(path)
    img = rescale_unit(read_image(path))
    return CleanSample(img, sample or path.parent.name, str(path))
