"""Image container, intensity normalization, patch tiling and file I/O."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PATCH_SIZE = 32
UINT16_MAX = 65535

RAW_SUFFIX = ".f32"
FORMATS = ("raw", "png", "tiff")


class ImageFormatError(ValueError):
    """Raised for unreadable, multi-channel or unsupported-depth images."""


class PatchGeometryError(ValueError):
    """Raised when an image is too small to tile with model patches."""


@dataclass(frozen=True, eq=False)
class Image:
    """Single-channel 2-D intensity raster.

    Pixels are held as a read-only float32 array (the on-disk raw precision,
    so raw I/O roundtrips bit-exactly) and instances can be shared freely
    between threads.
    """

    pixels: np.ndarray
    pixel_size: float | None = None  # micrometers per pixel

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ImageFormatError(f"single-channel 2-D image required, got shape {px.shape}")
        if px.size == 0:
            raise ImageFormatError("empty image")
        px = np.array(px, dtype=np.float32, copy=True)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def with_pixels(self, pixels: np.ndarray) -> "Image":
        return Image(pixels, pixel_size=self.pixel_size)


@dataclass(frozen=True, eq=False)
class PatchGrid:
    patches: np.ndarray  # (rows*cols, 32, 32), row-major
    rows: int
    cols: int
    origin_offsets: list[tuple[int, int]] = field(default_factory=list)
    patch_size: int = PATCH_SIZE
    cropped: tuple[int, int] = (0, 0)  # rows/cols of pixels dropped at bottom/right

    def __len__(self) -> int:
        return self.rows * self.cols

    def reassemble(self) -> np.ndarray:
        """Inverse of the tiling; returns the (cropped) image."""
        p = self.patch_size
        blocks = self.patches.reshape(self.rows, self.cols, p, p)
        return blocks.transpose(0, 2, 1, 3).reshape(self.rows * p, self.cols * p)


def rescale_unit(image: Image) -> Image:
    """Clamp negatives to zero, then min-max rescale to [0, 1].

    Constant images map to all zeros.
    """
    px = np.clip(np.asarray(image.pixels, dtype=np.float64), 0.0, None)
    lo, hi = px.min(), px.max()
    if hi - lo <= 0:
        return image.with_pixels(np.zeros_like(px))
    out = (px - lo) / (hi - lo)
    # guard against round-off leaving the max a hair below 1
    out[px == hi] = 1.0
    out[px == lo] = 0.0
    return image.with_pixels(out)


def partition_patches(image: Image, patch_size: int = PATCH_SIZE) -> PatchGrid:
    """Tile ``image`` into non-overlapping row-major patches.

    A bottom/right remainder that does not fill a whole patch is cropped and a
    warning is emitted. Patch intensities are left untouched.
    """
    h, w = image.shape
    if h < patch_size or w < patch_size:
        raise PatchGeometryError(f"image {h}x{w} smaller than one {patch_size}x{patch_size} patch")
    rows, cols = h // patch_size, w // patch_size
    crop = (h - rows * patch_size, w - cols * patch_size)
    if crop != (0, 0):
        warnings.warn(
            f"image {h}x{w} not divisible by {patch_size}; cropping {crop[0]} rows and {crop[1]} cols",
            stacklevel=2,
        )
    px = image.pixels[: rows * patch_size, : cols * patch_size]
    patches = (
        px.reshape(rows, patch_size, cols, patch_size)
        .transpose(0, 2, 1, 3)
        .reshape(rows * cols, patch_size, patch_size)
    )
    offsets = [(r * patch_size, c * patch_size) for r in range(rows) for c in range(cols)]
    patches = np.ascontiguousarray(patches)
    patches.setflags(write=False)
    return PatchGrid(patches, rows, cols, offsets, patch_size, crop)


def _infer_format(path: Path, fmt: str | None) -> str:
    if fmt is not None:
        fmt = fmt.lower()
        if fmt == "tif":
            fmt = "tiff"
        if fmt not in FORMATS:
            raise ImageFormatError(f"unsupported format {fmt!r}")
        return fmt
    suffix = path.suffix.lower()
    if suffix == RAW_SUFFIX:
        return "raw"
    if suffix == ".png":
        return "png"
    if suffix in (".tif", ".tiff"):
        return "tiff"
    raise ImageFormatError(f"cannot infer image format from {path.name!r}")


def _sidecar(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def _from_integer(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.uint16:
        return arr.astype(np.float64) / UINT16_MAX
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if np.issubdtype(arr.dtype, np.floating):
        return arr.astype(np.float64)
    raise ImageFormatError(f"unsupported bit depth / dtype {arr.dtype}")


def _check_single_channel(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 3 and 1 in (arr.shape[0], arr.shape[-1]):
        arr = arr.squeeze()
    if arr.ndim != 2:
        raise ImageFormatError(f"single-channel required, got array of shape {arr.shape}")
    return arr


def read_image(path, fmt: str | None = None) -> Image:
    path = Path(path)
    fmt = _infer_format(path, fmt)
    if fmt == "raw":
        meta = json.loads(_sidecar(path).read_text())
        h, w = int(meta["height"]), int(meta["width"])
        data = np.fromfile(path, dtype="<f4")
        if data.size != h * w:
            raise ImageFormatError(f"{path.name}: expected {h * w} floats, found {data.size}")
        return Image(data.reshape(h, w), pixel_size=meta.get("pixel_size_um"))
    if fmt == "png":
        from PIL import Image as PILImage

        try:
            with PILImage.open(path) as im:
                if im.mode not in ("I;16", "I;16B", "I;16L", "I", "L"):
                    raise ImageFormatError(f"{path.name}: single-channel required (mode {im.mode})")
                arr = np.array(im)
        except (OSError, SyntaxError) as exc:
            raise ImageFormatError(f"{path.name}: {exc}") from exc
        if arr.dtype == np.int32:
            # PIL promotes 16-bit PNGs to mode "I"
            if arr.min() < 0 or arr.max() > UINT16_MAX:
                raise ImageFormatError(f"{path.name}: unsupported bit depth")
            arr = arr.astype(np.uint16)
        arr = _check_single_channel(arr)
        return Image(_from_integer(arr))
    import tifffile

    try:
        arr = tifffile.imread(path)
    except Exception as exc:  # tifffile raises a variety of types on corrupt input
        raise ImageFormatError(f"{path.name}: {exc}") from exc
    arr = _check_single_channel(np.asarray(arr))
    return Image(_from_integer(arr))


def _to_uint16(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * UINT16_MAX).astype(np.uint16)


def write_image(image: Image, path, fmt: str | None = None) -> Path:
    path = Path(path)
    fmt = _infer_format(path, fmt)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "raw":
        image.pixels.astype("<f4").tofile(path)
        meta = {"height": image.height, "width": image.width, "pixel_size_um": image.pixel_size}
        _sidecar(path).write_text(json.dumps(meta))
    elif fmt == "png":
        from PIL import Image as PILImage

        PILImage.fromarray(_to_uint16(image.pixels)).save(path)
    else:
        import tifffile

        tifffile.imwrite(path, _to_uint16(image.pixels))
    return path
