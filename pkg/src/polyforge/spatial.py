"""Geometry: bounding-box/mask conversion, mask downscaling to latent
resolution, box extraction from generated masks, latent codecs standing in
for a pretrained VAE, center-crop/resize, and dihedral augmentations.

Masks live in {-1, +1} on the same scale as images, so the mask channel
needs no special treatment under noising.  Dataset manifests are JSON lists
of {image_path, width, height, boxes} with image paths relative to the
manifest's directory; images are 8-bit PNG mapped to [-1, 1] by v/127.5 - 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError, ParameterError, ShapeError

FOREGROUND = 1.0
BACKGROUND = -1.0

# components smaller than this fraction of the image are generator speckle
DEFAULT_MIN_AREA_FRAC = 0.001


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box: top-left corner (x, y), extents (w, h), in pixels."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.x < 0 or self.y < 0:
            raise ParameterError(f"box corner must be non-negative: {self}")
        if self.w < 1 or self.h < 1:
            raise ParameterError(f"box extents must be >= 1: {self}")

    @property
    def area(self) -> int:
        return self.w * self.h

    def to_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_list(cls, v) -> "BBox":
        x, y, w, h = (int(c) for c in v)
        return cls(x, y, w, h)

    def check_bounds(self, height: int, width: int) -> None:
        if self.x + self.w > width or self.y + self.h > height:
            raise DataError(f"box {self} exceeds image bounds {width}x{height}")


@dataclass
class LabeledSample:
    """Image tensor + boxes + the binary mask derived from the boxes."""

    image: np.ndarray  # (C, H, W) in [-1, 1]
    boxes: list[BBox]
    mask: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.image.ndim != 3:
            raise ShapeError(f"image must be (C, H, W), got {self.image.shape}")
        if self.mask is None:
            _, h, w = self.image.shape
            self.mask = boxes_to_mask(self.boxes, h, w)


def make_sample(image: np.ndarray, boxes: list[BBox]) -> LabeledSample:
    return LabeledSample(image=np.asarray(image, dtype=np.float32), boxes=list(boxes))


# ---------------------------------------------------------------------------
# boxes <-> masks


def boxes_to_mask(boxes, height: int, width: int) -> np.ndarray:
    """Union of box rectangles as a (1, H, W) float32 mask in {-1, +1}."""
    mask = np.full((1, height, width), BACKGROUND, dtype=np.float32)
    for b in boxes:
        b.check_bounds(height, width)
        mask[0, b.y : b.y + b.h, b.x : b.x + b.w] = FOREGROUND
    return mask


def downscale_mask(mask: np.ndarray, f: int) -> np.ndarray:
    """Any-coverage downscale: a latent cell is foreground iff any pixel in
    its f x f block is.  Small targets survive at latent resolution."""
    if f < 1:
        raise ParameterError(f"factor must be >= 1, got {f}")
    if f == 1:
        return mask.copy()
    m = np.asarray(mask)
    squeeze = m.ndim == 2
    if squeeze:
        m = m[None]
    c, h, w = m.shape
    if h % f or w % f:
        raise ShapeError(f"mask {h}x{w} not divisible by factor {f}")
    out = m.reshape(c, h // f, f, w // f, f).max(axis=(2, 4))
    return out[0] if squeeze else out


def extract_boxes(
    mask: np.ndarray,
    threshold: float = 0.0,
    min_area_frac: float = DEFAULT_MIN_AREA_FRAC,
) -> list[BBox]:
    """Tight boxes around 8-connected components of mask > threshold.

    Components smaller than min_area_frac of the image area are discarded.
    Returned in label (raster) order.
    """
    m = np.asarray(mask)
    if m.ndim == 3:
        if m.shape[0] != 1:
            raise ShapeError(f"mask must be single-channel, got {m.shape}")
        m = m[0]
    elif m.ndim != 2:
        raise ShapeError(f"mask must be 2D or (1, H, W), got {m.shape}")
    h, w = m.shape
    fg = m > threshold
    labels, count = ndimage.label(fg, structure=np.ones((3, 3), dtype=np.int8))
    min_area = min_area_frac * h * w
    boxes = []
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        ys, xs = sl
        size = int(np.count_nonzero(labels[sl] == lab))
        if size < min_area:
            continue
        boxes.append(BBox(xs.start, ys.start, xs.stop - xs.start, ys.stop - ys.start))
    return boxes


# ---------------------------------------------------------------------------
# resize / crop


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resampling of a (C, H, W) tensor."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    sy = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    sx = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0).astype(img.dtype)
    fx = (sx - x0).astype(img.dtype)
    fy = fy[None, :, None]
    fx = fx[None, None, :]
    top = img[:, y0[:, None], x0[None, :]] * (1 - fx) + img[:, y0[:, None], x1[None, :]] * fx
    bot = img[:, y1[:, None], x0[None, :]] * (1 - fx) + img[:, y1[:, None], x1[None, :]] * fx
    return top * (1 - fy) + bot * fy


def center_crop_resize(image: np.ndarray, boxes: list[BBox], target: int) -> LabeledSample:
    """Crop to the centered square of side min(H, W), bilinearly resize to
    target x target, and push boxes through the same affine map (clipped;
    boxes fully outside the crop are dropped)."""
    if target < 1:
        raise ParameterError(f"target must be >= 1, got {target}")
    c, h, w = image.shape
    side = min(h, w)
    ox = (w - side) // 2
    oy = (h - side) // 2
    crop = image[:, oy : oy + side, ox : ox + side]
    out = bilinear_resize(crop, target, target)
    scale = target / side
    new_boxes = []
    for b in boxes:
        x0 = (b.x - ox) * scale
        y0 = (b.y - oy) * scale
        x1 = (b.x + b.w - ox) * scale
        y1 = (b.y + b.h - oy) * scale
        x0c, x1c = max(0.0, x0), min(float(target), x1)
        y0c, y1c = max(0.0, y0), min(float(target), y1)
        xi, yi = int(round(x0c)), int(round(y0c))
        wi, hi = int(round(x1c)) - xi, int(round(y1c)) - yi
        if wi >= 1 and hi >= 1:
            new_boxes.append(BBox(xi, yi, wi, hi))
    return make_sample(out.astype(np.float32), new_boxes)


# ---------------------------------------------------------------------------
# dihedral group

# each op is a sequence of primitives applied left to right:
# T = transpose, H = horizontal flip, V = vertical flip
_DIHEDRAL_OPS = ("", "TV", "HV", "TH", "H", "V", "T", "THV")


def _prim_image(p: str, img: np.ndarray) -> np.ndarray:
    if p == "T":
        return img.swapaxes(-1, -2)
    if p == "H":
        return img[..., ::-1]
    return img[..., ::-1, :]  # V


def _prim_box(p: str, b: BBox, side: int) -> BBox:
    if p == "T":
        return BBox(b.y, b.x, b.h, b.w)
    if p == "H":
        return BBox(side - b.x - b.w, b.y, b.w, b.h)
    return BBox(b.x, side - b.y - b.h, b.w, b.h)  # V


def dihedral_augment(sample: LabeledSample, op_index: int) -> LabeledSample:
    """Apply the op_index-th element of D4 identically to image, mask, boxes."""
    if not (0 <= op_index <= 7):
        raise ParameterError(f"op_index must be in 0..7, got {op_index}")
    c, h, w = sample.image.shape
    if h != w:
        raise ShapeError(f"dihedral ops need a square image, got {h}x{w}")
    img = sample.image
    mask = sample.mask
    boxes = list(sample.boxes)
    for p in _DIHEDRAL_OPS[op_index]:
        img = _prim_image(p, img)
        mask = _prim_image(p, mask)
        boxes = [_prim_box(p, b, h) for b in boxes]
    return LabeledSample(image=np.ascontiguousarray(img), boxes=boxes,
                         mask=np.ascontiguousarray(mask))


# ---------------------------------------------------------------------------
# latent codecs (VAE stand-ins)


@dataclass(frozen=True)
class LatentCodec:
    """Spatial compressor relating pixel and latent resolutions by `factor`."""

    kind: str = "identity"
    factor: int = 1

    def __post_init__(self):
        if self.kind not in ("identity", "pool"):
            raise ParameterError(f"codec kind must be identity or pool, got {self.kind!r}")
        if self.kind == "identity" and self.factor != 1:
            raise ParameterError("identity codec has factor 1")
        if self.kind == "pool" and self.factor < 2:
            raise ParameterError("pool codec needs factor >= 2")

    @classmethod
    def parse(cls, spec_str: str) -> "LatentCodec":
        if spec_str == "identity":
            return cls()
        if spec_str.startswith("pool:"):
            return cls("pool", int(spec_str.split(":", 1)[1]))
        raise ParameterError(f"cannot parse codec {spec_str!r} (identity | pool:F)")


def codec_encode(codec: LatentCodec, image: np.ndarray) -> np.ndarray:
    if codec.kind == "identity":
        return image
    f = codec.factor
    c, h, w = image.shape[-3:]
    if h % f or w % f:
        raise ShapeError(f"image {h}x{w} not divisible by codec factor {f}")
    lead = image.shape[:-3]
    x = image.reshape(*lead, c, h // f, f, w // f, f)
    return x.mean(axis=(-3, -1))


def codec_decode(codec: LatentCodec, latent: np.ndarray) -> np.ndarray:
    if codec.kind == "identity":
        return latent
    f = codec.factor
    if latent.ndim == 3:
        return bilinear_resize(latent, latent.shape[1] * f, latent.shape[2] * f)
    return np.stack([bilinear_resize(v, v.shape[1] * f, v.shape[2] * f) for v in latent])


# ---------------------------------------------------------------------------
# images and manifests


def image_to_unit(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32) / 127.5) - 1.0


def unit_to_image(img: np.ndarray) -> np.ndarray:
    v = np.clip((img + 1.0) * 127.5, 0.0, 255.0)
    return np.round(v).astype(np.uint8)


def load_image(path: str | Path) -> np.ndarray:
    """8-bit PNG -> (C, H, W) float32 in [-1, 1]."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return image_to_unit(arr)


def save_image(path: str | Path, img: np.ndarray) -> None:
    """(C, H, W) float in [-1, 1] -> 8-bit PNG (grayscale or RGB)."""
    arr = unit_to_image(np.asarray(img))
    if arr.shape[0] == 1:
        pil = Image.fromarray(arr[0], mode="L")
    elif arr.shape[0] == 3:
        pil = Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")
    else:
        raise ShapeError(f"can only save 1- or 3-channel images, got {arr.shape[0]}")
    pil.save(path, format="PNG")


@dataclass
class ManifestEntry:
    image_path: str
    width: int
    height: int
    boxes: list[BBox]

    def to_dict(self) -> dict:
        return {
            "boxes": [b.to_list() for b in self.boxes],
            "height": self.height,
            "image_path": self.image_path,
            "width": self.width,
        }


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    if not isinstance(entries, list):
        raise DataError(f"manifest {path} must be a JSON list")
    out = []
    for i, e in enumerate(entries):
        try:
            out.append(
                ManifestEntry(
                    image_path=e["image_path"],
                    width=int(e["width"]),
                    height=int(e["height"]),
                    boxes=[BBox.from_list(b) for b in e["boxes"]],
                )
            )
        except (KeyError, TypeError, ValueError) as err:
            raise DataError(f"manifest {path} entry {i} malformed: {err}") from err
    return out


def save_manifest(path: str | Path, entries: list[ManifestEntry]) -> None:
    payload = [e.to_dict() for e in entries]
    Path(path).write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")))


def load_sample(manifest_path: str | Path, entry: ManifestEntry) -> LabeledSample:
    img = load_image(Path(manifest_path).parent / entry.image_path)
    if img.shape[1:] != (entry.height, entry.width):
        raise DataError(
            f"{entry.image_path}: image is {img.shape[1:]}, manifest says "
            f"{(entry.height, entry.width)}"
        )
    return make_sample(img, entry.boxes)
