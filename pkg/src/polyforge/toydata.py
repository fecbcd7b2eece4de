"""Synthetic blob datasets for desk-scale runs.

Each image holds 1-3 soft-edged elliptical bright blobs on a textured dark
background; ground-truth boxes are the tight rectangles around each blob's
above-zero region, so thresholding the image at 0 recovers the annotation.
The mask<->content correlation mimics the real task well enough to exercise
mask-conditioned generation end to end.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ParameterError
from .spatial import BBox, ManifestEntry, bilinear_resize, save_image, save_manifest


def _texture(rng: np.random.Generator, res: int, channels: int) -> np.ndarray:
    """Dark background with smooth low-frequency structure."""
    coarse = max(2, res // 8)
    tex = rng.uniform(0.0, 1.0, size=(1, coarse, coarse))
    tex = bilinear_resize(tex, res, res)
    bg = -0.9 + 0.35 * tex
    return np.repeat(bg, channels, axis=0).astype(np.float32)


BLOB_STYLES = ("filled", "ring", "crescent", "gradient")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -60.0, 60.0)))


def _soft_ellipse(rng, res, frac_lo, frac_hi, shift=(0.0, 0.0)):
    a = rng.uniform(frac_lo, frac_hi) * res / 2.0
    b = rng.uniform(frac_lo, frac_hi) * res / 2.0
    theta = rng.uniform(0.0, np.pi)
    margin = max(a, b) + 1.0
    if 2 * margin >= res:
        margin = res / 2.0 - 1.0
    cx = rng.uniform(margin, res - margin)
    cy = rng.uniform(margin, res - margin)
    softness = rng.uniform(0.10, 0.18)
    ys, xs = np.mgrid[0:res, 0:res]
    dx, dy = xs + 0.5 - cx - shift[0] * a, ys + 0.5 - cy - shift[1] * b
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
    q = u * u + v * v
    s = _sigmoid((1.0 - q) / softness)
    return s, (cx, cy, a, b, theta, softness), (xs, ys)


def _blob_field(
    rng: np.random.Generator,
    res: int,
    frac_lo: float,
    frac_hi: float,
    style: str = "filled",
) -> np.ndarray | None:
    """One blob as a field in [-1, ~brightness]; None if degenerate.

    Styles vary the interior appearance (filled disc, annulus, crescent,
    gradient fill) while the above-zero support stays a single connected
    region whose tight bbox is the ground truth.
    """
    s, geom, (xs, ys) = _soft_ellipse(rng, res, frac_lo, frac_hi)
    cx, cy, a, b, theta, softness = geom
    bright = rng.uniform(0.55, 0.95)
    profile = s
    if style == "ring":
        dx, dy = xs + 0.5 - cx, ys + 0.5 - cy
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
        q = u * u + v * v
        r_in = rng.uniform(0.25, 0.5)
        inner = _sigmoid((r_in - q) / softness)
        profile = np.clip(s - 0.85 * inner, 0.0, 1.0)
    elif style == "crescent":
        off = rng.uniform(0.4, 0.8)
        ang = rng.uniform(0.0, 2 * np.pi)
        dx = xs + 0.5 - cx - off * a * np.cos(ang)
        dy = ys + 0.5 - cy - off * b * np.sin(ang)
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
        q = u * u + v * v
        bite = _sigmoid((1.0 - q) / softness)
        profile = np.clip(s - 0.9 * bite, 0.0, 1.0)
    elif style == "gradient":
        ang = rng.uniform(0.0, 2 * np.pi)
        ramp = ((xs - cx) * np.cos(ang) + (ys - cy) * np.sin(ang)) / max(a, b)
        gain = 0.35 + 0.65 * np.clip(0.5 + 0.5 * ramp, 0.0, 1.0)
        profile = s * gain
    field = -1.0 + (bright + 1.0) * profile
    if not np.any(field > 0):
        return None
    return field.astype(np.float32)


def render_toy_image(
    rng: np.random.Generator,
    res: int,
    channels: int = 1,
    blob_count: tuple[int, int] = (1, 3),
    blob_frac: tuple[float, float] = (0.25, 0.55),
    distractors: tuple[int, int] = (0, 0),
    styles: tuple[str, ...] = ("filled",),
) -> tuple[np.ndarray, list[BBox]]:
    """Render one image and its per-blob ground-truth boxes.

    `styles` widens appearance diversity (small subsets then undercover the
    distribution); `distractors` adds unannotated sub-threshold smudges (peak
    intensity below 0, the annotation cut), so objectness needs real data to
    calibrate.
    """
    for st in styles:
        if st not in BLOB_STYLES:
            raise ParameterError(f"unknown blob style {st!r}; choose from {BLOB_STYLES}")
    img = _texture(rng, res, channels)
    k = int(rng.integers(blob_count[0], blob_count[1] + 1))
    boxes: list[BBox] = []
    for _ in range(k):
        style = styles[int(rng.integers(len(styles)))]
        field = _blob_field(rng, res, blob_frac[0], blob_frac[1], style)
        if field is None:
            continue
        pos = field > 0
        ys, xs = np.nonzero(pos)
        boxes.append(
            BBox(int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1),
                 int(ys.max() - ys.min() + 1))
        )
        if channels == 1:
            img[0] = np.maximum(img[0], field)
        else:
            tint = rng.uniform(0.75, 1.0, size=channels)
            tinted = -1.0 + (field + 1.0) * tint[:, None, None]
            img = np.maximum(img, tinted.astype(np.float32))
    kd = int(rng.integers(distractors[0], distractors[1] + 1))
    for _ in range(kd):
        style = styles[int(rng.integers(len(styles)))]
        field = _blob_field(rng, res, blob_frac[0], blob_frac[1], style)
        if field is None:
            continue
        # rescale so the smudge tops out just under the annotation cut
        top = float(field.max())
        peak = rng.uniform(-0.35, -0.05)
        smudge = -1.0 + (field + 1.0) * ((peak + 1.0) / (top + 1.0))
        img = np.maximum(img, smudge.astype(np.float32))
    return np.clip(img, -1.0, 1.0), boxes


def make_toy_dataset(
    out_dir: str | Path,
    n: int,
    res: int,
    seed: int,
    channels: int = 1,
    blob_count: tuple[int, int] = (1, 3),
    blob_frac: tuple[float, float] = (0.25, 0.55),
    distractors: tuple[int, int] = (0, 0),
    styles: tuple[str, ...] = ("filled",),
) -> Path:
    """Write n PNG images plus manifest.json under out_dir; returns the
    manifest path.  Byte-identical across runs with the same arguments."""
    if n < 1:
        raise ParameterError("n must be >= 1")
    if res < 8:
        raise ParameterError("res must be >= 8")
    if channels not in (1, 3):
        raise ParameterError("channels must be 1 or 3")
    if not (0 < blob_frac[0] <= blob_frac[1] < 1):
        raise ParameterError(f"blob fraction range invalid: {blob_frac}")
    if not (0 <= distractors[0] <= distractors[1]):
        raise ParameterError(f"distractor count range invalid: {distractors}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    width = len(str(n - 1))
    for i in range(n):
        img, boxes = render_toy_image(rng, res, channels, blob_count, blob_frac,
                                      distractors, styles)
        name = f"toy_{i:0{width}d}.png"
        save_image(out_dir / name, img)
        entries.append(ManifestEntry(image_path=name, width=res, height=res, boxes=boxes))
    manifest = out_dir / "manifest.json"
    save_manifest(manifest, entries)
    return manifest
