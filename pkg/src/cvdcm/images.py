"""Image records, the JSON-lines image manifest, and pixel-level transforms."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image as PILImage

from .errors import ValidationError


@dataclass
class Image:
    """An RGB image with metadata; ``pixels`` is uint8 (H, W, 3) or None for metadata-only records."""

    image_id: str
    pixels: Optional[np.ndarray] = None
    month: int = 12
    municipality: Optional[str] = None
    density: Optional[float] = None
    ground_truth: Optional[dict] = None
    path: Optional[str] = None

    def __post_init__(self):
        if not 1 <= int(self.month) <= 12:
            raise ValidationError(f"image {self.image_id}: month must be in 1..12")
        if self.pixels is not None:
            px = np.asarray(self.pixels)
            if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] == 0 or px.shape[1] == 0:
                raise ValidationError(f"image {self.image_id}: expected a non-empty H x W x 3 array, got {px.shape}")
            self.pixels = px

    @property
    def shape(self) -> tuple:
        return None if self.pixels is None else self.pixels.shape

    def as_array(self) -> np.ndarray:
        """Pixels as float64 in [0, 1]."""
        if self.pixels is None:
            raise ValidationError(f"image {self.image_id} has no pixel data")
        if self.pixels.dtype == np.uint8:
            return self.pixels.astype(np.float64) / 255.0
        return np.asarray(self.pixels, dtype=np.float64)

    def manifest_entry(self) -> dict:
        return {
            "image_id": self.image_id,
            "path": self.path,
            "month": int(self.month),
            "municipality": self.municipality,
            "density": self.density,
            "ground_truth": self.ground_truth,
        }


def hflip(pixels: np.ndarray) -> np.ndarray:
    """Mirror along the width axis; works on (H, W, C) and (B, H, W, C)."""
    return np.asarray(pixels)[..., :, ::-1, :]


def resize(pixels: np.ndarray, resolution) -> np.ndarray:
    """Bilinear resize of an (H, W, C) array to ``resolution`` (int or (h, w)), half-pixel centres."""
    px = np.asarray(pixels)
    h_out, w_out = (resolution, resolution) if np.isscalar(resolution) else tuple(resolution)
    h_in, w_in = px.shape[:2]
    if (h_in, w_in) == (h_out, w_out):
        return px.copy()
    src = px.astype(np.float64)

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h_in, h_out)
    x0, x1, fx = axis(w_in, w_out)
    top = src[y0][:, x0] * (1 - fx)[None, :, None] + src[y0][:, x1] * fx[None, :, None]
    bot = src[y1][:, x0] * (1 - fx)[None, :, None] + src[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    if px.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out


def save_png(pixels: np.ndarray, path) -> None:
    PILImage.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_manifest(images: Iterable[Image], path) -> None:
    lines = [json.dumps(im.manifest_entry(), sort_keys=True) + "\n" for im in images]
    Path(path).write_text("".join(lines))


def read_manifest(path, load_pixels: bool = True) -> dict:
    """Read a manifest into ``{image_id: Image}``; relative paths resolve against the manifest's directory."""
    base = Path(path).parent
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            d = json.loads(line)
            try:
                im = Image(
                    image_id=str(d["image_id"]),
                    month=int(d.get("month", 12)),
                    municipality=d.get("municipality"),
                    density=d.get("density"),
                    ground_truth=d.get("ground_truth"),
                    path=d.get("path"),
                )
            except KeyError as exc:
                raise ValidationError(f"{path}:{lineno}: missing field {exc}") from exc
            if load_pixels and im.path:
                im.pixels = load_png(base / im.path)
            out[im.image_id] = im
    return out


def metadata_only(images: dict) -> dict:
    return {k: replace(v, pixels=None) for k, v in images.items()}
