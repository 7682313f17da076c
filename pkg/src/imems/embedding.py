"""Image-embedded segmentation codec.

An RGB image and its K-label segmentation map are fused into a K-channel
8-bit image: the channel of a pixel's own label carries its grayscale
intensity squeezed into [128, 255], every other channel carries the
inverted intensity squeezed into [0, 127]. Decoding is a per-pixel argmax.

Array conventions used throughout the package:

* RGB image   -- ``(H, W, 3)`` uint8
* gray image  -- ``(H, W)`` uint8
* label map   -- ``(H, W)`` integer array, values in ``[0, K)``
* embedded    -- ``(K, H, W)``; uint8 for codec output, any real dtype for
  network estimates
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

__all__ = [
    "ShapeError",
    "LabelRangeError",
    "IntegrityError",
    "to_grayscale",
    "encode",
    "decode",
    "recover_grayscale",
    "save_bundle",
    "load_bundle",
    "bundle_paths",
]


class ShapeError(ValueError):
    """Array dimensions do not agree."""


class LabelRangeError(ValueError):
    """A label map contains a value outside ``[0, K)``."""


class IntegrityError(ValueError):
    """An embedded image violates the codec invariants."""


def _check_rgb(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] < 1 or image.shape[1] < 1:
        raise ShapeError(f"expected an (H, W, 3) RGB image, got shape {image.shape}")
    return image


def check_labels(seg: np.ndarray, num_labels: int) -> np.ndarray:
    seg = np.asarray(seg)
    if seg.ndim != 2:
        raise ShapeError(f"expected an (H, W) label map, got shape {seg.shape}")
    if not np.issubdtype(seg.dtype, np.integer):
        raise LabelRangeError(f"label map must be integer typed, got {seg.dtype}")
    if seg.size and (seg.min() < 0 or seg.max() >= num_labels):
        raise LabelRangeError(
            f"labels must lie in [0, {num_labels}); found range [{seg.min()}, {seg.max()}]"
        )
    return seg


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """BT.601 luma, rounded half up, as uint8.

    Integer arithmetic keeps the rounding exact at the .5 boundaries.
    """
    rgb = _check_rgb(image).astype(np.int64)
    luma = (299 * rgb[..., 0] + 587 * rgb[..., 1] + 114 * rgb[..., 2] + 500) // 1000
    return np.clip(luma, 0, 255).astype(np.uint8)


def encode(image: np.ndarray, seg: np.ndarray, num_labels: int) -> np.ndarray:
    """Superimpose the grayscale of ``image`` on ``seg``; returns ``(K, H, W)`` uint8."""
    if num_labels < 1:
        raise LabelRangeError(f"num_labels must be positive, got {num_labels}")
    gray = to_grayscale(image)
    seg = check_labels(seg, num_labels)
    if seg.shape != gray.shape:
        raise ShapeError(f"image is {gray.shape[::-1]} (W, H) but label map is {seg.shape[::-1]}")

    half = gray.astype(np.int16) // 2
    foreground = (half + 128).astype(np.uint8)
    background = (127 - half).astype(np.uint8)
    is_fg = seg[None, :, :] == np.arange(num_labels)[:, None, None]
    return np.where(is_fg, foreground[None], background[None])


def decode(embedded: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over channels; ties resolve to the lowest index."""
    embedded = np.asarray(embedded)
    if embedded.ndim != 3 or embedded.shape[0] < 1:
        raise ShapeError(f"expected a (K, H, W) array with K >= 1, got shape {embedded.shape}")
    # np.argmax returns the first maximal index
    return np.argmax(embedded, axis=0).astype(np.int64)


def decode_channels(channels: Sequence[np.ndarray]) -> np.ndarray:
    """Decode a list of separately stored ``(H, W)`` channels."""
    if len(channels) == 0:
        raise ShapeError("no channels to decode")
    shapes = {np.shape(c) for c in channels}
    if len(shapes) != 1:
        raise ShapeError(f"channel dimensions disagree: {sorted(shapes)}")
    return decode(np.stack(channels))


def recover_grayscale(embedded: np.ndarray) -> np.ndarray:
    """Invert the foreground branch: ``2 * (v_fg - 128)``.

    The result is within 1 of the source grayscale because the encoder
    floors ``G / 2``.
    """
    embedded = np.asarray(embedded)
    if embedded.ndim != 3 or embedded.shape[0] < 1:
        raise ShapeError(f"expected a (K, H, W) array, got shape {embedded.shape}")
    if not np.issubdtype(embedded.dtype, np.integer):
        raise IntegrityError("recover_grayscale needs exact integer codec output")
    fg_count = (embedded >= 128).sum(axis=0)
    if np.any(fg_count != 1):
        bad = np.argwhere(fg_count != 1)[0]
        raise IntegrityError(
            f"pixel (row={bad[0]}, col={bad[1]}) has {fg_count[tuple(bad)]} foreground channels, expected 1"
        )
    fg = embedded.max(axis=0).astype(np.int16)
    return (2 * (fg - 128)).astype(np.uint8)


# -- on-disk bundle: <stem>.chNN.png per channel + <stem>.meta.json ----------


def bundle_paths(stem: str | Path, num_labels: int) -> tuple[list[Path], Path]:
    stem = Path(stem)
    channels = [stem.with_name(f"{stem.name}.ch{k:02d}.png") for k in range(num_labels)]
    return channels, stem.with_name(f"{stem.name}.meta.json")


def save_bundle(
    stem: str | Path,
    embedded: np.ndarray,
    label_names: Sequence[str] | None = None,
) -> list[Path]:
    embedded = np.asarray(embedded)
    if embedded.ndim != 3 or embedded.dtype != np.uint8:
        raise ShapeError(f"expected (K, H, W) uint8, got {embedded.dtype} {embedded.shape}")
    k, h, w = embedded.shape
    if label_names is not None and len(label_names) != k:
        raise ShapeError(f"{len(label_names)} label names for {k} channels")
    channel_paths, meta_path = bundle_paths(stem, k)
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    for path, channel in zip(channel_paths, embedded):
        Image.fromarray(channel, mode="L").save(path)
    meta = {"num_labels": k, "width": w, "height": h}
    if label_names is not None:
        meta["label_names"] = list(label_names)
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")
    return channel_paths + [meta_path]


def load_bundle(stem: str | Path) -> tuple[np.ndarray, dict]:
    """Read a bundle back as ``(K, H, W)`` uint8 plus its metadata dict.

    Raises ``FileNotFoundError`` naming the first missing file.
    """
    stem = Path(stem)
    _, meta_path = bundle_paths(stem, 0)
    if not meta_path.is_file():
        raise FileNotFoundError(f"missing bundle metadata: {meta_path}")
    meta = json.loads(meta_path.read_text())
    k, w, h = int(meta["num_labels"]), int(meta["width"]), int(meta["height"])
    channel_paths, _ = bundle_paths(stem, k)
    channels = []
    for path in channel_paths:
        if not path.is_file():
            raise FileNotFoundError(f"missing bundle channel: {path}")
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
        if arr.shape != (h, w):
            raise ShapeError(f"{path} is {arr.shape[1]}x{arr.shape[0]}, metadata says {w}x{h}")
        channels.append(arr)
    return np.stack(channels), meta
