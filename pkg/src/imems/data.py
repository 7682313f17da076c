"""Datasets, split protocols and a seeded synthetic texture generator."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .embedding import LabelRangeError, ShapeError

PROTOCOLS = ("fixed-split", "kfold")


class DatasetError(ValueError):
    """A manifest or one of its items is unusable."""


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class Dataset:
    name: str
    num_labels: int
    images: list[np.ndarray]
    masks: list[np.ndarray]
    ids: list[str]
    groups: list[str]
    protocol: str = "fixed-split"
    train: list[int] | None = None
    val: list[int] | None = None
    test: list[int] | None = None
    num_folds: int | None = None
    fold_seed: int = 0
    label_names: list[str] | None = None

    def __len__(self) -> int:
        return len(self.images)

    @property
    def labels(self) -> list[str]:
        return self.label_names or [str(k) for k in range(self.num_labels)]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = list(indices)
        return Dataset(
            name=self.name,
            num_labels=self.num_labels,
            images=[self.images[i] for i in indices],
            masks=[self.masks[i] for i in indices],
            ids=[self.ids[i] for i in indices],
            groups=[self.groups[i] for i in indices],
            label_names=self.label_names,
        )


def _read_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def _read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16", "1"):
            raise DatasetError(f"mask {path} must be single-channel, got mode {im.mode}")
        return np.asarray(im).astype(np.int64)


def load_dataset(manifest_path: str | Path) -> Dataset:
    """Load every (image, mask) pair referenced by a JSON manifest.

    Paths inside the manifest are relative to the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise DatasetError(f"manifest not found: {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"manifest {manifest_path} is not valid JSON: {exc}") from None

    for key in ("name", "num_labels", "protocol", "items"):
        if key not in manifest:
            raise DatasetError(f"manifest {manifest_path} lacks key '{key}'")
    k = int(manifest["num_labels"])
    if k < 2:
        raise DatasetError(f"num_labels must be >= 2, got {k}")
    protocol = manifest["protocol"]
    if protocol not in PROTOCOLS:
        raise DatasetError(f"unknown protocol '{protocol}', expected one of {PROTOCOLS}")

    root = manifest_path.parent
    images, masks, ids, groups = [], [], [], []
    for i, item in enumerate(manifest["items"]):
        item_id = item.get("id", Path(item["image"]).stem)
        image_path, mask_path = root / item["image"], root / item["mask"]
        for p in (image_path, mask_path):
            if not p.is_file():
                raise DatasetError(f"item {i} ({item_id}): missing file {p}")
        image, mask = _read_rgb(image_path), _read_mask(mask_path)
        if image.shape[:2] != mask.shape:
            raise DatasetError(
                f"item {i} ({item_id}): image is {image.shape[1]}x{image.shape[0]} "
                f"but mask is {mask.shape[1]}x{mask.shape[0]}"
            )
        if mask.max() >= k or mask.min() < 0:
            raise DatasetError(
                f"item {i} ({item_id}): mask label {int(mask.max())} out of range for K={k}"
            )
        images.append(image)
        masks.append(mask)
        ids.append(item_id)
        groups.append(str(item.get("group", item_id)))

    ds = Dataset(
        name=manifest["name"],
        num_labels=k,
        images=images,
        masks=masks,
        ids=ids,
        groups=groups,
        protocol=protocol,
        label_names=manifest.get("label_names"),
        fold_seed=int(manifest.get("fold_seed", 0)),
    )
    n = len(ds)
    if protocol == "fixed-split":
        for key in ("train", "test"):
            if key not in manifest:
                raise DatasetError(f"fixed-split manifest lacks '{key}' index list")
        for key in ("train", "val", "test"):
            idx = manifest.get(key)
            if idx is None:
                continue
            if any(not 0 <= j < n for j in idx):
                raise DatasetError(f"'{key}' references an index outside [0, {n})")
            setattr(ds, key, [int(j) for j in idx])
    else:
        if "num_folds" not in manifest:
            raise DatasetError("kfold manifest lacks 'num_folds'")
        ds.num_folds = int(manifest["num_folds"])
    if ds.label_names is not None and len(ds.label_names) != k:
        raise DatasetError(f"{len(ds.label_names)} label names for K={k}")
    return ds


def write_manifest(path: str | Path, manifest: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


# -- fold plans ---------------------------------------------------------------


@dataclass
class FoldPlan:
    num_folds: int
    assignment: list[int]
    grouping: list[str]

    def test_indices(self, fold: int) -> list[int]:
        self._check(fold)
        return [i for i, f in enumerate(self.assignment) if f == fold]

    def train_indices(self, fold: int) -> list[int]:
        self._check(fold)
        return [i for i, f in enumerate(self.assignment) if f != fold]

    def _check(self, fold: int) -> None:
        if not 0 <= fold < self.num_folds:
            raise ConfigError(f"fold {fold} out of range for {self.num_folds} folds")


def make_folds(groups: Sequence[str] | Dataset, num_folds: int, seed: int) -> FoldPlan:
    """Shuffle groups with ``seed`` and deal them round-robin into folds.

    Fold sizes (in groups) differ by at most one, and every member of a
    group shares its fold.
    """
    if isinstance(groups, Dataset):
        groups = groups.groups
    groups = [str(g) for g in groups]
    if num_folds < 2:
        raise ConfigError(f"num_folds must be >= 2, got {num_folds}")
    unique = sorted(set(groups))
    if len(unique) < num_folds:
        raise ConfigError(f"{len(unique)} groups cannot fill {num_folds} folds")
    order = np.random.default_rng(seed).permutation(len(unique))
    fold_of = {unique[g]: pos % num_folds for pos, g in enumerate(order)}
    return FoldPlan(num_folds, [fold_of[g] for g in groups], groups)


def split_validation(
    indices: Sequence[int], groups: Sequence[str], fraction: float, seed: int
) -> tuple[list[int], list[int]]:
    """Hold out a seeded ``fraction`` of the groups in ``indices`` for validation."""
    indices = list(indices)
    if not 0 < fraction < 1:
        raise ConfigError(f"val_fraction must be in (0, 1), got {fraction}")
    unique = sorted({groups[i] for i in indices})
    if len(unique) < 2:
        raise ConfigError("need at least two groups to carve out a validation set")
    n_val = min(len(unique) - 1, max(1, round(fraction * len(unique))))
    perm = np.random.default_rng(seed).permutation(len(unique))
    val_groups = {unique[j] for j in perm[:n_val]}
    train = [i for i in indices if groups[i] not in val_groups]
    val = [i for i in indices if groups[i] in val_groups]
    return train, val


# -- geometric preprocessing -----------------------------------------------


def quarter_image(image: np.ndarray, mask: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split into four equal quadrants: top-left, top-right, bottom-left, bottom-right.

    An odd trailing row or column is dropped first.
    """
    if image.shape[:2] != mask.shape:
        raise ShapeError(f"image {image.shape[:2]} and mask {mask.shape} differ")
    h, w = (mask.shape[0] // 2) * 2, (mask.shape[1] // 2) * 2
    if h == 0 or w == 0:
        raise ShapeError(f"cannot quarter a {mask.shape[1]}x{mask.shape[0]} image")
    hh, hw = h // 2, w // 2
    parts = []
    for r in (0, hh):
        for c in (0, hw):
            parts.append((image[r : r + hh, c : c + hw].copy(), mask[r : r + hh, c : c + hw].copy()))
    return parts


def reassemble_quarters(parts: Sequence[np.ndarray]) -> np.ndarray:
    tl, tr, bl, br = parts
    return np.concatenate([np.concatenate([tl, tr], axis=1), np.concatenate([bl, br], axis=1)], axis=0)


def rescale(
    image: np.ndarray, mask: np.ndarray, target_w: int, target_h: int
) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear resampling for the image, nearest-neighbour for the mask."""
    if target_w < 1 or target_h < 1:
        raise ShapeError(f"target size must be positive, got {target_w}x{target_h}")
    img = np.asarray(Image.fromarray(np.asarray(image, dtype=np.uint8)).resize((target_w, target_h), Image.BILINEAR))
    # masks are stored as uint8 PNGs; keep that range here too
    m = Image.fromarray(np.asarray(mask).astype(np.uint8), mode="L")
    m = np.asarray(m.resize((target_w, target_h), Image.NEAREST)).astype(np.int64)
    return img, m


def normalize(image: np.ndarray) -> np.ndarray:
    """Scale 8-bit values into [0, 1] as float32."""
    return np.asarray(image, dtype=np.float32) / np.float32(255.0)


# -- synthetic data ---------------------------------------------------------


@dataclass
class LabelTexture:
    frequency: float  # cycles per pixel
    orientation: float  # degrees
    noise: float  # uniform noise half-width, intensity units
    tint: tuple[int, int, int]
    contrast: float = 40.0


_TINTS = [(214, 140, 190), (150, 90, 170), (235, 200, 215), (120, 60, 130), (190, 170, 230), (240, 150, 150)]


def default_textures(num_labels: int) -> list[LabelTexture]:
    textures = []
    for k in range(num_labels):
        textures.append(
            LabelTexture(
                frequency=0.04 + 0.06 * k,
                orientation=(180.0 / num_labels) * k,
                noise=20.0,
                tint=_TINTS[k % len(_TINTS)],
            )
        )
    return textures


@dataclass
class SyntheticConfig:
    num_labels: int = 3
    width: int = 128
    height: int = 128
    train: int = 40
    val: int = 10
    test: int = 10
    region_seeds: int = 6
    seed: int = 0
    name: str = "synthetic"
    textures: list[LabelTexture] | None = None
    max_attempts: int = 1000

    def __post_init__(self) -> None:
        if self.num_labels < 2:
            raise ConfigError(f"num_labels must be >= 2, got {self.num_labels}")
        for key in ("train", "val", "test"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} count must be >= 1")
        if self.width < 1 or self.height < 1:
            raise ConfigError("image size must be positive")
        if self.region_seeds < self.num_labels:
            raise ConfigError(
                f"region_seeds ({self.region_seeds}) must be >= num_labels ({self.num_labels}) "
                "so every label can own a cell"
            )
        if self.textures is None:
            self.textures = default_textures(self.num_labels)
        else:
            self.textures = [t if isinstance(t, LabelTexture) else LabelTexture(**t) for t in self.textures]
        if len(self.textures) != self.num_labels:
            raise ConfigError(f"{len(self.textures)} textures for {self.num_labels} labels")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _partition(rng: np.random.Generator, cfg: SyntheticConfig) -> np.ndarray:
    yy, xx = np.mgrid[0 : cfg.height, 0 : cfg.width]
    for _ in range(cfg.max_attempts):
        pts = rng.uniform((0, 0), (cfg.height, cfg.width), size=(cfg.region_seeds, 2))
        cell_labels = rng.integers(0, cfg.num_labels, size=cfg.region_seeds)
        d2 = (yy[None] - pts[:, 0, None, None]) ** 2 + (xx[None] - pts[:, 1, None, None]) ** 2
        mask = cell_labels[np.argmin(d2, axis=0)]
        if np.unique(mask).size == cfg.num_labels:
            return mask.astype(np.int64)
    raise ConfigError(f"no partition covering all {cfg.num_labels} labels in {cfg.max_attempts} attempts")


def render_texture(rng: np.random.Generator, mask: np.ndarray, textures: Sequence[LabelTexture]) -> np.ndarray:
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((h, w, 3), dtype=np.float64)
    for k, tex in enumerate(textures):
        sel = mask == k
        if not sel.any():
            continue
        theta = math.radians(tex.orientation)
        phase = rng.uniform(0, 2 * math.pi)
        wave = np.sin(2 * math.pi * tex.frequency * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
        noise = rng.uniform(-tex.noise, tex.noise, size=(h, w, 3))
        layer = np.asarray(tex.tint, dtype=np.float64)[None, None, :] + tex.contrast * wave[..., None] + noise
        out[sel] = layer[sel]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def synthesize_dataset(config: SyntheticConfig, out_dir: str | Path) -> Path:
    """Write a seeded synthetic dataset under ``out_dir``; returns the manifest path.

    Every image is a Voronoi partition whose cells are filled with their
    label's grating texture. Each item draws from its own child seed, so
    the output is a pure function of ``config``.
    """
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc

    splits = [("train", config.train), ("val", config.val), ("test", config.test)]
    total = sum(n for _, n in splits)
    children = np.random.SeedSequence(config.seed).spawn(total)
    items, index = [], {"train": [], "val": [], "test": []}
    i = 0
    for split, count in splits:
        for j in range(count):
            rng = np.random.default_rng(children[i])
            mask = _partition(rng, config)
            image = render_texture(rng, mask, config.textures)
            stem = f"{split}_{j:03d}"
            Image.fromarray(image, mode="RGB").save(out_dir / "images" / f"{stem}.png")
            Image.fromarray(mask.astype(np.uint8), mode="L").save(out_dir / "masks" / f"{stem}.png")
            items.append({"id": stem, "image": f"images/{stem}.png", "mask": f"masks/{stem}.png"})
            index[split].append(i)
            i += 1

    manifest = {
        "name": config.name,
        "num_labels": config.num_labels,
        "protocol": "fixed-split",
        "items": items,
        **index,
        "synthetic_config": config.to_dict(),
    }
    return write_manifest(out_dir / "manifest.json", manifest)


def resolve_splits(
    ds: Dataset, fold: int | None = None, val_fraction: float = 0.2, seed: int = 0
) -> tuple[list[int], list[int], list[int]]:
    """Return ``(train, val, test)`` index lists for a loaded dataset.

    Fixed-split manifests use their own ``val`` list when present, else a
    seeded ``val_fraction`` of the training groups. K-fold manifests need
    ``fold``: that fold is the test set and the rest train (minus a seeded
    validation holdout).
    """
    if ds.protocol == "fixed-split":
        if fold is not None:
            raise ConfigError("--fold only applies to kfold manifests")
        train, test = list(ds.train), list(ds.test)
        if ds.val:
            return train, list(ds.val), test
        train, val = split_validation(train, ds.groups, val_fraction, seed)
        return train, val, test
    if fold is None:
        raise ConfigError(f"kfold manifest with {ds.num_folds} folds: choose one with --fold")
    plan = make_folds(ds.groups, ds.num_folds, ds.fold_seed)
    train, val = split_validation(plan.train_indices(fold), ds.groups, val_fraction, seed)
    return train, val, plan.test_indices(fold)
