"""Training loops for the embedded-segmentation cGAN and its five baselines."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import losses as L
from .data import ConfigError, Dataset, normalize
from .embedding import decode, encode
from .nets import (
    MultiTaskUNet,
    TrainedModel,
    build_discriminator,
    build_generator,
    build_multitask,
    pad_to_multiple,
)

log = logging.getLogger(__name__)

METHODS = ("imems", "unet-c-single", "cgan-c-single", "unet-r-single", "unet-c-multi", "unet-c-multi-int")
SINGLE_METHODS = ("unet-c-single", "cgan-c-single", "unet-r-single")
MULTI_METHODS = ("unet-c-multi", "unet-c-multi-int")
GAN_METHODS = ("imems", "cgan-c-single")
DEFAULT_LAMBDA_SEG = 0.6


@dataclass
class TrainConfig:
    method: str = "imems"
    epochs: int = 300
    batch_size: int = 1
    lambda_l1: float = 100.0
    lambda_seg: float | None = None
    lambda_rec: float | None = None
    lambda_int: float | None = None
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    depth: int = 4
    base_filters: int = 64
    dropout: float = 0.2
    val_fraction: float = 0.2

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method '{self.method}'; valid methods: {', '.join(METHODS)}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lambda_l1 < 0:
            raise ConfigError("lambda_l1 must be nonnegative")
        if self.method in MULTI_METHODS:
            if self.lambda_seg is None:
                self.lambda_seg = DEFAULT_LAMBDA_SEG
            if not 0 <= self.lambda_seg <= 1:
                raise ConfigError(f"lambda_seg must be in [0, 1], got {self.lambda_seg}")
            expected_rec = 1.0 - self.lambda_seg
            if self.lambda_rec is None:
                self.lambda_rec = expected_rec
            elif abs(self.lambda_rec - expected_rec) > 1e-9:
                raise ConfigError(
                    f"lambda_rec must equal 1 - lambda_seg = {expected_rec:g}, got {self.lambda_rec}"
                )
            if self.method == "unet-c-multi" and self.lambda_int is not None:
                raise ConfigError("lambda_int is only meaningful for unet-c-multi-int")
            if self.method == "unet-c-multi-int":
                if self.lambda_int is None:
                    raise ConfigError("unet-c-multi-int requires lambda_int")
                if self.lambda_int < 0:
                    raise ConfigError("lambda_int must be nonnegative")

    @property
    def weights(self) -> L.LossWeights:
        return L.LossWeights(
            lambda_l1=self.lambda_l1,
            lambda_seg=1.0 if self.lambda_seg is None else self.lambda_seg,
            lambda_rec=self.lambda_rec or 0.0,
            lambda_int=self.lambda_int or 0.0,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    selected_epoch: int = 0  # 1-based

    def record(self, train: float, val: float) -> bool:
        """Append an epoch; True if it is the new validation minimum (ties keep the earlier)."""
        self.train_loss.append(train)
        self.val_loss.append(val)
        if self.selected_epoch == 0 or val < self.val_loss[self.selected_epoch - 1]:
            self.selected_epoch = len(self.val_loss)
            return True
        return False

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for i, (t, v) in enumerate(zip(self.train_loss, self.val_loss), start=1):
                w.writerow([i, f"{t:.10g}", f"{v:.10g}"])
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "TrainHistory":
        h = cls()
        with Path(path).open() as fh:
            for row in csv.DictReader(fh):
                h.record(float(row["train_loss"]), float(row["val_loss"]))
        return h


# -- tensors -------------------------------------------------------------------


@dataclass
class _Tensors:
    images: torch.Tensor  # (N, 3, H, W) in [0, 1]
    masks: torch.Tensor  # (N, H, W) int64
    targets: torch.Tensor | None  # (N, K, H, W) regression / one-hot target


def _target_for(method: str, image: np.ndarray, mask: np.ndarray, k: int) -> np.ndarray | None:
    if method in ("imems", "unet-r-single"):
        return normalize(encode(image, mask, k))
    if method == "cgan-c-single":
        return (mask[None] == np.arange(k)[:, None, None]).astype(np.float32)
    return None


def _to_tensors(ds: Dataset, method: str) -> _Tensors:
    if len(ds) == 0:
        raise ConfigError("empty dataset")
    shapes = {m.shape for m in ds.masks}
    if len(shapes) != 1:
        raise ConfigError(f"all images in a run must share one size; found {sorted(shapes)}")
    images = torch.from_numpy(np.stack([normalize(im).transpose(2, 0, 1) for im in ds.images]))
    masks = torch.from_numpy(np.stack(ds.masks).astype(np.int64))
    targets = [_target_for(method, im, m, ds.num_labels) for im, m in zip(ds.images, ds.masks)]
    tgt = None if targets[0] is None else torch.from_numpy(np.stack(targets))
    return _Tensors(images, masks, tgt)


def _run_padded(net: nn.Module, x: torch.Tensor, depth: int):
    """Reflect-pad to a multiple of ``2**depth``, run ``net``, crop back."""
    xp, (h, w) = pad_to_multiple(x, 2**depth)
    out = net(xp)
    if isinstance(out, torch.Tensor):
        return out[..., :h, :w]
    out.probs = out.probs[..., :h, :w]
    out.reconstruction = out.reconstruction[..., :h, :w]
    if xp.shape[-2:] != x.shape[-2:]:
        out.encoder_maps = [m[..., : math.ceil(h / 2**i), : math.ceil(w / 2**i)] for i, m in enumerate(out.encoder_maps)]
        out.decoder_maps = [m[..., : math.ceil(h / 2**i), : math.ceil(w / 2**i)] for i, m in enumerate(out.decoder_maps)]
    return out


def _discriminate(disc: nn.Module, image: torch.Tensor, output: torch.Tensor, depth: int) -> torch.Tensor:
    x, _ = pad_to_multiple(torch.cat([image, output], dim=1), 2**depth)
    return disc(x[:, :3], x[:, 3:])


def _batches(n: int, batch_size: int, gen: torch.Generator) -> Iterable[torch.Tensor]:
    perm = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def _adam(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))


# -- per-method objectives ------------------------------------------------------


def multitask_losses(out, images: torch.Tensor, masks: torch.Tensor, cfg: TrainConfig) -> L.LossValues:
    values = L.LossValues(
        seg=L.seg_loss(out.probs, masks),
        rec=L.rec_loss(out.reconstruction, images),
    )
    include_int = cfg.method == "unet-c-multi-int"
    if include_int:
        values.int_sum = L.int_loss(out.encoder_maps, out.decoder_maps)
    values.model = L.joint_loss(values, cfg.weights, include_int=include_int)
    return values


def _val_loss(net: nn.Module, t: _Tensors, cfg: TrainConfig) -> float:
    net.eval()
    total = 0.0
    with torch.no_grad():
        for i in range(t.images.shape[0]):
            x = t.images[i : i + 1]
            out = _run_padded(net, x, cfg.depth)
            if cfg.method in MULTI_METHODS:
                loss = multitask_losses(out, x, t.masks[i : i + 1], cfg).model
            elif cfg.method == "unet-c-single":
                loss = L.seg_loss(out, t.masks[i : i + 1])
            else:
                # regression targets and cGAN selection both use L1
                loss = L.l1_loss(out, t.targets[i : i + 1])
            total += float(loss)
    return total / t.images.shape[0]


def _build_net(cfg: TrainConfig, k: int) -> nn.Module:
    if cfg.method in MULTI_METHODS:
        return build_multitask(k, cfg.depth, cfg.base_filters, cfg.dropout)
    head = "softmax" if cfg.method in ("unet-c-single", "cgan-c-single") else "linear"
    return build_generator(k, cfg.depth, cfg.base_filters, cfg.dropout, head=head)


def _fit(
    train_set: Dataset,
    val_set: Dataset,
    cfg: TrainConfig,
    net: nn.Module | None = None,
    on_epoch: Callable[[int, float, float], None] | None = None,
) -> tuple[TrainedModel, TrainHistory]:
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigError("training and validation sets must both be non-empty")
    if train_set.num_labels != val_set.num_labels:
        raise ConfigError("training and validation sets disagree on num_labels")
    k = train_set.num_labels

    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    if net is None:
        net = _build_net(cfg, k)
    opt = _adam(net.parameters(), cfg)
    disc = d_opt = None
    if cfg.method in GAN_METHODS:
        disc = build_discriminator(k, cfg.depth, cfg.base_filters, cfg.dropout)
        d_opt = _adam(disc.parameters(), cfg)

    tr, va = _to_tensors(train_set, cfg.method), _to_tensors(val_set, cfg.method)
    history = TrainHistory()
    best_state = None
    n = tr.images.shape[0]

    for epoch in range(1, cfg.epochs + 1):
        net.train()
        if disc is not None:
            disc.train()
        running = 0.0
        for idx in _batches(n, cfg.batch_size, gen):
            x, m = tr.images[idx], tr.masks[idx]
            if cfg.method in GAN_METHODS:
                running += _gan_step(net, disc, opt, d_opt, x, tr.targets[idx], cfg) * len(idx)
                continue
            out = _run_padded(net, x, cfg.depth)
            if cfg.method in MULTI_METHODS:
                loss = multitask_losses(out, x, m, cfg).model
            elif cfg.method == "unet-c-single":
                loss = L.seg_loss(out, m)
            else:
                loss = L.l1_loss(out, tr.targets[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += float(loss.detach()) * len(idx)

        val = _val_loss(net, va, cfg)
        if history.record(running / n, val):
            best_state = copy.deepcopy(net.state_dict())
        log.info("epoch %d/%d train=%.5f val=%.5f", epoch, cfg.epochs, running / n, val)
        if on_epoch is not None:
            on_epoch(epoch, running / n, val)

    net.load_state_dict(best_state)
    net.eval()
    provenance = {
        "method": cfg.method,
        "seed": cfg.seed,
        "epochs_run": cfg.epochs,
        "selected_epoch": history.selected_epoch,
        "num_labels": k,
        "label_names": train_set.label_names,
    }
    return TrainedModel(net.spec, net, provenance), history


def _gan_step(G, D, g_opt, d_opt, x, target, cfg: TrainConfig) -> float:
    """One discriminator update, then one generator update."""
    fake = _run_padded(G, x, cfg.depth)

    d_real = _discriminate(D, x, target, cfg.depth)
    d_fake = _discriminate(D, x, fake.detach(), cfg.depth)
    d_loss, _ = L.adversarial_losses(d_real, d_fake)
    d_opt.zero_grad()
    d_loss.backward()
    d_opt.step()

    g_adv = L.bce(_discriminate(D, x, fake, cfg.depth), 1)
    g_loss = L.cgan_generator_objective(g_adv, L.l1_loss(fake, target), cfg.lambda_l1)
    g_opt.zero_grad()
    g_loss.backward()
    g_opt.step()
    return float(g_loss.detach())


def train_imems(train_set: Dataset, val_set: Dataset, config: TrainConfig, **kw) -> tuple[TrainedModel, TrainHistory]:
    """Learn the embedded target with the conditional GAN."""
    if config.method != "imems":
        raise ConfigError(f"train_imems called with method '{config.method}'")
    return _fit(train_set, val_set, config, **kw)


def train_single(train_set: Dataset, val_set: Dataset, config: TrainConfig, **kw) -> tuple[TrainedModel, TrainHistory]:
    if config.method not in SINGLE_METHODS:
        raise ConfigError(f"train_single expects one of {SINGLE_METHODS}, got '{config.method}'")
    return _fit(train_set, val_set, config, **kw)


def train_multitask(train_set: Dataset, val_set: Dataset, config: TrainConfig, **kw) -> tuple[TrainedModel, TrainHistory]:
    if config.method not in MULTI_METHODS:
        raise ConfigError(f"train_multitask expects one of {MULTI_METHODS}, got '{config.method}'")
    return _fit(train_set, val_set, config, **kw)


def train(train_set: Dataset, val_set: Dataset, config: TrainConfig, **kw) -> tuple[TrainedModel, TrainHistory]:
    if config.method == "imems":
        return train_imems(train_set, val_set, config, **kw)
    if config.method in SINGLE_METHODS:
        return train_single(train_set, val_set, config, **kw)
    return train_multitask(train_set, val_set, config, **kw)


# -- inference -------------------------------------------------------------------


class UntrainedModelError(RuntimeError):
    pass


def predict(model: TrainedModel, image: np.ndarray) -> np.ndarray:
    """Label map for one RGB image (dropout disabled)."""
    if not model.trained:
        raise UntrainedModelError("model has no training provenance; train or load a checkpoint first")
    net = model.net
    net.eval()
    x = torch.from_numpy(normalize(image).transpose(2, 0, 1)).unsqueeze(0)
    with torch.no_grad():
        out = _run_padded(net, x, model.spec.depth)
    if isinstance(net, MultiTaskUNet):
        out = out.probs
    # regression heads decode the embedding; softmax heads take the argmax
    # directly, which is the same per-pixel operation
    return decode(out[0].numpy())


def predict_dataset(model: TrainedModel, ds: Dataset) -> list[np.ndarray]:
    return [predict(model, im) for im in ds.images]


# -- grid search --------------------------------------------------------------------


GRID_PARAMS = ("lambda_seg", "lambda_int")


@dataclass
class GridResult:
    param: str
    best_value: float
    rows: list[dict]


def grid_config(config: TrainConfig, param: str, value: float) -> TrainConfig:
    d = config.to_dict()
    if param == "lambda_seg":
        d["lambda_seg"], d["lambda_rec"] = value, 1.0 - value
    elif param == "lambda_int":
        d["lambda_int"] = value
    else:
        raise ConfigError(f"grid parameter must be one of {GRID_PARAMS}, got '{param}'")
    return TrainConfig.from_dict(d)


def grid_search(
    train_set: Dataset,
    val_set: Dataset,
    eval_set: Dataset,
    config: TrainConfig,
    grid: Sequence[float],
    param: str = "lambda_seg",
) -> GridResult:
    """Train one model per grid value and pick the best average F-score on ``eval_set``.

    Every grid point starts from the run seed, so points differ only in the
    swept coefficient. Ties go to the earliest grid value.
    """
    from .evaluation import accumulate, compute_metrics, new_confusion

    if len(grid) == 0:
        raise ConfigError("empty grid")
    if config.method not in MULTI_METHODS:
        raise ConfigError(f"grid search sweeps joint-loss weights; method must be one of {MULTI_METHODS}")
    if any(not 0 <= v <= 1 for v in grid):
        raise ConfigError("grid values must lie in [0, 1]")

    rows = []
    for value in grid:
        cfg = grid_config(config, param, value)
        model, _ = train(train_set, val_set, cfg)
        cm = new_confusion(eval_set.num_labels)
        for mask, pred in zip(eval_set.masks, predict_dataset(model, eval_set)):
            cm = accumulate(mask, pred, cm)
        report = compute_metrics(cm)
        row = {
            param: value,
            "lambda_seg": cfg.lambda_seg,
            "lambda_rec": cfg.lambda_rec,
            "lambda_int": cfg.lambda_int,
        }
        for name, f in zip(eval_set.labels, report.per_class_f):
            row[f"f_{name}"] = f
        row["avg_f"] = report.average_f
        row["accuracy"] = report.accuracy
        rows.append(row)
        log.info("grid %s=%g avg_f=%.4f acc=%.4f", param, value, report.average_f, report.accuracy)

    best = max(range(len(rows)), key=lambda i: (rows[i]["avg_f"], -i))
    return GridResult(param, float(grid[best]), rows)


def parse_grid(text: str) -> list[float]:
    """``start:stop:step`` (inclusive when step divides the range) or a comma list."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"grid '{text}' must look like start:stop:step")
        start, stop, step = (float(p) for p in parts)
        if step <= 0 or stop < start:
            raise ConfigError(f"grid '{text}' needs step > 0 and stop >= start")
        n = int(math.floor((stop - start) / step + 1e-9))
        return [round(start + i * step, 10) for i in range(n + 1)]
    values = [float(v) for v in text.split(",") if v.strip()]
    if not values:
        raise ConfigError("empty grid")
    return values
