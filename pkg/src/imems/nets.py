"""UNet generator, PatchGAN discriminator and the shared-encoder multi-task net."""
from __future__ import annotations

import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .embedding import ShapeError

HEADS = ("linear", "softmax", "sigmoid")
KINDS = ("generator", "discriminator", "multitask")
CHECKPOINT_FORMAT = "imems-checkpoint/1"


@dataclass
class NetworkSpec:
    kind: str
    input_channels: int
    output_channels: int
    depth: int = 4
    base_filters: int = 64
    dropout_rate: float = 0.2
    head: str = "linear"

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_filters < 1:
            raise ValueError(f"base_filters must be >= 1, got {self.base_filters}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def filters(self) -> list[int]:
        """Channel widths per encoder level, bottleneck last."""
        return [self.base_filters * 2**i for i in range(self.depth + 1)]


INIT_SCHEME = "he"


def init_weights(module: nn.Module, scheme: str | None = None, std: float = 0.02) -> None:
    """Zero biases; He-normal (``"he"``) or N(0, std) (``"normal"``) kernels."""
    scheme = scheme or INIT_SCHEME
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            if scheme == "he":
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            elif scheme == "normal":
                nn.init.normal_(m.weight, 0.0, std)
            else:
                raise ValueError(f"unknown init scheme {scheme!r}")
            nn.init.zeros_(m.bias)


class ConvBlock(nn.Sequential):
    """Two 3x3 conv + ReLU layers followed by dropout."""

    def __init__(self, in_ch: int, out_ch: int, dropout: float):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Dropout(dropout) if dropout > 0 else nn.Identity(),
        )


class Encoder(nn.Module):
    """``depth`` conv blocks, each followed by 2x2 max-pooling.

    Returns the pre-pool map of every level and the final pooled tensor.
    """

    def __init__(self, in_ch: int, widths: list[int], dropout: float):
        super().__init__()
        chans = [in_ch] + widths
        self.blocks = nn.ModuleList(ConvBlock(a, b, dropout) for a, b in zip(chans[:-1], chans[1:]))

    def forward(self, x: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
        skips = []
        for block in self.blocks:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        return skips, x


class Decoder(nn.Module):
    """Mirror of the encoder: 2x nearest upsample + 3x3 conv, skip concat, conv block."""

    def __init__(self, widths: list[int], out_ch: int, head: str, dropout: float):
        super().__init__()
        self.head = head
        # widths includes the bottleneck as its last entry
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for lvl in reversed(range(len(widths) - 1)):
            self.ups.append(
                nn.Sequential(
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(widths[lvl + 1], widths[lvl], 3, padding=1),
                    nn.ReLU(inplace=True),
                )
            )
            self.blocks.append(ConvBlock(2 * widths[lvl], widths[lvl], dropout))
        self.project = nn.Conv2d(widths[0], out_ch, 1)

    def forward(
        self, x: torch.Tensor, skips: list[torch.Tensor]
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Returns the head output and per-level maps ordered shallow-to-deep."""
        maps = []
        for up, block, skip in zip(self.ups, self.blocks, reversed(skips)):
            x = block(torch.cat([up(x), skip], dim=1))
            maps.append(x)
        out = self.project(x)
        if self.head == "softmax":
            out = torch.softmax(out, dim=1)
        elif self.head == "sigmoid":
            out = torch.sigmoid(out)
        return out, maps[::-1]


def _check_divisible(x: torch.Tensor, depth: int) -> None:
    m = 2**depth
    if x.shape[-2] % m or x.shape[-1] % m:
        raise ShapeError(
            f"spatial size {x.shape[-1]}x{x.shape[-2]} is not divisible by 2**depth={m}; "
            "pad the input first (see pad_to_multiple)"
        )


class UNet(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        w = spec.filters
        self.encoder = Encoder(spec.input_channels, w[:-1], spec.dropout_rate)
        self.bottleneck = ConvBlock(w[-2], w[-1], spec.dropout_rate)
        self.decoder = Decoder(w, spec.output_channels, spec.head, spec.dropout_rate)
        init_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_divisible(x, self.spec.depth)
        skips, x = self.encoder(x)
        out, _ = self.decoder(self.bottleneck(x), skips)
        return out


class PatchDiscriminator(nn.Module):
    """Generator-style encoder ending in a 1x1 sigmoid projection.

    Output is one probability per ``2**depth`` square patch.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.encoder = Encoder(spec.input_channels, spec.filters[:-1], spec.dropout_rate)
        self.project = nn.Conv2d(spec.filters[-2], 1, 1)
        init_weights(self)

    def forward(self, image: torch.Tensor, output: torch.Tensor) -> torch.Tensor:
        x = torch.cat([image, output], dim=1)
        if x.shape[1] != self.spec.input_channels:
            raise ShapeError(f"discriminator expects {self.spec.input_channels} channels, got {x.shape[1]}")
        _check_divisible(x, self.spec.depth)
        _, x = self.encoder(x)
        return torch.sigmoid(self.project(x))


@dataclass
class MultiTaskOutput:
    probs: torch.Tensor
    reconstruction: torch.Tensor
    encoder_maps: list[torch.Tensor]
    decoder_maps: list[torch.Tensor]


class MultiTaskUNet(nn.Module):
    """Shared encoder with a softmax segmentation decoder and a linear RGB decoder."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        w = spec.filters
        self.encoder = Encoder(spec.input_channels, w[:-1], spec.dropout_rate)
        self.bottleneck = ConvBlock(w[-2], w[-1], spec.dropout_rate)
        self.decoder = Decoder(w, spec.output_channels, "softmax", spec.dropout_rate)
        self.rec_decoder = Decoder(w, spec.input_channels, "linear", spec.dropout_rate)
        init_weights(self)

    def forward(self, x: torch.Tensor) -> MultiTaskOutput:
        _check_divisible(x, self.spec.depth)
        skips, x = self.encoder(x)
        x = self.bottleneck(x)
        probs, _ = self.decoder(x, skips)
        rec, dec_maps = self.rec_decoder(x, skips)
        return MultiTaskOutput(probs, rec, skips, dec_maps)


def build_generator(
    num_labels: int, depth: int = 4, base_filters: int = 64, dropout: float = 0.2, head: str = "linear"
) -> UNet:
    """UNet mapping a normalized RGB image to ``num_labels`` channels."""
    if num_labels < 2:
        raise ValueError(f"num_labels must be >= 2, got {num_labels}")
    return UNet(NetworkSpec("generator", 3, num_labels, depth, base_filters, dropout, head))


def build_discriminator(
    num_labels: int, depth: int = 4, base_filters: int = 64, dropout: float = 0.2
) -> PatchDiscriminator:
    if num_labels < 2:
        raise ValueError(f"num_labels must be >= 2, got {num_labels}")
    return PatchDiscriminator(NetworkSpec("discriminator", 3 + num_labels, 1, depth, base_filters, dropout, "sigmoid"))


def build_multitask(
    num_labels: int, depth: int = 4, base_filters: int = 64, dropout: float = 0.2
) -> MultiTaskUNet:
    if num_labels < 2:
        raise ValueError(f"num_labels must be >= 2, got {num_labels}")
    return MultiTaskUNet(NetworkSpec("multitask", 3, num_labels, depth, base_filters, dropout, "softmax"))


def build_from_spec(spec: NetworkSpec) -> nn.Module:
    cls = {"generator": UNet, "discriminator": PatchDiscriminator, "multitask": MultiTaskUNet}[spec.kind]
    return cls(spec)


def pad_to_multiple(x: torch.Tensor, multiple: int) -> tuple[torch.Tensor, tuple[int, int]]:
    """Reflect-pad the trailing edges of an NCHW tensor up to ``multiple``."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    return x, (h, w)


# -- trained models and checkpoints ------------------------------------------


@dataclass
class TrainedModel:
    spec: NetworkSpec
    net: nn.Module
    provenance: dict[str, Any] = field(default_factory=dict)

    @property
    def trained(self) -> bool:
        return bool(self.provenance.get("epochs_run"))


def save_checkpoint(path: str | Path, model: TrainedModel) -> Path:
    """Zip archive: ``spec.json`` plus one little-endian float32 blob per tensor."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.net.state_dict()
    index = []
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, tensor in state.items():
            arr = tensor.detach().cpu().numpy().astype("<f4")
            entry = f"params/{name}.f32"
            index.append({"name": name, "shape": list(arr.shape), "entry": entry})
            info = zipfile.ZipInfo(entry, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, arr.tobytes(order="C"))
        meta = {
            "format": CHECKPOINT_FORMAT,
            "spec": asdict(model.spec),
            "provenance": model.provenance,
            "params": index,
        }
        zf.writestr(zipfile.ZipInfo("spec.json", date_time=(1980, 1, 1, 0, 0, 0)), json.dumps(meta, indent=2))
    return path


def load_checkpoint(path: str | Path) -> TrainedModel:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("spec.json"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unrecognised checkpoint format {meta.get('format')!r}")
        spec = NetworkSpec(**meta["spec"])
        net = build_from_spec(spec)
        state = {}
        for p in meta["params"]:
            arr = np.frombuffer(zf.read(p["entry"]), dtype="<f4").reshape(p["shape"])
            state[p["name"]] = torch.from_numpy(arr.astype(np.float32))
    net.load_state_dict(state)
    net.eval()
    return TrainedModel(spec, net, meta.get("provenance", {}))
