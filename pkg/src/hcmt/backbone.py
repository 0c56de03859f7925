"""V-Net style 3D encoder-decoder with an auxiliary prediction head per decoder block.

Every head produces a class-probability map at input resolution, so a forward
pass yields a prediction pyramid: ``pyramid[0]`` is the final full-resolution
output and ``pyramid[s]`` comes from the decoder block ``s`` levels coarser.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from hcmt.errors import ConfigError, ShapeError
from hcmt.perturb import PerturbationSpec, perturb

CHECKPOINT_FORMAT = "hcmt-checkpoint"
CHECKPOINT_VERSION = 1

ACTIVATIONS = ("relu", "leaky_relu", "elu")
NORMALIZATIONS = ("group", "instance", "batch", "none")

PredictionPyramid = list  # list[torch.Tensor], one (B, C, H, W, D) map per scale


@dataclass
class NetworkSpec:
    in_channels: int = 1
    num_classes: int = 2
    num_scales: int = 4
    base_channels: int = 16
    # conv layers per encoder stage; len - 1 downsamplings and decoder blocks
    encoder_depths: tuple[int, ...] = (1, 2, 3, 3, 3)
    activation: str = "relu"
    normalization: str = "group"
    upsample_mode: str = "trilinear"

    def __post_init__(self):
        self.encoder_depths = tuple(int(d) for d in self.encoder_depths)

    @property
    def num_levels(self) -> int:
        return len(self.encoder_depths)

    @property
    def num_decoder_blocks(self) -> int:
        return self.num_levels - 1

    @property
    def decoder_depths(self) -> tuple[int, ...]:
        # mirrors the encoder, coarsest decoder block first
        return tuple(reversed(self.encoder_depths[:-1]))

    @property
    def divisor(self) -> int:
        return 2 ** (self.num_levels - 1)

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def validate(self) -> None:
        if self.in_channels < 1 or self.base_channels < 1:
            raise ConfigError("in_channels and base_channels must be positive")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_levels < 2:
            raise ConfigError("encoder_depths needs at least two stages")
        if any(d < 1 for d in self.encoder_depths):
            raise ConfigError(f"encoder_depths entries must be positive: {self.encoder_depths}")
        if not 1 <= self.num_scales <= self.num_decoder_blocks:
            raise ConfigError(
                f"num_scales={self.num_scales} needs 1..{self.num_decoder_blocks} "
                f"(decoder blocks available for encoder_depths={self.encoder_depths})"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}; choose from {ACTIVATIONS}")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"unknown normalization {self.normalization!r}; choose from {NORMALIZATIONS}")
        if self.upsample_mode not in ("trilinear", "nearest"):
            raise ConfigError(f"unknown upsample_mode {self.upsample_mode!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder_depths"] = list(self.encoder_depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown NetworkSpec fields: {sorted(unknown)}")
        return cls(**d)


def group_count(channels: int) -> int:
    """Groups for GroupNorm: four channels per group where possible."""
    return max(1, channels // 4)


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "group":
        return nn.GroupNorm(group_count(channels), channels)
    if kind == "instance":
        return nn.InstanceNorm3d(channels, affine=True)
    if kind == "batch":
        return nn.BatchNorm3d(channels)
    return nn.Identity()


def _act(kind: str) -> nn.Module:
    if kind == "leaky_relu":
        return nn.LeakyReLU(0.01)
    if kind == "elu":
        return nn.ELU()
    return nn.ReLU()


class ConvBlock(nn.Sequential):
    def __init__(self, n_convs: int, in_ch: int, out_ch: int, norm: str, act: str):
        layers: list[nn.Module] = []
        for i in range(n_convs):
            layers += [nn.Conv3d(in_ch if i == 0 else out_ch, out_ch, 3, padding=1), _norm(norm, out_ch), _act(act)]
        super().__init__(*layers)


class DownConv(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int, norm: str, act: str):
        super().__init__(nn.Conv3d(in_ch, out_ch, 2, stride=2), _norm(norm, out_ch), _act(act))


class UpConv(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int, norm: str, act: str):
        super().__init__(nn.ConvTranspose3d(in_ch, out_ch, 2, stride=2), _norm(norm, out_ch), _act(act))


class VNetMultiScale(nn.Module):
    """Encoder-decoder returning per-scale logits at input resolution."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        norm, act = spec.normalization, spec.activation
        L = spec.num_levels

        self.encoder = nn.ModuleList()
        self.down = nn.ModuleList()
        for level, depth in enumerate(spec.encoder_depths):
            in_ch = spec.in_channels if level == 0 else spec.channels(level)
            self.encoder.append(ConvBlock(depth, in_ch, spec.channels(level), norm, act))
            if level < L - 1:
                self.down.append(DownConv(spec.channels(level), spec.channels(level + 1), norm, act))

        # decoder block k works at level L-2-k, i.e. coarsest first
        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for k, depth in enumerate(spec.decoder_depths):
            level = L - 2 - k
            self.up.append(UpConv(spec.channels(level + 1), spec.channels(level), norm, act))
            self.decoder.append(ConvBlock(depth, spec.channels(level), spec.channels(level), norm, act))

        # heads[s] reads the decoder output at level s
        self.heads = nn.ModuleList(
            nn.Conv3d(spec.channels(s), spec.num_classes, 1) for s in range(spec.num_scales)
        )

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 5:
            raise ShapeError(f"expected a B x C x H x W x D batch, got shape {tuple(x.shape)}")
        if x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"expected {self.spec.in_channels} input channels, got {x.shape[1]}")
        div = self.spec.divisor
        for name, size in zip(("H", "W", "D"), x.shape[2:]):
            if size % div:
                raise ShapeError(f"axis {name} has size {size}, not divisible by {div}")

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        self.check_input(x)
        L = self.spec.num_levels
        skips = []
        h = x
        for level in range(L):
            h = self.encoder[level](h)
            if level < L - 1:
                skips.append(h)
                h = self.down[level](h)

        features: dict[int, torch.Tensor] = {}
        for k in range(L - 1):
            level = L - 2 - k
            h = self.up[k](h) + skips[level]
            h = self.decoder[k](h)
            features[level] = h

        size = x.shape[2:]
        logits = []
        for s, head in enumerate(self.heads):
            # 1x1x1 conv and interpolation are both linear with interpolation
            # weights summing to one, so they commute; convolving first keeps
            # the upsampled tensor at num_classes channels.
            out = head(features[s])
            if s > 0:
                kw = {"align_corners": False} if self.spec.upsample_mode == "trilinear" else {}
                out = F.interpolate(out, size=size, mode=self.spec.upsample_mode, **kw)
            logits.append(out)
        return logits


def build_network(spec: NetworkSpec, seed: int) -> VNetMultiScale:
    """Instantiate the network with parameters drawn deterministically from ``seed``."""
    spec.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = VNetMultiScale(spec)
    return net


def forward_multiscale(
    network: VNetMultiScale,
    volume_batch: torch.Tensor,
    perturbation: PerturbationSpec | None = None,
    generator: torch.Generator | None = None,
) -> PredictionPyramid:
    """Softmax probability maps for every scale, each at input resolution."""
    if perturbation is not None:
        volume_batch = perturb(volume_batch, perturbation, generator)
    return [torch.softmax(z, dim=1) for z in network(volume_batch)]


def parameter_vector(network: nn.Module) -> list[torch.Tensor]:
    return [p for p in network.parameters()]


def flatten_parameters(network: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in network.parameters()])


def count_parameters(network: nn.Module) -> int:
    return sum(p.numel() for p in network.parameters())


def same_structure(a: Sequence[torch.Tensor], b: Sequence[torch.Tensor]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape for x, y in zip(a, b))


def save_checkpoint(path: str | Path, spec: NetworkSpec, student: nn.Module, teacher: nn.Module | None = None, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "network_spec": spec.to_dict(),
        "student": student.state_dict(),
        "teacher": None if teacher is None else teacher.state_dict(),
        **extra,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not an hcmt checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    payload["network_spec"] = NetworkSpec.from_dict(payload["network_spec"])
    return payload


def network_from_checkpoint(path: str | Path, which: str = "student") -> tuple[VNetMultiScale, dict]:
    payload = load_checkpoint(path)
    net = VNetMultiScale(payload["network_spec"])
    state = payload.get(which)
    if state is None:
        raise ConfigError(f"{path} holds no {which} parameters")
    try:
        net.load_state_dict(state)
    except RuntimeError as exc:
        raise ConfigError(f"{path}: parameters do not match the embedded network spec: {exc}") from exc
    net.eval()
    return net, payload
