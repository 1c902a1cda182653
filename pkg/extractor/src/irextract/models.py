"""Backbone registry and checkpoint handling.

Every model resolves to a convolutional trunk ending just before the global
pooling layer, so a forward pass yields the C x H x W activation tensor the
retrieval engine consumes. Checkpoints are optional (random initialization
otherwise); whatever weights end up in the trunk are hashed into the
extraction manifest so results stay attributable.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn
from torchvision.models import resnet50
from torchvision.models.resnet import Bottleneck

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class CheckpointMismatchError(RuntimeError):
    """Checkpoint keys/shapes do not fit the selected backbone."""


@dataclass(frozen=True)
class ModelSpec:
    """One supported backbone: how to build it and what it outputs."""

    name: str
    channels: int
    build: Callable[[], nn.Module]
    input_mean: tuple[float, float, float] = IMAGENET_MEAN
    input_std: tuple[float, float, float] = IMAGENET_STD
    key_prefix: str = ""  # stripped from checkpoint keys before loading


@dataclass
class LoadedModel:
    spec: ModelSpec
    trunk: nn.Module
    checkpoint: str
    checkpoint_sha256: str


class WidthScaledResNet(nn.Module):
    """ResNet-50-style trunk with every stage width multiplied.

    torchvision's ResNet pins the stem at 64 planes, so the 2x/4x variants
    (4096/8192 output channels) need their own constructor. Module names
    mirror torchvision's, so converted checkpoints with standard keys load.
    """

    def __init__(self, width_mult: int = 1, layers: tuple[int, ...] = (3, 4, 6, 3)):
        super().__init__()
        base = 64 * width_mult
        self.inplanes = base
        self.conv1 = nn.Conv2d(3, base, kernel_size=7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(base)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(kernel_size=3, stride=2, padding=1)
        self.layer1 = self._make_layer(base, layers[0], stride=1)
        self.layer2 = self._make_layer(base * 2, layers[1], stride=2)
        self.layer3 = self._make_layer(base * 4, layers[2], stride=2)
        self.layer4 = self._make_layer(base * 8, layers[3], stride=2)
        self.out_channels = base * 8 * Bottleneck.expansion

    def _make_layer(self, planes: int, blocks: int, stride: int) -> nn.Sequential:
        downsample = None
        if stride != 1 or self.inplanes != planes * Bottleneck.expansion:
            downsample = nn.Sequential(
                nn.Conv2d(self.inplanes, planes * Bottleneck.expansion,
                          kernel_size=1, stride=stride, bias=False),
                nn.BatchNorm2d(planes * Bottleneck.expansion),
            )
        stack = [Bottleneck(self.inplanes, planes, stride, downsample)]
        self.inplanes = planes * Bottleneck.expansion
        stack += [Bottleneck(self.inplanes, planes) for _ in range(1, blocks)]
        return nn.Sequential(*stack)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        x = self.layer1(x)
        x = self.layer2(x)
        x = self.layer3(x)
        return self.layer4(x)


class AmdimStandin(nn.Module):
    """Compact encoder with the multiscale model's output geometry.

    The published architecture is not reproducible from its description
    alone; this stand-in matches the documented behaviour that matters to
    the engine: a 724 x 724 input yields a 40 x 40 spatial map (the engine
    downsamples to 23 x 23 itself). Checkpoint provenance lives in the
    manifest, so substituting a faithful encoder later stays attributable.
    """

    def __init__(self, channels: int = 2560, stem_width: int = 64):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, stem_width, kernel_size=3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(stem_width),
            nn.ReLU(inplace=True),
            nn.Conv2d(stem_width, stem_width, kernel_size=3, stride=1, padding=1, bias=False),
            nn.BatchNorm2d(stem_width),
            nn.ReLU(inplace=True),
        )
        # 724 -> 362 (stem) -> 40: floor((362 - 5) / 9) + 1
        self.head = nn.Sequential(
            nn.Conv2d(stem_width, channels, kernel_size=5, stride=9, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
        )
        self.out_channels = channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.stem(x))


def _resnet50_trunk() -> nn.Module:
    model = resnet50(weights=None)
    return nn.Sequential(*list(model.children())[:-2])


MODELS: dict[str, ModelSpec] = {
    "baseline-r50": ModelSpec("baseline-r50", 2048, _resnet50_trunk),
    "simclr-1x": ModelSpec("simclr-1x", 2048, _resnet50_trunk),
    "simclr-2x": ModelSpec("simclr-2x", 4096, lambda: WidthScaledResNet(width_mult=2)),
    "simclr-4x": ModelSpec("simclr-4x", 8192, lambda: WidthScaledResNet(width_mult=4)),
    "moco-v1": ModelSpec("moco-v1", 2048, _resnet50_trunk,
                         key_prefix="module.encoder_q."),
    "moco-v2": ModelSpec("moco-v2", 2048, _resnet50_trunk,
                         key_prefix="module.encoder_q."),
    "amdim": ModelSpec("amdim", 2560, AmdimStandin,
                       input_mean=(0.5, 0.5, 0.5), input_std=(0.5, 0.5, 0.5)),
}


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as stream:
        for chunk in iter(lambda: stream.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _remap_checkpoint(state: dict, spec: ModelSpec, trunk: nn.Module) -> dict:
    if "state_dict" in state and isinstance(state["state_dict"], dict):
        state = state["state_dict"]
    if spec.key_prefix:
        state = {
            key[len(spec.key_prefix):]: value
            for key, value in state.items()
            if key.startswith(spec.key_prefix)
        }
    wanted = dict(trunk.state_dict())
    remapped = {}
    if isinstance(trunk, nn.Sequential):
        # torchvision trunks are Sequential(conv1, bn1, relu, maxpool, layer1..4)
        index = {"conv1": "0", "bn1": "1", "layer1": "4", "layer2": "5",
                 "layer3": "6", "layer4": "7"}
        for key, value in state.items():
            head, _, rest = key.partition(".")
            if head in index:
                remapped[f"{index[head]}.{rest}"] = value
    else:
        remapped = {k: v for k, v in state.items() if k in wanted}
    missing = [k for k in wanted if k not in remapped]
    if missing:
        raise CheckpointMismatchError(
            f"checkpoint lacks {len(missing)} parameters for {spec.name} "
            f"(e.g. {missing[:3]})"
        )
    for key, value in remapped.items():
        if key in wanted and tuple(wanted[key].shape) != tuple(value.shape):
            raise CheckpointMismatchError(
                f"checkpoint tensor {key} has shape {tuple(value.shape)}, "
                f"backbone expects {tuple(wanted[key].shape)}"
            )
    return remapped


def load_model(name: str, checkpoint: str | None = None) -> LoadedModel:
    """Build a backbone trunk, optionally loading a local checkpoint.

    Without a checkpoint the trunk keeps its random initialization and the
    manifest hash records that explicitly.
    """
    if name not in MODELS:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}")
    spec = MODELS[name]
    torch.manual_seed(0)  # reproducible random init when no checkpoint is given
    trunk = spec.build()
    if checkpoint:
        state = torch.load(checkpoint, map_location="cpu", weights_only=True)
        trunk.load_state_dict(_remap_checkpoint(state, spec, trunk), strict=False)
        source, digest = str(checkpoint), sha256_file(checkpoint)
    else:
        source, digest = "random-init", "random-init"
    trunk.eval()
    return LoadedModel(spec=spec, trunk=trunk, checkpoint=source, checkpoint_sha256=digest)


def bn_stats_hash(module: nn.Module) -> str:
    """Hash of all batch-norm running statistics, in fixed name order."""
    digest = hashlib.sha256()
    for name, layer in sorted(module.named_modules()):
        if isinstance(layer, nn.modules.batchnorm._BatchNorm):
            digest.update(name.encode())
            digest.update(layer.running_mean.detach().numpy().tobytes())
            digest.update(layer.running_var.detach().numpy().tobytes())
    return digest.hexdigest()
