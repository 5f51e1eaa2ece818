"""Classifier architectures split into a convolutional trunk and a linear logit layer.

Every model exposes ``features`` (image -> last convolutional feature maps),
``head`` (feature maps -> logits via global average pooling and ``fc``) and the
final layer ``fc``. Grad-CAM and logit-only finetuning rely on this split.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import ConfigError

FINAL_LAYER = "fc"


class Classifier(nn.Module):
    def __init__(self, features: nn.Module, feature_dim: int, num_classes: int):
        super().__init__()
        self.features = features
        self.fc = nn.Linear(feature_dim, num_classes)

    @staticmethod
    def pool(feature_maps: torch.Tensor) -> torch.Tensor:
        return feature_maps.mean(dim=(2, 3))

    def head(self, feature_maps: torch.Tensor) -> torch.Tensor:
        return self.fc(self.pool(feature_maps))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


def _conv_block(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


def small_cnn(num_classes: int, pretrained: bool = False) -> Classifier:
    """Three conv blocks, 32 channels at 1/4 resolution. Trains in seconds on a CPU."""
    if pretrained:
        raise ConfigError("small_cnn has no pretrained weights; set pretrained: false")
    features = nn.Sequential(
        _conv_block(3, 16),
        nn.MaxPool2d(2),
        _conv_block(16, 32),
        nn.MaxPool2d(2),
        _conv_block(32, 32),
    )
    return Classifier(features, 32, num_classes)


def _resnet(name: str, num_classes: int, pretrained: bool) -> Classifier:
    import torchvision

    builder = getattr(torchvision.models, name)
    weights = "IMAGENET1K_V1" if pretrained else None
    try:
        net = builder(weights=weights)
    except Exception as exc:  # download failures surface as URLError / RuntimeError
        raise ConfigError(f"cannot load ImageNet weights for {name}: {exc}") from exc
    features = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, net.layer3, net.layer4)
    return Classifier(features, net.fc.in_features, num_classes)


ARCHITECTURES = {
    "small_cnn": small_cnn,
    "resnet18": lambda k, pretrained=True: _resnet("resnet18", k, pretrained),
    "resnet50": lambda k, pretrained=True: _resnet("resnet50", k, pretrained),
}


def build_model(architecture: str, num_classes: int, pretrained: bool, seed: int) -> Classifier:
    """Instantiate an architecture with all random initialisation drawn from ``seed``."""
    if architecture not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {architecture!r}; choose from {sorted(ARCHITECTURES)}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ARCHITECTURES[architecture](num_classes, pretrained=pretrained)


def fresh_linear(in_features: int, out_features: int, seed: int) -> nn.Linear:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return nn.Linear(in_features, out_features)
