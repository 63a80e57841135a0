"""Frozen convolutional feature extractors for the feature-wise loss."""

from __future__ import annotations

import logging
import os
from pathlib import Path

import torch
from torch import Tensor, nn

log = logging.getLogger(__name__)

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)
VGG16_WEIGHTS_FILE = "vgg16-397923af.pth"
# relu1_2, relu2_2, relu3_3 in torchvision's vgg16.features indexing
VGG16_TAPS = (3, 8, 15)


class FeatureExtractor(nn.Module):
    """Fixed network returning activations at a list of tap layers.

    Weights never receive gradients; inputs do.
    """

    def __init__(self, layers: nn.Sequential, taps: tuple[int, ...], provenance: str, extractor_id: str):
        super().__init__()
        self.layers = layers
        self.taps = tuple(taps)
        self.provenance = provenance
        self.extractor_id = extractor_id
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)

    def forward(self, x: Tensor) -> list[Tensor]:
        h = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        out = []
        last = max(self.taps)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i in self.taps:
                out.append(h)
            if i == last:
                break
        return out


def seeded_random_extractor(seed: int = 0, widths: tuple[int, int, int] = (16, 32, 64)) -> FeatureExtractor:
    """Small VGG-style stack with Kaiming-initialized weights from ``seed``.

    Softplus and average pooling stand in for ReLU and max pooling so the
    feature loss is smooth everywhere; finite-difference gradient checks
    would otherwise trip over activation kinks.
    """
    gen = torch.Generator().manual_seed(seed)
    c1, c2, c3 = widths
    layers = nn.Sequential(
        nn.Conv2d(3, c1, 3, padding=1), nn.Softplus(beta=4.0),
        nn.Conv2d(c1, c1, 3, padding=1), nn.Softplus(beta=4.0),
        nn.AvgPool2d(2),
        nn.Conv2d(c1, c2, 3, padding=1), nn.Softplus(beta=4.0),
        nn.Conv2d(c2, c2, 3, padding=1), nn.Softplus(beta=4.0),
        nn.AvgPool2d(2),
        nn.Conv2d(c2, c3, 3, padding=1), nn.Softplus(beta=4.0),
    )  # fmt: skip
    with torch.no_grad():
        for m in layers:
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * 9
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                m.bias.zero_()
    return FeatureExtractor(layers, taps=(3, 8, 10), provenance="seeded_random", extractor_id=f"random-vgg:{seed}")


def _find_vgg16_weights() -> Path | None:
    candidates = []
    if os.environ.get("JNDLC_VGG16_WEIGHTS"):
        candidates.append(Path(os.environ["JNDLC_VGG16_WEIGHTS"]))
    candidates.append(Path(torch.hub.get_dir()) / "checkpoints" / VGG16_WEIGHTS_FILE)
    return next((p for p in candidates if p.is_file()), None)


def pretrained_vgg16_extractor(weights: str | Path | None = None) -> FeatureExtractor:
    """torchvision VGG16 features up to relu3_3, from a local weights file (no download)."""
    from torchvision.models import vgg16

    path = Path(weights) if weights else _find_vgg16_weights()
    if path is None or not path.is_file():
        raise FileNotFoundError(
            f"VGG16 weights not found; set JNDLC_VGG16_WEIGHTS or place {VGG16_WEIGHTS_FILE} in the torch hub cache"
        )
    net = vgg16()
    net.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    layers = nn.Sequential(*list(net.features.children())[: max(VGG16_TAPS) + 1])
    return FeatureExtractor(layers, taps=VGG16_TAPS, provenance="pretrained", extractor_id="vgg16")


def load_feature_extractor(extractor_id: str = "auto") -> FeatureExtractor:
    """Resolve an extractor id: ``vgg16``, ``random-vgg:<seed>`` or ``auto``.

    ``auto`` prefers pretrained VGG16 weights when they are on disk and
    falls back to ``random-vgg:0`` otherwise.
    """
    if extractor_id == "vgg16":
        return pretrained_vgg16_extractor()
    if extractor_id.startswith("random-vgg"):
        _, _, seed = extractor_id.partition(":")
        return seeded_random_extractor(int(seed or 0))
    if extractor_id == "auto":
        if _find_vgg16_weights() is not None:
            return pretrained_vgg16_extractor()
        log.warning("pretrained VGG16 weights unavailable; using seeded random features (random-vgg:0)")
        return seeded_random_extractor(0)
    raise ValueError(f"unknown feature extractor id {extractor_id!r}")


def extract_features(x: Tensor, extractor: FeatureExtractor) -> list[Tensor]:
    return extractor(x)
