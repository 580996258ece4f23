"""Frozen convolutional backbone with block-indexed feature taps.

Layer enumeration
-----------------
"Layer index" here means the cumulative count of MBConv blocks across the
backbone's stages, stem excluded.  For EfficientNet-B5 the per-stage block
counts are (3, 5, 5, 7, 7, 9, 3), so the cumulative boundaries are

    3, 8, 13, 20, 27, 36, 39.

Index 36 is therefore the output of the sixth stage: 304 channels at
stride 32, i.e. an 8x8 map for a 256x256 input.  Any index from 1 to the
total block count is accepted; the forward pass stops at that block.

Weights: "pretrained" downloads the ImageNet weights (fatal if they cannot
be obtained); "random" initializes deterministically from a seed, which
keeps shapes and byte formats testable offline.
"""

from __future__ import annotations

import numpy as np
import torch
from torchvision import models

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_BACKBONES = {
    "efficientnet_b5": (models.efficientnet_b5, "EfficientNet_B5_Weights"),
}


class BackboneError(RuntimeError):
    pass


def cumulative_block_count(features) -> int:
    """Total MBConv blocks across the stages of a torchvision EfficientNet."""
    return sum(len(stage) for stage in list(features)[1:-1])


class BackboneFeatures:
    """Forward images to a block-indexed tap of a frozen backbone."""

    def __init__(self, name: str = "efficientnet_b5", layer_index: int = 36,
                 weights: str = "pretrained", seed: int = 0):
        if name not in _BACKBONES:
            raise BackboneError(f"unknown backbone {name!r}; supported: {sorted(_BACKBONES)}")
        ctor, weights_enum = _BACKBONES[name]
        if weights == "pretrained":
            try:
                enum = getattr(models, weights_enum).IMAGENET1K_V1
                model = ctor(weights=enum)
            except Exception as exc:
                raise BackboneError(
                    f"failed to load pretrained weights for {name}: {exc}"
                ) from exc
        elif weights == "random":
            torch.manual_seed(seed)
            model = ctor(weights=None)
        else:
            raise BackboneError(f"weights must be 'pretrained' or 'random', got {weights!r}")

        self.name = name
        self.weights = weights
        features = model.features
        total = cumulative_block_count(features)
        if not (1 <= layer_index <= total):
            raise BackboneError(
                f"layer index {layer_index} out of range; {name} has {total} blocks"
            )
        self.layer_index = layer_index
        self.stem = features[0].eval()
        blocks = []
        for stage in list(features)[1:-1]:
            blocks.extend(stage)
        self.blocks = torch.nn.Sequential(*blocks[:layer_index]).eval()
        for p in self.stem.parameters():
            p.requires_grad_(False)
        for p in self.blocks.parameters():
            p.requires_grad_(False)
        with torch.no_grad():
            probe = self.blocks(self.stem(torch.zeros(1, 3, 64, 64)))
        self.out_channels = int(probe.shape[1])
        self.stride = int(round(64 / probe.shape[-1]))

    def expected_spatial(self, input_size: int) -> int:
        return max(1, input_size // self.stride)

    @torch.no_grad()
    def extract(self, batch: np.ndarray) -> np.ndarray:
        """(n, 3, s, s) normalized float32 batch -> (n, h, w, c) features."""
        x = torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32))
        out = self.blocks(self.stem(x))
        return out.permute(0, 2, 3, 1).contiguous().numpy()
