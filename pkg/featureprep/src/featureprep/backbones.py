"""Feature backbones behind one interface: crop in, 2048-dim vectors out.

"resnet152" uses torchvision with pretrained weights (cached or
downloadable; the optional `resnet` extra installs it). "toy" is a fully
offline, deterministic stand-in with the same output contract: a fixed
seeded projection of downsampled pixels. Region mode carves the crop into
a 6x6 grid, one vector per cell, matching the 36-region detector contract.
"""

from __future__ import annotations

import numpy as np

from .manifest import FEATURE_DIM, REGION_COUNT

_GRID = 6  # 6 x 6 = 36 region cells
_PATCH = 16  # toy backbone downsample size per cell/crop

_toy_projection: np.ndarray | None = None


def _projection() -> np.ndarray:
    # Fixed seed: the toy backbone must produce identical features across
    # runs and machines for byte-identical exports.
    global _toy_projection
    if _toy_projection is None:
        rng = np.random.default_rng(20240601)
        _toy_projection = rng.standard_normal(
            (_PATCH * _PATCH * 3, FEATURE_DIM)).astype(np.float32) / _PATCH
    return _toy_projection


def _downsample(pixels: np.ndarray, size: int) -> np.ndarray:
    """Box-average an HxWx3 array down to size x size."""
    h, w, _ = pixels.shape
    ys = np.linspace(0, h, size + 1).astype(int)
    xs = np.linspace(0, w, size + 1).astype(int)
    out = np.empty((size, size, 3), dtype=np.float32)
    for i in range(size):
        for j in range(size):
            block = pixels[ys[i]:max(ys[i + 1], ys[i] + 1),
                           xs[j]:max(xs[j + 1], xs[j] + 1)]
            out[i, j] = block.mean(axis=(0, 1))
    return out


def _toy_vector(pixels: np.ndarray) -> np.ndarray:
    patch = _downsample(pixels, _PATCH).reshape(-1) / 255.0
    return np.tanh(patch @ _projection()).astype(np.float32)


class ToyBackbone:
    """Deterministic offline extractor with the ResNet output contract."""

    name = "toy"

    def global_features(self, crop: np.ndarray) -> np.ndarray:
        return _toy_vector(crop).reshape(1, FEATURE_DIM)

    def region_features(self, crop: np.ndarray) -> np.ndarray:
        h, w, _ = crop.shape
        ys = np.linspace(0, h, _GRID + 1).astype(int)
        xs = np.linspace(0, w, _GRID + 1).astype(int)
        rows = []
        for i in range(_GRID):
            for j in range(_GRID):
                cell = crop[ys[i]:ys[i + 1], xs[j]:xs[j + 1]]
                rows.append(_toy_vector(cell))
        return np.stack(rows).reshape(REGION_COUNT, FEATURE_DIM)


class ResNet152Backbone:
    """torchvision ResNet-152: pooled 2048-dim features, or a 6x6 center
    grid of the final convolutional map for region mode."""

    name = "resnet152"

    def __init__(self):
        try:
            import torch
            import torchvision
        except ImportError as exc:
            raise RuntimeError(
                "the resnet152 backbone needs torch/torchvision "
                "(pip install 'featureprep[resnet]')") from exc
        try:
            weights = torchvision.models.ResNet152_Weights.IMAGENET1K_V1
            net = torchvision.models.resnet152(weights=weights)
        except Exception as exc:
            raise RuntimeError(
                "could not load pretrained ResNet-152 weights (offline and "
                "no cache?); use the 'toy' backbone for offline runs") from exc
        net.eval()
        self._torch = torch
        self._net = net
        self._mean = torch.tensor([0.485, 0.456, 0.406]).view(3, 1, 1)
        self._std = torch.tensor([0.229, 0.224, 0.225]).view(3, 1, 1)

    def _trunk(self, crop: np.ndarray):
        torch = self._torch
        x = torch.from_numpy(crop.astype(np.float32) / 255.0).permute(2, 0, 1)
        x = ((x - self._mean) / self._std).unsqueeze(0)
        net = self._net
        with torch.no_grad():
            x = net.conv1(x)
            x = net.bn1(x)
            x = net.relu(x)
            x = net.maxpool(x)
            for layer in (net.layer1, net.layer2, net.layer3, net.layer4):
                x = layer(x)
        return x  # [1, 2048, 7, 7] for a 224 crop

    def global_features(self, crop: np.ndarray) -> np.ndarray:
        fmap = self._trunk(crop)
        pooled = fmap.mean(dim=(2, 3)).squeeze(0).numpy()
        return pooled.reshape(1, FEATURE_DIM).astype(np.float32)

    def region_features(self, crop: np.ndarray) -> np.ndarray:
        fmap = self._trunk(crop).squeeze(0).numpy()  # [2048, 7, 7]
        grid = fmap[:, :_GRID, :_GRID]  # 6x6 window of the 7x7 map
        return (grid.reshape(FEATURE_DIM, -1).T
                .reshape(REGION_COUNT, FEATURE_DIM).astype(np.float32))


def get_backbone(name: str):
    if name == "toy":
        return ToyBackbone()
    if name == "resnet152":
        return ResNet152Backbone()
    raise ValueError(f"unknown backbone {name!r}")
