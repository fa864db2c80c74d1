"""Frozen 4-layer convolutional feature extractor for the texture loss terms.

Layout: conv+ReLU (3->64), conv+ReLU (64->64), 2x2 max-pool, conv+ReLU
(64->128), conv+ReLU (128->128); post-ReLU layer-4 activations are the
features. Weights are never trained here: they come from a seeded init or an
external weight container, and all parameters have requires_grad=False so
gradients flow through to the input image but never into the extractor.
Inputs are consumed as-is in [0, 1] without mean/std normalization; external
weight files must be adapted to that convention.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .model import ShapeError, ConfigurationError, init_weights, read_container, write_container

PN_WIDTHS = (64, 64, 128, 128)
_PN_PREFIX = "pn."


class PerceptionNet(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(3, PN_WIDTHS[0], 3, padding=1)
        self.conv2 = nn.Conv2d(PN_WIDTHS[0], PN_WIDTHS[1], 3, padding=1)
        self.conv3 = nn.Conv2d(PN_WIDTHS[1], PN_WIDTHS[2], 3, padding=1)
        self.conv4 = nn.Conv2d(PN_WIDTHS[2], PN_WIDTHS[3], 3, padding=1)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (N, 3, H, W) input, got {tuple(x.shape)}")
        if x.shape[2] < 4 or x.shape[3] < 4:
            raise ShapeError("inputs must be at least 4x4")
        h = F.relu(self.conv1(x))
        h = F.relu(self.conv2(h))
        h = self.pool(h)
        h = F.relu(self.conv3(h))
        return F.relu(self.conv4(h))


def make_perception(seed: int = 0, weights_path=None,
                    dtype=torch.float32) -> PerceptionNet:
    """Build a frozen extractor from a weight file or a fixed-seed init."""
    net = PerceptionNet()
    if weights_path is not None:
        _load_weights(net, weights_path)
    else:
        init_weights(net, seed)
    net = net.to(dtype)
    for p in net.parameters():
        p.requires_grad_(False)
    net.eval()
    return net


def extract_features(img: torch.Tensor, net: PerceptionNet) -> torch.Tensor:
    """Texture features of an (N, 3, H, W) batch: (N, 128, H/2, W/2)."""
    return net(img)


def save_perception_weights(path, net: PerceptionNet) -> None:
    meta = {"format_version": 1, "kind": "perception",
            "shapes": {_PN_PREFIX + n: list(p.shape) for n, p in net.named_parameters()}}
    blobs = {_PN_PREFIX + n: p.detach().cpu().numpy() for n, p in net.named_parameters()}
    write_container(path, meta, blobs)


def _load_weights(net: PerceptionNet, path) -> None:
    _, blobs = read_container(path)
    with torch.no_grad():
        for name, p in net.named_parameters():
            key = _PN_PREFIX + name
            if key not in blobs:
                raise ConfigurationError(f"weight file is missing {key}")
            arr = blobs[key]
            if arr.size != p.numel():
                raise ConfigurationError(f"size mismatch for {key}")
            p.copy_(torch.from_numpy(arr.reshape(p.shape).copy()))
