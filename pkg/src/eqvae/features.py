"""Small conv feature network for the perceptual loss and the Frechet proxy.

Stands in for LPIPS/VGG and Inception-v3. When class labels exist it is trained
as a classifier; otherwise its random initialisation is frozen as-is.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)

FEATURE_DIM = 64


class FeatureNet(nn.Module):
    def __init__(self, n_classes: int = 0, widths=(16, 32, FEATURE_DIM, FEATURE_DIM)):
        super().__init__()
        layers = []
        ch = 3
        for w in widths:
            layers.append(nn.Sequential(
                nn.Conv2d(ch, w, 3, padding=1),
                nn.GroupNorm(8, w),
                nn.SiLU(),
                nn.Conv2d(w, w, 3, stride=2, padding=1),
                nn.GroupNorm(8, w),
                nn.SiLU(),
            ))
            ch = w
        self.blocks = nn.ModuleList(layers)
        self.head = nn.Linear(ch, n_classes) if n_classes else None
        self.n_classes = n_classes

    def feature_maps(self, x: torch.Tensor) -> List[torch.Tensor]:
        maps = []
        for block in self.blocks:
            x = block(x)
            maps.append(x)
        return maps

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Global-average-pooled ``FEATURE_DIM`` vector per image."""
        return self.feature_maps(x)[-1].mean(dim=(-2, -1))

    def forward(self, x):
        if self.head is None:
            return self.embed(x)
        return self.head(self.embed(x))

    def perceptual_distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Mean over layers of the mean squared difference of feature maps."""
        fa, fb = self.feature_maps(a), self.feature_maps(b)
        return sum(F.mse_loss(x, y) for x, y in zip(fa, fb)) / len(fa)

    def freeze(self) -> "FeatureNet":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def train_feature_net(
    images: torch.Tensor,
    labels: Optional[np.ndarray],
    seed: int = 0,
    epochs: int = 15,
    batch_size: int = 64,
    lr: float = 1e-3,
) -> FeatureNet:
    """Fit a classifier on ``(images, labels)``; with no labels return frozen random features."""
    torch.manual_seed(seed)
    if labels is None:
        logger.info("no labels: using fixed random conv features")
        return FeatureNet().freeze()
    labels_t = torch.as_tensor(labels, dtype=torch.long)
    n_classes = int(labels_t.max()) + 1
    net = FeatureNet(n_classes)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    n = len(images)
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=gen)
        correct = 0
        for i in range(0, n, batch_size):
            idx = perm[i:i + batch_size]
            logits = net(images[idx].float())
            loss = F.cross_entropy(logits, labels_t[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            correct += (logits.argmax(1) == labels_t[idx]).sum().item()
        logger.info("feature net epoch %d: train acc %.3f", epoch, correct / n)
    return net.freeze()


def save_feature_net(net: FeatureNet, path) -> None:
    torch.save({"n_classes": net.n_classes, "state": net.state_dict()}, Path(path))


def load_feature_net(path) -> FeatureNet:
    blob = torch.load(Path(path), weights_only=True)
    net = FeatureNet(blob["n_classes"])
    net.load_state_dict(blob["state"])
    return net.freeze()


@torch.no_grad()
def extract_features(net: FeatureNet, images: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    """``(N, FEATURE_DIM)`` float64 embeddings."""
    out = [net.embed(images[i:i + batch_size].float()) for i in range(0, len(images), batch_size)]
    return torch.cat(out).double().numpy()
