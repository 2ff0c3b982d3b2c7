"""Class prototypes: batch centroids, momentum maintenance, cross-domain alignment loss."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class PrototypeBank:
    prototypes: torch.Tensor  # (C, D)
    initialized: torch.Tensor  # (C,) bool
    momentum: float = 0.01

    @classmethod
    def empty(cls, num_classes, dim, momentum=0.01, dtype=torch.float32):
        return cls(torch.zeros(num_classes, dim, dtype=dtype), torch.zeros(num_classes, dtype=torch.bool), momentum)

    def detached(self):
        return PrototypeBank(self.prototypes.detach().clone(), self.initialized.clone(), self.momentum)


def downsample_labels(labels, size):
    """Nearest-neighbour resize of an ``(H, W)`` or ``(B, H, W)`` label map."""
    squeeze = labels.dim() == 2
    x = labels[None] if squeeze else labels
    out = F.interpolate(x[:, None].float(), size=size, mode="nearest")[:, 0].to(labels.dtype)
    return out[0] if squeeze else out


def batch_prototypes(features, labels, valid=None, num_classes=2):
    """Per-class mean feature over pixels with that label (and ``valid``).

    ``features`` is ``(D, h, w)`` or ``(B, D, h, w)``; labels and valid must
    already be at feature resolution. Returns ``(protos (C, D), present (C,))``;
    rows of absent classes are zero and must be ignored.
    """
    if features.dim() == 3:
        features, labels = features[None], labels[None]
        valid = None if valid is None else valid[None]
    B, D, h, w = features.shape
    if labels.shape != (B, h, w):
        raise ValueError(f"labels {tuple(labels.shape)} not aligned with features {tuple(features.shape)}")
    flat = features.permute(0, 2, 3, 1).reshape(-1, D)
    lab = labels.reshape(-1).long()
    weight = torch.ones_like(lab, dtype=features.dtype) if valid is None else valid.reshape(-1).to(features.dtype)
    onehot = F.one_hot(lab, num_classes).to(features.dtype) * weight[:, None]
    counts = onehot.sum(0)
    sums = onehot.t() @ flat
    present = counts > 0
    protos = sums / counts.clamp_min(1.0)[:, None]
    return protos, present


def momentum_update(bank: PrototypeBank, batch, present) -> PrototypeBank:
    """``z <- m * z + (1 - m) * z_batch`` for present classes; first write adopts.

    The old prototypes are treated as constants, so the returned bank's
    prototypes carry gradient only through ``batch``.
    """
    if batch.shape != bank.prototypes.shape:
        raise ValueError(f"batch prototypes {tuple(batch.shape)} do not match bank {tuple(bank.prototypes.shape)}")
    m = bank.momentum
    old = bank.prototypes.detach().to(batch.dtype)
    blended = torch.where(bank.initialized[:, None], m * old + (1.0 - m) * batch, batch)
    new = torch.where(present[:, None], blended, old)
    return PrototypeBank(new, bank.initialized | present, bank.momentum)


def prototype_loss(source: PrototypeBank, target: PrototypeBank) -> torch.Tensor:
    """Sum of Euclidean distances over classes initialised in both banks."""
    if source.prototypes.shape != target.prototypes.shape:
        raise ValueError("prototype banks differ in shape")
    both = source.initialized & target.initialized
    dist = torch.linalg.vector_norm(source.prototypes - target.prototypes, dim=1)
    return (dist * both.to(dist.dtype)).sum()
