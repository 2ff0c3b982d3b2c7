"""Attention-guided auxiliary local prediction.

Saliency comes from the last two attention blocks: heads are averaged, each
N x N matrix is summed over its query axis (how much attention each token
receives), and the two blocks are added. Cells above the mean saliency form
candidate regions; the largest 4-connected region centres a crop whose
full-resolution prediction is fused with masked features of a downsampled
view of the whole image.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import kernels
from .mean_teacher import dice_loss


@dataclass
class SaliencyMap:
    values: np.ndarray
    mean_value: float


@dataclass
class PatchSelection:
    patch_bounds: tuple  # (row, col, height, width)
    region_mask: np.ndarray
    component_size: int
    component_sizes: list = field(default_factory=list)
    fallback: bool = False


def saliency_vectors(attention_maps):
    """Batched fusion: list of ``(..., heads, N, N)`` maps -> ``(..., N)``."""
    if len(attention_maps) == 0:
        raise ValueError("no attention maps given")
    total = 0
    for att in attention_maps:
        total = total + att.mean(dim=-3).sum(dim=-2)
    return total


def fuse_attention(attention_maps) -> SaliencyMap:
    """Fuse per-image ``(heads, N, N)`` attention matrices into a square saliency grid."""
    maps = [torch.as_tensor(a) for a in attention_maps]
    vec = saliency_vectors(maps)
    if vec.dim() != 1:
        raise ValueError("fuse_attention expects per-image (heads, N, N) maps")
    n = vec.shape[0]
    side = math.isqrt(n)
    if side * side != n:
        raise ValueError(f"token count {n} is not a perfect square")
    values = vec.detach().double().cpu().numpy().reshape(side, side)
    return SaliencyMap(values, float(values.mean()))


def region_mask_for(bounds, image_size, feature_grid):
    """Feature cells overlapped by ``bounds`` on a ``feature_grid`` covering the image."""
    top, left, h, w = bounds
    H, W = image_size
    gh, gw = feature_grid
    mask = np.zeros((gh, gw), dtype=np.uint8)
    r0, r1 = (top * gh) // H, -((-(top + h) * gh) // H)
    c0, c1 = (left * gw) // W, -((-(left + w) * gw) // W)
    mask[r0:r1, c0:c1] = 1
    return mask


def _check_patch(image_size, patch_size):
    H, W = image_size
    h, w = patch_size
    if h > H or w > W or h < 1 or w < 1:
        raise ValueError(f"patch {h}x{w} does not fit in image {H}x{W}")


def centered_patch(image_size, patch_size):
    H, W = image_size
    h, w = patch_size
    return ((H - h) // 2, (W - w) // 2, h, w)


def select_patch(saliency: SaliencyMap, image_size, patch_size, feature_grid=None) -> PatchSelection:
    """Crop centred on the largest above-mean 4-connected saliency region.

    Ties in component size go to the component holding the single highest
    saliency value, then to the earlier component in row-major order. The
    component centroid is rounded to the nearest cell, mapped to that cell's
    centre pixel and the crop is clamped to the image. With no cell strictly
    above the mean, the centred crop is returned.
    """
    _check_patch(image_size, patch_size)
    values = np.asarray(saliency.values, dtype=np.float64)
    gr, gc = values.shape
    feature_grid = feature_grid or (gr, gc)
    H, W = image_size
    h, w = patch_size
    candidates = values > saliency.mean_value
    labels, count = kernels.label_components_4(candidates.astype(np.uint8))
    if count == 0:
        bounds = centered_patch(image_size, patch_size)
        return PatchSelection(bounds, region_mask_for(bounds, image_size, feature_grid), 0, [], True)

    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=count + 1)[1:]
    peaks = np.full(count + 1, -np.inf)
    np.maximum.at(peaks, flat, values.ravel())
    peaks = peaks[1:]
    best = max(range(count), key=lambda i: (sizes[i], peaks[i], -i))
    rows, cols = np.nonzero(labels == best + 1)
    cr = int(math.floor(rows.mean() + 0.5))
    cc = int(math.floor(cols.mean() + 0.5))
    center_y = int((cr + 0.5) * H / gr)
    center_x = int((cc + 0.5) * W / gc)
    top = min(max(center_y - h // 2, 0), H - h)
    left = min(max(center_x - w // 2, 0), W - w)
    bounds = (top, left, h, w)
    return PatchSelection(bounds, region_mask_for(bounds, image_size, feature_grid),
                          int(sizes[best]), sizes.tolist(), False)


def random_patch(image_size, patch_size, rng, feature_grid=None) -> PatchSelection:
    _check_patch(image_size, patch_size)
    H, W = image_size
    h, w = patch_size
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    bounds = (top, left, h, w)
    grid = feature_grid or (H, W)
    return PatchSelection(bounds, region_mask_for(bounds, image_size, grid), 0, [], False)


def _crop_region(x, mask):
    rows = torch.nonzero(mask.any(dim=1)).flatten()
    cols = torch.nonzero(mask.any(dim=0)).flatten()
    if rows.numel() == 0:
        return x
    return x[..., int(rows[0]):int(rows[-1]) + 1, int(cols[0]):int(cols[-1]) + 1]


def masked_global_features(f_global, mask, size):
    """``upsample(M * g)`` restricted to the bounding box of ``M``."""
    if mask.dim() == 2:
        mask = mask[None]
    mask = torch.as_tensor(mask, device=f_global.device)
    if f_global.shape[0] != mask.shape[0] or f_global.shape[-2:] != mask.shape[-2:]:
        raise ValueError(f"mask {tuple(mask.shape)} does not match global features {tuple(f_global.shape)}")
    masked = f_global * mask[:, None].to(f_global.dtype)
    out = []
    for b in range(masked.shape[0]):
        region = _crop_region(masked[b:b + 1], mask[b].bool())
        out.append(F.interpolate(region, size=size, mode="bilinear", align_corners=False))
    return torch.cat(out)


def global_local_fuse(decoder, f_local, f_global, mask):
    """Concatenate local and masked/upsampled global features, decode to patch logits.

    Returns ``(logits, f_global_upsampled)``.
    """
    g = masked_global_features(f_global, mask, f_local.shape[-2:])
    if g.shape != f_local.shape:
        raise ValueError(f"global branch {tuple(g.shape)} does not match local branch {tuple(f_local.shape)}")
    return decoder(torch.cat([f_local, g], dim=1)), g


def cosine_reg(f_local, f_global, denominator: str = "product"):
    """``1 - cos(f_local, f_global)``, averaged over a batch of vectors.

    ``denominator="max"`` divides by the larger norm instead of the product.
    """
    if f_local.shape != f_global.shape:
        raise ValueError("feature vectors must have equal shapes")
    a = f_local if f_local.dim() > 1 else f_local[None]
    b = f_global if f_global.dim() > 1 else f_global[None]
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("cosine regularisation undefined for zero vectors")
    if denominator == "product":
        den = na * nb
    elif denominator == "max":
        den = torch.maximum(na, nb)
    else:
        raise ValueError(f"unknown denominator {denominator!r}")
    return (1.0 - (a * b).sum(-1) / den).mean()


def aalp_loss(source_terms, target_terms, gamma: float = 0.05, delta: float = 0.025):
    """``gamma*dice_s + delta*cos_s + 2*gamma*dice_t + 2*delta*cos_t``."""
    dice_s, cos_s = source_terms
    dice_t, cos_t = target_terms
    return gamma * dice_s + delta * cos_s + 2 * gamma * dice_t + 2 * delta * cos_t


def crop(x, bounds):
    top, left, h, w = bounds
    return x[..., top:top + h, left:left + w]


def auxiliary_terms(model, images, labels, valid, selections, downsample=2, cosine_denominator="product"):
    """Dice and cosine terms of the global-local branch for one domain.

    ``images`` ``(B, H, W)``; ``labels``/``valid`` ``(B, H, W)`` (``valid`` may be
    None); one :class:`PatchSelection` per image, all with the same patch size.
    """
    patches = torch.stack([crop(images[b], s.patch_bounds) for b, s in enumerate(selections)])
    lab = torch.stack([crop(labels[b], s.patch_bounds) for b, s in enumerate(selections)])
    val = None if valid is None else torch.stack([crop(valid[b], s.patch_bounds) for b, s in enumerate(selections)])
    f_local = model(patches).fused_features
    small = F.avg_pool2d(images[:, None], downsample)[:, 0] if downsample > 1 else images
    f_global = model(small).fused_features
    masks = torch.as_tensor(np.stack([s.region_mask for s in selections]))
    logits, g_up = global_local_fuse(model.aux_decoder, f_local, f_global, masks)
    logits = F.interpolate(logits, size=patches.shape[-2:], mode="bilinear", align_corners=False)
    dice = dice_loss(torch.softmax(logits, dim=1), lab, val)
    cos = cosine_reg(f_local.mean(dim=(-2, -1)), g_up.mean(dim=(-2, -1)), cosine_denominator)
    return dice, cos
