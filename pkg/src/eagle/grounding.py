"""Instance masks to pooled object embeddings.

A mask is reduced to per-patch pixel coverage; patches with coverage >= theta
are selected (falling back to the best-covered patch for slivers). Pooling
averages the selected pre-projection tokens, then projects and normalizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import kernels
from . import numeric as nc

DEFAULT_THETA = 0.25


@dataclass
class MaskPatchOverlap:
    coverage: np.ndarray  # (L,) float64 in [0, 1]
    selected: np.ndarray  # (L,) bool, never empty


@dataclass
class PooledObjectEmbedding:
    vector: torch.Tensor
    class_id: int
    image_id: str = ""
    mask_id: int = 0


def rasterize(mask, patch_size: int, theta: float = DEFAULT_THETA, image_shape=None) -> MaskPatchOverlap:
    """Exact per-patch pixel coverage of a boolean mask."""
    m = np.ascontiguousarray(np.asarray(mask) != 0, dtype=np.uint8)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    if image_shape is not None and m.shape != tuple(image_shape[:2]):
        raise ValueError(f"mask shape {m.shape} does not match image {tuple(image_shape[:2])}")
    if m.shape[0] % patch_size or m.shape[1] % patch_size:
        raise ValueError(f"mask shape {m.shape} not divisible by patch size {patch_size}")
    if not m.any():
        raise ValueError("empty mask")
    coverage = np.asarray(kernels.patch_coverage(m, patch_size), dtype=np.float64)
    selected = coverage >= theta
    if not selected.any():
        selected[int(np.argmax(coverage))] = True  # argmax picks the lowest index on ties
    return MaskPatchOverlap(coverage, selected)


def pool_weights(selected: torch.Tensor, dtype=torch.float64) -> torch.Tensor:
    """Row weights 1/count on selected positions, 0 elsewhere; ``(..., L)``."""
    sel = selected.to(dtype)
    count = sel.sum(dim=-1, keepdim=True)
    if bool((count == 0).any()):
        raise ValueError("masked pooling needs at least one selected patch")
    return sel / count


def pool_raw(raw_seq: torch.Tensor, selected: torch.Tensor) -> torch.Tensor:
    """Mean of the selected token rows: ``(B, L, D), (B, L) -> (B, D)``."""
    w = pool_weights(selected, raw_seq.dtype)
    return torch.einsum("bl,bld->bd", w, raw_seq)


def pool_batch(raw_seq: torch.Tensor, selected: torch.Tensor, proj: torch.Tensor) -> torch.Tensor:
    """Pooled, projected, unit-norm object embeddings ``(B, E)``."""
    return nc.l2_normalize(nc.matmul(pool_raw(raw_seq, selected), proj))


def masked_average_pool(output, overlap: MaskPatchOverlap, proj: torch.Tensor, index: int = 0,
                        class_id: int = -1, image_id: str = "", mask_id: int = 0) -> PooledObjectEmbedding:
    """Pool one mask over item ``index`` of an :class:`EncoderOutput`."""
    sel = torch.as_tensor(overlap.selected).unsqueeze(0)
    vec = pool_batch(output.raw_seq[index : index + 1], sel, proj)[0]
    return PooledObjectEmbedding(vec, class_id, image_id, mask_id)


def sample_mask(sample, rng: nc.RngStream) -> tuple[int, int]:
    """Uniformly pick one instance of ``sample``; returns ``(mask index, class id)``."""
    n = len(sample.instances)
    if n == 0:
        raise ValueError(f"sample {sample.id!r} has no masks")
    i = rng.integers(n)
    return i, sample.instances[i].class_id


def mask_stream(rng: nc.RngStream, sample_id: str, epoch: int) -> nc.RngStream:
    return rng.split(f"mask/{sample_id}/{epoch}")
