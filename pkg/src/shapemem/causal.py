"""Stratified selection of prior features and the stratified training loss.

The concatenated prior feature is split into n contiguous equal blocks.
Within each block, only the entries whose magnitude clears a threshold pass
through (zero-masked elsewhere); the decoder scores every masked variant
against the ground truth and the loss averages the per-block terms with
equal weight 1/n. Inference decodes once with the union of all surviving
entries.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .geometry import chamfer_l1_literal


def partition(total_dim: int, n: int) -> list[np.ndarray]:
    """Split indices 0..total_dim-1 into n contiguous equal blocks."""
    if n < 1:
        raise ContractError("need at least one stratum")
    if total_dim % n != 0:
        raise ContractError(f"{n} strata must divide feature size {total_dim}")
    block = total_dim // n
    return [np.arange(m * block, (m + 1) * block) for m in range(n)]


def threshold_set(prior_feature, t: float) -> np.ndarray:
    """Indices whose absolute value exceeds t."""
    if t < 0:
        raise ContractError("magnitude threshold must be >= 0")
    values = prior_feature.data if isinstance(prior_feature, ad.Tensor) else prior_feature
    values = np.asarray(values, dtype=np.float64)
    return np.flatnonzero(np.abs(values) > t)


def magnitude_threshold(prior_feature: np.ndarray, rule) -> float:
    """Resolve the threshold rule: 'median' of magnitudes, or a fixed number."""
    if isinstance(rule, str):
        if rule != "median":
            raise ContractError(f"unknown magnitude rule {rule!r}")
        if prior_feature.size == 0:
            return 0.0
        return float(np.median(np.abs(prior_feature)))
    return float(rule)


def _mask_for(length: int, stratum: np.ndarray, selected: np.ndarray) -> np.ndarray:
    mask = np.zeros(length)
    keep = np.intersect1d(stratum, selected, assume_unique=True)
    mask[keep] = 1.0
    return mask


def select(prior_feature, stratum: np.ndarray, selected: np.ndarray):
    """Zero-mask the prior feature outside stratum-and-selected indices.

    Masking instead of physical extraction keeps the decoder input width
    constant across strata, so one decoder serves them all. Works on plain
    arrays and on tensors (differentiable through the mask).
    """
    length = prior_feature.shape[0]
    mask = _mask_for(length, stratum, selected)
    if isinstance(prior_feature, ad.Tensor):
        return prior_feature * mask
    return np.asarray(prior_feature, dtype=np.float64) * mask


def causal_loss(f_partial: ad.Tensor, f_prior: ad.Tensor,
                strata: list[np.ndarray], selected: np.ndarray,
                decode_fn, ground_truth) -> ad.Tensor:
    """Average the dense-output reconstruction loss over all strata.

    `decode_fn` maps a fused feature tensor to (centers, dense); each
    stratum contributes chamfer_l1_literal(dense, ground_truth) with equal
    weight 1/n.
    """
    if not strata:
        raise ContractError("need at least one stratum")
    acc = None
    for stratum in strata:
        fused = ad.concat([f_partial, select(f_prior, stratum, selected)])
        _, dense = decode_fn(fused)
        term = chamfer_l1_literal(dense, ground_truth)
        acc = term if acc is None else acc + term
    return acc * (1.0 / len(strata))


def combined_loss(l_caus, l_recon, mix: float):
    """Convex combination mix * l_caus + (1 - mix) * l_recon."""
    if not 0.0 <= mix <= 1.0:
        raise ContractError("loss mix must lie in [0, 1]")
    return l_caus * mix + l_recon * (1.0 - mix)


def infer(f_partial: np.ndarray, f_prior: np.ndarray, selected: np.ndarray,
          decode_np_fn) -> np.ndarray:
    """One deterministic decode with the union mask over all strata.

    Averaging n decoded point sets coordinate-wise is meaningless for
    unordered points, so inference keeps every selected entry instead and
    decodes once.
    """
    full = np.arange(f_prior.shape[0])
    fused = np.concatenate([f_partial, select(f_prior, full, selected)])
    _, dense = decode_np_fn(fused)
    return dense
