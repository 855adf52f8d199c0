"""Hard-negative mining for the match classifier.

Every training batch holds N aligned positive pairs. The miner builds the
N x N descriptor distance matrix (rows: spectrum-B descriptors, columns:
spectrum-A descriptors), picks for each column the nearest off-diagonal
row — the most confusable wrong partner — and assembles a shuffled batch
of N positives plus N mined negatives for the classifier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import MiningError, ShapeError

_SQRT_GUARD = 1e-18  # keeps sqrt differentiable at zero distance


def distance_matrix(desc_b: torch.Tensor, desc_a: torch.Tensor) -> torch.Tensor:
    """Pairwise Euclidean distances: out[i, j] = ||desc_b[i] - desc_a[j]||.

    Uses the expanded form ||x||^2 + ||y||^2 - 2 x.y with the square
    clamped at zero, so it is O(N^2 D) work in three matmul-shaped ops and
    stays on the autodiff graph (the descriptor loss differentiates
    through it).
    """
    if desc_b.dim() != 2 or desc_a.dim() != 2 or desc_b.shape[1] != desc_a.shape[1]:
        raise ShapeError(
            f"descriptor batches must be [N, D] with matching D, got "
            f"{tuple(desc_b.shape)} and {tuple(desc_a.shape)}"
        )
    if desc_b.shape[0] != desc_a.shape[0]:
        raise ShapeError(
            f"descriptor batches differ in size: {desc_b.shape[0]} vs {desc_a.shape[0]}"
        )
    sq_b = desc_b.pow(2).sum(dim=1, keepdim=True)  # [N, 1]
    sq_a = desc_a.pow(2).sum(dim=1)  # [N]
    d2 = sq_b + sq_a[None, :] - 2.0 * desc_b @ desc_a.t()
    return torch.sqrt(d2.clamp_min(0.0) + _SQRT_GUARD)


def hard_negative_indices(matrix, bidirectional: bool = False) -> np.ndarray:
    """Nearest off-diagonal row per column; ties go to the lowest index.

    Returns idx with idx[j] != j: the row whose spectrum-B descriptor sits
    closest to spectrum-A descriptor j without being its true match. The
    optional ``bidirectional`` mode is an extension (see
    :func:`mine_negative_pairs`); this function always mines columns.
    """
    if bidirectional:
        raise MiningError("bidirectional mining returns pairs; use mine_negative_pairs")
    m = _as_square_array(matrix)
    n = m.shape[0]
    masked = m.copy()
    np.fill_diagonal(masked, np.inf)
    return np.argmin(masked, axis=0).astype(np.int64)


def mine_negative_pairs(matrix, bidirectional: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs (a_idx, b_idx) of the mined negatives.

    Negative t is the pair (spectrum-A patch a_idx[t], spectrum-B patch
    b_idx[t]). Default direction pairs each column j with its hardest row.
    With ``bidirectional=True`` each anchor j also considers the hardest
    column for row j and keeps whichever candidate is closer, still one
    negative per anchor so the batch stays balanced.
    """
    m = _as_square_array(matrix)
    n = m.shape[0]
    cols = np.arange(n, dtype=np.int64)
    col_idx = hard_negative_indices(m)
    if not bidirectional:
        return cols, col_idx
    masked = m.copy()
    np.fill_diagonal(masked, np.inf)
    row_idx = np.argmin(masked, axis=1).astype(np.int64)
    d_col = m[col_idx, cols]
    d_row = m[cols, row_idx]
    use_row = d_row < d_col
    a_idx = np.where(use_row, row_idx, cols)
    b_idx = np.where(use_row, cols, col_idx)
    return a_idx, b_idx


def random_negative_indices(n: int, rng_seed: int) -> np.ndarray:
    """Uniform wrong partner per column; the no-mining ablation baseline."""
    if n < 2:
        raise MiningError(f"need at least 2 pairs to draw negatives, got {n}")
    rng = np.random.default_rng(rng_seed)
    return (np.arange(n, dtype=np.int64) + 1 + rng.integers(0, n - 1, n)) % n


def _as_square_array(matrix) -> np.ndarray:
    m = np.asarray(matrix.detach() if isinstance(matrix, torch.Tensor) else matrix)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"distance matrix must be square, got {m.shape}")
    if m.shape[0] < 2:
        raise MiningError(f"mining needs at least 2 pairs, got {m.shape[0]}")
    return m


@dataclass
class MetricBatch:
    """Shuffled classifier batch of N positives and N negatives.

    ``maps_a``/``maps_b`` stay on the autodiff graph of the feature maps
    they were gathered from. ``pair_a_idx``/``pair_b_idx`` record, per
    entry, which original batch rows were paired; ``permutation`` is the
    shuffle that was applied.
    """

    maps_a: torch.Tensor  # [2N, C, H, W]
    maps_b: torch.Tensor
    labels: torch.Tensor  # [2N] float, exactly N ones and N zeros
    pair_a_idx: np.ndarray
    pair_b_idx: np.ndarray
    permutation: np.ndarray


def assemble_metric_batch(maps_a: torch.Tensor, maps_b: torch.Tensor, idx, rng_seed: int) -> MetricBatch:
    """Combine positives with mined negatives and shuffle with a fixed seed.

    ``idx`` is either the [N] hard-negative index array (negative j pairs
    spectrum-A map j with spectrum-B map idx[j]) or an (a_idx, b_idx) pair
    from :func:`mine_negative_pairs`.
    """
    if maps_a.shape != maps_b.shape:
        raise ShapeError(
            f"feature map batches differ in shape: {tuple(maps_a.shape)} vs {tuple(maps_b.shape)}"
        )
    n = maps_a.shape[0]
    if isinstance(idx, tuple):
        neg_a, neg_b = (np.asarray(v, dtype=np.int64) for v in idx)
    else:
        neg_a = np.arange(n, dtype=np.int64)
        neg_b = np.asarray(idx, dtype=np.int64)
    if neg_a.shape != (n,) or neg_b.shape != (n,):
        raise MiningError(f"negative index arrays must have length {n}")
    if ((neg_a < 0) | (neg_a >= n) | (neg_b < 0) | (neg_b >= n)).any():
        raise MiningError("negative indices out of range")
    if (neg_a == neg_b).any():
        raise MiningError("a negative pair may not reuse a true match (index equal on both sides)")

    pos = np.arange(n, dtype=np.int64)
    a_idx = np.concatenate([pos, neg_a])
    b_idx = np.concatenate([pos, neg_b])
    labels = np.concatenate([np.ones(n), np.zeros(n)])

    perm = np.random.default_rng(rng_seed).permutation(2 * n)
    a_idx, b_idx, labels = a_idx[perm], b_idx[perm], labels[perm]

    device = maps_a.device
    return MetricBatch(
        maps_a=maps_a[torch.as_tensor(a_idx, device=device)],
        maps_b=maps_b[torch.as_tensor(b_idx, device=device)],
        labels=torch.as_tensor(labels, dtype=maps_a.dtype, device=device),
        pair_a_idx=a_idx,
        pair_b_idx=b_idx,
        permutation=perm,
    )
