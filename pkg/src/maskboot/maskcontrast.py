"""Mask-pooled region features and the mask-dependent contrastive loss.

``mask_pool`` is the reference pooling op: it accumulates active cells
sequentially in row-major order, channel by channel, so its result is
bit-identical to a brute-force double loop at double precision. The
trainer's batched pooling (``pool_masked_features``) is the vectorized
torch equivalent of the same average and is cross-checked against the
reference in tests.

Mask downsampling uses plurality overlap: a target cell takes the class
holding the most source pixels in its footprint, ties to the lower label.
This keeps thin objects alive at feature resolution and keeps the
downsampled label grid a partition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractError, DegenerateBatchError, EmptyMaskError


def _footprints(src: int, dst: int) -> list[tuple[int, int]]:
    """Source index ranges [lo, hi) covered by each target cell."""
    return [(int(np.floor(d * src / dst)), int(np.floor((d + 1) * src / dst))) for d in range(dst)]


def downsample_label_grid(labels: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """Plurality-overlap downsampling of a label grid."""
    h, w = labels.shape
    th, tw = target_hw
    if th > h or tw > w:
        raise ContractError(f"target {target_hw} exceeds source {labels.shape}")
    rows = _footprints(h, th)
    cols = _footprints(w, tw)
    out = np.zeros((th, tw), dtype=labels.dtype)
    for r, (r0, r1) in enumerate(rows):
        for c, (c0, c1) in enumerate(cols):
            patch = labels[r0:r1, c0:c1].ravel()
            # bincount argmax returns the lowest label on ties
            counts = np.bincount(patch - patch.min())
            out[r, c] = patch.min() + int(np.argmax(counts))
    return out


def downsample_mask(mask: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """Plurality-overlap downsampling of one binary mask.

    The mask is treated as a two-class grid (off=0, on=1); a target cell is
    active iff the on-class is the strict plurality over the cell's source
    footprint (ties go to the lower class, i.e. off). An all-empty result
    is legal; callers must check before pooling.
    """
    if mask.dtype == bool:
        grid = mask.astype(np.int32)
    else:
        grid = (mask != 0).astype(np.int32)
    return downsample_label_grid(grid, target_hw).astype(bool)


def mask_pool(fmap: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked average of feature cells: h = sum_m(F) / sum(m).

    Reference implementation. Cells accumulate strictly in row-major order
    (one fused vector add per active cell), matching a naive double loop
    bitwise at float64.
    """
    if fmap.ndim != 3:
        raise ContractError(f"feature map must be D x H x W, got {fmap.shape}")
    if fmap.shape[1:] != mask.shape:
        raise ContractError(f"mask {mask.shape} does not match feature map {fmap.shape[1:]}")
    active = np.argwhere(mask)
    if active.shape[0] == 0:
        raise EmptyMaskError("mask has no active cells")
    acc = np.zeros(fmap.shape[0], dtype=fmap.dtype)
    for i, j in active:
        acc = acc + fmap[:, i, j]
    return acc / active.shape[0]


def pool_masked_features(fused: torch.Tensor, masks: torch.Tensor, batch_index: torch.Tensor) -> torch.Tensor:
    """Batched torch pooling: one pooled vector per (mask, image) row.

    fused: B x D x h x w, masks: P x h x w (binary), batch_index: P ints.
    """
    sel = fused[batch_index]  # P x D x h x w
    m = masks.to(sel.dtype).unsqueeze(1)
    total = (sel * m).sum(dim=(2, 3))
    counts = m.sum(dim=(2, 3))
    if torch.any(counts == 0):
        raise EmptyMaskError("empty mask in batched pooling")
    return total / counts


@dataclass
class PooledFeature:
    """One region descriptor with its provenance."""

    vector: np.ndarray
    label: int
    image_id: int
    view: str  # "online" | "target"


@dataclass
class ContrastBatch:
    """Index structure for one evaluation of the contrastive objective.

    anchors[i] pairs with positives[i]; negatives[i] indexes rows of the
    anchor-side embedding matrix.
    """

    online: torch.Tensor  # N x E online embeddings
    target: torch.Tensor  # N x E target embeddings, row-aligned metadata
    pairs: list[tuple[int, int]]  # (online row, target row)
    negatives: list[np.ndarray]  # per pair: online rows used as negatives
    online_meta: list[tuple[int, int]]  # (image_id, label) per online row
    target_meta: list[tuple[int, int]]


def build_contrast_batch(
    pooled_online: list[PooledFeature],
    pooled_target: list[PooledFeature],
    rng: np.random.Generator,
    n_neg: int,
    online_matrix: torch.Tensor | None = None,
    target_matrix: torch.Tensor | None = None,
) -> ContrastBatch:
    """Pair labels surviving in both views; sample negatives per anchor.

    Negatives are drawn without replacement from online rows whose
    (image, label) differs from the anchor's; if fewer than n_neg exist,
    all of them are used. Raises DegenerateBatchError when no label
    survives in both views of any image.
    """
    if online_matrix is None:
        online_matrix = torch.stack([torch.as_tensor(p.vector) for p in pooled_online])
    if target_matrix is None:
        target_matrix = torch.stack([torch.as_tensor(p.vector) for p in pooled_target])
    online_meta = [(p.image_id, p.label) for p in pooled_online]
    target_meta = [(p.image_id, p.label) for p in pooled_target]
    target_rows = {meta: i for i, meta in enumerate(target_meta)}

    pairs: list[tuple[int, int]] = []
    negatives: list[np.ndarray] = []
    for a_row, meta in enumerate(online_meta):
        t_row = target_rows.get(meta)
        if t_row is None:
            continue
        pairs.append((a_row, t_row))
        candidates = np.array(
            [i for i, m in enumerate(online_meta) if m != meta], dtype=np.int64
        )
        if candidates.size > n_neg:
            chosen = rng.choice(candidates, size=n_neg, replace=False)
        else:
            chosen = candidates
        negatives.append(np.sort(chosen))
    if not pairs:
        raise DegenerateBatchError("no mask label survives in both views")
    return ContrastBatch(
        online=online_matrix,
        target=target_matrix,
        pairs=pairs,
        negatives=negatives,
        online_meta=online_meta,
        target_meta=target_meta,
    )


def contrastive_loss(batch: ContrastBatch, temperature: float) -> torch.Tensor:
    """Mean over anchors of -log( e^{a.p/t} / (e^{a.p/t} + sum_n e^{a.n/t}) )."""
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    a_rows = torch.tensor([a for a, _ in batch.pairs], dtype=torch.long)
    t_rows = torch.tensor([t for _, t in batch.pairs], dtype=torch.long)
    anchors = batch.online[a_rows]  # P x E
    positives = batch.target[t_rows]
    pos_logits = (anchors * positives).sum(dim=1) / temperature  # P

    max_n = max((n.size for n in batch.negatives), default=0)
    if max_n == 0:
        logits = pos_logits.unsqueeze(1)
    else:
        n_pairs = len(batch.pairs)
        idx = np.zeros((n_pairs, max_n), dtype=np.int64)
        pad = np.ones((n_pairs, max_n), dtype=bool)
        for i, negs in enumerate(batch.negatives):
            idx[i, : negs.size] = negs
            pad[i, : negs.size] = False
        neg_rows = batch.online[torch.from_numpy(idx)]  # P x max_n x E
        neg_logits = (neg_rows * anchors.unsqueeze(1)).sum(dim=2) / temperature
        neg_logits = neg_logits.masked_fill(torch.from_numpy(pad), float("-inf"))
        logits = torch.cat([pos_logits.unsqueeze(1), neg_logits], dim=1)
    return (torch.logsumexp(logits, dim=1) - pos_logits).mean()
