"""Mask regeneration: spherical k-means over encoder features.

Scenes are clustered in fixed-size batches; each batch samples its own
cluster count K uniformly from [k_min, k_max], clusters the flattened,
feature-wise normalized stage map, labels every cell by nearest prototype,
and upsamples the label grid back to image resolution. Cluster ids are
batch-local: the contrastive objective only ever compares labels within a
single image, so no cross-batch alignment is attempted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .config import BootstrapConfig
from .encoder import Backbone, forward_stages
from .errors import ContractError, InfeasibleClusteringError
from .masks import MaskSet, nn_source_index

_ZERO_NORM_EPS = 1e-12


@dataclass
class PrototypeBank:
    """Unit-norm cluster centers from one clustering run."""

    prototypes: np.ndarray  # K x D, rows unit-norm
    stage: str
    epoch: int

    @property
    def k(self) -> int:
        return int(self.prototypes.shape[0])


@dataclass
class KMeansResult:
    prototypes: np.ndarray  # K x D
    assignments: np.ndarray  # N
    objective: list[float] = field(default_factory=list)  # mean cosine per iteration
    reseeds: int = 0


def sample_cluster_count(rng: np.random.Generator, k_min: int, k_max: int) -> int:
    """K ~ uniform integers on [k_min, k_max] inclusive."""
    if not (1 <= k_min <= k_max):
        raise ContractError(f"invalid cluster bounds [{k_min}, {k_max}]")
    return int(rng.integers(k_min, k_max + 1))


def normalize_rows(rows: np.ndarray) -> tuple[np.ndarray, int]:
    """L2-normalize rows; zero rows become the first basis vector (counted)."""
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    dead = norms[:, 0] < _ZERO_NORM_EPS
    n_dead = int(dead.sum())
    safe = np.where(norms < _ZERO_NORM_EPS, 1.0, norms)
    out = rows / safe
    if n_dead:
        out[dead] = 0.0
        out[dead, 0] = 1.0
    return out, n_dead


def extract_cluster_features(
    backbone: Backbone,
    images: torch.Tensor,
    stage: str,
) -> tuple[np.ndarray, int]:
    """Flattened, row-normalized stage features.

    Returns ((B*H_F*W_F) x D_F matrix, dead-row count); row order is
    (image, row, col) lexicographic.
    """
    with torch.no_grad():
        taps = forward_stages(backbone, images)
    if stage not in taps:
        raise ContractError(f"unknown stage {stage!r}; have {sorted(taps)}")
    fmap = taps[stage]  # B x D x H x W
    b, d, h, w = fmap.shape
    rows = fmap.permute(0, 2, 3, 1).reshape(b * h * w, d).cpu().numpy().astype(np.float64)
    return normalize_rows(rows)


def _plus_plus_init(features: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding on cosine distance (d = 1 - similarity)."""
    n = features.shape[0]
    chosen = [int(rng.integers(n))]
    dist = 1.0 - features @ features[chosen[0]]
    np.maximum(dist, 0.0, out=dist)
    for _ in range(1, k):
        weights = dist**2
        total = weights.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=weights / total))
        chosen.append(idx)
        dist = np.minimum(dist, np.maximum(1.0 - features @ features[idx], 0.0))
    return features[chosen].copy()


def spherical_kmeans(
    features: np.ndarray,
    k: int,
    rng: np.random.Generator,
    max_iter: int = 50,
    minibatch: bool = False,
    minibatch_size: int = 1024,
) -> KMeansResult:
    """Lloyd iterations with cosine assignment and mean-then-normalize updates.

    Full-batch mode iterates to an assignment fixed point (or max_iter) and
    its recorded objective (mean cosine to assigned prototype) is monotone
    non-decreasing. Empty clusters reseed to the currently worst-fit row.
    Minibatch mode trades the monotonicity guarantee for speed.
    """
    n, _ = features.shape
    if k > n:
        raise InfeasibleClusteringError(f"k={k} exceeds {n} rows")
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    protos = _plus_plus_init(features, k, rng)
    if minibatch:
        return _minibatch_lloyd(features, protos, rng, max_iter, minibatch_size)

    sims = features @ protos.T
    assign = np.argmax(sims, axis=1)
    best = sims[np.arange(n), assign]
    result = KMeansResult(prototypes=protos, assignments=assign, objective=[float(best.mean())])
    for _ in range(max_iter):
        protos, n_reseeds = _update_prototypes(features, assign, protos, best)
        result.reseeds += n_reseeds
        sims = features @ protos.T
        new_assign = np.argmax(sims, axis=1)
        best = sims[np.arange(n), new_assign]
        result.objective.append(float(best.mean()))
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
    result.prototypes = protos
    result.assignments = assign
    return result


def _update_prototypes(
    features: np.ndarray,
    assign: np.ndarray,
    protos: np.ndarray,
    best_sim: np.ndarray,
) -> tuple[np.ndarray, int]:
    k = protos.shape[0]
    out = protos.copy()
    empty = []
    for c in range(k):
        members = assign == c
        if not members.any():
            empty.append(c)
            continue
        mean = features[members].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < _ZERO_NORM_EPS:
            empty.append(c)
            continue
        out[c] = mean / norm
    n_reseeds = 0
    if empty:
        # worst-fit rows (lowest similarity to their assigned prototype)
        order = np.argsort(best_sim, kind="stable")
        for c, row in zip(empty, order):
            out[c] = features[row]
            n_reseeds += 1
    return out, n_reseeds


def _minibatch_lloyd(
    features: np.ndarray,
    protos: np.ndarray,
    rng: np.random.Generator,
    max_iter: int,
    batch_size: int,
) -> KMeansResult:
    n = features.shape[0]
    counts = np.zeros(protos.shape[0], dtype=np.int64)
    sums = protos.copy()
    for _ in range(max_iter):
        take = min(batch_size, n)
        idx = rng.choice(n, size=take, replace=False)
        batch = features[idx]
        assign = np.argmax(batch @ protos.T, axis=1)
        for c in np.unique(assign):
            members = batch[assign == c]
            counts[c] += members.shape[0]
            sums[c] = sums[c] + members.sum(axis=0)
            norm = np.linalg.norm(sums[c])
            if norm >= _ZERO_NORM_EPS:
                protos[c] = sums[c] / norm
    sims = features @ protos.T
    assign = np.argmax(sims, axis=1)
    obj = float(sims[np.arange(n), assign].mean())
    return KMeansResult(prototypes=protos, assignments=assign, objective=[obj])


def assign_labels(feature_map: np.ndarray, bank: PrototypeBank) -> np.ndarray:
    """Per-cell label by Euclidean-closest prototype on normalized cells.

    For unit vectors argmin ||y - mu|| equals argmax mu.y, which is what is
    computed; ties break to the lowest prototype index either way.
    """
    if feature_map.ndim != 3:
        raise ContractError(f"feature map must be D x H x W, got {feature_map.shape}")
    d, h, w = feature_map.shape
    if d != bank.prototypes.shape[1]:
        raise ContractError(
            f"feature dim {d} does not match prototype dim {bank.prototypes.shape[1]}"
        )
    cells = feature_map.reshape(d, h * w).T.astype(np.float64)
    cells, _ = normalize_rows(cells)
    labels = np.argmax(cells @ bank.prototypes.T, axis=1)
    return labels.reshape(h, w).astype(np.int32)


def upsample_labels(label_grid: np.ndarray, target_hw: tuple[int, int]) -> MaskSet:
    """Nearest-neighbor upsampling of a label grid into a MaskSet."""
    h, w = label_grid.shape
    th, tw = target_hw
    if th < h or tw < w:
        raise ContractError(f"target {target_hw} smaller than source {label_grid.shape}")
    iy = nn_source_index(th, h)
    ix = nn_source_index(tw, w)
    return MaskSet(np.ascontiguousarray(label_grid[np.ix_(iy, ix)]))


@dataclass
class BootstrapProvenance:
    epoch: int
    k_values: list[int]
    objectives: list[float]
    reseeds: list[int]
    dead_rows: list[int]


def bootstrap_masks(
    backbone: Backbone,
    images: list[np.ndarray],
    cfg: BootstrapConfig,
    rng: np.random.Generator,
    epoch: int = 0,
) -> tuple[list[MaskSet], BootstrapProvenance]:
    """Regenerate one MaskSet per scene (Lloyd clustering per scene batch).

    Images are consumed in list order in batches of cfg.cluster_batch; the
    online backbone provides features. If a sampled K exceeds the row
    count, K is re-sampled from [k_min, min(k_max, rows)].
    """
    dtype = next(backbone.parameters()).dtype
    prov = BootstrapProvenance(epoch=epoch, k_values=[], objectives=[], reseeds=[], dead_rows=[])
    mask_sets: list[MaskSet] = []
    for lo in range(0, len(images), cfg.cluster_batch):
        chunk = images[lo : lo + cfg.cluster_batch]
        batch = torch.from_numpy(
            np.stack([img.transpose(2, 0, 1) for img in chunk])
        ).to(dtype)
        with torch.no_grad():
            taps = forward_stages(backbone, batch)
        fmap = taps[cfg.stage]
        b, d, fh, fw = fmap.shape
        rows, dead = normalize_rows(
            fmap.permute(0, 2, 3, 1).reshape(b * fh * fw, d).cpu().numpy().astype(np.float64)
        )
        k = sample_cluster_count(rng, cfg.k_min, cfg.k_max)
        if k > rows.shape[0]:
            k = sample_cluster_count(rng, cfg.k_min, min(cfg.k_max, rows.shape[0]))
        result = spherical_kmeans(
            rows, k, rng, max_iter=cfg.kmeans_iters,
            minibatch=cfg.minibatch, minibatch_size=cfg.minibatch_size,
        )
        prov.k_values.append(k)
        prov.objectives.append(result.objective[-1])
        prov.reseeds.append(result.reseeds)
        prov.dead_rows.append(dead)
        # final Lloyd assignments are exactly the nearest-prototype labels
        grids = result.assignments.reshape(b, fh, fw).astype(np.int32)
        target_hw = chunk[0].shape[:2]
        for i in range(b):
            mask_sets.append(upsample_labels(grids[i], target_hw))
    return mask_sets, prov
