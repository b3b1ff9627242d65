"""Clustering consistency loss under a von Mises-Fisher mixture.

The per-cell distance is the negative log posterior of the cell's assigned
prototype under a vMF mixture with shared concentration kappa. The full
loss averages four terms over the feature grid: each view against its own
assignment (intra) and each view against the other view's assignment at
the same grid index (inter). Assignments are hard and treated as constants
within a step; gradients reach the feature maps and the prototype tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .bootstrap import spherical_kmeans
from .errors import ContractError


def vmf_nll(y_cell: torch.Tensor, bank: torch.Tensor, assigned: int, kappa: float) -> torch.Tensor:
    """-log softmax_c(kappa * mu_c . y) at the assigned component."""
    if y_cell.ndim != 1 or bank.ndim != 2 or bank.shape[1] != y_cell.shape[0]:
        raise ContractError(
            f"shape mismatch: cell {tuple(y_cell.shape)} vs bank {tuple(bank.shape)}"
        )
    if not (0 <= assigned < bank.shape[0]):
        raise ContractError(f"assigned index {assigned} outside [0, {bank.shape[0]})")
    logits = kappa * (bank @ y_cell)
    return torch.logsumexp(logits, dim=0) - logits[assigned]


@dataclass
class ConsistencyContext:
    """Everything one evaluation of the consistency loss needs.

    Feature maps are B x D x H x W and unit-norm per cell; banks are K x D
    unit-norm; assignment grids are B x H x W integer indices into the
    matching bank.
    """

    y: torch.Tensor
    y_prime: torch.Tensor
    bank: torch.Tensor
    bank_prime: torch.Tensor
    assign: torch.Tensor
    assign_prime: torch.Tensor
    kappa: float

    def validate(self) -> None:
        if self.y.shape != self.y_prime.shape:
            raise ContractError(
                f"views disagree: {tuple(self.y.shape)} vs {tuple(self.y_prime.shape)}"
            )
        if self.bank.shape != self.bank_prime.shape:
            raise ContractError(
                f"prototype banks disagree: {tuple(self.bank.shape)} vs {tuple(self.bank_prime.shape)}"
            )
        if self.assign.shape != self.assign_prime.shape or self.assign.shape != (
            self.y.shape[0],
            self.y.shape[2],
            self.y.shape[3],
        ):
            raise ContractError("assignment grids do not match the feature maps")
        if self.kappa < 0:
            raise ContractError(f"kappa must be >= 0, got {self.kappa}")


def _grid_nll(y: torch.Tensor, bank: torch.Tensor, assign: torch.Tensor, kappa: float) -> torch.Tensor:
    """Mean over cells of the vMF NLL for one (map, bank, assignment) triple."""
    logits = kappa * torch.einsum("bdhw,kd->bkhw", y, bank)
    return F.cross_entropy(logits, assign.long())


def cluster_consistency_loss(ctx: ConsistencyContext) -> torch.Tensor:
    """Mean over the grid of the two intra terms plus the two inter terms."""
    ctx.validate()
    intra = _grid_nll(ctx.y, ctx.bank, ctx.assign, ctx.kappa) + _grid_nll(
        ctx.y_prime, ctx.bank_prime, ctx.assign_prime, ctx.kappa
    )
    inter = _grid_nll(ctx.y, ctx.bank_prime, ctx.assign_prime, ctx.kappa) + _grid_nll(
        ctx.y_prime, ctx.bank, ctx.assign, ctx.kappa
    )
    return intra + inter


def normalize_cells(fmap: torch.Tensor) -> torch.Tensor:
    """Unit-normalize each spatial cell's feature vector."""
    return F.normalize(fmap, dim=1, eps=1e-12)


def cluster_feature_map(
    fmap: torch.Tensor, k: int, rng: np.random.Generator, max_iter: int = 50
) -> tuple[torch.Tensor, torch.Tensor]:
    """Cluster a normalized map's cells; returns (bank, assignment grid).

    Both outputs are detached constants for the current step.
    """
    b, d, h, w = fmap.shape
    rows = fmap.detach().permute(0, 2, 3, 1).reshape(b * h * w, d).cpu().numpy().astype(np.float64)
    result = spherical_kmeans(rows, k, rng, max_iter=max_iter)
    bank = torch.from_numpy(result.prototypes).to(fmap.dtype)
    assign = torch.from_numpy(result.assignments.reshape(b, h, w).astype(np.int64))
    return bank, assign


def run_consistency_step(
    online,
    target,
    optimizer: torch.optim.Optimizer,
    images: list[np.ndarray],
    k: int,
    lambda_loss: float,
    kappa: float,
    stage: str,
    rng_augment: np.random.Generator,
    rng_kmeans: np.random.Generator,
    augment_cfg,
    ema_momentum: float,
    share_geometry: bool = True,
    kmeans_iters: int = 50,
) -> dict:
    """One consistency update: augment, featurize, cluster, descend, EMA.

    The target map carries no gradient, and with lambda_loss == 0 the
    gradient step is skipped entirely (the loss is identically scaled to
    zero) while the target EMA update still runs, preserving the update
    order of the training flow.
    """
    from . import augment as aug
    from .encoder import ema_update, forward_stages
    from .masks import MaskSet

    if k < 1:
        raise ContractError(f"cluster count must be >= 1, got {k}")
    if lambda_loss < 0:
        raise ContractError(f"lambda must be >= 0, got {lambda_loss}")
    size = images[0].shape[0]
    dummy = MaskSet(np.zeros(images[0].shape[:2], dtype=np.int32))
    views, views_prime = [], []
    for img in images:
        t, t_prime = aug.sample_transform_pair(rng_augment, augment_cfg, size, share_geometry)
        v, _ = aug.apply(t, img, dummy)
        v_p, _ = aug.apply(t_prime, img, dummy)
        views.append(v.transpose(2, 0, 1))
        views_prime.append(v_p.transpose(2, 0, 1))
    dtype = next(online.parameters()).dtype
    v_batch = torch.from_numpy(np.stack(views)).to(dtype)
    vp_batch = torch.from_numpy(np.stack(views_prime)).to(dtype)

    y = normalize_cells(forward_stages(online.backbone, v_batch)[stage])
    with torch.no_grad():
        y_prime = normalize_cells(forward_stages(target.backbone, vp_batch)[stage])

    bank, assign = cluster_feature_map(y, k, rng_kmeans, max_iter=kmeans_iters)
    bank_p, assign_p = cluster_feature_map(y_prime, k, rng_kmeans, max_iter=kmeans_iters)
    ctx = ConsistencyContext(
        y=y, y_prime=y_prime, bank=bank, bank_prime=bank_p,
        assign=assign, assign_prime=assign_p, kappa=kappa,
    )
    loss = cluster_consistency_loss(ctx)
    if lambda_loss > 0:
        optimizer.zero_grad(set_to_none=True)
        (lambda_loss * loss).backward()
        optimizer.step()
    ema_update(online, target, ema_momentum)
    with torch.no_grad():
        breakdown = {
            "intra_online": float(_grid_nll(y, bank, assign, kappa)),
            "intra_target": float(_grid_nll(y_prime, bank_p, assign_p, kappa)),
            "inter_online": float(_grid_nll(y, bank_p, assign_p, kappa)),
            "inter_target": float(_grid_nll(y_prime, bank, assign, kappa)),
        }
    return {"loss": float(loss.detach()), "k": k, "lambda": lambda_loss, **breakdown}
