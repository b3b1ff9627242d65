"""Mask quality and representation quality measurement.

Mask quality is Hungarian-matched mIoU: predicted labels are matched
one-to-one to ground-truth classes by maximum total intersection, then
mIoU averages the matched IoUs over all ground-truth classes (unmatched
classes score 0). Representation quality uses a frozen-feature linear
probe: stage features are bilinearly upsampled to image size and a single
1x1 convolution is trained to predict the ground-truth pixel labels.
"""

from __future__ import annotations

import csv
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .config import ProbeConfig
from .encoder import Backbone, forward_stages
from .errors import ConfigError, ContractError, DataFormatError
from .masks import MaskSet
from .scenegen import Scene, read_mask_png


@dataclass
class MaskQualityReport:
    epoch: int
    per_scene_miou: list[float]
    mean_miou: float
    cluster_counts: list[int] = field(default_factory=list)


@dataclass
class ProbeReport:
    epoch: int
    pixel_accuracy: float
    miou: float
    per_class_iou: dict[int, float] = field(default_factory=dict)


def confusion_counts(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Intersection-count matrix between predicted and ground-truth labels."""
    pred_labels = np.unique(pred)
    gt_labels = np.unique(gt)
    counts = np.zeros((pred_labels.size, gt_labels.size), dtype=np.int64)
    p_idx = np.searchsorted(pred_labels, pred.ravel())
    g_idx = np.searchsorted(gt_labels, gt.ravel())
    np.add.at(counts, (p_idx, g_idx), 1)
    return counts, pred_labels, gt_labels


def hungarian_miou(pred: MaskSet, gt: MaskSet) -> float:
    """Max-intersection one-to-one matching, then mean IoU over gt classes."""
    if pred.shape != gt.shape:
        raise ContractError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    counts, pred_labels, gt_labels = confusion_counts(pred.grid, gt.grid)
    rows, cols = linear_sum_assignment(counts, maximize=True)
    pred_area = counts.sum(axis=1)
    gt_area = counts.sum(axis=0)
    total = 0.0
    for r, c in zip(rows, cols):
        inter = counts[r, c]
        union = pred_area[r] + gt_area[c] - inter
        if union > 0:
            total += inter / union
    return float(total / gt_labels.size)


def baseline_masks(kind: str, scene: Scene, rng: np.random.Generator) -> MaskSet:
    """Fixed mask baselines: whole-view, 5x5 grid, or ground truth."""
    h, w = scene.gt_mask.shape
    if kind == "random_crop":
        return MaskSet(np.zeros((h, w), dtype=np.int32))
    if kind == "grid":
        rows = np.minimum((np.arange(h) * 5) // h, 4)
        cols = np.minimum((np.arange(w) * 5) // w, 4)
        return MaskSet((rows[:, None] * 5 + cols[None, :]).astype(np.int32))
    if kind == "ground_truth":
        return MaskSet(scene.gt_mask.copy())
    raise ConfigError(f"unknown baseline mask kind {kind!r}")


def dataset_mask_quality(
    mask_sets: list[MaskSet], scenes: list[Scene], epoch: int, cluster_counts: list[int] | None = None
) -> MaskQualityReport:
    if len(mask_sets) != len(scenes):
        raise ContractError(f"{len(mask_sets)} mask sets for {len(scenes)} scenes")
    per_scene = [hungarian_miou(m, s.mask_set()) for m, s in zip(mask_sets, scenes)]
    return MaskQualityReport(
        epoch=epoch,
        per_scene_miou=per_scene,
        mean_miou=float(np.mean(per_scene)),
        cluster_counts=list(cluster_counts or []),
    )


def load_mask_snapshot(snap_dir: str | Path, n_scenes: int) -> tuple[list[MaskSet], dict]:
    """Read one masks/epoch_XXXX snapshot directory."""
    snap = Path(snap_dir)
    prov_path = snap / "provenance.json"
    prov = json.loads(prov_path.read_text()) if prov_path.exists() else {}
    sets = []
    for i in range(n_scenes):
        p = snap / f"{i:05d}.png"
        if not p.exists():
            raise DataFormatError(f"mask snapshot missing {p.name} in {snap}")
        sets.append(MaskSet(read_mask_png(p)))
    return sets, prov


def probe_features(backbone: Backbone, scenes: list[Scene], stage: str, batch: int = 32) -> torch.Tensor:
    """Frozen stage features for every scene (N x D x h x w, float32)."""
    dtype = next(backbone.parameters()).dtype
    chunks = []
    with torch.no_grad():
        for lo in range(0, len(scenes), batch):
            imgs = np.stack([s.image.transpose(2, 0, 1) for s in scenes[lo : lo + batch]])
            taps = forward_stages(backbone, torch.from_numpy(imgs).to(dtype))
            chunks.append(taps[stage].float())
    return torch.cat(chunks)


def _probe_eval(
    head: torch.nn.Conv2d, feats: torch.Tensor, scenes: list[Scene], num_classes: int
) -> tuple[float, float, dict[int, float]]:
    size = scenes[0].gt_mask.shape
    inter = np.zeros(num_classes, dtype=np.int64)
    union = np.zeros(num_classes, dtype=np.int64)
    gt_count = np.zeros(num_classes, dtype=np.int64)
    correct = 0
    total = 0
    with torch.no_grad():
        for lo in range(0, len(scenes), 16):
            hi = min(lo + 16, len(scenes))
            up = F.interpolate(feats[lo:hi], size=size, mode="bilinear", align_corners=False)
            pred = head(up).argmax(dim=1).numpy()
            gt = np.stack([s.gt_mask for s in scenes[lo:hi]])
            correct += int((pred == gt).sum())
            total += gt.size
            for c in range(num_classes):
                p = pred == c
                g = gt == c
                inter[c] += int((p & g).sum())
                union[c] += int((p | g).sum())
                gt_count[c] += int(g.sum())
    per_class = {c: float(inter[c] / union[c]) for c in range(num_classes) if union[c] > 0}
    # mIoU averages over classes that actually occur in the evaluation set
    gt_present = [c for c in range(num_classes) if gt_count[c] > 0]
    miou = float(np.mean([per_class[c] for c in gt_present])) if gt_present else 0.0
    return correct / total, miou, per_class


def linear_probe(
    backbone: Backbone,
    scenes: list[Scene],
    cfg: ProbeConfig,
    num_classes: int,
    rng: np.random.Generator,
    epoch: int = 0,
) -> ProbeReport:
    """Train a per-pixel linear classifier on frozen, upsampled features.

    Scenes split by index: the trailing holdout_fraction is the evaluation
    set. The encoder is never touched; only the 1x1 head trains.
    """
    n_hold = max(1, int(round(cfg.holdout_fraction * len(scenes))))
    if n_hold >= len(scenes):
        raise ContractError(f"holdout of {n_hold} leaves no training scenes")
    train_scenes = scenes[: len(scenes) - n_hold]
    hold_scenes = scenes[len(scenes) - n_hold :]
    feats_train = probe_features(backbone, train_scenes, cfg.stage)
    feats_hold = probe_features(backbone, hold_scenes, cfg.stage)

    d = feats_train.shape[1]
    head = torch.nn.Conv2d(d, num_classes, kernel_size=1)
    bound = 1.0 / np.sqrt(d)
    with torch.no_grad():
        head.weight.copy_(
            torch.from_numpy(rng.uniform(-bound, bound, size=(num_classes, d, 1, 1))).float()
        )
        head.bias.zero_()
    opt = torch.optim.Adam(head.parameters(), lr=cfg.lr)
    size = train_scenes[0].gt_mask.shape
    labels = torch.from_numpy(np.stack([s.gt_mask for s in train_scenes])).long()
    for _ in range(cfg.steps):
        idx = rng.choice(len(train_scenes), size=min(cfg.batch_size, len(train_scenes)), replace=False)
        tidx = torch.from_numpy(idx)
        up = F.interpolate(feats_train[tidx], size=size, mode="bilinear", align_corners=False)
        loss = F.cross_entropy(head(up), labels[tidx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    acc, miou, per_class = _probe_eval(head, feats_hold, hold_scenes, num_classes)
    return ProbeReport(epoch=epoch, pixel_accuracy=acc, miou=miou, per_class_iou=per_class)


def parse_metrics(path: str | Path) -> list[dict]:
    """Read a JSON-lines metrics file; malformed lines name their number."""
    rows = []
    text = Path(path).read_text() if Path(path).exists() else ""
    for i, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: line {i} is not valid JSON: {exc}") from exc
    return rows


def emit_report(
    metrics_path: str | Path,
    mask_reports: list[MaskQualityReport],
    probe_reports: list[ProbeReport],
    out_dir: str | Path,
) -> dict[str, Path]:
    """CSV tables plus static plots of mask/probe quality over epochs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = parse_metrics(metrics_path)
    written: dict[str, Path] = {}

    mask_csv = out / "mask_quality.csv"
    with open(mask_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_miou", "n_scenes", "k_mean"])
        for r in sorted(mask_reports, key=lambda r: r.epoch):
            k_mean = float(np.mean(r.cluster_counts)) if r.cluster_counts else ""
            w.writerow([r.epoch, f"{r.mean_miou:.6f}", len(r.per_scene_miou), k_mean])
    written["mask_quality"] = mask_csv

    probe_csv = out / "probe_quality.csv"
    with open(probe_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "pixel_accuracy", "miou"])
        for r in sorted(probe_reports, key=lambda r: r.epoch):
            w.writerow([r.epoch, f"{r.pixel_accuracy:.6f}", f"{r.miou:.6f}"])
    written["probe_quality"] = probe_csv

    loss_rows = [
        r for r in rows if r.get("type") == "epoch_summary" and r.get("mean_contrastive_loss") is not None
    ]
    loss_csv = out / "contrastive_loss.csv"
    with open(loss_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_contrastive_loss"])
        for r in loss_rows:
            w.writerow([r["epoch"], r["mean_contrastive_loss"]])
    written["contrastive_loss"] = loss_csv

    if not rows and not mask_reports and not probe_reports:
        print("warning: nothing to report (empty metrics log)", file=sys.stderr)
        return written

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if mask_reports or probe_reports:
        fig, ax = plt.subplots(figsize=(6, 4))
        if mask_reports:
            ms = sorted(mask_reports, key=lambda r: r.epoch)
            ax.plot([r.epoch for r in ms], [r.mean_miou for r in ms], "o-", color="tab:blue", label="mask mIoU")
        if probe_reports:
            ps = sorted(probe_reports, key=lambda r: r.epoch)
            ax.plot([r.epoch for r in ps], [r.miou for r in ps], "s-", color="tab:red", label="probe mIoU")
        epochs = sorted({r.epoch for r in mask_reports} | {r.epoch for r in probe_reports})
        ax.set_xticks(epochs)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mIoU")
        ax.legend()
        fig.tight_layout()
        path = out / "quality_vs_epoch.png"
        fig.savefig(path)
        plt.close(fig)
        written["quality_plot"] = path

    if loss_rows:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot([r["epoch"] for r in loss_rows], [r["mean_contrastive_loss"] for r in loss_rows], "-")
        ax.set_xlabel("epoch")
        ax.set_ylabel("contrastive loss")
        fig.tight_layout()
        path = out / "loss_vs_epoch.png"
        fig.savefig(path)
        plt.close(fig)
        written["loss_plot"] = path
    return written
