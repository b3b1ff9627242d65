"""The full training schedule: warmup, bootstrapping, contrastive epochs.

Epochs are 1-based. Epochs 1..W run only consistency passes (lambda = 1,
K = warmup cluster count). Masks are first generated at the start of epoch
W+1, and again at the start of any epoch e with (e - W) % N == 0; every
non-warmup epoch runs contrastive steps, and epochs divisible by M append
a consistency pass at lambda_vmf. The event sequence this loop emits is
the schedule contract and is checked against an independent simulator in
tests.

All randomness flows through named numpy streams captured in checkpoints,
so a resumed run replays exactly the steps an uninterrupted run would
have taken. Wall-clock timings go to a separate file (timings.jsonl) so
metrics.jsonl stays byte-reproducible.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import pickle
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import augment as aug
from .bootstrap import bootstrap_masks
from .config import FORMAT_VERSION, RunConfig, config_from_dict, config_to_dict
from .encoder import (
    OnlineModel,
    TargetModel,
    build_models,
    ema_update,
    forward_stages,
    fuse_layers,
    load_numpy_state,
    project_predict,
    state_to_numpy,
    torch_dtype,
)
from .errors import CheckpointError, ConfigError, ContractError, DegenerateBatchError
from .masks import MaskSet
from .maskcontrast import (
    PooledFeature,
    build_contrast_batch,
    contrastive_loss,
    downsample_label_grid,
    pool_masked_features,
)
from .rng import capture_state, restore_state, stream
from .scenegen import Scene, load_dataset, median_object_count, write_mask_png
from .vmf import run_consistency_step

_CKPT_MAGIC = b"MBCKPT01"


@dataclass(frozen=True)
class Schedule:
    """The event-timing constants of one training run."""

    epochs: int
    warmup_epochs: int
    bootstrap_period: int | None
    consistency_period: int

    def __post_init__(self):
        if self.warmup_epochs < 1:
            raise ConfigError(f"trainer.warmup_epochs must be >= 1, got {self.warmup_epochs}")
        if self.epochs < 1:
            raise ConfigError(f"trainer.epochs must be >= 1, got {self.epochs}")
        if self.bootstrap_period is not None and self.bootstrap_period < 1:
            raise ConfigError(f"trainer.bootstrap_period must be >= 1 or null, got {self.bootstrap_period}")
        if self.consistency_period < 1:
            raise ConfigError(f"trainer.consistency_period must be >= 1, got {self.consistency_period}")


def epoch_events(sched: Schedule, epoch: int) -> list[str]:
    """Ordered event kinds for one epoch; the schedule's single source of truth."""
    if epoch <= sched.warmup_epochs:
        return ["warmup"]
    events = []
    w, n = sched.warmup_epochs, sched.bootstrap_period
    if epoch == w + 1 or (n is not None and (epoch - w) % n == 0):
        events.append("bootstrap")
    events.append("contrastive")
    if epoch % sched.consistency_period == 0:
        events.append("consistency")
    return events


class MetricsWriter:
    """Append-only JSON-lines sink; one file for metrics, one for timings."""

    def __init__(self, out_dir: Path, append: bool):
        mode = "a" if append else "w"
        self._metrics = open(out_dir / "metrics.jsonl", mode)
        self._timings = open(out_dir / "timings.jsonl", mode)

    def metric(self, row: dict) -> None:
        self._metrics.write(json.dumps(row) + "\n")
        self._metrics.flush()

    def timing(self, row: dict) -> None:
        self._timings.write(json.dumps(row) + "\n")
        self._timings.flush()

    def close(self) -> None:
        self._metrics.close()
        self._timings.close()


@dataclass
class TrainState:
    """Everything the loop mutates; checkpoints capture it bit-exact."""

    config: RunConfig
    online: OnlineModel
    target: TargetModel
    optimizer: torch.optim.Optimizer
    rngs: dict[str, np.random.Generator]
    mask_sets: list[MaskSet] | None
    epoch: int  # last completed epoch
    step: int
    warmup_k: int


def _cosine_lr(base: float, epoch: int, total: int) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / total))


def _ema_momentum(cfg: RunConfig, epoch: int) -> float:
    m0 = cfg.encoder.ema_momentum
    if cfg.encoder.ema_schedule == "constant":
        return m0
    frac = (epoch - 1) / max(1, cfg.trainer.epochs)
    return 1.0 - (1.0 - m0) * 0.5 * (math.cos(math.pi * frac) + 1.0)


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def _tensor_to_numpy(obj):
    if isinstance(obj, torch.Tensor):
        return ("__tensor__", obj.detach().cpu().numpy())
    if isinstance(obj, dict):
        return {k: _tensor_to_numpy(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_tensor_to_numpy(v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(_tensor_to_numpy(v) for v in obj)
    return obj


def _numpy_to_tensor(obj, dtype: torch.dtype):
    if isinstance(obj, tuple) and len(obj) == 2 and obj[0] == "__tensor__":
        t = torch.from_numpy(np.asarray(obj[1]).copy())
        return t.to(dtype) if t.is_floating_point() else t
    if isinstance(obj, dict):
        return {k: _numpy_to_tensor(v, dtype) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_numpy_to_tensor(v, dtype) for v in obj]
    if isinstance(obj, tuple):
        return tuple(_numpy_to_tensor(v, dtype) for v in obj)
    return obj


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Checksummed, versioned, byte-stable serialization of TrainState."""
    payload = {
        "format_version": FORMAT_VERSION,
        "config": config_to_dict(state.config),
        "epoch": int(state.epoch),
        "step": int(state.step),
        "theta": state_to_numpy(state.online),
        "xi": state_to_numpy(state.target),
        "optimizer": _tensor_to_numpy(state.optimizer.state_dict()),
        "rng": {name: capture_state(gen) for name, gen in sorted(state.rngs.items())},
        "mask_sets": (
            None
            if state.mask_sets is None
            else np.stack([m.grid.astype(np.int16) for m in state.mask_sets])
        ),
        "warmup_k": int(state.warmup_k),
    }
    blob = pickle.dumps(payload, protocol=4)
    digest = hashlib.sha256(blob).digest()
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(digest)
        fh.write(blob)


def read_checkpoint(path: str | Path) -> dict:
    """Validate magic, checksum and version; return the raw payload."""
    raw = Path(path).read_bytes()
    if len(raw) < len(_CKPT_MAGIC) + 32 or raw[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    digest = raw[len(_CKPT_MAGIC) : len(_CKPT_MAGIC) + 32]
    blob = raw[len(_CKPT_MAGIC) + 32 :]
    if hashlib.sha256(blob).digest() != digest:
        raise CheckpointError(f"{path} is corrupt (checksum mismatch)")
    payload = pickle.loads(blob)
    if payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path} has format_version {payload.get('format_version')}, "
            f"this build reads {FORMAT_VERSION}"
        )
    return payload


def load_checkpoint(path: str | Path) -> TrainState:
    """Rebuild a TrainState (models, optimizer, rng streams, masks)."""
    payload = read_checkpoint(path)
    cfg = config_from_dict(payload["config"])
    dtype = torch_dtype(cfg.encoder.dtype)
    online = OnlineModel(cfg.encoder).to(dtype)
    target = TargetModel(cfg.encoder).to(dtype)
    load_numpy_state(online, payload["theta"])
    load_numpy_state(target, payload["xi"])
    for p in target.parameters():
        p.requires_grad_(False)
    optimizer = _make_optimizer(online, cfg)
    optimizer.load_state_dict(_numpy_to_tensor(payload["optimizer"], dtype))
    rngs = {name: restore_state(st) for name, st in payload["rng"].items()}
    masks = payload["mask_sets"]
    mask_sets = None
    if masks is not None:
        mask_sets = [MaskSet(masks[i].astype(np.int32)) for i in range(masks.shape[0])]
    return TrainState(
        config=cfg,
        online=online,
        target=target,
        optimizer=optimizer,
        rngs=rngs,
        mask_sets=mask_sets,
        epoch=int(payload["epoch"]),
        step=int(payload["step"]),
        warmup_k=int(payload["warmup_k"]),
    )


def load_model_from_checkpoint(path: str | Path) -> tuple[OnlineModel, TargetModel, RunConfig]:
    """Models only (for bootstrap/eval/probe CLIs)."""
    payload = read_checkpoint(path)
    cfg = config_from_dict(payload["config"])
    dtype = torch_dtype(cfg.encoder.dtype)
    online = OnlineModel(cfg.encoder).to(dtype)
    target = TargetModel(cfg.encoder).to(dtype)
    load_numpy_state(online, payload["theta"])
    load_numpy_state(target, payload["xi"])
    return online, target, cfg


def _make_optimizer(online: OnlineModel, cfg: RunConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(
        online.parameters(),
        lr=cfg.trainer.lr,
        momentum=cfg.trainer.momentum,
        weight_decay=cfg.trainer.weight_decay,
    )


def _fusion_hw(cfg: RunConfig) -> tuple[int, int]:
    return (cfg.encoder.fusion_hw, cfg.encoder.fusion_hw)


def _refresh_masks(
    state: TrainState, scenes: list[Scene], epoch: int
) -> tuple[list[MaskSet], dict]:
    mode = state.config.trainer.mask_mode
    if mode == "bootstrap":
        images = [s.image for s in scenes]
        sets, prov = bootstrap_masks(
            state.online.backbone, images, state.config.bootstrap, state.rngs["kmeans"], epoch
        )
        info = {
            "k_values": prov.k_values,
            "objectives": [round(o, 10) for o in prov.objectives],
            "reseeds": prov.reseeds,
            "dead_rows": prov.dead_rows,
        }
        return sets, info
    from .eval import baseline_masks

    sets = [baseline_masks(mode, s, state.rngs["kmeans"]) for s in scenes]
    return sets, {"kind": mode}


def _snapshot_masks(mask_sets: list[MaskSet], info: dict, epoch: int, out_dir: Path) -> None:
    snap = out_dir / "masks" / f"epoch_{epoch:04d}"
    snap.mkdir(parents=True, exist_ok=True)
    for i, mset in enumerate(mask_sets):
        write_mask_png(mset.grid, snap / f"{i:05d}.png")
    (snap / "provenance.json").write_text(json.dumps({"epoch": epoch, **info}, indent=2) + "\n")


def _contrastive_step(
    state: TrainState,
    scenes: list[Scene],
    batch_idx: np.ndarray,
    lr: float,
    dump_dir: Path | None = None,
) -> dict:
    """One optimizer step of the mask-dependent contrastive objective."""
    cfg = state.config
    dtype = torch_dtype(cfg.encoder.dtype)
    fusion_hw = _fusion_hw(cfg)
    size = cfg.scenegen.image_size

    views, views_p, grids, grids_p = [], [], [], []
    for b in batch_idx:
        scene = scenes[b]
        mset = state.mask_sets[b]
        t, t_p = aug.sample_transform_pair(state.rngs["augment"], cfg.augment, size, False)
        v, m = aug.apply(t, scene.image, mset)
        v_p, m_p = aug.apply(t_p, scene.image, mset)
        views.append(v.transpose(2, 0, 1))
        views_p.append(v_p.transpose(2, 0, 1))
        grids.append(downsample_label_grid(m.grid, fusion_hw))
        grids_p.append(downsample_label_grid(m_p.grid, fusion_hw))
        if dump_dir is not None:
            _dump_pair(dump_dir, int(b), v, m, v_p, m_p)

    n = len(batch_idx)
    both = torch.from_numpy(np.stack(views + views_p)).to(dtype)
    on_taps = forward_stages(state.online.backbone, both)
    on_fused = fuse_layers(on_taps, cfg.encoder.fusion_layers, fusion_hw)
    with torch.no_grad():
        tg_taps = forward_stages(state.target.backbone, both)
        tg_fused = fuse_layers(tg_taps, cfg.encoder.fusion_layers, fusion_hw)

    def pooled_rows(fused: torch.Tensor, grid_list: list[np.ndarray], offset: int, view: str):
        metas, masks, bidx = [], [], []
        for i, grid in enumerate(grid_list):
            for lbl in np.unique(grid):
                masks.append(grid == lbl)
                bidx.append(offset + i)
                metas.append(PooledFeature(vector=None, label=int(lbl), image_id=int(batch_idx[i]), view=view))
        mat = pool_masked_features(
            fused, torch.from_numpy(np.stack(masks)), torch.tensor(bidx, dtype=torch.long)
        )
        return metas, mat

    on_v_meta, on_v_pool = pooled_rows(on_fused, grids, 0, "online")
    on_p_meta, on_p_pool = pooled_rows(on_fused, grids_p, n, "online")
    tg_v_meta, tg_v_pool = pooled_rows(tg_fused, grids, 0, "target")
    tg_p_meta, tg_p_pool = pooled_rows(tg_fused, grids_p, n, "target")

    emb_on_v = project_predict(state.online, on_v_pool, "online")
    emb_on_p = project_predict(state.online, on_p_pool, "online")
    with torch.no_grad():
        emb_tg_v = project_predict(state.target, tg_v_pool, "target")
        emb_tg_p = project_predict(state.target, tg_p_pool, "target")

    try:
        batch_a = build_contrast_batch(
            on_v_meta, tg_p_meta, state.rngs["negatives"], cfg.contrast.n_neg,
            online_matrix=emb_on_v, target_matrix=emb_tg_p,
        )
        batch_b = build_contrast_batch(
            on_p_meta, tg_v_meta, state.rngs["negatives"], cfg.contrast.n_neg,
            online_matrix=emb_on_p, target_matrix=emb_tg_v,
        )
    except DegenerateBatchError:
        return {"skipped": True, "pairs": 0, "loss": None}

    loss = 0.5 * (
        contrastive_loss(batch_a, cfg.contrast.temperature)
        + contrastive_loss(batch_b, cfg.contrast.temperature)
    )
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    ema_update(state.online, state.target, _ema_momentum(state.config, state.epoch))
    return {"skipped": False, "pairs": len(batch_a.pairs), "loss": float(loss.detach())}


def _dump_pair(dump_dir: Path, scene_id: int, v, m, v_p, m_p) -> None:
    from PIL import Image

    dump_dir.mkdir(parents=True, exist_ok=True)
    Image.fromarray((v * 255).astype(np.uint8)).save(dump_dir / f"{scene_id:05d}_v.png")
    Image.fromarray((v_p * 255).astype(np.uint8)).save(dump_dir / f"{scene_id:05d}_vp.png")
    write_mask_png(m.grid % 256, dump_dir / f"{scene_id:05d}_m.png")
    write_mask_png(m_p.grid % 256, dump_dir / f"{scene_id:05d}_mp.png")


def _consistency_pass(
    state: TrainState,
    scenes: list[Scene],
    epoch: int,
    lam: float,
    lr: float,
    writer: MetricsWriter,
) -> None:
    cfg = state.config
    order = np.arange(len(scenes))
    if cfg.trainer.shuffle:
        order = state.rngs["batching"].permutation(len(scenes))
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    for batch_idx in _batches(order, cfg.trainer.batch_size):
        images = [scenes[i].image for i in batch_idx]
        info = run_consistency_step(
            state.online,
            state.target,
            state.optimizer,
            images,
            state.warmup_k,
            lam,
            cfg.consistency.kappa,
            cfg.consistency.stage,
            state.rngs["augment"],
            state.rngs["kmeans"],
            cfg.augment,
            _ema_momentum(cfg, epoch),
            share_geometry=not cfg.consistency.literal_independent_views,
            kmeans_iters=cfg.bootstrap.kmeans_iters,
        )
        state.step += 1
        writer.metric(
            {
                "type": "step",
                "kind": "consistency",
                "epoch": epoch,
                "step": state.step,
                "loss": round(info["loss"], 8),
                "lambda": lam,
                "k": info["k"],
                "intra_online": round(info["intra_online"], 8),
                "intra_target": round(info["intra_target"], 8),
                "inter_online": round(info["inter_online"], 8),
                "inter_target": round(info["inter_target"], 8),
            }
        )


def init_state(cfg: RunConfig, scenes: list[Scene], manifest) -> TrainState:
    online, target = build_models(cfg.encoder, stream(cfg.seed, "init"))
    optimizer = _make_optimizer(online, cfg)
    rngs = {
        "augment": stream(cfg.seed, "augment"),
        "kmeans": stream(cfg.seed, "kmeans"),
        "negatives": stream(cfg.seed, "negatives"),
        "batching": stream(cfg.seed, "batching"),
    }
    warmup_k = cfg.consistency.warmup_k
    if warmup_k is None:
        warmup_k = median_object_count(manifest, scenes)
    return TrainState(
        config=cfg,
        online=online,
        target=target,
        optimizer=optimizer,
        rngs=rngs,
        mask_sets=None,
        epoch=0,
        step=0,
        warmup_k=warmup_k,
    )


def train(
    cfg: RunConfig,
    data_dir: str | Path,
    out_dir: str | Path,
    resume: str | Path | None = None,
    dry_run: bool = False,
    dump_augmented: str | Path | None = None,
) -> list[tuple[int, str]]:
    """Run the schedule; returns the emitted (epoch, event) list.

    With dry_run=True the same loop runs with every heavy operation
    stubbed out, producing only the event log (no dataset required).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sched = Schedule(
        epochs=cfg.trainer.epochs,
        warmup_epochs=cfg.trainer.warmup_epochs,
        bootstrap_period=cfg.trainer.bootstrap_period,
        consistency_period=cfg.trainer.consistency_period,
    )
    events: list[tuple[int, str]] = []

    if dry_run:
        writer = MetricsWriter(out, append=False)
        for epoch in range(1, sched.epochs + 1):
            for kind in epoch_events(sched, epoch):
                events.append((epoch, kind))
                writer.metric({"type": "event", "epoch": epoch, "event": kind})
        writer.close()
        return events

    scenes, manifest = load_dataset(data_dir)
    if resume is not None:
        state = load_checkpoint(resume)
        resumed_cfg = config_to_dict(state.config)
        given_cfg = config_to_dict(cfg)
        for key in ("out_dir",):
            resumed_cfg.pop(key), given_cfg.pop(key)
        if resumed_cfg != given_cfg:
            raise ConfigError("resume checkpoint was trained with a different config")
        state.config = cfg
        append = (out / "metrics.jsonl").exists()
    else:
        state = init_state(cfg, scenes, manifest)
        append = False

    from .config import echo_config

    echo_config(cfg, out)
    writer = MetricsWriter(out, append=append)
    ckpt_dir = out / "checkpoints"
    dump_dir = Path(dump_augmented) if dump_augmented else None

    def emit(epoch: int, kind: str) -> None:
        events.append((epoch, kind))
        writer.metric({"type": "event", "epoch": epoch, "event": kind})

    try:
        for epoch in range(state.epoch + 1, sched.epochs + 1):
            t_epoch = time.perf_counter()
            state.epoch = epoch
            lr = _cosine_lr(cfg.trainer.lr, epoch, sched.epochs)
            for kind in epoch_events(sched, epoch):
                emit(epoch, kind)
                if kind == "warmup":
                    _consistency_pass(state, scenes, epoch, 1.0, lr, writer)
                elif kind == "bootstrap":
                    mask_sets, info = _refresh_masks(state, scenes, epoch)
                    state.mask_sets = mask_sets
                    _snapshot_masks(mask_sets, info, epoch, out)
                    writer.metric({"type": "bootstrap", "epoch": epoch, **info})
                elif kind == "contrastive":
                    if state.mask_sets is None:
                        raise ContractError("contrastive epoch reached without mask sets")
                    order = np.arange(len(scenes))
                    if cfg.trainer.shuffle:
                        order = state.rngs["batching"].permutation(len(scenes))
                    losses, skipped = [], 0
                    for batch_idx in _batches(order, cfg.trainer.batch_size):
                        res = _contrastive_step(
                            state, scenes, batch_idx, lr,
                            dump_dir if epoch == sched.warmup_epochs + 1 else None,
                        )
                        state.step += 1
                        if res["skipped"]:
                            skipped += 1
                        else:
                            losses.append(res["loss"])
                        writer.metric(
                            {
                                "type": "step",
                                "kind": "contrastive",
                                "epoch": epoch,
                                "step": state.step,
                                "loss": None if res["loss"] is None else round(res["loss"], 8),
                                "pairs": res["pairs"],
                                "skipped": res["skipped"],
                            }
                        )
                    writer.metric(
                        {
                            "type": "epoch_summary",
                            "epoch": epoch,
                            "mean_contrastive_loss": (
                                round(float(np.mean(losses)), 8) if losses else None
                            ),
                            "steps": len(losses) + skipped,
                            "skipped_steps": skipped,
                            "lr": round(lr, 10),
                        }
                    )
                elif kind == "consistency":
                    _consistency_pass(
                        state, scenes, epoch, cfg.consistency.lambda_vmf, lr, writer
                    )
            writer.timing({"epoch": epoch, "seconds": round(time.perf_counter() - t_epoch, 3)})
            last = epoch == sched.epochs
            periodic = cfg.trainer.checkpoint_period and epoch % cfg.trainer.checkpoint_period == 0
            if last or periodic or epoch in cfg.trainer.checkpoint_epochs:
                save_checkpoint(state, ckpt_dir / f"epoch_{epoch:04d}.ckpt")
    except Exception:
        save_checkpoint(state, ckpt_dir / "crash.ckpt")
        writer.close()
        raise
    writer.close()
    return events
