"""Seeded synthetic multi-object scenes with exact ground-truth masks.

Scenes are colored geometric shapes (rectangles, ellipses, triangles) drawn
over a textured background; later-drawn objects occlude earlier ones, and
the label grid is painted by the same rasterization, so gt_mask matches the
rendering exactly. Class id encodes shape kind and color family. Images are
snapped to the 8-bit grid so the PNG round trip is lossless.
"""

from __future__ import annotations

import colorsys
import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .config import FORMAT_VERSION, SceneGenConfig
from .errors import ConfigError, DataFormatError
from .masks import MaskSet
from .rng import stream

SHAPE_KINDS = ("rectangle", "ellipse", "triangle")

# fraction of image size; the cap keeps some background visible even if
# every object lands disjointly at maximum extent
_EXTENT_MIN = 0.125
_EXTENT_MAX = 0.3125
_MAX_COVER = 0.8


@dataclass(frozen=True)
class ObjectSpec:
    class_id: int
    kind: str
    color: np.ndarray  # RGB in [0, 1]
    params: dict  # geometry in pixel units


@dataclass
class Scene:
    image: np.ndarray  # float32 H x W x 3 in [0, 1], 8-bit quantized
    gt_mask: np.ndarray  # int32 H x W, 0 = background
    object_count: int  # distinct non-background classes present
    seed: int

    def mask_set(self) -> MaskSet:
        return MaskSet(self.gt_mask)


@dataclass
class DatasetManifest:
    format_version: int
    scene_count: int
    image_size: int
    shape_vocabulary: dict  # class id -> {"kind": ..., "color_family": ...}
    seeds: list[int]
    config: dict
    checksums: dict  # relative path -> sha256 hex


def class_vocabulary(num_classes: int) -> dict[int, dict]:
    """Class id -> shape kind + color family for the non-background classes."""
    n_shapes = len(SHAPE_KINDS)
    vocab = {}
    for cid in range(1, num_classes):
        vocab[cid] = {
            "kind": SHAPE_KINDS[(cid - 1) % n_shapes],
            "color_family": (cid - 1) // n_shapes,
        }
    return vocab


def _family_color(family: int, n_families: int) -> np.ndarray:
    hue = family / max(n_families, 1)
    return np.array(colorsys.hsv_to_rgb(hue, 0.65, 0.75), dtype=np.float64)


def _validate(cfg: SceneGenConfig) -> None:
    if cfg.image_size < 32:
        raise ConfigError(f"scenegen.image_size must be >= 32, got {cfg.image_size}")
    if cfg.num_classes - 1 < 2:
        raise ConfigError(f"scenegen.num_classes must leave >= 2 shape classes, got {cfg.num_classes}")
    if not (1 <= cfg.min_objects <= cfg.max_objects):
        raise ConfigError(
            f"scenegen.min_objects ({cfg.min_objects}) / max_objects ({cfg.max_objects}) invalid"
        )


def _extent_bounds(cfg: SceneGenConfig) -> tuple[float, float]:
    hi = min(_EXTENT_MAX, float(np.sqrt(_MAX_COVER / cfg.max_objects)))
    lo = min(_EXTENT_MIN, hi * 0.5)
    return lo, hi


def scene_objects(seed: int, cfg: SceneGenConfig) -> list[ObjectSpec]:
    """The deterministic object list for a scene, in draw (occlusion) order."""
    _validate(cfg)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    return _sample_objects(rng, cfg)


def _sample_objects(rng: np.random.Generator, cfg: SceneGenConfig) -> list[ObjectSpec]:
    size = cfg.image_size
    vocab = class_vocabulary(cfg.num_classes)
    n_families = max(v["color_family"] for v in vocab.values()) + 1
    lo, hi = _extent_bounds(cfg)
    n_objects = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects = []
    for _ in range(n_objects):
        cid = int(rng.integers(1, cfg.num_classes))
        kind = vocab[cid]["kind"]
        base = _family_color(vocab[cid]["color_family"], n_families)
        color = np.clip(base + rng.uniform(-0.08, 0.08, size=3), 0.05, 0.95)
        ew = rng.uniform(lo, hi) * size
        eh = rng.uniform(lo, hi) * size
        cx = rng.uniform(ew / 2, size - ew / 2)
        cy = rng.uniform(eh / 2, size - eh / 2)
        if kind == "rectangle":
            params = {"cx": cx, "cy": cy, "hw": ew / 2, "hh": eh / 2}
        elif kind == "ellipse":
            params = {"cx": cx, "cy": cy, "rx": ew / 2, "ry": eh / 2}
        else:  # triangle: three vertices inside the extent box, non-degenerate
            x0, y0 = cx - ew / 2, cy - eh / 2
            for _attempt in range(20):
                vx = rng.uniform(x0, x0 + ew, size=3)
                vy = rng.uniform(y0, y0 + eh, size=3)
                area = 0.5 * abs(
                    (vx[1] - vx[0]) * (vy[2] - vy[0]) - (vx[2] - vx[0]) * (vy[1] - vy[0])
                )
                if area >= 0.1 * ew * eh:
                    break
            params = {"vx": vx.tolist(), "vy": vy.tolist()}
        objects.append(ObjectSpec(class_id=cid, kind=kind, color=color, params=params))
    return objects


def rasterize_object(obj: ObjectSpec, size: int) -> np.ndarray:
    """Boolean coverage of one object, tested at pixel centers."""
    ys, xs = np.mgrid[0:size, 0:size]
    xs = xs + 0.0
    ys = ys + 0.0
    p = obj.params
    if obj.kind == "rectangle":
        return (np.abs(xs - p["cx"]) <= p["hw"]) & (np.abs(ys - p["cy"]) <= p["hh"])
    if obj.kind == "ellipse":
        return ((xs - p["cx"]) / p["rx"]) ** 2 + ((ys - p["cy"]) / p["ry"]) ** 2 <= 1.0
    if obj.kind == "triangle":
        vx, vy = p["vx"], p["vy"]

        def side(i, j):
            return (xs - vx[i]) * (vy[j] - vy[i]) - (ys - vy[i]) * (vx[j] - vx[i])

        d0, d1, d2 = side(0, 1), side(1, 2), side(2, 0)
        neg = (d0 <= 0) & (d1 <= 0) & (d2 <= 0)
        pos = (d0 >= 0) & (d1 >= 0) & (d2 >= 0)
        return neg | pos
    raise ConfigError(f"unknown shape kind {obj.kind!r}")


def _sample_background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Low-frequency textured background so 'stuff' regions exist."""
    coarse = rng.uniform(0.25, 0.55, size=(4, 4, 3))
    t = np.clip((np.arange(size) + 0.5) * (4 / size) - 0.5, 0.0, 3.0)
    i0 = np.floor(t).astype(int)
    i1 = np.minimum(i0 + 1, 3)
    w = t - i0
    # interpolate rows, then columns
    rows = coarse[i0] * (1 - w)[:, None, None] + coarse[i1] * w[:, None, None]
    out = rows[:, i0] * (1 - w)[None, :, None] + rows[:, i1] * w[None, :, None]
    return out


def generate_scene(seed: int, cfg: SceneGenConfig) -> Scene:
    """Render one scene; pure function of (seed, cfg)."""
    _validate(cfg)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    objects = _sample_objects(rng, cfg)
    size = cfg.image_size
    image = _sample_background(rng, size)
    label = np.zeros((size, size), dtype=np.int32)
    for obj in objects:
        cover = rasterize_object(obj, size)
        image[cover] = obj.color
        label[cover] = obj.class_id
    image = image + rng.normal(0.0, cfg.noise_sigma, size=(size, size, 3))
    image = np.clip(image, 0.0, 1.0)
    quant = np.round(image * 255.0).astype(np.uint8)
    image = quant.astype(np.float32) / 255.0
    present = np.unique(label)
    return Scene(
        image=image,
        gt_mask=label,
        object_count=int(np.sum(present > 0)),
        seed=int(seed),
    )


def generate_dataset(cfg: SceneGenConfig, master_seed: int) -> tuple[list[Scene], list[int]]:
    """All scenes for a dataset plus the per-scene seeds used."""
    gen = stream(master_seed, "scenegen")
    seeds = [int(s) for s in gen.integers(0, 2**63 - 1, size=cfg.scene_count)]
    scenes = [generate_scene(s, cfg) for s in seeds]
    return scenes, seeds


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_mask_png(grid: np.ndarray, path: Path) -> None:
    """Single-channel 8-bit indexed mask image."""
    if grid.min() < 0 or grid.max() > 255:
        raise DataFormatError(f"mask labels outside 8-bit range: [{grid.min()}, {grid.max()}]")
    Image.fromarray(grid.astype(np.uint8), mode="L").save(path)


def read_mask_png(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.int32)


def write_dataset(scenes: list[Scene], path: str | Path, cfg: SceneGenConfig) -> DatasetManifest:
    """Write images/, masks/ and a manifest; returns the manifest."""
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    checksums = {}
    for i, scene in enumerate(scenes):
        img_rel = f"images/{i:05d}.png"
        msk_rel = f"masks/{i:05d}.png"
        img8 = np.round(scene.image * 255.0).astype(np.uint8)
        Image.fromarray(img8, mode="RGB").save(root / img_rel)
        write_mask_png(scene.gt_mask, root / msk_rel)
        checksums[img_rel] = _sha256(root / img_rel)
        checksums[msk_rel] = _sha256(root / msk_rel)
    manifest = DatasetManifest(
        format_version=FORMAT_VERSION,
        scene_count=len(scenes),
        image_size=cfg.image_size,
        shape_vocabulary={str(k): v for k, v in class_vocabulary(cfg.num_classes).items()},
        seeds=[s.seed for s in scenes],
        config=dataclasses.asdict(cfg),
        checksums=checksums,
    )
    (root / "manifest.json").write_text(
        json.dumps(manifest.__dict__, indent=2, sort_keys=False) + "\n"
    )
    return manifest


def read_manifest(path: str | Path) -> DatasetManifest:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DataFormatError(f"no manifest.json under {root}")
    try:
        data = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"manifest.json is not valid JSON: {exc}") from exc
    required = {
        "format_version",
        "scene_count",
        "image_size",
        "shape_vocabulary",
        "seeds",
        "config",
        "checksums",
    }
    missing = required - set(data)
    if missing:
        raise DataFormatError(f"manifest.json missing keys: {sorted(missing)}")
    if data["format_version"] != FORMAT_VERSION:
        raise DataFormatError(
            f"manifest format_version {data['format_version']} unsupported "
            f"(this build reads {FORMAT_VERSION})"
        )
    if len(data["seeds"]) != data["scene_count"]:
        raise DataFormatError(
            f"manifest lists {len(data['seeds'])} seeds for scene_count {data['scene_count']}"
        )
    return DatasetManifest(**data)


def load_dataset(path: str | Path, verify_checksums: bool = True) -> tuple[list[Scene], DatasetManifest]:
    """Load a written dataset; validates everything before returning scenes."""
    root = Path(path)
    manifest = read_manifest(root)
    n = manifest.scene_count
    rels = [(f"images/{i:05d}.png", f"masks/{i:05d}.png") for i in range(n)]
    for img_rel, msk_rel in rels:
        for rel in (img_rel, msk_rel):
            p = root / rel
            if not p.exists():
                raise DataFormatError(f"dataset file missing: {rel}")
            if verify_checksums:
                want = manifest.checksums.get(rel)
                if want is None:
                    raise DataFormatError(f"manifest has no checksum for {rel}")
                got = _sha256(p)
                if got != want:
                    raise DataFormatError(f"checksum mismatch for {rel}")
    scenes = []
    for i, (img_rel, msk_rel) in enumerate(rels):
        img8 = np.asarray(Image.open(root / img_rel).convert("RGB"), dtype=np.uint8)
        mask = read_mask_png(root / msk_rel)
        present = np.unique(mask)
        scenes.append(
            Scene(
                image=img8.astype(np.float32) / 255.0,
                gt_mask=mask,
                object_count=int(np.sum(present > 0)),
                seed=int(manifest.seeds[i]),
            )
        )
    return scenes, manifest


def median_object_count(manifest: DatasetManifest, scenes: list[Scene]) -> int:
    """Median distinct-object count, used as the warmup cluster count."""
    counts = sorted(s.object_count for s in scenes)
    return max(1, int(counts[len(counts) // 2]))
