"""Image ingestion and the synthetic shapes corpus."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from PIL import Image, ImageDraw

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}
SHAPE_CLASSES = ("ellipse", "rectangle", "triangle", "pentagon", "star")
VAL_BUCKETS = 10  # one in ten files goes to validation


class DataError(RuntimeError):
    pass


@dataclass
class DatasetHandle:
    """Train/val images as uint8 ``(N, 3, H, W)`` tensors; use :meth:`as_float` for ``[-1, 1]``."""

    train: torch.Tensor
    val: torch.Tensor
    train_names: List[str]
    val_names: List[str]
    train_labels: Optional[np.ndarray] = None
    val_labels: Optional[np.ndarray] = None
    n_skipped: int = 0
    source: str = ""

    @staticmethod
    def as_float(x: torch.Tensor) -> torch.Tensor:
        return x.float() / 127.5 - 1.0

    def __len__(self):
        return len(self.train) + len(self.val)


def is_val(name: str, split_seed: int) -> bool:
    digest = hashlib.sha256(f"{split_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % VAL_BUCKETS == 0


def _to_square(img: Image.Image, size: int) -> np.ndarray:
    img = img.convert("RGB")
    w, h = img.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    img = img.crop((left, top, left + side, top + side))
    if side != size:
        img = img.resize((size, size), Image.BICUBIC)
    return np.asarray(img, dtype=np.uint8)


def ingest_dataset(path, image_size: int, split_seed: int = 0) -> DatasetHandle:
    """Load a folder of images (or a packed ``.npz``), centre-crop, resize, split 90/10.

    Files are ordered by relative path; each goes to validation when a seeded
    hash of its name falls in one bucket out of ten. Unreadable files are
    skipped with a warning. A ``labels.json`` (relative path -> int) next to
    the images provides class labels.

    Raises:
        DataError: the path is missing or no image could be read.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset path not found: {path}")
    names: List[str] = []
    arrays: List[np.ndarray] = []
    labels: Optional[List[int]] = None
    skipped = 0
    if path.is_file() and path.suffix == ".npz":
        blob = np.load(path, allow_pickle=False)
        imgs = blob["images"]
        if imgs.ndim != 4 or imgs.shape[-1] != 3:
            raise DataError(f"packed images must be (N, H, W, 3), got {imgs.shape}")
        packed_names = [str(n) for n in blob["names"]] if "names" in blob else [f"{i:06d}" for i in range(len(imgs))]
        order = np.argsort(packed_names, kind="stable")
        for i in order:
            arrays.append(_to_square(Image.fromarray(imgs[i].astype(np.uint8)), image_size))
            names.append(packed_names[i])
        if "labels" in blob:
            labels = [int(blob["labels"][i]) for i in order]
    elif path.is_dir():
        label_map = None
        if (path / "labels.json").exists():
            label_map = json.loads((path / "labels.json").read_text())
            labels = []
        files = sorted(
            (p for p in path.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES),
            key=lambda p: p.relative_to(path).as_posix(),
        )
        for f in files:
            rel = f.relative_to(path).as_posix()
            try:
                with Image.open(f) as img:
                    arr = _to_square(img, image_size)
            except Exception as exc:  # PIL raises a variety of types on corrupt input
                logger.warning("skipping unreadable image %s: %s", rel, exc)
                skipped += 1
                continue
            arrays.append(arr)
            names.append(rel)
            if label_map is not None:
                labels.append(int(label_map.get(rel, -1)))
        if labels is not None and any(l < 0 for l in labels):
            logger.warning("labels.json does not cover every image; ignoring labels")
            labels = None
    else:
        raise DataError(f"unsupported dataset path: {path}")
    if not arrays:
        raise DataError(f"no readable images under {path}")

    stack = torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2).contiguous()
    val_mask = np.array([is_val(n, split_seed) for n in names])
    tr_idx, va_idx = np.flatnonzero(~val_mask), np.flatnonzero(val_mask)
    lab = np.asarray(labels) if labels is not None else None
    return DatasetHandle(
        train=stack[tr_idx],
        val=stack[va_idx],
        train_names=[names[i] for i in tr_idx],
        val_names=[names[i] for i in va_idx],
        train_labels=lab[tr_idx] if lab is not None else None,
        val_labels=lab[va_idx] if lab is not None else None,
        n_skipped=skipped,
        source=str(path),
    )


def _polygon(cx, cy, r, n, rot, star=False):
    pts = []
    k = 2 * n if star else n
    for i in range(k):
        rr = r * (0.45 if star and i % 2 else 1.0)
        a = rot + 2 * math.pi * i / k
        pts.append((cx + rr * math.cos(a), cy + rr * math.sin(a)))
    return pts


def render_shapes_image(rng: np.random.Generator, size: int = 64, supersample: int = 4):
    """One RGB image with 1-3 coloured shapes; the label is the class of the dominant shape."""
    s = size * supersample
    bg = tuple(int(v) for v in rng.integers(0, 256, 3))
    bg2 = tuple(int(v) for v in rng.integers(0, 256, 3))
    img = Image.new("RGB", (s, s), bg)
    draw = ImageDraw.Draw(img)
    # vertical background gradient
    for y in range(0, s, supersample):
        t = y / s
        col = tuple(int((1 - t) * a + t * b) for a, b in zip(bg, bg2))
        draw.rectangle([0, y, s, y + supersample], fill=col)
    n_shapes = int(rng.integers(1, 4))
    # small distractors first, the labelled dominant shape last (never occluded)
    radii = np.concatenate([rng.uniform(0.06, 0.12, n_shapes - 1), rng.uniform(0.22, 0.38, 1)]) * s
    label = int(rng.integers(len(SHAPE_CLASSES)))
    for j, r in enumerate(radii):
        cls = label if j == n_shapes - 1 else int(rng.integers(len(SHAPE_CLASSES)))
        cx, cy = rng.uniform(r * 0.6, s - r * 0.6, 2)
        col = tuple(int(v) for v in rng.integers(0, 256, 3))
        rot = rng.uniform(0, 2 * math.pi)
        name = SHAPE_CLASSES[cls]
        if name == "ellipse":
            ax = r * rng.uniform(0.6, 1.0)
            draw.ellipse([cx - r, cy - ax, cx + r, cy + ax], fill=col)
        elif name == "rectangle":
            h = r * rng.uniform(0.4, 1.0)
            c, sn = math.cos(rot), math.sin(rot)
            corners = [(-r, -h), (r, -h), (r, h), (-r, h)]
            draw.polygon([(cx + x * c - y * sn, cy + x * sn + y * c) for x, y in corners], fill=col)
        elif name == "triangle":
            draw.polygon(_polygon(cx, cy, r, 3, rot), fill=col)
        elif name == "pentagon":
            draw.polygon(_polygon(cx, cy, r, 5, rot), fill=col)
        else:
            draw.polygon(_polygon(cx, cy, r, 5, rot, star=True), fill=col)
    return img.resize((size, size), Image.LANCZOS), label


def generate_shapes_corpus(out_dir, n: int = 5600, size: int = 64, seed: int = 0, packed: bool = False) -> Path:
    """Write ``n`` shape images as PNGs plus ``labels.json`` (or a single ``shapes.npz``)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    labels = {}
    imgs = []
    for i in range(n):
        img, label = render_shapes_image(rng, size)
        name = f"img_{i:05d}.png"
        labels[name] = label
        if packed:
            imgs.append(np.asarray(img))
        else:
            img.save(out / name, format="PNG")
    if packed:
        target = out / "shapes.npz"
        np.savez_compressed(target, images=np.stack(imgs), labels=np.array(list(labels.values())),
                            names=np.array(list(labels.keys())))
        return target
    (out / "labels.json").write_text(json.dumps(labels))
    return out
