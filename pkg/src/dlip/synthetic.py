"""Synthetic blob corpus: hermetic stand-in for web image-text data.

Each image is a dark noisy canvas with 1-3 uniquely colored square blobs
aligned to a cell grid. Captions mirror the asymmetry of real data:

  raw    mentions a single blob's color and is sometimes wrong, like alt-text;
  short  one clean sentence listing every blob's color and grid position;
  long   one sentence per blob naming its color and grid position.

Ground truth records the cell (= patch, when the encoder grid matches) of
every blob and which long-caption sentence describes it, which gives the
attention tests an exact target. Generation is byte-deterministic per seed.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List

import numpy as np

from .captions import CaptionRecord, save_dataset
from .encoders import save_image_tensor

COLOR_TABLE = (
    ("red", (1.0, 0.0, 0.0)),
    ("green", (0.0, 1.0, 0.0)),
    ("blue", (0.0, 0.0, 1.0)),
    ("yellow", (1.0, 1.0, 0.0)),
    ("magenta", (1.0, 0.0, 1.0)),
    ("cyan", (0.0, 1.0, 1.0)),
    ("orange", (1.0, 0.5, 0.0)),
    ("white", (1.0, 1.0, 1.0)),
)

_RAW_TEMPLATES = (
    "a photo with something {} in it",
    "my {} snapshot",
    "{} thing on a dark background",
    "an old picture, mostly {}",
)

_SHORT_TEMPLATES = (
    "a dark picture with {}.",
    "an image showing {}.",
)
_SHORT_ITEM = "{color} at row {row} column {col}"

_LONG_TEMPLATES = (
    "A {color} blob sits at row {row}, column {col}.",
    "There is a {color} square at row {row}, column {col}.",
    "Row {row}, column {col} contains a {color} patch.",
)


@dataclass
class GenConfig:
    n_images: int = 100
    n_classes: int = 8
    grid: tuple = (4, 4)
    seed: int = 0
    cell_px: int = 8
    channels: int = 3
    min_blobs: int = 1
    max_blobs: int = 3
    train_fraction: float = 0.8
    raw_wrong_color_rate: float = 0.15

    def __post_init__(self):
        gh, gw = self.grid
        if self.n_images < 1:
            raise ValueError("n_images must be >= 1")
        if not 2 <= self.n_classes <= len(COLOR_TABLE):
            raise ValueError(f"n_classes must be in [2, {len(COLOR_TABLE)}]")
        if gh < 1 or gw < 1 or self.cell_px < 1:
            raise ValueError("grid dimensions and cell_px must be >= 1")
        if not 1 <= self.min_blobs <= self.max_blobs:
            raise ValueError("need 1 <= min_blobs <= max_blobs")
        if self.max_blobs > self.n_classes:
            raise ValueError("max_blobs cannot exceed n_classes (colors are unique per image)")
        if self.max_blobs > gh * gw:
            raise ValueError("max_blobs cannot exceed the number of grid cells")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        if not 0.0 <= self.raw_wrong_color_rate <= 1.0:
            raise ValueError("raw_wrong_color_rate must be in [0, 1]")

    @property
    def image_size(self):
        return (self.grid[0] * self.cell_px, self.grid[1] * self.cell_px)


def _join_names(names: List[str]) -> str:
    if len(names) == 1:
        return names[0]
    return ", ".join(names[:-1]) + " and " + names[-1]


def _render_image(cfg: GenConfig, rng, cells, colors) -> np.ndarray:
    # Nuisance noise is kept mild on purpose: the corpus probes what the
    # captions say about an image, not robustness to pixel corruption.
    h, w = cfg.image_size
    img = rng.uniform(0.0, 0.02, size=(cfg.channels, h, w))
    gh, gw = cfg.grid
    s = cfg.cell_px
    for cell, color_idx in zip(cells, colors):
        r, c = divmod(int(cell), gw)
        rgb = COLOR_TABLE[color_idx][1]
        brightness = rng.uniform(0.95, 1.0)
        block = np.empty((cfg.channels, s, s))
        for ch in range(cfg.channels):
            base = rgb[ch % 3] if cfg.channels >= 3 else rgb[0]
            block[ch] = base * brightness + rng.uniform(-0.02, 0.02, size=(s, s))
        img[:, r * s : (r + 1) * s, c * s : (c + 1) * s] = block
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _make_captions(cfg: GenConfig, rng, cells, colors):
    gh, gw = cfg.grid
    names = [COLOR_TABLE[c][0] for c in colors]

    raw_color = names[0]
    if cfg.n_classes > 1 and rng.random() < cfg.raw_wrong_color_rate:
        others = [i for i in range(cfg.n_classes) if i != colors[0]]
        raw_color = COLOR_TABLE[others[int(rng.integers(len(others)))]][0]
    raw = _RAW_TEMPLATES[int(rng.integers(len(_RAW_TEMPLATES)))].format(raw_color)

    items = []
    for cell, name in zip(cells, names):
        r, c = divmod(int(cell), gw)
        items.append(_SHORT_ITEM.format(color=name, row=r + 1, col=c + 1))
    short = _SHORT_TEMPLATES[int(rng.integers(len(_SHORT_TEMPLATES)))].format(
        _join_names(items)
    )

    sentences = []
    for cell, name in zip(cells, names):
        r, c = divmod(int(cell), gw)
        tpl = _LONG_TEMPLATES[int(rng.integers(len(_LONG_TEMPLATES)))]
        sentences.append(tpl.format(color=name, row=r + 1, col=c + 1))
    return raw, short, sentences


def generate_corpus(cfg: GenConfig, out_dir) -> Dict[str, object]:
    """Write captions.jsonl, images/*.dlt, groundtruth.jsonl, split.json and
    meta.json under out_dir. Same config -> byte-identical output."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    gh, gw = cfg.grid

    records: List[CaptionRecord] = []
    gt_rows: List[dict] = []
    for i in range(cfg.n_images):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 10, i])))
        n_blobs = int(rng.integers(cfg.min_blobs, cfg.max_blobs + 1))
        cells = rng.choice(gh * gw, size=n_blobs, replace=False)
        colors = rng.choice(cfg.n_classes, size=n_blobs, replace=False)
        image_id = f"img{i:05d}"

        image = _render_image(cfg, rng, cells, colors)
        save_image_tensor(out_dir / "images" / f"{image_id}.dlt", image)

        raw, short, sentences = _make_captions(cfg, rng, cells, colors)
        records.append(
            CaptionRecord(
                image_id=image_id,
                raw_caption=raw,
                short_captions=[short],
                long_captions=[sentences],
                sources=["synthetic"],
            )
        )
        gt_rows.append(
            {
                "image_id": image_id,
                "n_blobs": n_blobs,
                "class_label": int(colors[0]),
                "blobs": [
                    {
                        "color": int(color),
                        "color_name": COLOR_TABLE[color][0],
                        "row": int(cell) // gw,
                        "col": int(cell) % gw,
                        "cell": int(cell),
                        "sentence_index": j,
                    }
                    for j, (cell, color) in enumerate(zip(cells, colors))
                ],
            }
        )

    save_dataset(records, out_dir / "captions.jsonl")
    with open(out_dir / "groundtruth.jsonl", "w", encoding="utf-8", newline="\n") as f:
        for row in gt_rows:
            f.write(json.dumps(row, ensure_ascii=False) + "\n")

    split_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 20])))
    perm = split_rng.permutation(cfg.n_images)
    n_train = int(round(cfg.train_fraction * cfg.n_images))
    n_train = min(max(n_train, 1), cfg.n_images - 1) if cfg.n_images > 1 else 1
    ids = [f"img{i:05d}" for i in range(cfg.n_images)]
    split = {
        "train": [ids[i] for i in sorted(perm[:n_train])],
        "test": [ids[i] for i in sorted(perm[n_train:])],
    }
    with open(out_dir / "split.json", "w", encoding="utf-8", newline="\n") as f:
        json.dump(split, f, indent=1)
        f.write("\n")

    meta = {
        "n_images": cfg.n_images,
        "n_classes": cfg.n_classes,
        "class_names": [COLOR_TABLE[i][0] for i in range(cfg.n_classes)],
        "grid": [gh, gw],
        "cell_px": cfg.cell_px,
        "image_size": list(cfg.image_size),
        "channels": cfg.channels,
        "seed": cfg.seed,
        "min_blobs": cfg.min_blobs,
        "max_blobs": cfg.max_blobs,
        "train_fraction": cfg.train_fraction,
        "raw_wrong_color_rate": cfg.raw_wrong_color_rate,
    }
    with open(out_dir / "meta.json", "w", encoding="utf-8", newline="\n") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
        f.write("\n")
    return {
        "n_images": cfg.n_images,
        "n_train": len(split["train"]),
        "n_test": len(split["test"]),
        "out_dir": str(out_dir),
    }
