"""Manifests, PNG image I/O and the 8:1:1 train/val/test split."""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
from PIL import Image

from .labels import read_labels

SPLITS = ("train", "val", "test")
SEASONS = ("dormant", "canopy")


def split_counts(n: int) -> tuple[int, int, int]:
    if n < 10:
        raise ValueError(f"need at least 10 items to split 8:1:1, got {n}")
    n_train = (8 * n) // 10
    n_val = (n - n_train) // 2
    return n_train, n_val, n - n_train - n_val


def split_dataset(items, seed: int) -> tuple[list, list, list]:
    """Shuffle deterministically from ``seed`` and cut 80/10/10."""
    items = list(items)
    n_train, n_val, _ = split_counts(len(items))
    order = np.random.default_rng(seed).permutation(len(items))
    shuffled = [items[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


def assign_splits(manifest: dict, seed: int) -> dict:
    train, val, test = split_dataset(range(len(manifest["items"])), seed)
    for name, idx in zip(SPLITS, (train, val, test)):
        for i in idx:
            manifest["items"][i]["split"] = name
    return manifest


def save_image(path, image: np.ndarray) -> None:
    """Write a [3,H,W] float image in [0,1] as 8-bit PNG."""
    arr = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_manifest(path, manifest: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({k: v for k, v in manifest.items() if k != "root"}, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    manifest["root"] = str(Path(path).resolve().parent)
    for item in manifest.get("items", []):
        for key in ("path", "label_path", "season", "split"):
            if key not in item:
                raise ValueError(f"manifest item missing {key!r}: {item}")
    return manifest


def manifest_root(manifest: dict) -> str:
    return manifest.get("root", ".")


def select(manifest: dict, split: str | None = None, season: str | None = None) -> list[dict]:
    """Items of a split, optionally restricted to one season ('mixed' means both)."""
    out = []
    for item in manifest["items"]:
        if split is not None and item["split"] != split:
            continue
        if season not in (None, "mixed") and item["season"] != season:
            continue
        out.append(item)
    return out


def resolve(manifest: dict, rel: str) -> str:
    return os.path.join(manifest_root(manifest), rel)


def load_item(manifest: dict, item: dict, strict: bool = True):
    image = load_image(resolve(manifest, item["path"]))
    records = read_labels(resolve(manifest, item["label_path"]), strict=strict)
    return image, records
