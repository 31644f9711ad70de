"""Offline augmentation: three randomized copies of every training image.

Geometric transforms move image pixels and polygon vertices together;
photometric transforms touch pixels only.  The 90 degree rotation maps a
normalized vertex (x, y) to (1 - y, x).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .dataset import load_item, save_image, write_manifest
from .labels import InstanceRecord, clip_to_unit_square, write_labels


@dataclass(frozen=True)
class AugmentSpec:
    rotation90: bool = True
    rotation_prob: float = 0.5
    vertical_shear_deg: float = 15.0
    horizontal_shear_deg: float = 0.0
    hue_deg: float = 15.0
    saturation_pct: float = 25.0
    brightness_pct: float = 20.0
    exposure_pct: float = 20.0
    outputs_per_image: int = 3

    @classmethod
    def identity(cls) -> "AugmentSpec":
        return cls(rotation90=False, vertical_shear_deg=0.0, horizontal_shear_deg=0.0,
                   hue_deg=0.0, saturation_pct=0.0, brightness_pct=0.0, exposure_pct=0.0)


@dataclass(frozen=True)
class Transform:
    rotate: bool = False
    vshear_deg: float = 0.0
    hshear_deg: float = 0.0
    hue_deg: float = 0.0
    saturation: float = 0.0
    brightness: float = 0.0
    exposure: float = 0.0

    @property
    def geometric(self) -> bool:
        return self.rotate or self.vshear_deg != 0.0 or self.hshear_deg != 0.0


def sample_transform(spec: AugmentSpec, rng: np.random.Generator) -> Transform:
    # every draw happens regardless of the range so streams stay aligned across specs
    rot = rng.random() < spec.rotation_prob
    u = rng.uniform(-1.0, 1.0, 6)
    return Transform(
        rotate=bool(spec.rotation90 and rot),
        vshear_deg=float(u[0] * spec.vertical_shear_deg),
        hshear_deg=float(u[1] * spec.horizontal_shear_deg),
        hue_deg=float(u[2] * spec.hue_deg),
        saturation=float(u[3] * spec.saturation_pct / 100.0),
        brightness=float(u[4] * spec.brightness_pct / 100.0),
        exposure=float(u[5] * spec.exposure_pct / 100.0),
    )


# ---------------------------------------------------------------- geometry

def rotate90_points(pts: np.ndarray) -> np.ndarray:
    return np.stack([1.0 - pts[:, 1], pts[:, 0]], axis=1)


def rotate90_image(image: np.ndarray) -> np.ndarray:
    # new[r, c] = old[H-1-c, r], the pixel form of (x, y) -> (1-y, x)
    return np.ascontiguousarray(np.rot90(image, k=-1, axes=(-2, -1)))


def shear_points(pts: np.ndarray, vshear_deg: float = 0.0, hshear_deg: float = 0.0) -> np.ndarray:
    out = pts.copy()
    if vshear_deg:
        out[:, 1] = out[:, 1] + math.tan(math.radians(vshear_deg)) * (out[:, 0] - 0.5)
    if hshear_deg:
        out[:, 0] = out[:, 0] + math.tan(math.radians(hshear_deg)) * (out[:, 1] - 0.5)
    return out


def shear_image(image: np.ndarray, vshear_deg: float = 0.0, hshear_deg: float = 0.0,
                fill: float = 0.0) -> np.ndarray:
    """Nearest-neighbor resample so pixel centers follow :func:`shear_points`."""
    h, w = image.shape[-2:]
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h
    x_dst, y_dst = np.meshgrid(xs, ys)
    tv = math.tan(math.radians(vshear_deg))
    th = math.tan(math.radians(hshear_deg))
    # invert horizontal shear (applied last), then vertical
    x_mid = x_dst - th * (y_dst - 0.5)
    y_src = y_dst - tv * (x_mid - 0.5)
    x_src = x_mid
    r = np.floor(y_src * h).astype(int)
    c = np.floor(x_src * w).astype(int)
    valid = (r >= 0) & (r < h) & (c >= 0) & (c < w)
    out = np.full(image.shape, fill, dtype=np.float64)
    out[..., valid] = image[..., r[valid], c[valid]]
    return out


# ---------------------------------------------------------------- photometric

def adjust_color(image: np.ndarray, hue_deg=0.0, saturation=0.0, brightness=0.0, exposure=0.0) -> np.ndarray:
    """HSV edit: hue rotation, saturation gain, value offset then value gain."""
    if hue_deg == 0.0 and saturation == 0.0 and brightness == 0.0 and exposure == 0.0:
        return image.copy()
    hsv = rgb_to_hsv(np.clip(image.transpose(1, 2, 0), 0.0, 1.0))
    hsv[..., 0] = np.mod(hsv[..., 0] + hue_deg / 360.0, 1.0)
    hsv[..., 1] = np.clip(hsv[..., 1] * (1.0 + saturation), 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] + brightness, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * (1.0 + exposure), 0.0, 1.0)
    return np.ascontiguousarray(hsv_to_rgb(hsv).transpose(2, 0, 1))


def apply_transform(image: np.ndarray, records, tf: Transform, stats: dict | None = None):
    img = image
    polys = [np.asarray(r.polygon, dtype=np.float64) for r in records]
    if tf.rotate:
        img = rotate90_image(img)
        polys = [rotate90_points(p) for p in polys]
    if tf.vshear_deg or tf.hshear_deg:
        img = shear_image(img, tf.vshear_deg, tf.hshear_deg)
        polys = [shear_points(p, tf.vshear_deg, tf.hshear_deg) for p in polys]
    img = adjust_color(img, tf.hue_deg, tf.saturation, tf.brightness, tf.exposure)

    out = []
    for rec, poly in zip(records, polys):
        if tf.geometric:
            poly = clip_to_unit_square(poly)
            if len(np.unique(np.round(poly, 12), axis=0)) < 3:
                if stats is not None:
                    stats["dropped"] = stats.get("dropped", 0) + 1
                continue
            out.append(InstanceRecord(rec.class_id, poly))
        else:
            out.append(rec)
    return img, out


def augment(image: np.ndarray, records, spec: AugmentSpec = AugmentSpec(), seed: int = 0,
            stats: dict | None = None) -> list[tuple[np.ndarray, list[InstanceRecord]]]:
    rng = np.random.default_rng(seed)
    outputs = []
    for _ in range(spec.outputs_per_image):
        tf = sample_transform(spec, rng)
        outputs.append(apply_transform(image, records, tf, stats))
    return outputs


def augment_manifest(manifest: dict, out: str | Path, seed: int, spec: AugmentSpec = AugmentSpec(),
                     strict: bool = True) -> dict:
    """Replace each training item by its augmented copies; val/test are copied as-is."""
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    items = []
    stats: dict = {"dropped": 0}
    for idx, item in enumerate(manifest["items"]):
        image, records = load_item(manifest, item, strict=strict)
        if item["split"] != "train":
            save_image(out / item["path"], image)
            write_labels(out / item["label_path"], records)
            items.append(dict(item))
            continue
        item_seed = int(np.random.SeedSequence([seed, idx]).generate_state(1)[0])
        for k, (img, recs) in enumerate(augment(image, records, spec, item_seed, stats)):
            stem = f"{item['id']}_aug{k}"
            new = dict(item, id=stem, path=f"images/{stem}.png", label_path=f"labels/{stem}.txt",
                       source=item["id"])
            save_image(out / new["path"], img)
            write_labels(out / new["label_path"], recs)
            items.append(new)
    new_manifest = {k: v for k, v in manifest.items() if k not in ("items", "root")}
    new_manifest.update(items=items, augment_seed=seed, augment_dropped=stats["dropped"],
                        augment_spec=spec.__dict__.copy())
    write_manifest(out / "manifest.json", new_manifest)
    new_manifest["root"] = str(out.resolve())
    return new_manifest


def with_overrides(spec: AugmentSpec, **kw) -> AugmentSpec:
    return replace(spec, **{k: v for k, v in kw.items() if v is not None})
