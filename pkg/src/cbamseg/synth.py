"""Procedural two-season orchard scenes with trunk and branch instances.

Dormant scenes show bare trees against a gray sky/soil backdrop.  Canopy
scenes use a green backdrop and paint leafy blobs over the trees; the blobs
hide pixels but every instance keeps its full polygon label.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dataset import assign_splits, save_image, write_manifest
from .labels import BRANCH, TRUNK, InstanceRecord, rasterize, write_labels

PALETTES = {
    "dormant": {
        "sky": (0.74, 0.77, 0.80), "ground": (0.56, 0.53, 0.49),
        "trunk": (0.30, 0.25, 0.21), "branch": (0.42, 0.35, 0.29),
    },
    "canopy": {
        "sky": (0.36, 0.58, 0.30), "ground": (0.30, 0.46, 0.22),
        "trunk": (0.36, 0.28, 0.20), "branch": (0.46, 0.37, 0.26),
        "leaf": (0.20, 0.52, 0.17),
    },
}


@dataclass(frozen=True)
class SceneSpec:
    season: str = "dormant"
    image_size: int = 96
    trunks: tuple[int, int] = (1, 3)
    branches: tuple[int, int] = (2, 5)
    trunk_width: tuple[float, float] = (0.07, 0.12)
    trunk_height: tuple[float, float] = (0.55, 0.95)
    trunk_lean: float = 0.05
    branch_thickness: tuple[float, float] = (0.05, 0.08)
    branch_length: tuple[float, float] = (0.2, 0.34)
    branch_angle_deg: tuple[float, float] = (10.0, 50.0)
    occluders: tuple[int, int] = (3, 7)
    occluder_radius: tuple[float, float] = (0.05, 0.12)
    noise: float = 0.03
    min_visible: float = 0.01

    def validate(self) -> None:
        if self.season not in PALETTES:
            raise ValueError(f"unknown season {self.season!r}")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        for name in ("trunks", "branches", "occluders"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} range {lo}..{hi} is empty or negative")
        for name in ("trunk_width", "trunk_height", "branch_thickness", "branch_length", "occluder_radius"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi <= 1.0:
                raise ValueError(f"{name} range {lo}..{hi} must lie in (0, 1]")
        if self.trunks[1] * (self.trunk_width[1] + 0.04) > 1.0:
            raise ValueError("requested trunks cannot fit side by side in the image")
        if self.branches[1] > 0 and self.trunks[1] == 0:
            raise ValueError("branches need at least one trunk to attach to")
        if self.season == "canopy" and self.occluders[1] < 1:
            raise ValueError("canopy scenes need at least one occluder")
        if self.trunks[0] > 0 and self.trunk_width[0] * self.trunk_height[0] < self.min_visible:
            raise ValueError("smallest trunk is below the minimum visible area")


def _uniform(rng, bounds):
    return float(rng.uniform(bounds[0], bounds[1]))


def _trunk_polygon(rng, spec, x_base, width):
    height = _uniform(rng, spec.trunk_height)
    lean = float(rng.uniform(-spec.trunk_lean, spec.trunk_lean))
    top_w = width * 0.75
    y_top = 1.0 - height
    x_top = float(np.clip(x_base + lean, top_w / 2, 1 - top_w / 2))
    return np.array([
        [x_base - width / 2, 1.0],
        [x_top - top_w / 2, y_top],
        [x_top + top_w / 2, y_top],
        [x_base + width / 2, 1.0],
    ])


def _branch_polygon(rng, spec, trunk):
    bl, tl, tr, br = trunk
    t = float(rng.uniform(0.35, 0.9))
    left_edge = bl + t * (tl - bl)
    right_edge = br + t * (tr - br)
    side = -1.0 if rng.random() < 0.5 else 1.0
    base = left_edge if side < 0 else right_edge
    angle = math.radians(_uniform(rng, spec.branch_angle_deg))
    length = _uniform(rng, spec.branch_length)
    thick = _uniform(rng, spec.branch_thickness)
    d = np.array([side * math.cos(angle), -math.sin(angle)])
    n = np.array([-d[1], d[0]])
    tip = base + length * d
    # start slightly inside the trunk so the branch looks attached
    root = base - 0.01 * d
    poly = np.array([
        root + n * thick / 2,
        tip + n * thick * 0.35,
        tip - n * thick * 0.35,
        root - n * thick / 2,
    ])
    return poly


def _inside_unit(poly):
    return bool(np.all(poly >= 0.0) and np.all(poly <= 1.0))


def _paint(img, mask, color, rng, jitter=0.04):
    c = np.clip(np.asarray(color) + rng.uniform(-jitter, jitter, 3), 0, 1)
    img[:, mask] = c[:, None]


def generate_scene(spec: SceneSpec, seed: int, info: dict | None = None):
    """Render one scene; returns ``(image [3,S,S] in [0,1], instances)``.

    ``info`` (if given) receives the occluder list and visible pixel counts.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    s = spec.image_size
    pal = PALETTES[spec.season]

    rows = np.linspace(0.0, 1.0, s)[:, None]
    sky, ground = np.asarray(pal["sky"]), np.asarray(pal["ground"])
    tint = rng.uniform(-0.04, 0.04, 3)
    bg = (sky[:, None, None] * (1 - rows) + ground[:, None, None] * rows) + tint[:, None, None]
    img = np.broadcast_to(bg, (3, s, s)).copy()

    # trunks: non-overlapping vertical strips
    n_trunks = int(rng.integers(spec.trunks[0], spec.trunks[1] + 1))
    trunks = []
    for _ in range(n_trunks):
        for _attempt in range(100):
            width = _uniform(rng, spec.trunk_width)
            margin = width / 2 + spec.trunk_lean + 0.01
            x = float(rng.uniform(margin, 1 - margin))
            if all(abs(x - ox) > (width + ow) / 2 + 0.08 for ox, ow, _ in trunks):
                poly = _trunk_polygon(rng, spec, x, width)
                if _inside_unit(poly):
                    trunks.append((x, width, poly))
                    break
    instances = [InstanceRecord(TRUNK, poly) for _, _, poly in trunks]
    masks = [rasterize(r.polygon, s, s) for r in instances]

    n_branches = int(rng.integers(spec.branches[0], spec.branches[1] + 1)) if trunks else 0
    branch_masks = []
    for _ in range(n_branches):
        for _attempt in range(100):
            trunk = trunks[int(rng.integers(len(trunks)))][2]
            poly = _branch_polygon(rng, spec, trunk)
            if not _inside_unit(poly):
                continue
            m = rasterize(poly, s, s)
            if m.sum() < spec.min_visible * s * s:
                continue
            if any((m & bm).sum() > 0.15 * m.sum() for bm in branch_masks):
                continue
            instances.append(InstanceRecord(BRANCH, poly))
            masks.append(m)
            branch_masks.append(m)
            break

    # paint trunks first, branches over them; track which instance owns each pixel
    owner = np.full((s, s), -1)
    for idx, (rec, m) in enumerate(zip(instances, masks)):
        _paint(img, m, pal["trunk" if rec.class_id == TRUNK else "branch"], rng)
        owner[m] = idx

    visible = np.array([(owner == i).sum() for i in range(len(instances))], dtype=int)
    keep = [i for i in range(len(instances)) if visible[i] >= spec.min_visible * s * s]
    if len(keep) < len(instances):
        # an instance buried under later strokes is unlabelable; repaint without it
        img = np.broadcast_to(bg, (3, s, s)).copy()
        instances = [instances[i] for i in keep]
        masks = [masks[i] for i in keep]
        owner = np.full((s, s), -1)
        for idx, (rec, m) in enumerate(zip(instances, masks)):
            _paint(img, m, pal["trunk" if rec.class_id == TRUNK else "branch"], rng)
            owner[m] = idx
        visible = np.array([(owner == i).sum() for i in range(len(instances))], dtype=int)

    occluders = []
    if spec.season == "canopy":
        n_occ = max(1, int(rng.integers(spec.occluders[0], spec.occluders[1] + 1)))
        yy, xx = np.mgrid[0:s, 0:s]
        fg = np.argwhere(owner >= 0)
        for _ in range(n_occ):
            if len(fg) and rng.random() < 0.7:
                r, c = fg[int(rng.integers(len(fg)))]
                cy, cx = (r + 0.5) / s, (c + 0.5) / s
            else:
                cy, cx = rng.uniform(0, 1, 2)
            ry, rx = _uniform(rng, spec.occluder_radius), _uniform(rng, spec.occluder_radius)
            blob = (((xx + 0.5) / s - cx) / rx) ** 2 + (((yy + 0.5) / s - cy) / ry) ** 2 <= 1.0
            _paint(img, blob, pal["leaf"], rng, jitter=0.08)
            occluders.append((float(cx), float(cy), float(rx), float(ry)))

    img += rng.normal(0.0, spec.noise, img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    if info is not None:
        info["occluders"] = occluders
        info["visible_pixels"] = visible.tolist()
    return img, instances


def scene_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def generate_dataset(n: int, canopy_fraction: float, seed: int, out: str | Path | None = None,
                     spec: SceneSpec | None = None) -> dict:
    """Build a manifest of ``n`` scenes, ``floor(n * canopy_fraction)`` of them canopy.

    With ``out`` set, images, labels and ``manifest.json`` are written there.
    """
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    if not 0.0 <= canopy_fraction <= 1.0:
        raise ValueError(f"canopy_fraction must lie in [0,1], got {canopy_fraction}")
    base = spec or SceneSpec()
    n_canopy = math.floor(n * canopy_fraction + 1e-9)
    # season draw uses its own stream so it is independent of the split shuffle
    canopy = set(np.random.default_rng([seed, 1]).permutation(n)[:n_canopy].tolist())
    items = []
    for i in range(n):
        season = "canopy" if i in canopy else "dormant"
        items.append({
            "id": f"scene_{i:05d}",
            "path": f"images/scene_{i:05d}.png",
            "label_path": f"labels/scene_{i:05d}.txt",
            "season": season,
            "seed": scene_seed(seed, i),
            "split": "train",
        })
    manifest = {"version": 1, "seed": seed, "canopy_fraction": canopy_fraction,
                "image_size": base.image_size, "items": items}
    if n >= 10:
        assign_splits(manifest, seed)
    if out is not None:
        out = Path(out)
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "labels").mkdir(parents=True, exist_ok=True)
        for item in items:
            image, records = generate_scene(replace(base, season=item["season"]), item["seed"])
            save_image(out / item["path"], image)
            write_labels(out / item["label_path"], records)
        write_manifest(out / "manifest.json", manifest)
        manifest["root"] = str(out.resolve())
    return manifest
