"""Procedural scenes, target light field rendering, augmentation, dataset IO.

Scenes are ordered far-to-near stacks of textured planes with binary
alpha masks. Targets are rendered per view with the same shear-shift rule
the display model uses, compositing far-to-near with overwrite where
alpha is set, then clamped to [0,1]. Augmentation scales intensities and
crops patches; it never rotates, scales or warps, so the angle-to-depth
pixel mapping of the views is untouched.

On disk a dataset is `root/manifest.json` plus `root/sample_{i}/
view_{a}_{b}.png` (8-bit grayscale, for inspection) with a float32 PFM
sidecar `view_{a}_{b}.pfm` as the lossless numeric source of truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .lightfield import DisplayGeometry, LightField, shift_sample, view_shifts

DATASET_VERSION = 1
TEXTURE_FAMILIES = ("checker", "gradient", "noise", "glyph")


@dataclass
class Scene:
    """Far-to-near list of (depth mm, texture HxW, alpha HxW in {0,1})."""

    planes: list
    seed: int = 0

    def __post_init__(self):
        if not self.planes:
            raise ValueError("scene needs at least one plane")
        depths = [p[0] for p in self.planes]
        if any(b <= a for a, b in zip(depths, depths[1:])):
            raise ValueError("planes must be ordered far to near (increasing depth)")
        h, w = self.planes[0][1].shape
        for _, tex, alpha in self.planes:
            if tex.shape != (h, w) or alpha.shape != (h, w):
                raise ValueError("all plane textures and masks must share dimensions")


def _smooth_noise(rng, h, w, cells=6):
    """Band-limited noise: low-res uniform grid, bilinearly upsampled."""
    coarse = rng.uniform(0, 1, (cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c00 = coarse[np.ix_(y0, x0)]
    c01 = coarse[np.ix_(y0, x0 + 1)]
    c10 = coarse[np.ix_(y0 + 1, x0)]
    c11 = coarse[np.ix_(y0 + 1, x0 + 1)]
    return (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)


def _texture(rng, family, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    if family == "checker":
        cell = int(rng.integers(4, max(5, h // 4)))
        lo, hi = sorted(rng.uniform(0.1, 0.9, 2))
        return np.where(((yy // cell) + (xx // cell)) % 2 == 0, lo, hi)
    if family == "gradient":
        theta = rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(theta) * xx / max(w - 1, 1) + np.sin(theta) * yy / max(h - 1, 1))
        ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
        lo, hi = sorted(rng.uniform(0.05, 0.95, 2))
        return lo + (hi - lo) * ramp
    if family == "noise":
        return _smooth_noise(rng, h, w, cells=int(rng.integers(4, 10)))
    if family == "glyph":
        img = np.full((h, w), float(rng.uniform(0.05, 0.3)))
        for _ in range(int(rng.integers(2, 6))):
            cy, cx = rng.integers(0, h), rng.integers(0, w)
            r = int(rng.integers(max(2, h // 12), max(3, h // 4)))
            val = rng.uniform(0.4, 1.0)
            if rng.random() < 0.5:
                img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = val
            else:
                img[max(0, cy - r):cy + r, max(0, cx - r):cx + r] = val
        return img
    raise ValueError(f"unknown texture family {family!r}")


def _blob_mask(rng, h, w):
    """A non-degenerate binary mask: one random ellipse or rectangle."""
    yy, xx = np.mgrid[0:h, 0:w]
    while True:
        cy = rng.integers(h // 4, 3 * h // 4)
        cx = rng.integers(w // 4, 3 * w // 4)
        ry = int(rng.integers(max(2, h // 8), max(3, h // 3)))
        rx = int(rng.integers(max(2, w // 8), max(3, w // 3)))
        if rng.random() < 0.5:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        if mask.any():
            return mask.astype(float)


def gen_scene(seed, num_planes=3, size=(96, 96), depth_range=(-6.0, 6.0),
              texture_family="mixed"):
    """Deterministically generate a procedural scene.

    The farthest plane is opaque everywhere (the background); nearer
    planes carry blob masks. Depths are sampled within depth_range and
    sorted far to near.
    """
    if num_planes < 1:
        raise ValueError("need at least one plane")
    rng = np.random.default_rng(seed)
    h, w = size
    depths = np.sort(rng.uniform(depth_range[0], depth_range[1], num_planes))
    planes = []
    for i, z in enumerate(depths):
        family = (texture_family if texture_family != "mixed"
                  else TEXTURE_FAMILIES[int(rng.integers(len(TEXTURE_FAMILIES)))])
        tex = np.clip(_texture(rng, family, h, w), 0.0, 1.0)
        alpha = np.ones((h, w)) if i == 0 else _blob_mask(rng, h, w)
        planes.append((float(z), tex, alpha))
    return Scene(planes, seed=seed)


def render_target_lf(scene, geometry):
    """Render a scene into a clamped target light field with occlusion.

    Each plane is displaced per view with the display's shear-shift rule
    (dx = z * tan_u / pitch), and planes composite far to near,
    overwriting wherever the shifted alpha covers the pixel.
    """
    h, w = scene.planes[0][1].shape
    tu = geometry.tangents_u()
    tv = geometry.tangents_v()
    views = np.zeros((geometry.views_u, geometry.views_v, h, w))
    for a in range(geometry.views_u):
        for b in range(geometry.views_v):
            canvas = np.zeros((h, w))
            for z, tex, alpha in scene.planes:
                dx = z * tu[a] / geometry.pixel_pitch
                dy = z * tv[b] / geometry.pixel_pitch
                stex = shift_sample(tex, dx, dy)
                covered = shift_sample(alpha, dx, dy) >= 0.5
                canvas[covered] = stex[covered]
            views[a, b] = canvas
    return LightField.target(views)


def augment(lf, rng, scales=(1.0, 0.75, 0.5, 0.25), crop_size=64, crops_per_scale=1,
            with_records=False):
    """Intensity-scale and crop a light field into training patches.

    The same crop window applies to every view of a patch; patch count is
    len(scales) * crops_per_scale. With with_records, also returns the
    (scale, crop origin) record per patch.
    """
    u, v, h, w = lf.views.shape
    if crop_size > h or crop_size > w:
        raise ValueError(f"crop {crop_size} larger than image {h}x{w}")
    patches, records = [], []
    for s in scales:
        for _ in range(crops_per_scale):
            y0 = int(rng.integers(0, h - crop_size + 1))
            x0 = int(rng.integers(0, w - crop_size + 1))
            patches.append(LightField(
                s * lf.views[:, :, y0:y0 + crop_size, x0:x0 + crop_size]))
            records.append({"intensity_scale": float(s), "crop_origin": [y0, x0],
                            "crop_size": int(crop_size)})
    return (patches, records) if with_records else patches


# ---------------------------------------------------------------------------
# image formats


def write_png(image, path):
    """8-bit grayscale PNG; input clamped to [0,1] then quantized."""
    q = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q, mode="L").save(path)


def read_png(path):
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


def write_pfm(image, path):
    """Grayscale PFM, little-endian (scale -1.0), bottom-up scanlines."""
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(np.flipud(image).astype("<f4")).tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        if f.readline().strip() != b"Pf":
            raise ValueError(f"{path}: not a grayscale PFM")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        data = np.frombuffer(f.read(4 * w * h), dtype="<f4" if scale < 0 else ">f4")
        if data.size != w * h:
            raise ValueError(f"{path}: truncated PFM payload")
    return np.flipud(data.reshape(h, w)).astype(np.float64)


# ---------------------------------------------------------------------------
# dataset persistence


@dataclass
class DatasetManifest:
    geometry: DisplayGeometry
    samples: list  # per sample: {"scene_id", "intensity_scale", "crop_origin", "crop_size"}
    split: str = "train"
    seed: int = 0
    format_version: int = DATASET_VERSION

    def to_dict(self):
        return {"format_version": self.format_version, "split": self.split,
                "seed": self.seed, "geometry": self.geometry.to_dict(),
                "samples": self.samples}

    @classmethod
    def from_dict(cls, d):
        if d.get("format_version") != DATASET_VERSION:
            raise ValueError(f"unsupported dataset format version "
                             f"{d.get('format_version')!r}")
        return cls(geometry=DisplayGeometry.from_dict(d["geometry"]),
                   samples=d["samples"], split=d["split"], seed=d["seed"],
                   format_version=d["format_version"])


def write_dataset(manifest, samples, root, pfm=True):
    """Persist light field samples under root, one directory per sample."""
    if len(manifest.samples) != len(samples):
        raise ValueError("manifest sample records do not match sample count")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, lf in enumerate(samples):
        d = root / f"sample_{i}"
        d.mkdir(exist_ok=True)
        u, v = lf.views.shape[:2]
        for a in range(u):
            for b in range(v):
                write_png(lf.views[a, b], d / f"view_{a}_{b}.png")
                if pfm:
                    write_pfm(lf.views[a, b], d / f"view_{a}_{b}.pfm")
    (root / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2),
                                        encoding="utf-8")


def read_dataset(root):
    """Load a dataset directory; returns (manifest, list of LightField).

    PFM sidecars are preferred; PNG is the quantized fallback. Dimensions
    and sample counts are validated against the manifest.
    """
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    manifest = DatasetManifest.from_dict(
        json.loads(manifest_path.read_text(encoding="utf-8")))
    geom = manifest.geometry
    samples = []
    for i in range(len(manifest.samples)):
        d = root / f"sample_{i}"
        views = None
        for a in range(geom.views_u):
            for b in range(geom.views_v):
                pfm_path = d / f"view_{a}_{b}.pfm"
                png_path = d / f"view_{a}_{b}.png"
                if pfm_path.exists():
                    img = read_pfm(pfm_path)
                elif png_path.exists():
                    img = read_png(png_path)
                else:
                    raise FileNotFoundError(f"missing view file {png_path}")
                if views is None:
                    views = np.empty((geom.views_u, geom.views_v) + img.shape)
                elif img.shape != views.shape[2:]:
                    raise ValueError(f"dimension mismatch in {d}")
                views[a, b] = img
        samples.append(LightField(views))
    return manifest, samples


def generate_dataset(geometry, num_scenes, seed, crop_size=64, crops_per_scale=1,
                     scales=(1.0, 0.75, 0.5, 0.25), num_planes=3, scene_size=(96, 96),
                     depth_margin=1.2, split="train"):
    """Generate scenes, render targets, augment into patches.

    Plane depths span the display gap scaled by depth_margin (content may
    sit slightly beyond the outer layers). Returns (manifest, patches).
    """
    zmin = min(geometry.layer_depths) * depth_margin
    zmax = max(geometry.layer_depths) * depth_margin
    if zmax <= zmin:
        zmin, zmax = zmin - 1.0, zmax + 1.0
    rng = np.random.default_rng(seed)
    records, patches = [], []
    for s in range(num_scenes):
        scene_seed = int(rng.integers(2 ** 63))
        scene = gen_scene(scene_seed, num_planes=num_planes, size=scene_size,
                          depth_range=(zmin, zmax))
        lf = render_target_lf(scene, geometry)
        new_patches, new_records = augment(lf, rng, scales=scales,
                                           crop_size=crop_size,
                                           crops_per_scale=crops_per_scale,
                                           with_records=True)
        for rec in new_records:
            rec["scene_id"] = scene_seed
        patches.extend(new_patches)
        records.extend(new_records)
    manifest = DatasetManifest(geometry=geometry, samples=records, split=split,
                               seed=seed)
    return manifest, patches
