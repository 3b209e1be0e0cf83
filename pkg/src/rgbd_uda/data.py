"""RGB-D segmentation datasets on disk and a synthetic domain-shifted generator.

Layout::

    root/rgb/<split>/<id>.png     8-bit RGB
    root/depth/<split>/<id>.png   16-bit inverse depth, [0, 1] scaled to [0, 65535]
    root/label/<split>/<id>.png   8-bit class ids
    root/<split>.txt              manifest, one "rgb depth label" triple per line
"""

from __future__ import annotations

import dataclasses
import glob
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .core import IGNORE_INDEX, ConfigError, _coerce, seeded_rng

TOY_CLASSES = ("background", "box", "pole", "disk", "wall", "stripe")
BACKGROUND, BOX, POLE, DISK, WALL, STRIPE = range(6)

# Cityscapes label id -> train id for the 19 evaluation classes
CITYSCAPES_REMAP = {7: 0, 8: 1, 11: 2, 12: 3, 13: 4, 17: 5, 19: 6, 20: 7, 21: 8, 22: 9,
                    23: 10, 24: 11, 25: 12, 26: 13, 27: 14, 28: 15, 31: 16, 32: 17, 33: 18}


class DataError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# toy scene generator


@dataclass
class ToySpec:
    image_size: int = 128
    num_classes: int = 6
    walls: tuple[int, int] = (0, 2)
    boxes: tuple[int, int] = (0, 2)
    disks: tuple[int, int] = (0, 2)
    poles: tuple[int, int] = (1, 3)
    pole_width: tuple[int, int] = (2, 4)
    source_palette: tuple = ((90, 140, 200), (200, 60, 50), (240, 220, 40),
                             (60, 180, 70), (150, 150, 150), (250, 250, 250))
    # source colors half-blended toward gray, except the pole which turns a
    # wall-like gray so only shape and depth separate the two
    target_palette: tuple = ((109, 134, 164), (164, 94, 89), (146, 142, 136),
                             (94, 154, 99), (139, 139, 139), (189, 189, 189))
    color_jitter: float = 0.12
    source_noise: float = 4.0
    target_noise: float = 8.0
    target_depth_blur: float = 0.8
    target_depth_noise: float = 0.02
    background_depth: tuple[float, float] = (0.05, 0.2)
    wall_depth: tuple[float, float] = (0.3, 0.45)
    object_depth: tuple[float, float] = (0.45, 0.7)
    pole_depth: tuple[float, float] = (0.6, 0.95)
    min_depth_gap: float = 0.3
    n_source: int = 200
    n_target: int = 200
    n_val: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.num_classes != len(TOY_CLASSES):
            raise ConfigError(f"toy scenes have {len(TOY_CLASSES)} classes")
        if self.pole_depth[0] - self.background_depth[1] < self.min_depth_gap:
            raise ConfigError("pole and background depth ranges violate min_depth_gap")

    @classmethod
    def from_file(cls, path) -> "ToySpec":
        defaults = {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}
        values = {}
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = (s.strip() for s in line.partition("="))
            if key not in defaults:
                raise ConfigError(f"unknown toy spec key {key!r}; valid keys: {', '.join(defaults)}")
            v = _coerce(key, value, list(defaults[key]) if isinstance(defaults[key], tuple) else defaults[key])
            values[key] = tuple(map(tuple, v)) if key.endswith("palette") else (tuple(v) if isinstance(v, list) else v)
        return cls(**values)


@dataclass
class Layer:
    cls: int
    support: np.ndarray  # bool [H, W]
    inv_depth: np.ndarray  # float [H, W], only meaningful on support


@dataclass
class Scene:
    layers: list[Layer]  # far to near
    labels: np.ndarray
    inv_depth: np.ndarray
    rgb: np.ndarray


def _layers(spec: ToySpec, rng: np.random.Generator) -> list[Layer]:
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s]
    lo, hi = spec.background_depth
    # ground-like gradient: nearer toward the bottom
    bg_depth = lo + (hi - lo) * (yy / max(s - 1, 1))
    layers = [Layer(BACKGROUND, np.ones((s, s), bool), bg_depth.astype(np.float64))]

    def rect(h_rng, w_rng):
        h = int(rng.integers(*h_rng))
        w = int(rng.integers(*w_rng))
        y0 = int(rng.integers(0, max(1, s - h)))
        x0 = int(rng.integers(0, max(1, s - w)))
        m = np.zeros((s, s), bool)
        m[y0:y0 + h, x0:x0 + w] = True
        return m, (y0, x0, h, w)

    def const(v):
        return np.full((s, s), v, np.float64)

    walls = []
    for _ in range(int(rng.integers(spec.walls[0], spec.walls[1] + 1))):
        m, (y0, x0, h, w) = rect((s // 4, s // 2 + 1), (s // 4, s // 2 + 1))
        d = rng.uniform(*spec.wall_depth)
        group = [Layer(WALL, m, const(d))]
        if rng.random() < 0.7:
            sh = max(2, h // 5)
            sy = y0 + int(rng.integers(0, max(1, h - sh)))
            sm = np.zeros((s, s), bool)
            sm[sy:sy + sh, x0:x0 + w] = True
            # painted on the wall: same depth, drawn just in front of it
            group.append(Layer(STRIPE, sm, const(d)))
        walls.append((d, group))
    for _, group in sorted(walls, key=lambda g: g[0]):
        layers.extend(group)
    objs = []
    for _ in range(int(rng.integers(spec.boxes[0], spec.boxes[1] + 1))):
        m, _ = rect((s // 8, s // 3 + 1), (s // 8, s // 3 + 1))
        objs.append(Layer(BOX, m, const(rng.uniform(*spec.object_depth))))
    for _ in range(int(rng.integers(spec.disks[0], spec.disks[1] + 1))):
        r = rng.uniform(s / 16, s / 6)
        cy, cx = rng.uniform(r, s - r, size=2)
        m = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        objs.append(Layer(DISK, m, const(rng.uniform(*spec.object_depth))))
    for _ in range(int(rng.integers(spec.poles[0], spec.poles[1] + 1))):
        w = int(rng.integers(spec.pole_width[0], spec.pole_width[1] + 1))
        h = int(rng.integers(s // 3, s))
        x0 = int(rng.integers(0, s - w))
        y1 = int(rng.integers(h, s + 1))
        m = np.zeros((s, s), bool)
        m[y1 - h:y1, x0:x0 + w] = True
        objs.append(Layer(POLE, m, const(rng.uniform(*spec.pole_depth))))
    # objects drawn far to near (larger inverse depth is nearer)
    objs.sort(key=lambda l: float(l.inv_depth[0, 0]))
    return layers + objs


def render_scene(spec: ToySpec, rng: np.random.Generator, domain: str) -> Scene:
    if domain not in ("source", "target"):
        raise ValueError(f"domain must be 'source' or 'target', got {domain!r}")
    s = spec.image_size
    layers = _layers(spec, rng)
    palette = np.asarray(spec.source_palette if domain == "source" else spec.target_palette, np.float64)
    labels = np.zeros((s, s), np.uint8)
    depth = np.zeros((s, s), np.float64)
    rgb = np.zeros((s, s, 3), np.float64)
    for layer in layers:
        color = palette[layer.cls] * (1 + rng.uniform(-spec.color_jitter, spec.color_jitter))
        m = layer.support
        labels[m] = layer.cls
        depth[m] = layer.inv_depth[m]
        rgb[m] = color
    noise = spec.source_noise if domain == "source" else spec.target_noise
    rgb = rgb + rng.normal(0, noise, rgb.shape)
    if domain == "target":
        # mimic an estimated depth map: smoothed edges plus noise
        depth = ndimage.gaussian_filter(depth, spec.target_depth_blur, mode="nearest")
        depth = depth + rng.normal(0, spec.target_depth_noise, depth.shape)
    rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    return Scene(layers, labels, np.clip(depth, 0, 1), rgb)


def encode_depth(inv_depth: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(inv_depth, 0, 1) * 65535).astype(np.uint16)


def _write_png(arr: np.ndarray, path: Path) -> None:
    if arr.dtype == np.uint16:
        img = Image.fromarray(arr.astype("<u2"))
    else:
        img = Image.fromarray(arr)
    img.save(path, format="PNG", optimize=False)


def generate_toy(spec: ToySpec, n_images: int, domain: str, root, split: str = "train") -> Path:
    """Render ``n_images`` scenes and write them with a manifest; returns the manifest path."""
    root = Path(root)
    try:
        dirs = {k: root / k / split for k in ("rgb", "depth", "label")}
        for d in dirs.values():
            d.mkdir(parents=True, exist_ok=True)
        rng = seeded_rng(spec.seed, f"toy/{domain}/{split}")
        lines = []
        for i in range(n_images):
            scene = render_scene(spec, rng, domain)
            name = f"{i:05d}.png"
            _write_png(scene.rgb, dirs["rgb"] / name)
            _write_png(encode_depth(scene.inv_depth), dirs["depth"] / name)
            _write_png(scene.labels, dirs["label"] / name)
            lines.append(f"rgb/{split}/{name} depth/{split}/{name} label/{split}/{name}\n")
        manifest = root / f"{split}.txt"
        manifest.write_text("".join(lines))
    except OSError as e:
        raise DataError(f"cannot write toy dataset under {root}: {e}") from e
    return manifest


def make_toy_benchmark(spec: ToySpec, out) -> dict[str, Path]:
    """Source train split, target train split (unlabeled use) and target val split."""
    out = Path(out)
    generate_toy(spec, spec.n_source, "source", out / "source", "train")
    generate_toy(spec, spec.n_target, "target", out / "target", "train")
    generate_toy(spec, spec.n_val, "target", out / "target", "val")
    return {"source": out / "source", "target": out / "target"}


# ---------------------------------------------------------------------------
# loading


@dataclass
class Augmentation:
    hflip: bool = True


@dataclass
class DatasetAdapter:
    """Reads (rgb, depth, label) triples for one split.

    Depth pixels are divided by ``depth_scale`` and clipped to [0, 1]. Label
    ids go through ``remap`` (ids absent from it become IGNORE); without a
    remap, ids >= num_classes become IGNORE.
    """

    root: Path
    split: str = "train"
    num_classes: int = 6
    remap: Mapping[int, int] | None = None
    depth_scale: float = 65535.0
    patterns: Mapping[str, str] | None = None
    with_labels: bool = True
    cache: bool = True
    _items: list = field(default_factory=list, init=False, repr=False)
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.root = Path(self.root)
        if self.patterns:
            self._items = self._discover()
        else:
            manifest = self.root / f"{self.split}.txt"
            if not manifest.exists():
                raise DataError(f"missing manifest {manifest}")
            for line in manifest.read_text().splitlines():
                if line.strip():
                    self._items.append(tuple(self.root / p for p in line.split()))
        lut = np.full(256, IGNORE_INDEX, np.uint8)
        if self.remap is None:
            lut[:self.num_classes] = np.arange(self.num_classes)
        else:
            for k, v in self.remap.items():
                lut[int(k)] = int(v)
        self._lut = lut

    def _discover(self):
        """Glob-based pairing, e.g. Cityscapes-style per-city folders."""
        pat = self.patterns
        rgb_files = sorted(glob.glob(str(self.root / pat["rgb"].format(split=self.split))))
        items = []
        for f in rgb_files:
            stem = os.path.basename(f).replace(pat.get("rgb_suffix", ""), "")
            depth = glob.glob(str(self.root / pat["depth"].format(split=self.split, stem=stem)))
            if not depth:
                raise DataError(f"no depth file for {f}")
            label = None
            if self.with_labels and "label" in pat:
                found = glob.glob(str(self.root / pat["label"].format(split=self.split, stem=stem)))
                label = Path(found[0]) if found else None
            items.append((Path(f), Path(depth[0]), label))
        return items

    @classmethod
    def cityscapes(cls, root, split: str = "val", with_labels: bool = True) -> "DatasetAdapter":
        """Cityscapes leftImg8bit + disparity + gtFine layout (disparity as inverse depth)."""
        patterns = {
            "rgb": "leftImg8bit/{split}/*/*_leftImg8bit.png",
            "rgb_suffix": "_leftImg8bit.png",
            "depth": "disparity/{split}/*/{stem}_disparity.png",
            "label": "gtFine/{split}/*/{stem}_gtFine_labelIds.png",
        }
        return cls(root, split, 19, CITYSCAPES_REMAP, 65535.0, patterns, with_labels)

    def __len__(self):
        return len(self._items)

    def _read(self, path: Path, mode: str) -> np.ndarray:
        key = (path, mode)
        if key in self._cache:
            return self._cache[key]
        try:
            with Image.open(path) as img:
                img.load()
                if mode == "rgb":
                    arr = np.asarray(img.convert("RGB"))
                elif mode == "depth":
                    arr = np.asarray(img)
                    if arr.ndim != 2:
                        raise DataError(f"depth file {path} is not single-channel")
                else:
                    arr = np.asarray(img)
                    if arr.ndim != 2:
                        raise DataError(f"label file {path} is not single-channel")
        except (OSError, SyntaxError, ValueError) as e:
            raise DataError(f"cannot read {path}: {e}") from e
        if self.cache:
            self._cache[key] = arr
        return arr

    def load_item(self, index: int) -> dict[str, np.ndarray]:
        rgb_p, depth_p, label_p = self._items[index]
        rgb = self._read(rgb_p, "rgb").astype(np.float32) / 255.0
        depth = np.clip(self._read(depth_p, "depth").astype(np.float32) / self.depth_scale, 0, 1)
        if rgb.shape[:2] != depth.shape:
            raise DataError(f"rgb {rgb_p} {rgb.shape[:2]} and depth {depth_p} {depth.shape} differ in size")
        item = {"rgb": rgb.transpose(2, 0, 1), "depth": depth[None]}
        if self.with_labels and label_p is not None:
            raw = self._read(label_p, "label")
            if raw.shape != depth.shape:
                raise DataError(f"label {label_p} {raw.shape} does not match rgb size {depth.shape}")
            item["labels"] = self._lut[raw]
        return item

    def load_batch(self, indices, rng: np.random.Generator | None = None,
                   augmentation: Augmentation | None = Augmentation()) -> dict[str, torch.Tensor]:
        """Stack items into tensors; flips are drawn from ``rng`` when given."""
        items = [self.load_item(int(i)) for i in indices]
        if rng is not None and augmentation is not None and augmentation.hflip:
            flips = rng.random(len(items)) < 0.5
            for it, f in zip(items, flips):
                if f:
                    for k in it:
                        it[k] = np.ascontiguousarray(it[k][..., ::-1])
        out = {"rgb": torch.from_numpy(np.stack([it["rgb"] for it in items])),
               "depth": torch.from_numpy(np.stack([it["depth"] for it in items]))}
        if all("labels" in it for it in items):
            out["labels"] = torch.from_numpy(np.stack([it["labels"] for it in items]).astype(np.int64))
        return out


def load_batch(adapter: DatasetAdapter, indices, augmentation: Augmentation | None = None,
               rng: np.random.Generator | None = None):
    return adapter.load_batch(indices, rng, augmentation)
