"""Seeded synthetic multi-site scenes.

Each site has its own background palette and value-noise frequency (tissue
diversity) and its own task and class set (task diversity). A scene is a
smooth background plus capsule "instruments" and elliptical "tissue blobs",
each at a constant depth; nearer objects are painted last and occlude. Image
brightness falls off with depth so depth is readable from appearance.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .model import TaskSpec
from .tensor import tdf

TRAIN_FRACTION = 0.8


@dataclass(frozen=True)
class SiteSpec:
    name: str
    seed: int
    task: TaskSpec
    image_size: tuple[int, int] = (64, 64)
    palette: tuple[tuple[float, float, float], ...] = ()
    noise_cells: int = 4
    instrument_range: tuple[int, int] = (1, 4)
    blob_range: tuple[int, int] = (0, 3)
    class_map: tuple[int, ...] = ()
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        rng = np.random.default_rng([self.seed, 0xC0102])
        if not self.palette:
            object.__setattr__(self, "palette", tuple(tuple(map(float, c)) for c in rng.uniform(0.2, 0.9, (3, 3))))
        if len(self.palette) != 3:
            raise ValueError("palette needs exactly 3 colours")
        if self.task.kind == "segmentation":
            fg = self.task.class_count - 1
            if not self.class_map:
                object.__setattr__(self, "class_map", tuple(int(c) + 1 for c in rng.permutation(fg)))
            if sorted(self.class_map) != list(range(1, fg + 1)):
                raise ValueError("class_map must permute the foreground ids 1..C-1")
            if not self.labels:
                object.__setattr__(self, "labels", tuple(f"class{c}" for c in range(1, fg + 1)))
        lo, hi = self.instrument_range
        if not 0 <= lo <= hi:
            raise ValueError("bad instrument range")
        lo, hi = self.blob_range
        if not 0 <= lo <= hi:
            raise ValueError("bad blob range")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task"] = asdict(self.task)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SiteSpec":
        d = dict(d)
        task = dict(d.pop("task"))
        if "depth_range" in task:
            task["depth_range"] = tuple(task["depth_range"])
        tuple_keys = ("image_size", "instrument_range", "blob_range", "class_map", "labels")
        for key in tuple_keys:
            if key in d:
                d[key] = tuple(d[key])
        if "palette" in d:
            d["palette"] = tuple(tuple(c) for c in d["palette"])
        return cls(task=TaskSpec(**task), **d)


@dataclass
class SceneObject:
    kind: Literal["capsule", "ellipse"]
    class_slot: int          # index into the site's class map (0-based)
    depth: float
    center: tuple[float, float]
    angle: float
    length: float            # capsule segment length / ellipse major semi-axis
    radius: float            # capsule radius / ellipse minor semi-axis
    color: tuple[float, float, float]


@dataclass
class Scene:
    background: np.ndarray        # [h, w] noise field in [0, 1]
    background_depth: np.ndarray  # [h, w]
    objects: list[SceneObject] = field(default_factory=list)


@dataclass
class Sample:
    image: np.ndarray   # [h, w, 3] in [0, 1]
    label: np.ndarray   # [h, w] class ids or depths


def value_noise(rng: np.random.Generator, cells: int, h: int, w: int) -> np.ndarray:
    """Bilinear interpolation of a seeded ``(cells+1) x (cells+1)`` lattice."""
    lattice = rng.uniform(0.0, 1.0, (cells + 1, cells + 1))
    ys = np.linspace(0.0, cells, h)
    xs = np.linspace(0.0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = lattice[y0][:, x0]
    b = lattice[y0][:, x0 + 1]
    c = lattice[y0 + 1][:, x0]
    d = lattice[y0 + 1][:, x0 + 1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def _class_color(spec: SiteSpec, slot: int) -> tuple[float, float, float]:
    rng = np.random.default_rng([spec.seed, 0xC1A55, slot])
    return tuple(map(float, rng.uniform(0.3, 1.0, 3)))


def sample_scene(spec: SiteSpec, sample_seed: int) -> Scene:
    rng = np.random.default_rng([spec.seed, int(sample_seed)])
    h, w = spec.image_size
    lo, hi = spec.task.depth_range if spec.task.kind == "depth" else (1.0, 10.0)
    mid = 0.5 * (lo + hi)
    background = value_noise(rng, spec.noise_cells, h, w)

    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    ramp = (np.cos(theta) * xx / max(w - 1, 1) + np.sin(theta) * yy / max(h - 1, 1))
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
    wobble = value_noise(rng, 3, h, w) - 0.5
    bg_depth = mid + (hi - mid) * (0.25 + 0.5 * ramp) + 0.04 * (hi - lo) * wobble

    seg = spec.task.kind == "segmentation"
    slots = max(spec.task.class_count - 1, 1) if seg else 1
    inst_slots = list(range((slots + 1) // 2)) or [0]
    blob_slots = list(range((slots + 1) // 2, slots)) or inst_slots

    objects = []
    for _ in range(rng.integers(spec.instrument_range[0], spec.instrument_range[1] + 1)):
        slot = int(rng.choice(inst_slots))
        objects.append(SceneObject(
            "capsule", slot, float(rng.uniform(lo + 0.05 * (hi - lo), mid)),
            (float(rng.uniform(0, h)), float(rng.uniform(0, w))), float(rng.uniform(0, np.pi)),
            float(rng.uniform(0.3, 0.7) * w), float(rng.uniform(0.04, 0.08) * w),
            _class_color(spec, slot) if seg else tuple(map(float, rng.uniform(0.55, 0.95, 3)))))
    for _ in range(rng.integers(spec.blob_range[0], spec.blob_range[1] + 1)):
        slot = int(rng.choice(blob_slots))
        objects.append(SceneObject(
            "ellipse", slot, float(rng.uniform(lo + 0.05 * (hi - lo), mid)),
            (float(rng.uniform(0, h)), float(rng.uniform(0, w))), float(rng.uniform(0, np.pi)),
            float(rng.uniform(0.1, 0.2) * w), float(rng.uniform(0.06, 0.12) * w),
            _class_color(spec, slot) if seg else tuple(map(float, rng.uniform(0.4, 0.8, 3)))))
    return Scene(background, bg_depth, objects)


def _object_mask(obj: SceneObject, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (inside mask, normalised distance from the axis in [0, 1])."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = obj.center
    dy, dx = np.sin(obj.angle), np.cos(obj.angle)
    py, px = yy - cy, xx - cx
    along = px * dx + py * dy
    across = -px * dy + py * dx
    if obj.kind == "capsule":
        half = obj.length / 2
        t = np.clip(along, -half, half)
        dist = np.hypot(along - t, across)
        return dist <= obj.radius, dist / obj.radius
    r = np.sqrt((along / obj.length) ** 2 + (across / obj.radius) ** 2)
    return r <= 1.0, r


def rasterize(spec: SiteSpec, scene: Scene, noise_seed: int | None = None) -> Sample:
    h, w = spec.image_size
    seg = spec.task.kind == "segmentation"
    lo, hi = spec.task.depth_range if not seg else (1.0, 10.0)
    pal = np.asarray(spec.palette)
    t = np.clip(scene.background, 0.0, 1.0)[..., None] * 2.0
    color = np.where(t < 1.0, pal[0] + (pal[1] - pal[0]) * t, pal[1] + (pal[2] - pal[1]) * (t - 1.0))
    depth = scene.background_depth.copy()
    label = np.zeros((h, w), dtype=np.int64)
    shade = np.ones((h, w))
    for obj in sorted(scene.objects, key=lambda o: -o.depth):   # far to near
        inside, radial = _object_mask(obj, h, w)
        color[inside] = obj.color
        depth[inside] = obj.depth
        shade[inside] = 0.75 + 0.25 * np.cos(0.5 * np.pi * np.clip(radial[inside], 0, 1))
        if seg:
            label[inside] = spec.class_map[obj.class_slot]
    falloff = 0.35 + 0.65 * (hi - np.clip(depth, lo, hi)) / (hi - lo)
    image = color * (falloff * shade)[..., None]
    if noise_seed is not None:
        image = image + np.random.default_rng([spec.seed, int(noise_seed), 7]).normal(0, 0.02, image.shape)
    image = np.clip(image, 0.0, 1.0)
    if seg:
        return Sample(image, label)
    return Sample(image, np.clip(depth, lo, hi))


def render_sample(spec: SiteSpec, sample_seed: int) -> Sample:
    return rasterize(spec, sample_scene(spec, sample_seed), noise_seed=sample_seed)


@dataclass
class SiteDataset:
    spec: SiteSpec
    images: np.ndarray   # [n, h, w, 3]
    labels: np.ndarray   # [n, h, w]
    train_idx: np.ndarray
    eval_idx: np.ndarray

    @property
    def n(self) -> int:
        return self.images.shape[0]


def split_indices(spec: SiteSpec, n: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([spec.seed, 0x5B117]).permutation(n)
    n_train = int(round(TRAIN_FRACTION * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def make_site_dataset(spec: SiteSpec, n: int) -> SiteDataset:
    if n < 1:
        raise ValueError("need at least one sample")
    samples = [render_sample(spec, i) for i in range(n)]
    train, ev = split_indices(spec, n)
    return SiteDataset(spec, np.stack([s.image for s in samples]),
                       np.stack([s.label.astype(np.float64) for s in samples]), train, ev)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def generate_site_dataset(spec: SiteSpec, n: int, out_dir) -> dict:
    """Write ``n`` samples as TDF image/label pairs plus ``manifest.json``."""
    ds = make_site_dataset(spec, n)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = set(ds.train_idx.tolist())
    entries = []
    for i in range(n):
        img, lab = out / f"sample_{i:04d}_image.tdf", out / f"sample_{i:04d}_label.tdf"
        tdf.save(img, ds.images[i])
        tdf.save(lab, ds.labels[i])
        entries.append({"index": i, "split": "train" if i in train else "eval",
                        "image": img.name, "label": lab.name,
                        "image_sha256": _sha256(img), "label_sha256": _sha256(lab)})
    manifest = {"format": "fedsurg-site-v1", "spec": spec.to_dict(), "n": n, "samples": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


class DatasetError(RuntimeError):
    pass


def load_site_dataset(directory, verify: bool = True) -> SiteDataset:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise DatasetError(f"no manifest in {directory}")
    manifest = json.loads(path.read_text())
    spec = SiteSpec.from_dict(manifest["spec"])
    images, labels, train, ev = [], [], [], []
    for e in manifest["samples"]:
        img, lab = directory / e["image"], directory / e["label"]
        if verify and (_sha256(img) != e["image_sha256"] or _sha256(lab) != e["label_sha256"]):
            raise DatasetError(f"checksum mismatch for sample {e['index']} in {directory}")
        images.append(tdf.load(img))
        labels.append(tdf.load(lab))
        (train if e["split"] == "train" else ev).append(e["index"])
    return SiteDataset(spec, np.stack(images), np.stack(labels), np.array(train, dtype=int),
                       np.array(ev, dtype=int))


def manifest_matches(spec: SiteSpec, n: int, directory) -> bool:
    """True when ``directory`` already holds exactly this dataset with valid checksums."""
    path = Path(directory) / "manifest.json"
    if not path.exists():
        return False
    try:
        manifest = json.loads(path.read_text())
        if manifest.get("n") != n or manifest.get("spec") != json.loads(json.dumps(spec.to_dict())):
            return False
        for e in manifest["samples"]:
            for key in ("image", "label"):
                f = Path(directory) / e[key]
                if not f.exists() or _sha256(f) != e[f"{key}_sha256"]:
                    return False
    except (OSError, KeyError, ValueError):
        return False
    return True


def default_benchmark_sites(image_size: Sequence[int] = (32, 32), seed: int = 0) -> list[SiteSpec]:
    """Five sites: segmentation with 3, 11 and 9 classes, then two depth sites."""
    size = tuple(image_size)
    return [
        SiteSpec("SynthNephrectomy", 101 + seed, TaskSpec("segmentation", 3), size, noise_cells=3,
                 labels=("Shaft", "Wrist")),
        SiteSpec("SynthSceneSeg", 202 + seed, TaskSpec("segmentation", 11), size, noise_cells=4),
        SiteSpec("SynthHysterectomy", 303 + seed, TaskSpec("segmentation", 9), size, noise_cells=6),
        SiteSpec("SynthCadaverDepth", 404 + seed, TaskSpec("depth", depth_range=(2.0, 20.0)), size,
                 noise_cells=3),
        SiteSpec("SynthInVivoDepth", 505 + seed, TaskSpec("depth", depth_range=(1.0, 12.0)), size,
                 noise_cells=5),
    ]
