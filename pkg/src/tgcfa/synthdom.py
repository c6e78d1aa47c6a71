"""Synthetic cross-domain segmentation benchmark.

A *scene* places organ-like shapes on a canvas and fixes the label map. A
*domain style* renders that scene into an image: per-label intensities,
smoothed texture noise, a multiplicative bias field and background-only
distractor objects. Rendering the same scene under two styles yields the
same labels and different pixels, which is the controlled domain gap the
training harness needs.

On disk a dataset is a directory of ``TGTS`` tensors plus ``manifest.tsv``
(``split, domain, scene_seed, image, label``) and ``dataset.json``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import GenerationError, ManifestViolation, ValidationError
from .tensorio import load_tensor, save_tensor

KINDS = ("ellipse", "rounded-rect", "blob")
TRAIN_SPLITS = ("train", "val")


@dataclass(frozen=True)
class OrganSpec:
    label_id: int
    kind: str
    axes_min: tuple[float, float]
    axes_max: tuple[float, float]
    probability: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown shape kind {self.kind!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValidationError("organ probability must lie in [0, 1]")


def default_organs() -> tuple[OrganSpec, ...]:
    return (
        OrganSpec(1, "ellipse", (10.0, 15.0), (13.0, 20.0), 0.95),
        OrganSpec(2, "rounded-rect", (5.0, 7.0), (7.0, 10.0), 0.85),
        OrganSpec(3, "blob", (6.0, 6.0), (8.5, 8.5), 0.85),
        OrganSpec(4, "ellipse", (4.5, 4.5), (6.0, 6.0), 0.85),
    )


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    n_labels: int = 5
    organs: tuple[OrganSpec, ...] = field(default_factory=default_organs)
    max_overlap: float = 0.1  # fraction of a new shape allowed to cover existing organs
    max_tries: int = 60

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValidationError("canvas must be non-empty")
        for o in self.organs:
            if not 1 <= o.label_id < self.n_labels:
                raise ValidationError(f"organ label {o.label_id} outside [1, {self.n_labels})")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        if "organs" in d:
            d["organs"] = tuple(
                OrganSpec(o["label_id"], o["kind"], tuple(o["axes_min"]), tuple(o["axes_max"]),
                          o.get("probability", 1.0))
                for o in d["organs"]
            )
        return cls(**d)


@dataclass(frozen=True)
class Shape:
    label_id: int
    kind: str
    center: tuple[float, float]
    axes: tuple[float, float]
    rotation: float
    harmonics: tuple[tuple[float, float], ...] = ()  # (amplitude, phase) for orders 2.. of a blob

    def extent(self) -> float:
        bump = 1.0 + sum(a for a, _ in self.harmonics)
        return max(self.axes) * bump * (math.sqrt(2.0) if self.kind == "rounded-rect" else 1.0)

    def raster(self, height: int, width: int) -> np.ndarray:
        yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
        dy, dx = yy - self.center[0], xx - self.center[1]
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        u = c * dy + s * dx
        v = -s * dy + c * dx
        ay, ax = self.axes
        if self.kind == "ellipse":
            return (u / ay) ** 2 + (v / ax) ** 2 <= 1.0
        if self.kind == "rounded-rect":
            rc = 0.4 * min(ay, ax)
            qu = np.maximum(np.abs(u) - (ay - rc), 0.0)
            qv = np.maximum(np.abs(v) - (ax - rc), 0.0)
            return qu**2 + qv**2 <= rc**2
        theta = np.arctan2(v, u)
        radius = np.ones_like(theta)
        for order, (amp, phase) in enumerate(self.harmonics, start=2):
            radius += amp * np.cos(order * theta + phase)
        return np.hypot(u / ay, v / ax) <= radius


@dataclass(frozen=True)
class SceneSpec:
    canvas: tuple[int, int]
    shapes: tuple[Shape, ...]
    seed: int

    def label_map(self) -> np.ndarray:
        """Rasterise shapes in order; later shapes occlude earlier ones."""
        labels = np.zeros(self.canvas, dtype=np.uint8)
        for shape in self.shapes:
            labels[shape.raster(*self.canvas)] = shape.label_id
        return labels


def _draw_shape(organ: OrganSpec, rng: np.random.Generator, height: int, width: int) -> Shape:
    axes = tuple(float(rng.uniform(lo, hi)) for lo, hi in zip(organ.axes_min, organ.axes_max))
    rotation = float(rng.uniform(0.0, math.pi))
    harmonics = ()
    if organ.kind == "blob":
        harmonics = tuple((float(rng.uniform(0.06, 0.16)), float(rng.uniform(0, 2 * math.pi))) for _ in range(3))
    draft = Shape(organ.label_id, organ.kind, (0.0, 0.0), axes, rotation, harmonics)
    margin = draft.extent() + 1.0
    if 2 * margin >= min(height, width):
        raise GenerationError(f"organ {organ.label_id} is too large for a {height}x{width} canvas")
    center = (float(rng.uniform(margin, height - 1 - margin)), float(rng.uniform(margin, width - 1 - margin)))
    return replace(draft, center=center)


def generate_scene(config: SceneConfig, seed: int) -> SceneSpec:
    """Deterministically place the configured organs.

    Raises:
        GenerationError: an organ cannot be placed within ``max_tries``.
    """
    rng = np.random.default_rng(seed)
    H, W = config.height, config.width
    occupied = np.zeros((H, W), dtype=bool)
    shapes = []
    for organ in config.organs:
        if rng.random() >= organ.probability:
            continue
        for _ in range(config.max_tries):
            shape = _draw_shape(organ, rng, H, W)
            mask = shape.raster(H, W)
            area = mask.sum()
            if area and (mask & occupied).sum() <= config.max_overlap * area:
                shapes.append(shape)
                occupied |= mask
                break
        else:
            raise GenerationError(
                f"could not place organ {organ.label_id} after {config.max_tries} tries (seed {seed})"
            )
    return SceneSpec((H, W), tuple(shapes), seed)


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DomainStyle:
    """Rendering parameters for one synthetic imaging domain.

    ``intensity_map[r]`` is ``(mean, std)`` of label ``r``'s fill; the std
    is a per-image jitter of the whole object. ``confounder_density`` is the
    Poisson mean of distractor objects painted onto background pixels only.
    """

    name: str
    intensity_map: tuple[tuple[float, float], ...]
    noise_amplitude: float = 0.0
    smoothing: float = 0.0
    confounder_density: float = 0.0
    confounder_intensity: tuple[float, float] = (0.5, 0.0)
    confounder_size: tuple[float, float] = (3.0, 8.0)
    bias_field: float = 0.0

    def __post_init__(self):
        if not self.name:
            raise ValidationError("style needs a name")
        if self.confounder_density < 0 or self.noise_amplitude < 0 or self.smoothing < 0:
            raise ValidationError(f"style {self.name}: densities and amplitudes must be >= 0")
        if not 0.0 <= self.bias_field < 1.0:
            raise ValidationError(f"style {self.name}: bias_field must lie in [0, 1)")
        for mean, std in self.intensity_map:
            if not 0.0 <= mean <= 1.0 or std < 0:
                raise ValidationError(f"style {self.name}: intensity means must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainStyle":
        d = dict(d)
        d["intensity_map"] = tuple(tuple(x) for x in d["intensity_map"])
        for key in ("confounder_intensity", "confounder_size"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# Source: bright organs on a dark field with dense, organ-bright clutter.
STYLE_A = DomainStyle(
    name="styleA",
    intensity_map=((0.10, 0.02), (0.90, 0.03), (0.70, 0.03), (0.55, 0.03), (0.40, 0.03)),
    noise_amplitude=0.05,
    smoothing=1.0,
    confounder_density=5.0,
    confounder_intensity=(0.65, 0.15),
    bias_field=0.10,
)

# Target: reordered, mostly inverted contrasts on a bright mottled field.
STYLE_B = DomainStyle(
    name="styleB",
    intensity_map=((0.60, 0.03), (0.20, 0.04), (0.80, 0.04), (0.35, 0.04), (0.95, 0.02)),
    noise_amplitude=0.08,
    smoothing=2.0,
    confounder_density=1.0,
    confounder_intensity=(0.30, 0.10),
    bias_field=0.25,
)

STYLES = {s.name: s for s in (STYLE_A, STYLE_B)}


def _stable_int(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little")


def _smooth_noise(rng, shape, sigma: float) -> np.ndarray:
    noise = rng.standard_normal(shape)
    if sigma > 0:
        noise = ndimage.gaussian_filter(noise, sigma, mode="reflect")
        std = noise.std()
        if std > 0:
            noise = noise / std
    return noise


def _bias(rng, shape, amplitude: float) -> np.ndarray:
    H, W = shape
    yy, xx = np.mgrid[0:H, 0:W] / np.array([H, W])[:, None, None]
    field_ = np.zeros(shape)
    for _ in range(3):
        fy, fx = rng.uniform(-1.0, 1.0, size=2)
        phase = rng.uniform(0, 2 * math.pi)
        field_ += np.cos(2 * math.pi * (fy * yy + fx * xx) + phase)
    return 1.0 + amplitude * field_ / 3.0


@dataclass
class SampleRecord:
    image: np.ndarray  # (1, H, W) float32 in [0, 1]
    labels: np.ndarray  # (H, W) uint8
    domain_name: str
    scene_seed: int
    confounder_mask: Optional[np.ndarray] = None


def render(scene: SceneSpec, style: DomainStyle, seed: Optional[int] = None) -> SampleRecord:
    """Render a scene in a domain style. ``seed`` defaults to the scene seed."""
    labels = scene.label_map()
    n = len(style.intensity_map)
    if labels.max(initial=0) >= n:
        raise ValidationError(f"style {style.name} defines {n} labels, scene uses {labels.max() + 1}")
    seed = scene.seed if seed is None else seed
    rng = np.random.default_rng([seed, _stable_int(style.name)])
    H, W = scene.canvas

    fill = np.array([m + s * rng.standard_normal() for m, s in style.intensity_map])
    image = fill[labels]

    count = int(rng.poisson(style.confounder_density))
    conf_mask = np.zeros((H, W), dtype=bool)
    background = labels == 0
    for _ in range(count):
        # clutter is elongated or strongly lobed so shape, not brightness, tells it apart
        lo, hi = style.confounder_size
        if rng.random() < 0.5:
            kind, harm = "ellipse", ()
            long_axis = float(rng.uniform(lo, hi))
            axes = (long_axis, long_axis * float(rng.uniform(0.25, 0.5)))
        else:
            kind = "blob"
            r = float(rng.uniform(lo, hi))
            axes = (r, r)
            harm = tuple((float(rng.uniform(0.15, 0.3)), float(rng.uniform(0, 2 * math.pi))) for _ in range(3))
        center = (float(rng.uniform(0, H - 1)), float(rng.uniform(0, W - 1)))
        shape = Shape(0, kind, center, axes, float(rng.uniform(0, math.pi)), harm)
        mean, std = style.confounder_intensity
        value = mean + std * rng.standard_normal()
        pixels = shape.raster(H, W) & background
        image[pixels] = value
        conf_mask |= pixels

    if style.noise_amplitude > 0:
        image = image + style.noise_amplitude * _smooth_noise(rng, (H, W), style.smoothing)
    if style.bias_field > 0:
        image = image * _bias(rng, (H, W), style.bias_field)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)[None]
    return SampleRecord(image, labels, style.name, scene.seed, conf_mask)


# --------------------------------------------------------------------------
# on-disk dataset
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    split: str
    domain: str
    scene_seed: int
    image: str
    label: str


class SplitManifest:
    """Rows of ``manifest.tsv`` plus the dataset's declared source domain."""

    FILENAME = "manifest.tsv"
    HEADER = ("split", "domain", "scene_seed", "image", "label")

    def __init__(self, root, entries: Sequence[ManifestEntry], source_domain: str):
        self.root = Path(root)
        self.entries = list(entries)
        self.source_domain = source_domain

    @classmethod
    def load(cls, root) -> "SplitManifest":
        root = Path(root)
        path = root / cls.FILENAME
        meta_path = root / "dataset.json"
        if not path.is_file() or not meta_path.is_file():
            raise ValidationError(f"{root} is not a dataset directory (missing manifest.tsv or dataset.json)")
        meta = json.loads(meta_path.read_text())
        with path.open(newline="") as fh:
            reader = csv.reader(fh, delimiter="\t")
            header = tuple(next(reader))
            if header != cls.HEADER:
                raise ValidationError(f"{path}: unexpected header {header}")
            entries = [ManifestEntry(s, d, int(seed), img, lbl) for s, d, seed, img, lbl in reader]
        return cls(root, entries, meta["source_style"]["name"])

    def write(self):
        with (self.root / self.FILENAME).open("w", newline="") as fh:
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            writer.writerow(self.HEADER)
            for e in self.entries:
                writer.writerow((e.split, e.domain, e.scene_seed, e.image, e.label))

    def select(self, split: str, domain: Optional[str] = None) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split and (domain is None or e.domain == domain)]

    def domains(self, split: str = "test") -> list[str]:
        seen = []
        for e in self.entries:
            if e.split == split and e.domain not in seen:
                seen.append(e.domain)
        return seen

    def check_hygiene(self):
        """Training splits must hold only source-domain files under their split directory."""
        for e in self.entries:
            if e.split in TRAIN_SPLITS:
                if e.domain != self.source_domain:
                    raise ManifestViolation(
                        f"{e.split} split contains domain {e.domain!r}; only {self.source_domain!r} is allowed"
                    )
                for rel in (e.image, e.label):
                    if Path(rel).parts[0] != e.split:
                        raise ManifestViolation(f"{rel} is listed as {e.split} but lives outside {e.split}/")


def load_entries(manifest: SplitManifest, entries: Iterable[ManifestEntry],
                 allowed_splits: Sequence[str] = TRAIN_SPLITS):
    """Read images and labels as stacked arrays.

    Refuses any entry whose split is not in ``allowed_splits``; the training
    loop calls this with the default so it can never open test files.
    """
    images, labels = [], []
    for e in entries:
        if e.split not in allowed_splits:
            raise ManifestViolation(f"refusing to load {e.image}: split {e.split!r} not in {tuple(allowed_splits)}")
        images.append(load_tensor(manifest.root / e.image))
        labels.append(load_tensor(manifest.root / e.label))
    if not images:
        return np.zeros((0, 1, 0, 0), np.float32), np.zeros((0, 0, 0), np.uint8)
    return np.stack(images), np.stack(labels)


@dataclass
class DatasetConfig:
    n_train: int = 480
    n_val: int = 40
    n_test: int = 80
    source: str = "styleA"
    targets: tuple[str, ...] = ("styleB",)
    scene: SceneConfig = field(default_factory=SceneConfig)
    styles: dict = field(default_factory=lambda: dict(STYLES))

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        styles = dict(STYLES)
        for s in d.pop("styles", []) or []:
            style = DomainStyle.from_dict(s)
            styles[style.name] = style
        scene = SceneConfig.from_dict(d.pop("scene")) if "scene" in d else SceneConfig()
        if "targets" in d:
            d["targets"] = tuple(d["targets"])
        unknown = set(d) - {"n_train", "n_val", "n_test", "source", "targets"}
        if unknown:
            raise ValidationError(f"unknown dataset config keys: {sorted(unknown)}")
        return cls(scene=scene, styles=styles, **d)


def build_dataset(out_dir, n_train: int, n_val: int, n_test_per_domain: int,
                  source_style: DomainStyle, target_styles: Sequence[DomainStyle], seed: int,
                  scene_config: Optional[SceneConfig] = None) -> SplitManifest:
    """Write a source-only train/val set and per-domain test sets.

    Scene seeds are consecutive integers from a seed-derived base, so the
    three splits are disjoint by construction; the test scenes are shared
    by every domain. The output is a pure function of the arguments.
    """
    scene_config = scene_config or SceneConfig()
    names = [source_style.name] + [t.name for t in target_styles]
    if len(set(names)) != len(names):
        raise ValidationError(f"duplicate style names in {names}")
    if min(n_train, n_val, n_test_per_domain) < 0:
        raise ValidationError("split sizes must be non-negative")
    total = n_train + n_val + n_test_per_domain
    base = int(np.random.default_rng(seed).integers(0, 2**31 - 1 - total))
    seeds = {
        "train": range(base, base + n_train),
        "val": range(base + n_train, base + n_train + n_val),
        "test": range(base + n_train + n_val, base + total),
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    plan = [("train", source_style), ("val", source_style)] + [
        ("test", s) for s in [source_style, *target_styles]
    ]
    for split, style in plan:
        folder = out / split / style.name
        folder.mkdir(parents=True, exist_ok=True)
        for scene_seed in seeds[split]:
            sample = render(generate_scene(scene_config, scene_seed), style)
            img = f"{split}/{style.name}/{scene_seed}_image.tgts"
            lbl = f"{split}/{style.name}/{scene_seed}_label.tgts"
            save_tensor(out / img, sample.image)
            save_tensor(out / lbl, sample.labels)
            entries.append(ManifestEntry(split, style.name, scene_seed, img, lbl))
    meta = {
        "format": "tgcfa-synthdom",
        "version": 1,
        "seed": seed,
        "n_labels": scene_config.n_labels,
        "canvas": [scene_config.height, scene_config.width],
        "scene": scene_config.to_dict(),
        "source_style": source_style.to_dict(),
        "target_styles": [t.to_dict() for t in target_styles],
    }
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    manifest = SplitManifest(out, entries, source_style.name)
    manifest.write()
    return manifest


def build_from_config(config: DatasetConfig, out_dir, seed: int) -> SplitManifest:
    try:
        source = config.styles[config.source]
        targets = [config.styles[t] for t in config.targets]
    except KeyError as exc:
        raise ValidationError(f"unknown style {exc.args[0]!r}; known: {sorted(config.styles)}") from None
    return build_dataset(out_dir, config.n_train, config.n_val, config.n_test, source, targets, seed,
                         config.scene)
