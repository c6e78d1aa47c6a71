"""Config-driven training, evaluation and the paired baseline-vs-alignment study."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import yaml

from . import tensorio
from .alignhead import ProjectionHead, alignment_loss, derive_feature_masks, project_features
from .errors import ManifestViolation, NumericError, ValidationError
from .segcore import DiceReport, UNet, UNetConfig, dice_score, segmentation_loss, total_loss
from .synthdom import SplitManifest, load_entries
from .textbank import TextEmbeddingTable, load_table

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "tgcfa-checkpoint"
CHECKPOINT_VERSION = 1
DATA_DIR_ENV = "TGCFA_DATA_DIR"


@dataclass
class ExperimentConfig:
    data_dir: Optional[str] = None
    table_path: Optional[str] = None
    descriptions: Optional[str] = None
    provider: str = "stub"
    backbone: dict = field(default_factory=lambda: asdict(UNetConfig()))
    optimizer: str = "adam"
    lr: float = 1e-3
    schedule: str = "cosine"
    epochs: int = 30
    batch_size: int = 8
    neg_margin: float = 0.0
    reduce: str = "mean"
    align_weight: float = 1.0
    use_align: bool = True
    include_background: bool = True
    background_id: int = 0
    use_ce: bool = True
    use_dice: bool = True
    augment: str = "intensity"
    augment_p: float = 0.5
    seed: int = 0
    out_dir: Optional[str] = None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.backbone = {**asdict(UNetConfig()), **(cfg.backbone or {})}
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"config file not found: {path}")
        text = path.read_text()
        try:
            doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ValidationError(f"{path}: cannot parse config: {exc}") from exc
        return cls.from_dict(doc or {})

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def config_hash(self) -> str:
        # the output location does not change the experiment
        d = {k: v for k, v in self.to_dict().items() if k != "out_dir"}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def resolved_data_dir(self) -> Path:
        path = self.data_dir or os.environ.get(DATA_DIR_ENV)
        if not path:
            raise ValidationError(f"no dataset directory: set data_dir or ${DATA_DIR_ENV}")
        return Path(path)

    def validate(self):
        data = self.resolved_data_dir()
        if not (data / SplitManifest.FILENAME).is_file():
            raise ValidationError(f"dataset manifest not found: {data / SplitManifest.FILENAME}")
        if not self.table_path or not Path(self.table_path).is_file():
            raise ValidationError(
                f"embedding table not found: {self.table_path} (run `tgcfa embed-text` first)"
            )
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ValidationError(f"unknown schedule {self.schedule!r}")
        if self.augment not in ("none", "intensity"):
            raise ValidationError(f"augment must be 'none' or 'intensity', got {self.augment!r}")
        if not 0.0 <= self.augment_p <= 1.0:
            raise ValidationError("augment_p must lie in [0, 1]")
        if self.reduce not in ("mean", "sum"):
            raise ValidationError(f"reduce must be 'mean' or 'sum', got {self.reduce!r}")
        if not -1.0 <= self.neg_margin <= 1.0:
            raise ValidationError("neg_margin must lie in [-1, 1]")


@dataclass
class RunRecord:
    config_hash: str
    config: dict
    epochs: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    best_epoch: Optional[int] = None
    checkpoint: Optional[str] = None
    wall_clock: float = 0.0
    files_read: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls(**json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

class _TrainReadGuard:
    """Read observer that refuses any file outside the train/val directories."""

    def __init__(self, root: Path):
        self.root = root.resolve()
        self.count = 0

    def __call__(self, path: Path):
        rel = Path(path).resolve().relative_to(self.root)
        if rel.parts[0] not in ("train", "val"):
            raise ManifestViolation(f"training loop attempted to read {rel}")
        self.count += 1


def build_model(config: ExperimentConfig, table: TextEmbeddingTable):
    """U-Net and projection head, seeded so the U-Net is identical with or
    without the alignment branch."""
    ucfg = UNetConfig(**config.backbone)
    if table.n != ucfg.n_classes:
        raise ValidationError(f"table has {table.n} labels but the backbone predicts {ucfg.n_classes} classes")
    torch.manual_seed(config.seed)
    model = UNet(ucfg)
    gen = torch.Generator().manual_seed(config.seed + 7919)
    head = ProjectionHead(ucfg.bottleneck_channels, table.k, generator=gen)
    return model, head


def predict(model: UNet, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            _, scores = model(torch.from_numpy(images[i : i + batch_size]))
            out.append(scores.argmax(dim=1).to(torch.uint8).numpy())
    if not out:
        return np.zeros((0,) + images.shape[2:], np.uint8)
    return np.concatenate(out)


def random_intensity_curve(images: np.ndarray, rng: np.random.Generator, knots: int = 4,
                           p: float = 0.5, max_strength: float = 0.7) -> np.ndarray:
    """Remap each image through a random monotone piecewise-linear curve,
    inverted half of the time.

    The curve is blended with the identity at a random strength of at most
    ``max_strength``, so every segment keeps a slope of at least
    ``1 - max_strength``: no two intensity levels are merged and small
    low-contrast structures stay visible. Labels are untouched.
    """
    out = images.copy()
    for i in range(len(images)):
        if rng.random() >= p:
            continue
        xs = np.concatenate([[0.0], np.sort(rng.uniform(0.0, 1.0, knots)), [1.0]])
        strength = rng.uniform(0.0, max_strength)
        ys = (1.0 - strength) * xs + strength * np.sort(rng.uniform(0.0, 1.0, knots + 2))
        if rng.random() < 0.5:
            ys = 1.0 - ys
        out[i] = np.interp(images[i], xs, ys).astype(images.dtype)
    return out


def _pooled_dice(model, images, labels, n, background_id) -> DiceReport:
    return dice_score(predict(model, images), labels, n, background_id)


def save_checkpoint(path, model: UNet, head: Optional[ProjectionHead], config: ExperimentConfig,
                    table: TextEmbeddingTable, best_epoch: Optional[int] = None):
    """Write a versioned checkpoint (a ``torch.save`` dict of plain types and tensors)."""
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "backbone": asdict(model.config),
            "model_state": model.state_dict(),
            "projection_state": head.state_dict() if head is not None else None,
            "config": config.to_dict(),
            "config_hash": config.config_hash(),
            "table_fingerprint": table.encoder_fingerprint,
            "best_epoch": best_epoch,
        },
        path,
    )


def load_checkpoint(path):
    """Return ``(model, head, payload)``."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"{path} is not a version-{CHECKPOINT_VERSION} tgcfa checkpoint")
    model = UNet(UNetConfig(**payload["backbone"]))
    model.load_state_dict(payload["model_state"])
    head = None
    if payload["projection_state"] is not None:
        w = payload["projection_state"]["weight"]
        head = ProjectionHead(w.shape[1], w.shape[0])
        head.load_state_dict(payload["projection_state"])
    model.eval()
    return model, head, payload


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def _fit(config: ExperimentConfig):
    """Train and return ``(record, model, head)``; the model holds the best-val weights."""
    config.validate()
    started = time.perf_counter()
    torch.use_deterministic_algorithms(True)
    data_dir = config.resolved_data_dir()
    manifest = SplitManifest.load(data_dir)
    manifest.check_hygiene()
    table = load_table(config.table_path)
    model, head = build_model(config, table)
    n = model.config.n_classes
    exclude = () if config.include_background else (config.background_id,)

    guard = _TrainReadGuard(data_dir)
    tensorio.add_read_observer(guard)
    try:
        x_train, y_train = load_entries(manifest, manifest.select("train"))
        x_val, y_val = load_entries(manifest, manifest.select("val"))
    finally:
        tensorio.remove_read_observer(guard)
    if len(x_train) == 0:
        raise ValidationError(f"{data_dir} has an empty train split")
    if int(y_train.max()) >= n:
        raise ValidationError(f"training labels exceed the {n} configured classes")
    x_train_t = torch.from_numpy(x_train)
    y_train_t = torch.from_numpy(y_train).long()
    grid = model.config.grid_size(*x_train.shape[2:])
    text = torch.tensor(table.embeddings)

    params = list(model.parameters()) + (list(head.parameters()) if config.use_align else [])
    if config.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=config.lr)
    else:
        opt = torch.optim.SGD(params, lr=config.lr, momentum=0.9)
    sched = None
    if config.schedule == "cosine" and config.epochs > 0:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs)
    order_gen = torch.Generator().manual_seed(config.seed)
    aug_rng = np.random.default_rng([config.seed, 1])

    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    record = RunRecord(config.config_hash(), config.to_dict(), files_read=guard.count)
    best_score, best_state = -math.inf, None

    for epoch in range(config.epochs):
        model.train()
        head.train()
        perm = torch.randperm(len(x_train_t), generator=order_gen)
        sums = {}
        steps = 0
        for batch_id, start in enumerate(range(0, len(perm), config.batch_size)):
            idx = perm[start : start + config.batch_size]
            images, labels = x_train_t[idx], y_train_t[idx]
            if config.augment == "intensity":
                images = torch.from_numpy(random_intensity_curve(images.numpy(), aug_rng, p=config.augment_p))
            grid_feats, scores = model(images)
            l_seg = segmentation_loss(scores, labels, config.use_ce, config.use_dice)
            align = None
            if config.use_align:
                mask = derive_feature_masks(labels, grid, n)
                proj = project_features(grid_feats, head)
                align = alignment_loss(proj, text, mask, config.neg_margin, config.reduce,
                                       strict=False, exclude=exclude)
            try:
                bundle = total_loss(l_seg, align, config.align_weight)
                if not torch.isfinite(bundle.l_total):
                    raise NumericError(f"l_total is not finite ({float(bundle.l_total)})")
            except NumericError as exc:
                _dump_failure(out_dir, epoch, batch_id, idx, l_seg, align, exc)
                raise NumericError(f"epoch {epoch} batch {batch_id}: {exc}") from exc
            bundle.check()
            opt.zero_grad(set_to_none=True)
            bundle.l_total.backward()
            opt.step()
            for k, v in bundle.as_floats().items():
                sums[k] = sums.get(k, 0.0) + v
            steps += 1
        lr = opt.param_groups[0]["lr"]
        if sched is not None:
            sched.step()
        val = _pooled_dice(model, x_val, y_val, n, config.background_id) if len(x_val) else None
        score = val.mean_foreground if val is not None else -float(sums["l_total"])
        entry = {"epoch": epoch, "lr": lr, **{k: v / steps for k, v in sums.items()}}
        entry["val_dice"] = val.mean_foreground if val is not None else None
        record.epochs.append(entry)
        logger.info("epoch %d loss %.4f val dice %s", epoch, entry["l_total"], entry["val_dice"])
        if score > best_score:
            best_score = score
            best_state = (copy.deepcopy(model.state_dict()), copy.deepcopy(head.state_dict()), epoch)

    if best_state is not None:
        model.load_state_dict(best_state[0])
        head.load_state_dict(best_state[1])
        record.best_epoch = best_state[2]
        if len(x_val):
            record.final["val"] = _pooled_dice(model, x_val, y_val, n, config.background_id).to_dict()
        if out_dir:
            ckpt = out_dir / "checkpoint.pt"
            save_checkpoint(ckpt, model, head if config.use_align else None, config, table, record.best_epoch)
            record.checkpoint = str(ckpt)
    record.wall_clock = time.perf_counter() - started
    if out_dir:
        record.save(out_dir / "run.json")
    return record, model, head


def _dump_failure(out_dir, epoch, batch_id, idx, l_seg, align, exc):
    dump = {
        "epoch": epoch,
        "batch_id": batch_id,
        "sample_indices": [int(i) for i in idx],
        "l_seg": float(l_seg),
        "align": align.as_dict() if align is not None else None,
        "error": str(exc),
    }
    logger.error("non-finite loss: %s", dump)
    if out_dir:
        (out_dir / "diagnostic.json").write_text(json.dumps(dump, indent=2) + "\n")


def train(config: ExperimentConfig) -> RunRecord:
    """Minimise segmentation (+ alignment) loss on the source train split.

    Validation Dice on the source val split picks the best epoch, whose
    weights are checkpointed to ``out_dir/checkpoint.pt``. Target-domain
    files are never opened.
    """
    record, _, _ = _fit(config)
    return record


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def evaluate_model(model: UNet, data_dir, domains: Optional[Sequence[str]] = None,
                   split: str = "test", background_id: int = 0) -> dict[str, DiceReport]:
    manifest = SplitManifest.load(data_dir)
    available = manifest.domains(split)
    domains = list(domains) if domains else available
    missing = [d for d in domains if d not in available]
    if missing:
        raise ValidationError(f"unknown domain(s) {missing}; available in {split}: {available}")
    n = model.config.n_classes
    reports = {}
    for domain in domains:
        x, y = load_entries(manifest, manifest.select(split, domain), allowed_splits=(split,))
        reports[domain] = _pooled_dice(model, x, y, n, background_id)
    return reports


def evaluate(checkpoint, data_dir, domains: Optional[Sequence[str]] = None,
             split: str = "test") -> dict[str, DiceReport]:
    """Per-domain, per-class Dice of a checkpoint; no parameters change."""
    model, _, payload = load_checkpoint(checkpoint)
    return evaluate_model(model, data_dir, domains, split, payload["config"].get("background_id", 0))


# --------------------------------------------------------------------------
# paired study
# --------------------------------------------------------------------------

def run_trend_study(config: ExperimentConfig, seeds: Sequence[int], out_dir=None) -> dict:
    """Train baseline (no alignment) and aligned arms per seed and compare
    target-domain mean foreground Dice.

    Both arms of a seed share data order and U-Net initialisation.
    """
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ValidationError(f"a trend study needs at least 3 seeds, got {len(seeds)}")
    if len(set(seeds)) != len(seeds):
        raise ValidationError("seeds must be distinct")
    data_dir = config.resolved_data_dir()
    manifest = SplitManifest.load(data_dir)
    source = manifest.source_domain
    domains = manifest.domains("test")
    targets = [d for d in domains if d != source]
    if not targets:
        raise ValidationError(f"{data_dir} has no target-domain test split")
    out_dir = Path(out_dir or config.out_dir or "trend")
    out_dir.mkdir(parents=True, exist_ok=True)

    runs = []
    for seed in seeds:
        row = {"seed": seed}
        for arm, use_align in (("baseline", False), ("tgcfa", True)):
            run_dir = out_dir / f"seed{seed}_{arm}"
            cfg = config.replace(seed=seed, use_align=use_align, out_dir=str(run_dir))
            record, model, _ = _fit(cfg)
            reports = evaluate_model(model, data_dir, domains, "test", config.background_id)
            record.final.update({f"test/{d}": r.to_dict() for d, r in reports.items()})
            record.save(run_dir / "run.json")
            row[arm] = {
                "per_domain": {d: r.mean_foreground for d, r in reports.items()},
                "per_class": {d: r.per_class for d, r in reports.items()},
                "target_mean": float(np.mean([reports[d].mean_foreground for d in targets])),
                "val_dice": record.final.get("val", {}).get("mean_foreground"),
                "run_dir": str(run_dir),
            }
            logger.info("seed %d %s target dice %.2f", seed, arm, row[arm]["target_mean"])
        row["difference"] = row["tgcfa"]["target_mean"] - row["baseline"]["target_mean"]
        runs.append(row)
    diffs = [r["difference"] for r in runs]
    summary = {
        "source": source,
        "targets": targets,
        "seeds": seeds,
        "runs": runs,
        "differences": diffs,
        "mean_difference": float(np.mean(diffs)),
        "positive": int(sum(d > 0 for d in diffs)),
        "negative": int(sum(d < 0 for d in diffs)),
        "config": config.to_dict(),
    }
    (out_dir / "trend.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary
