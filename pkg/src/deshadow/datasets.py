"""Directory scanning, pairing, and deterministic batching.

Two layout families are understood:

  istd            triplet directories (shadow / mask / shadow_free), the
                  mask being a binary shadow annotation
  srd, generic-pairs
                  two directories (shadow / shadow_free) paired by stem

Either the dataset root holds the component directories directly, or it
holds train/ and test/ subtrees with the components inside each. Files
pair by filename stem; stems present on one side only go to the mismatch
report and are excluded. Without train/test structure, records are split
deterministically from the scan seed at a 0.8 train ratio.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import colorio, decomposition
from .errors import ConfigError, SampleError

log = logging.getLogger("deshadow.datasets")

LAYOUTS = ("istd", "srd", "generic-pairs")
_IMAGE_EXTS = {".png", ".jpg", ".jpeg"}

# accepted directory names per role, first match wins
_ROLE_NAMES = {
    "shadow": ("shadow", "train_A", "test_A", "A"),
    "mask": ("mask", "train_B", "test_B", "B"),
    "shadow_free": ("shadow_free", "train_C", "test_C", "C"),
}

TRAIN_SPLIT_RATIO = 0.8


@dataclass
class SampleRecord:
    shadow: Path
    shadow_free: Path
    mask: Path | None
    split: str  # "train" | "test"
    stem: str


@dataclass
class DatasetIndex:
    records: list[SampleRecord]
    mismatches: list[str] = field(default_factory=list)

    def split(self, tag: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == tag]

    def mismatch_report(self) -> str:
        return "\n".join(self.mismatches)


@dataclass
class Batch:
    shadow: np.ndarray        # (B, H, W, 3) float32 in [0, 1]
    shadow_free: np.ndarray   # (B, H, W, 3) float32 in [0, 1]
    mask: np.ndarray | None   # (B, H, W) uint8 {0, 1}
    gt_residual: np.ndarray   # (B, H, W, 3) float32 in [-1, 1]
    gt_illumination: np.ndarray  # (B, H, W, 3) float32 in [0, S_MAX]


def _find_role_dir(parent: Path, role: str) -> Path | None:
    for name in _ROLE_NAMES[role]:
        cand = parent / name
        if cand.is_dir():
            return cand
    return None


def _stems(directory: Path) -> dict[str, Path]:
    out: dict[str, Path] = {}
    for p in sorted(directory.iterdir()):
        if p.is_file() and p.suffix.lower() in _IMAGE_EXTS:
            out[p.stem] = p
    return out


def _scan_component_dirs(parent: Path, layout: str, split: str, mismatches: list[str]) -> list[SampleRecord]:
    shadow_dir = _find_role_dir(parent, "shadow")
    free_dir = _find_role_dir(parent, "shadow_free")
    if shadow_dir is None or free_dir is None:
        return []
    mask_dir = _find_role_dir(parent, "mask") if layout == "istd" else None

    shadow_files = _stems(shadow_dir)
    free_files = _stems(free_dir)
    mask_files = _stems(mask_dir) if mask_dir is not None else {}

    records = []
    for stem in sorted(set(shadow_files) | set(free_files)):
        if stem not in shadow_files:
            mismatches.append(f"{stem}: present in {free_dir.name} but not {shadow_dir.name}")
            continue
        if stem not in free_files:
            mismatches.append(f"{stem}: present in {shadow_dir.name} but not {free_dir.name}")
            continue
        mask = mask_files.get(stem)
        if mask_dir is not None and mask is None:
            mismatches.append(f"{stem}: missing mask in {mask_dir.name}")
        records.append(
            SampleRecord(
                shadow=shadow_files[stem],
                shadow_free=free_files[stem],
                mask=mask,
                split=split,
                stem=stem,
            )
        )
    return records


def scan_dataset(root, layout: str, seed: int = 0) -> DatasetIndex:
    """Scan a dataset root into ordered SampleRecords plus a mismatch report.

    Ordering is lexicographic by stem within each split. An empty scan
    raises ConfigError.
    """
    root = Path(root)
    if layout not in LAYOUTS:
        raise ConfigError(f"unknown layout {layout!r}, expected one of {LAYOUTS}")
    if not root.is_dir():
        raise ConfigError(f"dataset root {root} does not exist")

    mismatches: list[str] = []
    records: list[SampleRecord] = []
    split_dirs = [(root / "train", "train"), (root / "test", "test")]
    if any(d.is_dir() for d, _ in split_dirs):
        for d, tag in split_dirs:
            if d.is_dir():
                records += _scan_component_dirs(d, layout, tag, mismatches)
    else:
        records = _scan_component_dirs(root, layout, "train", mismatches)
        if records:
            # deterministic split when the directory structure gives none
            rng = np.random.default_rng(seed)
            n_train = int(round(TRAIN_SPLIT_RATIO * len(records)))
            order = rng.permutation(len(records))
            test_idx = set(order[n_train:].tolist())
            for i, rec in enumerate(records):
                rec.split = "test" if i in test_idx else "train"

    if not records:
        raise ConfigError(f"no usable samples under {root} (layout {layout})")
    return DatasetIndex(records=records, mismatches=mismatches)


def load_mask(path, target_size: tuple[int, int] | None = None) -> np.ndarray:
    """Binary (H, W) {0, 1} mask from a grayscale-or-color mask image."""
    with Image.open(path) as im:
        im = im.convert("L")
        if target_size is not None:
            im = im.resize((target_size[1], target_size[0]), Image.NEAREST)
        arr = np.asarray(im)
    return (arr > 127).astype(np.uint8)


def load_sample(record: SampleRecord, image_size: int | None) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Load one record's (shadow, shadow_free, mask) resized to image_size."""
    size = (image_size, image_size) if image_size else None
    try:
        shadow = colorio.load_image(record.shadow, size)
        free = colorio.load_image(record.shadow_free, size)
        mask = load_mask(record.mask, size) if record.mask is not None else None
    except OSError as exc:
        raise SampleError(f"cannot load sample {record.stem}: {exc}") from exc
    return shadow, free, mask


def load_batch(chunk: list[SampleRecord], image_size: int) -> Batch:
    """Assemble one Batch; supervision targets are derived on the fly so
    they always match the current decomposition constants."""
    loaded = [load_sample(r, image_size) for r in chunk]
    shadow = np.stack([s for s, _, _ in loaded]).astype(np.float32)
    free = np.stack([f for _, f, _ in loaded]).astype(np.float32)
    masks = [m for _, _, m in loaded]
    mask = np.stack(masks) if all(m is not None for m in masks) else None
    return Batch(
        shadow=shadow,
        shadow_free=free,
        mask=mask,
        gt_residual=decomposition.gt_residual(shadow, free).astype(np.float32),
        gt_illumination=decomposition.gt_inverse_illumination(shadow, free).astype(np.float32),
    )


def epoch_order(n_records: int, seed: int, epoch: int) -> np.ndarray:
    """The deterministic shuffle for one epoch, keyed by (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n_records)


def make_batches(
    records: list[SampleRecord],
    batch_size: int,
    image_size: int,
    seed: int,
    epoch: int,
):
    """Yield Batches for one epoch, shuffled deterministically by (seed, epoch).

    The final short batch is kept. A batch containing an unreadable file
    is skipped with a log entry.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = epoch_order(len(records), seed, epoch)
    for start in range(0, len(records), batch_size):
        chunk = [records[i] for i in order[start : start + batch_size]]
        try:
            yield load_batch(chunk, image_size)
        except SampleError as exc:
            log.warning("skipping batch: %s", exc)
            continue
