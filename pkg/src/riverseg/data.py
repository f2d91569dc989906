"""Dataset ingestion, multi-source merging, cross-split deduplication, and
per-sample augmentation.

Directory layout per source: <root>/<split>/images/*.png|jpg and
<root>/<split>/masks/*.png with matching stems. Masks are 8-bit single
channel, binarized at >=128 (water). Content hashes are taken over decoded
pixels, not file bytes, so re-encoded duplicates are still caught.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image

SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class DataError(ValueError):
    """A dataset tree or manifest violates the expected layout."""


@dataclasses.dataclass
class Sample:
    image_path: str
    mask_path: str
    source: str
    split: str
    content_hash: str
    phash: int

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["phash"] = f"{self.phash:016x}"
        return d

    @staticmethod
    def from_dict(d: dict) -> "Sample":
        d = dict(d)
        d["phash"] = int(d["phash"], 16)
        return Sample(**d)


@dataclasses.dataclass
class DatasetManifest:
    samples: list[Sample]
    provenance: list[str] = dataclasses.field(default_factory=list)
    dedup_report: list[dict] = dataclasses.field(default_factory=list)

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    def counts(self) -> dict:
        return {sp: len(self.split(sp)) for sp in SPLITS}

    def to_json(self) -> str:
        return json.dumps({
            "samples": [s.to_dict() for s in self.samples],
            "provenance": self.provenance,
            "dedup_report": self.dedup_report,
        }, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "DatasetManifest":
        d = json.loads(text)
        return DatasetManifest(
            samples=[Sample.from_dict(s) for s in d["samples"]],
            provenance=list(d.get("provenance", [])),
            dedup_report=list(d.get("dedup_report", [])),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @staticmethod
    def load(path) -> "DatasetManifest":
        return DatasetManifest.from_json(Path(path).read_text())


# ---------------------------------------------------------------------------
# Decoding and hashing


def load_image(path) -> np.ndarray:
    """Decode to (H, W, 3) uint8 RGB."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as e:
        raise DataError(f"cannot decode image {path}: {e}") from e


def load_mask(path) -> np.ndarray:
    """Decode to (H, W) uint8 in {0, 1}; >=128 counts as water."""
    try:
        with Image.open(path) as im:
            gray = np.asarray(im.convert("L"), dtype=np.uint8)
    except Exception as e:
        raise DataError(f"cannot decode mask {path}: {e}") from e
    return (gray >= 128).astype(np.uint8)


def content_hash(pixels: np.ndarray) -> str:
    """sha256 of shape-tagged raw pixel bytes; stable across re-encoding."""
    h = hashlib.sha256()
    h.update(str(pixels.shape).encode())
    h.update(np.ascontiguousarray(pixels).tobytes())
    return h.hexdigest()


def average_phash(pixels: np.ndarray) -> int:
    """64-bit average hash of the 8x8 grayscale thumbnail."""
    im = Image.fromarray(pixels).convert("L").resize((8, 8), Image.BILINEAR)
    small = np.asarray(im, dtype=np.float64)
    bits = (small > small.mean()).reshape(-1)
    value = 0
    for b in bits:
        value = (value << 1) | int(b)
    return value


def hamming(a: int, b: int) -> int:
    return bin(a ^ b).count("1")


# ---------------------------------------------------------------------------
# Loading


def _stem_index(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        return {}
    out: dict[str, Path] = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES:
            out[p.stem] = p
    return out


def load_manifest(root_dir, source: Optional[str] = None) -> DatasetManifest:
    """Scan a split tree into a manifest with content and perceptual hashes.

    Every image must have a name-matched mask and vice versa; orphans on
    either side are collected into one error.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    source = source or root.name
    samples: list[Sample] = []
    orphans: list[str] = []
    seen_any = False
    for split in SPLITS:
        images = _stem_index(root / split / "images")
        masks = _stem_index(root / split / "masks")
        if images or masks:
            seen_any = True
        for stem in sorted(set(images) | set(masks)):
            if stem not in masks:
                orphans.append(f"{split}: image {images[stem].name} has no mask")
                continue
            if stem not in images:
                orphans.append(f"{split}: mask {masks[stem].name} has no image")
                continue
            img = load_image(images[stem])
            mask = load_mask(masks[stem])
            if mask.shape != img.shape[:2]:
                raise DataError(f"mask {masks[stem]} is {mask.shape}, image is {img.shape[:2]}")
            samples.append(Sample(
                image_path=str(images[stem]),
                mask_path=str(masks[stem]),
                source=source,
                split=split,
                content_hash=content_hash(img),
                phash=average_phash(img),
            ))
    if orphans:
        raise DataError("unpaired files: " + "; ".join(orphans))
    if not seen_any:
        raise DataError(f"{root} has no <split>/images directories")
    return DatasetManifest(samples=samples, provenance=[f"loaded {source} from {root}"])


# ---------------------------------------------------------------------------
# Dedup and merging


def dedup_cross_split(manifest: DatasetManifest, mode: str = "exact",
                      hamming_threshold: int = 5) -> DatasetManifest:
    """Drop every train/val sample that duplicates a test sample.

    Exact mode compares decoded-pixel hashes; perceptual mode flags phashes
    within the Hamming threshold. Test samples are never touched.
    """
    if mode not in ("exact", "perceptual"):
        raise ValueError(f"unknown dedup mode {mode!r}")
    test = [s for s in manifest.samples if s.split == "test"]
    test_hashes = {s.content_hash: s for s in test}

    def find_match(s: Sample) -> tuple[Optional[Sample], str]:
        hit = test_hashes.get(s.content_hash)
        if hit is not None:
            return hit, "exact-pixel-hash"
        if mode == "perceptual":
            for t in test:
                dist = hamming(s.phash, t.phash)
                if dist <= hamming_threshold:
                    return t, f"perceptual-hamming-{dist}"
        return None, ""

    kept: list[Sample] = []
    report = list(manifest.dedup_report)
    for s in manifest.samples:
        if s.split == "test":
            kept.append(s)
            continue
        match, reason = find_match(s)
        if match is None:
            kept.append(s)
        else:
            report.append({"removed": s.image_path, "split": s.split,
                           "source": s.source, "matched_test": match.image_path,
                           "reason": reason})
    return DatasetManifest(samples=kept,
                           provenance=manifest.provenance + [f"dedup mode={mode}"],
                           dedup_report=report)


def merge_datasets(manifests: Iterable[DatasetManifest],
                   eval_source: Optional[str] = None,
                   dedup_mode: str = "exact") -> DatasetManifest:
    """Pool train/val across sources, keep exactly one test split, then dedup.

    With several sources carrying a test split, ``eval_source`` must name the
    one whose test split defines evaluation.
    """
    manifests = list(manifests)
    if not manifests:
        raise DataError("merge needs at least one manifest")
    test_sources = sorted({s.source for m in manifests for s in m.samples if s.split == "test"})
    if eval_source is None:
        if len(test_sources) > 1:
            raise DataError("multiple sources have test splits "
                            f"({', '.join(test_sources)}); pass eval_source to pick one")
        eval_source = test_sources[0] if test_sources else None
    elif eval_source not in test_sources:
        raise DataError(f"eval_source {eval_source!r} has no test split "
                        f"(available: {', '.join(test_sources) or 'none'})")
    samples: list[Sample] = []
    provenance: list[str] = []
    for m in manifests:
        provenance.extend(m.provenance)
        for s in m.samples:
            if s.split == "test" and s.source != eval_source:
                continue
            samples.append(s)
    merged = DatasetManifest(samples=samples, provenance=provenance)
    return dedup_cross_split(merged, mode=dedup_mode)


def assert_disjoint(manifest: DatasetManifest) -> None:
    """Raise unless train/val and test share no content hash."""
    trainval = {s.content_hash for s in manifest.samples if s.split != "test"}
    test = {s.content_hash for s in manifest.samples if s.split == "test"}
    overlap = trainval & test
    if overlap:
        raise DataError(f"{len(overlap)} content hashes appear in both train/val and test")


# ---------------------------------------------------------------------------
# Model input


def to_model_input(image: np.ndarray) -> np.ndarray:
    """(H,W,3) uint8 -> (3,H,W) float32 standardized to [-1, 1]."""
    x = image.astype(np.float32) / 255.0
    return ((x - 0.5) / 0.5).transpose(2, 0, 1)


# ---------------------------------------------------------------------------
# Augmentation


def hflip(image: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return image[:, ::-1].copy(), mask[:, ::-1].copy()


def random_resized_crop(image: np.ndarray, mask: np.ndarray,
                        rng: np.random.Generator,
                        scale=(0.7, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    h, w = mask.shape
    s = rng.uniform(*scale)
    ch = max(1, round(h * np.sqrt(s)))
    cw = max(1, round(w * np.sqrt(s)))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    img_c = image[top:top + ch, left:left + cw]
    mask_c = mask[top:top + ch, left:left + cw]
    img_r = Image.fromarray(img_c).resize((w, h), Image.BILINEAR)
    mask_r = Image.fromarray(mask_c * 255).resize((w, h), Image.NEAREST)
    return np.asarray(img_r, dtype=np.uint8), (np.asarray(mask_r) >= 128).astype(np.uint8)


def photometric_jitter(image: np.ndarray, rng: np.random.Generator,
                       limit: float = 0.2) -> np.ndarray:
    brightness = rng.uniform(1 - limit, 1 + limit)
    contrast = rng.uniform(1 - limit, 1 + limit)
    x = image.astype(np.float32) * brightness
    x = (x - 128.0) * contrast + 128.0
    return np.clip(x, 0, 255).astype(np.uint8)


def augment(image: np.ndarray, mask: np.ndarray, seed) -> tuple[np.ndarray, np.ndarray]:
    """Seed-deterministic transform: shared geometry, image-only photometry.

    ``seed`` is anything ``np.random.default_rng`` accepts (int or int list).
    """
    rng = np.random.default_rng(seed)
    if rng.random() < 0.5:
        image, mask = hflip(image, mask)
    image, mask = random_resized_crop(image, mask, rng)
    image = photometric_jitter(image, rng)
    return image, mask
