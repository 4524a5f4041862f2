"""Synthetic localization corpus: textured blobs on noise with sparse boxes.

Each image is a single-channel [-1,1] field of Gaussian noise; a present
class contributes an elliptical Gaussian envelope modulating an oriented
sinusoid whose frequency and orientation are class-specific, so classes are
separable by local texture. A small annotated subset carries patch-space
boxes, and only for the boxable class range; everything else is labeled at
the image level only. Label noise flips labels only on samples that carry no
boxes, so box evidence is never contradicted.

Content and label noise draw from two independent seeded streams: the same
seed yields byte-identical images and blobs regardless of the noise rate.

Images are stored one per file (magic "PLIM", little-endian u32 height,
width, channels, then f32 pixels row-major); the manifest is a JSON file
whose "samples" array holds records {id, image_file, labels, annotated,
boxes} with per-class 0/1 label and annotation vectors and patch-coordinate
boxes.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field, asdict
from typing import List, Optional, Tuple

import numpy as np

from .losses import Annotation, annotation_from_boxes
from .metrics import pixel_box_to_patch_mask

PLIM_MAGIC = b"PLIM"
MANIFEST_NAME = "manifest.json"

# per-class texture: (cycles per pixel, orientation radians)
_CLASS_WAVES = (
    (0.12, 0.0),
    (0.20, math.pi / 6),
    (0.30, math.pi / 3),
    (0.42, math.pi / 2),
    (0.25, 2 * math.pi / 3),
    (0.35, 5 * math.pi / 6),
)


class SynthDataError(ValueError):
    def __init__(self, sample_id: Optional[str], message: str):
        self.sample_id = sample_id
        prefix = f"sample {sample_id!r}: " if sample_id else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class SynthConfig:
    count: int = 4000
    input_side: int = 64
    patch_grid: int = 8
    classes: int = 6
    boxed_classes: int = 4          # classes [0, boxed_classes) may carry boxes
    annotated_fraction: float = 0.01
    negative_fraction: float = 0.3
    label_noise: float = 0.0
    noise_sigma: float = 0.35
    blob_amplitude: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be positive")
        if self.input_side % self.patch_grid:
            raise ValueError("input_side must be a multiple of patch_grid")
        if not (0 < self.boxed_classes <= self.classes):
            raise ValueError("boxed_classes must lie in [1, classes]")
        if self.classes > len(_CLASS_WAVES):
            raise ValueError(f"at most {len(_CLASS_WAVES)} texture classes available")
        for name in ("annotated_fraction", "negative_fraction", "label_noise"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0,1]")


@dataclass
class PatchBox:
    class_id: int
    row0: int
    col0: int
    rows: int
    cols: int

    def mask(self, grid: int) -> np.ndarray:
        m = np.zeros((grid, grid), dtype=bool)
        m[self.row0:self.row0 + self.rows, self.col0:self.col0 + self.cols] = True
        return m


@dataclass
class Sample:
    id: str
    image: np.ndarray               # (H,W) float64 in [-1,1]
    labels: np.ndarray              # (K,) 0/1
    annotated: np.ndarray           # (K,) 0/1; 1 iff this class carries boxes here
    boxes: List[PatchBox] = field(default_factory=list)

    @property
    def is_annotated(self) -> bool:
        return bool(self.annotated.any())

    def annotation(self, grid: int) -> Annotation:
        return annotation_from_boxes(
            self.labels.astype(np.int8), self.annotated.astype(np.int8),
            [(b.class_id, b.row0, b.col0, b.rows, b.cols) for b in self.boxes], grid)


@dataclass
class SynthDataset:
    config: SynthConfig
    samples: List[Sample]

    def __len__(self) -> int:
        return len(self.samples)

    def annotated_indices(self) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.samples) if s.is_annotated],
                        dtype=np.int64)

    def unannotated_indices(self) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.samples) if not s.is_annotated],
                        dtype=np.int64)


# ---------------------------------------------------------------------------
# image file format


def write_image(path, image: np.ndarray) -> None:
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise SynthDataError(None, f"image must be (H,W) or (H,W,C), got {arr.shape}")
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(PLIM_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(arr.astype("<f4").tobytes())


def read_image(path, sample_id: Optional[str] = None) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise SynthDataError(sample_id, f"cannot read image file {path}: {exc}") from exc
    if len(blob) < 16 or blob[:4] != PLIM_MAGIC:
        raise SynthDataError(sample_id, f"{path} is not an image file (bad magic)")
    h, w, c = struct.unpack("<III", blob[4:16])
    expected = 16 + 4 * h * w * c
    if len(blob) != expected:
        raise SynthDataError(sample_id, f"{path}: expected {expected} bytes, found {len(blob)}")
    arr = np.frombuffer(blob[16:], dtype="<f4").reshape(h, w, c).astype(np.float64)
    return arr[:, :, 0] if c == 1 else arr


# ---------------------------------------------------------------------------
# generation


def _render_blob(image: np.ndarray, rng: np.random.Generator, class_id: int,
                 amplitude: float) -> Tuple[int, int, int, int]:
    """Paint one textured blob; returns its pixel bbox (row0, col0, rows, cols)."""
    side = image.shape[0]
    rows_px = int(rng.integers(10, 18))
    cols_px = int(rng.integers(10, 18))
    r0 = int(rng.integers(0, side - rows_px + 1))
    c0 = int(rng.integers(0, side - cols_px + 1))
    center_r = r0 + rows_px / 2.0
    center_c = c0 + cols_px / 2.0
    rr, cc = np.mgrid[0:side, 0:side]
    env = np.exp(-(((rr - center_r) / (rows_px / 3.5)) ** 2
                   + ((cc - center_c) / (cols_px / 3.5)) ** 2))
    freq, theta = _CLASS_WAVES[class_id]
    phase = rng.uniform(0.0, 2 * math.pi)
    wave = np.cos(2 * math.pi * freq * (rr * math.cos(theta) + cc * math.sin(theta)) + phase)
    image += amplitude * env * wave
    return r0, c0, rows_px, cols_px


def _pixel_bbox_to_patch_box(class_id: int, bbox: Tuple[int, int, int, int],
                             side: int, grid: int) -> PatchBox:
    mask = pixel_box_to_patch_mask(*bbox, input_side=side, grid=grid)
    rows_any = np.flatnonzero(mask.any(axis=1))
    cols_any = np.flatnonzero(mask.any(axis=0))
    return PatchBox(class_id=class_id, row0=int(rows_any[0]), col0=int(cols_any[0]),
                    rows=int(rows_any[-1] - rows_any[0] + 1),
                    cols=int(cols_any[-1] - cols_any[0] + 1))


def generate(cfg: SynthConfig, out_dir) -> SynthDataset:
    """Deterministically generate the corpus and write it under out_dir."""
    rng = np.random.default_rng([cfg.seed, 0])       # content stream
    rng_noise = np.random.default_rng([cfg.seed, 1])  # label-noise stream
    os.makedirs(out_dir, exist_ok=True)

    samples: List[Sample] = []
    blob_boxes: List[List[PatchBox]] = []
    for i in range(cfg.count):
        sid = f"img_{i:05d}"
        image = rng.normal(0.0, cfg.noise_sigma, (cfg.input_side, cfg.input_side))
        labels = np.zeros(cfg.classes, dtype=np.int8)
        boxes: List[PatchBox] = []
        if rng.random() >= cfg.negative_fraction:
            n_present = 1 + int(rng.random() < 0.35)
            present = rng.choice(cfg.classes, size=n_present, replace=False)
            for k in present:
                labels[k] = 1
                n_blobs = 1 + int(rng.random() < 0.15)
                for _ in range(n_blobs):
                    bbox = _render_blob(image, rng, int(k), cfg.blob_amplitude)
                    boxes.append(_pixel_bbox_to_patch_box(int(k), bbox, cfg.input_side,
                                                          cfg.patch_grid))
        np.clip(image, -1.0, 1.0, out=image)
        samples.append(Sample(id=sid, image=image, labels=labels,
                              annotated=np.zeros(cfg.classes, dtype=np.int8), boxes=[]))
        blob_boxes.append(boxes)

    # boxes become visible only on the annotated subset, boxable classes only
    eligible = [i for i, bx in enumerate(blob_boxes)
                if any(b.class_id < cfg.boxed_classes for b in bx)]
    n_ann = min(len(eligible), round(cfg.annotated_fraction * cfg.count))
    chosen = rng.choice(len(eligible), size=n_ann, replace=False) if n_ann else []
    for j in chosen:
        s = samples[eligible[int(j)]]
        s.boxes = [b for b in blob_boxes[eligible[int(j)]] if b.class_id < cfg.boxed_classes]
        for b in s.boxes:
            s.annotated[b.class_id] = 1

    # label noise, box-free samples only; one uniform per (sample, class) so
    # the flip pattern at a lower rate nests inside the higher-rate pattern
    for s in samples:
        draws = rng_noise.random(cfg.classes)
        if not s.boxes:
            flip = draws < cfg.label_noise
            s.labels = np.where(flip, 1 - s.labels, s.labels).astype(np.int8)

    manifest = {"format": "patchloc-synth", "version": 1,
                "config": asdict(cfg), "samples": []}
    for s in samples:
        fname = s.id + ".plim"
        write_image(os.path.join(out_dir, fname), s.image)
        manifest["samples"].append({
            "id": s.id,
            "image_file": fname,
            "labels": [int(v) for v in s.labels],
            "annotated": [int(v) for v in s.annotated],
            "boxes": [{"class": b.class_id, "row0": b.row0, "col0": b.col0,
                       "rows": b.rows, "cols": b.cols} for b in s.boxes],
        })
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return SynthDataset(config=cfg, samples=samples)


# ---------------------------------------------------------------------------
# loading with validation


def _require(cond: bool, sid: Optional[str], msg: str) -> None:
    if not cond:
        raise SynthDataError(sid, msg)


def load(data_dir) -> SynthDataset:
    """Load a generated corpus, validating structure sample by sample."""
    mpath = os.path.join(data_dir, MANIFEST_NAME)
    try:
        with open(mpath, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise SynthDataError(None, f"cannot read manifest {mpath}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SynthDataError(None, f"manifest {mpath} is not valid JSON: {exc}") from exc

    _require(manifest.get("format") == "patchloc-synth", None,
             f"manifest format {manifest.get('format')!r} unsupported")
    _require(manifest.get("version") == 1, None,
             f"manifest version {manifest.get('version')!r} unsupported")
    try:
        cfg = SynthConfig(**manifest["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SynthDataError(None, f"bad config block: {exc}") from exc

    grid = cfg.patch_grid
    samples: List[Sample] = []
    seen = set()
    for entry in manifest.get("samples", []):
        sid = entry.get("id")
        _require(isinstance(sid, str) and bool(sid), None, "sample entry without id")
        _require(sid not in seen, sid, "duplicate sample id")
        seen.add(sid)

        labels = entry.get("labels")
        annotated = entry.get("annotated")
        for name, vec in (("labels", labels), ("annotated", annotated)):
            _require(isinstance(vec, list) and len(vec) == cfg.classes, sid,
                     f"{name} must be a list of {cfg.classes} flags")
            _require(all(v in (0, 1) for v in vec), sid, f"{name} must be 0/1")
        for k in range(cfg.classes):
            _require(not (annotated[k] and not labels[k]), sid,
                     f"class {k} annotated but label is 0")
            _require(not annotated[k] or k < cfg.boxed_classes, sid,
                     f"class {k} annotated but only {cfg.boxed_classes} classes are boxable")

        boxes = []
        boxed_class_seen = np.zeros(cfg.classes, dtype=bool)
        for b in entry.get("boxes", []):
            try:
                box = PatchBox(class_id=int(b["class"]), row0=int(b["row0"]),
                               col0=int(b["col0"]), rows=int(b["rows"]), cols=int(b["cols"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise SynthDataError(sid, f"malformed box entry {b!r}") from exc
            _require(0 <= box.class_id < cfg.classes, sid,
                     f"box class {box.class_id} out of range")
            _require(box.rows >= 1 and box.cols >= 1, sid, "box extents must be positive")
            _require(0 <= box.row0 and box.row0 + box.rows <= grid
                     and 0 <= box.col0 and box.col0 + box.cols <= grid, sid,
                     f"box ({box.row0},{box.col0},{box.rows},{box.cols}) outside {grid}x{grid} grid")
            _require(annotated[box.class_id] == 1, sid,
                     f"box present for class {box.class_id} but annotated flag is 0")
            boxed_class_seen[box.class_id] = True
            boxes.append(box)
        for k in range(cfg.classes):
            _require(not annotated[k] or boxed_class_seen[k], sid,
                     f"class {k} annotated but carries no box")

        image = read_image(os.path.join(data_dir, entry.get("image_file", sid + ".plim")), sid)
        _require(image.shape == (cfg.input_side, cfg.input_side), sid,
                 f"image shape {image.shape}, expected {(cfg.input_side, cfg.input_side)}")
        samples.append(Sample(id=sid, image=image,
                              labels=np.asarray(labels, dtype=np.int8),
                              annotated=np.asarray(annotated, dtype=np.int8), boxes=boxes))

    _require(len(samples) == cfg.count, None,
             f"manifest lists {len(samples)} samples, config says {cfg.count}")
    return SynthDataset(config=cfg, samples=samples)
