"""Real image sets, class-balanced sampling and synthetic-set initialization.

Real data lives in numpy arrays of shape ``(N, C, H, W)`` with values in
``[0, 1]``. The learnable synthetic set keeps its pixels in a torch tensor so
the engine can optimize them directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, ContractError, IngestionError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp", ".ppm", ".pgm"}


def _build_class_index(labels: np.ndarray) -> dict[int, np.ndarray]:
    return {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}


@dataclass
class LabeledImageSet:
    images: np.ndarray
    labels: np.ndarray
    name: str = "unnamed"
    class_names: list[str] | None = None
    class_index: dict[int, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ContractError(f"images must be 4-D (N, C, H, W), got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ContractError("labels must have one entry per image")
        if not np.all(np.isfinite(self.images)) or self.images.min(initial=0.0) < 0 or self.images.max(initial=0.0) > 1:
            raise ContractError("pixel values must be finite and within [0, 1]")
        self.class_index = _build_class_index(self.labels)
        n_classes = self.num_classes
        if sorted(self.class_index) != list(range(n_classes)):
            raise ContractError("every class id in [0, C) must appear at least once")

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def __len__(self):
        return len(self.labels)

    def subset(self, classes: Sequence[int], relabel: bool = False) -> "LabeledImageSet":
        """Restrict to ``classes``; with ``relabel`` ids become positions in ``classes``."""
        classes = [int(c) for c in classes]
        idx = np.concatenate([self.class_index[c] for c in classes])
        labels = self.labels[idx]
        if relabel:
            remap = {c: i for i, c in enumerate(classes)}
            labels = np.array([remap[int(y)] for y in labels], dtype=np.int64)
        return LabeledImageSet(self.images[idx], labels, name=self.name)


@dataclass
class SyntheticDataset:
    """C classes times ``ipc`` images; only ``pixels`` ever change."""

    pixels: torch.Tensor
    labels: np.ndarray
    ipc: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.int64)
        labels.setflags(write=False)
        self.labels = labels
        if self.pixels.shape[0] != len(labels):
            raise ContractError("pixels and labels disagree in length")
        n_classes = len(labels) // self.ipc if self.ipc > 0 else 0
        expected = np.repeat(np.arange(n_classes), self.ipc)
        if self.ipc < 1 or len(labels) != n_classes * self.ipc or not np.array_equal(labels, expected):
            raise ContractError("labels must assign exactly ipc consecutive entries to each class")

    @property
    def num_classes(self) -> int:
        return len(self.labels) // self.ipc

    def class_pixels(self, class_id: int) -> torch.Tensor:
        return self.pixels[class_id * self.ipc:(class_id + 1) * self.ipc]

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return self.pixels.detach().cpu().numpy().astype(np.float32), np.array(self.labels)


@dataclass
class ClassBatch:
    class_id: int
    images: np.ndarray
    indices: np.ndarray

    @property
    def B(self) -> int:
        return len(self.indices)


def _check_shape(image_shape) -> tuple[int, int, int]:
    shape = tuple(int(s) for s in image_shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ConfigError(f"image_shape must be (channels, height, width) with positive entries, got {image_shape}")
    return shape


def make_gaussian_class_dataset(
    C: int,
    per_class: int,
    image_shape,
    template_spread: float,
    noise_sigma: float,
    seed: int,
    noise_seed: int | None = None,
    template_cells: int | None = None,
    name: str | None = None,
) -> LabeledImageSet:
    """Class ``c`` is a fixed random template plus i.i.d. Gaussian pixel noise.

    Templates are uniform in ``0.5 +/- template_spread / 2`` and derived from
    ``seed`` only, so a held-out split with identical templates is obtained by
    passing a different ``noise_seed``. ``template_cells`` draws the template
    on a coarse grid and upsamples it bilinearly, giving smooth templates.
    """
    shape = _check_shape(image_shape)
    if C < 2 or per_class < 2:
        raise ConfigError("need C >= 2 classes and per_class >= 2 samples")
    if noise_sigma <= 0:
        raise ConfigError("noise_sigma must be positive", field="noise_sigma")
    if template_spread < 0:
        raise ConfigError("template_spread must be non-negative", field="template_spread")

    template_rng = np.random.default_rng(seed)
    if template_cells:
        coarse = template_rng.uniform(-0.5, 0.5, size=(C, shape[0], template_cells, template_cells))
        grid = torch.nn.functional.interpolate(
            torch.from_numpy(coarse), size=shape[1:], mode="bilinear", align_corners=True
        ).numpy()
        templates = 0.5 + template_spread * grid
    else:
        templates = 0.5 + template_spread * template_rng.uniform(-0.5, 0.5, size=(C,) + shape)

    noise_rng = np.random.default_rng(seed if noise_seed is None else noise_seed)
    noise = noise_rng.normal(0.0, noise_sigma, size=(C, per_class) + shape)
    images = np.clip(templates[:, None] + noise, 0.0, 1.0).reshape((C * per_class,) + shape)
    labels = np.repeat(np.arange(C), per_class)
    return LabeledImageSet(images, labels, name=name or f"gaussian{C}")


def load_image_folder(path, image_shape, name: str | None = None) -> LabeledImageSet:
    """Read ``root/<class_name>/<file>``; class ids follow sorted directory names."""
    root = Path(path)
    channels, height, width = _check_shape(image_shape)
    if not root.is_dir():
        raise IngestionError(f"image folder not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) == 0:
        raise IngestionError(f"no class subdirectories under {root}")

    mode = {1: "L", 3: "RGB", 4: "RGBA"}.get(channels)
    if mode is None:
        raise ConfigError(f"unsupported channel count {channels}")

    images, labels = [], []
    for class_id, class_dir in enumerate(class_dirs):
        files = sorted(f for f in class_dir.iterdir() if f.is_file())
        if not files:
            raise IngestionError(f"empty class directory: {class_dir}")
        for f in files:
            try:
                with Image.open(f) as img:
                    img = img.convert(mode).resize((width, height), Image.BILINEAR)
                    arr = np.asarray(img, dtype=np.float32) / 255.0
            except (UnidentifiedImageError, OSError) as exc:
                raise IngestionError(f"cannot decode image {f}: {exc}") from exc
            if arr.ndim == 2:
                arr = arr[None]
            else:
                arr = arr.transpose(2, 0, 1)
            images.append(arr)
            labels.append(class_id)
    return LabeledImageSet(
        np.stack(images), np.array(labels), name=name or root.name, class_names=[d.name for d in class_dirs]
    )


def sample_class_batch(data: LabeledImageSet, class_id: int, B: int, rng: np.random.Generator) -> ClassBatch:
    """Draw ``B`` images of one class; with replacement only if the class is smaller than ``B``."""
    if class_id not in data.class_index:
        raise KeyError(f"unknown class id {class_id}")
    if B < 1:
        raise ContractError("batch size B must be >= 1")
    pool = data.class_index[class_id]
    if len(pool) < B:
        chosen = pool[rng.integers(0, len(pool), size=B)]
    else:
        chosen = pool[rng.permutation(len(pool))[:B]]
    return ClassBatch(class_id, data.images[chosen], chosen)


def init_synthetic_from_real(data: LabeledImageSet, K: int, seed: int) -> SyntheticDataset:
    if K < 1:
        raise ConfigError("ipc K must be >= 1", field="ipc")
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(data.num_classes):
        pool = data.class_index[c]
        if len(pool) < K:
            raise ConfigError(f"class {c} has {len(pool)} samples, fewer than ipc={K}", field="ipc")
        chosen.append(pool[rng.choice(len(pool), size=K, replace=False)])
    source = np.concatenate(chosen)
    pixels = torch.tensor(data.images[source]).requires_grad_(True)
    return SyntheticDataset(
        pixels,
        np.repeat(np.arange(data.num_classes), K),
        ipc=K,
        provenance={"method": "real-init", "seed": seed, "source_ids": source.tolist(), "dataset": data.name},
    )


def from_selection(data: LabeledImageSet, selected: Sequence[np.ndarray], method: str, **extra) -> SyntheticDataset:
    """Pack per-class selected indices (equal length) into a SyntheticDataset."""
    K = len(selected[0])
    if any(len(s) != K for s in selected):
        raise ContractError("every class must contribute the same number of samples")
    source = np.concatenate(selected).astype(np.int64)
    return SyntheticDataset(
        torch.tensor(data.images[source]),
        np.repeat(np.arange(len(selected)), K),
        ipc=K,
        provenance={"method": method, "source_ids": source.tolist(), "dataset": data.name, **extra},
    )
