"""
Procedural grayscale disc images with known attributes.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import container
from .errors import ContainerError, DatasetError
from .pgm import dump_images

logger = logging.getLogger(__name__)

ATTRIBUTE_COLUMNS = ["radius", "intensity", "center_x", "center_y", "background", "seed"]

# ranges for a 16×16 image; geometric ranges scale with the image size
RADIUS_RANGE = (2.0, 6.0)
INTENSITY_RANGE = (0.3, 1.0)
CENTER_RANGE = (5.0, 11.0)
BACKGROUND_RANGE = (-1.0, -0.6)
REFERENCE_SIZE = 16


@dataclass
class ToySample:
    image: np.ndarray
    radius: float
    intensity: float
    center_x: float
    center_y: float
    background: float
    seed: int

    def attributes(self) -> Tuple[float, ...]:
        return (self.radius, self.intensity, self.center_x, self.center_y, self.background, float(self.seed))


def smoothstep(edge0: float, edge1: float, x: np.ndarray) -> np.ndarray:
    u = np.clip((x - edge0) / (edge1 - edge0), 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def render_disc(size: int, radius: float, intensity: float, center: Tuple[float, float],
                background: float) -> np.ndarray:
    """A (1, size, size) disc of mass ``intensity`` on a flat background.

    The edge is a smoothstep of the signed distance over one pixel, centred on
    the nominal radius. Pixel values are ``2·intensity − 1`` inside.
    """
    rows, cols = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    dist = np.sqrt((cols - center[0]) ** 2 + (rows - center[1]) ** 2)
    coverage = 1.0 - smoothstep(radius - 0.5, radius + 0.5, dist)
    peak = 2.0 * intensity - 1.0
    image = background + (peak - background) * coverage
    return np.clip(image, -1.0, 1.0)[None]


def generate(seed: int, n: int, image_size: int = REFERENCE_SIZE) -> List[ToySample]:
    """Draw ``n`` samples from a generator seeded with ``seed``."""
    if n < 1:
        raise DatasetError(f"generate needs n >= 1, got {n}")
    rng = np.random.default_rng(seed)
    k = image_size / REFERENCE_SIZE
    samples = []
    for _ in range(n):
        radius = rng.uniform(*RADIUS_RANGE) * k
        intensity = rng.uniform(*INTENSITY_RANGE)
        cx, cy = rng.uniform(CENTER_RANGE[0] * k, CENTER_RANGE[1] * k, size=2)
        background = rng.uniform(*BACKGROUND_RANGE)
        sample_seed = int(rng.integers(2 ** 31))
        image = render_disc(image_size, radius, intensity, (cx, cy), background)
        samples.append(ToySample(image, radius, intensity, float(cx), float(cy), background, sample_seed))
    return samples


def regenerate(sample: ToySample) -> np.ndarray:
    size = sample.image.shape[-1]
    return render_disc(size, sample.radius, sample.intensity, (sample.center_x, sample.center_y), sample.background)


@dataclass
class ToyDataset:
    images: np.ndarray
    attributes: pd.DataFrame

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    @classmethod
    def from_samples(cls, samples: Sequence[ToySample]) -> "ToyDataset":
        if not samples:
            raise DatasetError("dataset needs at least one sample")
        images = np.stack([s.image for s in samples])
        table = pd.DataFrame([s.attributes() for s in samples], columns=ATTRIBUTE_COLUMNS)
        table["seed"] = table["seed"].astype(np.int64)
        return cls(images, table)

    def subset(self, n: Optional[int]) -> "ToyDataset":
        if n is None or n >= len(self):
            return self
        return ToyDataset(self.images[:n], self.attributes.iloc[:n].reset_index(drop=True))

    def batches(self, batch_size: int):
        for start in range(0, len(self), batch_size):
            yield start, self.images[start:start + batch_size]

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        return self.images[rng.integers(0, len(self), size=batch_size)]


def make_dataset(seed: int, n: int, image_size: int = REFERENCE_SIZE) -> ToyDataset:
    return ToyDataset.from_samples(generate(seed, n, image_size))


def split_seed(seed: int, split: str) -> int:
    """Independent generator seed per named split."""
    salt = {"train": 0, "edit": 1, "heldout": 2}[split]
    return int(np.random.SeedSequence([seed, salt]).generate_state(1)[0])


def to_container(ds: ToyDataset) -> container.Container:
    c = container.Container("dataset", meta={
        "n": str(len(ds)),
        "image_size": str(ds.image_size),
        "columns": ",".join(ATTRIBUTE_COLUMNS),
    })
    c.add("images", "images", ds.images)
    c.add("attributes", "table", ds.attributes[ATTRIBUTE_COLUMNS].to_numpy(dtype=np.float64))
    return c


def save_dataset(path: str, ds: ToyDataset) -> str:
    return container.save(path, to_container(ds))


def from_container(c: container.Container) -> ToyDataset:
    if c.meta.get("columns") != ",".join(ATTRIBUTE_COLUMNS):
        raise ContainerError(f"dataset attribute columns {c.meta.get('columns')!r} not recognized")
    images = c.array("images")
    table = pd.DataFrame(c.array("attributes"), columns=ATTRIBUTE_COLUMNS)
    if len(table) != len(images) or str(len(images)) != c.meta.get("n"):
        raise ContainerError(f"dataset has {len(images)} images, {len(table)} attribute rows, "
                             f"header says {c.meta.get('n')}")
    table["seed"] = table["seed"].astype(np.int64)
    return ToyDataset(images, table)


def load_dataset(path: str) -> ToyDataset:
    return from_container(container.load(path, expected_kind="dataset"))


def export_pgm(ds: ToyDataset, directory: str, prefix: str = "sample", limit: Optional[int] = None) -> List[str]:
    n = len(ds) if limit is None else min(limit, len(ds))
    return dump_images(directory, prefix, ds.images[:n])
