"""
Analytic differentiable image probe and attribute directions.

The probe maps a batch of images in [-1, 1] to 10 statistics of the pixel
mass above the background, m = max(x − b, 0), where b is the mean of the
image's border pixels:

    0      intensity     mean(m)
    1, 2   centroid      (x, y) in pixel coordinates
    3      trace         μxx + μyy
    4      elongation    μxx − μyy
    5      shear         2·μxy
    6..9   radial        soft ring masses around the image center

Normalizations divide by sqrt(M² + ε²) with M the total mass, so a flat
image gives zeros and a centroid at the image center.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

EPS = 1e-8
PROBE_DIM = 10
INTENSITY, CENTROID_X, CENTROID_Y, TRACE, ELONGATION, SHEAR = range(6)


@dataclass(frozen=True)
class AttributeDirection:
    name: str
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.shape != (PROBE_DIM,):
            raise ShapeError.mismatch(f"direction {self.name}", v.shape, (PROBE_DIM,))
        norm = np.linalg.norm(v)
        if not np.isfinite(norm) or norm == 0.0:
            raise ConfigError(f"direction {self.name} has no usable norm")
        object.__setattr__(self, "vector", v / norm)


def _axis(index: int, sign: float = 1.0) -> np.ndarray:
    v = np.zeros(PROBE_DIM)
    v[index] = sign
    return v


ATTRIBUTES: Dict[str, AttributeDirection] = {
    d.name: d for d in (
        AttributeDirection("brighter", _axis(INTENSITY)),
        AttributeDirection("darker", _axis(INTENSITY, -1.0)),
        AttributeDirection("larger", _axis(TRACE)),
        AttributeDirection("smaller", _axis(TRACE, -1.0)),
        AttributeDirection("shift_right", _axis(CENTROID_X)),
    )
}


def get_direction(name: str) -> AttributeDirection:
    try:
        return ATTRIBUTES[name]
    except KeyError:
        raise ConfigError(f"unknown attribute {name!r}; known: {', '.join(sorted(ATTRIBUTES))}")


class _Grid:
    """Constant pixel-coordinate arrays for one image size."""

    def __init__(self, size: int):
        self.size = size
        self.center = (size - 1) / 2.0
        rows, cols = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64),
                                 indexing="ij")
        self.u = (cols - self.center).reshape(-1)
        self.v = (rows - self.center).reshape(-1)
        dist = np.sqrt(self.u ** 2 + self.v ** 2)
        half = size / 2.0
        radii = [half * (k + 0.75) / 4.0 for k in range(4)]
        sigma = size / 16.0
        self.rings = [np.exp(-((dist - r) ** 2) / (2.0 * sigma ** 2)) for r in radii]
        self.border = np.ones((size, size))
        self.border[1:-1, 1:-1] = 0.0
        self.border_count = float(self.border.sum())


_GRIDS: Dict[int, _Grid] = {}


def _grid(size: int) -> _Grid:
    if size not in _GRIDS:
        _GRIDS[size] = _Grid(size)
    return _GRIDS[size]


def _batched(image) -> Tensor:
    x = ad.as_tensor(image)
    if x.data.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
    if x.data.ndim != 4 or x.shape[2] != x.shape[3]:
        raise ShapeError(f"embed expects (B,C,H,H) images, got {x.shape}")
    return x


def embed(image) -> Tensor:
    """(B,C,H,H) image batch → (B,10) probe features, differentiable in pixels."""
    x = _batched(image)
    B, C, H, _ = x.shape
    if H < 3:
        raise ShapeError(f"embed needs images of at least 3×3 pixels, got {x.shape}")
    g = _grid(H)
    background = ad.div(ad.sum_(ad.mul_const(x, g.border), axis=(2, 3), keepdims=True),
                        Tensor(np.full((B, C, 1, 1), g.border_count)))
    above = ad.relu(ad.sub(x, ad.expand(background, x.shape)))
    mass = ad.mean(above, axis=1)
    m = ad.reshape(mass, (B, H * H))

    total = ad.sum_(m, axis=1)
    denom = ad.sqrt(ad.add(ad.square(total), EPS * EPS))
    intensity = ad.scale(total, 1.0 / (H * H))

    shift_x = ad.div(ad.sum_(ad.mul_const(m, g.u), axis=1), denom)
    shift_y = ad.div(ad.sum_(ad.mul_const(m, g.v), axis=1), denom)

    def centered(coord: np.ndarray, shift: Tensor) -> Tensor:
        return ad.sub(Tensor(np.tile(coord, (B, 1))), ad.expand(ad.reshape(shift, (B, 1)), (B, H * H)))

    du, dv = centered(g.u, shift_x), centered(g.v, shift_y)

    def moment(a: Tensor, b: Tensor) -> Tensor:
        return ad.div(ad.sum_(ad.mul(m, ad.mul(a, b)), axis=1), denom)

    mxx, myy, mxy = moment(du, du), moment(dv, dv), moment(du, dv)
    features: List[Tensor] = [
        intensity,
        ad.add(shift_x, g.center),
        ad.add(shift_y, g.center),
        ad.add(mxx, myy),
        ad.sub(mxx, myy),
        ad.scale(mxy, 2.0),
    ]
    features += [ad.scale(ad.sum_(ad.mul_const(m, ring), axis=1), 1.0 / (H * H)) for ring in g.rings]
    return ad.stack(features, axis=1)


def directional_loss(x_src, x_tar, direction: AttributeDirection) -> Tensor:
    """1 − cos(ΔI, ΔT) averaged over the batch, with ΔI = embed(x_tar) − embed(x_src).

    ‖ΔI‖ is guarded as sqrt(‖ΔI‖² + ε²), so ΔI = 0 gives a loss of exactly 1.
    """
    src, tar = _batched(x_src), _batched(x_tar)
    if src.shape != tar.shape:
        raise ShapeError.mismatch("directional_loss", src.shape, tar.shape)
    delta = ad.sub(embed(tar), embed(src))
    dot = ad.sum_(ad.mul_const(delta, direction.vector), axis=1)
    norm = ad.sqrt(ad.add(ad.sum_(ad.square(delta), axis=1), EPS * EPS))
    return ad.add(ad.neg(ad.mean(ad.div(dot, norm))), 1.0)


def l1_reg(x_tar, x_src) -> Tensor:
    """Mean absolute pixel difference."""
    tar, src = ad.as_tensor(x_tar), ad.as_tensor(x_src)
    if tar.shape != src.shape:
        raise ShapeError.mismatch("l1_reg", tar.shape, src.shape)
    return ad.mean(ad.abs_(ad.sub(tar, src)))


def probe_shift(x_src: np.ndarray, x_tar: np.ndarray, direction: AttributeDirection) -> np.ndarray:
    """Per-image projection of the probe change onto the attribute direction."""
    delta = embed(x_tar).data - embed(x_src).data
    return delta @ direction.vector


def off_axis_shift(x_src: np.ndarray, x_tar: np.ndarray, direction: AttributeDirection) -> np.ndarray:
    """Per-image norm of the probe change orthogonal to the attribute direction."""
    delta = embed(x_tar).data - embed(x_src).data
    along = (delta @ direction.vector)[:, None] * direction.vector[None, :]
    return np.linalg.norm(delta - along, axis=1)


def shift_cosine(x_src: np.ndarray, x_tar: np.ndarray, direction: AttributeDirection) -> np.ndarray:
    delta = embed(x_tar).data - embed(x_src).data
    return (delta @ direction.vector) / np.sqrt(np.sum(delta ** 2, axis=1) + EPS * EPS)
