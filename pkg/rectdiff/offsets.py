"""
Separable weight offsets: a per-layer offset Δ stored as two slim factors whose
broadcast product is the full kernel-shaped offset.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError


@dataclass
class SeparableOffset:
    """Offset factors for one layer.

    factor_in is (kh, kw, Cin, 1) and factor_out is (kh, kw, 1, Cout); both may
    carry a leading batch axis when offsets are emitted per sample.
    """
    layer_id: str
    factor_in: Tensor
    factor_out: Tensor

    @property
    def batched(self) -> bool:
        return self.factor_in.data.ndim == 5

    @property
    def kernel_shape(self) -> Tuple[int, int, int, int]:
        kh, kw, cin, _ = self.factor_in.shape[-4:]
        cout = self.factor_out.shape[-1]
        return cout, cin, kh, kw

    def parameter_count(self) -> int:
        kh, kw, cin, _ = self.factor_in.shape[-4:]
        return kh * kw * cin + kh * kw * self.factor_out.shape[-1]


def materialize_offset(o: SeparableOffset) -> Tensor:
    """Δ[kh,kw,Cin,Cout] = factor_in ⊙ factor_out, returned as (Cout,Cin,kh,kw).

    Batched factors give (B,Cout,Cin,kh,kw).
    """
    fin, fout = o.factor_in, o.factor_out
    nd = fin.data.ndim
    if nd not in (4, 5) or fout.data.ndim != nd or fin.shape[-1] != 1 or fout.shape[-2] != 1 \
            or fin.shape[:-2] != fout.shape[:-2]:
        raise ShapeError.mismatch(f"materialize_offset[{o.layer_id}]", fin.shape, fout.shape)
    full = fin.shape[:-1] + (fout.shape[-1],)
    delta = ad.mul(ad.expand(fin, full), ad.expand(fout, full))
    axes = (0, 4, 3, 1, 2) if nd == 5 else (3, 2, 0, 1)
    return ad.transpose(delta, axes)


def full_offset_count(kernel_shape: Tuple[int, int, int, int]) -> int:
    cout, cin, kh, kw = kernel_shape
    return kh * kw * cin * cout


def separable_offset_count(kernel_shape: Tuple[int, int, int, int]) -> int:
    cout, cin, kh, kw = kernel_shape
    return kh * kw * cin + kh * kw * cout


def slice_ranks(delta: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Rank of the Cin×Cout matrix at every kernel position of a (Cout,Cin,kh,kw) offset."""
    cout, cin, kh, kw = delta.shape
    ranks = np.zeros((kh, kw), dtype=int)
    for i in range(kh):
        for j in range(kw):
            ranks[i, j] = np.linalg.matrix_rank(delta[:, :, i, j].T, tol=tol)
    return ranks
