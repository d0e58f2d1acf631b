"""
Adam with decoupled weight decay and a step-decay learning-rate schedule.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .autodiff import Tensor
from .errors import ShapeError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Moment accumulators plus the hyperparameters of one optimizer.

    The effective learning rate is ``lr * lr_decay ** (step // lr_decay_every)``.
    """
    m: List[np.ndarray]
    v: List[np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    lr_decay: float = 0.9
    lr_decay_every: int = 5000
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **hyper,
        )

    def current_lr(self, step: Optional[int] = None) -> float:
        step = self.step if step is None else step
        return self.lr * self.lr_decay ** (step // max(self.lr_decay_every, 1))


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Optional[Sequence[Optional[np.ndarray]]] = None) -> float:
    """Apply one update in place and return the learning rate that was used.

    ``grads`` defaults to each parameter's ``.grad``; a missing gradient counts
    as zero.
    """
    if len(params) != len(state.m):
        raise ShapeError(f"adam_step: state tracks {len(state.m)} tensors, got {len(params)}")
    if grads is None:
        grads = [p.grad for p in params]
    lr = state.current_lr()
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or state.m[i].shape != p.data.shape:
            raise ShapeError.mismatch(f"adam_step[{p.name or i}]", p.data.shape, g.shape)
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        update = (state.m[i] / bc1) / (np.sqrt(state.v[i] / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        p.data = p.data - lr * update
    if t > 1 and (t - 1) % max(state.lr_decay_every, 1) == 0:
        logger.debug("adam step %d: lr decayed to %.3e", t, lr)
    return lr
