"""
Noise schedules, forward diffusion, DDIM stepping/inversion, DDPM ancestral
stepping, the x0-estimator and true/predicted posterior means.

All kernel functions are pure. They accept numpy arrays or autodiff Tensors;
when any operand is a Tensor the result is taped so losses can flow through
``estimate_x0`` and friends. The step index ``t`` is either an int or an
integer array with one entry per batch sample. Index 0 denotes clean data
(ᾱ_0 = 1); valid model steps are 1..T.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DatasetError, IndexRangeError, ShapeError

logger = logging.getLogger(__name__)

Array = Union[np.ndarray, Tensor]
StepIndex = Union[int, np.ndarray]
EpsFn = Callable[[np.ndarray, StepIndex], np.ndarray]
ConditionalEpsFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances and cumulative products, indexed 0..T.

    Entry 0 is the clean-data convention: beta[0] = 0, alpha_bar[0] = 1.
    """
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sqrt_alpha_bar: np.ndarray
    sqrt_one_minus_alpha_bar: np.ndarray

    @classmethod
    def from_betas(cls, betas: Sequence[float]) -> "NoiseSchedule":
        beta = np.concatenate([[0.0], np.asarray(betas, dtype=np.float64)])
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        return cls(
            T=len(beta) - 1,
            beta=beta,
            alpha=alpha,
            alpha_bar=alpha_bar,
            sqrt_alpha_bar=np.sqrt(alpha_bar),
            sqrt_one_minus_alpha_bar=np.sqrt(1.0 - alpha_bar),
        )


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear β from ``beta_start`` at t=1 to ``beta_end`` at t=T."""
    if T < 2:
        raise IndexRangeError(f"schedule needs T >= 2, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise IndexRangeError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T))


def default_schedule(T: int = 100) -> NoiseSchedule:
    """Linear schedule rescaled from the 1000-step DDPM endpoints."""
    return make_linear_schedule(T, 1e-4 * 1000.0 / T, 0.02 * 1000.0 / T)


def uniform_step_indices(T: int, n: int) -> List[int]:
    """Evenly spaced ascending indices in 1..T, always containing 1 and T when n >= 2."""
    if n < 0 or n > T:
        raise IndexRangeError(f"step count must lie in 0..{T}, got {n}")
    if n == 0:
        return []
    if n == 1:
        return [T]
    return [int(i) for i in np.round(np.linspace(1, T, n)).astype(int)]


@dataclass
class TrajectoryRecord:
    """Latents and x0-estimates from one sampling or inversion run.

    ``step_indices`` includes the clean endpoint 0, first for inversion and
    last for sampling.
    """
    step_indices: List[int] = field(default_factory=list)
    latents: List[np.ndarray] = field(default_factory=list)
    x0_estimates: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not len(self.step_indices) == len(self.latents) == len(self.x0_estimates):
            raise ShapeError("trajectory lists must share length")
        diffs = np.diff(self.step_indices)
        if len(diffs) and not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise IndexRangeError(f"trajectory indices not strictly monotone: {self.step_indices}")

    def append(self, t: int, latent: np.ndarray, x0_est: np.ndarray) -> None:
        if self.step_indices:
            prev_dir = np.sign(self.step_indices[-1] - self.step_indices[0]) if len(self.step_indices) > 1 else 0
            step_dir = np.sign(t - self.step_indices[-1])
            if step_dir == 0 or (prev_dir and step_dir != prev_dir):
                raise IndexRangeError(f"index {t} breaks monotone trajectory {self.step_indices}")
        self.step_indices.append(int(t))
        self.latents.append(latent)
        self.x0_estimates.append(x0_est)

    @property
    def final(self) -> np.ndarray:
        return self.latents[-1]

    def __len__(self) -> int:
        return len(self.step_indices)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _check_t(t: StepIndex, s: NoiseSchedule, lo: int = 1) -> None:
    arr = np.asarray(t)
    if arr.dtype.kind not in "iu":
        raise IndexRangeError(f"step index must be integral, got {arr.dtype}")
    if arr.size and (arr.min() < lo or arr.max() > s.T):
        raise IndexRangeError(f"step index {t} outside {lo}..{s.T}")


def _coef(table: np.ndarray, t: StepIndex, ndim: int):
    if np.ndim(t) == 0:
        return float(table[int(t)])
    return table[np.asarray(t)].reshape((-1,) + (1,) * (ndim - 1))


def _lin(a: Array, ca, b: Array, cb) -> Array:
    """ca·a + cb·b with scalar or per-sample coefficients."""
    if a.shape != b.shape:
        raise ShapeError.mismatch("diffusion", a.shape, b.shape)
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        a, b = ad.as_tensor(a), ad.as_tensor(b)
        return ad.add(_scaled(a, ca), _scaled(b, cb))
    return ca * a + cb * b


def _scaled(x: Tensor, c) -> Tensor:
    return ad.scale(x, c) if isinstance(c, float) else ad.mul_const(x, c)


def _divide(x: Array, c) -> Array:
    if isinstance(x, Tensor):
        return ad.scale(x, 1.0 / c) if isinstance(c, float) else ad.mul_const(x, 1.0 / c)
    return x / c


# ---------------------------------------------------------------------------
# forward process and estimator
# ---------------------------------------------------------------------------

def forward_noise(x0: Array, t: StepIndex, eps: Array, s: NoiseSchedule) -> Array:
    """x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·eps."""
    _check_t(t, s)
    nd = len(x0.shape)
    return _lin(x0, _coef(s.sqrt_alpha_bar, t, nd), eps, _coef(s.sqrt_one_minus_alpha_bar, t, nd))


def _estimate(x_t: Array, eps_hat: Array, t: StepIndex, s: NoiseSchedule) -> Array:
    nd = len(x_t.shape)
    return _divide(_lin(x_t, 1.0, eps_hat, -_coef(s.sqrt_one_minus_alpha_bar, t, nd)),
                   _coef(s.sqrt_alpha_bar, t, nd))


def estimate_x0(x_t: Array, eps_hat: Array, t: StepIndex, s: NoiseSchedule) -> Array:
    """P_t[ε] = (x_t − √(1−ᾱ_t)·ε)/√ᾱ_t, the DDIM clean-image estimate."""
    _check_t(t, s)
    return _estimate(x_t, eps_hat, t, s)


def _ddim_move(x: Array, eps_hat: Array, t_from: StepIndex, t_to: StepIndex, s: NoiseSchedule) -> Array:
    x0_est = _estimate(x, eps_hat, t_from, s)
    nd = len(x.shape)
    return _lin(x0_est, _coef(s.sqrt_alpha_bar, t_to, nd), eps_hat, _coef(s.sqrt_one_minus_alpha_bar, t_to, nd))


def ddim_step(x_t: Array, eps_hat: Array, t: int, t_prev: int, s: NoiseSchedule) -> Array:
    """Deterministic (η=0) DDIM update from t down to t_prev (0 allowed)."""
    _check_t(t, s)
    _check_t(t_prev, s, lo=0)
    if not t_prev < t:
        raise IndexRangeError(f"ddim_step needs t_prev < t, got t={t}, t_prev={t_prev}")
    return _ddim_move(x_t, eps_hat, t, t_prev, s)


def ddim_invert_step(x_s: Array, eps_hat: Array, s_idx: int, t: int, s: NoiseSchedule) -> Array:
    """The DDIM update run in reverse-time direction, from s_idx up to t."""
    _check_t(s_idx, s, lo=0)
    _check_t(t, s)
    if not t > s_idx:
        raise IndexRangeError(f"inversion needs t > s, got s={s_idx}, t={t}")
    return _ddim_move(x_s, eps_hat, s_idx, t, s)


def _check_ascending(step_indices: Sequence[int], s: NoiseSchedule) -> List[int]:
    steps = [int(i) for i in step_indices]
    if steps:
        _check_t(np.asarray(steps), s)
        if np.any(np.diff(steps) <= 0):
            raise IndexRangeError(f"step indices must be strictly ascending, got {steps}")
    return steps


def ddim_invert(x0: np.ndarray, eps_fn: EpsFn, step_indices: Sequence[int], s: NoiseSchedule) -> TrajectoryRecord:
    """Map x0 to a latent by running DDIM upward through ``step_indices``.

    The move s → t uses ε̂(x_s, t); the clean image has no model step of its own.
    """
    steps = _check_ascending(step_indices, s)
    record = TrajectoryRecord([0], [x0], [x0])
    x, prev = x0, 0
    for t in steps:
        eps_hat = eps_fn(x, t)
        record.append(t, ddim_invert_step(x, eps_hat, prev, t, s), _estimate(x, eps_hat, prev, s))
        x, prev = record.final, t
    return record


def ddim_sample(x_T: np.ndarray, eps_fn: EpsFn, step_indices: Sequence[int], s: NoiseSchedule) -> TrajectoryRecord:
    """Deterministic DDIM sampling down through ``step_indices`` (ascending) to 0."""
    steps = _check_ascending(step_indices, s)
    if not steps:
        return TrajectoryRecord([0], [x_T], [x_T])
    down = steps[::-1] + [0]
    record = TrajectoryRecord()
    x = x_T
    for t, t_prev in zip(down[:-1], down[1:]):
        eps_hat = eps_fn(x, t)
        record.append(t, x, _estimate(x, eps_hat, t, s))
        x = ddim_step(x, eps_hat, t, t_prev, s)
    record.append(0, x, x)
    return record


# ---------------------------------------------------------------------------
# posterior means and DDPM
# ---------------------------------------------------------------------------

def _posterior_coefs(t: StepIndex, s: NoiseSchedule, nd: int):
    t_arr = np.asarray(t)
    prev = t_arr - 1
    ab_t, ab_prev = s.alpha_bar[t_arr], s.alpha_bar[prev]
    c_x0 = np.sqrt(ab_prev) * s.beta[t_arr] / (1.0 - ab_t)
    c_xt = np.sqrt(s.alpha[t_arr]) * (1.0 - ab_prev) / (1.0 - ab_t)
    if np.ndim(t) == 0:
        return float(c_x0), float(c_xt)
    shape = (-1,) + (1,) * (nd - 1)
    return c_x0.reshape(shape), c_xt.reshape(shape)


def posterior_mean_true(x0: Array, x_t: Array, t: StepIndex, s: NoiseSchedule) -> Array:
    """Mean of q(x_{t−1} | x_t, x0)."""
    _check_t(t, s)
    c_x0, c_xt = _posterior_coefs(t, s, len(x_t.shape))
    return _lin(x0, c_x0, x_t, c_xt)


def posterior_mean_predicted(x_t: Array, eps_hat: Array, t: StepIndex, s: NoiseSchedule) -> Array:
    """Posterior mean with x0 replaced by the estimate P_t[ε̂]."""
    _check_t(t, s)
    return posterior_mean_true(_estimate(x_t, eps_hat, t, s), x_t, t, s)


def posterior_sigma(t: int, s: NoiseSchedule) -> float:
    return float(np.sqrt(s.beta[t] * (1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t])))


def ddpm_step(x_t: Array, eps_hat: Array, t: int, s: NoiseSchedule, noise: Array) -> Array:
    """Ancestral update: predicted posterior mean plus σ_t·noise (no noise at t=1)."""
    _check_t(t, s)
    if noise.shape != x_t.shape:
        raise ShapeError.mismatch("ddpm_step", x_t.shape, noise.shape)
    mean_ = posterior_mean_predicted(x_t, eps_hat, t, s)
    if int(t) == 1:
        return mean_
    return _lin(mean_, 1.0, noise, posterior_sigma(int(t), s))


def ddpm_sample(x_T: np.ndarray, eps_fn: EpsFn, s: NoiseSchedule, rng: np.random.Generator) -> TrajectoryRecord:
    """Full ancestral chain T..1 with noise drawn from ``rng``."""
    record = TrajectoryRecord()
    x = x_T
    for t in range(s.T, 0, -1):
        eps_hat = eps_fn(x, t)
        record.append(t, x, _estimate(x, eps_hat, t, s))
        x = ddpm_step(x, eps_hat, t, s, rng.standard_normal(x.shape))
    record.append(0, x, x)
    return record


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def noise_fitting_loss(eps: np.ndarray, eps_hat: np.ndarray) -> np.ndarray:
    """Per-sample mean of (ε − ε̂)² over everything but the batch axis."""
    diff = np.asarray(eps, dtype=np.float64) - np.asarray(eps_hat, dtype=np.float64)
    if diff.ndim == 0:
        raise ShapeError("noise_fitting_loss needs a leading batch axis")
    return np.mean(diff.reshape(len(diff), -1) ** 2, axis=1)


def posterior_gap_metric(
    model: ConditionalEpsFn,
    dataset: np.ndarray,
    s: NoiseSchedule,
    num_t_samples: int,
    rng: np.random.Generator,
    batch_size: int = 16,
) -> float:
    """Monte-Carlo average of the posterior-mean gap ‖Δe‖².

    For every image, ``num_t_samples`` step indices are drawn uniformly from
    1..T together with fresh forward noise; ``model(x_t, t, x0)`` supplies ε̂.
    """
    if len(dataset) == 0:
        raise DatasetError("posterior_gap_metric needs a nonempty dataset")
    gaps = []
    for _ in range(num_t_samples):
        for start in range(0, len(dataset), batch_size):
            x0 = dataset[start:start + batch_size]
            t = rng.integers(1, s.T + 1, size=len(x0))
            eps = rng.standard_normal(x0.shape)
            x_t = forward_noise(x0, t, eps, s)
            eps_hat = model(x_t, t, x0)
            diff = posterior_mean_true(x0, x_t, t, s) - posterior_mean_predicted(x_t, eps_hat, t, s)
            gaps.append(np.mean(diff.reshape(len(x0), -1) ** 2, axis=1))
    gap = float(np.mean(np.concatenate(gaps)))
    logger.debug("posterior gap over %d images x %d draws: %.6e", len(dataset), num_t_samples, gap)
    return gap
