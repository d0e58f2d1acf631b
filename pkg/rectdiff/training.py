"""
Trainers: denoiser pretraining, rectifier reconstruction training and the two
editing strategies, plus the rectified samplers that consume their output.

Every trainer owns one numpy Generator seeded from ``TrainConfig.seed``; all
batch, step-index and noise draws come from it, in a fixed order, so a run
is reproducible bit for bit. Trainers that take a pretrained denoiser check
its checksum before and after and raise FrozenParamsError on any change.
"""
import logging
import os
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import autodiff as ad
from .autodiff import Tensor
from .denoiser import (DenoiserConfig, DenoiserParams, build_denoiser, frozen_eps_fn,
                       modulated_predict_eps, predict_eps)
from .diffusion import (ConditionalEpsFn, EpsFn, NoiseSchedule, TrajectoryRecord, ddim_invert,
                        ddim_sample, ddim_step, ddpm_sample, estimate_x0, forward_noise,
                        uniform_step_indices)
from .errors import ConfigError, DatasetError, DivergenceError, FrozenParamsError
from .optim import AdamState, adam_step
from .probe import AttributeDirection, directional_loss, get_direction, l1_reg
from .rectifier import (RectifierConfig, RectifierParams, build_rectifier, check_compatible,
                        offset_energy, predict_offsets)
from .toyset import ToyDataset

logger = logging.getLogger(__name__)

MODES = ("pretrain", "recon", "recon_l1", "recon_l1_dw", "edit_sm", "edit_markov")
RECON_MODES = ("recon", "recon_l1", "recon_l1_dw")
EDIT_MODES = ("edit_sm", "edit_markov")
SAMPLERS = ("ddim", "ddpm")

_MODE_DEFAULTS = {
    "pretrain": dict(steps=3000, weight_decay=0.0, lr_decay_every=5000),
    "recon": dict(steps=2000, weight_decay=1e-5, lr_decay_every=5000),
    "recon_l1": dict(steps=2000, weight_decay=1e-5, lr_decay_every=5000),
    "recon_l1_dw": dict(steps=2000, weight_decay=1e-5, lr_decay_every=5000),
    "edit_sm": dict(steps=200, weight_decay=0.0, lr_decay_every=10, attribute="brighter"),
    "edit_markov": dict(steps=200, weight_decay=0.0, lr_decay_every=10, attribute="brighter"),
}


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "recon"
    steps: int = 2000
    batch_size: int = 16
    seed: int = 0
    lr: float = 1e-3
    weight_decay: float = 1e-5
    lr_decay: float = 0.9
    lr_decay_every: int = 5000
    lambda_clip: float = 1.0
    lambda_recon: float = 1.0
    dw_weight: float = 1e-2
    attribute: Optional[str] = None
    markov_chain: int = 10
    markov_grad_steps: int = 3
    markov_t_start: Optional[int] = None
    log_every: int = 100
    log_path: Optional[str] = None
    divergence_factor: float = 10.0
    divergence_window: int = 20
    progress: bool = False

    @classmethod
    def defaults(cls, mode: str, **overrides) -> "TrainConfig":
        if mode not in MODES:
            raise ConfigError(f"unknown training mode {mode!r}; expected one of {MODES}")
        values = dict(_MODE_DEFAULTS[mode], mode=mode)
        values.update(overrides)
        return cls(**values).validate()

    def validate(self) -> "TrainConfig":
        if self.mode not in MODES:
            raise ConfigError(f"unknown training mode {self.mode!r}; expected one of {MODES}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError(f"need steps >= 0 and batch_size >= 1, got {self.steps}, {self.batch_size}")
        if min(self.lambda_clip, self.lambda_recon, self.dw_weight, self.weight_decay) < 0:
            raise ConfigError("loss weights and weight decay must be non-negative")
        if self.mode in EDIT_MODES:
            if not self.attribute:
                raise ConfigError(f"mode {self.mode} needs an attribute")
            get_direction(self.attribute)
        if self.mode == "edit_markov" and not 1 <= self.markov_grad_steps <= self.markov_chain:
            raise ConfigError(f"need 1 <= markov_grad_steps <= markov_chain, got "
                              f"{self.markov_grad_steps}, {self.markov_chain}")
        return self

    def optimizer(self, params: Sequence[Tensor]) -> AdamState:
        return AdamState.for_params(params, lr=self.lr, weight_decay=self.weight_decay,
                                    lr_decay=self.lr_decay, lr_decay_every=self.lr_decay_every)


@dataclass
class TrainResult:
    params: Union[DenoiserParams, RectifierParams]
    history: pd.DataFrame
    frozen_checksum: Optional[str] = None

    @property
    def final_loss(self) -> float:
        return float(self.history["loss"].iloc[-1]) if len(self.history) else float("nan")


class DivergenceGuard:
    """Abort on a non-finite loss, or when the moving average of the last
    ``window`` losses exceeds ``factor`` times the average of the first window."""

    def __init__(self, factor: float, window: int = 20):
        self.factor = factor
        self.window = window
        self.recent: List[float] = []
        self.reference: Optional[float] = None

    def check(self, step: int, terms: Dict[str, float]) -> None:
        loss = terms["loss"]
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}: {terms}")
        self.recent.append(loss)
        if len(self.recent) > self.window:
            self.recent.pop(0)
        if len(self.recent) < self.window:
            return
        average = float(np.mean(self.recent))
        if self.reference is None:
            self.reference = average
        elif average > self.factor * max(self.reference, 1e-12):
            raise DivergenceError(
                f"loss moving average {average:.4e} at step {step} exceeds {self.factor}x "
                f"its initial value {self.reference:.4e}")


class TrainingLog:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.rows: List[Dict[str, float]] = []
        self.started = time.perf_counter()

    def record(self, step: int, terms: Dict[str, float], lr: float) -> None:
        row = {"step": step, **terms, "lr": lr, "wallclock": time.perf_counter() - self.started}
        self.rows.append(row)
        if self.cfg.log_every and (step % self.cfg.log_every == 0 or step == self.cfg.steps - 1):
            parts = " ".join(f"{k}={v:.5g}" for k, v in terms.items())
            logger.info("%s step %d/%d %s lr=%.3e", self.cfg.mode, step + 1, self.cfg.steps, parts, lr)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    def write(self) -> pd.DataFrame:
        df = self.frame()
        if self.cfg.log_path:
            os.makedirs(os.path.dirname(os.path.abspath(self.cfg.log_path)), exist_ok=True)
            df.to_csv(self.cfg.log_path, index=False)
        return df


LossFn = Callable[[np.random.Generator], Dict[str, float]]


def _optimize(cfg: TrainConfig, trainable: List[Tensor], loss_fn: LossFn,
              frozen: Optional[DenoiserParams] = None) -> Tuple[pd.DataFrame, Optional[str]]:
    """Shared loop: zero grads, let ``loss_fn`` run its backward passes, step Adam."""
    state = cfg.optimizer(trainable)
    guard = DivergenceGuard(cfg.divergence_factor, cfg.divergence_window)
    log = TrainingLog(cfg)
    checksum = frozen.checksum() if frozen is not None else None
    rng = np.random.default_rng(cfg.seed)
    for step in tqdm(range(cfg.steps), desc=cfg.mode, disable=not cfg.progress, leave=False):
        ad.zero_grad(trainable)
        terms = loss_fn(rng)
        guard.check(step, terms)
        lr = adam_step(state, trainable)
        log.record(step, terms, lr)
    if frozen is not None and frozen.checksum() != checksum:
        raise FrozenParamsError(f"{cfg.mode} training changed the frozen denoiser")
    return log.write(), checksum


def _sample_state(rng: np.random.Generator, dataset: ToyDataset, batch_size: int, s: NoiseSchedule):
    x0 = dataset.sample_batch(rng, batch_size)
    t = rng.integers(1, s.T + 1, size=batch_size)
    eps = rng.standard_normal(x0.shape)
    return x0, t, eps, forward_noise(x0, t, eps, s)


def _require_data(dataset: ToyDataset, what: str) -> None:
    if dataset is None or len(dataset) == 0:
        raise DatasetError(f"{what} needs a nonempty dataset")


# ---------------------------------------------------------------------------
# rectified ε̂
# ---------------------------------------------------------------------------

def rectified_eps(params: DenoiserParams, R: RectifierParams, x0, x_t, t, s: NoiseSchedule):
    """Modulated ε̂ and the offsets that produced it.

    The rectifier sees P_t of the frozen model's ε̂, computed without taping.
    """
    x_data = x_t.data if isinstance(x_t, Tensor) else x_t
    x0_data = x0.data if isinstance(x0, Tensor) else x0
    x0_est = estimate_x0(x_data, frozen_eps_fn(params)(x_data, t), t, s)
    offsets = predict_offsets(R, x0_data, x0_est, t)
    return modulated_predict_eps(params, offsets, x_t, t), offsets


def rectified_eps_fn(params: DenoiserParams, R: Optional[RectifierParams], x0: np.ndarray,
                     s: NoiseSchedule) -> EpsFn:
    """ε̂ callable for the sampler; offsets are recomputed at every call."""
    if R is None:
        return frozen_eps_fn(params)

    def eps_fn(x: np.ndarray, t) -> np.ndarray:
        return rectified_eps(params, R, x0, x, t, s)[0].data
    return eps_fn


def conditional_eps(params: DenoiserParams, R: Optional[RectifierParams], s: NoiseSchedule) -> ConditionalEpsFn:
    """``model(x_t, t, x0)`` for posterior_gap_metric and held-out noise losses."""
    frozen = frozen_eps_fn(params)

    def model(x_t: np.ndarray, t, x0: np.ndarray) -> np.ndarray:
        if R is None:
            return frozen(x_t, t)
        return rectified_eps(params, R, x0, x_t, t, s)[0].data
    return model


# ---------------------------------------------------------------------------
# trainers
# ---------------------------------------------------------------------------

def pretrain_denoiser(cfg: TrainConfig, dataset: ToyDataset, s: NoiseSchedule,
                      denoiser_config: Optional[DenoiserConfig] = None,
                      params: Optional[DenoiserParams] = None) -> TrainResult:
    """Fit θ to E‖ε − ε_θ(x_t, t)‖² on ``dataset``."""
    _require_data(dataset, "pretrain_denoiser")
    if params is None:
        params = build_denoiser(denoiser_config or DenoiserConfig(image_size=dataset.image_size, T=s.T))
    trainable = params.parameters()

    def loss_fn(rng):
        x0, t, eps, x_t = _sample_state(rng, dataset, cfg.batch_size, s)
        loss = ad.mean(ad.square(ad.sub(predict_eps(params, x_t, t), Tensor(eps))))
        ad.backward(loss)
        return {"loss": loss.item()}

    history, _ = _optimize(cfg, trainable, loss_fn)
    logger.info("pretrained denoiser for %d steps, final loss %.5f", cfg.steps,
                history["loss"].iloc[-1] if len(history) else float("nan"))
    return TrainResult(params, history)


def recon_loss_terms(cfg: TrainConfig, params: DenoiserParams, R: RectifierParams,
                     x0, t, eps, x_t, s: NoiseSchedule) -> Tuple[Tensor, Dict[str, Tensor]]:
    """Reconstruction loss for ``cfg.mode`` and its named terms."""
    eps_mod, offsets = rectified_eps(params, R, x0, x_t, t, s)
    if cfg.mode == "recon":
        loss = ad.mean(ad.square(ad.sub(eps_mod, Tensor(eps))))
        return loss, {}
    l1 = l1_reg(estimate_x0(x_t, eps_mod, t, s), x0)
    if cfg.mode == "recon_l1":
        return l1, {"l1": l1}
    dw = offset_energy(offsets)
    return ad.add(l1, ad.scale(dw, cfg.dw_weight)), {"l1": l1, "dw": dw}


def train_rectifier_recon(cfg: TrainConfig, params: DenoiserParams, dataset: ToyDataset, s: NoiseSchedule,
                          R: Optional[RectifierParams] = None,
                          rectifier_config: Optional[RectifierConfig] = None) -> TrainResult:
    """Train R so the modulated ε̂ fits the noise; θ stays frozen.

    ``cfg.mode`` picks the loss: ``recon`` (noise fitting), ``recon_l1``
    (pixel ℓ1 of P_t) or ``recon_l1_dw`` (ℓ1 plus the Δ² output regularizer).
    """
    if cfg.mode not in RECON_MODES:
        raise ConfigError(f"train_rectifier_recon cannot run mode {cfg.mode!r}")
    _require_data(dataset, "train_rectifier_recon")
    if R is None:
        R = build_rectifier(params, rectifier_config or RectifierConfig.for_denoiser(params.config))
    check_compatible(R, params)
    trainable = R.parameters()

    def loss_fn(rng):
        x0, t, eps, x_t = _sample_state(rng, dataset, cfg.batch_size, s)
        loss, terms = recon_loss_terms(cfg, params, R, x0, t, eps, x_t, s)
        ad.backward(loss)
        return {"loss": loss.item(), **{k: v.item() for k, v in terms.items()}}

    history, checksum = _optimize(cfg, trainable, loss_fn, frozen=params)
    return TrainResult(R, history, checksum)


def train_rectifier_recon_l1_variants(cfg: TrainConfig, params: DenoiserParams, dataset: ToyDataset,
                                      s: NoiseSchedule, **kwargs) -> TrainResult:
    if cfg.mode not in ("recon_l1", "recon_l1_dw"):
        raise ConfigError(f"expected mode recon_l1 or recon_l1_dw, got {cfg.mode!r}")
    return train_rectifier_recon(cfg, params, dataset, s, **kwargs)


def edit_loss_terms(cfg: TrainConfig, direction: AttributeDirection, x0, x0_edit) -> Tuple[Tensor, Tensor, Tensor]:
    """L_edit = λ_clip·directional + λ_recon·ℓ1, returned with both raw terms."""
    d = directional_loss(x0, x0_edit, direction)
    l1 = l1_reg(x0_edit, x0)
    return ad.add(ad.scale(d, cfg.lambda_clip), ad.scale(l1, cfg.lambda_recon)), d, l1


def train_edit_score_matching(cfg: TrainConfig, params: DenoiserParams, R_init: RectifierParams,
                              dataset: ToyDataset, s: NoiseSchedule) -> TrainResult:
    """Editing training where every state comes from the forward process of a real image.

    Each step draws x0, t and ε, forms x_t = forward_noise(x0, t, ε), and
    scores the modulated estimate P_t[ε̂_θ̃(x_t)] against x0. Edited
    estimates are never fed back as inputs.
    """
    if cfg.mode != "edit_sm":
        raise ConfigError(f"train_edit_score_matching cannot run mode {cfg.mode!r}")
    _require_data(dataset, "train_edit_score_matching")
    direction = get_direction(cfg.attribute)
    R = R_init.copy()
    check_compatible(R, params)
    trainable = R.parameters()

    def loss_fn(rng):
        x0, t, _, x_t = _sample_state(rng, dataset, cfg.batch_size, s)
        eps_mod, _ = rectified_eps(params, R, x0, x_t, t, s)
        loss, d, l1 = edit_loss_terms(cfg, direction, x0, estimate_x0(x_t, eps_mod, t, s))
        ad.backward(loss)
        return {"loss": loss.item(), "direction": d.item(), "l1": l1.item()}

    history, checksum = _optimize(cfg, trainable, loss_fn, frozen=params)
    return TrainResult(R, history, checksum)


def markov_chain_indices(cfg: TrainConfig, s: NoiseSchedule) -> List[int]:
    t_start = cfg.markov_t_start or s.T
    if not 1 <= t_start <= s.T:
        raise ConfigError(f"markov_t_start must lie in 1..{s.T}, got {t_start}")
    return uniform_step_indices(t_start, min(cfg.markov_chain, t_start))


def train_edit_markov_baseline(cfg: TrainConfig, params: DenoiserParams, R_init: RectifierParams,
                               dataset: ToyDataset, s: NoiseSchedule) -> TrainResult:
    """Editing training that chains the model's own edited latents.

    x0 is inverted with the frozen model through the chain indices, then K
    modulated DDIM steps run on the edited trajectory with L_edit applied to
    every step's estimate. Only the last ``markov_grad_steps`` steps keep
    their graph across steps; earlier steps are backpropagated on their own
    and their latent is detached.
    """
    if cfg.mode != "edit_markov":
        raise ConfigError(f"train_edit_markov_baseline cannot run mode {cfg.mode!r}")
    _require_data(dataset, "train_edit_markov_baseline")
    direction = get_direction(cfg.attribute)
    R = R_init.copy()
    check_compatible(R, params)
    trainable = R.parameters()
    chain = markov_chain_indices(cfg, s)
    down = chain[::-1] + [0]
    n = len(chain)
    grad_from = n - min(cfg.markov_grad_steps, n)
    frozen = frozen_eps_fn(params)

    def loss_fn(rng):
        x0 = dataset.sample_batch(rng, cfg.batch_size)
        x = Tensor(ddim_invert(x0, frozen, chain, s).final)
        window: List[Tensor] = []
        totals = {"loss": 0.0, "direction": 0.0, "l1": 0.0}
        for k, (t, t_prev) in enumerate(zip(down[:-1], down[1:])):
            eps_mod, _ = rectified_eps(params, R, x0, x, t, s)
            loss, d, l1 = edit_loss_terms(cfg, direction, x0, estimate_x0(x, eps_mod, t, s))
            loss = ad.scale(loss, 1.0 / n)
            totals["loss"] += loss.item()
            totals["direction"] += d.item() / n
            totals["l1"] += l1.item() / n
            x_next = ddim_step(x, eps_mod, t, t_prev, s)
            if k < grad_from:
                ad.backward(loss)
                x_next = Tensor(x_next.data)
            else:
                window.append(loss)
            x = x_next
        tail = window[0]
        for loss in window[1:]:
            tail = ad.add(tail, loss)
        ad.backward(tail)
        return totals

    history, checksum = _optimize(cfg, trainable, loss_fn, frozen=params)
    return TrainResult(R, history, checksum)


def train(cfg: TrainConfig, dataset: ToyDataset, s: NoiseSchedule, params: Optional[DenoiserParams] = None,
          R: Optional[RectifierParams] = None, **kwargs) -> TrainResult:
    """Dispatch on ``cfg.mode``."""
    if cfg.mode == "pretrain":
        return pretrain_denoiser(cfg, dataset, s, params=params, **kwargs)
    if params is None:
        raise ConfigError(f"mode {cfg.mode} needs a pretrained denoiser")
    if cfg.mode == "recon":
        return train_rectifier_recon(cfg, params, dataset, s, R=R, **kwargs)
    if cfg.mode in RECON_MODES:
        return train_rectifier_recon_l1_variants(cfg, params, dataset, s, R=R, **kwargs)
    if R is None:
        raise ConfigError(f"mode {cfg.mode} needs a reconstruction-trained rectifier")
    if cfg.mode == "edit_sm":
        return train_edit_score_matching(cfg, params, R, dataset, s)
    return train_edit_markov_baseline(cfg, params, R, dataset, s)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def invert(params: DenoiserParams, x0: np.ndarray, step_indices: Sequence[int], s: NoiseSchedule,
           R: Optional[RectifierParams] = None) -> TrajectoryRecord:
    return ddim_invert(x0, rectified_eps_fn(params, R, x0, s), step_indices, s)


def edit_sample(params: DenoiserParams, R_edit: Optional[RectifierParams], x0: np.ndarray,
                step_indices: Sequence[int], s: NoiseSchedule, sampler: str = "ddim",
                rng: Optional[np.random.Generator] = None,
                R_invert: Optional[RectifierParams] = None) -> Tuple[np.ndarray, TrajectoryRecord]:
    """Invert x0 over the full range, then sample back with the modulated model.

    Inversion uses the frozen model unless ``R_invert`` is given. The ``ddpm``
    sampler inverts through every index 1..T and runs the ancestral chain
    with noise from ``rng``.
    """
    if sampler not in SAMPLERS:
        raise ConfigError(f"unknown sampler {sampler!r}; expected one of {SAMPLERS}")
    if sampler == "ddpm":
        step_indices = list(range(1, s.T + 1))
    latent = invert(params, x0, step_indices, s, R_invert).final
    eps_fn = rectified_eps_fn(params, R_edit, x0, s)
    if sampler == "ddim":
        record = ddim_sample(latent, eps_fn, step_indices, s)
    else:
        if rng is None:
            raise ConfigError("ddpm sampling needs a seeded generator")
        record = ddpm_sample(latent, eps_fn, s, rng)
    return record.final, record


def reconstruct(params: DenoiserParams, R: Optional[RectifierParams], x0: np.ndarray,
                step_indices: Sequence[int], s: NoiseSchedule) -> np.ndarray:
    return edit_sample(params, R, x0, step_indices, s)[0]


def batched(fn: Callable[[np.ndarray], np.ndarray], images: np.ndarray, batch_size: int) -> np.ndarray:
    return np.concatenate([fn(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])
