"""
Experiment configuration: UTF-8 ``key = value`` files with ``#`` comments.

Files are parsed with python-dotenv; every value is converted through the
typed field table below. Unknown keys are rejected, and every path is
resolved against the config file's directory before a run starts.
"""
import hashlib
import logging
import os
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Dict, Mapping, Optional, Tuple

from dotenv import dotenv_values, load_dotenv

from .denoiser import DenoiserConfig
from .diffusion import NoiseSchedule, make_linear_schedule
from .errors import ConfigError, IndexRangeError, MissingCheckpointError
from .metrics import METRICS
from .probe import get_direction
from .rectifier import ENCODER_INPUTS, RectifierConfig
from .training import MODES, SAMPLERS, TrainConfig

logger = logging.getLogger(__name__)

RECON_LOSSES = {"e": "recon", "l1": "recon_l1", "l1_dw": "recon_l1_dw"}
ENV_LOG_LEVEL = "RECTDIFF_LOG_LEVEL"
ENV_REGISTRY_URL = "RECTDIFF_REGISTRY_URL"


def _bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _list(conv: Callable[[str], object]) -> Callable[[str], tuple]:
    def parse(raw: str) -> tuple:
        return tuple(conv(part.strip()) for part in raw.split(",") if part.strip())
    return parse


def _optional_int(raw: str) -> Optional[int]:
    return None if raw.strip().lower() in ("", "none") else int(raw)


def _optional_float(raw: str) -> Optional[float]:
    return None if raw.strip().lower() in ("", "none") else float(raw)


PATH_KEYS = ("out_dir", "data_path", "edit_data_path", "heldout_path", "denoiser_path", "rectifier_path",
             "edit_path", "markov_path")

# key -> converter; defaults live on ExperimentConfig
CONVERTERS: Dict[str, Callable[[str], object]] = {
    "mode": str, "seed": int, "registry_url": str,
    **{k: str for k in PATH_KEYS},
    "image_size": int, "channels": int, "widths": _list(int), "groups": int, "temb_dim": int,
    "encoder_widths": _list(int), "subnet_hidden": int, "encoder_input": str,
    "T": int, "beta_start": _optional_float, "beta_end": _optional_float,
    "n_train": int, "n_edit": int, "n_heldout": int,
    "pretrain_steps": int, "recon_steps": int, "edit_steps": int, "batch_size": int,
    "lr": float, "weight_decay": _optional_float, "lr_decay": float, "lr_decay_every": _optional_int,
    "lambda_clip": float, "lambda_recon": float, "dw_weight": float, "attribute": str,
    "markov_chain": int, "markov_grad_steps": int, "markov_t_start": _optional_int,
    "step_counts": _list(int), "lambda_grid": _list(float), "eval_steps": int, "sampler": str,
    "metrics": _list(str), "gap_t_samples": int, "recon_loss": str, "progress": _bool,
    "divergence_factor": float, "log_every": int,
}


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "recon"
    seed: int = 0
    out_dir: str = "runs"
    data_path: str = ""
    edit_data_path: str = ""
    heldout_path: str = ""
    denoiser_path: str = ""
    rectifier_path: str = ""
    edit_path: str = ""
    markov_path: str = ""
    registry_url: str = ""
    image_size: int = 16
    channels: int = 1
    widths: Tuple[int, ...] = (16, 32)
    groups: int = 4
    temb_dim: int = 32
    encoder_widths: Tuple[int, ...] = (8, 16, 32, 64)
    subnet_hidden: int = 32
    encoder_input: str = "concat"
    T: int = 100
    beta_start: Optional[float] = None
    beta_end: Optional[float] = None
    n_train: int = 1000
    n_edit: int = 100
    n_heldout: int = 200
    pretrain_steps: int = 3000
    recon_steps: int = 2000
    edit_steps: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: Optional[float] = None
    lr_decay: float = 0.9
    lr_decay_every: Optional[int] = None
    lambda_clip: float = 1.0
    lambda_recon: float = 1.0
    dw_weight: float = 1e-2
    attribute: str = "brighter"
    markov_chain: int = 10
    markov_grad_steps: int = 3
    markov_t_start: Optional[int] = None
    step_counts: Tuple[int, ...] = (5, 10, 25, 50, 100)
    lambda_grid: Tuple[float, ...] = (0.25, 1.0, 4.0)
    eval_steps: int = 25
    sampler: str = "ddim"
    metrics: Tuple[str, ...] = ("L1", "L2", "SSIM", "posterior_gap", "noise_loss", "probe_shift", "shift_cosine",
                                "off_attr_drift")
    gap_t_samples: int = 8
    recon_loss: str = "e"
    progress: bool = True
    divergence_factor: float = 10.0
    log_every: int = 100
    source: Optional[str] = field(default=None, compare=False)

    def validate(self) -> "ExperimentConfig":
        checks = [
            (self.mode in MODES, f"mode must be one of {MODES}"),
            (self.encoder_input in ENCODER_INPUTS, f"encoder_input must be one of {ENCODER_INPUTS}"),
            (self.sampler in SAMPLERS, f"sampler must be one of {SAMPLERS}"),
            (self.recon_loss in RECON_LOSSES, f"recon_loss must be one of {tuple(RECON_LOSSES)}"),
            (all(m in METRICS for m in self.metrics), f"metrics must be drawn from {METRICS}"),
            (all(1 <= n <= self.T for n in self.step_counts), f"step_counts must lie in 1..{self.T}"),
            (1 <= self.eval_steps <= self.T, f"eval_steps must lie in 1..{self.T}"),
            (min(self.n_train, self.n_edit, self.n_heldout) >= 1, "dataset sizes must be >= 1"),
            (all(v >= 0 for v in self.lambda_grid), "lambda_grid values must be non-negative"),
            (self.gap_t_samples >= 1, "gap_t_samples must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        get_direction(self.attribute)
        self.denoiser_config()
        self.rectifier_config().validate()
        self.schedule()
        return self

    # ------------------------------------------------------------------
    # derived objects
    # ------------------------------------------------------------------

    def denoiser_config(self) -> DenoiserConfig:
        widths = tuple(self.widths)
        return DenoiserConfig(image_size=self.image_size, channels=self.channels, widths=widths,
                              groups=self.groups, temb_dim=self.temb_dim, T=self.T, seed=self.seed).validate()

    def rectifier_config(self) -> RectifierConfig:
        return RectifierConfig(channels=self.channels, image_size=self.image_size, T=self.T,
                               temb_dim=self.temb_dim, encoder_widths=tuple(self.encoder_widths),
                               subnet_hidden=self.subnet_hidden, encoder_input=self.encoder_input,
                               seed=self.seed + 1)

    def schedule(self) -> NoiseSchedule:
        start = self.beta_start if self.beta_start is not None else 1e-4 * 1000.0 / self.T
        end = self.beta_end if self.beta_end is not None else 0.02 * 1000.0 / self.T
        try:
            return make_linear_schedule(self.T, start, end)
        except IndexRangeError as e:
            raise ConfigError(f"bad noise schedule: {e}")

    def train_config(self, mode: str, **overrides) -> TrainConfig:
        """TrainConfig for ``mode``; unset optimizer keys keep the mode's defaults."""
        if mode == "pretrain":
            steps = self.pretrain_steps
        else:
            steps = self.edit_steps if mode.startswith("edit") else self.recon_steps
        values = dict(
            steps=steps, batch_size=self.batch_size, seed=self.seed, lr=self.lr, lr_decay=self.lr_decay,
            lambda_clip=self.lambda_clip, lambda_recon=self.lambda_recon, dw_weight=self.dw_weight,
            markov_chain=self.markov_chain, markov_grad_steps=self.markov_grad_steps,
            markov_t_start=self.markov_t_start, progress=self.progress,
            divergence_factor=self.divergence_factor, log_every=self.log_every,
            log_path=os.path.join(self.out_dir, f"train_{mode}.csv"),
        )
        if mode.startswith("edit"):
            values["attribute"] = self.attribute
        if self.weight_decay is not None:
            values["weight_decay"] = self.weight_decay
        if self.lr_decay_every is not None:
            values["lr_decay_every"] = self.lr_decay_every
        values.update(overrides)
        return TrainConfig.defaults(mode, **values)

    def recon_mode(self) -> str:
        return RECON_LOSSES[self.recon_loss]

    def config_hash(self) -> str:
        text = "\n".join(f"{f.name}={getattr(self, f.name)!r}" for f in fields(self) if f.compare)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def require(self, *keys: str) -> None:
        """Raise MissingCheckpointError unless each named path exists."""
        for key in keys:
            path = getattr(self, key)
            if not os.path.exists(path):
                raise MissingCheckpointError(f"{key} {path} does not exist")


def _derive_paths(cfg: ExperimentConfig) -> ExperimentConfig:
    out = cfg.out_dir
    defaults = {
        "data_path": "toyset.bin", "edit_data_path": "editset.bin", "heldout_path": "heldout.bin",
        "denoiser_path": "denoiser.ckpt", "rectifier_path": "rectifier.ckpt", "edit_path": "edit.ckpt",
        "markov_path": "markov.ckpt",
    }
    updates = {k: os.path.join(out, name) for k, name in defaults.items() if not getattr(cfg, k)}
    if not cfg.registry_url:
        updates["registry_url"] = os.environ.get(ENV_REGISTRY_URL) or f"sqlite:///{os.path.join(out, 'runs.db')}"
    return replace(cfg, **updates)


def parse_values(raw: Mapping[str, Optional[str]], base_dir: str = ".") -> Dict[str, object]:
    """Convert raw strings to typed values, resolving paths against ``base_dir``."""
    values: Dict[str, object] = {}
    for key, text in raw.items():
        if key not in CONVERTERS:
            raise ConfigError(f"unknown config key {key!r}")
        if text is None:
            raise ConfigError(f"config key {key!r} has no value")
        try:
            value = CONVERTERS[key](text.strip())
        except ValueError as e:
            raise ConfigError(f"bad value for {key!r}: {e}")
        if key in PATH_KEYS and value:
            value = os.path.normpath(os.path.join(base_dir, os.path.expanduser(value)))
        values[key] = value
    return values


def from_mapping(raw: Mapping[str, Optional[str]], base_dir: str = ".", source: Optional[str] = None,
                 seed: Optional[int] = None, out_dir: Optional[str] = None) -> ExperimentConfig:
    values = parse_values(raw, base_dir)
    if seed is not None:
        values["seed"] = seed
    if out_dir is not None:
        values["out_dir"] = os.path.abspath(out_dir)
    elif "out_dir" not in values:
        values["out_dir"] = os.path.normpath(os.path.join(base_dir, ExperimentConfig.out_dir))
    cfg = _derive_paths(ExperimentConfig(source=source, **values))
    return cfg.validate()


def load_config(path: str, seed: Optional[int] = None, out_dir: Optional[str] = None) -> ExperimentConfig:
    """Read an experiment config file; ``seed`` and ``out_dir`` override the file."""
    if not os.path.isfile(path):
        raise MissingCheckpointError(f"config file {path} does not exist")
    try:
        raw = dotenv_values(path, interpolate=False)
    except UnicodeDecodeError as e:
        raise ConfigError(f"config file {path} is not valid UTF-8: {e.reason} at byte {e.start}")
    base_dir = os.path.dirname(os.path.abspath(path))
    cfg = from_mapping(raw, base_dir, source=os.path.abspath(path), seed=seed, out_dir=out_dir)
    logger.debug("loaded config %s (hash %s)", path, cfg.config_hash())
    return cfg


def load_environment() -> Dict[str, Optional[str]]:
    """Load an optional .env and return the process-level settings."""
    load_dotenv()
    return {
        "log_level": os.environ.get(ENV_LOG_LEVEL),
        "registry_url": os.environ.get(ENV_REGISTRY_URL),
    }


def snapshot(cfg: ExperimentConfig) -> Dict[str, object]:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg) if f.compare}
