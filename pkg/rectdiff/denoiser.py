"""
Tiny convolutional U-Net ε-predictor with sinusoidal time embedding.

Layout for the default config (1×16×16 input, widths 16/32):

    stem   conv 1→16                                   (down)
    down1  block 16→16, skip, avg-pool → 8×8           (down)
    down2  block 16→32, skip, avg-pool → 4×4           (down)
    middle block 32→32                                 (middle)
    up1    nearest ×2, concat skip → block 64→32       (up)
    up2    nearest ×2, concat skip → block 48→16       (up)
    out    conv 16→1                                   (up)

A block is conv → +time projection → group norm → SiLU → conv → group norm → SiLU.
Conv layers of the middle and up blocks are addressable for modulation.
"""
import hashlib
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from . import container
from .autodiff import Tensor
from .errors import AddressError, ConfigError, IndexRangeError, ShapeError
from .offsets import SeparableOffset, materialize_offset

logger = logging.getLogger(__name__)

BLOCK_KINDS = ("down", "middle", "up")
MODULATABLE_KINDS = ("middle", "up")


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 16
    channels: int = 1
    widths: Tuple[int, int] = (16, 32)
    groups: int = 4
    temb_dim: int = 32
    kernel: int = 3
    T: int = 100
    seed: int = 0

    def validate(self) -> "DenoiserConfig":
        if self.image_size % 4 or self.image_size < 4:
            raise ConfigError(f"image_size must be a positive multiple of 4, got {self.image_size}")
        if len(self.widths) != 2 or min(self.widths) < 1:
            raise ConfigError(f"widths must be two positive channel counts, got {self.widths}")
        if any(w % self.groups for w in self.widths):
            raise ConfigError(f"widths {self.widths} not divisible into {self.groups} groups")
        if self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")
        if self.temb_dim < 4 or self.temb_dim % 2:
            raise ConfigError(f"temb_dim must be an even number >= 4, got {self.temb_dim}")
        if self.T < 2:
            raise ConfigError(f"T must be >= 2, got {self.T}")
        return self

    def to_meta(self) -> Dict[str, str]:
        meta = {k: str(v) for k, v in asdict(self).items() if k != "widths"}
        meta["widths"] = ",".join(str(w) for w in self.widths)
        return meta

    @classmethod
    def from_meta(cls, meta: Mapping[str, str]) -> "DenoiserConfig":
        try:
            return cls(
                image_size=int(meta["image_size"]),
                channels=int(meta["channels"]),
                widths=tuple(int(w) for w in meta["widths"].split(",")),
                groups=int(meta["groups"]),
                temb_dim=int(meta["temb_dim"]),
                kernel=int(meta["kernel"]),
                T=int(meta["T"]),
                seed=int(meta["seed"]),
            ).validate()
        except (KeyError, ValueError) as e:
            raise ConfigError(f"bad denoiser metadata: {e}")


class TimeEmbedding:
    """Sinusoidal embedding, precomputed for t = 0..T."""

    def __init__(self, dim: int, T: int):
        self.dim = dim
        half = dim // 2
        freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
        args = np.arange(T + 1)[:, None] * freqs[None, :]
        self.table = np.concatenate([np.sin(args), np.cos(args)], axis=1)

    def __call__(self, t) -> np.ndarray:
        return self.table[np.atleast_1d(np.asarray(t))]


@dataclass
class ConvLayer:
    layer_id: str
    kind: str
    weight: Tensor
    bias: Tensor

    @property
    def kernel_shape(self) -> Tuple[int, int, int, int]:
        return self.weight.shape

    @property
    def pad(self) -> int:
        return self.weight.shape[-1] // 2


@dataclass
class DenoiserParams:
    """Conv layers addressable by id, plus time-MLP and norm parameters."""
    config: DenoiserConfig
    convs: Dict[str, ConvLayer] = field(default_factory=dict)
    extras: Dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        self.temb = TimeEmbedding(self.config.temb_dim, self.config.T)

    def parameters(self) -> List[Tensor]:
        out = []
        for layer in self.convs.values():
            out += [layer.weight, layer.bias]
        return out + list(self.extras.values())

    def named_arrays(self) -> List[Tuple[str, str, np.ndarray]]:
        rows = []
        for layer in self.convs.values():
            rows.append((f"{layer.layer_id}.weight", layer.kind, layer.weight.data))
            rows.append((f"{layer.layer_id}.bias", "bias", layer.bias.data))
        rows += [(name, "param", t.data) for name, t in self.extras.items()]
        return rows

    def requires_grad_(self, flag: bool) -> "DenoiserParams":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def modulatable_layers(self) -> List[ConvLayer]:
        return [l for l in self.convs.values() if l.kind in MODULATABLE_KINDS]

    def layer_table(self) -> List[Tuple[str, str, Tuple[int, ...]]]:
        return [(l.layer_id, l.kind, l.kernel_shape) for l in self.convs.values()]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, _, arr in self.named_arrays():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _block_specs(cfg: DenoiserConfig) -> List[Tuple[str, str, int, int]]:
    w0, w1 = cfg.widths
    return [
        ("down1", "down", w0, w0),
        ("down2", "down", w0, w1),
        ("middle", "middle", w1, w1),
        ("up1", "up", 2 * w1, w1),
        ("up2", "up", w1 + w0, w0),
    ]


def build_denoiser(config: Optional[DenoiserConfig] = None) -> DenoiserParams:
    """Initialize a denoiser deterministically from ``config.seed``."""
    cfg = (config or DenoiserConfig()).validate()
    rng = np.random.default_rng(cfg.seed)
    params = DenoiserParams(cfg)
    k = cfg.kernel

    def conv(layer_id: str, kind: str, cin: int, cout: int, gain: float = 1.0):
        std = gain / np.sqrt(cin * k * k)
        params.convs[layer_id] = ConvLayer(
            layer_id, kind,
            Tensor(rng.standard_normal((cout, cin, k, k)) * std, requires_grad=True, name=f"{layer_id}.weight"),
            Tensor(np.zeros(cout), requires_grad=True, name=f"{layer_id}.bias"),
        )

    def dense(name: str, fan_in: int, fan_out: int):
        params.extras[f"{name}.weight"] = Tensor(
            rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in), requires_grad=True, name=f"{name}.weight")
        params.extras[f"{name}.bias"] = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.bias")

    def norm(name: str, channels: int):
        params.extras[f"{name}.gamma"] = Tensor(np.ones(channels), requires_grad=True, name=f"{name}.gamma")
        params.extras[f"{name}.beta"] = Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.beta")

    dense("time", cfg.temb_dim, cfg.temb_dim)
    conv("stem", "down", cfg.channels, cfg.widths[0])
    for name, kind, cin, cout in _block_specs(cfg):
        conv(f"{name}.conv1", kind, cin, cout)
        dense(f"{name}.temb", cfg.temb_dim, cout)
        norm(f"{name}.norm1", cout)
        conv(f"{name}.conv2", kind, cout, cout)
        norm(f"{name}.norm2", cout)
    conv("out", "up", cfg.widths[0], cfg.channels, gain=0.1)
    logger.debug("built denoiser with %d parameters", params.parameter_count())
    return params


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _materialize_all(params: DenoiserParams, offsets: Mapping[str, Union[SeparableOffset, Tensor]]) -> Dict[str, Tensor]:
    deltas = {}
    for layer_id, o in offsets.items():
        layer = params.convs.get(layer_id)
        if layer is None or layer.kind not in MODULATABLE_KINDS:
            raise AddressError(f"offset addresses layer {layer_id!r}, which is not a modulatable layer")
        delta = materialize_offset(o) if isinstance(o, SeparableOffset) else o
        if delta.shape[-4:] != layer.kernel_shape:
            raise ShapeError.mismatch(f"offset[{layer_id}]", delta.shape, layer.kernel_shape)
        deltas[layer_id] = delta
    return deltas


class _Forward:
    """One forward pass; holds the parameter view (live or frozen) and offsets."""

    def __init__(self, params: DenoiserParams, deltas: Mapping[str, Tensor], frozen: bool):
        self.params = params
        self.deltas = deltas
        self.frozen = frozen

    def p(self, t: Tensor) -> Tensor:
        return t.detach() if self.frozen else t

    def conv(self, layer_id: str, x: Tensor) -> Tensor:
        layer = self.params.convs[layer_id]
        w = self.p(layer.weight)
        delta = self.deltas.get(layer_id)
        if delta is not None:
            # θ̂ = θ·(1+Δ)
            w = ad.mul(ad.expand(w, delta.shape), ad.add(delta, 1.0))
        return ad.add_bias(ad.conv2d(x, w, stride=1, pad=layer.pad), self.p(layer.bias))

    def dense(self, name: str, x: Tensor) -> Tensor:
        return ad.linear(x, self.p(self.params.extras[f"{name}.weight"]), self.p(self.params.extras[f"{name}.bias"]))

    def norm(self, name: str, x: Tensor) -> Tensor:
        h = ad.group_norm(x, self.params.config.groups)
        return ad.channel_affine(h, self.p(self.params.extras[f"{name}.gamma"]),
                                 self.p(self.params.extras[f"{name}.beta"]))

    def block(self, name: str, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv(f"{name}.conv1", x)
        proj = self.dense(f"{name}.temb", temb)
        h = ad.add(h, ad.expand(ad.reshape(proj, proj.shape + (1, 1)), h.shape))
        h = ad.silu(self.norm(f"{name}.norm1", h))
        h = self.conv(f"{name}.conv2", h)
        return ad.silu(self.norm(f"{name}.norm2", h))

    def __call__(self, x: Tensor, t) -> Tensor:
        temb = ad.silu(self.dense("time", Tensor(self.params.temb(t))))
        if temb.shape[0] != x.shape[0]:
            temb = ad.expand(temb, (x.shape[0], temb.shape[1]))
        h = self.conv("stem", x)
        skip1 = self.block("down1", h, temb)
        skip2 = self.block("down2", ad.downsample_avg(skip1), temb)
        h = self.block("middle", ad.downsample_avg(skip2), temb)
        h = self.block("up1", ad.concat_channels([ad.upsample_nearest(h), skip2]), temb)
        h = self.block("up2", ad.concat_channels([ad.upsample_nearest(h), skip1]), temb)
        return self.conv("out", h)


def _check_input(params: DenoiserParams, x_t) -> Tensor:
    x = ad.as_tensor(x_t)
    cfg = params.config
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if x.data.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError.mismatch("predict_eps", x.shape, (-1,) + expected)
    return x


def _check_steps(params: DenoiserParams, x: Tensor, t) -> None:
    arr = np.atleast_1d(np.asarray(t))
    if arr.dtype.kind not in "iu" or arr.min() < 1 or arr.max() > params.config.T:
        raise IndexRangeError(f"step index {t} outside 1..{params.config.T}")
    if arr.size not in (1, x.shape[0]):
        raise ShapeError.mismatch("predict_eps steps", arr.shape, (x.shape[0],))


def predict_eps(params: DenoiserParams, x_t, t) -> Tensor:
    """ε_θ(x_t, t); differentiable w.r.t. params and x_t."""
    x = _check_input(params, x_t)
    _check_steps(params, x, t)
    return _Forward(params, {}, frozen=False)(x, t)


def modulated_predict_eps(params: DenoiserParams, offsets: Mapping[str, Union[SeparableOffset, Tensor]], x_t, t) -> Tensor:
    """ε_θ̂(x_t, t) with θ̂ = θ·(1+Δ) on the addressed layers.

    θ is read through a detached view: gradients reach the offsets, never θ.
    Batched offsets give one kernel per sample.
    """
    x = _check_input(params, x_t)
    _check_steps(params, x, t)
    deltas = _materialize_all(params, offsets)
    for layer_id, delta in deltas.items():
        if delta.data.ndim == 5 and delta.shape[0] != x.shape[0]:
            raise ShapeError.mismatch(f"offset[{layer_id}] batch", delta.shape, x.shape)
    return _Forward(params, deltas, frozen=True)(x, t)


def frozen_eps_fn(params: DenoiserParams):
    """Numpy-in/numpy-out ε̂ callable for the diffusion kernel (no taping)."""
    def eps_fn(x: np.ndarray, t) -> np.ndarray:
        return _Forward(params, {}, frozen=True)(_check_input(params, x), t).data
    return eps_fn


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def to_container(params: DenoiserParams) -> container.Container:
    c = container.Container("denoiser", meta=params.config.to_meta())
    for entry_id, tag, arr in params.named_arrays():
        c.add(entry_id, tag, arr)
    return c


def save_denoiser(path: str, params: DenoiserParams) -> str:
    return container.save(path, to_container(params))


def from_container(c: container.Container) -> DenoiserParams:
    cfg = DenoiserConfig.from_meta(c.meta)
    params = DenoiserParams(cfg)
    for entry_id, (tag, arr) in c.entries.items():
        if tag in BLOCK_KINDS:
            layer_id = entry_id[:-len(".weight")]
            bias = c.array(f"{layer_id}.bias")
            params.convs[layer_id] = ConvLayer(
                layer_id, tag,
                Tensor(arr.copy(), requires_grad=True, name=entry_id),
                Tensor(bias.copy(), requires_grad=True, name=f"{layer_id}.bias"),
            )
        elif tag == "param":
            params.extras[entry_id] = Tensor(arr.copy(), requires_grad=True, name=entry_id)
    reference = build_denoiser(cfg)
    if params.layer_table() != reference.layer_table() or list(params.extras) != list(reference.extras):
        raise container.ContainerError("denoiser layer table does not match its config")
    return params


def load_denoiser(path: str) -> DenoiserParams:
    return from_container(container.load(path, expected_kind="denoiser"))
