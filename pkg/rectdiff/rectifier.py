"""
Rectifier hypernetwork: a small conv encoder over (x0, x0-estimate) plus one
subnet per modulated denoiser layer, each emitting a SeparableOffset.

    encoder   4 × (3×3 conv, stride 2, SiLU) → global average pool → feature
    subnet    SiLU(feature·W_f + temb·W_t) → head_in  → factor_in  (kh,kw,Cin,1)
                                           → head_out → factor_out (kh,kw,1,Cout)

head_out starts at zero, so a freshly built rectifier emits Δ ≡ 0 while
head_in stays random and gradients still reach head_out.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from . import autodiff as ad
from . import container
from .autodiff import Tensor
from .denoiser import MODULATABLE_KINDS, DenoiserConfig, DenoiserParams, TimeEmbedding
from .errors import ConfigError, ContainerError, IndexRangeError, ShapeError
from .offsets import SeparableOffset, materialize_offset, separable_offset_count

logger = logging.getLogger(__name__)

ENCODER_INPUTS = ("concat", "difference")

LayerMeta = Tuple[str, str, Tuple[int, int, int, int]]


@dataclass(frozen=True)
class RectifierConfig:
    channels: int = 1
    image_size: int = 16
    T: int = 100
    temb_dim: int = 32
    encoder_widths: Tuple[int, ...] = (8, 16, 32, 64)
    subnet_hidden: int = 32
    encoder_input: str = "concat"
    seed: int = 1

    def validate(self) -> "RectifierConfig":
        if self.encoder_input not in ENCODER_INPUTS:
            raise ConfigError(f"encoder_input must be one of {ENCODER_INPUTS}, got {self.encoder_input!r}")
        if not self.encoder_widths or min(self.encoder_widths) < 1:
            raise ConfigError(f"encoder_widths must be positive, got {self.encoder_widths}")
        if self.subnet_hidden < 1:
            raise ConfigError(f"subnet_hidden must be positive, got {self.subnet_hidden}")
        if self.T < 2 or self.temb_dim < 4 or self.temb_dim % 2:
            raise ConfigError(f"bad time settings T={self.T}, temb_dim={self.temb_dim}")
        return self

    @property
    def input_channels(self) -> int:
        return 2 * self.channels if self.encoder_input == "concat" else self.channels

    @classmethod
    def for_denoiser(cls, cfg: DenoiserConfig, **overrides) -> "RectifierConfig":
        base = dict(channels=cfg.channels, image_size=cfg.image_size, T=cfg.T, temb_dim=cfg.temb_dim)
        base.update(overrides)
        return cls(**base)

    def to_meta(self) -> Dict[str, str]:
        meta = {k: str(v) for k, v in asdict(self).items() if k != "encoder_widths"}
        meta["encoder_widths"] = ",".join(str(w) for w in self.encoder_widths)
        return meta

    @classmethod
    def from_meta(cls, meta: Mapping[str, str]) -> "RectifierConfig":
        try:
            return cls(
                channels=int(meta["channels"]),
                image_size=int(meta["image_size"]),
                T=int(meta["T"]),
                temb_dim=int(meta["temb_dim"]),
                encoder_widths=tuple(int(w) for w in meta["encoder_widths"].split(",")),
                subnet_hidden=int(meta["subnet_hidden"]),
                encoder_input=meta["encoder_input"],
                seed=int(meta["seed"]),
            ).validate()
        except (KeyError, ValueError) as e:
            raise ContainerError(f"bad rectifier metadata: {e}")


@dataclass
class RectifierParams:
    config: RectifierConfig
    # layer_id -> (Cout, Cin, kh, kw) of the denoiser layer each subnet feeds
    targets: Dict[str, Tuple[int, int, int, int]] = field(default_factory=dict)
    tensors: Dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        self.temb = TimeEmbedding(self.config.temb_dim, self.config.T)

    def parameters(self) -> List[Tensor]:
        return list(self.tensors.values())

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.tensors.values()))

    def subnet_count(self) -> int:
        return len(self.targets)

    def generated_parameter_count(self) -> int:
        """Offset factor entries emitted per sample, summed over target layers."""
        return sum(separable_offset_count(shape) for shape in self.targets.values())

    def copy(self) -> "RectifierParams":
        return RectifierParams(
            self.config, dict(self.targets),
            {k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.tensors.items()},
        )


def modulatable_meta(denoiser) -> List[LayerMeta]:
    if isinstance(denoiser, DenoiserParams):
        denoiser = denoiser.layer_table()
    return [(lid, kind, tuple(shape)) for lid, kind, shape in denoiser if kind in MODULATABLE_KINDS]


def build_rectifier(denoiser_meta, encoder_config: Optional[RectifierConfig] = None) -> RectifierParams:
    """Size one subnet per middle/up layer of ``denoiser_meta``.

    Args:
        denoiser_meta: a DenoiserParams or its ``layer_table()``.
        encoder_config: encoder/subnet sizes; seeded initialization.

    Returns:
        RectifierParams whose head_out weights are all zero.
    """
    cfg = (encoder_config or RectifierConfig()).validate()
    targets = modulatable_meta(denoiser_meta)
    if not targets:
        raise ConfigError("denoiser has no middle or up layers to modulate")
    rng = np.random.default_rng(cfg.seed)
    R = RectifierParams(cfg)

    def add(name: str, arr: np.ndarray):
        R.tensors[name] = Tensor(arr, requires_grad=True, name=name)

    cin = cfg.input_channels
    for i, cout in enumerate(cfg.encoder_widths):
        add(f"encoder.{i}.weight", rng.standard_normal((cout, cin, 3, 3)) / np.sqrt(cin * 9))
        add(f"encoder.{i}.bias", np.zeros(cout))
        cin = cout
    feat, hid = cfg.encoder_widths[-1], cfg.subnet_hidden

    for layer_id, _, shape in targets:
        cout, lcin, kh, kw = shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"layer {layer_id} has an even kernel {shape}")
        R.targets[layer_id] = shape
        p = f"subnet.{layer_id}"
        add(f"{p}.feature.weight", rng.standard_normal((feat, hid)) / np.sqrt(feat))
        add(f"{p}.feature.bias", np.zeros(hid))
        add(f"{p}.time.weight", rng.standard_normal((cfg.temb_dim, hid)) / np.sqrt(cfg.temb_dim))
        add(f"{p}.time.bias", np.zeros(hid))
        add(f"{p}.head_in.weight", rng.standard_normal((hid, kh * kw * lcin)) / np.sqrt(hid))
        add(f"{p}.head_in.bias", np.zeros(kh * kw * lcin))
        add(f"{p}.head_out.weight", np.zeros((hid, kh * kw * cout)))
        add(f"{p}.head_out.bias", np.zeros(kh * kw * cout))
    logger.debug("built rectifier: %d subnets, %d parameters, %d generated per sample",
                 R.subnet_count(), R.parameter_count(), R.generated_parameter_count())
    return R


def _encode(R: RectifierParams, x: Tensor) -> Tensor:
    h = x
    for i in range(len(R.config.encoder_widths)):
        w, b = R.tensors[f"encoder.{i}.weight"], R.tensors[f"encoder.{i}.bias"]
        h = ad.silu(ad.add_bias(ad.conv2d(h, w, stride=2, pad=1), b))
    return ad.global_avg_pool(h)


def predict_offsets(R: RectifierParams, x0, x0_est, t) -> Dict[str, SeparableOffset]:
    """Δ = R(x0, x0_est, t) as one batched SeparableOffset per target layer."""
    x0, x0_est = ad.as_tensor(x0), ad.as_tensor(x0_est)
    cfg = R.config
    if x0.shape != x0_est.shape:
        raise ShapeError.mismatch("predict_offsets", x0.shape, x0_est.shape)
    if x0.data.ndim != 4 or x0.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ShapeError.mismatch("predict_offsets", x0.shape, (-1, cfg.channels, cfg.image_size, cfg.image_size))
    B = x0.shape[0]
    t_arr = np.atleast_1d(np.asarray(t))
    if t_arr.dtype.kind not in "iu" or t_arr.min() < 1 or t_arr.max() > cfg.T:
        raise IndexRangeError(f"step index {t} outside 1..{cfg.T}")
    if t_arr.size not in (1, B):
        raise ShapeError.mismatch("predict_offsets steps", t_arr.shape, (B,))

    if cfg.encoder_input == "concat":
        x_in = ad.concat_channels([x0, x0_est])
    else:
        x_in = ad.sub(x0, x0_est)
    feature = _encode(R, x_in)
    temb = Tensor(R.temb(t_arr))
    if temb.shape[0] != B:
        temb = ad.expand(temb, (B, temb.shape[1]))

    offsets = {}
    for layer_id, (cout, cin, kh, kw) in R.targets.items():
        p = f"subnet.{layer_id}"
        h = ad.add(ad.linear(feature, R.tensors[f"{p}.feature.weight"], R.tensors[f"{p}.feature.bias"]),
                   ad.linear(temb, R.tensors[f"{p}.time.weight"], R.tensors[f"{p}.time.bias"]))
        h = ad.silu(h)
        f_in = ad.linear(h, R.tensors[f"{p}.head_in.weight"], R.tensors[f"{p}.head_in.bias"])
        f_out = ad.linear(h, R.tensors[f"{p}.head_out.weight"], R.tensors[f"{p}.head_out.bias"])
        offsets[layer_id] = SeparableOffset(
            layer_id,
            ad.reshape(f_in, (B, kh, kw, cin, 1)),
            ad.reshape(f_out, (B, kh, kw, 1, cout)),
        )
    return offsets


def offset_energy(offsets: Mapping[str, SeparableOffset]) -> Tensor:
    """Mean over layers of mean(Δ²), the output regularizer of the dw loss."""
    terms = [ad.mean(ad.square(materialize_offset(o))) for o in offsets.values()]
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.scale(total, 1.0 / len(terms))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def to_container(R: RectifierParams) -> container.Container:
    meta = R.config.to_meta()
    meta["targets"] = ",".join(R.targets)
    for i, (layer_id, shape) in enumerate(R.targets.items()):
        meta[f"subnet.{i}"] = layer_id
        meta[f"target.{layer_id}"] = ",".join(str(n) for n in shape)
    c = container.Container("rectifier", meta=meta)
    for name, t in R.tensors.items():
        c.add(name, "param", t.data)
    return c


def save_rectifier(path: str, R: RectifierParams) -> str:
    return container.save(path, to_container(R))


def from_container(c: container.Container) -> RectifierParams:
    cfg = RectifierConfig.from_meta(c.meta)
    R = RectifierParams(cfg)
    try:
        for i, layer_id in enumerate(c.meta["targets"].split(",")):
            if c.meta[f"subnet.{i}"] != layer_id:
                raise ContainerError(f"subnet {i} maps to {c.meta[f'subnet.{i}']!r}, expected {layer_id!r}")
            R.targets[layer_id] = tuple(int(n) for n in c.meta[f"target.{layer_id}"].split(","))
    except (KeyError, ValueError) as e:
        raise ContainerError(f"bad rectifier target table: {e}")
    for entry_id, (_, arr) in c.entries.items():
        R.tensors[entry_id] = Tensor(arr.copy(), requires_grad=True, name=entry_id)
    for layer_id, (cout, cin, kh, kw) in R.targets.items():
        if c.array(f"subnet.{layer_id}.head_out.weight").shape[1] != kh * kw * cout \
                or c.array(f"subnet.{layer_id}.head_in.weight").shape[1] != kh * kw * cin:
            raise ContainerError(f"subnet heads for {layer_id} do not match kernel {(cout, cin, kh, kw)}")
    return R


def load_rectifier(path: str) -> RectifierParams:
    return from_container(container.load(path, expected_kind="rectifier"))


def check_compatible(R: RectifierParams, params: DenoiserParams) -> None:
    """Raise ConfigError unless every subnet targets a matching denoiser layer."""
    expected = {lid: shape for lid, _, shape in modulatable_meta(params)}
    for layer_id, shape in R.targets.items():
        if expected.get(layer_id) != tuple(shape):
            raise ConfigError(f"rectifier subnet {layer_id} {shape} does not match denoiser layer "
                              f"{expected.get(layer_id)}")
