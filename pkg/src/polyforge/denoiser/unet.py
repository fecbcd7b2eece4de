"""Fully-convolutional U-Net noise predictor.

Three encoder blocks, a middle block, and three decoder blocks; every block
stacks `layers_per_block` residual convolution layers.  Self-attention sits
at two positions by default: after the last encoder block's residual stack
and after the first decoder block's.  Timesteps enter through a sinusoidal
embedding projected into every residual layer.

The network is a pure function of (parameters, input, timestep); the same
parameters serve any spatial size divisible by 8.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError, ParameterError, ShapeError
from . import engine as eng


def _groups_for(channels: int) -> int:
    g = min(8, channels)
    if channels % g:
        raise ParameterError(
            f"channel count {channels} not divisible by group-norm groups {g}"
        )
    return g


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture hyperparameters; parameter shapes derive from this alone."""

    in_channels: int = 2
    base_width: int = 32
    channel_multipliers: tuple[int, int, int] = (1, 2, 4)
    layers_per_block: int = 3
    attn_encoder_last: bool = True
    attn_decoder_first: bool = True
    attn_middle: bool = True
    time_embed_dim: int = 0  # 0 means 4 * base_width
    padding: str = "zero"

    def __post_init__(self):
        if self.in_channels < 1:
            raise ParameterError("in_channels must be >= 1")
        if self.base_width < 1:
            raise ParameterError("base_width must be >= 1")
        if len(self.channel_multipliers) != 3:
            raise ParameterError("exactly three channel multipliers (encoder depth 3)")
        if self.layers_per_block < 1:
            raise ParameterError("layers_per_block must be >= 1")
        if self.padding not in ("zero", "cyclic"):
            raise ParameterError(f"unknown padding mode {self.padding!r}")
        for c in self.widths:
            _groups_for(c)
        if self.temb_dim % 2:
            raise ParameterError("time embedding dimension must be even")

    @property
    def widths(self) -> tuple[int, int, int]:
        return tuple(self.base_width * m for m in self.channel_multipliers)

    @property
    def temb_dim(self) -> int:
        return self.time_embed_dim or 4 * self.base_width

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "base_width": self.base_width,
            "channel_multipliers": list(self.channel_multipliers),
            "layers_per_block": self.layers_per_block,
            "attn_encoder_last": self.attn_encoder_last,
            "attn_decoder_first": self.attn_decoder_first,
            "attn_middle": self.attn_middle,
            "time_embed_dim": self.time_embed_dim,
            "padding": self.padding,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["channel_multipliers"] = tuple(d["channel_multipliers"])
        return cls(**d)


@dataclass
class DenoiserParams:
    """Named parameter tensors plus the config they were built from."""

    config: DenoiserConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def total_count(self) -> int:
        return sum(int(t.size) for t in self.tensors.values())

    def validate_finite(self) -> None:
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise NumericError(f"parameter tensor {name!r} has non-finite values")

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


# ---------------------------------------------------------------------------
# layer structure walk
#
# Init and forward both traverse the same plan, so parameter shapes (and the
# total count) are a pure function of the config.


def _res_layer_shapes(cin: int, cout: int, temb: int) -> dict[str, tuple]:
    shapes = {
        "gn1.g": (cin,),
        "gn1.b": (cin,),
        "conv1.w": (cout, cin, 3, 3),
        "conv1.b": (cout,),
        "temb.w": (temb, cout),
        "temb.b": (cout,),
        "gn2.g": (cout,),
        "gn2.b": (cout,),
        "conv2.w": (cout, cout, 3, 3),
        "conv2.b": (cout,),
    }
    if cin != cout:
        shapes["skip.w"] = (cout, cin, 1, 1)
        shapes["skip.b"] = (cout,)
    return shapes


def _attn_shapes(c: int) -> dict[str, tuple]:
    s = {"gn.g": (c,), "gn.b": (c,)}
    for p in ("q", "k", "v", "o"):
        s[f"{p}.w"] = (c, c, 1, 1)
        s[f"{p}.b"] = (c,)
    return s


def param_shapes(cfg: DenoiserConfig) -> dict[str, tuple]:
    """Full name -> shape directory for a config."""
    c1, c2, c3 = cfg.widths
    d = cfg.temb_dim
    shapes: dict[str, tuple] = {
        "temb.lin1.w": (d, d),
        "temb.lin1.b": (d,),
        "temb.lin2.w": (d, d),
        "temb.lin2.b": (d,),
        "stem.w": (c1, cfg.in_channels, 3, 3),
        "stem.b": (c1,),
    }

    def block(prefix: str, cin: int, cout: int, attn: bool):
        cur = cin
        for j in range(cfg.layers_per_block):
            for k, v in _res_layer_shapes(cur, cout, d).items():
                shapes[f"{prefix}.res{j}.{k}"] = v
            cur = cout
        if attn:
            for k, v in _attn_shapes(cout).items():
                shapes[f"{prefix}.attn.{k}"] = v

    block("enc1", c1, c1, False)
    block("enc2", c1, c2, False)
    block("enc3", c2, c3, cfg.attn_encoder_last)

    for k, v in _res_layer_shapes(c3, c3, d).items():
        shapes[f"mid.res1.{k}"] = v
    if cfg.attn_middle:
        for k, v in _attn_shapes(c3).items():
            shapes[f"mid.attn.{k}"] = v
    for k, v in _res_layer_shapes(c3, c3, d).items():
        shapes[f"mid.res2.{k}"] = v

    # decoder blocks consume the concatenated skip from the mirrored encoder
    block("dec1", c3 + c3, c3, cfg.attn_decoder_first)
    block("dec2", c3 + c2, c2, False)
    block("dec3", c2 + c1, c1, False)

    shapes["head.gn.g"] = (c1,)
    shapes["head.gn.b"] = (c1,)
    shapes["head.conv.w"] = (cfg.in_channels, c1, 3, 3)
    shapes["head.conv.b"] = (cfg.in_channels,)
    return shapes


_ZERO_INIT_SUFFIXES = ("conv2.w", "conv2.b", "attn.o.w", "attn.o.b", "head.conv.w", "head.conv.b")


def build_denoiser(cfg: DenoiserConfig, rng: np.random.Generator) -> DenoiserParams:
    """Initialize parameters: fan-in normal for weights, zero for each residual
    layer's final projection (and attention output) so blocks start as identity
    perturbations."""
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            t = np.ones(shape, dtype=np.float32)
        elif name.endswith(".b") or name.endswith(_ZERO_INIT_SUFFIXES):
            t = np.zeros(shape, dtype=np.float32)
        elif name.endswith(".w"):
            if len(shape) == 4:
                fan_in = shape[1] * shape[2] * shape[3]
            else:
                fan_in = shape[0]
            std = math.sqrt(2.0 / fan_in)
            t = rng.normal(0.0, std, size=shape).astype(np.float32)
        else:  # pragma: no cover - walk emits only .g/.b/.w names
            raise AssertionError(name)
        tensors[name] = t
    return DenoiserParams(cfg, tensors)


# ---------------------------------------------------------------------------
# forward


def sinusoidal_embedding(t: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    """(N,) timesteps -> (N, dim) sin/cos features over log-spaced frequencies."""
    half = dim // 2
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if half > 1:
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / (half - 1))
    else:
        freqs = np.ones(1)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


def _res_layer(p, prefix: str, x, temb, pad: str):
    cin = x.value.shape[1]
    cout = p[f"{prefix}.conv1.b"].value.shape[0]
    h = eng.group_norm(x, p[f"{prefix}.gn1.g"], p[f"{prefix}.gn1.b"], _groups_for(cin))
    h = eng.conv2d(eng.silu(h), p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"], pad)
    tp = eng.linear(eng.silu(temb), p[f"{prefix}.temb.w"], p[f"{prefix}.temb.b"])
    h = eng.add(h, eng.reshape(tp, (tp.value.shape[0], cout, 1, 1)))
    h = eng.group_norm(h, p[f"{prefix}.gn2.g"], p[f"{prefix}.gn2.b"], _groups_for(cout))
    h = eng.conv2d(eng.silu(h), p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"], pad)
    if cin != cout:
        x = eng.conv2d(x, p[f"{prefix}.skip.w"], p[f"{prefix}.skip.b"], pad)
    return eng.add(h, x)


def _attn_layer(p, prefix: str, x, pad: str):
    n, c, hh, ww = x.value.shape
    h = eng.group_norm(x, p[f"{prefix}.gn.g"], p[f"{prefix}.gn.b"], _groups_for(c))
    q = eng.conv2d(h, p[f"{prefix}.q.w"], p[f"{prefix}.q.b"], pad)
    k = eng.conv2d(h, p[f"{prefix}.k.w"], p[f"{prefix}.k.b"], pad)
    v = eng.conv2d(h, p[f"{prefix}.v.w"], p[f"{prefix}.v.b"], pad)
    qf = eng.transpose(eng.reshape(q, (n, c, hh * ww)), (0, 2, 1))
    kf = eng.reshape(k, (n, c, hh * ww))
    vf = eng.transpose(eng.reshape(v, (n, c, hh * ww)), (0, 2, 1))
    scores = eng.mul(eng.matmul(qf, kf), 1.0 / math.sqrt(c))
    attn = eng.softmax_last(scores)
    out = eng.matmul(attn, vf)  # (n, hw, c)
    out = eng.reshape(eng.transpose(out, (0, 2, 1)), (n, c, hh, ww))
    out = eng.conv2d(out, p[f"{prefix}.o.w"], p[f"{prefix}.o.b"], pad)
    return eng.add(out, x)


def apply(params, cfg: DenoiserConfig, x, t: np.ndarray):
    """Forward pass on a (N, C, H, W) batch; `params` maps names to arrays or
    engine Vars, so the same code serves inference and gradient tracing."""
    p = {k: eng.lift(v) for k, v in params.items()}
    x = eng.lift(x)
    n, c, h, w = x.value.shape
    if c != cfg.in_channels:
        raise ShapeError(f"expected {cfg.in_channels} channels, got {c}")
    if h % 8 or w % 8:
        raise ShapeError(
            f"spatial size {h}x{w} must be divisible by 8 (three 2x downsamplings)"
        )
    pad = cfg.padding
    temb = eng.lift(sinusoidal_embedding(t, cfg.temb_dim, dtype=x.value.dtype))
    temb = eng.linear(temb, p["temb.lin1.w"], p["temb.lin1.b"])
    temb = eng.linear(eng.silu(temb), p["temb.lin2.w"], p["temb.lin2.b"])

    h_ = eng.conv2d(x, p["stem.w"], p["stem.b"], pad)
    skips = []
    enc_attn = (False, False, cfg.attn_encoder_last)
    for i in range(3):
        prefix = f"enc{i + 1}"
        for j in range(cfg.layers_per_block):
            h_ = _res_layer(p, f"{prefix}.res{j}", h_, temb, pad)
        if enc_attn[i]:
            h_ = _attn_layer(p, f"{prefix}.attn", h_, pad)
        skips.append(h_)
        h_ = eng.avg_pool2(h_)

    h_ = _res_layer(p, "mid.res1", h_, temb, pad)
    if cfg.attn_middle:
        h_ = _attn_layer(p, "mid.attn", h_, pad)
    h_ = _res_layer(p, "mid.res2", h_, temb, pad)

    dec_attn = (cfg.attn_decoder_first, False, False)
    for i in range(3):
        prefix = f"dec{i + 1}"
        h_ = eng.upsample_nearest2(h_)
        h_ = eng.concat([h_, skips[2 - i]], axis=1)
        for j in range(cfg.layers_per_block):
            h_ = _res_layer(p, f"{prefix}.res{j}", h_, temb, pad)
        if dec_attn[i]:
            h_ = _attn_layer(p, f"{prefix}.attn", h_, pad)

    c1 = cfg.widths[0]
    h_ = eng.group_norm(h_, p["head.gn.g"], p["head.gn.b"], _groups_for(c1))
    h_ = eng.conv2d(eng.silu(h_), p["head.conv.w"], p["head.conv.b"], pad)
    return h_
