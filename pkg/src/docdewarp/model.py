"""The stacked grid-prediction network.

Two U-Nets in series. The first sees the warped photo and produces a coarse
2-channel map ``O``, edge-focused features ``Go`` from a gated side branch,
and its stem features ``X``; these are concatenated into ``U1``. The second
U-Net encodes ``U1``, splits its bottleneck in half and decodes each half
with its own decoder into one grid channel. ``tanh`` of the two channels is
the predicted backward dewarp grid.

Shapes at scale 1 and input 256 (channels x height x width)::

    X 32x256  L2 64x128  L4 256x32  L5 512x16  B 1024x8
    O 2x256   Go 16x256  U1 50x256  B1/B2 512x8  O1/O2 1x256  g 2x256
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from docdewarp import grid as wg
from docdewarp.errors import ConfigError, DataIntegrityError
from docdewarp.nn import functional as F
from docdewarp.nn.checkpoint import load_params, save_params
from docdewarp.nn.module import Conv2d, Module
from docdewarp.nn.tensor import Tensor

DEPTH = 5
GRID_CHANNELS = 2
# "identity" is a parameter-free stub that always predicts the identity grid;
# it exists so the rectification path can be tested without a trained model
HEAD_INIT_SCALE = 0.1
ARCHITECTURES = ("stacked", "identity")


@dataclass
class ModelConfig:
    input_size: int = 256
    base_channels: int = 32
    gated_channels: int = 16
    scale: float = 1.0
    gate_enabled: bool = True
    bifurcated: bool = True
    decoder_shared_weights: bool = False
    architecture: str = "stacked"

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.input_size < 32 or self.input_size % 2 ** DEPTH:
            raise ConfigError(f"input_size must be a positive multiple of {2 ** DEPTH}, got {self.input_size}")
        if self.scale <= 0:
            raise ConfigError(f"scale must be positive, got {self.scale}")
        if self.base_channels < 1 or self.gated_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.decoder_shared_weights and not self.bifurcated:
            raise ConfigError("decoder_shared_weights requires bifurcated decoders")

    def ch(self, n: int) -> int:
        """Channel width ``n`` at this config's scale (at least 1)."""
        return max(1, int(round(n * self.scale)))

    @property
    def u1_channels(self) -> int:
        return GRID_CHANNELS + self.ch(self.gated_channels) + self.ch(self.base_channels)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls(**parse_key_values(text, cls))


def parse_key_values(text: str, cls, exclude: tuple[str, ...] = ()) -> dict:
    """Parse ``key=value`` lines into typed keyword arguments for dataclass ``cls``.

    Blank lines and ``#`` comments are ignored; unknown keys (and keys named
    in ``exclude``) are an error.
    """
    types = {f.name: f.type for f in fields(cls) if f.name not in exclude}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(value, str(types[key]), key)
    return out


def _coerce(value: str, type_name: str, key: str):
    if type_name == "str":
        return value
    try:
        if type_name.startswith("bool"):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if type_name.startswith("int"):
            return int(value)
        if type_name.startswith("float"):
            return float(value)
        if type_name.startswith("tuple[str"):
            return tuple(v.strip() for v in value.strip("()[] ").split(",") if v.strip())
        if type_name.startswith("tuple"):
            return tuple(float(v) for v in value.strip("()[] ").split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {type_name}") from None
    if value.lower() in ("none", ""):
        return None
    return value


# ------------------------------------------------------------------ building blocks

class DoubleConv(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(self.conv1(x))


class Encoder(Module):
    """Stem double conv, then ``len(widths)`` stages of {maxpool, double conv}.

    Returns every stage output, finest first; the last one is the bottleneck.
    """

    def __init__(self, in_ch: int, stem_ch: int, widths: list[int], rng: np.random.Generator):
        self.stem = DoubleConv(in_ch, stem_ch, rng)
        self.stages = []
        prev = stem_ch
        for w in widths:
            self.stages.append(DoubleConv(prev, w, rng))
            prev = w

    def forward(self, x: Tensor) -> list[Tensor]:
        feats = [self.stem(x)]
        for stage in self.stages:
            feats.append(stage(F.maxpool2x2(feats[-1])))
        return feats


class SkipPaths(Module):
    """One conv3x3+ReLU per skip connection."""

    def __init__(self, widths: list[int], rng: np.random.Generator):
        self.convs = [Conv2d(w, w, 3, rng) for w in widths]

    def forward(self, feats: list[Tensor]) -> list[Tensor]:
        return [conv(f) for conv, f in zip(self.convs, feats)]


class DecoderStage(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        self.up_conv = Conv2d(in_ch, out_ch, 3, rng)
        self.fuse = Conv2d(2 * out_ch, out_ch, 3, rng)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        up = self.up_conv(F.upsample_bilinear2x(x))
        return self.fuse(F.concat_channels([up, skip]))


class Decoder(Module):
    """Five {upsample, conv, concat skip, conv} stages and a linear 1x1 head.

    ``skip_widths`` lists skip channels finest first, matching the encoder.
    """

    def __init__(self, in_ch: int, skip_widths: list[int], out_ch: int, rng: np.random.Generator):
        self.stages = []
        prev = in_ch
        for w in reversed(skip_widths):
            self.stages.append(DecoderStage(prev, w, rng))
            prev = w
        self.head = Conv2d(prev, out_ch, 1, rng, activation="none")
        # start the grid inside tanh's linear range
        self.head.weight.data *= HEAD_INIT_SCALE

    def forward(self, x: Tensor, skips: list[Tensor]) -> Tensor:
        for stage, skip in zip(self.stages, reversed(skips)):
            x = stage(x, skip)
        return self.head(x)


class GCL(Module):
    """Gated convolutional layer: ``conv3x3(stream * a + stream)`` with
    ``a = sigmoid(conv1x1([stream, resize(feat)]))``.

    The 1x1 attention conv over the concatenation is held as two halves. The
    feature half is applied before resizing: a 1x1 conv and a bilinear resize
    commute, and the feature tensors are far smaller before upsampling.
    """

    def __init__(self, stream_ch: int, feat_ch: int, rng: np.random.Generator):
        self.att_stream = Conv2d(stream_ch, 1, 1, rng, activation="none")
        self.att_feat = Conv2d(feat_ch, 1, 1, rng, activation="none", bias=False)
        self.conv = Conv2d(stream_ch, stream_ch, 3, rng)

    def attention(self, stream: Tensor, feat: Tensor) -> Tensor:
        logit_feat = F.resize_bilinear(self.att_feat(feat), stream.shape[2:])
        return F.sigmoid(self.att_stream(stream) + logit_feat)

    def forward(self, stream: Tensor, feat: Tensor) -> Tensor:
        alpha = self.attention(stream, feat)
        return self.conv(stream * alpha + stream)


class GatedBranch(Module):
    def __init__(self, l2_ch: int, l4_ch: int, l5_ch: int, gated_ch: int, rng: np.random.Generator):
        self.init = Conv2d(l2_ch, gated_ch, 1, rng, activation="none")
        self.gcl4 = GCL(gated_ch, l4_ch, rng)
        self.gcl5 = GCL(gated_ch, l5_ch, rng)
        self.features = Conv2d(gated_ch, gated_ch, 1, rng, activation="none")
        self.edge_head = Conv2d(gated_ch, 1, 1, rng, activation="none")

    def forward(self, l2: Tensor, l4: Tensor, l5: Tensor, size: int) -> tuple[Tensor, Tensor]:
        stream = F.resize_bilinear(self.init(l2), (size, size))
        stream = self.gcl4(stream, l4)
        stream = self.gcl5(stream, l5)
        return self.features(stream), self.edge_head(stream)


# ------------------------------------------------------------------ the network

@dataclass
class ModelOutput:
    grid: Tensor
    edge_logits: Tensor | None
    edge_features: Tensor
    intermediates: dict[str, Tensor] = field(default_factory=dict)


class PrimaryUNet(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        b = cfg.base_channels
        self.widths = [cfg.ch(b * 2 ** k) for k in range(1, DEPTH + 1)]
        stem = cfg.ch(b)
        self.encoder = Encoder(3, stem, self.widths, rng)
        skip_widths = [stem] + self.widths[:-1]
        self.skips = SkipPaths(skip_widths, rng)
        self.decoder = Decoder(self.widths[-1], skip_widths, GRID_CHANNELS, rng)
        self.gated = None
        if cfg.gate_enabled:
            self.gated = GatedBranch(self.widths[0], self.widths[2], self.widths[3], cfg.ch(cfg.gated_channels), rng)
        self.gated_ch = cfg.ch(cfg.gated_channels)

    def forward(self, image: Tensor) -> tuple[Tensor, Tensor | None, Tensor, dict[str, Tensor]]:
        feats = self.encoder(image)
        x, l2, l4, l5, bott = feats[0], feats[1], feats[3], feats[4], feats[5]
        o = self.decoder(bott, self.skips(feats[:-1]))
        n, _, s, _ = image.shape
        if self.gated is not None:
            go, edge_logits = self.gated(l2, l4, l5, s)
        else:
            go, edge_logits = Tensor(np.zeros((n, self.gated_ch, s, s), dtype=image.dtype)), None
        u1 = F.concat_channels([o, go, x])
        inter = {"X": x, "L2": l2, "L4": l4, "L5": l5, "B": bott, "O": o, "Go": go, "U1": u1}
        return u1, edge_logits, go, inter


class SecondaryUNet(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        b = cfg.base_channels
        stem = cfg.ch(2 * b)
        self.widths = [stem] + [cfg.ch(b * 2 ** k) for k in range(2, DEPTH + 1)]
        self.encoder = Encoder(cfg.u1_channels, stem, self.widths, rng)
        skip_widths = [stem] + self.widths[:-1]
        self.skips = SkipPaths(skip_widths, rng)
        bott = self.widths[-1]
        self.bifurcated = cfg.bifurcated
        if cfg.bifurcated:
            self.halves = [bott // 2, bott - bott // 2]
            if cfg.decoder_shared_weights:
                if self.halves[0] != self.halves[1]:
                    raise ConfigError(f"shared decoders need an even bottleneck width, got {bott}")
                shared = Decoder(self.halves[0], skip_widths, 1, rng)
                self.decoders = [shared, shared]
            else:
                self.decoders = [Decoder(h, skip_widths, 1, rng) for h in self.halves]
        else:
            self.decoders = [Decoder(bott, skip_widths, GRID_CHANNELS, rng)]

    def forward(self, u1: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
        feats = self.encoder(u1)
        skips = self.skips(feats[:-1])
        bott = feats[-1]
        inter = {"B_secondary": bott}
        if self.bifurcated:
            b1, b2 = F.split_channels(bott, self.halves)
            o1 = self.decoders[0](b1, skips)
            o2 = self.decoders[1](b2, skips)
            inter.update(B1=b1, B2=b2, O1=o1, O2=o2)
            raw = F.concat_channels([o1, o2])
        else:
            raw = self.decoders[0](bott, skips)
        grid = F.tanh(raw)
        inter["g"] = grid
        return grid, inter


class StackedUNet(Module):
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        self.config = cfg if cfg is not None else ModelConfig()
        rng = np.random.default_rng(seed)
        self.primary = PrimaryUNet(self.config, rng)
        self.secondary = SecondaryUNet(self.config, rng)

    def forward(self, image: Tensor) -> ModelOutput:
        """``image`` is ``(N, 3, S, S)`` in [0, 1] with ``S = config.input_size``."""
        s = self.config.input_size
        if image.ndim != 4 or image.shape[1] != 3 or image.shape[2:] != (s, s):
            raise ConfigError(f"model expects (N, 3, {s}, {s}) input, got {image.shape}")
        u1, edge_logits, go, inter = self.primary(image)
        grid, inter2 = self.secondary(u1)
        inter.update(inter2)
        return ModelOutput(grid=grid, edge_logits=edge_logits, edge_features=go, intermediates=inter)

    def decoder_parameters(self) -> int:
        """Parameters owned by the secondary decoders (shared weights counted once)."""
        return sum(p.data.size for name, p in self.named_parameters() if name.startswith("secondary.decoders."))

    def gated_parameters(self) -> int:
        return sum(p.data.size for name, p in self.named_parameters() if name.startswith("primary.gated."))

    def summary(self) -> str:
        groups: dict[str, int] = {}
        for name, p in self.named_parameters():
            key = ".".join(name.split(".")[:2])
            groups[key] = groups.get(key, 0) + p.data.size
        width = max(len(k) for k in groups)
        lines = [f"{k:<{width}}  {v:>12,d}" for k, v in groups.items()]
        lines.append(f"{'total':<{width}}  {self.num_parameters():>12,d}")
        return "\n".join(lines)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, params: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(params))
        extra = sorted(set(params) - set(own))
        if missing or extra:
            raise DataIntegrityError(f"checkpoint does not match model: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in own.items():
            if params[name].shape != p.data.shape:
                raise DataIntegrityError(f"{name}: checkpoint shape {params[name].shape} != model {p.data.shape}")
            p.data = params[name].astype(p.data.dtype, copy=True)
            p.grad = None


class IdentityGridModel(Module):
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        self.config = cfg if cfg is not None else ModelConfig(architecture="identity")

    def forward(self, image: Tensor) -> ModelOutput:
        n, _, h, w = image.shape
        grid = np.broadcast_to(wg.identity_grid(h, w, image.dtype).transpose(2, 0, 1), (n, 2, h, w))
        zeros = Tensor(np.zeros((n, self.config.ch(self.config.gated_channels), h, w), dtype=image.dtype))
        return ModelOutput(grid=Tensor(grid.copy()), edge_logits=None, edge_features=zeros)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_dict(self, params: dict[str, np.ndarray]) -> None:
        if params:
            raise DataIntegrityError("identity model takes no parameters")


def build_model(cfg: ModelConfig | None = None, seed: int = 0):
    cfg = cfg if cfg is not None else ModelConfig()
    if cfg.architecture == "identity":
        return IdentityGridModel(cfg, seed)
    return StackedUNet(cfg, seed)


def config_path(checkpoint: str | os.PathLike) -> Path:
    return Path(str(checkpoint) + ".cfg")


def save_model(path: str | os.PathLike, model: StackedUNet | IdentityGridModel) -> None:
    """Write the parameters and, next to them, the ``key=value`` model config."""
    save_params(path, model.state_dict())
    config_path(path).write_text(model.config.to_text(), encoding="utf-8")


def load_model(path: str | os.PathLike) -> StackedUNet | IdentityGridModel:
    cfg_file = config_path(path)
    if not cfg_file.exists():
        raise DataIntegrityError(f"model config {cfg_file} not found next to checkpoint")
    model = build_model(ModelConfig.from_text(cfg_file.read_text(encoding="utf-8")))
    model.load_state_dict(load_params(path))
    return model
