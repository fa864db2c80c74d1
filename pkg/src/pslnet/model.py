"""PSLNet: parallel watermark/noise removal network built from improved U-Nets.

The upper branch stacks a denoising U-Net (dn) and a watermark-removal U-Net
(wrn); the lower branch stacks two joint removal U-Nets (dw1, dw2) whose
3-channel outputs are gated by squeeze-style channel attention driven from the
upper branch. A fusion head (conv + LeakyReLU over the concatenated branch
outputs) produces the final image. Each improved U-Net carries its raw input
on the top skip connection and contains 18 convolutions at depth 4, so each
branch is a 36-conv network.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Input tensor shape violates a model precondition."""


class ConfigurationError(ValueError):
    """Checkpoint or weight data does not match the model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 8
    depth: int = 4
    interaction_hidden: int = 16
    leaky_slope: float = 0.2
    channel_schedule: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_channels < 1 or self.interaction_hidden < 1:
            raise ValueError("channel widths must be >= 1")
        if self.channel_schedule is not None:
            object.__setattr__(self, "channel_schedule", tuple(self.channel_schedule))
            if len(self.channel_schedule) != self.depth:
                raise ValueError("channel_schedule must list one width per scale")
            if any(w < 1 for w in self.channel_schedule):
                raise ValueError("channel widths must be >= 1")

    def encoder_widths(self) -> tuple[int, ...]:
        if self.channel_schedule is not None:
            return self.channel_schedule
        return tuple(self.base_channels * 2 ** s for s in range(self.depth))

    def to_dict(self) -> dict:
        return {
            "base_channels": self.base_channels,
            "depth": self.depth,
            "interaction_hidden": self.interaction_hidden,
            "leaky_slope": self.leaky_slope,
            "channel_schedule": (None if self.channel_schedule is None
                                 else list(self.channel_schedule)),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        sched = d.get("channel_schedule")
        return cls(base_channels=d["base_channels"], depth=d["depth"],
                   interaction_hidden=d["interaction_hidden"],
                   leaky_slope=d["leaky_slope"],
                   channel_schedule=None if sched is None else tuple(sched))


# Toy preset trains in minutes on CPU; the paper-scale preset is sized so the
# full network lands near 2.5M parameters (see summarize()).
TOY_CONFIG = ModelConfig(base_channels=8, depth=4)
PAPER_CONFIG = ModelConfig(base_channels=9, depth=4)


class EncBlock(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)

    def forward(self, x):
        x = F.relu(self.conv1(x))
        return F.relu(self.conv2(x))


class DecBlock(nn.Module):
    """Nearest-neighbor upsample + conv, then a conv over the skip concat."""

    def __init__(self, c_in, c_mid, c_skip, c_out, final=False):
        super().__init__()
        self.up = nn.Conv2d(c_in, c_mid, 3, padding=1)
        self.fuse = nn.Conv2d(c_mid + c_skip, c_out, 3, padding=1)
        self.final = final

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = F.relu(self.up(x))
        x = torch.cat([x, skip], dim=1)
        y = self.fuse(x)
        return y if self.final else F.relu(y)


class IUNet(nn.Module):
    """U-Net whose top skip carries the raw input image instead of early features.

    18 convolutions at depth 4: 2 per encoder stage, 2 in the bottleneck,
    2 per decoder stage. The last decoder conv projects straight to 3 channels
    with no activation.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        widths = config.encoder_widths()
        self.depth = config.depth
        c = 3
        for s, w in enumerate(widths):
            self.add_module(f"enc{s}", EncBlock(c, w))
            c = w
        self.bottleneck = EncBlock(c, 2 * c)
        c = 2 * c
        for s in reversed(range(self.depth)):
            c_skip = widths[s] if s > 0 else 3
            c_out = widths[s] if s > 0 else 3
            self.add_module(f"dec{s}", DecBlock(c, widths[s], c_skip, c_out,
                                                final=(s == 0)))
            c = c_out
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        _check_input(x, self.depth)
        skips = [x]
        h = x
        for s in range(self.depth):
            h = getattr(self, f"enc{s}")(h)
            if s >= 1:
                skips.append(h)
            h = self.pool(h)
        h = self.bottleneck(h)
        for s in reversed(range(self.depth)):
            h = getattr(self, f"dec{s}")(h, skips[s])
        return h


class InteractionGate(nn.Module):
    """Squeeze-style channel gate: global pool -> conv -> ReLU -> conv -> sigmoid."""

    def __init__(self, channels=3, hidden=16):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, hidden, 1)
        self.conv2 = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        g = x.mean(dim=(2, 3), keepdim=True)
        g = F.relu(self.conv1(g))
        return torch.sigmoid(self.conv2(g))


class UpperBranch(nn.Module):
    """Task decomposition: denoise first (dn), then remove the watermark (wrn)."""

    def __init__(self, config):
        super().__init__()
        self.dn = IUNet(config)
        self.wrn = IUNet(config)


class LowerBranch(nn.Module):
    """Degradation-model view: two stacked U-Nets remove noise and watermark jointly."""

    def __init__(self, config):
        super().__init__()
        self.dw1 = IUNet(config)
        self.dw2 = IUNet(config)


class FusionHead(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.conv = nn.Conv2d(6, 3, 3, padding=1)
        self.slope = config.leaky_slope

    def forward(self, upper, lower):
        return F.leaky_relu(self.conv(torch.cat([upper, lower], dim=1)),
                            negative_slope=self.slope)


@dataclass
class PslnetOutput:
    """The three network outputs plus named intermediate activations."""

    upper: torch.Tensor
    lower: torch.Tensor
    fused: torch.Tensor
    intermediates: dict = field(default_factory=dict)


def _check_input(x, depth):
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected (N, 3, H, W) input, got {tuple(x.shape)}")
    mult = 1 << depth
    if x.shape[2] % mult or x.shape[3] % mult:
        raise ShapeError(
            f"spatial dims {tuple(x.shape[2:])} must be divisible by {mult}")


class PSLNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.upper = UpperBranch(config)
        self.lower = LowerBranch(config)
        self.interact1 = InteractionGate(3, config.interaction_hidden)
        self.interact2 = InteractionGate(3, config.interaction_hidden)
        self.em = FusionHead(config)

    def forward(self, x, *, interactions_on=True, em_on=True) -> PslnetOutput:
        _check_input(x, self.config.depth)
        dn_out = self.upper.dn(x)
        upper = self.upper.wrn(dn_out)
        dw1_out = self.lower.dw1(x)
        if interactions_on:
            gate1 = self.interact1(dn_out)
            gate2 = self.interact2(upper)
        else:
            ones = x.new_ones((x.shape[0], 3, 1, 1))
            gate1 = gate2 = ones
        lower = self.lower.dw2(gate1 * dw1_out) * gate2
        fused = self.em(upper, lower) if em_on else lower
        return PslnetOutput(upper=upper, lower=lower, fused=fused,
                            intermediates={"dn_out": dn_out, "dw1_out": dw1_out,
                                           "gate1": gate1, "gate2": gate2})


def init_weights(module: nn.Module, seed: int) -> None:
    """He fan-in init for conv weights, zeros for biases, from a seeded generator."""
    gen = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.dim() > 1:
                fan_in = int(np.prod(p.shape[1:]))
                std = math.sqrt(2.0 / fan_in)
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64)
                        .mul_(std).to(p.dtype))
            else:
                p.zero_()


def count_conv_layers(module: nn.Module) -> int:
    return sum(1 for m in module.modules() if isinstance(m, nn.Conv2d))


# ---------------------------------------------------------------------------
# parameter / FLOP accounting

@dataclass(frozen=True)
class LayerSpec:
    """One convolution in the graph; ``scale`` halvings, or spatial 1x1 if pooled."""

    name: str
    kernel: int
    c_in: int
    c_out: int
    scale: int | None  # None => runs on globally pooled 1x1 activations

    @property
    def params(self) -> int:
        return self.kernel * self.kernel * self.c_in * self.c_out + self.c_out

    def spatial(self, h: int, w: int) -> int:
        if self.scale is None:
            return 1
        return (h >> self.scale) * (w >> self.scale)


@dataclass(frozen=True)
class ModelSummary:
    parameter_count: int
    layers: tuple[LayerSpec, ...]

    def flops_at(self, h: int, w: int) -> int:
        """Multiply-accumulate count times two, summed over all convolutions."""
        return sum(2 * s.kernel * s.kernel * s.c_in * s.c_out * s.spatial(h, w)
                   for s in self.layers)


def _iunet_layers(config: ModelConfig, prefix: str):
    widths = config.encoder_widths()
    c = 3
    for s, w in enumerate(widths):
        yield LayerSpec(f"{prefix}.enc{s}.conv1", 3, c, w, s)
        yield LayerSpec(f"{prefix}.enc{s}.conv2", 3, w, w, s)
        c = w
    yield LayerSpec(f"{prefix}.bottleneck.conv1", 3, c, 2 * c, config.depth)
    yield LayerSpec(f"{prefix}.bottleneck.conv2", 3, 2 * c, 2 * c, config.depth)
    c = 2 * c
    for s in reversed(range(config.depth)):
        c_skip = widths[s] if s > 0 else 3
        c_out = widths[s] if s > 0 else 3
        yield LayerSpec(f"{prefix}.dec{s}.up", 3, c, widths[s], s)
        yield LayerSpec(f"{prefix}.dec{s}.fuse", 3, widths[s] + c_skip, c_out, s)
        c = c_out


def summarize(config: ModelConfig) -> ModelSummary:
    """Exact parameter and FLOP accounting derived from the config alone."""
    layers = []
    for prefix in ("upper.dn", "upper.wrn", "lower.dw1", "lower.dw2"):
        layers.extend(_iunet_layers(config, prefix))
    for gate in ("interact1", "interact2"):
        layers.append(LayerSpec(f"{gate}.conv1", 1, 3, config.interaction_hidden, None))
        layers.append(LayerSpec(f"{gate}.conv2", 1, config.interaction_hidden, 3, None))
    layers.append(LayerSpec("em.conv", 3, 6, 3, 0))
    layers = tuple(layers)
    return ModelSummary(parameter_count=sum(s.params for s in layers), layers=layers)


# ---------------------------------------------------------------------------
# checkpoint container: zip of meta.json + one little-endian float32 blob
# per parameter, named by its hierarchical path

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def write_container(path, meta: dict, blobs: dict) -> None:
    """Write a weight container with deterministic bytes (fixed zip metadata)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("meta.json", date_time=_ZIP_EPOCH),
                    json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(blobs):
            arr = np.ascontiguousarray(blobs[name], dtype="<f4")
            zf.writestr(zipfile.ZipInfo(name, date_time=_ZIP_EPOCH), arr.tobytes())
    path.write_bytes(buf.getvalue())


def read_container(path) -> tuple[dict, dict]:
    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read("meta.json").decode("utf-8"))
        blobs = {n: np.frombuffer(zf.read(n), dtype="<f4")
                 for n in zf.namelist() if n != "meta.json"}
    return meta, blobs


def save_checkpoint(path, model: PSLNet, *, step=0, epoch=0, seed=0,
                    optimizer=None, extra=None) -> Path:
    """Serialize model (and optional Adam moments) into the container format."""
    shapes = {n: list(p.shape) for n, p in model.named_parameters()}
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "step": int(step),
        "epoch": int(epoch),
        "seed": int(seed),
        "shapes": shapes,
    }
    if extra:
        meta["extra"] = extra
    blobs = {n: p.detach().cpu().numpy() for n, p in model.named_parameters()}
    if optimizer is not None:
        meta["optimizer"] = {"type": "adam", "t": optimizer.t,
                             "beta1": optimizer.beta1, "beta2": optimizer.beta2,
                             "eps": optimizer.eps}
        for n, m in optimizer.m.items():
            blobs[f"optim.exp_avg.{n}"] = m.detach().cpu().numpy()
        for n, v in optimizer.v.items():
            blobs[f"optim.exp_avg_sq.{n}"] = v.detach().cpu().numpy()
    write_container(path, meta, blobs)
    return Path(path)


def load_checkpoint(path, *, dtype=torch.float32):
    """Rebuild a PSLNet from a container; returns (model, meta, adam_state | None).

    ``adam_state`` is {"t": int, "exp_avg": {name: tensor}, "exp_avg_sq": {...}}
    when the checkpoint carries optimizer moments.
    """
    meta, blobs = read_container(path)
    config = ModelConfig.from_dict(meta["model_config"])
    model = PSLNet(config).to(dtype)
    shapes = meta["shapes"]
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in blobs:
                raise ConfigurationError(f"checkpoint is missing parameter {name}")
            if list(p.shape) != shapes.get(name):
                raise ConfigurationError(
                    f"shape mismatch for {name}: model {list(p.shape)}, "
                    f"checkpoint {shapes.get(name)}")
            arr = blobs[name].reshape(p.shape)
            p.copy_(torch.from_numpy(arr.copy()).to(dtype))
    adam_state = None
    if "optimizer" in meta:
        opt = meta["optimizer"]
        adam_state = {"t": int(opt["t"]), "exp_avg": {}, "exp_avg_sq": {}}
        for name, p in model.named_parameters():
            m = blobs[f"optim.exp_avg.{name}"].reshape(p.shape)
            v = blobs[f"optim.exp_avg_sq.{name}"].reshape(p.shape)
            adam_state["exp_avg"][name] = torch.from_numpy(m.copy()).to(dtype)
            adam_state["exp_avg_sq"][name] = torch.from_numpy(v.copy()).to(dtype)
    return model, meta, adam_state


# ---------------------------------------------------------------------------
# numpy <-> tensor plumbing and padded inference

def img_to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) [0,1] array -> (1, 3, H, W) tensor."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {img.shape}")
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))[None]).to(dtype)


def tensor_to_img(t: torch.Tensor) -> np.ndarray:
    """(1, 3, H, W) or (3, H, W) tensor -> (H, W, 3) float64 array."""
    if t.dim() == 4:
        t = t[0]
    return t.detach().cpu().numpy().transpose(1, 2, 0).astype(np.float64)


def pad_to_multiple(img: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad bottom/right so both spatial dims divide ``multiple``."""
    h, w = img.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph >= h or pw >= w:
        raise ShapeError(f"image {h}x{w} too small to pad to a multiple of {multiple}")
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    return img, (h, w)


def restore_image(model: PSLNet, img: np.ndarray, *, which="fused") -> np.ndarray:
    """Run one image through the network, padding and cropping as needed.

    Returns the raw float output (not clipped); callers clip before scoring
    or saving.
    """
    padded, (h, w) = pad_to_multiple(img, 1 << model.config.depth)
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(img_to_tensor(padded, dtype=dtype))
    result = {"fused": out.fused, "upper": out.upper, "lower": out.lower}[which]
    return tensor_to_img(result)[:h, :w]
