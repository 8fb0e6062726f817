"""Noise-prediction U-Net for (B, 1, L, N) episode tensors.

The input's N variables are first mixed by a linear projection into a
latent feature axis; all convolutions are then 1-D along the time axis
(non-causal), applied independently per latent coordinate, across three
resolution levels with skip connections.  Linear maps on the latent axis
accompany every down/up-sampling convolution, and a sinusoidal embedding
of the noise level is added to the activations entering each level.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

CHECKPOINT_FORMAT = "mixdiff-denoiser"
CHECKPOINT_VERSION = 1


def sinusoidal_embed(t, dim: int) -> np.ndarray:
    """Interleaved sin/cos embedding of step t at geometrically spaced frequencies.

    Accepts a scalar step (returns shape (dim,)) or a vector of steps
    (returns (len(t), dim)).  Deterministic; every component lies in [-1, 1].
    """
    if dim % 2 != 0 or dim < 2:
        raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 1):
        raise ValueError("steps must be >= 1")
    freqs = np.power(10000.0, -2.0 * np.arange(dim // 2) / dim)
    angles = np.multiply.outer(t, freqs)
    out = np.empty(angles.shape[:-1] + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def default_seq_lengths(max_length: int) -> tuple[int, int, int]:
    """Length ladder (L, ~L/4, ~L/16) used when a dataset does not pin one."""
    l2 = max(max_length // 4, 2)
    l3 = max(max_length // 16, 2)
    if not max_length > l2 > l3:
        raise ValueError(
            f"cannot derive a decreasing length ladder from L={max_length}; "
            "pass seq_lengths explicitly"
        )
    return (max_length, l2, l3)


@dataclass(frozen=True)
class DenoiserConfig:
    """Shape hyper-parameters of the U-Net; everything else is derived."""

    input_width: int
    seq_lengths: tuple[int, int, int]
    latent_width: int = 256
    level_channels: tuple[int, int, int] = (1, 10, 20)
    block_hidden: tuple[int, int] = (10, 20)
    bottleneck_hidden: int = 10
    blocks_per_level: int = 3
    noise_embed_dim: int = 100

    def __post_init__(self):
        object.__setattr__(self, "seq_lengths", tuple(int(v) for v in self.seq_lengths))
        object.__setattr__(self, "level_channels", tuple(int(v) for v in self.level_channels))
        object.__setattr__(self, "block_hidden", tuple(int(v) for v in self.block_hidden))
        l1, l2, l3 = self.seq_lengths
        if not (l1 > l2 > l3 >= 1):
            raise ValueError(f"sequence lengths must strictly decrease, got {self.seq_lengths}")
        if self.level_channels[0] != 1:
            raise ValueError("level 1 operates on the single input feature channel")
        if self.input_width < 1 or self.latent_width < 1:
            raise ValueError("input_width and latent_width must be positive")
        if self.noise_embed_dim % 2 != 0:
            raise ValueError("noise_embed_dim must be even")
        if self.blocks_per_level < 1:
            raise ValueError("blocks_per_level must be >= 1")


def _conv_time(conv: nn.Conv1d, x: torch.Tensor) -> torch.Tensor:
    """Apply a Conv1d along the time axis of (B, C, L, E), per latent coordinate.

    Computed as a 2-D convolution with a (k, 1) kernel so the latent axis
    needs no reshuffling; identical to running the 1-D conv for every
    latent coordinate separately.
    """
    return F.conv2d(
        x,
        conv.weight.unsqueeze(-1),
        conv.bias,
        stride=(conv.stride[0], 1),
        padding=(conv.padding[0], 0),
    )


class FeatureBlock(nn.Module):
    """Layer norm followed by two time-axis convolutions, with a residual path."""

    def __init__(self, channels: int, hidden: int, latent_width: int):
        super().__init__()
        self.norm = nn.LayerNorm(latent_width)
        self.conv_in = nn.Conv1d(channels, hidden, kernel_size=3, padding=1)
        self.conv_out = nn.Conv1d(hidden, channels, kernel_size=3, padding=1)

    def forward(self, x):
        h = self.norm(x)
        h = F.silu(_conv_time(self.conv_in, h))
        h = _conv_time(self.conv_out, h)
        return x + h


class Downsample(nn.Module):
    """Strided time conv to the target length plus a latent-axis linear mix."""

    def __init__(self, in_channels, out_channels, in_len, out_len, latent_width):
        super().__init__()
        stride = in_len // out_len
        if stride < 2:
            raise ValueError(f"cannot downsample {in_len} -> {out_len}")
        self.out_len = out_len
        self.conv = nn.Conv1d(in_channels, out_channels, kernel_size=stride, stride=stride)
        self.mix = nn.Linear(latent_width, latent_width)

    def forward(self, x):
        h = _conv_time(self.conv, x)[:, :, : self.out_len, :]
        return self.mix(h)


class Upsample(nn.Module):
    """Nearest-neighbour stretch to the target length, then conv and latent mix."""

    def __init__(self, in_channels, out_channels, in_len, out_len, latent_width):
        super().__init__()
        if out_len <= in_len:
            raise ValueError(f"cannot upsample {in_len} -> {out_len}")
        self.factor = math.ceil(out_len / in_len)
        self.out_len = out_len
        self.conv = nn.Conv1d(in_channels, out_channels, kernel_size=3, padding=1)
        self.mix = nn.Linear(latent_width, latent_width)

    def forward(self, x):
        h = x.repeat_interleave(self.factor, dim=2)[:, :, : self.out_len, :]
        h = _conv_time(self.conv, h)
        return self.mix(h)


class DenoisingUnet(nn.Module):
    """Predicts the injected noise for a batch of corrupted episodes.

    forward(x, t) takes x of shape (B, 1, L, N) and a step (int, or a
    length-B vector of per-element steps) and returns a same-shape tensor.
    """

    def __init__(self, config: DenoiserConfig, seed: int = 0):
        super().__init__()
        self.config = config
        e = config.latent_width
        c1, c2, c3 = config.level_channels
        h1, h2 = config.block_hidden
        l1, l2, l3 = config.seq_lengths
        nb = config.blocks_per_level

        self.in_proj = nn.Linear(config.input_width, e)
        self.out_proj = nn.Linear(e, config.input_width)
        self.embed_proj = nn.ModuleList(
            nn.Linear(config.noise_embed_dim, e) for _ in range(5)
        )

        self.enc1 = nn.Sequential(*[FeatureBlock(c1, h1, e) for _ in range(nb)])
        self.down1 = Downsample(c1, c2, l1, l2, e)
        self.enc2 = nn.Sequential(*[FeatureBlock(c2, h2, e) for _ in range(nb)])
        self.down2 = Downsample(c2, c3, l2, l3, e)

        # bottleneck: the middle block squeezes the channel width
        mid_hidden = [c3] * nb
        mid_hidden[nb // 2] = config.bottleneck_hidden
        self.mid = nn.Sequential(*[FeatureBlock(c3, h, e) for h in mid_hidden])

        self.up2 = Upsample(c3, c2, l3, l2, e)
        self.merge2 = nn.Conv1d(2 * c2, c2, kernel_size=1)
        self.dec2 = nn.Sequential(*[FeatureBlock(c2, h2, e) for _ in range(nb)])
        self.up1 = Upsample(c2, c1, l2, l1, e)
        self.merge1 = nn.Conv1d(2 * c1, c1, kernel_size=1)
        self.dec1 = nn.Sequential(*[FeatureBlock(c1, h1, e) for _ in range(nb)])

        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        """Fan-in-scaled uniform init from an explicit generator; zero output map."""
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, (nn.Linear, nn.Conv1d)):
                    fan_in = m.weight.shape[1] * (
                        m.weight.shape[2] if m.weight.ndim == 3 else 1
                    )
                    bound = 1.0 / math.sqrt(fan_in)
                    m.weight.uniform_(-bound, bound, generator=gen)
                    if m.bias is not None:
                        m.bias.uniform_(-bound, bound, generator=gen)
                elif isinstance(m, nn.LayerNorm):
                    m.weight.fill_(1.0)
                    m.bias.fill_(0.0)
            self.out_proj.weight.zero_()
            self.out_proj.bias.zero_()

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _embedding(self, t, like: torch.Tensor) -> torch.Tensor:
        t_arr = np.asarray(t.detach().cpu() if isinstance(t, torch.Tensor) else t)
        emb = sinusoidal_embed(t_arr, self.config.noise_embed_dim)
        return torch.as_tensor(emb, dtype=like.dtype, device=like.device)

    def _inject(self, h: torch.Tensor, emb: torch.Tensor, idx: int) -> torch.Tensor:
        e = self.embed_proj[idx](emb)
        if e.ndim == 2:  # one step per batch element
            e = e[:, None, None, :]
        return h + e

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        b, c, length, width = x.shape
        if c != 1 or length != self.config.seq_lengths[0] or width != self.config.input_width:
            raise ValueError(
                f"input shape {tuple(x.shape)} does not match config "
                f"(L={self.config.seq_lengths[0]}, N={self.config.input_width})"
            )
        emb = self._embedding(t, x)

        h = self._inject(self.in_proj(x), emb, 0)
        h = self.enc1(h)
        skip1 = h
        h = self._inject(self.down1(h), emb, 1)
        h = self.enc2(h)
        skip2 = h
        h = self._inject(self.down2(h), emb, 2)
        h = self.mid(h)
        h = self._inject(self.up2(h), emb, 3)
        h = _conv_time(self.merge2, torch.cat([h, skip2], dim=1))
        h = self.dec2(h)
        h = self._inject(self.up1(h), emb, 4)
        h = _conv_time(self.merge1, torch.cat([h, skip1], dim=1))
        h = self.dec1(h)
        return self.out_proj(h)

    def as_denoiser(self):
        """Adapter for the numpy sampling loop: (float32 array, t) -> float32 array."""

        def fn(x: np.ndarray, t: int) -> np.ndarray:
            with torch.no_grad():
                xt = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
                out = self(xt.to(next(self.parameters()).dtype), int(t))
                return out.to(torch.float32).numpy()

        return fn


def save_checkpoint(model: DenoisingUnet, path: str | Path) -> None:
    """Write config plus named parameter arrays; exact round trip."""
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(model.config),
            "state": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path: str | Path) -> DenoisingUnet:
    doc = torch.load(path, map_location="cpu", weights_only=True)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a denoiser checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    cfg = dict(doc["config"])
    for key in ("seq_lengths", "level_channels", "block_hidden"):
        cfg[key] = tuple(cfg[key])
    model = DenoisingUnet(DenoiserConfig(**cfg))
    model.load_state_dict(doc["state"])
    return model


def find_nonfinite_layer(model: nn.Module, x: torch.Tensor, t) -> str | None:
    """Name of the first submodule producing a non-finite output, if any.

    Diagnostic used when training aborts on a non-finite loss.
    """
    first: list[str] = []
    hooks = []

    def make_hook(name):
        def hook(_mod, _inp, out):
            if isinstance(out, torch.Tensor) and not first and not torch.isfinite(out).all():
                first.append(name)

        return hook

    for name, mod in model.named_modules():
        if name:
            hooks.append(mod.register_forward_hook(make_hook(name)))
    try:
        with torch.no_grad():
            model(x, t)
    finally:
        for h in hooks:
            h.remove()
    return first[0] if first else None
