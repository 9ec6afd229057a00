"""Dual-path time-frequency Transformer mask estimator.

Feature tensors are channels-last, ``(B, F', T', N)``: layer norms and the
1x1 convolutions (plain linear maps over the feature axis) act on the last
dimension, and the dual-path blocks are views along the first two grid axes.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from functools import lru_cache

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError, ParameterError
from .tf_transform import StftConfig, apply_masks, decode_masks, encode_logamp_phase, stft

LN_EPS = 1e-5
N_SOURCES = 2


@dataclass(frozen=True)
class ModelConfig:
    n_features: int = 128
    n_layers: int = 2
    n_stacks: int = 2
    n_heads: int = 2
    dropout: float = 0.1
    kernel: int = 4
    stride: int = 2
    ffw_dim: int | None = None
    n_fft: int = 512
    hop: int = 256
    signal_length: int = 65280

    def __post_init__(self):
        if self.n_features % self.n_heads:
            raise ParameterError(
                f"n_features={self.n_features} not divisible by n_heads={self.n_heads}"
            )
        if self.n_features % 2:
            raise ParameterError("n_features must be even for sinusoidal encodings")
        if (self.kernel - self.stride) % 2:
            raise ParameterError("kernel - stride must be even for exact upsampling")

    @property
    def ffw(self) -> int:
        return self.ffw_dim or self.n_features

    @property
    def out_channels(self) -> int:
        return 2 * N_SOURCES

    @property
    def stft(self) -> StftConfig:
        return StftConfig(self.n_fft, self.hop)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


FULL_CONFIG = ModelConfig()
TINY_CONFIG = ModelConfig(n_features=8, n_layers=1, n_stacks=1, n_heads=2, signal_length=2048)


@lru_cache(maxsize=64)
def _pe_table(length: int, dim: int) -> torch.Tensor:
    pos = np.arange(length)[:, None]
    i = np.arange(dim // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / dim)
    table = np.empty((length, dim))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return torch.from_numpy(table)


def positional_encoding(length: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Sinusoidal table ``E[p, 2i] = sin(p / 10000^(2i/N))``, ``E[p, 2i+1] = cos(...)``."""
    if dim % 2:
        raise ParameterError(f"positional encoding needs an even dimension, got {dim}")
    return _pe_table(length, dim).to(dtype=dtype, device=device)


def same_padding(size: int, kernel: int, stride: int) -> tuple:
    """(before, after) zero padding giving ``ceil(size / stride)`` outputs."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


class SeparableConv2d(nn.Module):
    """Depthwise kxk convolution (multiplier 1) followed by a biased pointwise map."""

    def __init__(self, in_ch, out_ch, kernel, stride=1):
        super().__init__()
        self.kernel, self.stride = kernel, stride
        self.depthwise = nn.Conv2d(in_ch, in_ch, kernel, stride, groups=in_ch, bias=False)
        self.pointwise = nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x):
        # x: (B, C, H, W)
        ph = same_padding(x.shape[-2], self.kernel, self.stride)
        pw = same_padding(x.shape[-1], self.kernel, self.stride)
        x = F.pad(x, (*pw, *ph))
        return self.pointwise(self.depthwise(x))


class FeatureExtractor(nn.Module):
    def __init__(self, cfg: ModelConfig, in_ch: int = 2):
        super().__init__()
        n = cfg.n_features
        self.stride = cfg.stride
        self.conv1 = SeparableConv2d(in_ch, n, cfg.kernel)
        self.norm1 = nn.LayerNorm(n, eps=LN_EPS)
        self.conv2 = SeparableConv2d(n, n, cfg.kernel, cfg.stride)
        self.norm2 = nn.LayerNorm(n, eps=LN_EPS)
        self.proj = nn.Linear(n, n)
        self.norm3 = nn.LayerNorm(n, eps=LN_EPS)

    def forward(self, x):
        """``(B, F, T, 2) -> (B, F/s, T/s, N)``; F and T must be stride multiples."""
        f, t = x.shape[1:3]
        if f % self.stride or t % self.stride:
            raise DimensionError(f"grid {f}x{t} not divisible by stride {self.stride}")
        x = x.permute(0, 3, 1, 2)
        e1 = self.norm1(self.conv1(x).permute(0, 2, 3, 1))
        e2 = self.conv2(e1.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
        e2 = F.relu(self.norm2(e2))
        return self.norm3(self.proj(e2))


class MultiHeadAttention(nn.Module):
    def __init__(self, dim, n_heads):
        super().__init__()
        if dim % n_heads:
            raise ParameterError(f"dim={dim} not divisible by heads={n_heads}")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def _split(self, x):
        b, length, _ = x.shape
        return x.view(b, length, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, z):
        # z: (B, L, N)
        q, k, v = self._split(self.query(z)), self._split(self.key(z)), self._split(self.value(z))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        attn = torch.softmax(scores, dim=-1) @ v
        b, _, length, _ = attn.shape
        return self.out(attn.transpose(1, 2).reshape(b, length, -1))


class EncoderLayer(nn.Module):
    """Post-norm Transformer encoder layer: MHA and feed-forward sublayers."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        n = cfg.n_features
        self.attention = MultiHeadAttention(n, cfg.n_heads)
        self.drop1 = nn.Dropout(cfg.dropout)
        self.norm1 = nn.LayerNorm(n, eps=LN_EPS)
        self.ffw = nn.Sequential(nn.Linear(n, cfg.ffw), nn.ReLU(), nn.Linear(cfg.ffw, n))
        self.drop2 = nn.Dropout(cfg.dropout)
        self.norm2 = nn.LayerNorm(n, eps=LN_EPS)

    def forward(self, z):
        z = self.norm1(self.drop1(self.attention(z)) + z)
        return self.norm2(self.drop2(self.ffw(z)) + z)


class TransformerEncoderBlock(nn.Module):
    """Positional encoding, ``I`` encoder layers, and a residual around the whole block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_layers))

    def forward(self, z):
        # z: (B, L, N); one weight set serves every block in the batch
        h = z + positional_encoding(z.shape[1], z.shape[2], z.dtype, z.device)
        for layer in self.layers:
            h = layer(h)
        return h + z


class DualPathModule(nn.Module):
    """F-TE over the T' frequency blocks, then T-TE over the F' time blocks."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.freq_encoder = TransformerEncoderBlock(cfg)
        self.time_encoder = TransformerEncoderBlock(cfg)

    def freq_pass(self, x):
        b, f, t, n = x.shape
        blocks = x.transpose(1, 2).reshape(b * t, f, n)
        return self.freq_encoder(blocks).view(b, t, f, n).transpose(1, 2)

    def time_pass(self, x):
        b, f, t, n = x.shape
        return self.time_encoder(x.reshape(b * f, t, n)).view(b, f, t, n)

    def forward(self, x):
        return self.time_pass(self.freq_pass(x))


class DualPathTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.stacks = nn.ModuleList(DualPathModule(cfg) for _ in range(cfg.n_stacks))

    def forward(self, x):
        for stack in self.stacks:
            x = stack(x)
        return x


class GatedOutput(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        n = cfg.n_features
        self.tanh_proj = nn.Linear(n, n)
        self.sigmoid_proj = nn.Linear(n, n)
        self.proj = nn.Linear(n, n)
        self.norm = nn.LayerNorm(n, eps=LN_EPS)

    def gate(self, x):
        return torch.tanh(self.tanh_proj(x)) * torch.sigmoid(self.sigmoid_proj(x))

    def forward(self, x):
        return self.norm(self.proj(self.gate(x)))


class Separator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        n = cfg.n_features
        pad = (cfg.kernel - cfg.stride) // 2
        self.upsample = nn.ConvTranspose2d(n, n, cfg.kernel, cfg.stride, padding=pad)
        self.norm = nn.LayerNorm(n, eps=LN_EPS)
        self.head = nn.Linear(n, cfg.out_channels)

    def forward(self, x):
        """``(B, F', T', N) -> (B, s F', s T', 4)`` linear mask parameters."""
        up = self.upsample(x.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
        return self.head(F.relu(self.norm(up)))


class RFSeparator(nn.Module):
    """Two-source separator: STFT features in, two time-domain signals out."""

    def __init__(self, cfg: ModelConfig = FULL_CONFIG):
        super().__init__()
        self.config = cfg
        self.extractor = FeatureExtractor(cfg)
        self.transformer = DualPathTransformer(cfg)
        self.gate = GatedOutput(cfg)
        self.separator = Separator(cfg)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                nn.init.xavier_uniform_(m.weight)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def padded_grid(self, f: int, t: int) -> tuple:
        s = self.config.stride
        return -(-f // s) * s, -(-t // s) * s

    def mask_params(self, X_m2):
        """``(B, F, T, 2)`` stacked features to ``(B, F, T, 4)`` mask parameters.

        The grid is zero-padded at the high-frequency / late-time end up to a
        stride multiple and cropped back after upsampling.
        """
        f, t = X_m2.shape[1:3]
        fp, tp = self.padded_grid(f, t)
        x = F.pad(X_m2, (0, 0, 0, tp - t, 0, fp - f))
        x = self.extractor(x)
        x = self.transformer(x)
        x = self.gate(x)
        return self.separator(x)[:, :f, :t]

    def forward(self, x_m):
        """Separate ``(B, t)`` mixtures into ``(B, 2, t)`` estimates."""
        squeeze = x_m.dim() == 1
        if squeeze:
            x_m = x_m.unsqueeze(0)
        cfg = self.config.stft
        X_m = stft(x_m, cfg)
        S = self.mask_params(encode_logamp_phase(X_m))
        out = apply_masks(decode_masks(S), X_m, cfg)
        return out[0] if squeeze else out


def count_params(module: nn.Module) -> int:
    """Learnable scalar count; positional tables are not parameters."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def param_ledger(module: nn.Module) -> list:
    """``(name, shape, count)`` for every learnable tensor, in registration order."""
    return [(n, tuple(p.shape), p.numel()) for n, p in module.named_parameters()]
