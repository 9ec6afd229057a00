"""Fixed time-frequency front and back end of the separator.

Tensors keep torch conventions: time signals are ``(..., t)``, spectrograms
``(..., F, T)`` complex, and stacked real features are channels-last
``(..., F, T, C)``. Everything here is differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DimensionError, NumericError

LOG_EPS = 1e-8
WSUM_FLOOR = 1e-10


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 512
    hop: int = 256

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def window(self, dtype=torch.float32, device=None) -> torch.Tensor:
        return torch.hann_window(self.n_fft, periodic=True, dtype=dtype, device=device)

    def n_frames(self, length: int) -> int:
        return length // self.hop + 1

    def signal_length(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop


DEFAULT_STFT = StftConfig()


def _real_dtype(x: torch.Tensor):
    return x.real.dtype if x.is_complex() else x.dtype


def stft(x: torch.Tensor, config: StftConfig = DEFAULT_STFT) -> torch.Tensor:
    """Centered Hann-windowed one-sided STFT.

    The signal is reflect-padded by half a window on both ends, so a length
    ``t`` input yields ``t / hop + 1`` frames: ``(..., 65280) -> (..., 257, 256)``.
    """
    t = x.shape[-1]
    if t % config.hop:
        raise DimensionError(f"signal length {t} is not a multiple of hop {config.hop}")
    pad = config.n_fft // 2
    if t <= pad:
        raise DimensionError(f"signal length {t} too short for reflect padding of {pad}")
    lead = x.shape[:-1]
    flat = x.reshape(-1, 1, t)
    flat = F.pad(flat, (pad, pad), mode="reflect")[:, 0]
    frames = flat.unfold(-1, config.n_fft, config.hop)  # (B, T, n_fft)
    frames = frames * config.window(x.dtype, x.device)
    spec = torch.fft.rfft(frames, dim=-1).transpose(-1, -2)
    return spec.reshape(*lead, config.n_bins, -1)


def istft(X: torch.Tensor, config: StftConfig = DEFAULT_STFT) -> torch.Tensor:
    """Overlap-add inverse of :func:`stft` with squared-window-sum normalization."""
    if X.dim() < 2 or X.shape[-2] != config.n_bins:
        raise DimensionError(
            f"expected (..., {config.n_bins}, T) spectrogram, got {tuple(X.shape)}"
        )
    n_frames = X.shape[-1]
    lead = X.shape[:-2]
    rdtype = _real_dtype(X)
    win = config.window(rdtype, X.device)
    frames = torch.fft.irfft(X.reshape(-1, config.n_bins, n_frames), n=config.n_fft, dim=-2)
    frames = frames * win[:, None]
    full = (n_frames - 1) * config.hop + config.n_fft
    fold = dict(output_size=(1, full), kernel_size=(1, config.n_fft), stride=(1, config.hop))
    y = F.fold(frames, **fold)[:, 0, 0]
    wsq = (win**2)[None, :, None].expand(1, config.n_fft, n_frames)
    wsum = F.fold(wsq, **fold)[0, 0, 0]
    y = y / wsum.clamp_min(WSUM_FLOOR)
    pad = config.n_fft // 2
    y = y[:, pad : full - pad]
    return y.reshape(*lead, -1)


def encode_logamp_phase(X: torch.Tensor) -> torch.Tensor:
    """Stack ``log10(max(|X|, eps))`` and ``angle(X)`` along a new last axis."""
    logamp = torch.log10(X.abs().clamp_min(LOG_EPS))
    phase = torch.atan2(X.imag, X.real)
    # atan2 gives -pi for a negative-zero imaginary part; keep the range (-pi, pi]
    phase = torch.where(phase <= -torch.pi, phase + 2 * torch.pi, phase)
    return torch.stack([logamp, phase], dim=-1)


def decode_masks(S: torch.Tensor) -> torch.Tensor:
    """Turn ``(..., F, T, 4)`` mask parameters into ``(..., F, T, 2)`` complex masks.

    Channel order is ``[logamp_1, logamp_2, phase_1, phase_2]``.
    """
    if S.shape[-1] != 4:
        raise DimensionError(f"expected 4 mask channels, got {S.shape[-1]}")
    if not torch.isfinite(S).all():
        raise NumericError("non-finite mask parameters")
    mag = torch.pow(10.0, S[..., :2])
    phase = S[..., 2:]
    return torch.complex(mag * torch.cos(phase), mag * torch.sin(phase))


def apply_masks(
    masks: torch.Tensor, X_m: torch.Tensor, config: StftConfig = DEFAULT_STFT
) -> torch.Tensor:
    """Filter the mixture spectrogram with each mask and return ``(..., 2, t)``."""
    if masks.shape[:-1] != X_m.shape:
        raise DimensionError(
            f"mask grid {tuple(masks.shape[:-1])} does not match mixture {tuple(X_m.shape)}"
        )
    filtered = masks.movedim(-1, -3) * X_m.unsqueeze(-3)
    return istft(filtered, config)
