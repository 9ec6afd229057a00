"""Separation metrics, stitched-window swap detection and spectrogram images."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DimensionError, ParameterError
from .loss import IDENTITY, best_permutation, permutation_scores
from .tf_transform import DEFAULT_STFT, StftConfig, stft

DB_RANGE = 80.0


@dataclass
class EvalReport:
    mean_sd_sdr: float
    per_sample_sd_sdr: list
    swap_rate: float
    count: int
    n_boundaries: int = 0
    n_swaps: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def _as_separator(model):
    if isinstance(model, torch.nn.Module):
        model.eval()
    return model


def _dtype(model):
    if isinstance(model, torch.nn.Module):
        return next(model.parameters()).dtype
    return torch.float64


def window_length(model, default: int) -> int:
    cfg = getattr(model, "config", None)
    return getattr(cfg, "signal_length", default)


def swap_flags(perms) -> list:
    """Boundary ``k`` is flagged when windows ``k`` and ``k+1`` use different assignments."""
    perms = [int(p) for p in perms]
    return [a != b for a, b in zip(perms[:-1], perms[1:])]


def detect_channel_swaps(estimates, truths) -> list:
    """Flags for the ``K - 1`` boundaries between consecutive separated windows.

    Both inputs are ``(K, 2, t)``; the reference assignment of each window
    comes from its own ground truth.
    """
    est = torch.as_tensor(estimates)
    ref = torch.as_tensor(truths, dtype=est.dtype)
    if est.shape != ref.shape or est.dim() != 3 or est.shape[1] != 2:
        raise DimensionError(f"expected matching (K, 2, t) arrays, got {tuple(est.shape)} and {tuple(ref.shape)}")
    if est.shape[0] < 2:
        raise DimensionError("need at least two windows to detect swaps")
    return swap_flags(best_permutation(ref, est).tolist())


@torch.no_grad()
def evaluate(model, samples, window: int | None = None) -> EvalReport:
    """Run the separator over every sample and aggregate uPIT-aligned SD-SDR.

    ``model`` is an :class:`~rfsep.model.RFSeparator` or any callable mapping
    ``(B, t)`` mixtures to ``(B, 2, t)`` estimates. Samples longer than the
    model window are cut into consecutive windows whose boundaries are
    checked for channel swaps.
    """
    if not samples:
        raise ParameterError("evaluation set is empty")
    sep = _as_separator(model)
    dtype = _dtype(model)
    per_sample, n_bound, n_swap = [], 0, 0
    for s in samples:
        length = len(s.mixture)
        w = window or window_length(model, length)
        if length % w:
            raise DimensionError(f"sample length {length} is not a multiple of window {w}")
        k = length // w
        mix = torch.as_tensor(np.asarray(s.mixture), dtype=dtype).reshape(k, w)
        ref = torch.as_tensor(np.asarray(s.truths), dtype=dtype).reshape(2, k, w).transpose(0, 1)
        est = sep(mix)
        scores = permutation_scores(ref, est)
        per_sample.append(float(scores.max(-1).values.mean()))
        if k > 1:
            flags = swap_flags((scores[:, 1] > scores[:, IDENTITY]).long().tolist())
            n_bound += len(flags)
            n_swap += sum(flags)
    return EvalReport(
        mean_sd_sdr=float(np.mean(per_sample)),
        per_sample_sd_sdr=per_sample,
        swap_rate=n_swap / n_bound if n_bound else 0.0,
        count=len(per_sample),
        n_boundaries=n_bound,
        n_swaps=n_swap,
    )


def _palette():
    from matplotlib import colormaps

    rgb = (colormaps["viridis"](np.linspace(0, 1, 256))[:, :3] * 255).round().astype(np.uint8)
    return rgb.reshape(-1).tolist()


def spectrogram_db(x, config: StftConfig = DEFAULT_STFT) -> np.ndarray:
    """``(F, T)`` log-magnitude relative to the peak, clipped to ``[-80, 0]`` dB."""
    x = np.asarray(x, dtype=np.float64)
    min_len = config.n_fft // 2 + config.hop
    target = max(-(-len(x) // config.hop) * config.hop, -(-min_len // config.hop) * config.hop)
    x = np.pad(x, (0, target - len(x)))
    mag = stft(torch.from_numpy(x), config).abs().numpy()
    peak = mag.max()
    if peak == 0:
        return np.full(mag.shape, -DB_RANGE)
    with np.errstate(divide="ignore"):
        db = 20 * np.log10(mag / peak)
    return np.clip(db, -DB_RANGE, 0.0)


def emit_spectrogram_image(x, path, zoom: int = 1, config: StftConfig = DEFAULT_STFT) -> Path:
    """Write a palette PNG of the spectrogram: one pixel per bin, low frequency at the bottom."""
    from PIL import Image

    db = spectrogram_db(x, config)
    levels = np.round((db + DB_RANGE) / DB_RANGE * 255).astype(np.uint8)[::-1]
    if zoom > 1:
        levels = np.repeat(np.repeat(levels, zoom, axis=0), zoom, axis=1)
    img = Image.fromarray(levels, mode="P")
    img.putpalette(_palette())
    path = Path(path)
    img.save(path, format="PNG", optimize=False)
    return path


def plot_history(history, path) -> Path:
    """Learning-curve figure: train and test losses per epoch."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [r["epoch"] for r in history]
    for key, label in (("train_loss", "train"), ("test_loss_sim", "test (sim)"), ("test_loss_real", "test (real)")):
        vals = [r.get(key) for r in history]
        if any(v is not None for v in vals):
            ax.plot(epochs, [np.nan if v is None else v for v in vals], label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss (negative SD-SDR, dB)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


@torch.no_grad()
def separate_long(model, x, normalize: bool = True) -> np.ndarray:
    """Separate an arbitrary-length signal window by window; returns ``(2, len(x))``.

    The input is zero-padded to a whole number of model windows. With
    ``normalize`` each window is divided by its peak before the forward
    pass and the estimates are scaled back, matching the training inputs.
    """
    sep = _as_separator(model)
    dtype = _dtype(model)
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if n == 0:
        raise DimensionError("empty input signal")
    w = window_length(model, n)
    k = -(-n // w)
    windows = np.zeros((k, w))
    windows.reshape(-1)[:n] = x
    peaks = np.abs(windows).max(axis=1) if normalize else np.ones(k)
    peaks[peaks == 0] = 1.0
    out = np.empty((k, 2, w))
    for i in range(k):
        mix = torch.as_tensor(windows[i] / peaks[i], dtype=dtype)[None]
        out[i] = sep(mix)[0].double().numpy() * peaks[i]
    return out.transpose(1, 0, 2).reshape(2, k * w)[:, :n]


def window_permutations(estimates, truths, window: int) -> list:
    """uPIT assignment of each ``window``-sample segment against its truth."""
    est = torch.as_tensor(np.asarray(estimates, dtype=np.float64))
    ref = torch.as_tensor(np.asarray(truths, dtype=np.float64))
    n = est.shape[-1]
    k = n // window
    if k < 1 or est.shape != ref.shape:
        raise DimensionError("estimates and truths must match and span at least one window")
    est = est[:, : k * window].reshape(2, k, window).transpose(0, 1)
    ref = ref[:, : k * window].reshape(2, k, window).transpose(0, 1)
    return best_permutation(ref, est).tolist()
