"""Mixture generation and the optimization loop.

A *library* here is any sequence of 1-D sample arrays (for example
:class:`rfsep.signal_io.SignalLibrary` or a list of numpy arrays).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import NumericError, ParameterError
from .loss import upit_loss

log = logging.getLogger(__name__)

CHUNK_LEN = 65280


@dataclass(frozen=True)
class MixingConfig:
    chunk_len: int = CHUNK_LEN
    power_dbfs: tuple = (-80.0, -10.0)
    snr_db: tuple = (0.0, 30.0)
    add_noise: bool = True
    # redraw the cut position when a chunk falls entirely between pulses
    max_redraws: int = 100


@dataclass
class MixtureSample:
    mixture: np.ndarray
    truths: np.ndarray  # (2, chunk_len), clean and normalized like the mixture
    scale_dbfs: tuple
    snr_db: tuple
    norm_factor: float
    indices: tuple = ()
    offsets: tuple = ()


def build_mixture(lib: Sequence, rng: np.random.Generator, config: MixingConfig = MixingConfig(), pair=None) -> MixtureSample:
    """Draw, cut, scale, noise, sum and peak-normalize one training pair.

    Truths stay noise-free; the noise goes into the mixture only. Power
    levels are peak amplitudes relative to unit full scale,
    ``10 ** (P / 20)``.
    """
    if len(lib) < 1:
        raise ParameterError("empty signal library")
    if pair is None:
        pair = tuple(int(i) for i in rng.choice(len(lib), size=2, replace=len(lib) < 2))
    n = config.chunk_len
    truths, offsets, levels, snrs = [], [], [], []
    noise_total = np.zeros(n)
    for idx in pair:
        record = lib[idx]
        if len(record) < n:
            raise ParameterError(f"record {idx} has {len(record)} samples, need {n}")
        for _ in range(config.max_redraws + 1):
            start = int(rng.integers(0, len(record) - n + 1))
            chunk = np.asarray(record[start : start + n], dtype=np.float64)
            if np.any(chunk):
                break
        level = float(rng.uniform(*config.power_dbfs))
        scaled = 10 ** (level / 20) * chunk
        snr = float(rng.uniform(*config.snr_db))
        if config.add_noise:
            power = float(np.mean(scaled**2))
            noise_total += rng.normal(0.0, math.sqrt(power / 10 ** (snr / 10)), n)
        truths.append(scaled)
        offsets.append(start)
        levels.append(level)
        snrs.append(snr)
    truths = np.stack(truths)
    mixture = truths.sum(0) + noise_total
    peak = float(np.max(np.abs(mixture)))
    if peak == 0:
        raise ParameterError("mixture is silent; cannot normalize")
    return MixtureSample(
        mixture=mixture / peak,
        truths=truths / peak,
        scale_dbfs=tuple(levels),
        snr_db=tuple(snrs) if config.add_noise else (),
        norm_factor=peak,
        indices=pair,
        offsets=tuple(offsets),
    )


def epoch_mixtures(lib, count: int, seed: int, epoch: int, config: MixingConfig = MixingConfig(), rolling: bool = True) -> list:
    """The training set of one epoch; ``rolling`` makes it differ between epochs."""
    rng = np.random.default_rng([seed, epoch] if rolling else [seed])
    return [build_mixture(lib, rng, config) for _ in range(count)]


def build_test_set(lib, seed: int, config: MixingConfig = MixingConfig()) -> list:
    """Pair every library record exactly once (shuffled with ``seed``)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(lib))
    return [
        build_mixture(lib, rng, config, pair=(int(order[i]), int(order[i + 1])))
        for i in range(0, len(order) - 1, 2)
    ]


def to_batch(samples, dtype=torch.float32):
    """Stack samples into ``(B, t)`` mixtures and ``(B, 2, t)`` truths."""
    mix = torch.as_tensor(np.stack([s.mixture for s in samples]), dtype=dtype)
    truth = torch.as_tensor(np.stack([s.truths for s in samples]), dtype=dtype)
    return mix, truth


def lr_schedule(epoch: int, lr0: float = 1e-4, decay: float = 0.90) -> float:
    if epoch < 0:
        raise ParameterError("epoch must be >= 0")
    return lr0 * decay**epoch


@dataclass
class ScalerState:
    scale: float = 2.0**15
    good_steps: int = 0
    skipped: int = 0  # consecutive skips
    growth_interval: int = 2000
    growth: float = 2.0
    backoff: float = 0.5


def loss_scale_step(state: ScalerState, grads):
    """One dynamic loss-scaling decision.

    ``grads`` are gradients of ``scale * loss``. Returns the unscaled
    gradients (or ``None`` when the step must be skipped) and the new state.
    """
    finite = all(g is None or bool(torch.isfinite(g).all()) for g in grads)
    if not finite:
        return None, replace(state, scale=state.scale * state.backoff, good_steps=0, skipped=state.skipped + 1)
    unscaled = [None if g is None else g / state.scale for g in grads]
    good = state.good_steps + 1
    scale = state.scale
    if good >= state.growth_interval:
        scale, good = scale * state.growth, 0
    return unscaled, replace(state, scale=scale, good_steps=good, skipped=0)


class DynamicLossScaler:
    """Applies :func:`loss_scale_step` around an optimizer."""

    def __init__(self, init_scale=2.0**15, growth_interval=2000, max_skips=50):
        self.state = ScalerState(scale=init_scale, growth_interval=growth_interval)
        self.max_skips = max_skips

    def step(self, loss, optimizer, params) -> bool:
        params = [p for p in params if p.requires_grad]
        optimizer.zero_grad(set_to_none=True)
        (loss * self.state.scale).backward()
        grads, self.state = loss_scale_step(self.state, [p.grad for p in params])
        if grads is None:
            optimizer.zero_grad(set_to_none=True)
            if self.state.skipped > self.max_skips:
                raise NumericError(
                    f"{self.state.skipped} consecutive non-finite steps; "
                    f"loss scale fell to {self.state.scale:g}"
                )
            return False
        for p, g in zip(params, grads):
            p.grad = g
        optimizer.step()
        return True


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 70
    batch_size: int = 2
    pairs_per_epoch: int = 3000
    lr0: float = 1e-4
    lr_decay: float = 0.90
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    rolling_seed: bool = True
    init_scale: float = 2.0**15
    growth_interval: int = 2000
    max_skips: int = 50
    test_seed: int = 12345
    mixing: MixingConfig = field(default_factory=MixingConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        if isinstance(d.get("mixing"), dict):
            d["mixing"] = MixingConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["mixing"].items()})
        for key in ("betas",):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _model_dtype(model):
    return next(model.parameters()).dtype


def train_step(model, optimizer, scaler: DynamicLossScaler, mixture, truths) -> Optional[float]:
    """Forward, scaled backward and optimizer update; ``None`` if the step was skipped."""
    model.train()
    try:
        loss = upit_loss(truths, model(mixture))
    except NumericError:
        scaler.state = replace(scaler.state, scale=scaler.state.scale * scaler.state.backoff, skipped=scaler.state.skipped + 1, good_steps=0)
        if scaler.state.skipped > scaler.max_skips:
            raise
        return None
    if not torch.isfinite(loss):
        scaler.state = replace(scaler.state, skipped=scaler.state.skipped + 1)
        if scaler.state.skipped > scaler.max_skips:
            raise NumericError(f"loss stayed non-finite for {scaler.state.skipped} steps")
        return None
    applied = scaler.step(loss, optimizer, model.parameters())
    return float(loss.detach()) if applied else None


@torch.no_grad()
def mean_loss(model, samples, batch_size: int = 2) -> float:
    """Average uPIT loss over ``samples`` in inference mode."""
    model.eval()
    dtype = _model_dtype(model)
    total, count = 0.0, 0
    for i in range(0, len(samples), batch_size):
        mix, truth = to_batch(samples[i : i + batch_size], dtype)
        total += float(upit_loss(truth, model(mix), reduction="none").sum())
        count += len(mix)
    return total / count


def _optimizer(model, lr, config: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=lr, betas=config.betas, eps=config.adam_eps)


def train(model, train_lib, config: TrainConfig = TrainConfig(), test_lib=None, progress=None):
    """Run the per-epoch regenerate-and-optimize loop.

    Returns ``(model, history)``; each history row has ``epoch``, ``lr``,
    ``train_loss``, ``test_loss_sim``, ``test_loss_real`` and ``skipped``.
    """
    torch.manual_seed(config.seed)
    dtype = _model_dtype(model)
    optimizer = _optimizer(model, config.lr0, config)
    scaler = DynamicLossScaler(config.init_scale, config.growth_interval, config.max_skips)
    test_set = build_test_set(test_lib, config.test_seed, config.mixing) if test_lib is not None else None
    history = []
    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config.lr0, config.lr_decay)
        for group in optimizer.param_groups:
            group["lr"] = lr
        samples = epoch_mixtures(train_lib, config.pairs_per_epoch, config.seed, epoch, config.mixing, config.rolling_seed)
        losses, skipped = [], 0
        for i in range(0, len(samples), config.batch_size):
            mix, truth = to_batch(samples[i : i + config.batch_size], dtype)
            value = train_step(model, optimizer, scaler, mix, truth)
            if value is None:
                skipped += 1
            else:
                losses.append(value)
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "test_loss_sim": mean_loss(model, test_set, config.batch_size) if test_set else None,
            "test_loss_real": None,
            "skipped": skipped,
        }
        history.append(row)
        log.info("epoch %d lr %.3g train %.3f test %s", epoch, lr, row["train_loss"], row["test_loss_sim"])
        if progress is not None:
            progress(row)
    return model, history


def fit_fixed(model, samples, steps: int, lr: float = 1e-4, seed: int = 0, config: TrainConfig = TrainConfig()):
    """Optimize repeatedly on one fixed batch; returns the per-step loss list.

    Skipped (non-finite) steps are recorded as ``nan``.
    """
    torch.manual_seed(seed)
    mix, truth = to_batch(samples, _model_dtype(model))
    optimizer = _optimizer(model, lr, config)
    scaler = DynamicLossScaler(config.init_scale, config.growth_interval, config.max_skips)
    losses = []
    for _ in range(steps):
        value = train_step(model, optimizer, scaler, mix, truth)
        losses.append(float("nan") if value is None else value)
    return losses


HISTORY_COLUMNS = ("epoch", "train_loss", "test_loss_sim", "test_loss_real")


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow(["" if row.get(c) is None else row[c] for c in HISTORY_COLUMNS])


def read_history_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (float(v) if v != "" else None) for k, v in r.items()} for r in rows]
