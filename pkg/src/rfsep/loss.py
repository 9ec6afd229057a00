"""Scale-dependent SDR and the two-channel permutation-invariant objective.

Signals are torch tensors with time on the last axis; channel sets are
``(..., 2, t)``.
"""

from __future__ import annotations

import torch

from .errors import DimensionError, ParameterError, UndefinedReferenceError

CLAMP = 1e-12
# channel order of the estimate for each candidate assignment
PERMUTATIONS = ((0, 1), (1, 0))
IDENTITY, SWAP = 0, 1


def _sd_sdr(s, s_hat, safe_energy):
    energy = (s * s).sum(-1)
    alpha = (s_hat * s).sum(-1) / safe_energy(energy)
    target = (alpha**2 * energy).clamp_min(CLAMP)
    error = ((s - s_hat) ** 2).sum(-1).clamp_min(CLAMP)
    return 10 * torch.log10(target / error)


def sd_sdr(s: torch.Tensor, s_hat: torch.Tensor) -> torch.Tensor:
    """SD-SDR in dB of estimate ``s_hat`` against reference ``s`` (reduces the last axis).

    The projection energy and the error energy are both floored at 1e-12,
    so perfect and orthogonal estimates give large finite values.
    """
    if s.shape != s_hat.shape:
        raise DimensionError(f"shape mismatch {tuple(s.shape)} vs {tuple(s_hat.shape)}")
    if not ((s * s).sum(-1) > 0).all():
        raise UndefinedReferenceError("reference signal has zero energy")
    return _sd_sdr(s, s_hat, lambda e: e)


def _check_pair(S, S_hat):
    if S.shape != S_hat.shape:
        raise DimensionError(f"shape mismatch {tuple(S.shape)} vs {tuple(S_hat.shape)}")
    if S.dim() < 2 or S.shape[-2] != 2:
        raise DimensionError(f"expected (..., 2, t) channel sets, got {tuple(S.shape)}")


def permutation_scores(S, S_hat, zero_ref: str = "skip") -> torch.Tensor:
    """Mean SD-SDR of each assignment, shape ``(..., 2)`` ordered as :data:`PERMUTATIONS`.

    ``zero_ref`` sets how silent reference channels are treated: ``"skip"``
    drops their terms from the mean (the estimate on that channel is then
    unconstrained); ``"raise"`` raises :class:`UndefinedReferenceError`.
    Batch items with no usable reference always raise.
    """
    _check_pair(S, S_hat)
    if zero_ref not in ("skip", "raise"):
        raise ParameterError(f"zero_ref must be 'skip' or 'raise', got {zero_ref!r}")
    valid = (S * S).sum(-1) > 0  # (..., 2)
    if zero_ref == "raise" and not valid.all():
        raise UndefinedReferenceError("a reference channel has zero energy")
    n_valid = valid.sum(-1)
    if not (n_valid > 0).all():
        raise UndefinedReferenceError("both reference channels have zero energy")

    def safe(e):
        return torch.where(e > 0, e, torch.ones_like(e))

    scores = []
    for perm in PERMUTATIONS:
        sdr = _sd_sdr(S, S_hat[..., perm, :], safe)
        sdr = torch.where(valid, sdr, torch.zeros_like(sdr))
        scores.append(sdr.sum(-1) / n_valid)
    return torch.stack(scores, dim=-1)


def upit_loss(S, S_hat, reduction: str = "mean", zero_ref: str = "skip") -> torch.Tensor:
    """Negative best-assignment mean SD-SDR; ``reduction`` is ``"mean"`` or ``"none"``."""
    loss = -permutation_scores(S, S_hat, zero_ref).max(dim=-1).values
    if reduction == "mean":
        return loss.mean()
    if reduction == "none":
        return loss
    raise ParameterError(f"unknown reduction {reduction!r}")


def best_permutation(S, S_hat, zero_ref: str = "skip") -> torch.Tensor:
    """Index into :data:`PERMUTATIONS` of the best assignment; ties go to identity."""
    scores = permutation_scores(S, S_hat, zero_ref)
    return (scores[..., SWAP] > scores[..., IDENTITY]).long()


def align(S_hat: torch.Tensor, perm: torch.Tensor) -> torch.Tensor:
    """Reorder estimate channels by per-item permutation indices."""
    swapped = S_hat.flip(-2)
    mask = perm.bool().reshape(*perm.shape, 1, 1)
    return torch.where(mask, swapped, S_hat)
