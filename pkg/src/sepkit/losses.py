"""Training objectives and separation metrics.

All functions take torch tensors with a leading batch axis where noted and
are differentiable with respect to the estimates.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn.functional as F

from .audio import check_stft_params

SI_SNR_CLAMP_DB = 60.0
MAG_FLOOR = 1e-7
COUNTS = (2, 3, 4, 5)
# (fft_size, hop, win_length)
STFT_RESOLUTIONS = ((512, 50, 240), (1024, 120, 600), (2048, 240, 1200))


@dataclass(frozen=True)
class LossWeights:
    lambda_stft: float = 0.5
    lambda_rec: float = 1.0
    lambda_gate: float = 1.0

    def __post_init__(self):
        if min(self.lambda_stft, self.lambda_rec, self.lambda_gate) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class PermutationResult:
    """``permutation[b, j]`` is the estimate index paired with reference ``j``."""

    permutation: torch.Tensor  # (B, C) long
    pair_si_snr: torch.Tensor  # (B, C), SI-SNR of each aligned pair
    mean_si_snr: torch.Tensor  # (B,)


def si_snr(ref: torch.Tensor, est: torch.Tensor) -> torch.Tensor:
    """Scale-invariant SNR in dB over the last axis, clamped to +/-60 dB."""
    if ref.shape[-1] != est.shape[-1]:
        raise ValueError(f"length mismatch: {ref.shape[-1]} vs {est.shape[-1]}")
    ref = ref - ref.mean(dim=-1, keepdim=True)
    est = est - est.mean(dim=-1, keepdim=True)
    ref_energy = (ref * ref).sum(dim=-1, keepdim=True)
    if torch.any(ref_energy == 0):
        raise ValueError("reference has zero energy")
    proj = (ref * est).sum(dim=-1, keepdim=True) / ref_energy * ref
    err = est - proj
    num = (proj * proj).sum(dim=-1)
    den = (err * err).sum(dim=-1).clamp_min(torch.finfo(err.dtype).tiny)
    bound = 10 ** (SI_SNR_CLAMP_DB / 10)
    ratio = (num / den).clamp(1.0 / bound, bound)
    return 10 * torch.log10(ratio)


def si_snri(ref: torch.Tensor, est: torch.Tensor, mixture: torch.Tensor) -> torch.Tensor:
    """SI-SNR improvement of ``est`` over the unprocessed ``mixture``."""
    mixture = mixture.expand_as(ref) if mixture.dim() < ref.dim() else mixture
    return si_snr(ref, est) - si_snr(ref, mixture)


@lru_cache(maxsize=None)
def permutations(c: int) -> torch.Tensor:
    """All permutations of range(c) in lexicographic order, shape (c!, c)."""
    return torch.tensor(list(itertools.permutations(range(c))), dtype=torch.long)


def pairwise_si_snr(refs: torch.Tensor, ests: torch.Tensor) -> torch.Tensor:
    """(B, C_ref, C_est) matrix of SI-SNR(ref_j, est_i)."""
    return si_snr(refs.unsqueeze(2), ests.unsqueeze(1))


def upit(refs: torch.Tensor, ests: torch.Tensor) -> tuple[torch.Tensor, PermutationResult]:
    """Utterance-level PIT loss by exhaustive search over all C! pairings.

    ``refs`` and ``ests`` are (B, C, T). Returns the per-example loss
    (negative mean SI-SNR under the best pairing) and the pairing. Ties go
    to the lexicographically smallest permutation.
    """
    if refs.shape[:-1] != ests.shape[:-1]:
        raise ValueError(f"count mismatch: {tuple(refs.shape)} vs {tuple(ests.shape)}")
    c = refs.shape[1]
    if not 1 <= c <= 5:
        raise ValueError(f"uPIT supports up to 5 sources, got {c}")
    pair = pairwise_si_snr(refs, ests)  # (B, C, C)
    perms = permutations(c).to(refs.device)  # (P, C)
    ref_idx = torch.arange(c, device=refs.device).expand_as(perms)
    scores = pair[:, ref_idx, perms].mean(dim=-1)  # (B, P)
    best = scores.detach().argmax(dim=1)
    perm = perms[best]
    chosen = pair[torch.arange(pair.shape[0]).unsqueeze(1), ref_idx[0].unsqueeze(0), perm]
    mean = chosen.mean(dim=1)
    return -mean, PermutationResult(perm, chosen, mean)


def align(ests: torch.Tensor, permutation: torch.Tensor) -> torch.Tensor:
    """Reorder (B, C, T) estimates so that index j matches reference j."""
    return ests[torch.arange(ests.shape[0]).unsqueeze(1), permutation]


def stft_magnitude(x: torch.Tensor, fft_size: int, hop: int, win_length: int) -> torch.Tensor:
    """Center zero-padded Hann STFT magnitudes, (..., bins, frames)."""
    check_stft_params(fft_size, hop, win_length)
    shape = x.shape
    window = torch.hann_window(win_length, periodic=True, dtype=x.dtype, device=x.device)
    spec = torch.stft(
        x.reshape(-1, shape[-1]),
        n_fft=fft_size,
        hop_length=hop,
        win_length=win_length,
        window=window,
        center=True,
        pad_mode="constant",
        return_complex=True,
    )
    return spec.abs().reshape(*shape[:-1], *spec.shape[-2:])


def stft_loss_terms(ref, est, fft_size, hop, win_length):
    """Per-signal spectral-convergence and log-magnitude terms for one resolution."""
    ref_mag = stft_magnitude(ref, fft_size, hop, win_length)
    est_mag = stft_magnitude(est, fft_size, hop, win_length)
    sc = torch.linalg.norm(ref_mag - est_mag, dim=(-2, -1)) / torch.linalg.norm(
        ref_mag, dim=(-2, -1)
    ).clamp_min(MAG_FLOOR)
    log_diff = torch.log(ref_mag.clamp_min(MAG_FLOOR)) - torch.log(est_mag.clamp_min(MAG_FLOOR))
    mag = log_diff.abs().sum(dim=(-2, -1)) / ref.shape[-1]
    return sc, mag


def multires_stft_loss(refs: torch.Tensor, ests: torch.Tensor, resolutions=STFT_RESOLUTIONS) -> torch.Tensor:
    """Sum over sources and resolutions of L_sc + L_mag; ``ests`` already aligned.

    Inputs are (B, C, T); returns (B,).
    """
    if refs.shape != ests.shape:
        raise ValueError(f"shape mismatch: {tuple(refs.shape)} vs {tuple(ests.shape)}")
    total = refs.new_zeros(refs.shape[0])
    for fft_size, hop, win in resolutions:
        sc, mag = stft_loss_terms(refs, ests, fft_size, hop, win)
        total = total + (sc + mag).sum(dim=1)
    return total


def reconstruction_loss(ests: torch.Tensor, reference_sum: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance between the summed estimates (B, C, T) and (B, T)."""
    if ests.shape[-1] != reference_sum.shape[-1]:
        raise ValueError("length mismatch")
    diff = ests.sum(dim=1) - reference_sum
    return (diff * diff).sum(dim=-1)


def count_to_class(counts, device=None) -> torch.Tensor:
    counts = torch.as_tensor(counts, device=device).reshape(-1)
    if torch.any((counts < COUNTS[0]) | (counts > COUNTS[-1])):
        raise ValueError(f"speaker counts must lie in {COUNTS}")
    return (counts - COUNTS[0]).long()


def gate_loss(logits: torch.Tensor, true_count) -> torch.Tensor:
    """Softmax cross-entropy of (B, 4) logits against the true count; returns (B,)."""
    if logits.shape[-1] != len(COUNTS):
        raise ValueError(f"expected {len(COUNTS)} logits")
    logits = logits.reshape(-1, len(COUNTS))
    target = count_to_class(true_count, logits.device).expand(logits.shape[0])
    return F.cross_entropy(logits, target, reduction="none")


def total_loss(
    refs: torch.Tensor,
    ests: torch.Tensor,
    logits: torch.Tensor,
    true_count,
    weights: LossWeights = LossWeights(),
    reference_sum: torch.Tensor | None = None,
):
    """Weighted training objective, averaged over the batch.

    ``reference_sum`` is the mixture for clean data or the sum of clean
    targets for noisy-reverberant data; it defaults to ``refs.sum(1)``.
    Returns ``(loss, parts)`` where ``parts`` holds the batch-mean of each
    unweighted term and the uPIT result.
    """
    if reference_sum is None:
        reference_sum = refs.sum(dim=1)
    l_pit, perm = upit(refs, ests)
    aligned = align(ests, perm.permutation)
    l_stft = multires_stft_loss(refs, aligned) if weights.lambda_stft > 0 else torch.zeros_like(l_pit)
    l_rec = reconstruction_loss(ests, reference_sum)
    l_gate = gate_loss(logits, true_count)
    loss = (
        l_pit
        + weights.lambda_stft * l_stft
        + weights.lambda_rec * l_rec
        + weights.lambda_gate * l_gate
    ).mean()
    parts = {
        "upit": l_pit.mean(),
        "stft": l_stft.mean(),
        "rec": l_rec.mean(),
        "gate": l_gate.mean(),
        "perm": perm,
    }
    return loss, parts
