"""Known- and unknown-count evaluation, channel matching and the silent-channel selector."""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .losses import align, si_snr, si_snri, upit
from .model import COUNTS, select_count

DEFAULT_SILENCE_DB = -20.0


def _as_double(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x).double()


def abs_correlation(preds: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """|Pearson correlation| at zero lag, (C_pred, C_target). Zero-variance channels give 0."""
    p = preds - preds.mean(dim=-1, keepdim=True)
    t = targets - targets.mean(dim=-1, keepdim=True)
    num = p @ t.T
    den = torch.linalg.norm(p, dim=-1)[:, None] * torch.linalg.norm(t, dim=-1)[None, :]
    rho = torch.where(den > 0, num / torch.where(den > 0, den, torch.ones_like(den)), torch.zeros_like(num))
    return rho.abs()


def match_channels(preds, targets) -> torch.Tensor:
    """Map Ĉ predicted channels onto C targets, returning (C, T) in target order.

    Ĉ = C: the uPIT-optimal ordering.
    Ĉ > C: the C predictions maximising total |correlation| (exhaustive).
    Ĉ < C: every target takes its best-correlated prediction, reuse allowed.
    """
    preds, targets = _as_double(preds), _as_double(targets)
    n_pred, n_tgt = preds.shape[0], targets.shape[0]
    if n_pred == n_tgt:
        _, perm = upit(targets.unsqueeze(0), preds.unsqueeze(0))
        return align(preds.unsqueeze(0), perm.permutation)[0]
    rho = abs_correlation(preds, targets)
    if n_pred > n_tgt:
        best, best_score = None, -np.inf
        for choice in itertools.permutations(range(n_pred), n_tgt):
            score = float(sum(rho[i, j] for j, i in enumerate(choice)))
            if score > best_score:
                best, best_score = choice, score
        return preds[list(best)]
    return preds[rho.argmax(dim=0)]


def silent_channel_select(waveforms, threshold_db: float = DEFAULT_SILENCE_DB, min_keep: int = 2) -> list[int]:
    """Indices of channels whose energy is within ``threshold_db`` of the loudest.

    The ``min_keep`` loudest channels are always kept.
    """
    w = _as_double(waveforms)
    if w.shape[0] < min_keep:
        raise ValueError(f"need at least {min_keep} channels")
    e = (w * w).sum(dim=-1)
    order = torch.argsort(e, descending=True, stable=True).tolist()
    peak = e.max()
    if peak <= 0:
        return sorted(order[:min_keep])
    with np.errstate(divide="ignore"):
        rel_db = 10 * np.log10((e / peak).numpy())
    keep = set(order[:min_keep]) | {i for i in range(len(e)) if rel_db[i] >= threshold_db}
    return sorted(keep)


def score_known(targets, ests, mixture) -> float:
    """Mean SI-SNRi over sources after uPIT alignment."""
    targets, ests, mixture = _as_double(targets), _as_double(ests), _as_double(mixture)
    aligned = match_channels(ests, targets)
    return float(si_snri(targets, aligned, mixture).mean())


def score_matched(targets, preds, mixture) -> float:
    """Mean SI-SNRi over the true sources for any number of predicted channels."""
    targets, mixture = _as_double(targets), _as_double(mixture)
    matched = match_channels(preds, targets)
    return float(si_snri(targets, matched, mixture).mean())


@dataclass
class EvalReport:
    per_count_si_snri: dict[int, float]
    overall_si_snri: float
    confusion: list[list[int]] | None = None
    count_accuracy: float | None = None
    rows: list[dict] = field(default_factory=list)
    selector: str | None = None

    @property
    def cell_accuracy(self) -> list[list[float]] | None:
        """Row-normalised confusion matrix (fraction of each true count)."""
        if self.confusion is None:
            return None
        out = []
        for row in self.confusion:
            total = sum(row)
            out.append([v / total if total else 0.0 for v in row])
        return out

    def to_dict(self) -> dict:
        d = {
            "selector": self.selector,
            "per_count_si_snri": {f"{c}spk": v for c, v in self.per_count_si_snri.items()},
            "overall_si_snri": self.overall_si_snri,
            "num_utterances": len(self.rows),
        }
        if self.confusion is not None:
            d["counts"] = list(COUNTS)
            d["confusion"] = self.confusion
            d["cell_accuracy"] = self.cell_accuracy
            d["count_accuracy"] = self.count_accuracy
        return d

    def write(self, out_dir, stem: str = "report") -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        with open(out_dir / f"{stem}_utterances.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["id", "true_count", "pred_count", "si_snri"])
            writer.writeheader()
            writer.writerows(self.rows)
        if self.confusion is not None:
            with open(out_dir / f"{stem}_confusion.csv", "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["true\\pred"] + [f"{c}spk" for c in COUNTS])
                for c, counts, accs in zip(COUNTS, self.confusion, self.cell_accuracy):
                    writer.writerow([f"{c}spk"] + [f"{n} ({a:.3f})" for n, a in zip(counts, accs)])


def _aggregate(rows) -> tuple[dict[int, float], float]:
    per_count = {}
    for c in COUNTS:
        vals = [r["si_snri"] for r in rows if r["true_count"] == c]
        if vals:
            per_count[c] = float(np.mean(vals))
    overall = float(np.mean([r["si_snri"] for r in rows])) if rows else float("nan")
    return per_count, overall


@torch.no_grad()
def evaluate_known(model, records, store, count: int | None = None) -> EvalReport:
    """Score each record with the expert for its (known) speaker count.

    ``count`` restricts evaluation to records with that many speakers.
    """
    if count is not None and count not in COUNTS:
        raise ValueError(f"unsupported speaker count {count}")
    rows = []
    for rec in records:
        if count is not None and rec.num_speakers != count:
            continue
        mix = store.get(rec)
        x = torch.as_tensor(mix.mixture, dtype=_model_dtype(model)).unsqueeze(0)
        est = model(x, counts=(rec.num_speakers,))[-1].estimates[rec.num_speakers][0]
        rows.append({
            "id": rec.id,
            "true_count": rec.num_speakers,
            "pred_count": rec.num_speakers,
            "si_snri": score_known(mix.targets, est, mix.mixture),
        })
    per_count, overall = _aggregate(rows)
    return EvalReport(per_count, overall, rows=rows, selector="known")


def _model_dtype(model) -> torch.dtype:
    try:
        return next(model.parameters()).dtype
    except (AttributeError, StopIteration):
        return torch.float32


@torch.no_grad()
def predict_unknown(model, mixture: torch.Tensor, selector: str = "gate", threshold_db: float = DEFAULT_SILENCE_DB):
    """Return (Ĉ, predicted channels) for one (T,) mixture."""
    if selector == "gate":
        last = model(mixture.unsqueeze(0))[-1]
        c_hat = select_count(last.gate_logits)[0]
        return c_hat, last.estimates[c_hat][0]
    if selector == "silent":
        c_max = max(COUNTS)
        last = model(mixture.unsqueeze(0), counts=(c_max,))[-1]
        waves = last.estimates[c_max][0]
        active = silent_channel_select(waves, threshold_db)
        return len(active), waves[active]
    raise ValueError(f"unknown selector '{selector}' (use 'gate' or 'silent')")


def evaluate_unknown(model, records, store, selector: str = "gate", threshold_db: float = DEFAULT_SILENCE_DB) -> EvalReport:
    """Unknown-count protocol: select Ĉ, match channels, score against the C true sources."""
    rows = []
    confusion = np.zeros((len(COUNTS), len(COUNTS)), dtype=int)
    for rec in records:
        mix = store.get(rec)
        x = torch.as_tensor(mix.mixture, dtype=_model_dtype(model))
        c_hat, preds = predict_unknown(model, x, selector, threshold_db)
        rows.append({
            "id": rec.id,
            "true_count": rec.num_speakers,
            "pred_count": c_hat,
            "si_snri": score_matched(mix.targets, preds, mix.mixture),
        })
        confusion[COUNTS.index(rec.num_speakers), COUNTS.index(c_hat)] += 1
    per_count, overall = _aggregate(rows)
    total = confusion.sum()
    acc = float(np.trace(confusion) / total) if total else float("nan")
    return EvalReport(per_count, overall, confusion.tolist(), acc, rows, selector)
