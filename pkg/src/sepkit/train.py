"""Per-batch random-count training with early stopping and checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import MixtureStore, by_split, group_by_count
from .evaluate import evaluate_known
from .losses import LossWeights, total_loss
from .model import COUNTS, Separator, load_checkpoint, save_checkpoint, select_count

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "train_loss", "val_loss", "gate_acc"] + [f"si_snri_{c}" for c in COUNTS]


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 2
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    counts: tuple[int, ...] = COUNTS
    grad_clip: float = 5.0
    steps_per_epoch: int | None = None
    val_subsample: int = 4

    def __post_init__(self):
        self.counts = tuple(int(c) for c in self.counts)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if not self.counts or any(c not in COUNTS for c in self.counts):
            raise ValueError(f"counts must be a non-empty subset of {COUNTS}")
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.grad_clip <= 0:
            raise ValueError("lr, batch size, max epochs and grad clip must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


def sample_batch_count(rng: np.random.Generator, counts=COUNTS) -> int:
    """Draw the speaker count shared by every example of the next mini-batch."""
    if not counts:
        raise ValueError("empty count set")
    return int(counts[rng.integers(len(counts))])


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8)


def batch_loss(model: Separator, batch: dict, weights: LossWeights):
    """Mean over blocks of the total objective, using only the batch's expert."""
    c = batch["count"]
    outputs = model(batch["mixture"], counts=(c,))
    losses, parts = [], []
    for out in outputs:
        loss, p = total_loss(batch["targets"], out.estimates[c], out.gate_logits, c, weights, batch["reference_sum"])
        losses.append(loss)
        parts.append(p)
    return torch.stack(losses).mean(), outputs, parts


def train_step(model: Separator, optimizer, batch: dict, config: TrainConfig) -> dict:
    """One optimisation step on a count-homogeneous batch.

    Experts for other counts are not run, so they get no gradient; the
    trunk and the gate always do.
    """
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss, outputs, parts = batch_loss(model, batch, config.weights)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"non-finite loss {loss.item()} on batch {batch.get('ids')}")
    loss.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
    optimizer.step()
    last = parts[-1]
    return {
        "loss": loss.item(),
        "upit": last["upit"].item(),
        "stft": last["stft"].item(),
        "rec": last["rec"].item(),
        "gate": last["gate"].item(),
        "grad_norm": float(grad_norm),
        "count": batch["count"],
    }


class CountBatcher:
    """Endless per-count shuffled batches drawn from one split."""

    def __init__(self, records, batch_size: int, rng: np.random.Generator):
        self.groups = group_by_count(records)
        self.batch_size = batch_size
        self.rng = rng
        self._queues: dict[int, list] = {c: [] for c in self.groups}

    def next(self, count: int) -> list:
        if count not in self.groups:
            raise ValueError(f"no training records with {count} speakers")
        group = self.groups[count]
        size = min(self.batch_size, len(group))
        queue = self._queues[count]
        if len(queue) < size:
            queue.extend(group[i] for i in self.rng.permutation(len(group)))
        batch, self._queues[count] = queue[:size], queue[size:]
        return batch


def round_robin_batches(records, batch_size: int, counts) -> list[list]:
    """Validation batches interleaving counts 2, 3, 4, 5, 2, 3, ... deterministically."""
    groups = group_by_count(records)
    per_count = {
        c: [groups[c][i:i + batch_size] for i in range(0, len(groups[c]), batch_size)]
        for c in counts if c in groups
    }
    out = []
    for i in range(max((len(v) for v in per_count.values()), default=0)):
        for c in counts:
            if c in per_count and i < len(per_count[c]):
                out.append(per_count[c][i])
    return out


@torch.no_grad()
def validate(model: Separator, records, store: MixtureStore, config: TrainConfig) -> dict:
    """Validation loss (round-robin over counts), gate accuracy and per-count SI-SNRi."""
    model.eval()
    dtype = next(model.parameters()).dtype
    losses, correct, total = [], 0, 0
    for recs in round_robin_batches(records, config.batch_size, config.counts):
        batch = store.batch(recs, dtype)
        loss, outputs, _ = batch_loss(model, batch, config.weights)
        losses.append(loss.item())
        pred = select_count(outputs[-1].gate_logits)
        correct += sum(p == batch["count"] for p in pred)
        total += len(pred)
    groups = group_by_count(records)
    subsample = [r for c in config.counts for r in groups.get(c, [])[: config.val_subsample]]
    report = evaluate_known(model, subsample, store)
    return {
        "val_loss": float(np.mean(losses)),
        "gate_acc": correct / total if total else float("nan"),
        "si_snri": report.per_count_si_snri,
    }


@dataclass
class TrainResult:
    run_dir: Path | None
    best_val_loss: float
    best_epoch: int
    log: list[dict]
    stopped_early: bool


def _write_log_header(path: Path, config: TrainConfig, model: Separator) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# lr={config.lr} batch_size={config.batch_size} patience={config.patience} "
                f"seed={config.seed} grad_clip={config.grad_clip}\n")
        w = config.weights
        f.write(f"# lambda_stft={w.lambda_stft} lambda_rec={w.lambda_rec} lambda_gate={w.lambda_gate} "
                f"counts={','.join(map(str, config.counts))}\n")
        csv.writer(f).writerow(LOG_COLUMNS)


def _append_log(path: Path, row: dict) -> None:
    with open(path, "a", newline="") as f:
        csv.DictWriter(f, fieldnames=LOG_COLUMNS).writerow(row)


def read_log(path) -> list[dict]:
    with open(path) as f:
        lines = [line for line in f if not line.startswith("#")]
    return list(csv.DictReader(lines))


def latest_checkpoint(run_dir: Path) -> Path | None:
    found = []
    for p in run_dir.glob("ckpt-*.pt"):
        m = re.fullmatch(r"ckpt-(\d+)\.pt", p.name)
        if m:
            found.append((int(m.group(1)), p))
    return max(found)[1] if found else None


def train(
    model: Separator,
    records,
    config: TrainConfig,
    run_dir=None,
    store: MixtureStore | None = None,
    resume: bool = False,
) -> TrainResult:
    """Train until validation loss stops improving for ``config.patience`` epochs."""
    store = store or MixtureStore()
    train_recs, val_recs = by_split(records, "train"), by_split(records, "val")
    if not train_recs or not val_recs:
        raise ValueError("manifest needs both 'train' and 'val' records")
    for split, recs in (("train", train_recs), ("val", val_recs)):
        have = set(group_by_count(recs))
        missing = [c for c in config.counts if c not in have]
        if missing:
            raise ValueError(f"split '{split}' has no records for counts {missing}")

    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    optimizer = make_optimizer(model, config)
    dtype = next(model.parameters()).dtype
    steps = config.steps_per_epoch or math.ceil(len(train_recs) / config.batch_size)

    run_dir = None if run_dir is None else Path(run_dir)
    log_path = None
    history: list[dict] = []
    best_val, best_epoch, bad_epochs, start = math.inf, 0, 0, 1
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_path = run_dir / "train_log.csv"
        ckpt = latest_checkpoint(run_dir) if resume else None
        if ckpt is not None:
            loaded, payload = load_checkpoint(ckpt)
            model.load_state_dict(loaded.state_dict())
            optimizer.load_state_dict(payload["optimizer"])
            rng.bit_generator.state = payload["rng_state"]
            state = payload["train_state"]
            best_val, best_epoch, bad_epochs = state["best_val"], state["best_epoch"], state["bad_epochs"]
            start = state["epoch"] + 1
            history = read_log(log_path) if log_path.exists() else []
            log.info("resumed from %s at epoch %d", ckpt, start)
        else:
            _write_log_header(log_path, config, model)

    batcher = CountBatcher(train_recs, config.batch_size, rng)
    stopped_early = False
    for epoch in range(start, config.max_epochs + 1):
        if bad_epochs >= config.patience:
            stopped_early = True
            break
        losses, skipped = [], 0
        for _ in range(steps):
            count = sample_batch_count(rng, config.counts)
            batch = store.batch(batcher.next(count), dtype)
            try:
                losses.append(train_step(model, optimizer, batch, config)["loss"])
            except NonFiniteLoss as exc:
                skipped += 1
                log.warning("step skipped: %s", exc)
        val = validate(model, val_recs, store, config)
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "val_loss": val["val_loss"],
            "gate_acc": val["gate_acc"],
        }
        for c in COUNTS:
            row[f"si_snri_{c}"] = val["si_snri"].get(c, "")
        history.append(row)
        log.info("epoch %d: train %.4f val %.4f gate_acc %.3f skipped %d",
                 epoch, row["train_loss"], row["val_loss"], row["gate_acc"], skipped)

        improved = val["val_loss"] < best_val
        if improved:
            best_val, best_epoch, bad_epochs = val["val_loss"], epoch, 0
        else:
            bad_epochs += 1
        if run_dir is not None:
            _append_log(log_path, row)
            extra = {
                "optimizer": optimizer.state_dict(),
                "rng_state": rng.bit_generator.state,
                "train_state": {
                    "epoch": epoch,
                    "best_val": best_val,
                    "best_epoch": best_epoch,
                    "bad_epochs": bad_epochs,
                    "val_loss": val["val_loss"],
                },
                "train_config": asdict(config),
            }
            save_checkpoint(run_dir / f"ckpt-{epoch}.pt", model, extra)
            if improved:
                save_checkpoint(run_dir / "best.pt", model, extra)
    else:
        stopped_early = bad_epochs >= config.patience
    return TrainResult(run_dir, best_val, best_epoch, history, stopped_early)
