"""Loading rendered or lazily synthesized mixtures into training batches."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import numpy as np
import torch

from .audio import read_wav
from .mixer import Mixture, MixtureRecord, render_record


class MixtureStore:
    """Serve mixtures for manifest records.

    Records rendered under ``root/<split>/<id>/`` are read from disk;
    anything else is synthesized from its record on first access.
    """

    def __init__(self, root=None, cache: bool = True):
        self.root = None if root is None else Path(root)
        self.cache = cache
        self._cache: dict[str, Mixture] = {}

    def _from_disk(self, record: MixtureRecord) -> Mixture | None:
        if self.root is None:
            return None
        d = self.root / record.split / record.id
        if not (d / "mix.wav").exists():
            return None
        fs = record.sample_rate_hz
        mix = read_wav(d / "mix.wav", fs).samples.astype(np.float64)
        targets = np.stack(
            [read_wav(d / f"s{j}.wav", fs).samples for j in range(1, record.num_speakers + 1)]
        ).astype(np.float64)
        noise = read_wav(d / "noise.wav", fs).samples if (d / "noise.wav").exists() else None
        return Mixture(mix, targets, fs, noise=noise)

    def get(self, record: MixtureRecord) -> Mixture:
        if record.id in self._cache:
            return self._cache[record.id]
        mix = self._from_disk(record) or render_record(record)
        if self.cache:
            self._cache[record.id] = mix
        return mix

    def batch(self, records, dtype=torch.float32) -> dict:
        counts = {r.num_speakers for r in records}
        if len(counts) != 1:
            raise ValueError(f"batch mixes speaker counts {sorted(counts)}")
        mixes = [self.get(r) for r in records]
        return {
            "count": counts.pop(),
            "ids": [r.id for r in records],
            "mixture": torch.tensor(np.stack([m.mixture for m in mixes]), dtype=dtype),
            "targets": torch.tensor(np.stack([m.targets for m in mixes]), dtype=dtype),
            "reference_sum": torch.tensor(np.stack([m.reference_sum for m in mixes]), dtype=dtype),
        }


def group_by_count(records) -> dict[int, list[MixtureRecord]]:
    groups = defaultdict(list)
    for r in records:
        groups[r.num_speakers].append(r)
    return dict(sorted(groups.items()))


def by_split(records, split: str) -> list[MixtureRecord]:
    return [r for r in records if r.split == split]
