"""Multi-head separator: encoder, dual-path MULCAT trunk, expert heads and a count gate."""

from __future__ import annotations

import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import chunk_padding

COUNTS = (2, 3, 4, 5)
CHECKPOINT_VERSION = 1


@dataclass
class SeparatorConfig:
    n_features: int = 64  # N
    kernel_size: int = 8  # L
    chunk_size: int = 100  # K
    chunk_step: int = 50  # P
    num_blocks: int = 2  # b
    hidden_size: int = 64  # H
    counts: tuple[int, ...] = COUNTS
    sample_rate_hz: int = 8000
    detach_gate: bool = False

    def __post_init__(self):
        self.counts = tuple(int(c) for c in self.counts)
        if self.counts != COUNTS:
            raise ValueError(f"the separator always carries experts for {COUNTS}")
        if self.kernel_size < 2 or self.kernel_size % 2:
            raise ValueError("encoder kernel size L must be even and >= 2")
        if not 1 <= self.chunk_step <= self.chunk_size:
            raise ValueError("need 1 <= P <= K")
        if min(self.n_features, self.num_blocks, self.hidden_size) < 1:
            raise ValueError("N, b and H must be positive")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample rate must be positive")

    @property
    def stride(self) -> int:
        return self.kernel_size // 2


@dataclass
class HeadOutput:
    """Separator output after one block.

    ``estimates[c]`` is a (B, c, T) tensor for every evaluated count c;
    ``gate_logits`` is (B, 4) over counts 2..5.
    """

    estimates: dict[int, torch.Tensor]
    gate_logits: torch.Tensor
    block_index: int

    def expert(self, n: int) -> torch.Tensor:
        """Waveforms of expert ``n`` (1-based, emits n + 1 sources)."""
        return self.estimates[n + 1]


def chunk_tensor(x: torch.Tensor, k: int, p: int) -> tuple[torch.Tensor, int]:
    """(B, N, T') -> (B, N, K, R) overlapping chunks, plus the right padding used."""
    pad = chunk_padding(x.shape[-1], k, p)
    x = F.pad(x, (0, pad))
    return x.unfold(-1, k, p).transpose(-1, -2).contiguous(), pad


def overlap_add_chunks(v: torch.Tensor, p: int) -> torch.Tensor:
    """(B, N, K, R) -> (B, N, (R-1)P + K) by summing overlapping chunks."""
    b, n, k, r = v.shape
    out = F.fold(
        v.reshape(b, n * k, r),
        output_size=(1, (r - 1) * p + k),
        kernel_size=(1, k),
        stride=(1, p),
    )
    return out.reshape(b, n, -1)


class Encoder(nn.Module):
    def __init__(self, n_features: int, kernel_size: int):
        super().__init__()
        self.kernel_size = kernel_size
        self.conv = nn.Conv1d(1, n_features, kernel_size, stride=kernel_size // 2, bias=False)

    def padding_for(self, length: int) -> int:
        stride = self.kernel_size // 2
        if length < self.kernel_size:
            raise ValueError(f"input of {length} samples is shorter than the kernel ({self.kernel_size})")
        return (-(length - self.kernel_size)) % stride

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, T) -> (B, N, T')
        x = F.pad(x, (0, self.padding_for(x.shape[-1])))
        return F.relu(self.conv(x.unsqueeze(1)))


class MulCatPass(nn.Module):
    """One direction of a MULCAT block.

    Two bidirectional LSTMs read the same sequences; their outputs are
    multiplied, concatenated with the input, projected back to N and added
    to the input.
    """

    def __init__(self, n_features: int, hidden: int):
        super().__init__()
        self.rnn_a = nn.LSTM(n_features, hidden, batch_first=True, bidirectional=True)
        self.rnn_b = nn.LSTM(n_features, hidden, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * hidden + n_features, n_features)

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        # seq: (batch, length, N)
        gated = self.rnn_a(seq)[0] * self.rnn_b(seq)[0]
        return seq + self.proj(torch.cat([gated, seq], dim=-1))


class MulCatBlock(nn.Module):
    def __init__(self, n_features: int, hidden: int):
        super().__init__()
        self.intra = MulCatPass(n_features, hidden)
        self.inter = MulCatPass(n_features, hidden)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        b, n, k, r = v.shape
        # Intra-chunk: one length-K sequence per (batch, chunk).
        seq = v.permute(0, 3, 2, 1).reshape(b * r, k, n)
        v = self.intra(seq).reshape(b, r, k, n).permute(0, 3, 2, 1)
        # Inter-chunk: one length-R sequence per (batch, within-chunk position).
        seq = v.permute(0, 2, 3, 1).reshape(b * k, r, n)
        return self.inter(seq).reshape(b, k, r, n).permute(0, 3, 1, 2).contiguous()


class ExpertHead(nn.Module):
    """PReLU, 1x1 conv to C copies of the features, then two overlap-add stages to waveforms."""

    def __init__(self, n_sources: int, n_features: int, kernel_size: int, chunk_step: int):
        super().__init__()
        self.n_sources = n_sources
        self.chunk_step = chunk_step
        self.stride = kernel_size // 2
        self.act = nn.PReLU(n_features, init=0.25)
        self.conv = nn.Conv2d(n_features, n_sources * n_features, kernel_size=1)
        self.frame = nn.Linear(n_features, kernel_size)

    def forward(self, v: torch.Tensor, n_frames: int, length: int) -> torch.Tensor:
        b, n, k, r = v.shape
        out = self.conv(self.act(v)).reshape(b * self.n_sources, n, k, r)
        feats = overlap_add_chunks(out, self.chunk_step)[..., :n_frames]  # (B*C, N, T')
        frames = self.frame(feats.transpose(1, 2)).transpose(1, 2)  # (B*C, L, T')
        wav = F.fold(
            frames,
            output_size=(1, (n_frames - 1) * self.stride + frames.shape[1]),
            kernel_size=(1, frames.shape[1]),
            stride=(1, self.stride),
        )
        return wav.reshape(b, self.n_sources, -1)[..., :length]


class Gate(nn.Module):
    """Speaker-count classifier over the (K, R) plane of a block output."""

    def __init__(self, n_features: int, channels=(64, 32, 16, 8), pool_grid: int = 4, fc: int = 100):
        super().__init__()
        layers = []
        c_in = n_features
        for c_out in channels:
            layers += [
                nn.Conv2d(c_in, c_out, kernel_size=3, padding=1),
                nn.PReLU(c_out, init=0.25),
                nn.MaxPool2d(2, ceil_mode=True),
            ]
            c_in = c_out
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(pool_grid)
        self.classifier = nn.Sequential(
            nn.Linear(c_in * pool_grid * pool_grid, fc),
            nn.PReLU(fc, init=0.25),
            nn.Linear(fc, len(COUNTS)),
        )

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.pool(self.features(v)).flatten(1))


class Separator(nn.Module):
    def __init__(self, config: SeparatorConfig | None = None):
        super().__init__()
        self.config = config = config or SeparatorConfig()
        n = config.n_features
        self.encoder = Encoder(n, config.kernel_size)
        self.blocks = nn.ModuleList(MulCatBlock(n, config.hidden_size) for _ in range(config.num_blocks))
        # One set of heads and one gate, shared by every block.
        self.experts = nn.ModuleDict(
            {str(c): ExpertHead(c, n, config.kernel_size, config.chunk_step) for c in config.counts}
        )
        self.gate = Gate(n)

    def encode(self, mixture: torch.Tensor) -> torch.Tensor:
        return self.encoder(mixture)

    def forward(self, mixture: torch.Tensor, counts=None) -> list[HeadOutput]:
        """Run all blocks; return one HeadOutput per block.

        ``mixture`` is (B, T) or (T,). ``counts`` restricts which experts are
        evaluated (default: all of them).
        """
        if mixture.dim() == 1:
            mixture = mixture.unsqueeze(0)
        counts = self.config.counts if counts is None else tuple(counts)
        length = mixture.shape[-1]
        z = self.encoder(mixture)
        n_frames = z.shape[-1]
        v, _ = chunk_tensor(z, self.config.chunk_size, self.config.chunk_step)
        outputs = []
        for i, block in enumerate(self.blocks, start=1):
            v = block(v)
            gate_in = v.detach() if self.config.detach_gate else v
            estimates = {c: self.experts[str(c)](v, n_frames, length) for c in counts}
            outputs.append(HeadOutput(estimates, self.gate(gate_in), i))
        return outputs

    @torch.no_grad()
    def infer(self, mixture: torch.Tensor) -> tuple[int, torch.Tensor, torch.Tensor]:
        """Separate one (T,) mixture with the expert the last-block gate picks.

        Returns ``(count, waveforms (count, T), gate probabilities (4,))``.
        Ties in the gate go to the smaller count.
        """
        outputs = self.forward(mixture.reshape(1, -1))
        last = outputs[-1]
        count = select_count(last.gate_logits)[0]
        probs = torch.softmax(last.gate_logits[0].double(), dim=-1)
        return count, last.estimates[count][0], probs


def select_count(logits: torch.Tensor) -> list[int]:
    """Argmax over (B, 4) logits mapped to counts; first maximum wins."""
    return [COUNTS[i] for i in logits.argmax(dim=-1).tolist()]


def save_checkpoint(path, model: Separator, extra: dict | None = None) -> None:
    """Atomically write config + parameters (+ optional training state)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "state_dict": model.state_dict(),
    }
    if extra:
        payload.update(extra)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def load_checkpoint(path, map_location="cpu") -> tuple[Separator, dict]:
    payload = torch.load(path, map_location=map_location, weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    model = Separator(SeparatorConfig(**payload["config"]))
    dtype = next(iter(payload["state_dict"].values())).dtype
    model.to(dtype)
    model.load_state_dict(payload["state_dict"])
    return model, payload
