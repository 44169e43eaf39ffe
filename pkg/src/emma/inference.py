"""Streaming read/write decoding.

:func:`run_emma_inference` follows the threshold policy: after each read the
whole source prefix is re-encoded, then target tokens are written while the
smallest write probability over all monotonic heads stays at or above the
threshold. :func:`wait_k_inference` is the fixed-lag baseline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .tasks import BOS, EOS

READ = "R"
WRITE = "W"


class StreamingModel(Protocol):
    def encode(self, src_prefix: Sequence[int]): ...

    def decode_step(self, enc, prefix: Sequence[int]) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass
class ActionTrace:
    """Ordered actions. Writes carry the token and the source prefix length at emission."""

    actions: list[tuple] = field(default_factory=list)
    source_length: int = 0
    truncated: bool = False
    finished: bool = False
    writes_counter: int = 0

    def read(self) -> None:
        self.actions.append((READ,))

    def write(self, token: int, delay: int) -> None:
        self.actions.append((WRITE, int(token), int(delay)))

    @property
    def tokens(self) -> list[int]:
        return [a[1] for a in self.actions if a[0] == WRITE]

    @property
    def delays(self) -> list[int]:
        return [a[2] for a in self.actions if a[0] == WRITE]

    def to_lines(self) -> str:
        out = []
        for a in self.actions:
            out.append(READ if a[0] == READ else f"{WRITE}\t{a[1]}\t{a[2]}")
        return "\n".join(out) + ("\n" if out else "")

    @classmethod
    def from_lines(cls, text: str, source_length: int = 0) -> "ActionTrace":
        trace = cls(source_length=source_length)
        for line in text.splitlines():
            if not line:
                continue
            if line == READ:
                trace.read()
            else:
                tag, token, delay = line.split("\t")
                if tag != WRITE:
                    raise ValueError(f"bad trace line {line!r}")
                trace.write(int(token), int(delay))
        return trace

    def summary(self, threshold: float | None = None, chunk_seconds: float | None = None) -> dict:
        delays = extract_delays(self, chunk_seconds)
        scale = 1.0 if chunk_seconds is None else chunk_seconds
        return {
            "source_length": self.source_length * scale,
            "output": self.tokens,
            "delays": delays,
            "threshold": threshold,
            "truncated": self.truncated,
        }


def extract_delays(trace: ActionTrace, chunk_seconds: float | None = None) -> list[float]:
    """Delay of every written token: reads seen so far, optionally in seconds."""
    delays = []
    reads = 0
    for a in trace.actions:
        if a[0] == READ:
            reads += 1
        else:
            delays.append(reads)
    if chunk_seconds is None:
        return delays
    return [d * chunk_seconds for d in delays]


def write_trace(path: Path, trace: ActionTrace, threshold: float | None = None,
                chunk_seconds: float | None = None) -> None:
    """Write ``<path>`` (one action per line) and ``<path>.json`` (summary record)."""
    path = Path(path)
    path.write_text(trace.to_lines(), encoding="utf-8", newline="\n")
    path.with_name(path.name + ".json").write_text(
        json.dumps(trace.summary(threshold, chunk_seconds), sort_keys=True) + "\n", encoding="utf-8", newline="\n")


def default_max_len(source_length: int) -> int:
    return 2 * source_length + 10


def run_emma_inference(model: StreamingModel, source: Sequence[int], threshold: float,
                       max_len: int | None = None) -> ActionTrace:
    """Threshold policy over the minimum write probability across all heads.

    The decision for the next token is taken only at the newest source
    position; positions skipped earlier are never revisited. Once the source
    is exhausted the policy is bypassed and tokens are written until EOS or
    ``max_len``. The emitted-token counter kept alongside ``i`` and ``j`` is
    recorded as ``writes_counter``.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    source = list(source)
    if not source:
        raise ValueError("source stream is empty")
    max_len = default_max_len(len(source)) if max_len is None else max_len
    trace = ActionTrace(source_length=len(source))
    prefix = [BOS]
    k = 0
    for j in range(1, len(source) + 1):
        trace.read()
        enc = model.encode(source[:j])
        exhausted = j == len(source)
        while True:
            if len(prefix) - 1 >= max_len:
                trace.truncated = True
                return trace
            logp, head_probs = model.decode_step(enc, prefix)
            if not exhausted and float(np.min(head_probs)) < threshold:
                break
            token = int(np.argmax(logp))
            prefix.append(token)
            k += 1
            trace.writes_counter = k
            if token == EOS:
                trace.finished = True
                return trace
            trace.write(token, j)
    return trace


def wait_k_inference(model: StreamingModel, source: Sequence[int], k: int, max_len: int | None = None) -> ActionTrace:
    """Write token ``i`` after reading ``min(i - 1 + k, |X|)`` source tokens."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    source = list(source)
    max_len = default_max_len(len(source)) if max_len is None else max_len
    trace = ActionTrace(source_length=len(source))
    prefix = [BOS]
    j = 0
    enc = None
    while True:
        i = len(prefix)
        need = min(i - 1 + k, len(source))
        while j < need:
            j += 1
            trace.read()
            enc = None
        if i - 1 >= max_len:
            trace.truncated = True
            return trace
        if enc is None:
            enc = model.encode(source[:j])
        logp, _ = model.decode_step(enc, prefix)
        token = int(np.argmax(logp))
        prefix.append(token)
        if token == EOS:
            trace.finished = True
            return trace
        trace.write(token, j)


def offline_decode(model: StreamingModel, source: Sequence[int], max_len: int | None = None) -> list[int]:
    """Greedy decoding with the full source available from the start."""
    source = list(source)
    max_len = default_max_len(len(source)) if max_len is None else max_len
    enc = model.encode(source)
    prefix = [BOS]
    while len(prefix) - 1 < max_len:
        logp, _ = model.decode_step(enc, prefix)
        token = int(np.argmax(logp))
        if token == EOS:
            break
        prefix.append(token)
    return prefix[1:]
