"""Deterministic synthetic translation tasks.

Token ids 0 and 1 are reserved for BOS and EOS in both vocabularies; content
tokens are ``2 .. vocab-1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

BOS = 0
EOS = 1
N_SPECIAL = 2

TASK_KINDS = ("copy", "lexicon-map", "local-shuffle-map")

Example = tuple[list[int], list[int]]


@dataclass(frozen=True)
class SyntheticTask:
    kind: str = "lexicon-map"
    vocab: int = 64
    min_len: int = 5
    max_len: int = 20
    train_size: int = 50_000
    valid_size: int = 500
    test_size: int = 500
    swap_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if self.vocab <= N_SPECIAL + 1:
            raise ValueError(f"vocab must exceed {N_SPECIAL + 1}, got {self.vocab}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"bad length range [{self.min_len}, {self.max_len}]")

    def lexicon(self) -> np.ndarray:
        """Source token -> target token table (identity for the copy task)."""
        table = np.arange(self.vocab)
        if self.kind != "copy":
            rng = np.random.default_rng([self.seed, 1])
            table[N_SPECIAL:] = N_SPECIAL + rng.permutation(self.vocab - N_SPECIAL)
        return table

    def _draw(self, rng: np.random.Generator, n: int) -> list[Example]:
        table = self.lexicon()
        out = []
        for _ in range(n):
            length = int(rng.integers(self.min_len, self.max_len + 1))
            src = rng.integers(N_SPECIAL, self.vocab, size=length)
            tgt = table[src]
            if self.kind == "local-shuffle-map":
                tgt = tgt.copy()
                k = 0
                while k < length - 1:
                    if rng.random() < self.swap_rate:
                        tgt[k], tgt[k + 1] = tgt[k + 1], tgt[k]
                        k += 2
                    else:
                        k += 1
            out.append((src.tolist(), tgt.tolist()))
        return out

    def splits(self) -> dict[str, list[Example]]:
        # one independent stream per split so sizes can change without reshuffling the others
        sizes = {"train": self.train_size, "valid": self.valid_size, "test": self.test_size}
        return {name: self._draw(np.random.default_rng([self.seed, 2, k]), n)
                for k, (name, n) in enumerate(sizes.items())}


def write_split(path: Path, examples: list[Example]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for src, tgt in examples:
            f.write(" ".join(map(str, src)) + "\t" + " ".join(map(str, tgt)) + "\n")


def read_split(path: Path) -> list[Example]:
    examples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                src, tgt = line.split("\t")
                examples.append(([int(t) for t in src.split()], [int(t) for t in tgt.split()]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed line") from exc
    return examples


def write_lexicon(path: Path, table: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in range(N_SPECIAL, len(table)):
            f.write(f"{s}\t{int(table[s])}\n")


def read_lexicon(path: Path) -> dict[int, int]:
    mapping = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                s, t = line.split("\t")
                mapping[int(s)] = int(t)
    return mapping
