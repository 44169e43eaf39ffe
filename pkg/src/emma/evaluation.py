"""Latency and quality metrics plus the threshold sweep harness."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .inference import ActionTrace, extract_delays, run_emma_inference
from .tasks import Example


@dataclass(frozen=True)
class LaggingResult:
    value: float
    tau: int
    incomplete: bool


def average_lagging(delays: Sequence[float], source_length: float, reference_length: int) -> LaggingResult:
    """Average Lagging against the ideal policy ``(i - 1) * |X| / |Y|``.

    Sums up to ``tau``, the first output whose delay reaches the full source.
    ``reference_length`` is the reference translation length. If no delay
    reaches ``|X|`` the sum runs over every output and the result is flagged
    ``incomplete``.
    """
    d = [float(x) for x in delays]
    if not d:
        raise ValueError("average_lagging needs at least one delay")
    if reference_length < 1:
        raise ValueError("reference length must be positive")
    if any(b < a for a, b in zip(d, d[1:])):
        raise ValueError("delays must be non-decreasing")
    tau = next((i + 1 for i, x in enumerate(d) if x >= source_length), None)
    incomplete = tau is None
    if incomplete:
        tau = len(d)
    rate = source_length / reference_length
    lag = sum(d[i] - i * rate for i in range(tau)) / tau
    return LaggingResult(lag, tau, incomplete)


def _ngrams(tokens: Sequence[int], n: int) -> Counter:
    return Counter(tuple(tokens[k:k + n]) for k in range(len(tokens) - n + 1))


def toy_bleu(hypotheses: Sequence[Sequence[int]], references: Sequence[Sequence[int]], max_order: int = 4) -> float:
    """Corpus BLEU on token ids, 0..100.

    Clipped n-gram precisions up to ``max_order`` are pooled over the corpus.
    A higher order (n >= 2) with zero matches is add-one smoothed,
    ``(m + 1) / (c + 1)``; orders with matches are used as-is. No unigram
    match at all scores 0. Brevity penalty is
    ``exp(1 - r / c)`` when the hypothesis total ``c`` is shorter than the
    reference total ``r``.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("toy_bleu needs a non-empty corpus")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for m, c in zip(matches, totals):
        if m == 0:
            m, c = m + 1, c + 1
        log_p += math.log(m / c)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p / max_order)


@dataclass(frozen=True)
class SweepRecord:
    threshold: float
    seed: int
    bleu: float
    al: float
    incomplete_count: int
    mean_first_delay: float
    task: str = ""


SWEEP_HEADER = ("threshold", "seed", "bleu", "al", "incomplete_count")


def evaluate_traces(traces: Sequence[ActionTrace], examples: Sequence[Example]) -> tuple[float, float, int, float]:
    """Corpus BLEU, mean AL, incomplete count, mean first-token delay.

    A trace is incomplete when it was truncated or none of its delays reaches
    ``|X|``. Truncated traces are left out of the AL mean; the others enter it
    with the value computed up to their last write.
    """
    hyps = [t.tokens for t in traces]
    refs = [tgt for _, tgt in examples]
    bleu = toy_bleu(hyps, refs)
    lags = []
    incomplete = 0
    first = []
    for trace, (src, tgt) in zip(traces, examples):
        delays = extract_delays(trace)
        if trace.truncated or not delays:
            incomplete += 1
            continue
        first.append(delays[0])
        res = average_lagging(delays, len(src), len(tgt))
        incomplete += res.incomplete
        lags.append(res.value)
    al = float(np.mean(lags)) if lags else float("nan")
    return bleu, al, incomplete, float(np.mean(first)) if first else float("nan")


def sweep(model, examples: Sequence[Example], thresholds: Sequence[float], seeds: Sequence[int],
          task_name: str = "", max_len: int | None = None) -> list[SweepRecord]:
    """Run threshold inference over ``examples`` for every (threshold, seed) pair.

    Decoding is greedy, so the seed only labels the record (it identifies
    which trained model or data draw produced it).
    """
    records = []
    for seed in seeds:
        for threshold in thresholds:
            traces = [run_emma_inference(model, src, threshold, max_len) for src, _ in examples]
            bleu, al, incomplete, first = evaluate_traces(traces, examples)
            records.append(SweepRecord(float(threshold), int(seed), bleu, al, incomplete, first, task_name))
    return records


def records_to_csv(records: Sequence[SweepRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    for r in records:
        writer.writerow([repr(r.threshold), r.seed, f"{r.bleu:.6f}", f"{r.al:.6f}", r.incomplete_count])
    return buf.getvalue()
