"""Toy encoder-decoder with monotonic multihead cross-attention.

The model ``M(theta_e, theta_d, theta_p)`` is split into three top-level
modules: ``encoder`` (theta_e), ``decoder`` (theta_d) and ``policy``
(theta_p, one stepwise network per decoder layer and head). In offline mode
cross-attention is a plain softmax over the whole source; in simultaneous
mode each head attends with the infinite-lookback expectation ``beta`` built
from its own expected alignment.

Sequences in a batch are stacked along the row axis for every token-wise
operation; attention and alignment estimation loop over instances, so no
padding ever enters the math.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .alignment import emma_alignment, emma_alignment_array, milk_soft_attention
from .nn import Embedding, FeedForward, LayerNorm, Linear, Module
from .numerics import ContractError, Matrix
from .optim import Adam, clip_grad_norm
from .policy import MonotonicHeadSet
from .regularization import LossWeights, composite_objective, multihead_losses
from .tasks import BOS, EOS, Example, SyntheticTask

log = logging.getLogger(__name__)

PARTITIONS = ("encoder", "decoder", "policy")


class TrainingDiverged(RuntimeError):
    pass


class InvariantViolation(RuntimeError):
    pass


@dataclass
class ModelConfig:
    src_vocab: int = 64
    tgt_vocab: int = 64
    width: int = 64
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffn_width: int = 128
    bias_init: float = -2.0
    temperature: float = 0.25
    causal_encoder: bool = True
    seed: int = 0

    @property
    def head_dim(self) -> int:
        return self.width // self.heads


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 2e-3
    warmup: int = 100
    clip_norm: float = 1.0
    seed: int = 0
    absorb_eos: bool = True
    variance_scale: str = "normalized"
    latency_metric: str = "mean_delay"
    nll_reduction: str = "sentence"
    log_every: int = 50
    time_budget: float = 0.0
    target_accuracy: float = 0.0
    eval_every: int = 0
    debug: bool = True


# ---------------------------------------------------------------------------
# attention primitive


def segment_attention(q: Matrix, k: Matrix, v: Matrix, q_bounds: Sequence[tuple[int, int]],
                      k_bounds: Sequence[tuple[int, int]], heads: int, causal: bool) -> Matrix:
    """Scaled dot-product multihead attention over stacked sequences.

    Row block ``q_bounds[b]`` of ``q`` attends only to row block
    ``k_bounds[b]`` of ``k``/``v``. Heads split the column axis evenly.
    With ``causal`` a query at offset ``r`` sees keys at offsets ``<= r``.
    """
    width = q.cols
    if k.cols != width or v.cols != width or width % heads:
        raise nx.ShapeError(f"segment_attention: widths q {q.shape}, k {k.shape}, v {v.shape}, heads {heads}")
    d = width // heads
    scale = 1.0 / math.sqrt(d)
    qd, kd, vd = q.data, k.data, v.data
    out = np.zeros((q.rows, width))
    cache = []
    for (qs, qe), (ks, ke) in zip(q_bounds, k_bounds):
        n, m = qe - qs, ke - ks
        Q = qd[qs:qe].reshape(n, heads, d).transpose(1, 0, 2)
        K = kd[ks:ke].reshape(m, heads, d).transpose(1, 0, 2)
        V = vd[ks:ke].reshape(m, heads, d).transpose(1, 0, 2)
        S = Q @ K.transpose(0, 2, 1) * scale
        if causal:
            S = np.where(np.tril(np.ones((n, m), dtype=bool))[None], S, -np.inf)
        S = S - S.max(axis=-1, keepdims=True)
        P = np.exp(S)
        P /= P.sum(axis=-1, keepdims=True)
        out[qs:qe] = (P @ V).transpose(1, 0, 2).reshape(n, width)
        cache.append((Q, K, V, P))

    def bwd(g):
        gq = np.zeros(qd.shape)
        gk = np.zeros(kd.shape)
        gv = np.zeros(vd.shape)
        for (qs, qe), (ks, ke), (Q, K, V, P) in zip(q_bounds, k_bounds, cache):
            n, m = qe - qs, ke - ks
            G = g[qs:qe].reshape(n, heads, d).transpose(1, 0, 2)
            dV = P.transpose(0, 2, 1) @ G
            dP = G @ V.transpose(0, 2, 1)
            dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * scale
            gq[qs:qe] += (dS @ K).transpose(1, 0, 2).reshape(n, width)
            gk[ks:ke] += (dS.transpose(0, 2, 1) @ Q).transpose(1, 0, 2).reshape(m, width)
            gv[ks:ke] += dV.transpose(1, 0, 2).reshape(m, width)
        return gq, gk, gv

    return nx.custom_op("attention", out, (q, k, v), bwd)


def sinusoid_positions(length: int, width: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, width, 2) / width))
    table = np.zeros((length, width))
    table[:, 0::2] = np.sin(pos * rate)
    table[:, 1::2] = np.cos(pos * rate)
    return table


# ---------------------------------------------------------------------------
# layers


class SelfAttention(Module):
    def __init__(self, rng, width: int, heads: int):
        self.query = Linear(rng, width, width)
        self.key = Linear(rng, width, width)
        self.value = Linear(rng, width, width)
        self.out = Linear(rng, width, width)
        self.heads = heads

    def __call__(self, x: Matrix, bounds, causal: bool) -> Matrix:
        ctx = segment_attention(self.query(x), self.key(x), self.value(x), bounds, bounds, self.heads, causal)
        return self.out(ctx)


class EncoderLayer(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.norm_attn = LayerNorm(cfg.width)
        self.attn = SelfAttention(rng, cfg.width, cfg.heads)
        self.norm_ffn = LayerNorm(cfg.width)
        self.ffn = FeedForward(rng, cfg.width, cfg.ffn_width, cfg.width)

    def __call__(self, x, bounds, causal):
        x = x + self.attn(self.norm_attn(x), bounds, causal)
        return x + self.ffn(self.norm_ffn(x))


class Encoder(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.embed = Embedding(rng, cfg.src_vocab, cfg.width)
        self.layers = [EncoderLayer(rng, cfg) for _ in range(cfg.encoder_layers)]
        self.norm = LayerNorm(cfg.width)
        self.causal = cfg.causal_encoder
        self.width = cfg.width

    def __call__(self, sources: Sequence[Sequence[int]]) -> tuple[Matrix, list[tuple[int, int]]]:
        bounds = _bounds([len(s) for s in sources])
        tokens = [t for s in sources for t in s]
        pos = np.concatenate([sinusoid_positions(len(s), self.width) for s in sources])
        x = self.embed(tokens) + Matrix(pos)
        for layer in self.layers:
            x = layer(x, bounds, self.causal)
        return self.norm(x), bounds


class DecoderLayer(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.norm_self = LayerNorm(cfg.width)
        self.self_attn = SelfAttention(rng, cfg.width, cfg.heads)
        self.norm_cross = LayerNorm(cfg.width)
        self.cross_query = Linear(rng, cfg.width, cfg.width)
        self.cross_key = Linear(rng, cfg.width, cfg.width)
        self.cross_value = Linear(rng, cfg.width, cfg.width)
        self.cross_out = Linear(rng, cfg.width, cfg.width)
        self.norm_ffn = LayerNorm(cfg.width)
        self.ffn = FeedForward(rng, cfg.width, cfg.ffn_width, cfg.width)


class Decoder(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.embed = Embedding(rng, cfg.tgt_vocab, cfg.width)
        self.layers = [DecoderLayer(rng, cfg) for _ in range(cfg.decoder_layers)]
        self.norm = LayerNorm(cfg.width)
        self.output = Linear(rng, cfg.width, cfg.tgt_vocab, init_scale=0.1)


def _bounds(lengths: Sequence[int]) -> list[tuple[int, int]]:
    ends = np.cumsum(lengths)
    return [(int(e - n), int(e)) for n, e in zip(lengths, ends)]


@dataclass
class ForwardResult:
    log_probs: Matrix
    targets: list[int]
    tgt_bounds: list[tuple[int, int]]
    # alphas[b][l * heads + h] and probs[b][...] per instance, simultaneous mode only
    alphas: list[list[Matrix]] = field(default_factory=list)
    probs: list[list[Matrix]] = field(default_factory=list)


class ToySeq2Seq(Module):
    def __init__(self, cfg: ModelConfig):
        self.config = cfg
        rng = np.random.default_rng([cfg.seed, 10])
        self.encoder = Encoder(rng, cfg)
        self.decoder = Decoder(rng, cfg)
        self.policy = fresh_policy(cfg, cfg.seed)
        # "offline" decodes with softmax cross-attention, "simultaneous" with expected monotonic attention
        self.stage = "offline"

    # -- parameter bookkeeping ------------------------------------------------

    def partition(self) -> dict[str, list[tuple[str, Matrix]]]:
        """theta_e / theta_d / theta_p, keyed by top-level module name."""
        return {name: list(getattr(self, name).named_parameters(name + ".")) for name in PARTITIONS}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unknown = set(state) - set(params)
        if missing or unknown:
            raise ContractError(f"state mismatch; missing {sorted(missing)[:5]}, unknown {sorted(unknown)[:5]}")
        for name, p in params.items():
            arr = np.array(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ContractError(f"{name}: shape {arr.shape} does not match {p.shape}")
            arr.flags.writeable = False
            p.data = arr

    def partition_hash(self, part: str) -> str:
        h = hashlib.sha256()
        for name, p in getattr(self, part).named_parameters(part + "."):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def set_trainable(self, parts: Sequence[str]) -> None:
        for part in PARTITIONS:
            for _, p in getattr(self, part).named_parameters():
                p.requires_grad = part in parts

    # -- forward ---------------------------------------------------------------

    def _check_tokens(self, batch: Sequence[Example]) -> None:
        cfg = self.config
        for src, tgt in batch:
            if not src or not tgt:
                raise ContractError("source and target must be non-empty")
            if min(src) < 0 or max(src) >= cfg.src_vocab:
                raise ContractError(f"source token out of vocabulary [0, {cfg.src_vocab})")
            if min(tgt) < 0 or max(tgt) >= cfg.tgt_vocab:
                raise ContractError(f"target token out of vocabulary [0, {cfg.tgt_vocab})")

    def forward(self, batch: Sequence[Example], simultaneous: bool = False, absorb_eos: bool = True,
                force_p: float | None = None) -> ForwardResult:
        """Teacher-forced pass: decoder reads ``BOS y_1..y_n`` and predicts ``y_1..y_n EOS``."""
        self._check_tokens(batch)
        enc, src_bounds = self.encoder([src for src, _ in batch])
        dec_inputs = [[BOS] + list(tgt) for _, tgt in batch]
        targets = [t for _, tgt in batch for t in list(tgt) + [EOS]]
        return self._decode(enc, src_bounds, dec_inputs, targets, simultaneous, absorb_eos, force_p)

    def _decode(self, enc: Matrix, src_bounds, dec_inputs, targets, simultaneous, absorb_eos, force_p):
        cfg = self.config
        dec = self.decoder
        tgt_bounds = _bounds([len(s) for s in dec_inputs])
        tokens = [t for s in dec_inputs for t in s]
        pos = np.concatenate([sinusoid_positions(len(s), cfg.width) for s in dec_inputs])
        x = dec.embed(tokens) + Matrix(pos)
        n_inst = len(dec_inputs)
        alphas: list[list[Matrix]] = [[] for _ in range(n_inst)]
        probs: list[list[Matrix]] = [[] for _ in range(n_inst)]
        for li, layer in enumerate(dec.layers):
            x = x + layer.self_attn(layer.norm_self(x), tgt_bounds, True)
            query_states = layer.norm_cross(x)
            q = layer.cross_query(query_states)
            k = layer.cross_key(enc)
            v = layer.cross_value(enc)
            if simultaneous:
                ctx = self._monotonic_cross(li, query_states, enc, q, k, v, tgt_bounds, src_bounds,
                                            absorb_eos, force_p, alphas, probs)
            else:
                ctx = segment_attention(q, k, v, tgt_bounds, src_bounds, cfg.heads, False)
            x = x + layer.cross_out(ctx)
            x = x + layer.ffn(layer.norm_ffn(x))
        logits = dec.output(dec.norm(x))
        return ForwardResult(nx.log_softmax_rows(logits), targets, tgt_bounds, alphas, probs)

    def _monotonic_cross(self, li, query_states, enc, q, k, v, tgt_bounds, src_bounds, absorb_eos, force_p,
                         alphas, probs) -> Matrix:
        cfg = self.config
        d = cfg.head_dim
        scale = 1.0 / math.sqrt(d)
        nets = self.policy.nets[li]
        target_proj = [net.project_target(query_states) for net in nets]
        source_proj = [net.project_source(enc) for net in nets]
        blocks = []
        for b, ((ts, te), (ss, se)) in enumerate(zip(tgt_bounds, src_bounds)):
            q_b, k_b, v_b = nx.slice_rows(q, ts, te), nx.slice_rows(k, ss, se), nx.slice_rows(v, ss, se)
            heads_out = []
            for h, net in enumerate(nets):
                if force_p is None:
                    p = net.probs_from_projections(nx.slice_rows(target_proj[h], ts, te),
                                                   nx.slice_rows(source_proj[h], ss, se))
                else:
                    p = Matrix(np.full((te - ts, se - ss), float(force_p)))
                alpha = emma_alignment(p, absorb_eos=absorb_eos)
                q_h = nx.slice_cols(q_b, h * d, (h + 1) * d)
                k_h = nx.slice_cols(k_b, h * d, (h + 1) * d)
                v_h = nx.slice_cols(v_b, h * d, (h + 1) * d)
                energy = nx.scale(nx.matmul(q_h, nx.transpose(k_h)), scale)
                beta = milk_soft_attention(alpha, energy)
                heads_out.append(nx.matmul(beta, v_h))
                alphas[b].append(alpha)
                probs[b].append(p)
            blocks.append(nx.concat_cols(heads_out))
        return blocks[0] if len(blocks) == 1 else nx.concat_rows(blocks)

    # -- incremental interface used by streaming inference ----------------------

    def encode(self, src_prefix: Sequence[int]) -> Matrix:
        """Encoder states for a source prefix (the whole prefix is re-encoded)."""
        with nx.no_grad():
            enc, _ = self.encoder([list(src_prefix)])
        return enc

    def decode_step(self, enc: Matrix, prefix: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Next-token log-probabilities and every head's write probability.

        ``prefix`` is ``BOS y_1 .. y_{i-1}``. The write probabilities are those
        of ``(s_{i-1}, h_j)`` with ``h_j`` the newest encoder state, ordered
        layer-major. An offline model cross-attends with a softmax over the
        available encoder prefix. A simultaneous model recomputes each head's
        expected attention over that prefix, with the end of the prefix
        absorbing, so deeper layers see the same kind of context as in
        training.
        """
        cfg = self.config
        dec = self.decoder
        monotonic = self.stage == "simultaneous"
        with nx.no_grad():
            n = len(prefix)
            x = dec.embed(list(prefix)) + Matrix(sinusoid_positions(n, cfg.width))
            bounds = [(0, n)]
            src_bounds = [(0, enc.rows)]
            head_probs = []
            for li, layer in enumerate(dec.layers):
                x = x + layer.self_attn(layer.norm_self(x), bounds, True)
                query_states = layer.norm_cross(x)
                q, k, v = layer.cross_query(query_states), layer.cross_key(enc), layer.cross_value(enc)
                probs = [net.probs_from_projections(net.project_target(query_states), net.project_source(enc))
                         for net in self.policy.nets[li]]
                head_probs.extend(p.data[-1, -1] for p in probs)
                if monotonic:
                    ctx = self._expected_context(probs, q, k, v)
                else:
                    ctx = segment_attention(q, k, v, bounds, src_bounds, cfg.heads, False)
                x = x + layer.cross_out(ctx)
                x = x + layer.ffn(layer.norm_ffn(x))
            logits = dec.output(dec.norm(nx.slice_rows(x, n - 1, n)))
            logp = nx.log_softmax_rows(logits).data[0]
        return logp, np.array(head_probs)

    def _expected_context(self, probs: Sequence[Matrix], q: Matrix, k: Matrix, v: Matrix) -> Matrix:
        d = self.config.head_dim
        scale = 1.0 / math.sqrt(d)
        heads_out = []
        for h, p in enumerate(probs):
            cols = slice(h * d, (h + 1) * d)
            alpha = emma_alignment_array(p.data, absorb_eos=True)
            energy = q.data[:, cols] @ k.data[:, cols].T * scale
            beta = milk_soft_attention(Matrix(alpha), Matrix(energy)).data
            heads_out.append(beta @ v.data[:, cols])
        return Matrix(np.concatenate(heads_out, axis=1))


def fresh_policy(cfg: ModelConfig, seed: int) -> MonotonicHeadSet:
    rng = np.random.default_rng([seed, 20])
    return MonotonicHeadSet.create(rng, cfg.decoder_layers, cfg.heads, cfg.width, cfg.head_dim,
                                   cfg.bias_init, cfg.temperature)


# ---------------------------------------------------------------------------
# functional entry points


def forward_offline(model: ToySeq2Seq, src: Sequence[int], tgt: Sequence[int]) -> Matrix:
    """Log-probabilities ``(|Y|+1) x V`` under full softmax cross-attention."""
    return model.forward([(list(src), list(tgt))], simultaneous=False).log_probs


def forward_simultaneous(model: ToySeq2Seq, src: Sequence[int], tgt: Sequence[int], absorb_eos: bool = True,
                         force_p: float | None = None) -> tuple[Matrix, list[Matrix]]:
    """Log-probabilities with infinite-lookback monotonic cross-attention, plus per-head alignments."""
    res = model.forward([(list(src), list(tgt))], simultaneous=True, absorb_eos=absorb_eos, force_p=force_p)
    return res.log_probs, res.alphas[0]


NLL_REDUCTIONS = ("token", "sentence")


def nll_loss(res: ForwardResult, reduction: str = "token") -> Matrix:
    """Negative log-likelihood averaged per target token or per sentence.

    ``"sentence"`` is ``-log P(Y|X)`` summed over each target and averaged over
    the batch, so longer targets weigh more against the length-normalised
    latency term.
    """
    if reduction not in NLL_REDUCTIONS:
        raise ContractError(f"unknown nll reduction {reduction!r}")
    count = len(res.targets) if reduction == "token" else len(res.tgt_bounds)
    return nx.scale(nx.sum_all(nx.pick(res.log_probs, res.targets)), -1.0 / count)


def objective(model: ToySeq2Seq, batch: Sequence[Example], weights: LossWeights, absorb_eos: bool = True,
              variance_scale: str = "normalized",
              latency_metric: str = "mean_delay",
              nll_reduction: str = "sentence") -> tuple[Matrix, dict[str, float]]:
    """Composite simultaneous objective for one batch.

    Latency and variance losses are averaged over heads and layers within an
    instance, then over instances. ``variance_scale="normalized"`` divides the
    per-instance variance sum by ``|Y| |X|^2`` so it is scale-free like the
    latency term; ``"sum"`` keeps the raw sum. ``latency_metric`` selects the
    latency term: ``"mean_delay"`` or ``"dal"`` (differentiable average lagging).
    ``nll_reduction`` is passed to :func:`nll_loss`.
    """
    res = model.forward(batch, simultaneous=True, absorb_eos=absorb_eos)
    nll = nll_loss(res, nll_reduction)
    lat_terms, var_terms = [], []
    for (src, _), alphas in zip(batch, res.alphas):
        lat, var = multihead_losses(alphas, latency_metric)
        if variance_scale == "normalized":
            var = nx.scale(var, 1.0 / (alphas[0].rows * len(src) ** 2))
        elif variance_scale != "sum":
            raise ContractError(f"unknown variance_scale {variance_scale!r}")
        lat_terms.append(lat)
        var_terms.append(var)
    latency = nx.scale(_total(lat_terms), 1.0 / len(batch))
    variance = nx.scale(_total(var_terms), 1.0 / len(batch))
    total = composite_objective(nll, latency, variance, weights)
    return total, {"nll": nll.item(), "latency_loss": latency.item(), "variance_loss": variance.item()}


def _total(items):
    out = items[0]
    for it in items[1:]:
        out = out + it
    return out


def token_accuracy(model: ToySeq2Seq, examples: Sequence[Example], simultaneous: bool = False,
                   batch_size: int = 64) -> float:
    """Teacher-forced argmax accuracy over all target tokens including EOS."""
    correct = total = 0
    with nx.no_grad():
        for start in range(0, len(examples), batch_size):
            res = model.forward(examples[start:start + batch_size], simultaneous=simultaneous)
            pred = res.log_probs.data.argmax(axis=1)
            correct += int((pred == np.array(res.targets)).sum())
            total += len(res.targets)
    return correct / total


# ---------------------------------------------------------------------------
# training


CURVE_HEADER = ("step", "nll", "latency_loss", "variance_loss")


@dataclass
class TrainingState:
    """Everything needed to continue a run bit-for-bit: step, parameters, Adam moments."""

    step: int
    params: dict[str, np.ndarray]
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]


def _batches(rng: np.random.Generator, n: int, batch_size: int):
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield order[start:start + batch_size]


def _run(model: ToySeq2Seq, named: list[tuple[str, Matrix]], examples: Sequence[Example], cfg: TrainConfig,
         loss_fn, curve_path: Path | None, valid: Sequence[Example] | None = None, simultaneous: bool = False,
         resume: TrainingState | None = None) -> list[dict]:
    history: list[dict] = []
    params = [p for _, p in named]
    opt = Adam(params, lr=cfg.learning_rate, warmup=cfg.warmup)
    rng = np.random.default_rng([cfg.seed, 30])
    batches = _batches(rng, len(examples), min(cfg.batch_size, len(examples)))
    first_step = 1
    if resume is not None:
        opt.step_count = resume.step
        opt.m = [resume.first_moment[name].copy() for name, _ in named]
        opt.v = [resume.second_moment[name].copy() for name, _ in named]
        for _ in range(resume.step):
            next(batches)
        first_step = resume.step + 1
    model.training_log = history
    handle = writer = None
    if curve_path is not None:
        handle = open(curve_path, "a" if resume is not None else "w", encoding="utf-8", newline="")
        writer = csv.writer(handle, lineterminator="\n")
        if resume is None:
            writer.writerow(CURVE_HEADER)
    start = time.process_time()
    try:
        for step in range(first_step, cfg.steps + 1):
            batch = [examples[k] for k in next(batches)]
            opt.zero_grad()
            try:
                loss, stats = loss_fn(batch)
            except nx.NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite forward at step {step}: {exc}; last stats {history[-1:]}") from exc
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"loss became {loss.item()} at step {step}; last stats {history[-1:]}")
            nx.backward(loss)
            clip_grad_norm(params, cfg.clip_norm)
            opt.step()
            stats = {"step": step, **stats}
            history.append(stats)
            if writer is not None:
                writer.writerow([step] + [repr(float(stats[k])) for k in CURVE_HEADER[1:]])
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("step %d %s", step, {k: round(v, 4) for k, v in stats.items() if k != "step"})
            if valid is not None and cfg.eval_every and step % cfg.eval_every == 0 and cfg.target_accuracy > 0:
                acc = token_accuracy(model, valid, simultaneous=simultaneous)
                log.info("step %d valid accuracy %.4f", step, acc)
                if acc >= cfg.target_accuracy:
                    break
            if cfg.time_budget and time.process_time() - start > cfg.time_budget:
                log.info("time budget reached at step %d", step)
                break
    finally:
        if handle is not None:
            handle.close()
    model.training_state = TrainingState(
        step=opt.step_count,
        params={name: p.data for name, p in named},
        first_moment={name: m for (name, _), m in zip(named, opt.m)},
        second_moment={name: v for (name, _), v in zip(named, opt.v)},
    )
    return history


def _examples(task) -> list[Example]:
    return task.splits()["train"] if isinstance(task, SyntheticTask) else list(task)


def _load_partial(model: ToySeq2Seq, arrays: dict[str, np.ndarray]) -> None:
    state = model.state_dict()
    state.update(arrays)
    model.load_state_dict(state)


def train_offline(task: SyntheticTask | Sequence[Example], model_cfg: ModelConfig, cfg: TrainConfig,
                  curve_path: Path | None = None, valid: Sequence[Example] | None = None,
                  resume: TrainingState | None = None) -> ToySeq2Seq:
    """Train encoder and decoder with full softmax cross-attention; the policy is untouched.

    The returned model carries ``training_log`` (per-step stats) and
    ``training_state`` (for :func:`save_training_state`).
    """
    examples = _examples(task)
    model = ToySeq2Seq(model_cfg)
    if resume is not None:
        _load_partial(model, resume.params)
    model.set_trainable(("encoder", "decoder"))
    named = [item for part in ("encoder", "decoder") for item in model.partition()[part]]

    def loss_fn(batch):
        nll = nll_loss(model.forward(batch, simultaneous=False))
        return nll, {"nll": nll.item(), "latency_loss": 0.0, "variance_loss": 0.0}

    try:
        _run(model, named, examples, cfg, loss_fn, curve_path, valid, resume=resume)
    finally:
        model.set_trainable(PARTITIONS)
    return model


def finetune_simultaneous(offline: ToySeq2Seq, task: SyntheticTask | Sequence[Example], weights: LossWeights,
                          cfg: TrainConfig, curve_path: Path | None = None, policy_seed: int | None = None,
                          resume: TrainingState | None = None) -> ToySeq2Seq:
    """Copy theta_e and theta_d from ``offline``, attach a fresh policy, train theta_d and theta_p.

    The encoder never enters the gradient graph; in debug mode its hash is
    compared before and after and a mismatch raises :class:`InvariantViolation`.
    """
    examples = _examples(task)
    model = ToySeq2Seq(offline.config)
    model.stage = "simultaneous"
    model.policy = fresh_policy(offline.config, offline.config.seed if policy_seed is None else policy_seed)
    _load_partial(model, {k: v for k, v in offline.state_dict().items() if not k.startswith("policy.")})
    if resume is not None:
        _load_partial(model, resume.params)
    frozen = model.partition_hash("encoder")
    model.set_trainable(("decoder", "policy"))
    named = [item for part in ("decoder", "policy") for item in model.partition()[part]]

    def loss_fn(batch):
        return objective(model, batch, weights, absorb_eos=cfg.absorb_eos, variance_scale=cfg.variance_scale,
                         latency_metric=cfg.latency_metric, nll_reduction=cfg.nll_reduction)

    try:
        _run(model, named, examples, cfg, loss_fn, curve_path, simultaneous=True, resume=resume)
    finally:
        model.set_trainable(PARTITIONS)
    if cfg.debug and model.partition_hash("encoder") != frozen:
        raise InvariantViolation("encoder parameters changed during simultaneous fine-tuning")
    return model


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"EMMACKPT"
CKPT_VERSION = 1


def write_arrays(path: Path, state: dict[str, np.ndarray]) -> None:
    """Binary blob of named float64 arrays.

    Layout: magic, u32 version, u32 count, then per array u32 name length,
    UTF-8 name, u32 ndim, u32 dims, little-endian float64 data.
    """
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(state)))
        for name in sorted(state):
            arr = np.ascontiguousarray(state[name], dtype="<f8")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def save_checkpoint(model: ToySeq2Seq, path: Path, manifest: dict | None = None) -> None:
    """Parameter blob at ``path`` plus a plain-text ``<path>.manifest``."""
    path = Path(path)
    write_arrays(path, model.state_dict())
    lines = {f"model.{k}": v for k, v in asdict(model.config).items()}
    lines["stage"] = model.stage
    lines.update(manifest or {})
    with open(manifest_path(path), "w", encoding="utf-8", newline="\n") as f:
        f.write(f"format = {CKPT_MAGIC.decode()} v{CKPT_VERSION}\n")
        for key in sorted(lines):
            f.write(f"{key} = {lines[key]}\n")


def manifest_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def read_manifest(path: Path) -> dict[str, str]:
    out = {}
    with open(manifest_path(path), encoding="utf-8") as f:
        for line in f:
            if "=" in line:
                key, value = line.split("=", 1)
                out[key.strip()] = value.strip()
    return out


def read_arrays(path: Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(CKPT_MAGIC):
        raise ContractError(f"{path}: not a checkpoint file")
    off = len(CKPT_MAGIC)
    version, count = struct.unpack_from("<II", blob, off)
    off += 8
    if version != CKPT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(shape)) * 8
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=size // 8, offset=off).reshape(shape).copy()
        off += size
    return arrays


def load_checkpoint(path: Path) -> ToySeq2Seq:
    manifest = read_manifest(path)
    fields = ModelConfig.__dataclass_fields__
    kwargs = {}
    for key, value in manifest.items():
        if key.startswith("model."):
            name = key[len("model."):]
            typ = fields[name].type
            kwargs[name] = _parse_scalar(value, typ)
    model = ToySeq2Seq(ModelConfig(**kwargs))
    model.stage = manifest.get("stage", "offline")
    model.load_state_dict(read_arrays(path))
    return model


def _parse_scalar(value: str, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        return value == "True"
    if typ == "int":
        return int(value)
    if typ == "float":
        return float(value)
    return value


def save_training_state(path: Path, state: TrainingState) -> None:
    arrays = {"step": np.array([float(state.step)])}
    for prefix, group in (("param.", state.params), ("m.", state.first_moment), ("v.", state.second_moment)):
        arrays.update({prefix + k: v for k, v in group.items()})
    write_arrays(path, arrays)


def load_training_state(path: Path) -> TrainingState:
    arrays = read_arrays(path)
    groups: dict[str, dict[str, np.ndarray]] = {"param.": {}, "m.": {}, "v.": {}}
    for key, value in arrays.items():
        for prefix, group in groups.items():
            if key.startswith(prefix):
                group[key[len(prefix):]] = value
    return TrainingState(int(arrays["step"][0]), groups["param."], groups["m."], groups["v."])
