"""Training loops for the AR and NAR models and the evaluation metrics:
whole-sentence exact match, token NLL, corpus-level multi-modality (plain
and length-normalized), and corpus BLEU-4.

Training is deterministic given (model seed, data seed): batches are drawn
from a dedicated PCG64 stream and the optimizer has no hidden state.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from narem.autodiff import Tensor, cross_entropy_ls, masked_token_loss
from narem.corpus import ParallelCorpus, Sentence
from narem.decoding import argmax_decode, concat_decode, greedy_decode_batch, odd_decode
from narem.model import (
    ModelConfig,
    TransformerModel,
    ar_teacher_inputs,
    ar_sequence_logprobs,
    decode_nar_unaries,
    nar_sequence_logprobs,
    pad_batch,
    predict_lengths,
)
from narem.optim import AdamState, DivergenceError, adam_step, zero_gradients


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    eval_interval: int = 500
    label_smoothing: float = 0.1
    seed: int = 0
    peak_lr: float = 3e-3
    warmup_steps: int = 200

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label smoothing must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class EvalReport:
    exact_match: float
    token_nll: float
    count: int
    ncm: Optional[float] = None
    bleu: Optional[float] = None

    def to_json(self) -> str:
        payload = {
            "exact_match": self.exact_match,
            "token_nll": self.token_nll,
            "ncm": self.ncm,
            "bleu": self.bleu,
            "count": self.count,
        }
        return json.dumps(payload, sort_keys=True)


def _train_loop(
    model: TransformerModel,
    corpus: ParallelCorpus,
    config: TrainConfig,
    loss_of_batch: Callable[[list[int], np.random.Generator], Tensor],
    eval_hook: Optional[Callable[[int, TransformerModel], None]] = None,
) -> list[float]:
    if len(corpus) == 0:
        raise ValueError("empty training corpus")
    params = model.parameters()
    opt = AdamState(params, peak_lr=config.peak_lr, warmup_steps=config.warmup_steps)
    data_rng = np.random.Generator(np.random.PCG64(config.seed))
    drop_rng = np.random.Generator(np.random.PCG64(config.seed + 1))
    history: list[float] = []
    for step in range(1, config.steps + 1):
        idx = data_rng.integers(0, len(corpus), size=min(config.batch_size, len(corpus)))
        zero_gradients(params)
        loss = loss_of_batch(list(idx), drop_rng)
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss at step {step}")
        loss.backward()
        adam_step(opt)
        history.append(value)
        if eval_hook is not None and (step % config.eval_interval == 0 or step == config.steps):
            eval_hook(step, model)
    return history


def train_ar(
    corpus: ParallelCorpus,
    config: TrainConfig,
    model_config: ModelConfig,
    eval_hook: Optional[Callable[[int, TransformerModel], None]] = None,
) -> tuple[TransformerModel, list[float]]:
    """Teacher-forced label-smoothed likelihood maximization of the causal model."""
    if not model_config.autoregressive:
        raise ValueError("train_ar needs an autoregressive model config")
    model = TransformerModel.init(model_config, seed=config.seed)

    def loss_of_batch(idx: list[int], rng: np.random.Generator) -> Tensor:
        sources = [corpus.pairs[i][0] for i in idx]
        targets = [corpus.pairs[i][1] for i in idx]
        src_ids, src_valid = pad_batch(sources)
        dec_in, dec_out, dec_valid = ar_teacher_inputs(targets)
        enc = model.encode_batch(src_ids, src_valid, train=True, rng=rng)
        logits = model.ar_logits(dec_in, enc, src_valid, dec_valid, train=True, rng=rng)
        return masked_token_loss(logits, dec_out, dec_valid, config.label_smoothing)

    history = _train_loop(model, corpus, config, loss_of_batch, eval_hook)
    return model, history


def train_nar(
    corpus: ParallelCorpus,
    config: TrainConfig,
    model_config: ModelConfig,
    eval_hook: Optional[Callable[[int, TransformerModel], None]] = None,
) -> tuple[TransformerModel, list[float]]:
    """Position-wise likelihood at ground-truth length plus the length-classifier loss."""
    if model_config.autoregressive:
        raise ValueError("train_nar needs a non-autoregressive model config")
    model = TransformerModel.init(model_config, seed=config.seed)

    def loss_of_batch(idx: list[int], rng: np.random.Generator) -> Tensor:
        sources = [corpus.pairs[i][0] for i in idx]
        targets = [corpus.pairs[i][1] for i in idx]
        src_ids, src_valid = pad_batch(sources)
        tgt_ids, tgt_valid = pad_batch(targets)
        lengths = np.array([len(t) for t in targets])
        enc = model.encode_batch(src_ids, src_valid, train=True, rng=rng)
        logits = model.nar_logits(
            len(idx), tgt_ids.shape[1], tgt_valid, enc, src_valid, train=True, rng=rng
        )
        tok_loss = masked_token_loss(logits, tgt_ids, tgt_valid, config.label_smoothing)
        len_loss = cross_entropy_ls(model.length_logits(enc, src_valid), lengths - 1)
        return tok_loss + model_config.length_loss_weight * len_loss

    history = _train_loop(model, corpus, config, loss_of_batch, eval_hook)
    return model, history


# -- evaluation -------------------------------------------------------------


def _chunks(n: int, size: int):
    for lo in range(0, n, size):
        yield range(lo, min(lo + size, n))


def predict_corpus(
    model: TransformerModel,
    corpus: ParallelCorpus,
    use_ground_truth_length: bool = True,
    decoder: str = "argmax",
    chunk: int = 256,
) -> list[Sentence]:
    """Model predictions for every source, in corpus order.

    AR models decode greedily (exactly the reference length when ground
    truth lengths are used, EOS-terminated otherwise).  NAR models decode
    per position at the chosen length with ``argmax`` or ``odd``.
    """
    preds: list[Sentence] = []
    for idx in _chunks(len(corpus), chunk):
        sources = [corpus.pairs[i][0] for i in idx]
        refs = [corpus.pairs[i][1] for i in idx]
        if model.config.autoregressive:
            forced = [len(r) for r in refs] if use_ground_truth_length else None
            preds.extend(greedy_decode_batch(model, sources, forced_lengths=forced))
        else:
            if use_ground_truth_length:
                lengths = [len(r) for r in refs]
            else:
                lengths = list(predict_lengths(model, sources))
            unaries = decode_nar_unaries(model, sources, lengths)
            decode = odd_decode if decoder == "odd" else argmax_decode
            preds.extend(decode(u) for u in unaries)
    return preds


def exact_match(
    model: TransformerModel,
    corpus: ParallelCorpus,
    use_ground_truth_length: bool = True,
    decoder: str = "argmax",
    concat_aware: bool = False,
) -> EvalReport:
    """Whole-sentence matching accuracy plus mean token NLL.

    With ``concat_aware`` both sides are passed through the concat codec
    before comparison (for corpora whose targets were concat-encoded).
    """
    if len(corpus) == 0:
        raise ValueError("empty evaluation corpus")
    preds = predict_corpus(model, corpus, use_ground_truth_length, decoder)
    matched = 0
    for pred, (_, ref) in zip(preds, corpus.pairs):
        if concat_aware:
            pred, ref = concat_decode(pred), concat_decode(ref)
        matched += int(pred == ref)
    nll = mean_token_nll(model, corpus)
    return EvalReport(exact_match=matched / len(corpus), token_nll=nll, count=len(corpus))


def mean_token_nll(model: TransformerModel, corpus: ParallelCorpus, chunk: int = 256) -> float:
    total = 0.0
    tokens = 0
    for idx in _chunks(len(corpus), chunk):
        sources = [corpus.pairs[i][0] for i in idx]
        targets = [corpus.pairs[i][1] for i in idx]
        if model.config.autoregressive:
            lp = ar_sequence_logprobs(model, sources, targets)
            tokens += sum(len(t) + 1 for t in targets)  # EOS term included
        else:
            lp = nar_sequence_logprobs(model, sources, targets, include_length=False)
            tokens += sum(len(t) for t in targets)
        total -= float(lp.sum())
    return total / tokens


def cm(model: TransformerModel, corpus: ParallelCorpus, include_length: bool = True, chunk: int = 256) -> float:
    """Mean negative factorized-model log-likelihood of the corpus.

    The caller is responsible for having trained the model to (budgeted)
    convergence on this corpus; values are training-budget-relative.
    """
    total = 0.0
    for idx in _chunks(len(corpus), chunk):
        sources = [corpus.pairs[i][0] for i in idx]
        targets = [corpus.pairs[i][1] for i in idx]
        total -= float(nar_sequence_logprobs(model, sources, targets, include_length).sum())
    return total / len(corpus)


def ncm(model: TransformerModel, corpus: ParallelCorpus, include_length: bool = True) -> float:
    """cm normalized by the mean target length (nats per token)."""
    return cm(model, corpus, include_length) / corpus.mean_target_length()


# -- BLEU -------------------------------------------------------------------


def _ngrams(tokens: Sentence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[Sentence], references: Sequence[Sentence]) -> float:
    """Corpus-level BLEU-4 with brevity penalty, no smoothing, as a percentage."""
    if not hypotheses:
        raise ValueError("empty corpus")
    if len(hypotheses) != len(references):
        raise ValueError("hypothesis/reference counts differ")
    matches = [0] * 4
    totals = [0] * 4
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            hyp_counts = _ngrams(hyp, n)
            ref_counts = _ngrams(ref, n)
            totals[n - 1] += max(len(hyp) - n + 1, 0)
            matches[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
    if any(t == 0 or m == 0 for m, t in zip(matches, totals)):
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matches, totals)) / 4.0
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / max(hyp_len, 1))
    return 100.0 * bp * math.exp(log_prec)
