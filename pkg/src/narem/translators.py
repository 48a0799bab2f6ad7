"""Estimator-style wrappers so the models compose with pipeline tooling.

``ArTranslator`` and ``NarTranslator`` follow the familiar conventions:
constructor arguments are stored untouched and reported by ``get_params``,
``fit`` trains on a parallel corpus and sets trailing-underscore
attributes, ``predict`` maps source sentences to target sentences, and
``score`` returns whole-sentence exact match.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from narem.corpus import ParallelCorpus, Sentence
from narem.decoding import (
    argmax_decode,
    beam_search_batch,
    greedy_decode_batch,
    odd_decode,
    parallel_length_decode,
    rescore,
)
from narem.model import ModelConfig, TransformerModel, decode_nar_unaries, predict_lengths
from narem.training import TrainConfig, exact_match, train_ar, train_nar


class NotFittedError(RuntimeError):
    pass


class _BaseTranslator:
    _PARAM_NAMES = (
        "preset",
        "enc_layers",
        "dec_layers",
        "d_model",
        "d_ff",
        "n_heads",
        "max_src_len",
        "max_tgt_len",
        "dropout",
        "steps",
        "batch_size",
        "label_smoothing",
        "peak_lr",
        "warmup_steps",
        "seed",
    )
    _autoregressive: bool

    def __init__(
        self,
        preset: Optional[str] = "toy",
        enc_layers: int = 3,
        dec_layers: int = 3,
        d_model: int = 256,
        d_ff: int = 1024,
        n_heads: int = 4,
        max_src_len: int = 32,
        max_tgt_len: int = 160,
        dropout: float = 0.1,
        steps: int = 2000,
        batch_size: int = 64,
        label_smoothing: float = 0.1,
        peak_lr: float = 3e-3,
        warmup_steps: int = 200,
        seed: int = 0,
    ):
        self.preset = preset
        self.enc_layers = enc_layers
        self.dec_layers = dec_layers
        self.d_model = d_model
        self.d_ff = d_ff
        self.n_heads = n_heads
        self.max_src_len = max_src_len
        self.max_tgt_len = max_tgt_len
        self.dropout = dropout
        self.steps = steps
        self.batch_size = batch_size
        self.label_smoothing = label_smoothing
        self.peak_lr = peak_lr
        self.warmup_steps = warmup_steps
        self.seed = seed

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._PARAM_NAMES}

    def set_params(self, **params) -> "_BaseTranslator":
        for name, value in params.items():
            if name not in self._PARAM_NAMES:
                raise ValueError(f"unknown parameter {name!r}")
            setattr(self, name, value)
        return self

    def _model_config(self, vocab_size: int) -> ModelConfig:
        common = dict(dropout=self.dropout, autoregressive=self._autoregressive)
        if self.preset is not None:
            return ModelConfig.preset(
                self.preset, vocab_size, self.max_src_len, self.max_tgt_len, **common
            )
        return ModelConfig(
            self.enc_layers,
            self.dec_layers,
            self.d_model,
            self.d_ff,
            self.n_heads,
            vocab_size,
            self.max_src_len,
            self.max_tgt_len,
            **common,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            label_smoothing=self.label_smoothing,
            seed=self.seed,
            peak_lr=self.peak_lr,
            warmup_steps=self.warmup_steps,
        )

    def fit(self, corpus: ParallelCorpus) -> "_BaseTranslator":
        _validate_corpus(corpus, self.max_src_len, self.max_tgt_len)
        trainer = train_ar if self._autoregressive else train_nar
        self.model_, self.loss_history_ = trainer(
            corpus, self._train_config(), self._model_config(len(corpus.vocab))
        )
        self.vocab_ = corpus.vocab
        return self

    def _check_fitted(self) -> TransformerModel:
        if not hasattr(self, "model_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")
        return self.model_

    def score(self, corpus: ParallelCorpus, use_ground_truth_length: bool = True) -> float:
        return exact_match(self._check_fitted(), corpus, use_ground_truth_length).exact_match


class ArTranslator(_BaseTranslator):
    """Causal (left-to-right) translator trained by teacher forcing."""

    _autoregressive = True

    def predict(
        self,
        sources: Sequence[Sentence],
        forced_lengths: Optional[Sequence[int]] = None,
        beam: int = 1,
    ) -> list[Sentence]:
        model = self._check_fitted()
        _validate_sources(sources, len(self.vocab_))
        if beam == 1:
            return greedy_decode_batch(model, sources, forced_lengths=forced_lengths)
        hyps = beam_search_batch(model, sources, beam=beam, forced_lengths=forced_lengths)
        return [h[0].tokens for h in hyps]


class NarTranslator(_BaseTranslator):
    """Parallel translator: all positions decoded independently at a chosen length."""

    _autoregressive = False

    def predict(
        self,
        sources: Sequence[Sentence],
        lengths: Optional[Sequence[int]] = None,
        decoder: str = "argmax",
        halfwidth: int = 0,
        teacher: Optional[ArTranslator] = None,
    ) -> list[Sentence]:
        model = self._check_fitted()
        _validate_sources(sources, len(self.vocab_))
        if halfwidth > 0:
            if teacher is None:
                raise ValueError("length-parallel decoding needs a fitted teacher for rescoring")
            teacher_model = teacher._check_fitted()
            out = []
            for src in sources:
                cands = parallel_length_decode(model, src, halfwidth=halfwidth, decoder=decoder)
                out.append(rescore(cands, teacher_model, src))
            return out
        if lengths is None:
            lengths = list(predict_lengths(model, sources))
        unaries = decode_nar_unaries(model, sources, lengths)
        decode = odd_decode if decoder == "odd" else argmax_decode
        return [decode(u) for u in unaries]


def _validate_corpus(corpus: ParallelCorpus, max_src: int, max_tgt: int) -> None:
    if len(corpus) == 0:
        raise ValueError("empty training corpus")
    for src, tgt in corpus.pairs:
        if len(src) > max_src:
            raise ValueError(f"source of length {len(src)} exceeds max_src_len={max_src}")
        if len(tgt) > max_tgt:
            raise ValueError(f"target of length {len(tgt)} exceeds max_tgt_len={max_tgt}")


def _validate_sources(sources: Sequence[Sentence], vocab_size: int) -> None:
    for s in sources:
        if not s:
            raise ValueError("empty source sentence")
        if any(not 0 <= t < vocab_size for t in s):
            raise ValueError("source token id outside the fitted vocabulary")
