"""Inference procedures: greedy/beam search, constrained CRF decoding,
duplicate collapsing, the concat codec, and length-parallel decoding.

All decoders are pure functions of (model, input) and deterministic; every
tie anywhere is broken toward the lower token id (then the shorter
candidate for rescoring) so outputs are reproducible bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from narem.corpus import Sentence, Vocabulary
from narem.model import (
    ArDecoderSession,
    TransformerModel,
    ar_sequence_logprobs,
    decode_nar_unaries,
    predict_lengths,
)

NEG = -1e30


@dataclass
class BeamHypothesis:
    tokens: Sentence
    score: float
    finished: bool


# -- beam search ------------------------------------------------------------


def beam_search_batch(
    model: TransformerModel,
    sources: Sequence[Sentence],
    beam: int,
    forced_lengths: Optional[Sequence[int]] = None,
    max_len: Optional[int] = None,
) -> list[list[BeamHypothesis]]:
    """Beam search over the causal decoder for a batch of sources.

    With ``forced_lengths`` the decoder runs exactly that many steps per
    source with EOS excluded from the candidates; otherwise hypotheses
    finish on EOS (capped at the model's maximum target length).  Returns up
    to ``beam`` hypotheses per source, best first.  Scores are plain summed
    log-probabilities (no length normalization).
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    cfg = model.config
    n = len(sources)
    vocab = cfg.vocab_size
    cap = max_len or cfg.max_tgt_len
    if forced_lengths is not None:
        forced = np.asarray(forced_lengths)
        if np.any(forced < 1) or np.any(forced > cfg.max_tgt_len):
            raise ValueError("forced lengths must lie in 1..max_tgt_len")
        cap = int(forced.max())
    session = ArDecoderSession(model, sources, rows_per_source=beam)

    tokens = np.full((n, beam, 0), 0, dtype=np.int64)
    scores = np.full((n, beam), NEG)
    scores[:, 0] = 0.0
    last = np.full(n * beam, Vocabulary.BOS, dtype=np.int64)
    results: list[list[BeamHypothesis]] = [[] for _ in range(n)]

    for t in range(cap):
        logp = session.step(last).reshape(n, beam, vocab)
        if forced_lengths is not None:
            logp[:, :, Vocabulary.EOS] = NEG
        cand = scores[:, :, None] + logp  # (n, beam, V)

        if forced_lengths is None:
            # A hypothesis finishes only when EOS ranks within the top-beam
            # extensions (with beam=1 this is exactly greedy stopping).
            flat_all = cand.reshape(n, beam * vocab)
            top_all = np.argsort(-flat_all, axis=1, kind="stable")[:, :beam]
            for i in range(n):
                for idx in top_all[i]:
                    if idx % vocab == Vocabulary.EOS and flat_all[i, idx] > NEG / 2:
                        results[i].append(
                            BeamHypothesis(tuple(tokens[i, idx // vocab]), float(flat_all[i, idx]), True)
                        )
            cand[:, :, Vocabulary.EOS] = NEG

        flat = cand.reshape(n, beam * vocab)
        # Stable selection: score descending, ties toward lower (beam, token).
        top = np.argsort(-flat, axis=1, kind="stable")[:, :beam]
        new_scores = np.take_along_axis(flat, top, axis=1)
        src_beam = top // vocab
        tok = top % vocab

        new_tokens = np.empty((n, beam, t + 1), dtype=np.int64)
        for i in range(n):
            new_tokens[i] = np.concatenate(
                [tokens[i, src_beam[i]], tok[i][:, None]], axis=1
            )
        tokens, scores = new_tokens, new_scores
        perm = (np.arange(n)[:, None] * beam + src_beam).reshape(-1)
        session.reorder(perm)
        last = tok.reshape(-1)

        if forced_lengths is not None:
            done = forced == t + 1
            for i in np.nonzero(done)[0]:
                for b in range(beam):
                    if scores[i, b] > NEG / 2:
                        results[i].append(BeamHypothesis(tuple(tokens[i, b]), float(scores[i, b]), True))
        else:
            # Stop once no alive beam can still improve any source's result.
            have = all(len(r) >= beam for r in results)
            if have and all(
                scores[i].max() <= sorted((h.score for h in results[i]), reverse=True)[beam - 1]
                for i in range(n)
            ):
                break

    for i in range(n):
        if not results[i]:
            # Nothing finished within the cap: return best unfinished beams.
            for b in range(beam):
                if scores[i, b] > NEG / 2:
                    results[i].append(BeamHypothesis(tuple(tokens[i, b]), float(scores[i, b]), False))
        results[i].sort(key=lambda h: (-h.score, h.tokens))
        results[i] = results[i][:beam]
    return results


def beam_search(
    model: TransformerModel,
    src: Sentence,
    beam: int,
    forced_length: Optional[int] = None,
    max_len: Optional[int] = None,
) -> list[BeamHypothesis]:
    forced = [forced_length] if forced_length is not None else None
    return beam_search_batch(model, [src], beam, forced_lengths=forced, max_len=max_len)[0]


def greedy_decode_batch(
    model: TransformerModel,
    sources: Sequence[Sentence],
    forced_lengths: Optional[Sequence[int]] = None,
    max_len: Optional[int] = None,
) -> list[Sentence]:
    """Stepwise argmax decoding (stops at EOS unless a length is forced).

    Kept as its own route, independent of beam search, so beam=1 can be
    checked against it.
    """
    cfg = model.config
    n = len(sources)
    cap = max_len or cfg.max_tgt_len
    forced = np.asarray(forced_lengths) if forced_lengths is not None else None
    if forced is not None:
        cap = int(forced.max())
    session = ArDecoderSession(model, sources)
    last = np.full(n, Vocabulary.BOS, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    out: list[list[int]] = [[] for _ in range(n)]
    for t in range(cap):
        logp = session.step(last)
        if forced is not None:
            logp[:, Vocabulary.EOS] = NEG
        nxt = logp.argmax(axis=1)
        for i in range(n):
            if not alive[i]:
                continue
            if forced is None and nxt[i] == Vocabulary.EOS:
                alive[i] = False
                continue
            out[i].append(int(nxt[i]))
            if forced is not None and len(out[i]) >= forced[i]:
                alive[i] = False
        last = np.where(nxt == Vocabulary.EOS, Vocabulary.PAD, nxt)
        if not alive.any():
            break
    return [tuple(o) for o in out]


# -- optimal de-duplicated decoding ----------------------------------------


def constrained_viterbi(unary: np.ndarray, top: Optional[int] = None) -> tuple[Sentence, float]:
    """Highest-scoring sequence with no equal adjacent labels.

    ``top`` restricts each position to its ``top`` best labels; ``None``
    keeps all of them.  Ties resolve to the lexicographically smallest
    optimal sequence.  Returns the sequence and its summed unary score.
    """
    unary = np.asarray(unary, dtype=np.float64)
    if unary.ndim != 2 or unary.shape[0] < 1:
        raise ValueError("unary must be a (T, V) matrix with T >= 1")
    t_len, vocab = unary.shape
    if top is None or top >= vocab:
        labels = [np.arange(vocab)] * t_len
    else:
        labels = []
        for row in unary:
            part = np.argpartition(-row, top - 1)[:top]
            # Sort selected labels by score descending, ties toward lower id.
            part = part[np.lexsort((part, -row[part]))]
            labels.append(np.sort(part))  # ascending label id for lexicographic scans

    # Suffix DP: best completion from position i given the label chosen there.
    suffix = [np.zeros(len(lab)) for lab in labels]
    suffix[-1] = unary[-1, labels[-1]].copy()
    for i in range(t_len - 2, -1, -1):
        nxt_labels, nxt = labels[i + 1], suffix[i + 1]
        here = np.empty(len(labels[i]))
        for j, lab in enumerate(labels[i]):
            allowed = nxt[nxt_labels != lab]
            if allowed.size == 0:
                here[j] = NEG
            else:
                here[j] = unary[i, lab] + allowed.max()
        suffix[i] = here

    seq: list[int] = []
    prev = -1
    for i in range(t_len):
        best = NEG
        pick = -1
        for j, lab in enumerate(labels[i]):
            if lab == prev:
                continue
            if suffix[i][j] > best:
                best = suffix[i][j]
                pick = int(lab)
        seq.append(pick)
        prev = pick
        # Recompute the remaining suffix table relative to the chosen label:
        # nothing to do, suffix already conditions only on the label at i.
    score = float(unary[np.arange(t_len), seq].sum())
    return tuple(seq), score


def odd_decode(unary: np.ndarray) -> Sentence:
    """Optimal no-adjacent-repeat argmax over per-position log-probabilities.

    Restricts each position to its top-3 labels (sufficient for optimality
    when at least 3 labels exist) and runs the constrained DP in O(T).
    """
    unary = np.asarray(unary)
    if unary.ndim != 2 or unary.shape[0] < 1:
        raise ValueError("empty unary matrix")
    top = 3 if unary.shape[1] >= 3 else None
    seq, _ = constrained_viterbi(unary, top=top)
    return seq


def argmax_decode(unary: np.ndarray) -> Sentence:
    return tuple(int(i) for i in np.asarray(unary).argmax(axis=1))


def post_dedup(y: Sentence) -> Sentence:
    """Collapse runs of equal adjacent tokens to a single occurrence."""
    out: list[int] = []
    for tok in y:
        if not out or out[-1] != tok:
            out.append(tok)
    return tuple(out)


# -- concat codec -----------------------------------------------------------


def concat_encode(y: Sentence, concat_id: int = Vocabulary.CONCAT) -> Sentence:
    """Insert the concat symbol between equal adjacent tokens."""
    if concat_id in y:
        raise ValueError("input already contains the concat symbol")
    out: list[int] = []
    for tok in y:
        if out and out[-1] == tok:
            out.append(concat_id)
        out.append(tok)
    return tuple(out)


def concat_decode(y: Sentence, concat_id: int = Vocabulary.CONCAT) -> Sentence:
    return tuple(tok for tok in y if tok != concat_id)


# -- length-parallel decoding and rescoring ---------------------------------


def candidate_lengths(predicted: int, halfwidth: int, max_len: int) -> list[int]:
    lo = max(1, predicted - halfwidth)
    hi = min(max_len, predicted + halfwidth)
    return list(range(lo, hi + 1))


def parallel_length_decode(
    model: TransformerModel,
    src: Sentence,
    halfwidth: int = 4,
    decoder: str = "argmax",
) -> list[tuple[Sentence, float]]:
    """Decode at 2b+1 lengths around the predicted length.

    Producer score = summed chosen unaries plus the length log-probability.
    """
    if halfwidth < 0:
        raise ValueError("halfwidth must be >= 0")
    if decoder not in ("argmax", "odd"):
        raise ValueError(f"unknown decoder kind {decoder!r}")
    predicted = int(predict_lengths(model, [src])[0])
    lengths = candidate_lengths(predicted, halfwidth, model.config.max_tgt_len)
    from narem.model import nar_position_logprobs

    unaries, len_logp = nar_position_logprobs(model, [src] * len(lengths), lengths)
    out = []
    for li, (t_len, unary) in enumerate(zip(lengths, unaries)):
        seq = odd_decode(unary) if decoder == "odd" else argmax_decode(unary)
        score = float(unary[np.arange(t_len), list(seq)].sum()) + float(len_logp[li, t_len - 1])
        out.append((seq, score))
    return out


def rescore(
    candidates: Sequence[tuple[Sentence, float]],
    teacher: TransformerModel,
    src: Sentence,
) -> Sentence:
    """Teacher-likelihood argmax; ties to the shorter then smaller candidate."""
    if not candidates:
        raise ValueError("empty candidate set")
    seqs = [c[0] for c in candidates]
    scores = ar_sequence_logprobs(teacher, [src] * len(seqs), seqs)
    ranked = sorted(zip(scores, seqs), key=lambda p: (-p[0], len(p[1]), p[1]))
    return ranked[0][1]
