"""Joint EM optimization of the causal posterior model and the parallel model.

One iteration alternates:

* M-step: distill the current AR model's beam-search outputs into a
  deterministic corpus and train a fresh NAR model on it.
* E-step: generate AR candidates per source (small beam), drop those whose
  frozen-teacher quality falls below the per-sentence bound (when active),
  select by ``p_ar * log(p_nar / p_ar)``, and train a fresh AR model on the
  resulting pseudo dataset.

Quality is always scored under the iteration-1 teacher and never
recomputed under later AR models.  Bounds start inactive; on the first
validation drop they are set from the previous iteration's accepted
targets and the iteration is restarted from the previous checkpoints.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from narem.corpus import ParallelCorpus, Sentence, load_corpus, save_corpus
from narem.decoding import beam_search_batch, greedy_decode_batch
from narem.model import ModelConfig, TransformerModel, ar_sequence_logprobs, nar_sequence_logprobs
from narem.training import TrainConfig, exact_match, ncm, train_ar, train_nar

log = logging.getLogger(__name__)


@dataclass
class BoundVector:
    """Per-sentence minimum teacher log-likelihood; inactive entries filter nothing."""

    values: np.ndarray
    active: np.ndarray

    @classmethod
    def inactive(cls, n: int) -> "BoundVector":
        return cls(np.zeros(n), np.zeros(n, dtype=bool))

    @classmethod
    def from_qualities(cls, qualities: np.ndarray) -> "BoundVector":
        return cls(np.asarray(qualities, dtype=np.float64), np.ones(len(qualities), dtype=bool))


@dataclass
class PseudoDataset:
    """E-step training pairs with their selection and quality scores."""

    corpus: ParallelCorpus
    selection_scores: np.ndarray
    qualities: np.ndarray

    def __post_init__(self) -> None:
        assert len(self.corpus) == len(self.selection_scores) == len(self.qualities)


@dataclass
class EmState:
    iteration: int = 0
    ncm_history: list[float] = field(default_factory=list)
    validation_history: list[float] = field(default_factory=list)
    bounds_from_iteration: Optional[int] = None
    restarted: bool = False
    converged: bool = False
    best_iteration: int = 0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EmState":
        return cls(**json.loads(text))


@dataclass
class EmConfig:
    max_iters: int = 4
    min_iters: int = 1
    m_beam: int = 20
    e_beam: int = 5
    convergence_points: float = 0.1  # validation exact-match, absolute % points
    amortized: bool = True
    seed: int = 0
    chunk: int = 256


def derived_seed(seed: int, role: str, t: int) -> int:
    offsets = {"teacher": 11, "nar": 23, "ar": 37}
    return seed + 1000 * t + offsets[role]


def quality_scores(
    teacher: TransformerModel,
    sources: Sequence[Sentence],
    targets: Sequence[Sentence],
    chunk: int = 256,
) -> np.ndarray:
    """Frozen-teacher log-likelihood per pair."""
    out = np.empty(len(sources))
    for lo in range(0, len(sources), chunk):
        hi = min(lo + chunk, len(sources))
        out[lo:hi] = ar_sequence_logprobs(teacher, sources[lo:hi], targets[lo:hi])
    return out


def distill_targets(
    ar_model: TransformerModel,
    sources: Sequence[Sentence],
    beam: int,
    chunk: int = 256,
) -> list[Sentence]:
    """Top-1 beam output per source; greedy fallback for unfinished beams."""
    out: list[Sentence] = []
    for lo in range(0, len(sources), chunk):
        batch = sources[lo : lo + chunk]
        hyps = beam_search_batch(ar_model, batch, beam=beam)
        fallback_idx = [i for i, h in enumerate(hyps) if not h or not h[0].finished or not h[0].tokens]
        fallbacks: dict[int, Sentence] = {}
        if fallback_idx:
            log.warning("beam search did not finish for %d sentences; falling back to greedy", len(fallback_idx))
            greedy = greedy_decode_batch(ar_model, [batch[i] for i in fallback_idx])
            fallbacks = dict(zip(fallback_idx, greedy))
        for i, h in enumerate(hyps):
            tokens = fallbacks.get(i, h[0].tokens if h else ())
            if not tokens:  # degenerate model emitting EOS immediately
                tokens = h[0].tokens if h and h[0].tokens else batch[i][:1]
            out.append(tokens)
    return out


def m_step(
    ar_model: TransformerModel,
    corpus: ParallelCorpus,
    nar_train: TrainConfig,
    nar_config: ModelConfig,
    beam: int = 20,
    chunk: int = 256,
) -> tuple[ParallelCorpus, TransformerModel]:
    """Sequence-level distillation followed by fresh NAR training."""
    distilled = corpus.with_targets(
        distill_targets(ar_model, corpus.sources, beam, chunk), name=f"{corpus.name}-distilled"
    )
    nar_model, _ = train_nar(distilled, nar_train, nar_config)
    return distilled, nar_model


def build_pseudo_dataset(
    nar_model: TransformerModel,
    ar_model: TransformerModel,
    teacher: TransformerModel,
    corpus: ParallelCorpus,
    prev_targets: Sequence[Sentence],
    bounds: BoundVector,
    beam: int = 5,
    chunk: int = 256,
) -> PseudoDataset:
    """Candidate generation, bound filtering, and posterior-guided selection."""
    sources = corpus.sources
    chosen: list[Sentence] = []
    sel_scores = np.zeros(len(sources))
    quals = np.zeros(len(sources))
    for lo in range(0, len(sources), chunk):
        batch = sources[lo : lo + chunk]
        all_hyps = beam_search_batch(ar_model, batch, beam=beam)
        flat_srcs: list[Sentence] = []
        flat_tgts: list[Sentence] = []
        offsets: list[tuple[int, int]] = []
        for i, hyps in enumerate(all_hyps):
            hyps = [h for h in hyps if h.tokens]
            start = len(flat_tgts)
            flat_srcs.extend([batch[i]] * len(hyps))
            flat_tgts.extend(h.tokens for h in hyps)
            offsets.append((start, len(flat_tgts)))
        if flat_tgts:
            q = quality_scores(teacher, flat_srcs, flat_tgts, chunk=len(flat_tgts))
            ar_lp = ar_sequence_logprobs(ar_model, flat_srcs, flat_tgts)
            nar_lp = nar_sequence_logprobs(nar_model, flat_srcs, flat_tgts)
        for i, (start, end) in enumerate(offsets):
            gi = lo + i
            best: Optional[tuple[float, Sentence, float, float]] = None
            for j in range(start, end):
                if bounds.active[gi] and q[j] < bounds.values[gi]:
                    continue
                p_ar = np.exp(ar_lp[j])
                score = float(p_ar * (nar_lp[j] - ar_lp[j]))
                if best is None or score > best[0]:
                    best = (score, flat_tgts[j], float(q[j]), float(ar_lp[j]))
            if best is None:
                prev = tuple(prev_targets[gi])
                prev_q = float(quality_scores(teacher, [sources[gi]], [prev], chunk=1)[0])
                log.info("no candidate met the bound for sentence %d; keeping previous target", gi)
                chosen.append(prev)
                sel_scores[gi] = float("nan")
                quals[gi] = prev_q
            else:
                chosen.append(best[1])
                sel_scores[gi] = best[0]
                quals[gi] = best[2]
    pseudo = corpus.with_targets(chosen, name=f"{corpus.name}-pseudo")
    # Constructed pairs with an active bound must satisfy it (fallbacks kept aside).
    ok = ~bounds.active | np.isnan(sel_scores) | (quals >= bounds.values - 1e-9)
    assert ok.all(), "pseudo dataset violates an active quality bound"
    return PseudoDataset(pseudo, sel_scores, quals)


def e_step(
    nar_model: TransformerModel,
    ar_model: TransformerModel,
    teacher: TransformerModel,
    corpus: ParallelCorpus,
    prev_targets: Sequence[Sentence],
    bounds: BoundVector,
    ar_train: TrainConfig,
    ar_config: ModelConfig,
    beam: int = 5,
    chunk: int = 256,
) -> tuple[PseudoDataset, TransformerModel]:
    """Pseudo-dataset construction plus one fresh AR training pass (single inner update)."""
    pseudo = build_pseudo_dataset(
        nar_model, ar_model, teacher, corpus, prev_targets, bounds, beam, chunk
    )
    next_ar, _ = train_ar(pseudo.corpus, ar_train, ar_config)
    return pseudo, next_ar


def _save_pseudo_tsv(pseudo: PseudoDataset, path: Path) -> None:
    vocab = pseudo.corpus.vocab
    with open(path, "w", encoding="utf-8") as fh:
        for (src, tgt), s, q in zip(pseudo.corpus.pairs, pseudo.selection_scores, pseudo.qualities):
            fh.write(f"{vocab.decode(src)}\t{vocab.decode(tgt)}\t{q:.6f}\t{s:.6g}\n")


@dataclass
class EmRun:
    state: EmState
    nar_model: TransformerModel
    ar_model: TransformerModel
    teacher: TransformerModel
    best_nar: TransformerModel
    distilled: ParallelCorpus


def em_run(
    train_corpus: ParallelCorpus,
    val_corpus: ParallelCorpus,
    ar_config: ModelConfig,
    nar_config: ModelConfig,
    ar_train: TrainConfig,
    nar_train: TrainConfig,
    em_config: EmConfig,
    run_dir: Optional[str | Path] = None,
) -> EmRun:
    """Algorithm: pre-train the teacher, then alternate M- and E-steps.

    After each M-step the validation exact match of the NAR model and the
    NCM on the current training targets are recorded.  The first validation
    drop activates the per-sentence bounds (from the previous iteration's
    accepted targets) and restarts from the previous checkpoints.
    Convergence: validation change below the threshold after ``min_iters``.
    """
    out_dir = Path(run_dir) if run_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    teacher, _ = train_ar(
        train_corpus, _with_seed(ar_train, derived_seed(em_config.seed, "teacher", 0)), ar_config
    )
    state = EmState()
    ar_model = teacher
    nar_model: Optional[TransformerModel] = None
    best_nar: Optional[TransformerModel] = None
    best_val = -1.0
    prev_targets: list[Sentence] = list(train_corpus.targets)
    prev_snapshot: Optional[tuple[TransformerModel, TransformerModel, list[Sentence]]] = None
    bounds = BoundVector.inactive(len(train_corpus))
    distilled = train_corpus
    pseudo: Optional[PseudoDataset] = None

    t = 0
    while t < em_config.max_iters:
        t += 1
        # M-step: distillation (or direct pseudo-data training when not amortized).
        if not em_config.amortized and pseudo is not None:
            distilled = pseudo.corpus
            nar_model, _ = train_nar(
                distilled, _with_seed(nar_train, derived_seed(em_config.seed, "nar", t)), nar_config
            )
        else:
            distilled, nar_model = m_step(
                ar_model,
                train_corpus,
                _with_seed(nar_train, derived_seed(em_config.seed, "nar", t)),
                nar_config,
                beam=em_config.m_beam,
                chunk=em_config.chunk,
            )
        val = exact_match(nar_model, val_corpus, use_ground_truth_length=True).exact_match * 100.0
        iter_ncm = ncm(nar_model, distilled)
        log.info("iteration %d: validation %.2f%%, ncm %.4f", t, val, iter_ncm)

        dropped = state.validation_history and val < state.validation_history[-1]
        if dropped and state.bounds_from_iteration is None and prev_snapshot is not None:
            # Early stopping: bound by the previous iteration's accepted targets
            # and redo this iteration from the previous checkpoints.
            log.info("validation drop at iteration %d: activating bounds from iteration %d", t, t - 1)
            ar_model, nar_model, prev_targets = prev_snapshot
            bounds = BoundVector.from_qualities(
                quality_scores(teacher, train_corpus.sources, prev_targets, em_config.chunk)
            )
            state.bounds_from_iteration = t - 1
            state.restarted = True
            t -= 1
            continue

        state.iteration = t
        state.validation_history.append(val)
        state.ncm_history.append(iter_ncm)
        if val > best_val:
            best_val = val
            best_nar = nar_model.copy()
            state.best_iteration = t

        if out_dir is not None:
            it_dir = out_dir / f"iter_{t}"
            it_dir.mkdir(exist_ok=True)
            ar_model.save(it_dir / "ar.ckpt")
            nar_model.save(it_dir / "nar.ckpt")
            save_corpus(distilled, it_dir / "distilled.tsv")
            (out_dir / "state.json").write_text(state.to_json())

        if (
            t >= em_config.min_iters
            and len(state.validation_history) >= 2
            and abs(state.validation_history[-1] - state.validation_history[-2]) < em_config.convergence_points
        ):
            state.converged = True
            break
        if t >= em_config.max_iters:
            break

        # E-step: pseudo dataset from the current models, fresh AR training.
        prev_snapshot = (ar_model, nar_model, list(prev_targets))
        pseudo, ar_model = e_step(
            nar_model,
            ar_model,
            teacher,
            train_corpus,
            prev_targets,
            bounds,
            _with_seed(ar_train, derived_seed(em_config.seed, "ar", t)),
            ar_config,
            beam=em_config.e_beam,
            chunk=em_config.chunk,
        )
        prev_targets = list(pseudo.corpus.targets)
        if out_dir is not None:
            _save_pseudo_tsv(pseudo, out_dir / f"iter_{t}" / "pseudo.tsv")

    assert nar_model is not None and best_nar is not None
    if out_dir is not None:
        (out_dir / "state.json").write_text(state.to_json())
    return EmRun(state, nar_model, ar_model, teacher, best_nar, distilled)


def _with_seed(config: TrainConfig, seed: int) -> TrainConfig:
    return TrainConfig(**{**config.to_dict(), "seed": seed})
