"""AR and NAR toy transformers built on the autodiff core.

Attention convention (matches the block definition used throughout):

    attn(context, inputs) = inputs + softmax(logits) @ (context @ wv) @ wo
    logits[j, i] = (inputs_j @ wk) . (context_i @ wq)

i.e. ``wk`` projects the attending (input) side and ``wq`` the attended
(context) side; there is no temperature scaling.  Self-attention passes the
same states on both sides.  Each attention and feed-forward sublayer has a
residual connection followed by layer normalization.

The AR decoder uses a causal self-attention mask and is trained with BOS
prepended and EOS appended.  The NAR decoder's input is PAD embeddings plus
target positional embeddings only, with unmasked self-attention, so output
positions are conditionally independent given the source and the target
length; the length itself is predicted by a linear head over mean-pooled
encoder states.

All forward passes are batched over sentences.  ``ArDecoderSession``
provides an incremental (KV-cached) numpy-only path for generation; it is
cross-checked against the teacher-forced tape path in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from narem.autodiff import Tensor, parameter
from narem.checkpoint import load_checkpoint, save_checkpoint
from narem.corpus import Sentence, Vocabulary

NEG_INF = -1e30

PRESETS = {
    "toy": (3, 3, 256, 1024, 4),
    "small": (5, 5, 256, 1024, 4),
    "base": (6, 6, 512, 2048, 8),
    "large": (6, 6, 1024, 4096, 16),
}


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    enc_layers: int
    dec_layers: int
    d_model: int
    d_ff: int
    n_heads: int
    vocab_size: int
    max_src_len: int
    max_tgt_len: int
    autoregressive: bool
    dropout: float = 0.1
    length_loss_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ShapeError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def preset(
        cls,
        name: str,
        vocab_size: int,
        max_src_len: int,
        max_tgt_len: int,
        autoregressive: bool,
        **overrides,
    ) -> "ModelConfig":
        enc, dec, d, dff, heads = PRESETS[name]
        return cls(enc, dec, d, dff, heads, vocab_size, max_src_len, max_tgt_len, autoregressive, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _init_params(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict[str, Tensor] = {}

    def mat(name: str, rows: int, cols: int, std: float = 0.02) -> None:
        params[name] = parameter(rng.normal(0.0, std, size=(rows, cols)), name)

    def norm(prefix: str) -> None:
        params[f"{prefix}.ln_g"] = parameter(np.ones((1, config.d_model)), f"{prefix}.ln_g")
        params[f"{prefix}.ln_b"] = parameter(np.zeros((1, config.d_model)), f"{prefix}.ln_b")

    def attn(prefix: str) -> None:
        d, hk = config.d_model, config.n_heads * config.head_dim
        for w in ("wq", "wk", "wv"):
            mat(f"{prefix}.{w}", d, hk)
        mat(f"{prefix}.wo", hk, d)
        norm(prefix)

    def ff(prefix: str) -> None:
        mat(f"{prefix}.w1", config.d_model, config.d_ff)
        mat(f"{prefix}.w2", config.d_ff, config.d_model)
        norm(prefix)

    mat("embed.tok", config.vocab_size, config.d_model)
    mat("embed.pos_src", config.max_src_len, config.d_model)
    mat("embed.pos_tgt", config.max_tgt_len + 1, config.d_model)
    for i in range(config.enc_layers):
        attn(f"enc.{i}.attn")
        ff(f"enc.{i}.ff")
    for i in range(config.dec_layers):
        attn(f"dec.{i}.self")
        attn(f"dec.{i}.cross")
        ff(f"dec.{i}.ff")
    if not config.autoregressive:
        mat("len_head.w", config.d_model, config.max_tgt_len)
    return params


def multi_head_attention(
    context: Tensor,
    inputs: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    n_heads: int,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Residual multi-head attention; ``mask`` is additive over (input, context) logits."""
    if context.shape[-1] != wq.shape[0] or inputs.shape[-1] != wk.shape[0]:
        raise ShapeError(f"attention operands mismatch: context {context.shape}, inputs {inputs.shape}")
    b, t_in, _ = inputs.shape
    t_ctx = context.shape[1]
    k = wq.shape[1] // n_heads

    def split(x: Tensor, t: int) -> Tensor:
        return x.reshape(b, t, n_heads, k).moveaxis(2, 1)  # (B, h, T, k)

    q_ctx = split(context.matmul(wq), t_ctx)
    k_inp = split(inputs.matmul(wk), t_in)
    v_ctx = split(context.matmul(wv), t_ctx)
    logits = k_inp.matmul(q_ctx.transpose_last())  # (B, h, T_in, T_ctx)
    if mask is not None:
        logits = logits.add_const(mask)
    weights = logits.softmax()
    mixed = weights.matmul(v_ctx)  # (B, h, T_in, k)
    out = mixed.moveaxis(1, 2).reshape(b, t_in, n_heads * k).matmul(wo)
    return inputs + out


def feed_forward(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Residual position-wise feed-forward: x + relu(x @ w1) @ w2."""
    return x + x.matmul(w1).relu().matmul(w2)


def causal_mask(t: int) -> np.ndarray:
    """Additive (t, t) mask blocking attention to later positions."""
    return np.triu(np.full((t, t), NEG_INF), k=1)


def padding_mask(valid: np.ndarray) -> np.ndarray:
    """(B, T) 0/1 validity -> additive (B, 1, 1, T) key mask."""
    return np.where(valid[:, None, None, :] > 0, 0.0, NEG_INF)


class TransformerModel:
    """One AR or NAR transformer: parameters plus forward/scoring passes."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "TransformerModel":
        return cls(config, _init_params(config, seed))

    def parameters(self) -> list[Tensor]:
        return [self.params[name] for name in sorted(self.params)]

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.config.to_dict(), {n: t.data for n, t in self.params.items()})

    @classmethod
    def load(cls, path: str | Path) -> "TransformerModel":
        blob, arrays = load_checkpoint(path)
        config = ModelConfig.from_dict(blob)
        params = {name: parameter(arr, name) for name, arr in arrays.items()}
        return cls(config, params)

    def copy(self) -> "TransformerModel":
        return TransformerModel(
            self.config, {n: parameter(t.data.copy(), n) for n, t in self.params.items()}
        )

    # -- dropout ------------------------------------------------------------

    def _drop(self, x: Tensor, train: bool, rng: Optional[np.random.Generator]) -> Tensor:
        p = self.config.dropout
        if not train or p <= 0.0 or rng is None:
            return x
        keep = (rng.random(x.shape) >= p) / (1.0 - p)
        return x.mul_const(keep)

    def _attn_block(self, prefix, context, inputs, mask, train, rng) -> Tensor:
        pre = multi_head_attention(
            context,
            inputs,
            self.p(f"{prefix}.wq"),
            self.p(f"{prefix}.wk"),
            self.p(f"{prefix}.wv"),
            self.p(f"{prefix}.wo"),
            self.config.n_heads,
            mask,
        )
        return self._drop(pre, train, rng).layer_norm(self.p(f"{prefix}.ln_g"), self.p(f"{prefix}.ln_b"))

    def _ff_block(self, prefix, x, train, rng) -> Tensor:
        pre = feed_forward(x, self.p(f"{prefix}.w1"), self.p(f"{prefix}.w2"))
        return self._drop(pre, train, rng).layer_norm(self.p(f"{prefix}.ln_g"), self.p(f"{prefix}.ln_b"))

    # -- encoder ------------------------------------------------------------

    def encode_batch(
        self,
        src_ids: np.ndarray,
        src_valid: np.ndarray,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        b, ts = src_ids.shape
        if ts > self.config.max_src_len:
            raise ShapeError(f"source length {ts} exceeds maximum {self.config.max_src_len}")
        emb = self.p("embed.tok").take_rows(src_ids)
        pos = self.p("embed.pos_src").take_rows(np.arange(ts))
        x = emb + pos
        mask = padding_mask(src_valid)
        for i in range(self.config.enc_layers):
            x = self._attn_block(f"enc.{i}.attn", x, x, mask, train, rng)
            x = self._ff_block(f"enc.{i}.ff", x, train, rng)
        return x

    # -- AR decoder ---------------------------------------------------------

    def ar_logits(
        self,
        dec_in_ids: np.ndarray,
        enc: Tensor,
        src_valid: np.ndarray,
        dec_valid: Optional[np.ndarray] = None,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        """Teacher-forced logits for every decoder position (causally masked)."""
        b, tt = dec_in_ids.shape
        if tt > self.config.max_tgt_len + 1:
            raise ShapeError(f"prefix length {tt} exceeds maximum {self.config.max_tgt_len + 1}")
        emb = self.p("embed.tok").take_rows(dec_in_ids)
        pos = self.p("embed.pos_tgt").take_rows(np.arange(tt))
        x = emb + pos
        self_mask = causal_mask(tt)[None, None]
        if dec_valid is not None:
            self_mask = self_mask + padding_mask(dec_valid)
        cross_mask = padding_mask(src_valid)
        for i in range(self.config.dec_layers):
            x = self._attn_block(f"dec.{i}.self", x, x, self_mask, train, rng)
            x = self._attn_block(f"dec.{i}.cross", enc, x, cross_mask, train, rng)
            x = self._ff_block(f"dec.{i}.ff", x, train, rng)
        return x.matmul(self.p("embed.tok").transpose_last())

    # -- NAR decoder --------------------------------------------------------

    def nar_logits(
        self,
        batch: int,
        t_max: int,
        tgt_valid: np.ndarray,
        enc: Tensor,
        src_valid: np.ndarray,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        """Per-position logits given target lengths encoded in ``tgt_valid``."""
        if not 1 <= t_max <= self.config.max_tgt_len:
            raise ShapeError(f"target length {t_max} outside 1..{self.config.max_tgt_len}")
        pad_rows = np.full((batch, t_max), Vocabulary.PAD)
        emb = self.p("embed.tok").take_rows(pad_rows)
        pos = self.p("embed.pos_tgt").take_rows(np.arange(t_max))
        x = emb + pos
        self_mask = padding_mask(tgt_valid)
        cross_mask = padding_mask(src_valid)
        for i in range(self.config.dec_layers):
            x = self._attn_block(f"dec.{i}.self", x, x, self_mask, train, rng)
            x = self._attn_block(f"dec.{i}.cross", enc, x, cross_mask, train, rng)
            x = self._ff_block(f"dec.{i}.ff", x, train, rng)
        return x.matmul(self.p("embed.tok").transpose_last())

    def length_logits(self, enc: Tensor, src_valid: np.ndarray) -> Tensor:
        counts = src_valid.sum(axis=1, keepdims=True)
        pooled = enc.mul_const(src_valid[:, :, None]).sum(axis=1).mul_const(1.0 / counts)
        return pooled.matmul(self.p("len_head.w"))


# -- batching helpers -------------------------------------------------------


def pad_batch(sentences: Sequence[Sentence], pad_id: int = Vocabulary.PAD) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length id tuples into (ids, validity) arrays."""
    t = max(len(s) for s in sentences)
    ids = np.full((len(sentences), t), pad_id, dtype=np.int64)
    valid = np.zeros((len(sentences), t), dtype=np.float64)
    for i, s in enumerate(sentences):
        ids[i, : len(s)] = s
        valid[i, : len(s)] = 1.0
    return ids, valid


def ar_teacher_inputs(targets: Sequence[Sentence]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(decoder input, prediction target, validity) with BOS prepended, EOS appended."""
    rows_in = [(Vocabulary.BOS,) + t for t in targets]
    rows_out = [t + (Vocabulary.EOS,) for t in targets]
    dec_in, valid = pad_batch(rows_in)
    dec_out, _ = pad_batch(rows_out)
    return dec_in, dec_out, valid


# -- scoring ---------------------------------------------------------------


def ar_sequence_logprobs(
    model: TransformerModel, sources: Sequence[Sentence], targets: Sequence[Sentence]
) -> np.ndarray:
    """log p(y|x) per pair under the causal factorization, EOS term included."""
    src_ids, src_valid = pad_batch(sources)
    dec_in, dec_out, dec_valid = ar_teacher_inputs(targets)
    enc = model.encode_batch(src_ids, src_valid)
    logits = model.ar_logits(dec_in, enc, src_valid, dec_valid)
    logp = logits.log_softmax().data
    tok = np.take_along_axis(logp, dec_out[..., None], axis=-1)[..., 0]
    return (tok * dec_valid).sum(axis=1)


def nar_position_logprobs(
    model: TransformerModel, sources: Sequence[Sentence], lengths: Sequence[int]
) -> tuple[list[np.ndarray], np.ndarray]:
    """Per-position log-distributions at the given lengths, plus length log-probs.

    Returns one (T'_i, V) matrix per sentence and the (B, L_max) length
    log-distribution.
    """
    src_ids, src_valid = pad_batch(sources)
    lengths = np.asarray(lengths)
    t_max = int(lengths.max())
    tgt_valid = (np.arange(t_max)[None, :] < lengths[:, None]).astype(np.float64)
    enc = model.encode_batch(src_ids, src_valid)
    logits = model.nar_logits(len(sources), t_max, tgt_valid, enc, src_valid)
    logp = logits.log_softmax().data
    len_logp = model.length_logits(enc, src_valid).log_softmax().data
    return [logp[i, : lengths[i]] for i in range(len(sources))], len_logp


def nar_sequence_logprobs(
    model: TransformerModel,
    sources: Sequence[Sentence],
    targets: Sequence[Sentence],
    include_length: bool = True,
) -> np.ndarray:
    """log p(y|x) per pair under the factorized model: length term + unary sums."""
    lengths = [len(t) for t in targets]
    unaries, len_logp = nar_position_logprobs(model, sources, lengths)
    out = np.empty(len(sources))
    for i, (tgt, unary) in enumerate(zip(targets, unaries)):
        total = float(unary[np.arange(len(tgt)), list(tgt)].sum())
        if include_length:
            total += float(len_logp[i, len(tgt) - 1])
        out[i] = total
    return out


def predict_lengths(model: TransformerModel, sources: Sequence[Sentence]) -> np.ndarray:
    """argmax of the length classifier, as lengths in 1..L_max."""
    src_ids, src_valid = pad_batch(sources)
    enc = model.encode_batch(src_ids, src_valid)
    len_logp = model.length_logits(enc, src_valid).log_softmax().data
    return len_logp.argmax(axis=1) + 1


def decode_nar_unaries(
    model: TransformerModel, sources: Sequence[Sentence], lengths: Sequence[int]
) -> list[np.ndarray]:
    """The (T', V) log-probability matrices driving NAR decoding."""
    unaries, _ = nar_position_logprobs(model, sources, lengths)
    return unaries


# -- incremental AR decoding (numpy only, no tape) --------------------------


class ArDecoderSession:
    """KV-cached stepwise AR decoding for a fixed batch of encoded sources.

    Rows may be sentence*beam flattenings; ``reorder`` permutes the cache
    when beam hypotheses are reshuffled.
    """

    def __init__(self, model: TransformerModel, sources: Sequence[Sentence], rows_per_source: int = 1):
        self.model = model
        cfg = model.config
        src_ids, src_valid = pad_batch(sources)
        enc = model.encode_batch(src_ids, src_valid).data
        reps = rows_per_source
        enc = np.repeat(enc, reps, axis=0)
        src_valid = np.repeat(src_valid, reps, axis=0)
        self.rows = enc.shape[0]
        h, k = cfg.n_heads, cfg.head_dim

        def split(x):  # (R, T, h*k) -> (R, h, T, k)
            return x.reshape(x.shape[0], x.shape[1], h, k).transpose(0, 2, 1, 3)

        self.cross_q: list[np.ndarray] = []
        self.cross_v: list[np.ndarray] = []
        for i in range(cfg.dec_layers):
            self.cross_q.append(split(enc @ model.p(f"dec.{i}.cross.wq").data))
            self.cross_v.append(split(enc @ model.p(f"dec.{i}.cross.wv").data))
        self.cross_mask = np.where(src_valid[:, None, None, :] > 0, 0.0, NEG_INF)
        self.self_q: list[np.ndarray] = [
            np.zeros((self.rows, h, 0, k)) for _ in range(cfg.dec_layers)
        ]
        self.self_v: list[np.ndarray] = [
            np.zeros((self.rows, h, 0, k)) for _ in range(cfg.dec_layers)
        ]
        self.t = 0

    def _ln(self, prefix: str, x: np.ndarray) -> np.ndarray:
        g = self.model.p(f"{prefix}.ln_g").data
        b = self.model.p(f"{prefix}.ln_b").data
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / np.sqrt(var + 1e-6) * g + b

    def step(self, tokens: np.ndarray) -> np.ndarray:
        """Feed one token per row at the current position; next-token log-probs."""
        cfg = self.model.config
        if self.t > cfg.max_tgt_len:
            raise ShapeError(f"prefix length {self.t + 1} exceeds maximum {cfg.max_tgt_len + 1}")
        h, k = cfg.n_heads, cfg.head_dim
        emb = self.model.p("embed.tok").data[tokens] + self.model.p("embed.pos_tgt").data[self.t]
        x = emb[:, None, :]  # (R, 1, d)
        for i in range(cfg.dec_layers):
            pre = f"dec.{i}.self"
            q_new = (x @ self.model.p(f"{pre}.wq").data).reshape(self.rows, 1, h, k).transpose(0, 2, 1, 3)
            v_new = (x @ self.model.p(f"{pre}.wv").data).reshape(self.rows, 1, h, k).transpose(0, 2, 1, 3)
            self.self_q[i] = np.concatenate([self.self_q[i], q_new], axis=2)
            self.self_v[i] = np.concatenate([self.self_v[i], v_new], axis=2)
            attending = (x @ self.model.p(f"{pre}.wk").data).reshape(self.rows, 1, h, k).transpose(0, 2, 1, 3)
            logits = attending @ np.swapaxes(self.self_q[i], -1, -2)  # (R, h, 1, t+1)
            weights = _softmax_np(logits)
            mixed = weights @ self.self_v[i]
            out = mixed.transpose(0, 2, 1, 3).reshape(self.rows, 1, h * k) @ self.model.p(f"{pre}.wo").data
            x = self._ln(pre, x + out)

            pre = f"dec.{i}.cross"
            attending = (x @ self.model.p(f"{pre}.wk").data).reshape(self.rows, 1, h, k).transpose(0, 2, 1, 3)
            logits = attending @ np.swapaxes(self.cross_q[i], -1, -2) + self.cross_mask
            weights = _softmax_np(logits)
            mixed = weights @ self.cross_v[i]
            out = mixed.transpose(0, 2, 1, 3).reshape(self.rows, 1, h * k) @ self.model.p(f"{pre}.wo").data
            x = self._ln(pre, x + out)

            pre = f"dec.{i}.ff"
            hid = np.maximum(x @ self.model.p(f"{pre}.w1").data, 0.0)
            x = self._ln(pre, x + hid @ self.model.p(f"{pre}.w2").data)

        logits = (x[:, 0, :] @ self.model.p("embed.tok").data.T)
        self.t += 1
        return _log_softmax_np(logits)

    def reorder(self, perm: np.ndarray) -> None:
        for i in range(len(self.self_q)):
            self.self_q[i] = self.self_q[i][perm]
            self.self_v[i] = self.self_v[i][perm]


def _softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
