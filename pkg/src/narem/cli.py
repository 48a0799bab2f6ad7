"""Command-line entry point.

Subcommands: ``gen-data``, ``train``, ``eval``, ``decode``, ``em``.  Each
accepts ``--config file.json`` whose keys mirror the long flags (dashes as
underscores); explicit flags override config values, and unknown config
keys are rejected.  ``NAREM_SEED`` is used when no seed is given anywhere.

Exit codes: 0 ok, 1 error, 2 assertion failure (``eval --assert-*``).
Heavy imports happen inside the subcommands so ``--threads`` can cap the
BLAS pool before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

log = logging.getLogger("narem")


class UsageError(ValueError):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="narem", description=__doc__.split("\n")[0])
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic parallel corpus")
    p.add_argument("--config", default=None, help="JSON config file (flags override)")
    p.add_argument("--exp", type=int, default=None, help="experiment kind: 1 or 2")
    p.add_argument("--n", type=int, default=None, help="training pairs")
    p.add_argument("--valid-n", type=int, default=None, help="validation pairs (default 1000)")
    p.add_argument("--test-n", type=int, default=None, help="test pairs (default 1000)")
    p.add_argument("--len", dest="src_len", type=int, default=None, help="source length")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("train", help="train one AR or NAR model")
    p.add_argument("--config", default=None)
    p.add_argument("--arch", choices=("ar", "nar"), default=None)
    p.add_argument("--train", dest="train_path", default=None)
    p.add_argument("--vocab", default=None, help="vocabulary file (default: <train dir>/vocab.txt)")
    p.add_argument("--out", default=None, help="run directory")
    p.add_argument("--preset", default=None, help="toy/small/base/large or 'custom'")
    p.add_argument("--enc-layers", type=int, default=None)
    p.add_argument("--dec-layers", type=int, default=None)
    p.add_argument("--d-model", type=int, default=None)
    p.add_argument("--d-ff", type=int, default=None)
    p.add_argument("--n-heads", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--label-smoothing", type=float, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--peak-lr", type=float, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--max-tgt-len", type=int, default=None, help="default: longest training target")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("--config", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--vocab", default=None)
    p.add_argument("--use-gt-length", action="store_true", default=None)
    p.add_argument("--decoder", choices=("argmax", "odd"), default=None)
    p.add_argument("--concat-aware", action="store_true", default=None)
    p.add_argument("--with-bleu", action="store_true", default=None)
    p.add_argument("--with-ncm", action="store_true", default=None)
    p.add_argument("--assert-exact-min", type=float, default=None, help="exit 2 below this exact match")

    p = sub.add_parser("decode", help="decode source sentences to a file")
    p.add_argument("--config", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--vocab", default=None)
    p.add_argument("--input", default=None, help="one source sentence per line")
    p.add_argument("--output", default=None)
    p.add_argument("--decoder", choices=("greedy", "beam", "argmax", "odd", "parallel"), default=None)
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--halfwidth", type=int, default=None)
    p.add_argument("--teacher", default=None, help="AR checkpoint for rescoring")
    p.add_argument("--dump-candidates", default=None, help="write per-sentence candidate JSON here")

    p = sub.add_parser("em", help="run the joint EM optimization")
    p.add_argument("--config", default=None)
    p.add_argument("--train", dest="train_path", default=None)
    p.add_argument("--valid", dest="valid_path", default=None)
    p.add_argument("--vocab", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--preset", default=None)
    p.add_argument("--enc-layers", type=int, default=None)
    p.add_argument("--dec-layers", type=int, default=None)
    p.add_argument("--d-model", type=int, default=None)
    p.add_argument("--d-ff", type=int, default=None)
    p.add_argument("--n-heads", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--peak-lr", type=float, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--max-iters", type=int, default=None)
    p.add_argument("--min-iters", type=int, default=None)
    p.add_argument("--m-beam", type=int, default=None)
    p.add_argument("--e-beam", type=int, default=None)
    p.add_argument("--non-amortized", action="store_true", default=None)
    p.add_argument("--seed", type=int, default=None)
    return parser


DEFAULTS: dict[str, dict] = {
    "gen-data": dict(exp=1, n=1000, valid_n=1000, test_n=1000, src_len=30, seed=0, out="data"),
    "train": dict(
        arch="ar",
        vocab=None,
        out="run",
        preset="toy",
        enc_layers=3,
        dec_layers=3,
        d_model=256,
        d_ff=1024,
        n_heads=4,
        steps=2000,
        batch_size=64,
        label_smoothing=0.1,
        dropout=0.1,
        peak_lr=3e-3,
        warmup=200,
        max_tgt_len=None,
        seed=0,
    ),
    "eval": dict(
        vocab=None,
        use_gt_length=False,
        decoder="argmax",
        concat_aware=False,
        with_bleu=False,
        with_ncm=False,
        assert_exact_min=None,
    ),
    "decode": dict(vocab=None, decoder="greedy", beam=5, halfwidth=4, teacher=None, dump_candidates=None),
    "em": dict(
        vocab=None,
        out="em_run",
        preset="toy",
        enc_layers=3,
        dec_layers=3,
        d_model=256,
        d_ff=1024,
        n_heads=4,
        steps=2000,
        batch_size=64,
        dropout=0.1,
        peak_lr=3e-3,
        warmup=200,
        max_iters=4,
        min_iters=1,
        m_beam=20,
        e_beam=5,
        non_amortized=False,
        seed=0,
    ),
}


def resolve_options(args: argparse.Namespace) -> dict:
    """Three-way merge: flags > config file > built-in defaults."""
    opts = dict(DEFAULTS.get(args.command, {}))
    known = set(vars(args)) | set(opts)
    config_path = getattr(args, "config", None)
    if config_path:
        loaded = json.loads(Path(config_path).read_text())
        unknown = [k for k in loaded if k not in known]
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {', '.join(sorted(unknown))}")
        opts.update(loaded)
    for key, value in vars(args).items():
        if key in ("command", "config", "threads"):
            continue
        if value is not None:
            opts[key] = value
    if opts.get("seed") is None and "seed" in opts:
        opts["seed"] = int(os.environ.get("NAREM_SEED", "0"))
    for key, value in opts.items():
        if value is None and key not in (
            "max_tgt_len",
            "vocab",
            "teacher",
            "dump_candidates",
            "assert_exact_min",
        ):
            raise UsageError(f"missing required option --{key.replace('_', '-')}")
    return opts


def _jsonl_logger(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    fh = open(run_dir / "log.jsonl", "a", encoding="utf-8")

    def emit(event: str, **fields) -> None:
        fh.write(json.dumps({"ts": time.time(), "event": event, **fields}) + "\n")
        fh.flush()

    return emit


def _load_vocab(opts: dict, data_path: str):
    from narem.corpus import Vocabulary

    path = opts.get("vocab") or str(Path(data_path).parent / "vocab.txt")
    return Vocabulary.load(path)


def cmd_gen_data(opts: dict) -> int:
    from narem.corpus import gen_exp1, gen_exp2, save_corpus, Vocabulary

    if opts["exp"] not in (1, 2):
        raise UsageError(f"--exp must be 1 or 2, got {opts['exp']}")
    gen = gen_exp1 if opts["exp"] == 1 else gen_exp2
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    seed = opts["seed"]
    splits = {
        "train": gen(opts["n"], opts["src_len"], seed),
        "valid": gen(opts["valid_n"], opts["src_len"], seed + 1),
        "test": gen(opts["test_n"], opts["src_len"], seed + 2),
    }
    Vocabulary.synthetic().save(out / "vocab.txt")
    for name, corpus in splits.items():
        save_corpus(corpus, out / f"{name}.tsv")
        print(
            f"{name}: {len(corpus)} pairs, mean source length {opts['src_len']}, "
            f"mean target length {corpus.mean_target_length():.2f}"
        )
    return 0


def _model_config(opts: dict, vocab_size: int, max_src: int, max_tgt: int, autoregressive: bool):
    from narem.model import ModelConfig

    common = dict(dropout=opts["dropout"], autoregressive=autoregressive)
    if opts["preset"] != "custom":
        return ModelConfig.preset(opts["preset"], vocab_size, max_src, max_tgt, **common)
    return ModelConfig(
        opts["enc_layers"],
        opts["dec_layers"],
        opts["d_model"],
        opts["d_ff"],
        opts["n_heads"],
        vocab_size,
        max_src,
        max_tgt,
        **common,
    )


def _train_config(opts: dict):
    from narem.training import TrainConfig

    return TrainConfig(
        steps=opts["steps"],
        batch_size=opts["batch_size"],
        label_smoothing=opts.get("label_smoothing", 0.1),
        seed=opts["seed"],
        peak_lr=opts["peak_lr"],
        warmup_steps=opts["warmup"],
    )


def cmd_train(opts: dict) -> int:
    from narem.corpus import load_corpus
    from narem.training import train_ar, train_nar

    vocab = _load_vocab(opts, opts["train_path"])
    corpus = load_corpus(opts["train_path"], vocab)
    max_src = max(len(s) for s in corpus.sources)
    max_tgt = opts.get("max_tgt_len") or max(len(t) for t in corpus.targets)
    autoregressive = opts["arch"] == "ar"
    model_config = _model_config(opts, len(vocab), max_src, max_tgt, autoregressive)
    run_dir = Path(opts["out"])
    emit = _jsonl_logger(run_dir)
    emit("train_start", arch=opts["arch"], pairs=len(corpus), config=model_config.to_dict())
    trainer = train_ar if autoregressive else train_nar
    start = time.time()
    model, history = trainer(corpus, _train_config(opts), model_config)
    model.save(run_dir / "model.ckpt")
    emit("train_done", steps=len(history), final_loss=history[-1], seconds=time.time() - start)
    print(f"trained {opts['arch']} model: final loss {history[-1]:.4f} -> {run_dir / 'model.ckpt'}")
    return 0


def cmd_eval(opts: dict) -> int:
    from narem.corpus import load_corpus
    from narem.model import TransformerModel
    from narem.training import bleu, exact_match, ncm, predict_corpus

    model = TransformerModel.load(opts["model"])
    vocab = _load_vocab(opts, opts["data"])
    corpus = load_corpus(opts["data"], vocab)
    report = exact_match(
        model,
        corpus,
        use_ground_truth_length=opts["use_gt_length"],
        decoder=opts["decoder"],
        concat_aware=opts["concat_aware"],
    )
    if opts["with_ncm"] and not model.config.autoregressive:
        report.ncm = ncm(model, corpus)
    if opts["with_bleu"]:
        preds = predict_corpus(model, corpus, opts["use_gt_length"], opts["decoder"])
        report.bleu = bleu(preds, corpus.targets)
    print(report.to_json())
    rows = [
        ("exact_match", f"{report.exact_match:.4f}"),
        ("token_nll", f"{report.token_nll:.4f}"),
        ("ncm", "-" if report.ncm is None else f"{report.ncm:.4f}"),
        ("bleu", "-" if report.bleu is None else f"{report.bleu:.2f}"),
        ("count", str(report.count)),
    ]
    width = max(len(k) for k, _ in rows)
    for key, value in rows:
        print(f"{key:<{width}}  {value}")
    if opts.get("assert_exact_min") is not None and report.exact_match < opts["assert_exact_min"]:
        print(f"assertion failed: exact_match {report.exact_match:.4f} < {opts['assert_exact_min']}")
        return 2
    return 0


def cmd_decode(opts: dict) -> int:
    from narem.corpus import Vocabulary
    from narem.decoding import (
        argmax_decode,
        beam_search_batch,
        greedy_decode_batch,
        odd_decode,
        parallel_length_decode,
        rescore,
    )
    from narem.model import TransformerModel, decode_nar_unaries, predict_lengths, ar_sequence_logprobs

    model = TransformerModel.load(opts["model"])
    vocab = Vocabulary.load(opts["vocab"] or str(Path(opts["input"]).parent / "vocab.txt"))
    lines = [ln for ln in Path(opts["input"]).read_text().splitlines() if ln.strip()]
    sources = [vocab.encode(ln) for ln in lines]
    decoder = opts["decoder"]
    dump = []
    if decoder in ("greedy", "beam"):
        if not model.config.autoregressive:
            raise UsageError(f"{decoder} decoding needs an autoregressive checkpoint")
        if decoder == "greedy":
            outputs = greedy_decode_batch(model, sources)
        else:
            outputs = [h[0].tokens for h in beam_search_batch(model, sources, beam=opts["beam"])]
    elif decoder in ("argmax", "odd"):
        if model.config.autoregressive:
            raise UsageError(f"{decoder} decoding needs a non-autoregressive checkpoint")
        lengths = list(predict_lengths(model, sources))
        unaries = decode_nar_unaries(model, sources, lengths)
        decode = odd_decode if decoder == "odd" else argmax_decode
        outputs = [decode(u) for u in unaries]
    else:  # parallel
        if opts.get("teacher") is None:
            raise UsageError("parallel length decoding needs --teacher for rescoring")
        teacher = TransformerModel.load(opts["teacher"])
        outputs = []
        for src in sources:
            cands = parallel_length_decode(model, src, halfwidth=opts["halfwidth"], decoder="argmax")
            import numpy as np

            teacher_scores = ar_sequence_logprobs(teacher, [src] * len(cands), [c[0] for c in cands])
            dump.append(
                [
                    {
                        "length": len(c[0]),
                        "tokens": vocab.decode(c[0]),
                        "model_score": c[1],
                        "teacher_score": float(t),
                    }
                    for c, t in zip(cands, teacher_scores)
                ]
            )
            outputs.append(rescore(cands, teacher, src))
    with open(opts["output"], "w", encoding="utf-8") as fh:
        for out in outputs:
            fh.write(vocab.decode(out) + "\n")
    if opts.get("dump_candidates") and dump:
        Path(opts["dump_candidates"]).write_text(json.dumps(dump, indent=2))
    print(f"decoded {len(outputs)} sentences -> {opts['output']}")
    return 0


def cmd_em(opts: dict) -> int:
    from narem.corpus import load_corpus
    from narem.em import EmConfig, em_run
    from narem.training import ncm

    vocab = _load_vocab(opts, opts["train_path"])
    train_corpus = load_corpus(opts["train_path"], vocab)
    val_corpus = load_corpus(opts["valid_path"], vocab)
    max_src = max(len(s) for s in train_corpus.sources + val_corpus.sources)
    max_tgt = max(len(t) for t in train_corpus.targets + val_corpus.targets) + 4
    ar_config = _model_config(opts, len(vocab), max_src, max_tgt, autoregressive=True)
    nar_config = _model_config(opts, len(vocab), max_src, max_tgt, autoregressive=False)
    em_config = EmConfig(
        max_iters=opts["max_iters"],
        min_iters=opts["min_iters"],
        m_beam=opts["m_beam"],
        e_beam=opts["e_beam"],
        amortized=not opts["non_amortized"],
        seed=opts["seed"],
    )
    emit = _jsonl_logger(Path(opts["out"]))
    emit("em_start", pairs=len(train_corpus), config=em_config.__dict__)
    run = em_run(
        train_corpus,
        val_corpus,
        ar_config,
        nar_config,
        _train_config(opts),
        _train_config(opts),
        em_config,
        run_dir=opts["out"],
    )
    emit("em_done", state=json.loads(run.state.to_json()))
    print(run.state.to_json())
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "decode": cmd_decode,
    "em": cmd_em,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    logging.basicConfig(
        level=logging.INFO if sys.stderr.isatty() else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        opts = resolve_options(args)
        return COMMANDS[args.command](opts)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - single CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
