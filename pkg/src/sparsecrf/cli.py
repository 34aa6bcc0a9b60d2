"""Command-line interface: train, label, eval, inspect, gen.

Exit codes: 0 on success, 1 on runtime failures (I/O, numerical
abort), 2 on usage or input-format errors. Machine-readable outputs are
key=value lines or TSV; all commands are deterministic given their
flags and seed.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from .data import (
    Corpus,
    CorpusFormatError,
    default_hmm_spec,
    generate_hmm_corpus,
    read_corpus,
    token_error,
    write_corpus,
)
from .features import TemplateError, parse_template
from .inference import InferenceError, Scorer, compile_sequence, viterbi
from .model import ModelFormatError, load_model, save_model
from .objective import PenaltyConfig
from .optimizer import TrainConfig, train

USAGE_ERROR = 2
RUNTIME_ERROR = 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsecrf",
        description="Sparse linear-chain CRF training and decoding",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="fit a model on a labelled corpus")
    p_train.add_argument("--data", required=True, help="training corpus (TSV)")
    p_train.add_argument("--templates", required=True, help="template file")
    p_train.add_argument("--out", "--model", dest="out", required=True,
                         help="output model file")
    p_train.add_argument("--history", help="history file (default: <out>.history)")
    p_train.add_argument("--test", help="held-out corpus for per-epoch error")
    p_train.add_argument("--rho1", type=float, default=1.0, help="l1 penalty weight")
    p_train.add_argument("--rho2", type=float, default=0.001,
                         help="squared-l2 penalty weight")
    p_train.add_argument("--alpha-init", type=float, default=100.0)
    p_train.add_argument("--alpha-main", type=float, default=None)
    p_train.add_argument("--switch-epoch", type=int, default=3)
    p_train.add_argument("--max-epochs", type=int, default=30)
    p_train.add_argument("--tol", type=float, default=1e-4)
    p_train.add_argument("--mode", choices=["blockwise", "coordinate"],
                         default="blockwise")
    p_train.add_argument("--cutoff", type=int, default=1,
                         help="minimum feature occurrence count")

    p_label = sub.add_parser("label", help="decode an unlabelled corpus")
    p_label.add_argument("--model", required=True)
    p_label.add_argument("--data", required=True)
    p_label.add_argument("--out", help="output file (default: stdout)")
    p_label.add_argument("--sparse-decode", action="store_true",
                         help="use the sparse Viterbi recursion")

    p_eval = sub.add_parser("eval", help="token error of a model on labelled data")
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--sparse-decode", action="store_true")

    p_inspect = sub.add_parser("inspect", help="per-key weight magnitude grids")
    p_inspect.add_argument("--model", required=True)
    p_inspect.add_argument("--out", help="output file (default: stdout)")

    p_gen = sub.add_parser("gen", help="sample synthetic benchmark corpora")
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.add_argument("--n-train", type=int, default=10)
    p_gen.add_argument("--n-test", type=int, default=1000)
    p_gen.add_argument("--seed", type=int, default=0)

    for p in (p_train, p_label, p_eval, p_inspect, p_gen):
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for per-sequence evaluation")
        p.add_argument("--deterministic", action="store_true",
                       help="force a fixed reduction order (always on; "
                            "results never depend on --threads)")
    return parser


def _read_templates(path):
    templates = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                templates.append(parse_template(line))
            except TemplateError as exc:
                raise TemplateError(f"{path}:{lineno}: {exc}") from None
    if not templates:
        raise TemplateError(f"{path}: no templates")
    return templates


def cmd_train(args) -> int:
    corpus = read_corpus(args.data, has_labels=True)
    templates = _read_templates(args.templates)
    heldout = read_corpus(args.test, has_labels=True) if args.test else None
    config = TrainConfig(
        penalty=PenaltyConfig(l1=args.rho1, l2=args.rho2),
        mode=args.mode,
        max_epochs=args.max_epochs,
        tol_objective=args.tol,
        alpha_initial=args.alpha_init,
        alpha_main=args.alpha_main,
        switch_epoch=args.switch_epoch,
        cutoff=args.cutoff,
    )
    model, history = train(corpus, templates, config, heldout=heldout)
    save_model(model, args.out)
    history.write(args.history or args.out + ".history")
    if history.aborted:
        print("warning: objective became non-finite; kept last good model",
              file=sys.stderr)
        return RUNTIME_ERROR
    return 0


def _is_blank_corpus(path) -> bool:
    with open(path, "r", encoding="utf-8") as fh:
        return all(line.startswith("#") or not line.strip() for line in fh)


def cmd_label(args) -> int:
    if _is_blank_corpus(args.data):
        if args.out:
            open(args.out, "w", encoding="utf-8").close()
        return 0
    model = load_model(args.model)
    corpus = read_corpus(args.data, has_labels=False)
    if corpus.n_columns != model.observations.n_columns:
        print(
            f"error: corpus has {corpus.n_columns} columns, model expects "
            f"{model.observations.n_columns}",
            file=sys.stderr,
        )
        return USAGE_ERROR
    mode = "sparse" if args.sparse_decode else "dense"
    scorer = Scorer(model)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for seq in corpus:
            keys = compile_sequence(model.templates, seq)
            labels, _ = viterbi(model, seq, mode=mode, scorer=scorer, keys=keys)
            for t in range(len(seq)):
                fields = [col[t] for col in seq.columns] + [labels[t]]
                out.write("\t".join(fields) + "\n")
            out.write("\n")
    finally:
        if args.out:
            out.close()
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    corpus = read_corpus(args.data, has_labels=True)
    started = time.perf_counter()
    error = token_error(model, corpus, decoder="viterbi", threads=args.threads)
    seconds = time.perf_counter() - started
    active_mu, active_lambda = model.active_counts()
    print(f"token_error={error!r}")
    print(f"active_mu={active_mu}")
    print(f"active_lambda={active_lambda}")
    print(f"seconds={seconds:.6f}")
    return 0


def cmd_inspect(args) -> int:
    model = load_model(args.model)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        _write_inspection(model, out)
    finally:
        if args.out:
            out.close()
    return 0


def _write_inspection(model, out):
    """Per-(label, value) magnitude grids: |w| for unigram templates and
    the source-summed |w| for bigram templates."""
    labels = list(model.labels)
    for tpl_idx, tpl in enumerate(model.templates):
        keys = sorted(
            key for key in (
                set(model.store.unigram_keys()) | set(model.store.bigram_keys())
            )
            if key[0] == tpl_idx
        )
        values = [key[1] for key in keys]
        out.write(f"#template\t{tpl.descriptor}\n")
        out.write("label\t" + "\t".join(values) + "\n")
        for y, label in enumerate(labels):
            cells = []
            for key in keys:
                if tpl.bigram:
                    mat = model.store.bigram_matrix(key)
                    cells.append(np.abs(mat[:, y]).sum() if mat is not None else 0.0)
                else:
                    vec = model.store.unigram_vector(key)
                    cells.append(abs(vec[y]) if vec is not None else 0.0)
            out.write(label + "\t" + "\t".join(repr(float(c)) for c in cells) + "\n")
        out.write("\n")


def cmd_gen(args) -> int:
    import os

    os.makedirs(args.out, exist_ok=True)
    spec = default_hmm_spec(seed=args.seed)
    train_corpus = generate_hmm_corpus(spec, args.n_train)
    test_spec = default_hmm_spec(seed=args.seed + 1)
    test_corpus = generate_hmm_corpus(test_spec, args.n_test)
    write_corpus(train_corpus, os.path.join(args.out, "train.tsv"))
    write_corpus(test_corpus, os.path.join(args.out, "test.tsv"))
    return 0


_COMMANDS = {
    "train": cmd_train,
    "label": cmd_label,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
    "gen": cmd_gen,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (CorpusFormatError, ModelFormatError, TemplateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (InferenceError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
