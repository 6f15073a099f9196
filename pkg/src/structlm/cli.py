"""Command-line entry point: structlm <command> ...

Exit status is 0 on success, 1 on usage errors and 2 on data errors.
Metrics go to standard output as key=value lines.
"""

import argparse
import logging
import os
import random
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from functools import partial

from . import symbols as S
from .decoder import Decoder, DecodeError, DecodeFailure, SearchParams
from .evaluation import (TRIGRAM_LAMBDA, build_trigram, depth_stats, evaluate, trigram_perplexity,
                         align_errors)
from .interp import (DEFAULT_BOUNDARIES, DescriptorFormatError, EventCounts, InterpModel,
                     UnknownSymbolError, default_lambdas, em_lambdas)
from .lattice import (AStarFailure, InterpolatedLM, Lattice, LatticeFormatError, LatticeNgram,
                      PeekingSlm, RescoreParams, SlmLM, TrigramLM, astar_decode,
                      nbest_sample_and_rank, split_links, viterbi_best, viterbi_expanded)
from .slm import InvalidParseError, SlmModel, load_interp, save_interp, tree_to_derivation, write_derivations
from .synthetic import random_lattice, toy_treebank
from .trainer import (em_on_parse_sets, init_from_treebank, l2r_predictor_reestimation, nbest_em_iteration,
                      nbest_parse_sets)
from .treebank import TreePipeline, TreebankError, format_tree, parse_bracketed, read_trees, write_trees

log = logging.getLogger("structlm")

DATA_ERRORS = (TreebankError, DescriptorFormatError, LatticeFormatError, InvalidParseError,
               UnknownSymbolError, DecodeError, DecodeFailure, AStarFailure, OSError, ValueError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def emit(stream, /, **metrics):
    for k, v in metrics.items():
        if isinstance(v, float):
            v = f"{v:.6f}"
        stream.write(f"{k}={v}\n")


@contextmanager
def job_map(jobs):
    """map-like callable that keeps input order; jobs > 1 uses processes."""
    if jobs and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            yield lambda fn, items: ex.map(fn, items, chunksize=1)
    else:
        yield map


def read_sentences(path):
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh if line.strip()]


def search_params(args, fudge=None):
    return SearchParams(max_stack_depth=args.stack_depth, stack_logp_threshold=args.stack_logp,
                        relative_threshold=args.rel_threshold, caches_enabled=not args.no_cache,
                        fudge=fudge)


def add_search_flags(p):
    p.add_argument("--stack-depth", type=int, default=10)
    p.add_argument("--stack-logp", type=float, default=100.0)
    p.add_argument("--rel-threshold", type=float, default=100.0)
    p.add_argument("--no-cache", action="store_true", help="ignore the tagger/parser move caches")
    p.add_argument("--jobs", type=int, default=1)


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(args, out):
    pipe = TreePipeline(drop_punctuation=args.drop_punctuation, lowercase=args.lowercase)
    with open(args.trees, encoding="utf-8") as fh:
        raw = parse_bracketed(fh.read())
    trees = [pipe(r) for r in raw]
    base = args.out_prefix or os.path.splitext(args.trees)[0]
    write_trees(base + ".bin.trees", trees)
    write_derivations(base + ".deriv", [tree_to_derivation(t) for t in trees])
    emit(out, trees=len(trees), binarized=base + ".bin.trees", derivations=base + ".deriv")


def _read_count_file(path, order):
    return EventCounts.read(path, order)


def cmd_train_interp(args, out):
    dev = _read_count_file(args.dev, args.order)
    cv = _read_count_file(args.cv, args.order) if args.cv else None
    order = dev.order
    alphabet = sorted({u for (u, _), _c in dev.items()} | ({u for (u, _), _c in cv.items()} if cv else set()))
    lambdas = default_lambdas(order, DEFAULT_BOUNDARIES)
    hist = []
    if cv is not None and args.iters > 0:
        lambdas, rep = em_lambdas(dev, cv, lambdas, args.iters, alphabet)
        hist = rep.history
    os.makedirs(args.out_dir, exist_ok=True)
    save_interp(InterpModel(dev, lambdas, alphabet), args.out_dir, args.name, args.iters)
    emit(out, order=order, events=len(dev), alphabet=len(alphabet))
    for k, h in enumerate(hist):
        emit(out, **{f"cv_ll_level.{k}": h[-1]})


def cmd_init_slm(args, out):
    trees = read_trees(args.trees)
    model, rep = init_from_treebank(trees, split=args.split, em_iterations=args.em_iters,
                                    min_count=args.min_count)
    model = model.replace(single_root=args.single_root)
    model.save(args.model_dir)
    words = [t.words()[1:-1] for t in trees]
    cut = rep.n_dev
    vocab = set(model.predictor.alphabet) - {S.EOS, S.UNK}
    tri = build_trigram(words[:cut], words[cut:], vocab, args.em_iters)
    save_interp(tri, args.model_dir, "trigram", args.em_iters)
    emit(out, dev_trees=rep.n_dev, check_trees=rep.n_check, vocab=len(vocab),
         pos=len(model.pos_tags), nt=len(model.nt_labels), model_dir=args.model_dir)


def _corpus_from(path):
    """Sentences from a binarized tree file (*.trees) or whitespace text."""
    if path.endswith(".trees"):
        return [t.words()[1:-1] for t in read_trees(path)]
    return read_sentences(path)


def cmd_train_slm(args, out):
    model = SlmModel.load(args.model_dir)
    sents = _corpus_from(args.corpus)
    params = search_params(args)
    out_dir = args.out_dir or args.model_dir
    if args.stage == 1:
        if args.frozen:
            with job_map(args.jobs) as jm:
                sets = nbest_parse_sets(model, sents, params, jm)
            model, reports = em_on_parse_sets(model, sets, args.iters)
            for i, rep in enumerate(reports):
                emit(out, iteration=i, **rep.metrics())
        else:
            for i in range(args.iters):
                model, rep = nbest_em_iteration(model, sents, params)
                emit(out, iteration=i, **rep.metrics())
                model.save(os.path.join(out_dir, f"iter{i + 1}"), i + 1)
    else:
        model, rep = l2r_predictor_reestimation(model, sents, params, args.iters)
        for i, ll in enumerate(rep.history):
            emit(out, iteration=i, L2R_LL=ll)
    model.save(out_dir, args.iters)
    if os.path.abspath(out_dir) != os.path.abspath(args.model_dir):
        for ext in (".desc", ".counts", ".vocab"):
            src = os.path.join(args.model_dir, "trigram" + ext)
            if os.path.exists(src):
                shutil.copy(src, out_dir)
    emit(out, model_dir=out_dir)


def cmd_ppl(args, out):
    model = SlmModel.load(args.model_dir)
    if args.single_root:
        model = model.replace(single_root=True)
    corpus = _corpus_from(args.corpus)
    trigram = None
    if args.lam > 0:
        if not os.path.exists(os.path.join(args.model_dir, "trigram.desc")):
            raise UsageError("--lambda > 0 needs a trigram in the model directory (run init-slm)")
        trigram = load_interp(args.model_dir, "trigram")
    params = search_params(args, args.fudge)
    with job_map(args.jobs) as jm:
        rep = evaluate(model, corpus, params, trigram, args.lam, jm)
    metrics = rep.metrics()
    if args.variant != "all":
        keep = f"{args.variant}-PPL"
        metrics = {k: v for k, v in metrics.items() if not k.endswith("-PPL") or k == keep}
    if args.table:
        out.write(rep.table() + "\n")
    emit(out, **metrics)
    if trigram is not None:
        emit(out, **{"3gram-PPL": trigram_perplexity(trigram, corpus)})
    if args.depth_csv or args.depth:
        d = depth_stats(model, corpus, params)
        emit(out, expected_depth=d.expected)
        if args.depth_csv:
            with open(args.depth_csv, "w", encoding="utf-8") as fh:
                fh.write(d.csv())


def _parse_one(model, params, words):
    res = Decoder(model, params).decode(words)
    return format_tree(res.best.tree), res.best.logp


def cmd_parse(args, out):
    model = SlmModel.load(args.model_dir)
    if args.single_root:
        model = model.replace(single_root=True)
    params = search_params(args)
    with job_map(args.jobs) as jm:
        for tree, lp in jm(partial(_parse_one, model, params), _corpus_from(args.corpus)):
            out.write(tree + "\n")


def _check_rescore(args):
    if args.mode == "viterbi" and args.lam < 1.0 and args.lm == "slm":
        raise UsageError("--mode viterbi needs an n-gram rescoring LM: pass --lm trigram")
    needs_model = args.mode in ("peek", "peek-prune", "normalized") or args.lam < 1.0
    if needs_model and not args.model_dir:
        raise UsageError(f"--mode {args.mode} with --lambda {args.lam} needs --model-dir")


def _read_split_table(path):
    table = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if len(parts) == 3:
                table[parts[0]] = (parts[1], parts[2])
            elif parts:
                raise ValueError(f"bad split-table line: {line.strip()}")
    return table


def _word_lm(args):
    if args.lm == "slm":
        model = SlmModel.load(args.model_dir)
        return SlmLM(Decoder(model, search_params(args)))
    return TrigramLM(load_interp(args.model_dir, "trigram"))


def _rescore_one(args, path):
    lat = Lattice.read(path)
    if args.split_table:
        lat = split_links(lat, _read_split_table(args.split_table))
    params = RescoreParams(args.lm_weight, args.log_ip, args.log_comp, args.log_final,
                           args.stack_depth_astar, args.stack_logp_astar, args.lam)
    result = {"lattice": os.path.basename(path)}
    if args.mode == "viterbi":
        if args.lam == 1.0:
            lm = LatticeNgram()
            p, score = viterbi_best(lat, params)
        else:
            lm = InterpolatedLM(_word_lm(args), args.lam)
            p, score = viterbi_expanded(lat, lm, params)
    else:
        if args.mode == "astar":
            lm = InterpolatedLM(_word_lm(args), args.lam) if args.lam < 1.0 else LatticeNgram()
        else:
            model = SlmModel.load(args.model_dir)
            tri = TrigramLM(load_interp(args.model_dir, "trigram")) if args.mode == "normalized" else None
            lm = PeekingSlm(Decoder(model, search_params(args)), args.mode, tri, args.lam)
        res = astar_decode(lat, lm, params)
        p, score = res.path, res.score
        result.update(steps=res.steps, max_stack=res.max_stack)
        if args.nbest:
            rk = nbest_sample_and_rank(lat, lm, params, args.nbest, res)
            result.update(rank=rk.rank, rank_class=rk.classification)
    result.update(score=score, words=" ".join(_joined_words(lat, p)))
    return result


def _joined_words(lat, path):
    """Path words with split links rejoined into their original token."""
    words = []
    for lid in path:
        link = lat.links[lid]
        if link.joined is not None and words:
            words[-1] = link.joined
        else:
            words.append(link.word)
    return words


def cmd_rescore(args, out):
    _check_rescore(args)
    refs = read_sentences(args.refs) if args.refs else None
    errors = ref_words = 0
    with job_map(args.jobs) as jm:
        for i, r in enumerate(jm(partial(_rescore_one, args), args.lattices)):
            emit(out, **r)
            if refs is not None:
                errors += align_errors(r["words"].split(), refs[i])
                ref_words += len(refs[i])
    if refs is not None and ref_words:
        emit(out, WER=errors / ref_words)


def cmd_wer(args, out):
    hyps = read_sentences(args.hyp)
    refs = read_sentences(args.ref)
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} references")
    errors = sum(align_errors(h, r) for h, r in zip(hyps, refs))
    n = sum(len(r) for r in refs)
    emit(out, errors=errors, words=n, WER=errors / n)


def cmd_synth(args, out):
    if args.what == "treebank":
        text = "\n".join(toy_treebank(args.n, args.seed)) + "\n"
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        emit(out, trees=args.n, seed=args.seed, out=args.out)
    else:
        rng = random.Random(args.seed)
        os.makedirs(args.out, exist_ok=True)
        vocab = args.vocab.split(",") if args.vocab else ["the", "dog", "cat", "saw", "ran", "a", "big"]
        for i in range(args.n):
            random_lattice(rng, vocab).write(os.path.join(args.out, f"lat{i:04d}.slmlat"))
        emit(out, lattices=args.n, seed=args.seed, out=args.out)


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="structlm", description="Structured language model toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("preprocess", help="bracketed trees -> binarized trees + derivations")
    c.add_argument("trees")
    c.add_argument("--out-prefix")
    c.add_argument("--drop-punctuation", action="store_true")
    c.add_argument("--lowercase", action="store_true")
    c.set_defaults(fn=cmd_preprocess)

    c = sub.add_parser("train-interp", help="EM-train tied lambdas of a deleted-interpolation model")
    c.add_argument("--dev", required=True, help="development count file")
    c.add_argument("--cv", help="cross-validation count file")
    c.add_argument("--order", type=int)
    c.add_argument("--iters", type=int, default=20)
    c.add_argument("--out-dir", required=True)
    c.add_argument("--name", default="model")
    c.set_defaults(fn=cmd_train_interp)

    c = sub.add_parser("init-slm", help="initialize an SLM (and a trigram) from binarized trees")
    c.add_argument("trees")
    c.add_argument("--model-dir", required=True)
    c.add_argument("--split", type=float, default=0.9)
    c.add_argument("--em-iters", type=int, default=20)
    c.add_argument("--min-count", type=int, default=1)
    c.add_argument("--single-root", action="store_true")
    c.set_defaults(fn=cmd_init_slm)

    c = sub.add_parser("train-slm", help="N-best EM (stage 1) or L2R predictor reestimation (stage 2)")
    c.add_argument("corpus")
    c.add_argument("--model-dir", required=True)
    c.add_argument("--out-dir")
    c.add_argument("--stage", type=int, choices=(1, 2), default=1)
    c.add_argument("--iters", type=int, default=1)
    c.add_argument("--frozen", action="store_true", help="decode once and iterate on fixed N-best sets")
    add_search_flags(c)
    c.set_defaults(fn=cmd_train_slm)

    c = sub.add_parser("ppl", help="perplexity report")
    c.add_argument("corpus")
    c.add_argument("--model-dir", required=True)
    c.add_argument("--variant", choices=("L2R", "TOP", "BOT", "SUM", "all"), default="all")
    c.add_argument("--fudge", type=float, help="exponent on TAGGER and PARSER scores")
    c.add_argument("--lambda", dest="lam", type=float, default=0.0,
                   help=f"trigram interpolation weight (check-data estimate {TRIGRAM_LAMBDA})")
    c.add_argument("--single-root", action="store_true")
    c.add_argument("--depth", action="store_true", help="also report expected depth")
    c.add_argument("--depth-csv")
    c.add_argument("--table", action="store_true")
    add_search_flags(c)
    c.set_defaults(fn=cmd_ppl)

    c = sub.add_parser("parse", help="best parse per sentence")
    c.add_argument("corpus")
    c.add_argument("--model-dir", required=True)
    c.add_argument("--single-root", action="store_true")
    add_search_flags(c)
    c.set_defaults(fn=cmd_parse)

    c = sub.add_parser("rescore", help="lattice rescoring")
    c.add_argument("lattices", nargs="+")
    c.add_argument("--mode", choices=("viterbi", "astar", "peek", "peek-prune", "normalized"),
                   default="astar")
    c.add_argument("--model-dir")
    c.add_argument("--lm", choices=("slm", "trigram"), default="slm")
    c.add_argument("--lm-weight", type=float, default=16.0)
    c.add_argument("--log-ip", type=float, default=0.0)
    c.add_argument("--log-comp", type=float, default=0.5)
    c.add_argument("--log-final", type=float, default=0.0)
    c.add_argument("--lambda", dest="lam", type=float, default=1.0, help="weight of the lattice n-gram")
    c.add_argument("--stack-depth-astar", "--astar-depth", type=int, default=None)
    c.add_argument("--stack-logp-astar", "--astar-logp", type=float, default=float("inf"))
    c.add_argument("--nbest", type=int, default=0)
    c.add_argument("--split-table", help="lines 'word left right'")
    c.add_argument("--refs", help="reference transcripts, one per lattice")
    add_search_flags(c)
    c.set_defaults(fn=cmd_rescore)

    c = sub.add_parser("wer", help="word error rate of hypothesis vs reference files")
    c.add_argument("hyp")
    c.add_argument("ref")
    c.set_defaults(fn=cmd_wer)

    c = sub.add_parser("synth", help="synthetic treebank or lattices")
    c.add_argument("what", choices=("treebank", "lattices"))
    c.add_argument("--n", type=int, default=100)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--vocab")
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_synth)
    return p


def main(argv=None, out=None):
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if not 0.0 <= getattr(args, "lam", 0.0) <= 1.0:
            raise UsageError("--lambda must lie in [0, 1]")
        args.fn(args, out)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"structlm: error: {exc}\n")
        return 1
    except DATA_ERRORS as exc:
        sys.stderr.write(f"structlm: {type(exc).__name__}: {exc}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
