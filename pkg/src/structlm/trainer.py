"""Parameter estimation: treebank initialization and N-best EM reestimation.

The E-step of N-best EM runs over the complete parses that survive the
pruned search; each parse contributes its events with weight equal to its
posterior P(W,T) / sum over survivors. The M-step replaces the maximal-order
counts of every component by those expectations while lambdas and bucket
boundaries stay fixed.
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import symbols as S
from .decoder import Decoder, DecodeFailure, SearchParams
from .interp import EventCounts, InterpModel, default_lambdas, em_lambdas, DEFAULT_BOUNDARIES
from .slm import SlmModel, build_caches, predictor_context, tree_to_derivation
from .treebank import HeadedBinaryTree

log = logging.getLogger(__name__)

COMPONENT_ORDER = {S.PREDICTOR: 4, S.TAGGER: 3, S.PARSER: 4}
_ATTR = {S.PREDICTOR: "predictor", S.TAGGER: "tagger", S.PARSER: "parser"}


@dataclass
class TrainConfig:
    params: SearchParams = field(default_factory=SearchParams)
    iterations: int = 1
    split: float = 0.9
    em_iterations: int = 20
    min_count: int = 1


def map_tree_words(tree, vocab):
    """Copy of tree with words outside vocab replaced by <unk>."""
    if tree.is_leaf:
        w = tree.head_word
        if w in (S.BOS, S.EOS) or w in vocab:
            return tree
        return HeadedBinaryTree(tree.label, S.UNK, tree.head_pos, 0, (), tree.head_index)
    kids = tuple(map_tree_words(c, vocab) for c in tree.children)
    src = kids[tree.head_origin] if len(kids) == 2 else kids[0]
    return HeadedBinaryTree(tree.label, src.head_word, tree.head_pos, tree.head_origin, kids,
                            tree.head_index)


def derivation_counts(derivations, weights=None):
    """Per-component EventCounts of the free (non-forced) events."""
    counts = {c: EventCounts(n) for c, n in COMPONENT_ORDER.items()}
    weights = weights if weights is not None else [1.0] * len(derivations)
    for d, w in zip(derivations, weights):
        for ev in d:
            if not ev.forced:
                counts[ev.component].add(ev.u, ev.context, w)
    return counts


def _restrict(counts, alphabet):
    out = EventCounts(counts.order)
    keep = set(alphabet)
    dropped = 0
    for (u, ctx), c in counts.items():
        if u in keep:
            out.table[(u, ctx)] += c
        else:
            dropped += 1
    if dropped:
        log.warning("dropped %d check events with symbols unseen in development data", dropped)
    return out


@dataclass
class InitReport:
    n_dev: int
    n_check: int
    em: dict


def init_from_treebank(trees, split=0.9, em_iterations=20, check=None, min_count=1,
                       boundaries=DEFAULT_BOUNDARIES, vocab=None):
    """Weight-1 counts from development trees, lambdas EM-trained on check trees.

    When `check` is None the last (1 - split) share of `trees` is held out.
    Returns (SlmModel, InitReport).
    """
    trees = list(trees)
    if check is None:
        cut = max(1, int(round(len(trees) * split))) if len(trees) > 1 else len(trees)
        dev, check = trees[:cut], trees[cut:]
    else:
        dev = trees
    if not dev:
        raise ValueError("no development trees")
    if vocab is None:
        freq = Counter(w for t in dev for w in t.words() if w not in (S.BOS, S.EOS))
        vocab = {w for w, c in freq.items() if c >= min_count}
    vocab = set(vocab) - {S.BOS, S.EOS, S.UNK}
    dev = [map_tree_words(t, vocab) for t in dev]
    check = [map_tree_words(t, vocab) for t in check]

    pos = sorted({l.label for t in dev for l in t.leaves()} - {S.SB, S.SE})
    nts = sorted({n.label for t in dev for n in t.nodes() if not n.is_leaf} - {S.TOP, S.TOP_PRIME})
    alphabets = {
        S.PREDICTOR: sorted(vocab) + [S.EOS, S.UNK],
        S.TAGGER: pos,
        S.PARSER: S.all_actions(nts),
    }
    dev_d = [tree_to_derivation(t) for t in dev]
    check_d = [tree_to_derivation(t) for t in check]
    dev_c = derivation_counts(dev_d)
    check_c = derivation_counts(check_d)
    models, em_hist = {}, {}
    for comp, order in COMPONENT_ORDER.items():
        lambdas = default_lambdas(order, boundaries)
        cv = _restrict(check_c[comp], alphabets[comp])
        if len(cv) and em_iterations > 0:
            lambdas, rep = em_lambdas(dev_c[comp], cv, lambdas, em_iterations, alphabets[comp])
            em_hist[comp] = rep.history
        models[comp] = InterpModel(dev_c[comp], lambdas, alphabets[comp])
    tag_cache, parser_cache = build_caches(dev_d)
    model = SlmModel(models[S.PREDICTOR], models[S.TAGGER], models[S.PARSER], tag_cache, parser_cache)
    return model, InitReport(len(dev), len(check), em_hist)


# ---------------------------------------------------------------------------
# N-best EM


@dataclass
class EmIterationReport:
    log_likelihood: float = 0.0
    sentences: int = 0
    failed: int = 0
    census: dict = field(default_factory=dict)
    posterior_sums: list = field(default_factory=list)

    def metrics(self):
        out = {"LN": self.log_likelihood, "sentences": self.sentences, "failed": self.failed}
        for comp, cen in self.census.items():
            out[f"types_{comp.lower()}"] = ",".join(str(c) for c in cen)
        return out


def _logsumexp(x):
    x = np.asarray(x, dtype=float)
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))


def accumulate(model, parse_sets, counts=None, report=None):
    """E-step over fixed parse sets: list (per sentence) of derivations."""
    counts = counts or {c: EventCounts(n) for c, n in COMPONENT_ORDER.items()}
    report = report or EmIterationReport()
    for derivs in parse_sets:
        if not derivs:
            report.failed += 1
            continue
        lps = np.array([model.joint_logprob(d) for d in derivs])
        total = _logsumexp(lps)
        post = np.exp(lps - total)
        report.log_likelihood += total
        report.sentences += 1
        report.posterior_sums.append(float(post.sum()))
        for d, q in zip(derivs, post):
            for ev in d:
                if not ev.forced:
                    counts[ev.component].add(ev.u, ev.context, float(q))
    return counts, report


def maximize(model, counts, tying=None):
    """M-step: maximal-order counts := expectations, lambdas unchanged.

    tying (per-component EventCounts) pins each context's lambda bucket;
    by default contexts are bucketed by their new expected counts.
    """
    new = {}
    for comp, attr in _ATTR.items():
        m = getattr(model, attr).with_counts(counts[comp].pruned())
        new[attr] = m.with_tying(tying[comp] if tying is not None else None)
    return model.replace(**new)


def nbest_parse_sets(model, sentences, params, jobs_map=map):
    """Decode every sentence; returns lists of surviving complete derivations."""
    dec = Decoder(model, params)

    def one(words):
        try:
            return [h.derivation() for h in dec.decode(words).complete]
        except DecodeFailure as exc:
            log.warning("no complete parse: %s", exc)
            return []

    return list(jobs_map(one, sentences))


def em_on_parse_sets(model, parse_sets, iterations, freeze_buckets=True):
    """Repeat E/M over frozen parse sets; returns (model, [reports]).

    With freeze_buckets every context keeps the lambda bucket it has under
    the starting model's counts for the whole run (contexts unseen there are
    bucketed by their own expected count), so M-steps only move relative
    frequencies.
    """
    reports = []
    tying = None
    for _ in range(iterations):
        counts, rep = accumulate(model, parse_sets)
        rep.census = {c: counts[c].type_census() for c in counts}
        reports.append(rep)
        if freeze_buckets and tying is None:
            tying = {c: getattr(model, a).counts for c, a in _ATTR.items()}
        model = maximize(model, counts, tying)
    final = accumulate(model, parse_sets)[1]
    reports.append(final)
    if tying is not None:
        model = model.replace(**{a: getattr(model, a).with_tying(None) for a in _ATTR.values()})
    return model, reports


def nbest_em_iteration(model, sentences, params=None):
    """One first-stage iteration: decode, accumulate posteriors, re-count."""
    params = params or SearchParams()
    sets = nbest_parse_sets(model, sentences, params)
    counts, rep = accumulate(model, sets)
    rep.census = {c: counts[c].type_census() for c in counts}
    return maximize(model, counts), rep


# ---------------------------------------------------------------------------
# second stage: the L2R word predictor


@dataclass
class L2RReport:
    history: list = field(default_factory=list)  # L^{L2R} before each update, then final
    census: list = field(default_factory=list)


def frozen_stacks(model, sentences, params):
    """(rho, prefixes, targets) per position, decoded once with the structure model."""
    dec = Decoder(model.replace(l2r_predictor=None), params)
    out = []
    for words in sentences:
        try:
            res = dec.decode(words)
        except DecodeFailure as exc:
            log.warning("skipping sentence: %s", exc)
            continue
        targets = res.words + [S.EOS]
        for st, w in zip(res.stages, targets):
            out.append((st.rho(), [h.prefix for h in st.hyps], w))
    return out


def _l2r_estep(model, l2r, positions):
    counts = EventCounts(l2r.order)
    ll = 0.0
    tmp = model.replace(l2r_predictor=l2r)
    for rho, prefixes, w in positions:
        joint = np.array([r * tmp.l2r_prob(w, p) for r, p in zip(rho, prefixes)])
        tot = joint.sum()
        ll += math.log(tot)
        for q, p in zip(joint / tot, prefixes):
            counts.add(w, predictor_context(p), float(q))
    return counts, ll


def l2r_predictor_reestimation(model, sentences, params=None, iterations=1, positions=None,
                               freeze_buckets=True):
    """HMM-style EM for a separate L2R predictor with structure-side rho fixed.

    Seeded by copying the current WORD-PREDICTOR; TAGGER and PARSER are
    left untouched. Lambda buckets are pinned to the seed counts while
    iterating, as in em_on_parse_sets. Returns (model with l2r_predictor,
    L2RReport).
    """
    params = params or SearchParams()
    if positions is None:
        positions = frozen_stacks(model, sentences, params)
    l2r = model.l2r_predictor or model.predictor
    tying = l2r.counts if freeze_buckets else None
    l2r = InterpModel(l2r.counts, l2r.lambdas, l2r.alphabet, tying)
    report = L2RReport()
    for _ in range(iterations):
        counts, ll = _l2r_estep(model, l2r, positions)
        report.history.append(ll)
        counts = counts.pruned()
        report.census.append(counts.type_census())
        l2r = l2r.with_counts(counts)
    report.history.append(_l2r_estep(model, l2r, positions)[1])
    return model.replace(l2r_predictor=l2r.with_tying(None)), report
