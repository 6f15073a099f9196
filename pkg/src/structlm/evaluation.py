"""Word-level probability assignment and evaluation measures.

L2R perplexity predicts each word from the stack mixture over S_k,
weighted by rho (normalized hypothesis scores). TOP and BOT take the
predictor probabilities along the best and worst scored surviving complete
parse; SUM uses the total joint probability of the surviving parses, which
makes it a deficient estimate. </s> counts as a predicted word.
"""

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from functools import partial

from . import symbols as S
from .decoder import Decoder, DecodeFailure, SearchParams
from .interp import DEFAULT_BOUNDARIES, EventCounts, InterpModel, default_lambdas, em_lambdas

log = logging.getLogger(__name__)

TRIGRAM_LAMBDA = 0.36  # trigram weight estimated on check data in the original experiments


# ---------------------------------------------------------------------------
# the baseline trigram


def trigram_events(words):
    """(w, (w-1, w-2)) for each word plus </s>; the first word sees (<s>, <pad>)."""
    hist = (S.BOS, S.PAD)
    for w in list(words) + [S.EOS]:
        yield w, hist
        hist = (w, hist[0])


def _trigram_counts(sentences, vocab):
    counts = EventCounts(2)
    for words in sentences:
        mapped = [w if w in vocab else S.UNK for w in words]
        for w, ctx in trigram_events(mapped):
            counts.add(w, ctx)
    return counts


def build_trigram(dev, check=(), vocab=None, em_iterations=20, boundaries=DEFAULT_BOUNDARIES):
    """Deleted-interpolation trigram over the same alphabet layout as the SLM predictor."""
    if vocab is None:
        vocab = {w for s in dev for w in s}
    vocab = set(vocab) - {S.BOS, S.EOS, S.UNK}
    alphabet = sorted(vocab) + [S.EOS, S.UNK]
    keep = set(alphabet)
    dev_c = _trigram_counts(dev, keep)
    lambdas = default_lambdas(2, boundaries)
    if check and em_iterations > 0:
        cv = _trigram_counts(check, keep)
        lambdas, _ = em_lambdas(dev_c, cv, lambdas, em_iterations, alphabet)
    return InterpModel(dev_c, lambdas, alphabet)


def trigram_logprobs(model, words):
    """Per-word natural-log probabilities, </s> included."""
    vocab = set(model.alphabet)
    mapped = [w if w in vocab else S.UNK for w in words]
    return [model.logprob(w, ctx) for w, ctx in trigram_events(mapped)]


def interpolate_with_trigram(slm_prob, trigram_prob, lam):
    """lam * P_3gram + (1 - lam) * P_SLM."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("interpolation weight must lie in [0, 1]")
    return lam * trigram_prob + (1.0 - lam) * slm_prob


# ---------------------------------------------------------------------------
# perplexity


@dataclass
class PplReport:
    n: int
    l2r_ppl: float
    top_ppl: float
    bot_ppl: float
    sum_ppl: float
    sentences: int = 0
    fallbacks: int = 0

    def metrics(self):
        return {"N": self.n, "sentences": self.sentences, "L2R-PPL": self.l2r_ppl,
                "TOP-PPL": self.top_ppl, "BOT-PPL": self.bot_ppl, "SUM-PPL": self.sum_ppl,
                "fallbacks": self.fallbacks}

    def table(self):
        rows = [(k, v) for k, v in self.metrics().items()]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v:.4f}" if isinstance(v, float) else f"{k:<{width}}  {v}"
                         for k, v in rows)


@dataclass
class SentenceScores:
    l2r: list
    top: float
    bot: float
    sum: float
    fallback: bool = False


def _decode_with_fallback(decoder, words):
    try:
        return decoder.decode(words), False
    except DecodeFailure:
        if not decoder.params.caches_enabled:
            raise
        log.info("decode failed with caches, retrying without")
        return decoder.uncached().decode(words), True


def sentence_scores(decoder, words, trigram=None, lam=0.0):
    """Log-probabilities of one sentence under every variant."""
    res, fell_back = _decode_with_fallback(decoder, words)
    targets = res.words + [S.EOS]
    l2r = []
    tri = trigram_logprobs(trigram, words) if trigram is not None and lam > 0 else None
    for k, (state, w) in enumerate(zip(res.stages, targets)):
        p = decoder.word_prob(state, w)
        if tri is not None:
            p = interpolate_with_trigram(p, math.exp(tri[k]), lam)
        l2r.append(math.log(p))
    return SentenceScores(l2r, res.complete[0].pred_logp, res.complete[-1].pred_logp,
                          res.total_logprob(), fell_back)


def _score_one(model, params, trigram, lam, words):
    return sentence_scores(Decoder(model, params), words, trigram, lam)


def evaluate(model, corpus, params=None, trigram=None, lam=0.0, jobs_map=map):
    """PplReport over a corpus of word lists.

    jobs_map lets callers parallelize per sentence; results are reduced in
    input order so the report does not depend on it.
    """
    corpus = [list(s) for s in corpus]
    if not corpus or not any(corpus):
        raise ValueError("empty corpus")
    params = params or SearchParams()
    fn = partial(_score_one, model, params, trigram, lam)
    n = 0
    tot = {"l2r": 0.0, "top": 0.0, "bot": 0.0, "sum": 0.0}
    fallbacks = 0
    for sc in jobs_map(fn, corpus):
        n += len(sc.l2r)
        tot["l2r"] += sum(sc.l2r)
        tot["top"] += sc.top
        tot["bot"] += sc.bot
        tot["sum"] += sc.sum
        fallbacks += sc.fallback
    ppl = {k: math.exp(-v / n) for k, v in tot.items()}
    return PplReport(n, ppl["l2r"], ppl["top"], ppl["bot"], ppl["sum"], len(corpus), fallbacks)


def perplexity(model, corpus, variant="L2R", params=None, fudge=None, trigram=None, lam=0.0):
    """A single perplexity value; fudge overrides params.fudge."""
    params = params or SearchParams()
    if fudge is not None:
        params = replace(params, fudge=fudge)
    rep = evaluate(model, corpus, params, trigram, lam)
    key = {"L2R": "l2r_ppl", "TOP": "top_ppl", "BOT": "bot_ppl", "SUM": "sum_ppl"}[variant.upper()]
    return getattr(rep, key)


def trigram_perplexity(model, corpus):
    lps = [lp for s in corpus for lp in trigram_logprobs(model, s)]
    if not lps:
        raise ValueError("empty corpus")
    return math.exp(-sum(lps) / len(lps))


# ---------------------------------------------------------------------------
# depth factorization


def head_depth(prefix):
    """D(T_k): how far back in W_k the word h-1 sits; the pad head has depth 1."""
    h1 = prefix.h1
    if h1.head_word == S.PAD:
        return 1
    return prefix.position - h1.head_index + 1


@dataclass
class DepthDistribution:
    histogram: dict  # d -> average P(d | W_k) over all positions
    expected: float  # E[D] over positions k >= 1
    per_position: list = field(default_factory=list)

    def csv(self):
        return "depth,prob\n" + "".join(f"{d},{p!r}\n" for d, p in sorted(self.histogram.items()))


def depth_stats(model, corpus, params=None):
    dec = Decoder(model, params or SearchParams())
    per_pos = []
    total = Counter()
    exp_sum, exp_n = 0.0, 0
    for words in corpus:
        res, _ = _decode_with_fallback(dec, words)
        for state in res.stages:
            dist = defaultdict(float)
            for r, h in zip(state.rho(), state.hyps):
                dist[head_depth(h.prefix)] += float(r)
            per_pos.append(dict(dist))
            for d, p in dist.items():
                total[d] += p
            if state.position >= 1:
                exp_sum += sum(d * p for d, p in dist.items())
                exp_n += 1
    if not per_pos:
        raise ValueError("empty corpus")
    hist = {d: p / len(per_pos) for d, p in sorted(total.items())}
    return DepthDistribution(hist, exp_sum / exp_n if exp_n else 1.0, per_pos)


# ---------------------------------------------------------------------------
# word error rate


def align_errors(hyp, ref):
    """Minimum substitutions + insertions + deletions turning hyp into ref."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(hyp, ref):
    """Errors of the most favorable alignment per reference word."""
    if not ref:
        raise ValueError("empty reference")
    return align_errors(list(hyp), list(ref)) / len(ref)
