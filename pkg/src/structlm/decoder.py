"""Synchronous multi-stack search over word-parse prefixes.

Hypotheses that have made the same number of predictor and parser moves
share a bounded stack. Each word is processed in three steps: every
surviving prefix is extended by the word and each candidate tag; non-null
parser moves then cascade from stacks with fewer parser moves to those with
more; finally null moves every survivor to the next position, where a
relative threshold against the best score prunes once more.
"""

import gc
import math
from bisect import insort
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from itertools import count

import numpy as np

from . import symbols as S
from .slm import (ElementaryEvent, Derivation, finish_prefix, initial_prefix, predictor_context,
                  parser_context, shift, tagger_context, apply_action, choice_class, FORCED_NULL,
                  FORCED_TOP_PRIME)


class DecodeError(ValueError):
    pass


class DecodeFailure(RuntimeError):
    pass


@dataclass
class SearchParams:
    max_stack_depth: int = 10
    stack_logp_threshold: float = 100.0
    relative_threshold: float = 100.0
    caches_enabled: bool = True
    fudge: float = None  # exponent on TAGGER and PARSER factors in the score

    def __post_init__(self):
        if self.max_stack_depth <= 0 or self.stack_logp_threshold <= 0 or self.relative_threshold <= 0:
            raise ValueError("search thresholds must be positive")

    @classmethod
    def exhaustive(cls, **kw):
        return cls(max_stack_depth=10**9, stack_logp_threshold=math.inf,
                   relative_threshold=math.inf, caches_enabled=False, **kw)


_seq = count()


@contextmanager
def gc_paused():
    """Hypotheses form large acyclic pointer chains; cyclic GC passes over
    them dominate decode time, so collection is paused while searching."""
    was = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was:
            gc.enable()


class Hypothesis:
    __slots__ = ("prefix", "pred_logp", "struct_logp", "n_pred", "n_parse", "score", "seq",
                 "_events", "_parent")

    def __init__(self, prefix, pred_logp, struct_logp, n_pred, n_parse, fudge, parent=None, events=()):
        self.prefix = prefix
        self.pred_logp = pred_logp
        self.struct_logp = struct_logp
        self.n_pred = n_pred
        self.n_parse = n_parse
        if fudge is None:
            self.score = pred_logp + struct_logp
        else:
            self.score = pred_logp + fudge * struct_logp
        self.seq = next(_seq)
        self._parent = parent
        self._events = events

    @property
    def logp(self):
        """ln P(W_k, T_k), independent of any fudge factor."""
        return self.pred_logp + self.struct_logp

    def derivation(self):
        chunks = []
        h = self
        while h is not None:
            chunks.append(h._events)
            h = h._parent
        d = Derivation()
        for c in reversed(chunks):
            d.extend(c)
        return d

    @property
    def tree(self):
        return self.prefix.stack[0] if self.prefix.is_complete() else None

    def __repr__(self):
        return f"Hypothesis(logp={self.logp:.4f}, pred={self.n_pred}, parse={self.n_parse})"


class Stack:
    """Bounded ranked list: highest score first, insertion order breaks ties."""

    def __init__(self, depth, threshold):
        self.depth = depth
        self.threshold = threshold
        self.items = []  # (-score, seq, hyp)

    def insert(self, hyp):
        if self.items:
            top = -self.items[0][0]
            if top - hyp.score > self.threshold:
                return
        insort(self.items, (-hyp.score, hyp.seq, hyp))
        if len(self.items) > self.depth:
            self.items.pop()
        top = -self.items[0][0]
        while self.items and top + self.items[-1][0] > self.threshold:
            self.items.pop()

    def __iter__(self):
        return (h for _, _, h in self.items)

    def __len__(self):
        return len(self.items)


@dataclass
class DecoderState:
    """S_k: the hypotheses ready to predict word k+1, best first."""

    position: int
    hyps: list
    words: list = field(default_factory=list)

    def rho(self):
        scores = np.array([h.score for h in self.hyps])
        w = np.exp(scores - scores.max())
        return w / w.sum()


class Decoder:
    def __init__(self, model, params=None):
        self.model = model
        self.params = params or SearchParams()

    def uncached(self):
        return Decoder(self.model, replace(self.params, caches_enabled=False))

    def extend_with_fallback(self, state, word, last=False):
        """extend(), retried without the move caches when they prune everything."""
        try:
            return self.extend(state, word, last)
        except DecodeFailure:
            if not self.params.caches_enabled:
                raise
            return self.uncached().extend(state, word, last)

    def _new_stack(self):
        return Stack(self.params.max_stack_depth, self.params.stack_logp_threshold)

    def initial(self):
        h = Hypothesis(initial_prefix(), 0.0, 0.0, 0, 0, self.params.fudge)
        return DecoderState(0, [h], [])

    def word_prob(self, state, word, l2r=True):
        """P(word | W_k): predictor rows mixed with weights rho over S_k."""
        rho = state.rho()
        fn = self.model.l2r_prob if l2r else self.model.predictor_prob
        return float(sum(r * fn(word, h.prefix) for r, h in zip(rho, state.hyps)))

    def word_distribution(self, state, l2r=True):
        """P(. | W_k) over the predictor alphabet."""
        rho = state.rho()
        out = None
        for r, h in zip(rho, state.hyps):
            row = r * self.model.predictor_distribution(h.prefix, l2r=l2r)
            out = row if out is None else out + row
        return out

    def extend(self, state, word, last=False):
        """S_k -> S_{k+1}: predict word, tag it, and run the parser to null."""
        model, params = self.model, self.params
        use_cache = params.caches_enabled and not (last and model.single_root)
        fudge = params.fudge
        vec = defaultdict(self._new_stack)
        for h in state.hyps:
            prefix = h.prefix
            lp_w = model.predictor_prob(word, prefix)
            if lp_w <= 0:
                continue
            lp_w = math.log(lp_w)
            ev_w = ElementaryEvent(S.PREDICTOR, word, predictor_context(prefix))
            for tag in model.candidate_tags(word, use_cache):
                pt = model.tagger_prob(tag, word, prefix)
                if pt <= 0:
                    continue
                ev_t = ElementaryEvent(S.TAGGER, tag, tagger_context(word, prefix), word == S.EOS)
                nxt = Hypothesis(shift(prefix, word, tag), h.pred_logp + lp_w,
                                 h.struct_logp + math.log(pt), h.n_pred + 1, h.n_parse, fudge,
                                 h, (ev_w, ev_t))
                vec[h.n_parse].insert(nxt)
        # cascade non-null moves towards stacks with more parser operations
        moves = {}
        j = min(vec) if vec else 0
        while vec and j <= max(vec):
            for h in list(vec.get(j, ())):
                acts = model.legal_actions(h.prefix, use_cache)
                moves[h.seq] = acts
                if not acts or acts[0][0] == S.NULL and len(acts) == 1:
                    continue
                ctx = parser_context(h.prefix)
                forced = choice_class(h.prefix) == FORCED_TOP_PRIME
                for action, lp in acts:
                    if action == S.NULL:
                        continue
                    ev = ElementaryEvent(S.PARSER, action, ctx, forced)
                    vec[j + 1].insert(Hypothesis(apply_action(h.prefix, action), h.pred_logp,
                                                 h.struct_logp + lp, h.n_pred, h.n_parse + 1, fudge,
                                                 h, (ev,)))
            j += 1
        survivors = defaultdict(self._new_stack)
        for j, stack in vec.items():
            for h in stack:
                for action, lp in moves.get(h.seq, ()):
                    if action != S.NULL:
                        continue
                    ev = ElementaryEvent(S.PARSER, S.NULL, parser_context(h.prefix),
                                         choice_class(h.prefix) == FORCED_NULL)
                    survivors[j].insert(Hypothesis(h.prefix, h.pred_logp, h.struct_logp + lp,
                                                   h.n_pred, h.n_parse, fudge, h, (ev,)))
        hyps = [h for st in survivors.values() for h in st]
        if hyps and not (last and model.single_root):
            best = max(h.score for h in hyps)
            hyps = [h for h in hyps if best - h.score <= params.relative_threshold]
        hyps.sort(key=lambda h: (-h.score, h.seq))
        if not hyps:
            raise DecodeFailure(f"all hypotheses pruned at position {state.position + 1} ({word})")
        return DecoderState(state.position + 1, hyps, state.words + [word])

    def finish(self, state):
        """Predict </s>, close the parse under TOP' and TOP; returns complete parses."""
        closed = self.extend(state, S.EOS)
        out = []
        for h in closed.hyps:
            ev = ElementaryEvent(S.PARSER, S.adjoin_right(S.TOP), parser_context(h.prefix), True)
            out.append(Hypothesis(finish_prefix(h.prefix), h.pred_logp, h.struct_logp,
                                  h.n_pred, h.n_parse + 1, self.params.fudge, h, (ev,)))
        out.sort(key=lambda h: (-h.score, h.seq))
        return out

    def decode(self, words):
        """Decode a sentence; returns (stages S_0..S_n, complete parses)."""
        if not words:
            raise DecodeError("cannot decode an empty sentence")
        words = [self.model.map_word(w) for w in words]
        with gc_paused():
            state = self.initial()
            stages = [state]
            for i, w in enumerate(words):
                state = self.extend(state, w, last=i == len(words) - 1)
                stages.append(state)
            return DecodeResult(words, stages, self.finish(state))


@dataclass
class DecodeResult:
    words: list
    stages: list
    complete: list

    @property
    def best(self):
        return self.complete[0] if self.complete else None

    def total_logprob(self):
        """ln sum_T P(W, T) over the surviving complete parses."""
        lps = np.array([h.logp for h in self.complete])
        m = lps.max()
        return float(m + np.log(np.exp(lps - m).sum()))
