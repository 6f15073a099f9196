"""Synthetic data: a toy treebank grammar, random parses and random lattices."""

import random

from . import symbols as S
from .slm import (FIRST, FREE, AFTER_NT, FORCED_NULL, FORCED_TOP_PRIME, apply_action, choice_class,
                  finish_prefix, initial_prefix, shift)
from .treebank import join, leaf, unary_node

# head -> dependents: verbs select their objects, so headwords carry
# information a trigram window often misses
_ANIMATE = ["dog", "cat", "man", "woman", "bird"]
_FOOD = ["apple", "bread", "fish"]
_PLACE = ["park", "house", "garden"]
_OBJECTS = {
    "saw": _ANIMATE, "chased": _ANIMATE, "liked": _ANIMATE,
    "ate": _FOOD, "cooked": _FOOD,
}
_BARE = {"see": _ANIMATE, "eat": _FOOD}
_INTRANS = ["slept", "ran"]
_ADJ = ["big", "small", "red", "old"]
_DET = ["the", "a"]
_PREP = ["in", "near"]
_NAMES = ["john", "mary"]


def _np(rng, nouns, allow_pp=True, depth=0):
    r = rng.random()
    if r < 0.15 and nouns is _ANIMATE:
        return f"(NNP {rng.choice(_NAMES)})"
    parts = [f"(DT {rng.choice(_DET)})"]
    if rng.random() < 0.35:
        parts.append(f"(JJ {rng.choice(_ADJ)})")
    parts.append(f"(NN {rng.choice(nouns)})")
    np_ = "(NP " + " ".join(parts) + ")"
    if allow_pp and depth < 1 and rng.random() < 0.2:
        np_ = f"(NP {np_} {_pp(rng, depth + 1)})"
    return np_


def _pp(rng, depth=0):
    return f"(PP (IN {rng.choice(_PREP)}) {_np(rng, _PLACE, depth=depth + 1)})"


def _vp(rng):
    r = rng.random()
    if r < 0.55:
        verb = rng.choice(sorted(_OBJECTS))
        vp = f"(VP (VBD {verb}) {_np(rng, _OBJECTS[verb])}"
    elif r < 0.75:
        verb = rng.choice(sorted(_BARE))
        inner = f"(VP (VB {verb}) {_np(rng, _BARE[verb])})"
        return f"(VP (MD will) {inner})"
    else:
        vp = f"(VP (VBD {rng.choice(_INTRANS)})"
    if rng.random() < 0.3:
        vp += " " + _pp(rng)
    return vp + ")"


def toy_sentence_tree(rng):
    return f"( (S {_np(rng, _ANIMATE)} {_vp(rng)} (. .)) )"


def toy_treebank(n, seed=0):
    """n bracketed trees from a small head-driven grammar."""
    rng = random.Random(seed)
    return [toy_sentence_tree(rng) for _ in range(n)]


def right_branching_parse(words, tag="X"):
    """Every word its own exposed head until </s> closes them right to left."""
    n = len(words)
    leaves = [leaf(w, tag, i + 1) for i, w in enumerate(words)]
    cur = leaf(S.EOS, S.SE, n + 1)
    for lf in reversed(leaves):
        cur = join(S.TOP_PRIME, lf, cur, 1)
    return join(S.TOP, leaf(S.BOS, S.SB, 0), cur, 1)


def random_complete_parse(words, pos_tags, nt_labels, rng, p_null=0.5):
    """Sample a complete parse by running the shift-reduce machine randomly."""
    prefix = initial_prefix()
    for w in words:
        prefix = shift(prefix, w, rng.choice(pos_tags))
        while True:
            cls = choice_class(prefix)
            if cls == FORCED_NULL or rng.random() < p_null:
                break
            choices = []
            if cls in (FREE, FIRST):
                choices += [S.unary(l) for l in nt_labels]
            if cls in (FREE, AFTER_NT):
                choices += [S.adjoin_left(l) for l in nt_labels] + [S.adjoin_right(l) for l in nt_labels]
            prefix = apply_action(prefix, rng.choice(choices))
    prefix = shift(prefix, S.EOS, S.SE)
    while choice_class(prefix) == FORCED_TOP_PRIME:
        prefix = apply_action(prefix, S.adjoin_right(S.TOP_PRIME))
    return finish_prefix(prefix).stack[0]


def enumerate_complete_parses(words, pos_tags, nt_labels):
    """Every complete parse of words: all forests of binary trees over every
    tagging, optional unary over each leaf, all labels and head choices.

    Built structurally, without the shift-reduce machine.
    """
    n = len(words)
    options = []
    for i, w in enumerate(words):
        opts = []
        for t in pos_tags:
            lf = leaf(w, t, i + 1)
            opts.append(lf)
            opts.extend(unary_node(l, lf) for l in nt_labels)
        options.append(opts)
    memo = {}

    def trees(i, j):
        if (i, j) in memo:
            return memo[(i, j)]
        if i == j:
            out = options[i]
        else:
            out = []
            for s in range(i, j):
                for l in trees(i, s):
                    for r in trees(s + 1, j):
                        for label in nt_labels:
                            out.append(join(label, l, r, 0))
                            out.append(join(label, l, r, 1))
        memo[(i, j)] = out
        return out

    def forests(i):
        if i == n:
            yield []
            return
        for e in range(i, n):
            for t in trees(i, e):
                for rest in forests(e + 1):
                    yield [t] + rest

    bos, eos = leaf(S.BOS, S.SB, 0), leaf(S.EOS, S.SE, n + 1)
    for forest in forests(0):
        cur = eos
        for t in reversed(forest):
            cur = join(S.TOP_PRIME, t, cur, 1)
        yield join(S.TOP, bos, cur, 1)


def random_lattice(rng, vocab, max_links=12, min_nodes=3, max_nodes=6):
    """Random DAG lattice with a unique start and end node."""
    from .lattice import Lattice, Link

    m = rng.randint(min_nodes, max_nodes)
    times = sorted(round(rng.uniform(0, 5), 2) for _ in range(m))
    times[0] = 0.0
    nodes = {str(i): times[i] for i in range(m)}
    pairs = {(i, i + 1) for i in range(m - 1)}
    extra = rng.randint(0, max(0, max_links - len(pairs)))
    candidates = [(i, j) for i in range(m) for j in range(i + 1, m)]
    links = []
    used = set()
    for i, j in sorted(pairs):
        links.append((i, j))
    for _ in range(extra):
        links.append(rng.choice(candidates))
    out = {}
    for lid, (i, j) in enumerate(links[:max_links]):
        for _ in range(10):
            w = rng.choice(vocab)
            if (w, i, j) not in used:
                break
        else:
            continue
        used.add((w, i, j))
        out[str(lid)] = Link(str(i), str(j), w, round(rng.uniform(-8.0, -1.0), 3),
                             round(rng.uniform(-4.0, -0.2), 3))
    return Lattice(nodes, out, "0", str(m - 1))


def markov_corpus(rng, vocab, n_words, mean_len=6, branching=3):
    """Sentences from a random sparse bigram process over vocab, ~n_words tokens."""
    succ = {w: rng.sample(vocab, min(branching, len(vocab))) for w in [S.BOS] + list(vocab)}
    out, total = [], 0
    while total < n_words:
        n = max(1, min(n_words - total, int(rng.expovariate(1.0 / mean_len)) + 1))
        prev, sent = S.BOS, []
        for _ in range(n):
            prev = rng.choice(succ[prev]) if rng.random() < 0.8 else rng.choice(vocab)
            sent.append(prev)
        out.append(sent)
        total += n
    return out


def trigram_reduced_slm(dev, check, vocab, em_iterations=20):
    """An SLM whose word process is exactly a deleted-interpolation trigram.

    Every training tree is right-branching over a single tag, so the parser
    can only ever move null; the predictor's lambdas at the two levels that
    add the constant tags are pinned to 1 and the remaining levels take the
    trigram's lambdas. Returns (slm, trigram).
    """
    from .evaluation import build_trigram
    from .interp import LevelLambdas
    from .trainer import init_from_treebank

    trigram = build_trigram(dev, check, vocab, em_iterations)
    trees = [right_branching_parse(s) for s in dev]
    model, _ = init_from_treebank(trees, check=[], vocab=vocab, em_iterations=0)
    tri = trigram.lambdas
    passthrough = LevelLambdas(list(tri[0].boundaries), [1.0] * len(tri[0].boundaries))
    levels = [tri[0], passthrough, tri[1], passthrough, tri[2]]
    return model.replace(predictor=model.predictor.with_lambdas(levels)), trigram
