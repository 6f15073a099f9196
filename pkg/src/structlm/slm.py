"""The structured language model: word-parse prefixes and the three components.

A prefix is a stack of exposed heads, each the root of a completed binary
subtree, with (<s>, SB) at the bottom. Generation alternates a
WORD-PREDICTOR step, a TAGGER step and a sequence of PARSER moves ending in
null; after </s> is generated the remaining heads are forced together under
TOP' and finally attached to <s> under TOP.
"""

import math
import os
from collections import defaultdict
from dataclasses import dataclass

from . import symbols as S
from .interp import EventCounts, Descriptor, InterpModel
from .treebank import join, leaf, unary_node


class InvalidParseError(ValueError):
    pass


class IllegalActionError(ValueError):
    pass


PAD_HEAD = leaf(S.PAD, S.PAD, -1)

# parser choice classes; FORCED_* states have a single legal move
FREE = "free"          # h0 leaf, h-1 a real head: unary, adjoins, null
AFTER_NT = "nt"        # h0 non-leaf, h-1 a real head: adjoins, null
FIRST = "first"        # h0 leaf over <s>: unary, null
FORCED_NULL = "forced-null"
FORCED_TOP_PRIME = "forced-top-prime"


@dataclass(frozen=True, slots=True)
class Prefix:
    """Word-parse prefix W_k T_k: exposed-head subtrees, bottom first."""

    stack: tuple
    position: int = 0

    @property
    def h0(self):
        return self.stack[-1]

    @property
    def h1(self):
        return self.stack[-2] if len(self.stack) > 1 else PAD_HEAD

    def exposed_heads(self):
        return [(n.head_word, n.label, n.is_leaf) for n in reversed(self.stack)]

    def is_complete(self):
        return len(self.stack) == 1 and self.stack[0].label == S.TOP


def initial_prefix():
    return Prefix((leaf(S.BOS, S.SB, 0),), 0)


def choice_class(prefix):
    st = prefix.stack
    h0 = st[-1]
    h1 = st[-2] if len(st) > 1 else PAD_HEAD
    if h1.head_word == S.BOS:
        if h0.is_leaf and h0.head_word != S.EOS:
            return FIRST
        return FORCED_NULL
    if h1 is PAD_HEAD:
        return FORCED_NULL
    if h0.head_word == S.EOS:
        return FORCED_TOP_PRIME
    return FREE if h0.is_leaf else AFTER_NT


def shift(prefix, word, tag):
    return Prefix(prefix.stack + (leaf(word, tag, prefix.position + 1),), prefix.position + 1)


def apply_action(prefix, action):
    """Apply a parser move. null leaves the prefix unchanged."""
    cls = choice_class(prefix)
    if action == S.NULL:
        if cls == FORCED_TOP_PRIME:
            raise IllegalActionError("null is not legal while </s> awaits TOP'")
        return prefix
    kind, label = S.split_action(action)
    if cls == FORCED_NULL:
        raise IllegalActionError(f"{action} not legal: only null is allowed here")
    if cls == FORCED_TOP_PRIME and action != S.adjoin_right(S.TOP_PRIME):
        raise IllegalActionError(f"{action} not legal: expected {S.adjoin_right(S.TOP_PRIME)}")
    if kind == S.UNARY:
        if cls not in (FREE, FIRST):
            raise IllegalActionError("unary is only legal over a leaf")
        return Prefix(prefix.stack[:-1] + (unary_node(label, prefix.h0),), prefix.position)
    if cls == FIRST:
        raise IllegalActionError("cannot adjoin with <s>")
    origin = 0 if kind == S.ADJOIN_LEFT else 1
    node = join(label, prefix.h1, prefix.h0, origin)
    return Prefix(prefix.stack[:-2] + (node,), prefix.position)


def finish_prefix(prefix):
    """The final forced (adjoin-right, TOP) over (<s>, (</s>, TOP'))."""
    if len(prefix.stack) != 2 or prefix.h0.head_word != S.EOS or prefix.h0.label != S.TOP_PRIME:
        raise IllegalActionError("final TOP adjoin needs the stack (<s>, (</s>, TOP'))")
    node = join(S.TOP, prefix.h1, prefix.h0, 1)
    return Prefix((node,), prefix.position)


def predictor_context(prefix):
    h0, h1 = prefix.h0, prefix.h1
    return (h0.label, h0.head_word, h1.label, h1.head_word)


def tagger_context(word, prefix):
    return (word, prefix.h0.label, prefix.h1.label)


def parser_context(prefix):
    h0, h1 = prefix.h0, prefix.h1
    return (h0.label, h1.label, h0.head_word, h1.head_word)


@dataclass(frozen=True, slots=True)
class ElementaryEvent:
    component: str
    u: str
    context: tuple
    forced: bool = False

    def format(self):
        comp = self.component + ("*" if self.forced else "")
        return "\t".join((comp, self.u) + tuple(self.context))

    @classmethod
    def parse(cls, line):
        parts = line.rstrip("\n").split("\t")
        comp = parts[0]
        forced = comp.endswith("*")
        return cls(comp.rstrip("*"), parts[1], tuple(parts[2:]), forced)


class Derivation(list):
    """Ordered elementary events of one sentence."""

    def free_events(self, component=None):
        return [e for e in self if not e.forced and (component is None or e.component == component)]

    def words(self):
        return [e.u for e in self if e.component == S.PREDICTOR]

    def dumps(self):
        return "".join(e.format() + "\n" for e in self)


def write_derivations(path, derivations):
    with open(path, "w", encoding="utf-8") as fh:
        for d in derivations:
            fh.write(d.dumps() + "\n")


def read_derivations(path):
    out, cur = [], Derivation()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                if cur:
                    out.append(cur)
                cur = Derivation()
            else:
                cur.append(ElementaryEvent.parse(line))
    if cur:
        out.append(cur)
    return out


def parser_event(prefix, action):
    cls = choice_class(prefix)
    forced = cls in (FORCED_NULL, FORCED_TOP_PRIME)
    return ElementaryEvent(S.PARSER, action, parser_context(prefix), forced)


def tree_to_derivation(tree):
    """Replay a complete parse through the shift-reduce machine.

    Raises InvalidParseError when the tree cannot be produced by the model's
    operation sequence (for instance </s> not heading TOP').
    """
    if tree.label != S.TOP or len(tree.children) != 2:
        raise InvalidParseError("complete parse must be rooted in a binary TOP node")
    leaves = tree.leaves()
    if leaves[0].head_word != S.BOS or leaves[0].label != S.SB:
        raise InvalidParseError("first leaf must be (<s>, SB)")
    if leaves[-1].head_word != S.EOS or leaves[-1].label != S.SE:
        raise InvalidParseError("last leaf must be (</s>, SE)")
    if len(leaves) < 3:
        raise InvalidParseError("empty sentence")
    parent = {}
    for node in tree.nodes():
        for c in node.children:
            parent[id(c)] = node
    deriv = Derivation()
    prefix = initial_prefix()
    for lf in leaves[1:]:
        word, tag = lf.head_word, lf.label
        deriv.append(ElementaryEvent(S.PREDICTOR, word, predictor_context(prefix)))
        deriv.append(ElementaryEvent(S.TAGGER, tag, tagger_context(word, prefix), word == S.EOS))
        prefix = Prefix(prefix.stack + (lf,), prefix.position + 1)
        while True:
            top = prefix.h0
            p = parent.get(id(top))
            if p is None or p is tree:
                break
            if len(p.children) == 1:
                action = S.unary(p.label)
            elif len(prefix.stack) >= 2 and prefix.h1 is p.children[0] and top is p.children[1]:
                action = (S.adjoin_left if p.head_origin == 0 else S.adjoin_right)(p.label)
            else:
                break
            ev = parser_event(prefix, action)
            if not ev.forced and p.label in (S.TOP, S.TOP_PRIME):
                raise InvalidParseError(f"{p.label} may only be built by the forced moves after </s>")
            deriv.append(ev)
            try:
                new = apply_action(prefix, action)
            except IllegalActionError as exc:
                raise InvalidParseError(str(exc)) from None
            # keep the tree's own node objects on the stack so parent lookups work
            prefix = Prefix(new.stack[:-1] + (p,), new.position)
        if choice_class(prefix) == FORCED_TOP_PRIME:
            raise InvalidParseError("</s> must be attached under TOP' to every remaining head")
        deriv.append(parser_event(prefix, S.NULL))
    if len(prefix.stack) != 2 or prefix.h0 is not tree.children[1] or tree.head_origin != 1:
        raise InvalidParseError("TOP must adjoin <s> to the (</s>, TOP') subtree from the right")
    if prefix.h0.label != S.TOP_PRIME:
        raise InvalidParseError("last head before TOP must be (</s>, TOP')")
    deriv.append(ElementaryEvent(S.PARSER, S.adjoin_right(S.TOP), parser_context(prefix), True))
    return deriv


def replay(derivation):
    """Rebuild the complete parse from a derivation."""
    prefix = initial_prefix()
    pending_word = None
    for ev in derivation:
        if ev.component == S.PREDICTOR:
            pending_word = ev.u
        elif ev.component == S.TAGGER:
            prefix = shift(prefix, pending_word, ev.u)
        elif ev.u == S.adjoin_right(S.TOP):
            prefix = finish_prefix(prefix)
        else:
            prefix = apply_action(prefix, ev.u)
    if not prefix.is_complete():
        raise InvalidParseError("derivation does not end in a complete parse")
    return prefix.stack[0]


# ---------------------------------------------------------------------------
# the model


class SlmModel:
    """WORD-PREDICTOR, TAGGER and PARSER plus vocabularies and search caches."""

    def __init__(self, predictor, tagger, parser, tag_cache=None, parser_cache=None,
                 l2r_predictor=None, single_root=False):
        self.predictor = predictor
        self.tagger = tagger
        self.parser = parser
        self.l2r_predictor = l2r_predictor
        self.tag_cache = tag_cache if tag_cache is not None else {}
        self.parser_cache = parser_cache if parser_cache is not None else {}
        self.single_root = single_root
        self.words = set(predictor.alphabet)
        self.pos_tags = list(tagger.alphabet)
        self.nt_labels = [a.partition(":")[2] for a in parser.alphabet if a.startswith(S.UNARY + ":")]
        self._unary_idx = [i for i, a in enumerate(parser.alphabet) if a.startswith(S.UNARY + ":")]
        self._adjoin_idx = [i for i, a in enumerate(parser.alphabet) if a.startswith("adjoin-")]
        self._norm = {}

    def replace(self, **kw):
        args = dict(predictor=self.predictor, tagger=self.tagger, parser=self.parser,
                    tag_cache=self.tag_cache, parser_cache=self.parser_cache,
                    l2r_predictor=self.l2r_predictor, single_root=self.single_root)
        args.update(kw)
        return SlmModel(**args)

    def map_word(self, w):
        return w if w in self.words else S.UNK

    # -- components --------------------------------------------------------

    def _word_prob(self, model, w, prefix):
        ctx = predictor_context(prefix)
        p = model.prob(w, ctx)
        if self.single_root:
            pe = model.prob(S.EOS, ctx)
            if prefix.h1.label != S.SB:
                return 0.0 if w == S.EOS else p / (1.0 - pe)
        return p

    def predictor_prob(self, w, prefix):
        return self._word_prob(self.predictor, w, prefix)

    def l2r_prob(self, w, prefix):
        return self._word_prob(self.l2r_predictor or self.predictor, w, prefix)

    def predictor_distribution(self, prefix, l2r=True):
        """Row P(. | prefix) over the predictor alphabet."""
        model = (self.l2r_predictor or self.predictor) if l2r else self.predictor
        p = model.distribution(predictor_context(prefix))
        if self.single_root and prefix.h1.label != S.SB:
            i = model.index[S.EOS]
            p = p / (1.0 - p[i])
            p[i] = 0.0
        return p

    def tagger_prob(self, tag, word, prefix):
        if word == S.EOS:
            return 1.0 if tag == S.SE else 0.0
        return self.tagger.prob(tag, tagger_context(word, prefix))

    def _normalizer(self, ctx, cls):
        key = (ctx, cls)
        z = self._norm.get(key)
        if z is None:
            if cls == FREE:
                z = 1.0
            else:
                dist = self.parser.distribution(ctx)
                drop = self._unary_idx if cls == AFTER_NT else self._adjoin_idx
                z = 1.0 - float(dist[drop].sum())
            self._norm[key] = z
        return z

    def action_allowed(self, action, cls):
        if cls == FORCED_NULL:
            return action == S.NULL
        if cls == FORCED_TOP_PRIME:
            return action == S.adjoin_right(S.TOP_PRIME)
        if action == S.NULL:
            return True
        kind, _ = S.split_action(action)
        if kind == S.UNARY:
            return cls in (FREE, FIRST)
        return cls in (FREE, AFTER_NT)

    def parser_prob(self, action, prefix):
        """P(action | prefix), renormalized over the moves legal in this state."""
        cls = choice_class(prefix)
        if not self.action_allowed(action, cls):
            return 0.0
        if cls in (FORCED_NULL, FORCED_TOP_PRIME):
            return 1.0
        if action not in self.parser.index:
            return 0.0  # TOP and TOP' only come from forced moves
        ctx = parser_context(prefix)
        return self.parser.prob(action, ctx) / self._normalizer(ctx, cls)

    def legal_actions(self, prefix, use_cache=False):
        """[(action, logprob)] for every legal move; [] discards the hypothesis."""
        cls = choice_class(prefix)
        if cls == FORCED_NULL:
            return [(S.NULL, 0.0)]
        if cls == FORCED_TOP_PRIME:
            return [(S.adjoin_right(S.TOP_PRIME), 0.0)]
        ctx = parser_context(prefix)
        if use_cache:
            cands = self.parser_cache.get((prefix.h0.label, prefix.h1.label))
            if not cands:
                return []
            cands = [a for a in cands if self.action_allowed(a, cls)]
        else:
            cands = [a for a in self.parser.alphabet if self.action_allowed(a, cls)]
        lz = math.log(self._normalizer(ctx, cls))
        return [(a, self.parser.logprob(a, ctx) - lz) for a in cands]

    def candidate_tags(self, word, use_cache=False):
        if word == S.EOS:
            return [S.SE]
        if use_cache and word in self.tag_cache:
            return self.tag_cache[word]
        return self.pos_tags

    # -- joint probability ----------------------------------------------------

    def joint_logprob(self, derivation, split=False):
        """ln P(W,T) of a derivation, or (predictor part, tagger+parser part)."""
        lp_pred = lp_struct = 0.0
        prefix = initial_prefix()
        pending = None
        for ev in derivation:
            if ev.component == S.PREDICTOR:
                lp_pred += math.log(self.predictor_prob(ev.u, prefix))
                pending = ev.u
            elif ev.component == S.TAGGER:
                p = self.tagger_prob(ev.u, pending, prefix)
                lp_struct += math.log(p) if p > 0 else -math.inf
                prefix = shift(prefix, pending, ev.u)
            elif ev.u == S.adjoin_right(S.TOP):
                prefix = finish_prefix(prefix)
            else:
                p = self.parser_prob(ev.u, prefix)
                lp_struct += math.log(p) if p > 0 else -math.inf
                prefix = apply_action(prefix, ev.u)
        if split:
            return lp_pred, lp_struct
        return lp_pred + lp_struct

    # -- persistence ------------------------------------------------------------

    COMPONENTS = ("predictor", "tagger", "parser", "l2r_predictor")

    def save(self, directory, iterations=0):
        os.makedirs(directory, exist_ok=True)
        for name in self.COMPONENTS:
            model = getattr(self, name)
            if model is None:
                continue
            save_interp(model, directory, name, iterations)
        _write_cache(os.path.join(directory, "tagger.cache"), self.tag_cache)
        _write_cache(os.path.join(directory, "parser.cache"),
                     {f"{a}\t{b}": v for (a, b), v in self.parser_cache.items()})
        with open(os.path.join(directory, "options"), "w", encoding="utf-8") as fh:
            fh.write(f"single_root={int(self.single_root)}\n")

    @classmethod
    def load(cls, directory):
        parts = {}
        for name in cls.COMPONENTS:
            if os.path.exists(os.path.join(directory, f"{name}.desc")):
                parts[name] = load_interp(directory, name)
        tag_cache = _read_cache(os.path.join(directory, "tagger.cache"))
        raw = _read_cache(os.path.join(directory, "parser.cache"), key_fields=2)
        single_root = False
        opt = os.path.join(directory, "options")
        if os.path.exists(opt):
            with open(opt, encoding="utf-8") as fh:
                for line in fh:
                    k, _, v = line.strip().partition("=")
                    if k == "single_root":
                        single_root = bool(int(v))
        missing = [n for n in cls.COMPONENTS[:3] if n not in parts]
        if missing:
            raise FileNotFoundError(f"no {', '.join(missing)} model in {directory}")
        return cls(parts["predictor"], parts["tagger"], parts["parser"], tag_cache, raw,
                   parts.get("l2r_predictor"), single_root)


def save_interp(model, directory, name, iterations=0):
    counts_file = f"{name}.counts"
    model.counts.write(os.path.join(directory, counts_file))
    with open(os.path.join(directory, f"{name}.vocab"), "w", encoding="utf-8") as fh:
        fh.write("".join(u + "\n" for u in model.alphabet))
    Descriptor(main_counts_file=counts_file, max_order=model.order, no_iterations=iterations,
               levels=model.lambdas).write(os.path.join(directory, f"{name}.desc"))


def load_interp(directory, name):
    desc = Descriptor.read(os.path.join(directory, f"{name}.desc"))
    with open(os.path.join(directory, f"{name}.vocab"), encoding="utf-8") as fh:
        alphabet = [l.rstrip("\n") for l in fh if l.rstrip("\n")]
    counts = EventCounts.read(os.path.join(directory, desc.main_counts_file), desc.max_order)
    return InterpModel(counts, desc.levels, alphabet)


def _write_cache(path, cache):
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(cache):
            fh.write(key + "\t" + " ".join(cache[key]) + "\n")


def _read_cache(path, key_fields=1):
    out = {}
    if not os.path.exists(path):
        return out
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) < key_fields + 1:
                continue
            key = parts[0] if key_fields == 1 else tuple(parts[:key_fields])
            out[key] = parts[key_fields].split()
    return out


def build_caches(derivations):
    """Tags seen per word and free parser moves seen per (h0.tag, h-1.tag)."""
    tags = defaultdict(set)
    moves = defaultdict(set)
    for d in derivations:
        for ev in d:
            if ev.forced:
                continue
            if ev.component == S.TAGGER:
                tags[ev.context[0]].add(ev.u)
            elif ev.component == S.PARSER:
                moves[(ev.context[0], ev.context[1])].add(ev.u)
    return ({w: sorted(t) for w, t in tags.items()},
            {k: sorted(v) for k, v in moves.items()})
