"""Word lattices and their rescoring.

Path score of a link sequence l_1..l_n::

    f = sum_i [am_i + lm_weight * logP_LM(w_i | w_1..w_i-1) - log_ip]

A* ranks partial paths by g = f + h_L(end node), where h_L is a Viterbi
backward pass over n-gram link scores inflated by log_comp per link (plus
log_final once per non-empty suffix). With h_L an overestimate of the
rescoring LM's best completion the first complete path popped is optimal.

All scores are natural logs.
"""

import heapq
import math
from collections import defaultdict
from dataclasses import dataclass, field
from itertools import count

import numpy as np

from . import symbols as S
from .symbols import fmt_num


class LatticeFormatError(ValueError):
    pass


class AStarFailure(RuntimeError):
    pass


@dataclass
class Link:
    start: str
    end: str
    word: str
    am: float
    ng: float
    joined: str = None  # set on the second half of a split link: the original word


class Lattice:
    def __init__(self, nodes, links, start, end):
        self.nodes = dict(nodes)
        self.links = dict(links)
        self.start = start
        self.end = end
        self.validate()
        self.out_links = defaultdict(list)
        self.in_links = defaultdict(list)
        for lid, l in self.links.items():
            self.out_links[l.start].append(lid)
            self.in_links[l.end].append(lid)
        self.order = self._topological_order()

    def validate(self):
        if self.start not in self.nodes or self.end not in self.nodes:
            raise LatticeFormatError("START/END must name existing nodes")
        seen = set()
        has_in, has_out = set(), set()
        for lid, l in self.links.items():
            for n in (l.start, l.end):
                if n not in self.nodes:
                    raise LatticeFormatError(f"link {lid} references unknown node {n}")
            if self.nodes[l.end] < self.nodes[l.start]:
                raise LatticeFormatError(f"link {lid} ends before it starts")
            ident = (l.word, l.start, l.end)
            if ident in seen:
                raise LatticeFormatError(f"duplicate link {ident}")
            seen.add(ident)
            has_out.add(l.start)
            has_in.add(l.end)
        for n in self.nodes:
            if n != self.start and n not in has_in:
                raise LatticeFormatError(f"node {n} has no incoming link: multiple start nodes")
            if n != self.end and n not in has_out:
                raise LatticeFormatError(f"node {n} has no outgoing link: multiple end nodes")
        if self.start in has_in:
            raise LatticeFormatError("start node has incoming links")
        if self.end in has_out:
            raise LatticeFormatError("end node has outgoing links")

    def _topological_order(self):
        indeg = {n: len(self.in_links[n]) for n in self.nodes}
        ready = [n for n in self.nodes if indeg[n] == 0]
        order = []
        while ready:
            n = ready.pop()
            order.append(n)
            for lid in self.out_links[n]:
                m = self.links[lid].end
                indeg[m] -= 1
                if indeg[m] == 0:
                    ready.append(m)
        if len(order) != len(self.nodes):
            raise LatticeFormatError("lattice contains a cycle")
        return order

    def next_words(self, node):
        """W_L: the words on links leaving node."""
        return sorted({self.links[lid].word for lid in self.out_links[node]})

    def paths(self):
        """Every complete path as a list of link ids (exponential; tests only)."""
        def walk(n):
            if n == self.end:
                yield []
                return
            for lid in self.out_links[n]:
                for rest in walk(self.links[lid].end):
                    yield [lid] + rest
        return list(walk(self.start))

    def words(self, path):
        return [self.links[lid].word for lid in path]

    # -- text format ------------------------------------------------------------

    def dumps(self):
        out = ["SLMLAT 1", f"NODES {len(self.nodes)}"]
        for n, t in self.nodes.items():
            out.append(f"{n} {fmt_num(t)}")
        out.append(f"LINKS {len(self.links)}")
        for lid, l in self.links.items():
            row = f"{lid} {l.start} {l.end} {l.word} {fmt_num(l.am)} {fmt_num(l.ng)}"
            if l.joined is not None:
                row += f" {l.joined}"
            out.append(row)
        out.append(f"START {self.start}")
        out.append(f"END {self.end}")
        return "\n".join(out) + "\n"

    @classmethod
    def loads(cls, text):
        lines = [l.split() for l in text.splitlines() if l.strip()]
        pos = 0

        def take():
            nonlocal pos
            if pos >= len(lines):
                raise LatticeFormatError("unexpected end of lattice file")
            pos += 1
            return lines[pos - 1]

        if take() != ["SLMLAT", "1"]:
            raise LatticeFormatError("missing 'SLMLAT 1' header")
        try:
            head = take()
            if head[0] != "NODES":
                raise LatticeFormatError("expected NODES")
            nodes = {}
            for _ in range(int(head[1])):
                row = take()
                if row[0] in nodes:
                    raise LatticeFormatError(f"duplicate node id {row[0]}")
                nodes[row[0]] = float(row[1])
            head = take()
            if head[0] != "LINKS":
                raise LatticeFormatError("expected LINKS")
            links = {}
            for _ in range(int(head[1])):
                row = take()
                if len(row) not in (6, 7):
                    raise LatticeFormatError(f"bad link line {' '.join(row)}")
                links[row[0]] = Link(row[1], row[2], row[3], float(row[4]), float(row[5]),
                                     row[6] if len(row) == 7 else None)
            start, end = take(), take()
            if start[0] != "START" or end[0] != "END":
                raise LatticeFormatError("expected START and END lines")
        except (IndexError, ValueError) as exc:
            if isinstance(exc, LatticeFormatError):
                raise
            raise LatticeFormatError(f"malformed lattice: {exc}") from None
        if pos != len(lines):
            raise LatticeFormatError("trailing content after END")
        return cls(nodes, links, start[1], end[1])

    @classmethod
    def read(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    def split_partner(self, lid):
        """For the first half of a split link, the id of its second half."""
        l = self.links[lid]
        outs = self.out_links[l.end]
        if len(outs) == 1 and len(self.in_links[l.end]) == 1:
            nxt = self.links[outs[0]]
            if nxt.joined is not None:
                return outs[0]
        return None


def split_links(lattice, table):
    """Replace links whose word is in table by two links through a new node.

    The original scores move to the second link; the first gets zeros. The
    new node takes the original end time.
    """
    nodes = dict(lattice.nodes)
    links = {}
    fresh = count()
    for lid, l in lattice.links.items():
        if l.word not in table:
            links[lid] = l
            continue
        left, right = table[l.word]
        mid = f"{l.end}.s{next(fresh)}"
        while mid in nodes:
            mid = f"{l.end}.s{next(fresh)}"
        nodes[mid] = lattice.nodes[l.end]
        links[f"{lid}a"] = Link(l.start, mid, left, 0.0, 0.0)
        links[f"{lid}b"] = Link(mid, l.end, right, l.am, l.ng, l.word)
    return Lattice(nodes, links, lattice.start, lattice.end)


# ---------------------------------------------------------------------------
# language models over lattice links


@dataclass
class RescoreParams:
    lm_weight: float = 16.0
    log_ip: float = 0.0
    log_comp: float = 0.5
    log_final: float = 0.0
    stack_depth: int = None
    stack_logp: float = math.inf
    lam: float = 1.0  # weight of the lattice n-gram in split-aware interpolation

    def __post_init__(self):
        if self.lm_weight <= 0 or self.log_ip < 0 or self.log_comp < 0 or self.log_final < 0:
            raise ValueError("lm_weight must be > 0; log_ip, log_comp, log_final >= 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("interpolation weight must lie in [0, 1]")


class LatticeNgram:
    """The n-gram scores stored on the links."""

    def start(self):
        return None

    def score(self, lattice, state, lid):
        return lattice.links[lid].ng, state


class TrigramLM:
    """Word LM interface over a trigram InterpModel with context (w-1, w-2)."""

    def __init__(self, model):
        self.model = model
        self.words = set(model.alphabet)

    def start(self):
        return (S.BOS, S.PAD)

    def prob(self, state, word):
        w = word if word in self.words else S.UNK
        return self.model.prob(w, state)

    def advance(self, state, word):
        w = word if word in self.words else S.UNK
        return (w, state[0])

    def distribution(self, state):
        return self.model.distribution(state)


class SlmLM:
    """Word LM interface over the SLM decoder: the state is the stack set S_k."""

    def __init__(self, decoder):
        self.decoder = decoder

    def start(self):
        return self.decoder.initial()

    def prob(self, state, word):
        return self.decoder.word_prob(state, self.decoder.model.map_word(word))

    def advance(self, state, word):
        return self.decoder.extend_with_fallback(state, self.decoder.model.map_word(word))


class InterpolatedLM:
    """lam * P_lattice + (1 - lam) * P_new, two-step over split links.

    For a split pair the new LM predicts both halves in turn and the product
    is mixed with the lattice probability of the joined word, all credited
    to the second link.
    """

    def __init__(self, lm, lam):
        self.lm = lm
        self.lam = lam

    def start(self):
        return (self.lm.start(), None)

    def score(self, lattice, state, lid):
        lm_state, pending = state
        link = lattice.links[lid]
        if pending is None and lattice.split_partner(lid) is not None:
            return 0.0, (lm_state, link.word)
        if self.lam == 1.0:
            return link.ng, (lm_state, None)
        else:
            if pending is not None:
                p_new = self.lm.prob(lm_state, pending)
                mid = self.lm.advance(lm_state, pending)
                p_new *= self.lm.prob(mid, link.word)
                nxt = self.lm.advance(mid, link.word)
            else:
                p_new = self.lm.prob(lm_state, link.word)
                nxt = self.lm.advance(lm_state, link.word)
            if self.lam == 0.0:
                lp = math.log(p_new)
            else:
                lp = math.log(self.lam * math.exp(link.ng) + (1.0 - self.lam) * p_new)
        return lp, (nxt, None)


def link_cost(link, lm_logp, params):
    return link.am + params.lm_weight * lm_logp - params.log_ip


def path_score(lattice, path, lm, params):
    state = lm.start()
    total = 0.0
    for lid in path:
        lp, state = lm.score(lattice, state, lid)
        total += link_cost(lattice.links[lid], lp, params)
    return total


def viterbi_best(lattice, params, link_lm=None):
    """Best path under link-local LM scores (n-gram link score by default)."""
    link_lm = link_lm or (lambda link: link.ng)
    best = {lattice.start: (0.0, None)}
    for n in lattice.order:
        if n not in best:
            continue
        base = best[n][0]
        for lid in lattice.out_links[n]:
            link = lattice.links[lid]
            s = base + link_cost(link, link_lm(link), params)
            if link.end not in best or s > best[link.end][0]:
                best[link.end] = (s, lid)
    path = []
    n = lattice.end
    while n != lattice.start:
        lid = best[n][1]
        path.append(lid)
        n = lattice.links[lid].start
    return list(reversed(path)), best[lattice.end][0]


def viterbi_expanded(lattice, lm, params):
    """Exact best path for an LM with hashable finite-history states
    (n-gram style): dynamic programming over (node, LM state)."""
    table = {lattice.start: {lm.start(): (0.0, None)}}
    for n in lattice.order:
        for state, (base, _) in list(table.get(n, {}).items()):
            for lid in lattice.out_links[n]:
                link = lattice.links[lid]
                lp, nxt = lm.score(lattice, state, lid)
                s = base + link_cost(link, lp, params)
                cell = table.setdefault(link.end, {})
                if nxt not in cell or s > cell[nxt][0]:
                    cell[nxt] = (s, (n, state, lid))
    end = table[lattice.end]
    state = max(end, key=lambda k: end[k][0])
    best = end[state][0]
    path = []
    node = lattice.end
    while node != lattice.start:
        prev_node, prev_state, lid = table[node][state][1]
        path.append(lid)
        node, state = prev_node, prev_state
    return list(reversed(path)), best


def compute_hL(lattice, params):
    """Overestimate of the best completion score from every node."""
    raw = {lattice.end: 0.0}
    for n in reversed(lattice.order):
        if n == lattice.end:
            continue
        vals = []
        for lid in lattice.out_links[n]:
            link = lattice.links[lid]
            vals.append(link.am + params.lm_weight * (link.ng + params.log_comp) - params.log_ip
                        + raw[link.end])
        raw[n] = max(vals)
    return {n: (v if n == lattice.end else v + params.lm_weight * params.log_final)
            for n, v in raw.items()}


@dataclass
class AStarResult:
    path: list
    score: float
    steps: int
    max_stack: int
    stack: list = field(default_factory=list)  # remaining entries when search stopped
    complete: list = field(default_factory=list)  # complete paths in pop order (N-best)


class _Entry:
    __slots__ = ("g", "f", "path", "node", "state", "seq")

    def __init__(self, g, f, path, node, state, seq):
        self.g, self.f, self.path, self.node, self.state, self.seq = g, f, path, node, state, seq

    def __lt__(self, other):
        return (-self.g, self.seq) < (-other.g, other.seq)


def astar_decode(lattice, lm, params, heuristic=None, nbest=1):
    """A* over partial paths; stops after popping `nbest` complete paths.

    heuristic: node -> h value; None means compute_hL, "infinite" makes every
    incomplete prefix outrank every complete path.
    """
    if heuristic is None:
        h = compute_hL(lattice, params)
    elif heuristic == "infinite":
        h = {n: (0.0 if n == lattice.end else math.inf) for n in lattice.nodes}
    else:
        h = heuristic
    seq = count()
    stack = [_Entry(h[lattice.start], 0.0, (), lattice.start, lm.start(), next(seq))]
    steps = 0
    max_stack = 1
    done = []
    while stack:
        top = heapq.heappop(stack)
        if top.node == lattice.end:
            done.append((top.path, top.f))
            if len(done) >= nbest:
                break
            continue
        steps += 1
        for lid in lattice.out_links[top.node]:
            link = lattice.links[lid]
            lp, st = lm.score(lattice, top.state, lid)
            f = top.f + link_cost(link, lp, params)
            if f == -math.inf:
                continue  # zero LM probability: the prefix can never complete
            heapq.heappush(stack, _Entry(f + h[link.end], f, top.path + (lid,), link.end, st, next(seq)))
        stack = _prune(stack, params)
        max_stack = max(max_stack, len(stack))
    if not done:
        raise AStarFailure("stack exhausted before any complete path")
    path, score = done[0]
    return AStarResult(list(path), score, steps, max_stack, sorted(stack), done)


def _prune(stack, params):
    limit = params.stack_depth
    if limit is None and math.isinf(params.stack_logp):
        return stack
    entries = sorted(stack)
    if limit is not None:
        entries = entries[:limit]
    if entries and not math.isinf(params.stack_logp) and not math.isinf(entries[0].g):
        top = entries[0].g
        entries = [e for e in entries if top - e.g <= params.stack_logp]
    heapq.heapify(entries)
    return entries


@dataclass
class RankReport:
    rank: int
    matched: bool
    classification: str  # "match", "prefix-in-stack" or "prefix-lost"
    samples: int


def nbest_sample_and_rank(lattice, lm, params, n, astar=None, tol=1e-9):
    """Rank the A* output among N-best n-gram paths rescored by f.

    A miss is classified prefix-in-stack when some prefix of the best
    rescored sample is still live in the final A* stack (insufficient
    compensation) and prefix-lost when it was pruned away (search width).
    """
    astar = astar or astar_decode(lattice, lm, params)
    ng_params = RescoreParams(params.lm_weight, params.log_ip, 0.0, 0.0, lam=1.0)
    samples = astar_decode(lattice, LatticeNgram(), ng_params, nbest=n).complete
    scored = [(path_score(lattice, list(p), lm, params), tuple(p)) for p, _ in samples]
    f_star = astar.score
    rank = sum(1 for s, _ in scored if s > f_star + tol)
    if rank == 0:
        return RankReport(0, True, "match", len(scored))
    best_path = max(scored, key=lambda x: x[0])[1]
    live = {e.path for e in astar.stack}
    in_stack = any(best_path[:i] in live for i in range(len(best_path) + 1))
    return RankReport(rank, False, "prefix-in-stack" if in_stack else "prefix-lost", len(scored))


# ---------------------------------------------------------------------------
# peeking at the lattice while predicting with the SLM


class PeekingSlm:
    """SLM scoring that uses the words leaving the current lattice node.

    peek: restrict S_k to the best parse for each candidate next word.
    peek-prune: as peek, and keep only those parses going forward.
    normalized: alpha(w) = max_T P(w|T) rho(T), renormalized over the
    candidate words and scaled by the n-gram mass of the candidates.
    """

    MODES = ("peek", "peek-prune", "normalized")

    def __init__(self, decoder, mode, trigram=None, lam=0.0):
        if mode not in self.MODES:
            raise ValueError(f"unknown peeking mode {mode}")
        if mode == "normalized" and trigram is None:
            raise ValueError("normalized peeking needs an n-gram model")
        self.decoder = decoder
        self.mode = mode
        self.trigram = trigram
        self.lam = lam

    def start(self):
        tri = self.trigram.start() if self.trigram is not None else None
        return (self.decoder.initial(), tri)

    def word_prob(self, slm_state, word, candidates, tri_state=None):
        return peek_prob(self.decoder, slm_state, word, candidates, self.mode,
                         self.trigram, tri_state)[0]

    def score(self, lattice, state, lid):
        slm_state, tri_state = state
        link = lattice.links[lid]
        cands = lattice.next_words(link.start)
        model = self.decoder.model
        word = model.map_word(link.word)
        p, kept = peek_prob(self.decoder, slm_state, word, [model.map_word(c) for c in cands],
                            self.mode, self.trigram, tri_state)
        if self.lam > 0.0:
            p = self.lam * math.exp(link.ng) + (1.0 - self.lam) * p
        base = slm_state
        if self.mode == "peek-prune":
            base = type(slm_state)(slm_state.position, kept, slm_state.words)
        nxt = self.decoder.extend_with_fallback(base, word)
        tri_next = self.trigram.advance(tri_state, link.word) if self.trigram is not None else None
        return math.log(p), (nxt, tri_next)


def peek_prob(decoder, state, word, candidates, mode, trigram=None, tri_state=None):
    """Returns (probability, selected hypotheses)."""
    model = decoder.model
    rho = state.rho()
    hyps = state.hyps
    cand = list(dict.fromkeys(candidates))
    if word not in cand:
        cand.append(word)
    table = np.array([[r * model.l2r_prob(w, h.prefix) for w in cand] for r, h in zip(rho, hyps)])
    best_rows = table.argmax(axis=0)
    if mode == "normalized":
        alpha = table.max(axis=0)
        mass = sum(trigram.prob(tri_state, w) for w in cand)
        p = alpha[cand.index(word)] / alpha.sum() * mass
        return float(p), hyps
    keep = sorted(set(int(i) for i in best_rows))
    sel = [hyps[i] for i in keep]
    r = rho[keep]
    r = r / r.sum()
    p = sum(ri * model.l2r_prob(word, h.prefix) for ri, h in zip(r, sel))
    return float(p), sel
