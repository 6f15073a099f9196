"""Deleted-interpolation conditional models P(u | z1..zn).

The estimate at order k mixes the order k-1 estimate with the order-k
relative frequency::

    P_k(u|z1..zk) = lam(C(z1..zk)) * P_{k-1}(u|z1..zk-1) + (1 - lam) * f_k(u|z1..zk)

bottoming out in the uniform distribution over the predicted alphabet.
Context elements are dropped right to left when backing off, so the order-k
lookup key is always the k-element prefix of the full context.
"""

import logging
import math
import re
from bisect import bisect_left
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .symbols import fmt_num

log = logging.getLogger(__name__)

DEFAULT_BOUNDARIES = (0, 1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 10000000)
PRUNE_BELOW = 1e-12


class UnknownSymbolError(KeyError):
    pass


class DescriptorFormatError(ValueError):
    pass


class EventCounts:
    """Real-valued joint counts C(u, z1..zn) at the maximal order n."""

    def __init__(self, order, table=None):
        self.order = order
        self.table = defaultdict(float)
        if table:
            for (u, ctx), c in table.items():
                self.add(u, ctx, c)

    def add(self, u, ctx, weight=1.0):
        if weight < 0:
            raise ValueError(f"negative event weight {weight}")
        ctx = tuple(ctx)
        if len(ctx) != self.order:
            raise ValueError(f"context {ctx} has {len(ctx)} elements, expected {self.order}")
        self.table[(u, ctx)] += weight

    def update(self, other):
        for (u, ctx), c in other.table.items():
            self.table[(u, ctx)] += c

    def __len__(self):
        return len(self.table)

    def items(self):
        return self.table.items()

    def total(self):
        return sum(self.table.values())

    def marginal(self, k):
        """Joint counts C(u, z1..zk) and context counts C(z1..zk) at order k."""
        joint = defaultdict(float)
        ctx_tot = defaultdict(float)
        for (u, ctx), c in self.table.items():
            key = ctx[:k]
            joint[(u, key)] += c
            ctx_tot[key] += c
        return joint, ctx_tot

    def type_census(self):
        """Number of distinct (u, z1..zk) events at each order k = 0..n."""
        return [len(self.marginal(k)[0]) for k in range(self.order + 1)]

    def pruned(self, threshold=PRUNE_BELOW):
        out = EventCounts(self.order)
        for key, c in self.table.items():
            if c >= threshold:
                out.table[key] = c
        return out

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for (u, ctx), c in sorted(self.table.items()):
                fh.write("\t".join((fmt_num(c), u) + ctx) + "\n")

    @classmethod
    def read(cls, path, order=None):
        counts = None
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) < 2:
                    raise ValueError(f"{path}:{lineno}: expected count TAB u TAB z...")
                if counts is None:
                    counts = cls(order if order is not None else len(parts) - 2)
                counts.add(parts[1], parts[2:], float(parts[0]))
        return counts if counts is not None else cls(order or 0)


@dataclass
class LevelLambdas:
    """Bucket boundaries and tied lambdas for one order.

    Bucket 0 holds contexts with zero count; bucket i > 0 holds counts in
    (boundaries[i-1], boundaries[i]]; counts past the last boundary fall in
    the last bucket.
    """

    boundaries: list
    lambdas: list

    def __post_init__(self):
        if len(self.boundaries) != len(self.lambdas):
            raise ValueError("one lambda per bucket required")
        if any(b >= c for b, c in zip(self.boundaries, self.boundaries[1:])):
            raise ValueError("bucket boundaries must be strictly increasing")
        if self.boundaries and self.boundaries[0] != 0:
            raise ValueError("first bucket boundary must be 0")
        if any(not 0.0 <= lam <= 1.0 for lam in self.lambdas):
            raise ValueError("lambdas must lie in [0, 1]")

    def bucket(self, count):
        if count <= 0:
            return 0
        return min(bisect_left(self.boundaries, count), len(self.boundaries) - 1)

    def lam(self, count):
        if count <= 0:
            return 1.0
        return self.lambdas[self.bucket(count)]


def default_lambdas(order, boundaries=DEFAULT_BOUNDARIES, init=0.5):
    levels = []
    for _ in range(order + 1):
        levels.append(LevelLambdas(list(boundaries), [1.0] + [init] * (len(boundaries) - 1)))
    return levels


class InterpModel:
    """Smoothed conditional model built from development counts and lambdas."""

    def __init__(self, counts, lambdas, alphabet, tying=None):
        self.order = counts.order
        if len(lambdas) != self.order + 1:
            raise ValueError(f"need {self.order + 1} lambda levels, got {len(lambdas)}")
        self.counts = counts
        self.lambdas = lambdas
        self.alphabet = list(alphabet)
        self.index = {u: i for i, u in enumerate(self.alphabet)}
        if len(self.index) != len(self.alphabet):
            raise ValueError("duplicate symbols in alphabet")
        for (u, _), _c in counts.items():
            if u not in self.index:
                raise UnknownSymbolError(u)
        self.uniform = 1.0 / len(self.alphabet)
        self.joint = []
        self.ctx_total = []
        self.rows = []
        for k in range(self.order + 1):
            joint, ctx_tot = counts.marginal(k)
            rows = defaultdict(list)
            for (u, key), c in joint.items():
                rows[key].append((self.index[u], c))
            self.joint.append(dict(joint))
            self.ctx_total.append(dict(ctx_tot))
            self.rows.append(dict(rows))
        # counts that pick each context's lambda bucket; defaults to the counts themselves
        self.tying = tying
        self._tie = [tying.marginal(k)[1] for k in range(self.order + 1)] if tying is not None else None
        self._cache = {}

    def with_counts(self, counts):
        """Same lambdas, alphabet and bucket tying, new development counts."""
        return InterpModel(counts, self.lambdas, self.alphabet, self.tying)

    def with_lambdas(self, lambdas):
        return InterpModel(self.counts, lambdas, self.alphabet, self.tying)

    def with_tying(self, tying):
        """Bucket contexts by the counts in `tying` (None: by the model's own counts)."""
        return InterpModel(self.counts, self.lambdas, self.alphabet, tying)

    def _lam(self, k, sub, c):
        if self._tie is not None:
            c = self._tie[k].get(sub, c)
        return self.lambdas[k].lam(c)

    def level_probs(self, u, ctx):
        """[P_{-1}, P_0, ..., P_n] for u in context ctx."""
        out = [self.uniform]
        p = self.uniform
        for k in range(self.order + 1):
            key = ctx[:k]
            c = self.ctx_total[k].get(key, 0.0)
            if c > 0:
                lam = self._lam(k, key, c)
                p = lam * p + (1.0 - lam) * self.joint[k].get((u, key), 0.0) / c
            out.append(p)
        return out

    def prob(self, u, ctx):
        key = (u, ctx)
        p = self._cache.get(key)
        if p is not None:
            return p
        if u not in self.index:
            raise UnknownSymbolError(u)
        if len(ctx) != self.order:
            raise ValueError(f"context {ctx} has {len(ctx)} elements, expected {self.order}")
        p = self.uniform
        for k in range(self.order + 1):
            sub = ctx[:k]
            c = self.ctx_total[k].get(sub, 0.0)
            if c > 0:
                lam = self._lam(k, sub, c)
                p = lam * p + (1.0 - lam) * self.joint[k].get((u, sub), 0.0) / c
        self._cache[key] = p
        return p

    def logprob(self, u, ctx):
        return math.log(self.prob(u, ctx))

    def distribution(self, ctx):
        """Vector of P(u | ctx) over the alphabet, in alphabet order."""
        p = np.full(len(self.alphabet), self.uniform)
        for k in range(self.order + 1):
            sub = ctx[:k]
            c = self.ctx_total[k].get(sub, 0.0)
            if c <= 0:
                continue
            lam = self._lam(k, sub, c)
            p *= lam
            for i, cu in self.rows[k].get(sub, ()):
                p[i] += (1.0 - lam) * cu / c
        return p


def collect_counts(events, weights=None, order=None):
    """Tally (u, context) events into EventCounts, weight 1 unless given."""
    counts = None
    if weights is None:
        weights = [1.0] * len(events)
    if len(weights) != len(events):
        raise ValueError("one weight per event required")
    for (u, ctx), w in zip(events, weights):
        if counts is None:
            counts = EventCounts(order if order is not None else len(ctx))
        counts.add(u, ctx, w)
    if counts is None:
        counts = EventCounts(order or 0)
    return counts


@dataclass
class EmReport:
    # history[k] holds the cross-validation log-likelihood of the order-k
    # estimate before each iteration plus once after the last one
    history: list = field(default_factory=list)


def em_lambdas(dev, cv, lambdas, iterations, alphabet):
    """Estimate tied lambdas on cross-validation counts, one order at a time.

    Buckets are indexed by development context counts. Returns the new
    per-level lambdas and an EmReport.
    """
    lambdas = [LevelLambdas(list(l.boundaries), list(l.lambdas)) for l in lambdas]
    model = InterpModel(dev, lambdas, alphabet)
    report = EmReport()
    events = [(u, ctx, c) for (u, ctx), c in cv.items() if c > 0]
    for u, _, _ in events:
        if u not in model.index:
            raise UnknownSymbolError(u)
    weight = np.array([c for _, _, c in events], dtype=float)
    lower = np.full(len(events), model.uniform)
    for k in range(dev.order + 1):
        level = lambdas[k]
        nb = len(level.lambdas)
        f = np.zeros(len(events))
        bucket = np.zeros(len(events), dtype=int)
        for i, (u, ctx, _) in enumerate(events):
            sub = ctx[:k]
            c = model.ctx_total[k].get(sub, 0.0)
            bucket[i] = level.bucket(c)
            if c > 0:
                f[i] = model.joint[k].get((u, sub), 0.0) / c
        lam = np.array(level.lambdas, dtype=float)
        lam[0] = 1.0
        den = np.bincount(bucket, weights=weight, minlength=nb)
        hist = []
        for _ in range(iterations):
            lb = lam[bucket]
            mix = lb * lower + (1.0 - lb) * f
            hist.append(float(np.dot(weight, np.log(mix))))
            num = np.bincount(bucket, weights=weight * lb * lower / mix, minlength=nb)
            seen = den > 0
            lam[seen] = num[seen] / den[seen]
            lam[0] = 1.0
            np.clip(lam, 0.0, 1.0, out=lam)
        lb = lam[bucket]
        mix = lb * lower + (1.0 - lb) * f
        hist.append(float(np.dot(weight, np.log(mix))) if len(events) else 0.0)
        report.history.append(hist)
        level.lambdas = [float(x) for x in lam]
        lower = mix
    return lambdas, report


# ---------------------------------------------------------------------------
# descriptor files

_PREFIX = "Stats_Del_Int::"
_LEVEL_KEY = re.compile(r"(lambdas|buckets)_level\.(\d+)$")


@dataclass
class Descriptor:
    main_counts_file: str = ""
    held_counts_file: str = ""
    max_order: int = 0
    no_iterations: int = 0
    no_iterations_at_read_in: int = 0
    predicted_vocabulary_chunk: int = 0
    prob_epsilon: float = 1e-07
    levels: list = field(default_factory=list)

    def dumps(self):
        out = ["## Stats_Del_Int descriptor file"]
        fields_ = [
            ("_main_counts_file", self.main_counts_file),
            ("_held_counts_file", self.held_counts_file),
            ("_max_order", str(self.max_order)),
            ("_no_iterations", str(self.no_iterations)),
            ("_no_iterations_at_read_in", str(self.no_iterations_at_read_in)),
            ("_predicted_vocabulary_chunk", str(self.predicted_vocabulary_chunk)),
            ("_prob_Epsilon", fmt_num(self.prob_epsilon)),
        ]
        for name, value in fields_:
            out.append(f"{_PREFIX}{name} = {value} ;")
        for k, level in enumerate(self.levels):
            out.append("")
            out.append(f"{_PREFIX}lambdas_level.{k} = {_fmt_list(level.lambdas)} ;")
            out.append(f"{_PREFIX}buckets_level.{k} = {_fmt_list(level.boundaries)} ;")
        return "\n".join(out) + "\n"

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text):
        body = "\n".join(l for l in text.splitlines() if not l.lstrip().startswith("##"))
        desc = cls()
        lam_lists, bucket_lists = {}, {}
        for stmt in body.split(";"):
            stmt = stmt.strip()
            if not stmt:
                continue
            name, eq, payload = stmt.partition("=")
            if not eq:
                raise DescriptorFormatError(f"expected 'name = payload' in {stmt!r}")
            name = name.strip()
            payload = "".join(payload.split())
            if name.startswith(_PREFIX):
                name = name[len(_PREFIX):]
            m = _LEVEL_KEY.match(name)
            if m:
                target = lam_lists if m.group(1) == "lambdas" else bucket_lists
                target[int(m.group(2))] = _parse_list(payload, name)
                continue
            if name == "_main_counts_file":
                desc.main_counts_file = payload
            elif name == "_held_counts_file":
                desc.held_counts_file = payload
            elif name == "_max_order":
                desc.max_order = int(payload)
            elif name == "_no_iterations":
                desc.no_iterations = int(payload)
            elif name == "_no_iterations_at_read_in":
                desc.no_iterations_at_read_in = int(payload)
            elif name == "_predicted_vocabulary_chunk":
                desc.predicted_vocabulary_chunk = int(payload)
            elif name == "_prob_Epsilon":
                desc.prob_epsilon = float(payload)
            else:
                log.warning("ignoring unknown descriptor key %s", name)
        if set(lam_lists) != set(bucket_lists):
            raise DescriptorFormatError("every level needs both lambdas and buckets")
        if sorted(lam_lists) != list(range(len(lam_lists))):
            raise DescriptorFormatError("levels must be numbered 0..n without gaps")
        for k in range(len(lam_lists)):
            lams, bounds = lam_lists[k], bucket_lists[k]
            if len(lams) != len(bounds):
                raise DescriptorFormatError(f"level {k}: {len(lams)} lambdas but {len(bounds)} buckets")
            try:
                desc.levels.append(LevelLambdas(bounds, lams))
            except ValueError as exc:
                raise DescriptorFormatError(f"level {k}: {exc}") from None
        return desc

    @classmethod
    def read(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


def _fmt_list(values):
    return f"{len(values)}:" + "".join("__" + fmt_num(v) for v in values)


def _parse_list(payload, name):
    head, sep, rest = payload.partition(":")
    if not sep:
        raise DescriptorFormatError(f"{name}: expected 'N:__v1__v2...'")
    try:
        declared = int(head)
        values = [float(v) for v in rest.split("__") if v != ""]
    except ValueError:
        raise DescriptorFormatError(f"{name}: malformed value list {payload!r}") from None
    if declared != len(values):
        raise DescriptorFormatError(f"{name}: declared {declared} values, found {len(values)}")
    return values
