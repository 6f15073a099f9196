import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from structlm.interp import (DEFAULT_BOUNDARIES, Descriptor, DescriptorFormatError, EventCounts,
                             InterpModel, LevelLambdas, UnknownSymbolError, collect_counts,
                             default_lambdas, em_lambdas)

from conftest import fixture_path

BIG = 10000000


def single_bucket(order, lam):
    return [LevelLambdas([0, BIG], [1.0, lam]) for _ in range(order + 1)]


def test_collect_counts_tally():
    c = collect_counts([("a", ("x", "y"))] * 3)
    assert c.table[("a", ("x", "y"))] == 3
    assert c.marginal(2)[1][("x", "y")] == 3


def test_fractional_weights_add():
    c = collect_counts([("a", ("x",))] * 4, [0.25] * 4)
    assert c.table[("a", ("x",))] == pytest.approx(1.0)


def test_marginalization():
    c = collect_counts([("a", ("x", "y")), ("a", ("x", "z")), ("b", ("x", "y"))])
    joint, ctx = c.marginal(1)
    assert joint[("a", ("x",))] == 2 and ctx[("x",)] == 3


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        collect_counts([("a", ("x",))], [-1.0])


def test_context_arity_checked():
    c = EventCounts(2)
    with pytest.raises(ValueError):
        c.add("a", ("x",))


def test_two_level_recursion():
    c = collect_counts([("a", ("x",))] * 3 + [("b", ("x",))])
    m = InterpModel(c, single_bucket(1, 0.5), ["a", "b"])
    assert m.prob("a", ("x",)) == pytest.approx(0.6875, abs=1e-15)


def test_all_lambdas_one_is_uniform():
    c = collect_counts([("a", ("x",))] * 3 + [("b", ("y",))])
    m = InterpModel(c, single_bucket(1, 1.0), ["a", "b", "c"])
    for u in "abc":
        assert m.prob(u, ("x",)) == pytest.approx(1 / 3)


def test_zero_lambda_is_relative_frequency():
    c = collect_counts([("a", ("x",))] * 3 + [("b", ("x",))])
    m = InterpModel(c, single_bucket(1, 0.0), ["a", "b", "c"])
    assert m.prob("a", ("x",)) == pytest.approx(0.75)
    assert m.prob("c", ("x",)) == 0.0 or m.prob("c", ("x",)) < 1e-15


def test_unknown_symbol():
    m = InterpModel(collect_counts([("a", ("x",))]), default_lambdas(1), ["a", "b"])
    with pytest.raises(UnknownSymbolError):
        m.prob("zzz", ("x",))


def test_backoff_key_is_prefix():
    c = collect_counts([("a", ("x", "y"))] * 5 + [("b", ("q", "y"))])
    m = InterpModel(c, single_bucket(2, 0.5), ["a", "b"])
    # dropping right to left: an unseen (x, z) still sees the seen order-1 context (x,)
    assert ("x",) in m.ctx_total[1] and ("y",) not in m.ctx_total[1]
    assert m.prob("a", ("x", "z")) > m.prob("a", ("q", "z"))


def test_zero_count_bucket_pinned():
    lev = LevelLambdas(list(DEFAULT_BOUNDARIES), [0.3] * len(DEFAULT_BOUNDARIES))
    assert lev.lam(0) == 1.0
    assert lev.bucket(1) == 1 and lev.bucket(1.5) == 2 and lev.bucket(2) == 2
    assert lev.bucket(5e7) == len(DEFAULT_BOUNDARIES) - 1


@pytest.mark.parametrize("bad", [([0, 2, 1], [1, 0.5, 0.5]), ([1, 2], [1, 0.5]), ([0, 1], [1, 1.5])])
def test_bucket_validation(bad):
    with pytest.raises(ValueError):
        LevelLambdas(*bad)


events_st = st.lists(st.tuples(st.sampled_from("abcd"), st.sampled_from("xyz"), st.sampled_from("pq"),
                               st.floats(0.1, 5.0)), min_size=1, max_size=30)


@settings(max_examples=80, deadline=None)
@given(events_st, st.lists(st.floats(0.0, 1.0), min_size=6, max_size=6),
       st.sampled_from("xyzw"), st.sampled_from("pqr"))
def test_distribution_normalized(events, lams, z1, z2):
    c = EventCounts(2)
    for u, a, b, w in events:
        c.add(u, (a, b), w)
    lambdas = [LevelLambdas([0, 2, BIG], [1.0, lams[2 * k], lams[2 * k + 1]]) for k in range(3)]
    alphabet = list("abcde")
    m = InterpModel(c, lambdas, alphabet)
    ps = [m.prob(u, (z1, z2)) for u in alphabet]
    assert sum(ps) == pytest.approx(1.0, abs=1e-9)
    assert np.allclose(m.distribution((z1, z2)), ps, atol=1e-15)
    if all(l > 1e-3 for l in lams):
        assert min(ps) > 0


def _cv_ll(dev, cv, lambdas, alphabet):
    m = InterpModel(dev, lambdas, alphabet)
    return sum(w * m.logprob(u, ctx) for (u, ctx), w in cv.items())


def test_em_matches_grid_search():
    # 2-symbol alphabet, order 0, single bucket: cv log-likelihood is concave in lambda
    dev = collect_counts([("a", ())] * 9 + [("b", ())])
    cv = collect_counts([("a", ())] * 6 + [("b", ())] * 4)
    lambdas, rep = em_lambdas(dev, cv, single_bucket(0, 0.5), 500, ["a", "b"])
    grid = np.linspace(0, 1, 100001)
    ll = [6 * math.log(g * 0.5 + (1 - g) * 0.9) + 4 * math.log(g * 0.5 + (1 - g) * 0.1) for g in grid]
    best = grid[int(np.argmax(ll))]
    assert lambdas[0].lambdas[1] == pytest.approx(best, abs=1e-4)
    hist = rep.history[0]
    assert all(b >= a - 1e-12 * abs(a) for a, b in zip(hist, hist[1:]))


def test_em_rich_counts_favor_relative_frequency():
    dev = collect_counts([("a", ("x",))] * 50 + [("b", ("x",))] * 2 + [("b", ("y",))] * 50)
    cv = collect_counts([("a", ("x",))] * 20)
    start = single_bucket(1, 0.5)
    seq = []
    for it in range(1, 6):
        lam, _ = em_lambdas(dev, cv, start, it, ["a", "b"])
        seq.append(lam[1].lambdas[1])
    assert all(b < a for a, b in zip([0.5] + seq, seq))


def test_em_unseen_context_goes_to_backoff():
    dev = collect_counts([("a", ("x",))] * 5 + [("b", ("y",))] * 5)
    cv = collect_counts([("b", ("x",))] * 5 + [("a", ("y",))] * 5)
    lam, _ = em_lambdas(dev, cv, single_bucket(1, 0.5), 50, ["a", "b"])
    assert lam[1].lambdas[1] > 0.99


def test_em_same_data_drives_lambda_to_zero():
    dev = collect_counts([("a", ("x",))] * 5 + [("b", ("y",))] * 5)
    lam, _ = em_lambdas(dev, dev, single_bucket(1, 0.5), 200, ["a", "b"])
    assert lam[1].lambdas[1] < 0.01


def test_em_zero_iterations_noop():
    dev = collect_counts([("a", ("x",))] * 5)
    start = default_lambdas(1)
    lam, _ = em_lambdas(dev, dev, start, 0, ["a", "b"])
    assert [l.lambdas for l in lam] == [l.lambdas for l in start]


def test_em_empty_bucket_keeps_initial():
    dev = collect_counts([("a", ("x",))] * 3 + [("b", ("y",))] * 100)
    cv = collect_counts([("a", ("y",))] * 4)
    lam, _ = em_lambdas(dev, cv, default_lambdas(1), 10, ["a", "b"])
    b3 = lam[1].bucket(3)
    assert lam[1].lambdas[b3] == 0.5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_em_cv_loglik_monotone(seed):
    rng = np.random.default_rng(seed)
    alphabet = list("abcd")

    def sample(n):
        c = EventCounts(2)
        for _ in range(n):
            z = (str(rng.integers(3)), str(rng.integers(3)))
            u = alphabet[min(int(rng.geometric(0.5)) - 1 + int(z[0]), 3)]
            c.add(u, z)
        return c
    dev, cv = sample(100), sample(60)
    lam, rep = em_lambdas(dev, cv, default_lambdas(2), 15, alphabet)
    for hist in rep.history:
        assert all(b >= a - 1e-12 * abs(a) for a, b in zip(hist, hist[1:]))
    assert rep.history[-1][-1] == pytest.approx(_cv_ll(dev, cv, lam, alphabet), rel=1e-12)
    assert all(0 <= x <= 1 for l in lam for x in l.lambdas)


def test_sample_descriptor_levels():
    d = Descriptor.read(fixture_path("sample.desc"))
    assert d.max_order == 4 and d.no_iterations_at_read_in == 100
    assert [len(l.lambdas) for l in d.levels] == [2, 13, 13, 13, 13]
    assert d.levels[1].lambdas[:3] == [1.0, 0.5, 0.5]
    assert d.levels[1].boundaries[-1] == BIG


def test_descriptor_arity_error():
    text = ("Stats_Del_Int::lambdas_level.0 = 13:__1" + "__0.5" * 11 + " ;\n"
            "Stats_Del_Int::buckets_level.0 = 2:__0__5 ;\n")
    with pytest.raises(DescriptorFormatError):
        Descriptor.loads(text)


def test_descriptor_round_trip(tmp_path):
    d = Descriptor.read(fixture_path("sample.desc"))
    p = tmp_path / "a.desc"
    d.write(p)
    d2 = Descriptor.read(p)
    assert d2 == d
    assert d2.dumps() == d.dumps()


def test_counts_file_round_trip(tmp_path):
    c = collect_counts([("a", ("x", "y")), ("b", ("x", "z"))], [1.5, 2.0])
    p = tmp_path / "c.counts"
    c.write(p)
    assert dict(EventCounts.read(p).table) == dict(c.table)
