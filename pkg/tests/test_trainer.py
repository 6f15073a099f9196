import math
from collections import Counter

import numpy as np
import pytest

from structlm import symbols as S
from structlm.decoder import SearchParams
from structlm.interp import Descriptor, LevelLambdas
from structlm.synthetic import right_branching_parse
from structlm.slm import tree_to_derivation
from structlm.trainer import (accumulate, derivation_counts, em_on_parse_sets, frozen_stacks,
                              init_from_treebank, l2r_predictor_reestimation, map_tree_words,
                              nbest_em_iteration, nbest_parse_sets)


def _multiset(counts):
    return {k: v for k, v in counts.table.items() if v > 0}


def test_single_tree_counts_equal_derivation(toy_split):
    tree = toy_split[0][3]
    model, _ = init_from_treebank([tree], check=[], em_iterations=0)
    d = tree_to_derivation(tree)
    for comp, attr in ((S.PREDICTOR, "predictor"), (S.TAGGER, "tagger"), (S.PARSER, "parser")):
        expect = Counter((e.u, e.context) for e in d if e.component == comp and not e.forced)
        assert _multiset(getattr(model, attr).counts) == dict(expect)


def test_same_dev_and_check_drives_lambda_to_zero(toy_split):
    trees = toy_split[0][:60]
    model, _ = init_from_treebank(trees, check=trees, em_iterations=60)
    top = model.predictor.lambdas[-1]
    used = {top.bucket(c) for c in model.predictor.ctx_total[4].values()}
    # where the max-order estimate and the back-off coincide the likelihood is flat in lambda
    assert all(top.lambdas[b] <= 0.5 for b in used)
    assert all(top.lambdas[top.bucket(c)] < 1e-3 for c in (1, 2, 4))


def test_dev_derivations_have_finite_logp(toy_model, toy_split):
    vocab = toy_model.words
    for t in toy_split[0][:30]:
        lp = toy_model.joint_logprob(tree_to_derivation(map_tree_words(t, vocab)))
        assert math.isfinite(lp)


def test_split_ratio(toy_split):
    _, rep = init_from_treebank(toy_split[0][:100], split=0.9, em_iterations=1)
    assert (rep.n_dev, rep.n_check) == (90, 10)


def test_unique_parse_is_fixed_point():
    words = ["x", "y", "z"]
    tree = right_branching_parse(words)
    model, _ = init_from_treebank([tree], check=[], em_iterations=0)
    new, rep = nbest_em_iteration(model, [words])
    assert rep.sentences == 1 and rep.posterior_sums == [pytest.approx(1.0)]
    for attr in ("predictor", "tagger", "parser"):
        assert _multiset(getattr(new, attr).counts) == _multiset(getattr(model, attr).counts)


def test_lambdas_fixed_by_iteration(toy_model, toy_test_sentences, tmp_path):
    new, _ = nbest_em_iteration(toy_model, toy_test_sentences[:5], SearchParams(max_stack_depth=3))
    for attr in ("predictor", "tagger", "parser"):
        a = Descriptor(levels=getattr(toy_model, attr).lambdas).dumps()
        b = Descriptor(levels=getattr(new, attr).lambdas).dumps()
        assert a == b


@pytest.fixture(scope="module")
def parse_sets(toy_model, toy_test_sentences):
    sents = toy_test_sentences[:20]
    return sents, nbest_parse_sets(toy_model, sents, SearchParams(max_stack_depth=4))


def test_posteriors_sum_to_one(toy_model, parse_sets):
    _, sets = parse_sets
    _, rep = accumulate(toy_model, sets)
    assert all(s == pytest.approx(1.0, abs=1e-12) for s in rep.posterior_sums)


def test_expected_predictor_count_is_length_plus_one(toy_model, parse_sets):
    sents, sets = parse_sets
    for words, derivs in zip(sents, sets):
        counts, _ = accumulate(toy_model, [derivs])
        assert counts[S.PREDICTOR].total() == pytest.approx(len(words) + 1, abs=1e-9)


def test_census_nondecreasing_in_order(toy_model, parse_sets):
    _, sets = parse_sets
    counts, _ = accumulate(toy_model, sets)
    for comp, c in counts.items():
        census = c.type_census()
        assert all(a <= b for a, b in zip(census, census[1:]))


def test_frozen_set_em_monotone(toy_model, parse_sets):
    _, sets = parse_sets
    _, reports = em_on_parse_sets(toy_model, sets, 4)
    ll = [r.log_likelihood for r in reports]
    assert all(b >= a - 1e-9 for a, b in zip(ll, ll[1:]))


def test_failed_sentences_counted(toy_model):
    _, rep = accumulate(toy_model, [[]])
    assert rep.failed == 1 and rep.sentences == 0


def test_l2r_zero_iterations_copies_predictor(toy_model, toy_test_sentences):
    model, rep = l2r_predictor_reestimation(toy_model, toy_test_sentences[:3], iterations=0)
    assert dict(model.l2r_predictor.counts.table) == dict(toy_model.predictor.counts.table)
    assert model.l2r_predictor.lambdas == toy_model.predictor.lambdas
    assert model.tagger is toy_model.tagger and model.parser is toy_model.parser
    assert len(rep.history) == 1


def test_l2r_with_single_parse_stacks_matches_stage_one(toy_model, toy_test_sentences):
    params = SearchParams(max_stack_depth=1, relative_threshold=1e-12)
    sents = toy_test_sentences[:6]
    positions = frozen_stacks(toy_model, sents, params)
    assert all(len(p) == 1 for _, p, _ in positions)
    model, _ = l2r_predictor_reestimation(toy_model, sents, params, iterations=1, positions=positions)
    sets = nbest_parse_sets(toy_model, sents, params)
    stage_one, _ = accumulate(toy_model, sets)
    a = _multiset(model.l2r_predictor.counts)
    b = _multiset(stage_one[S.PREDICTOR])
    assert a.keys() == b.keys()
    assert all(a[k] == pytest.approx(b[k], abs=1e-9) for k in a)


def test_l2r_monotone_on_two_parse_toy(toy_model, toy_test_sentences):
    # with lambda = 0 at the maximal order the predictor is a free categorical per
    # context, so C := a is the exact M-step of the mixture and EM cannot go down
    top = toy_model.predictor.lambdas[-1]
    free = LevelLambdas(list(top.boundaries), [1.0] + [0.0] * (len(top.boundaries) - 1))
    model = toy_model.replace(predictor=toy_model.predictor.with_lambdas(
        toy_model.predictor.lambdas[:-1] + [free]))
    params = SearchParams(max_stack_depth=2, relative_threshold=3.0, caches_enabled=False)
    positions = []
    for rho, prefixes, w in frozen_stacks(model, toy_test_sentences[:10], params):
        r = np.asarray(rho[:2]) / np.sum(rho[:2])
        positions.append((r, prefixes[:2], w))
    assert max(len(p) for _, p, _ in positions) == 2
    _, rep = l2r_predictor_reestimation(model, None, params, iterations=6, positions=positions)
    assert all(b >= a - 1e-9 for a, b in zip(rep.history, rep.history[1:]))


def test_derivation_counts_weights(toy_split):
    d = tree_to_derivation(toy_split[0][0])
    one = derivation_counts([d])
    half = derivation_counts([d, d], [0.25, 0.25])
    for comp in one:
        assert all(half[comp].table[k] == pytest.approx(0.5 * v) for k, v in one[comp].table.items())


def test_redecoded_iteration_reports(toy_model, toy_test_sentences):
    _, rep = nbest_em_iteration(toy_model, toy_test_sentences[:4], SearchParams(max_stack_depth=3))
    m = rep.metrics()
    assert m["sentences"] == 4 and m["LN"] < 0
    assert "types_predictor" in m


def test_vocab_mapping_uses_unk():
    m = map_tree_words(right_branching_parse(["x", "rare"]), {"x"})
    assert m.words() == [S.BOS, "x", S.UNK, S.EOS]
