import os
import random

import pytest

from structlm.synthetic import random_complete_parse, toy_treebank
from structlm.trainer import init_from_treebank
from structlm.treebank import TreePipeline, parse_bracketed

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")

TINY_V = ["a", "b", "c"]
TINY_POS = ["P", "Q"]
TINY_NT = ["M", "N"]

ACCEPTANCE = []


@pytest.fixture
def record():
    """record(label, ok, detail): one summary line per acceptance criterion."""
    def _record(label, ok, detail):
        line = f"criterion {label}: {'PASS' if ok else 'FAIL'} {detail}"
        ACCEPTANCE.append(line)
        print(line)
        assert ok, line
    return _record


def fixture_path(name):
    return os.path.join(FIXTURES, name)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    def key(line):
        label = line.split()[1].rstrip(":")
        return int(label.rstrip("ab")), label
    for line in sorted(ACCEPTANCE, key=key):
        terminalreporter.write_line(line)


def tiny_trees(seed=0, n=40, max_len=4):
    rng = random.Random(seed)
    return [random_complete_parse([rng.choice(TINY_V) for _ in range(rng.randint(1, max_len))],
                                  TINY_POS, TINY_NT, rng) for _ in range(n)]


@pytest.fixture(scope="session")
def tiny_model():
    """|V|=3, |POS|=2, |NT|=2 model trained on random machine-generated parses."""
    model, _ = init_from_treebank(tiny_trees(), em_iterations=5)
    return model


def toy_trees(n, seed):
    pipe = TreePipeline()
    return [pipe(r) for txt in toy_treebank(n, seed) for r in parse_bracketed(txt)]


@pytest.fixture(scope="session")
def toy_split():
    trees = toy_trees(300, seed=11)
    return trees[:250], trees[250:]


@pytest.fixture(scope="session")
def toy_model(toy_split):
    model, _ = init_from_treebank(toy_split[0], em_iterations=10)
    return model


@pytest.fixture(scope="session")
def toy_test_sentences(toy_split):
    return [t.words()[1:-1] for t in toy_split[1]]
