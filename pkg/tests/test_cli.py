import io
import os

import pytest

from structlm.cli import main
from structlm.lattice import Lattice
from structlm.treebank import read_trees

from conftest import fixture_path


def run(*argv):
    out = io.StringIO()
    try:
        code = main([str(a) for a in argv], out)
    except SystemExit as exc:
        code = exc.code
    return code, out.getvalue()


def metrics(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("synth", "treebank", "--n", 60, "--seed", 3, "--out", d / "toy.mrg")[0] == 0
    code, out = run("preprocess", d / "toy.mrg")
    assert code == 0
    code, out = run("init-slm", d / "toy.bin.trees", "--model-dir", d / "m", "--em-iters", 3)
    assert code == 0, out
    trees = read_trees(d / "toy.bin.trees")
    with open(d / "test.txt", "w") as fh:
        for t in trees[:4]:
            fh.write(" ".join(t.words()[1:-1]) + "\n")
    return d


def test_preprocess_outputs(work):
    assert (work / "toy.bin.trees").exists() and (work / "toy.deriv").exists()
    assert len(read_trees(work / "toy.bin.trees")) == 60


def test_preprocess_vinken(tmp_path):
    code, out = run("preprocess", fixture_path("pierre_vinken.mrg"), "--out-prefix", tmp_path / "pv")
    assert code == 0 and metrics(out)["trees"] == "1"
    assert "years" in (tmp_path / "pv.bin.trees").read_text()


def test_init_slm_writes_model(work):
    names = set(os.listdir(work / "m"))
    assert {"trigram.desc", "trigram.counts"} <= names
    assert any(n.endswith(".desc") and n != "trigram.desc" for n in names)


def test_ppl_fields(work):
    code, out = run("ppl", work / "test.txt", "--model-dir", work / "m", "--depth")
    m = metrics(out)
    assert code == 0
    for k in ("L2R-PPL", "TOP-PPL", "BOT-PPL", "SUM-PPL", "expected_depth"):
        assert float(m[k]) > 0
    code, out = run("ppl", work / "test.txt", "--model-dir", work / "m", "--variant", "L2R",
                    "--lambda", "0.36")
    m = metrics(out)
    assert code == 0 and "TOP-PPL" not in m and "3gram-PPL" in m


def test_ppl_deterministic_and_jobs_ordered(work):
    a = run("ppl", work / "test.txt", "--model-dir", work / "m")[1]
    b = run("ppl", work / "test.txt", "--model-dir", work / "m")[1]
    c = run("ppl", work / "test.txt", "--model-dir", work / "m", "--jobs", 2)[1]
    assert a == b == c


def test_parse_jobs_ordering(work):
    a = run("parse", work / "test.txt", "--model-dir", work / "m")[1]
    b = run("parse", work / "test.txt", "--model-dir", work / "m", "--jobs", 2)[1]
    assert a == b and len(a.splitlines()) == 4


def test_train_slm_stages(work):
    code, out = run("train-slm", work / "test.txt", "--model-dir", work / "m", "--out-dir", work / "m1",
                    "--iters", 2, "--frozen", "--stack-depth", 3)
    assert code == 0
    ll = [float(v) for k, v in (l.split("=", 1) for l in out.splitlines()) if k == "LN"]
    assert len(ll) == 3  # the starting point plus one line per iteration
    assert all(b >= a - 1e-6 for a, b in zip(ll, ll[1:]))
    code, out = run("train-slm", work / "test.txt", "--model-dir", work / "m1", "--out-dir", work / "m2",
                    "--stage", 2, "--iters", 1, "--stack-depth", 3)
    assert code == 0 and "L2R_LL" in out
    assert run("ppl", work / "test.txt", "--model-dir", work / "m2")[0] == 0


def test_rescore_viterbi_split(tmp_path):
    table = tmp_path / "split.txt"
    table.write_text("don't do n't\n")
    code, out = run("rescore", fixture_path("diamond.slmlat"), "--mode", "viterbi",
                    "--split-table", table)
    assert code == 0
    m = metrics(out)
    lat = Lattice.read(fixture_path("diamond.slmlat"))
    best = max(lat.paths(), key=lambda p: sum(lat.links[i].am + 16 * lat.links[i].ng for i in p))
    assert m["words"] == " ".join(lat.words(best))


def test_rescore_astar_and_wer(work, tmp_path):
    code, out = run("synth", "lattices", "--n", 3, "--seed", 1, "--out", tmp_path / "lats",
                    "--vocab", "the,dog,cat,a")
    assert code == 0
    lats = sorted(str(p) for p in (tmp_path / "lats").iterdir())
    refs = tmp_path / "refs.txt"
    refs.write_text("the dog\nthe cat\na dog\n")
    code, out = run("rescore", *lats, "--model-dir", work / "m", "--lm", "trigram", "--lambda", 0.5,
                    "--log-comp", 10, "--nbest", 3, "--refs", refs)
    assert code == 0, out
    assert out.count("rank=") == 3 and "WER=" in out
    a = run("rescore", *lats, "--jobs", 2)[1]
    b = run("rescore", *lats)[1]
    assert a == b and [metrics(l)["lattice"] for l in a.splitlines() if l.startswith("lattice=")] == \
        [os.path.basename(p) for p in lats]


def test_wer_command(tmp_path):
    (tmp_path / "h").write_text("UPSTATE NEW YORK SOMEWHERE UH ALL ALL THE HUGE AREAS\n")
    (tmp_path / "r").write_text("UP UPSTATE NEW YORK SOMEWHERE UH OVER OVER HUGE AREAS\n")
    code, out = run("wer", tmp_path / "h", tmp_path / "r")
    assert code == 0 and float(metrics(out)["WER"]) == pytest.approx(0.4)


def test_exit_codes(tmp_path, work):
    assert run("ppl", "--bogus-flag")[0] == 1
    assert run("rescore", fixture_path("diamond.slmlat"), "--fudge", 2)[0] == 1
    assert run("rescore", fixture_path("diamond.slmlat"), "--mode", "viterbi", "--lambda", 0.5)[0] == 1
    assert run("ppl", work / "test.txt", "--model-dir", work / "m", "--lambda", 1.5)[0] == 1
    assert run("ppl", tmp_path / "missing.txt", "--model-dir", work / "m")[0] == 2
    assert run("ppl", work / "test.txt", "--model-dir", tmp_path / "nomodel")[0] == 2
    bad = tmp_path / "bad.slmlat"
    bad.write_text("SLMLAT 1\nNODES 1\n")
    assert run("rescore", bad)[0] == 2
