import csv
import hashlib
import io

import numpy as np
import pytest

from vectorkv import cli
from vectorkv.formats import read_dump, read_models


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def corpus(tmp_path):
    dump = tmp_path / "d.veca"
    model = tmp_path / "m.vecm"
    assert cli.main(["synth", "--out", str(dump), "--sequences", "12", "--seq-len", "256", "--seed", "3"]) == 0
    assert cli.main(["calibrate", "--dump", str(dump), "--out", str(model)]) == 0
    return dump, model


def _rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_synth_header_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["synth", "--sequences", "3", "--seq-len", "40", "--layers", "2", "--seed", "9"]
    assert cli.main(args + ["--out", str(a)]) == 0
    assert cli.main(args + ["--out", str(b)]) == 0
    assert _sha(a) == _sha(b)
    d = read_dump(a)
    assert len(d) == 2
    assert [(l.d_k, l.d_v, l.n) for l in d.layers] == [(16, 16, 120)] * 2
    assert d.layers[0].positions.tolist() == list(range(40)) * 3


def test_synth_empty_corpus(tmp_path, capsys):
    assert cli.main(["synth", "--out", str(tmp_path / "x"), "--sequences", "0"]) == 2
    assert "empty corpus" in capsys.readouterr().err


def test_calibrate_noiseless(tmp_path, capsys):
    dump, model = tmp_path / "d", tmp_path / "m"
    cli.main(["synth", "--out", str(dump), "--sequences", "8", "--seq-len", "128", "--sigma", "0"])
    capsys.readouterr()
    assert cli.main(["calibrate", "--dump", str(dump), "--out", str(model)]) == 0
    out = capsys.readouterr().out
    mean = float(out.strip().splitlines()[-1].split("=")[1])
    assert mean >= 0.999


def test_calibrate_determinism_and_vtok_shape(corpus, tmp_path):
    dump, model = corpus
    again = tmp_path / "again"
    cli.main(["calibrate", "--dump", str(dump), "--out", str(again)])
    assert _sha(model) == _sha(again)
    vt = tmp_path / "vt"
    assert cli.main(["calibrate", "--dump", str(dump), "--out", str(vt), "--direction", "vtok", "--d-k", "16"]) == 0
    m = read_models(vt)[0]
    assert m.direction == "vtok" and m.W.shape == (16, 16)


def test_calibrate_singular_at_zero_ridge(tmp_path):
    dump = tmp_path / "d"
    cli.main(["synth", "--out", str(dump), "--sequences", "4", "--seq-len", "64", "--sigma", "0"])
    assert cli.main(["calibrate", "--dump", str(dump), "--out", str(tmp_path / "m"), "--ridge", "0"]) == 1


def test_evaluate_schema_and_rows(corpus, tmp_path):
    dump, model = corpus
    out = tmp_path / "e.csv"
    assert cli.main(["evaluate", "--dump", str(dump), "--model", str(model), "--out", str(out)]) == 0
    rows = _rows(out.read_text())
    assert list(rows[0].keys()) == list(cli.EVALUATE_COLUMNS)
    assert len(rows) == 12
    assert {r["variant"] for r in rows} == {"vector", "binary", "k-only"}
    pa = {r["p_c"]: r["p_a"] for r in rows if r["variant"] == "vector"}
    assert pa == {"0.25": "0.125", "0.5": "0.25", "0.75": "0.125", "0.9": "0.05"}


def test_evaluate_zero_compression(corpus, tmp_path):
    dump, model = corpus
    out = tmp_path / "e.csv"
    assert cli.main(["evaluate", "--dump", str(dump), "--model", str(model), "--pc", "0", "--out", str(out)]) == 0
    assert all(float(r["mse"]) == 0.0 for r in _rows(out.read_text()))


def test_evaluate_errors(corpus, tmp_path):
    dump, model = corpus
    assert cli.main(["evaluate", "--dump", str(dump), "--model", str(model), "--pa", "0.4"]) == 2
    small = tmp_path / "small"
    cli.main(["synth", "--out", str(small), "--sequences", "2", "--seq-len", "64", "--d-k", "8", "--rank", "4"])
    assert cli.main(["evaluate", "--dump", str(small), "--model", str(model)]) == 2
    assert cli.main(["evaluate", "--dump", str(tmp_path / "missing"), "--model", str(model)]) == 3
    (tmp_path / "junk").write_bytes(b"VECA junk")
    assert cli.main(["evaluate", "--dump", str(tmp_path / "junk"), "--model", str(model)]) == 3


def test_sweep_rows(corpus, tmp_path):
    dump, model = corpus
    out = tmp_path / "s.csv"
    assert cli.main(["sweep", "--dump", str(dump), "--model", str(model), "--out", str(out)]) == 0
    rows = _rows(out.read_text())
    assert [r["p_a"] for r in rows] == ["0.0", "0.05", "0.1", "0.15", "0.2", "0.25"]
    assert list(rows[0].keys()) == list(cli.SWEEP_COLUMNS)
    assert cli.main(["sweep", "--dump", str(dump), "--model", str(model), "--pa-grid", "0,0.125",
                     "--out", str(out)]) == 0
    rows = _rows(out.read_text())
    assert [r["deploy"] for r in rows] == ["false", "true"]


def test_sweep_zero_equals_binary(corpus, tmp_path):
    dump, model = corpus
    s, e = tmp_path / "s.csv", tmp_path / "e.csv"
    cli.main(["sweep", "--dump", str(dump), "--model", str(model), "--pa-grid", "0", "--out", str(s)])
    cli.main(["evaluate", "--dump", str(dump), "--model", str(model), "--pc", "0.75", "--out", str(e)])
    (row,) = _rows(s.read_text())
    binary = [r for r in _rows(e.read_text()) if r["variant"] == "binary"][0]
    assert row["mse"] == binary["mse"] and row["E"] == binary["E"]


def test_sweep_invalid_grid(corpus):
    dump, model = corpus
    assert cli.main(["sweep", "--dump", str(dump), "--model", str(model), "--pa-grid", "0.3"]) == 2
    assert cli.main(["sweep", "--dump", str(dump), "--model", str(model), "--pc", "0.5,0.75"]) == 2


def test_theory_output(tmp_path):
    out = tmp_path / "t.csv"
    code = cli.main(["theory", "--seed", "0", "--out", str(out)])
    rows = _rows(out.read_text())
    by_check = {}
    for r in rows:
        by_check.setdefault(r["check"], []).append(r)
    assert all(r["pass"] == "true" for c in ("gaussian_one_minus_r2", "truncated_second_moment", "threshold")
               for r in by_check[c])
    thresholds = [float(r["value"]) for r in by_check["threshold"]]
    assert thresholds == [1 / 1.1, 2 / 3, 0.5]
    assert code == (0 if all(r["pass"] == "true" for r in rows) else 1)
    again = tmp_path / "t2.csv"
    cli.main(["theory", "--seed", "0", "--out", str(again)])
    assert out.read_bytes() == again.read_bytes()


def test_config_file_and_override(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# toy corpus\nseed = 4\nsequences = 2\nseq-len = 30\n")
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["synth", "--config", str(conf), "--out", str(a)]) == 0
    assert read_dump(a).layers[0].n == 60
    assert cli.main(["synth", "--config", str(conf), "--seq-len", "10", "--out", str(b)]) == 0
    assert read_dump(b).layers[0].n == 20
    conf.write_text("bogus = 1\n")
    assert cli.main(["synth", "--config", str(conf), "--out", str(a)]) == 2


def test_usage_errors(tmp_path):
    assert cli.main([]) == 2
    assert cli.main(["synth", "--out", str(tmp_path / "x"), "--scorer", "nope"]) == 2
    assert cli.main(["synth", "--out", str(tmp_path / "x"), "--seed", "abc"]) == 2
    assert cli.main(["calibrate", "--dump", str(tmp_path / "x")]) == 2
    assert cli.main(["synth", "--out", str(tmp_path / "x"), "--direction", "up"]) == 2


def test_default_pa_grid():
    assert cli.default_pa_grid(0.75) == (0.0, 0.05, 0.1, 0.15, 0.2, 0.25)
    assert cli.default_pa_grid(0.25) == (0.0, 0.05, 0.1, 0.15, 0.2, 0.25)
    assert cli.default_pa_grid(0.9)[-1] == 0.1


def test_last_sequence():
    assert cli.last_sequence(np.array([0, 1, 2, 0, 1, 0, 1, 2, 3])).tolist() == [5, 6, 7, 8]
    assert cli.last_sequence(np.arange(4)).tolist() == [0, 1, 2, 3]


def test_plan_csv_rows():
    from vectorkv.allocator import memory_report, route_with_config
    from vectorkv.core import CompressionConfig

    plan = route_with_config(np.array([0.4, 0.1, 0.3, 0.2]), np.array([0.9, 0.0, 0.1, 0.5]),
                             CompressionConfig(0.5, 0.25))
    rows = list(csv.reader(io.StringIO(cli.plan_csv(plan, memory_report(plan, 2, 2)))))
    assert rows[0] == ["index", "label"]
    # pool = 3 tokens {0, 2, 3}; 2 lowest-error go to approximation
    assert rows[1:5] == [["0", "retain"], ["1", "evict"], ["2", "approximate"], ["3", "approximate"]]
    assert rows[5:] == [["keys_stored", "6"], ["values_stored", "2"], ["total", "8"], ["budget_entries", "8"]]
