import csv
import json
from pathlib import Path

import numpy as np
import pytest

from gdiffuser import cli, config as cfgmod
from gdiffuser.autograd import tensor as T
from gdiffuser.graph import read_jsonl, write_jsonl
from gdiffuser.train import TrainConfig

TINY_SETS = ["epochs=3", "warmup_epochs=1", "batch_size=8", "model.hidden_dim=8", "model.heads=2",
             "model.num_layers=1", "model.k=4"]


def sets(items):
    out = []
    for s in items:
        out += ["--set", s]
    return out


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert cli.main(["gen", "--rows", "3", "--cols", "3,4", "--colors", "3", "--n", "40", "--seed", "5",
                     "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(data_dir, tmp_path_factory):
    runs = tmp_path_factory.mktemp("runs")
    assert cli.main(["train", "--data", str(data_dir), "--out", str(runs), *sets(TINY_SETS)]) == 0
    (run,) = list(runs.iterdir())
    return run


# -- config -------------------------------------------------------------------

def test_config_round_trip():
    c = cfgmod.loads("epochs=7\n# comment\nmodel.hidden_dim = 16\nmodel.use_weighted_adjacency=true\n")
    assert c.epochs == 7 and c.model.hidden_dim == 16 and c.model.use_weighted_adjacency
    again = cfgmod.loads(cfgmod.dumps(c))
    assert again == c
    assert cfgmod.from_dict(c.to_dict()) == c


def test_overrides_apply_after_file(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("epochs=7\nbase_lr=0.001\n")
    c = cfgmod.load(f, [("epochs", "9")])
    assert c.epochs == 9 and c.base_lr == 0.001


@pytest.mark.parametrize("text", ["nope=1", "model.nope=1", "epochs", "epochs=abc", "model.heads=3",
                                  "model.use_weighted_adjacency=maybe"])
def test_bad_config_rejected(text):
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.loads(text)


def test_config_hash_content_addressed():
    a, b = TrainConfig(), TrainConfig()
    assert cfgmod.config_hash(a) == cfgmod.config_hash(b)
    assert cfgmod.config_hash(a) != cfgmod.config_hash(cfgmod.loads("epochs=30"))


# -- gen ----------------------------------------------------------------------

def test_gen_full_scale_counts_and_rerun(tmp_path):
    args = ["gen", "--rows", "10", "--cols", "10,11,12,13", "--colors", "20", "--n", "10000", "--seed", "7"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(args + ["--out", str(a)]) == 0
    assert cli.main(args + ["--out", str(b)]) == 0
    counts = [len((a / f"{s}.jsonl").read_text().splitlines()) for s in ("train", "val", "test")]
    assert counts == [8000, 1000, 1000]
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    m = json.loads((a / "manifest.json").read_text())
    assert m["format_version"] == 1 and m["seed"] == 7 and m["counts"]["train"] == 8000
    assert m["rng"] == "philox4x64-10/v1" and m["spec"]["col_choices"] == [10, 11, 12, 13]
    rec = json.loads((a / "test.jsonl").read_text().splitlines()[0])
    assert rec["attrs"]["rows"] == 10 and rec["attrs"]["cols"] in (10, 11, 12, 13)
    assert len(rec["labels"]) == rec["num_nodes"]


def test_gen_thread_count_does_not_change_output(tmp_path, monkeypatch):
    args = ["gen", "--rows", "3", "--cols", "3,4", "--n", "60", "--seed", "2"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    monkeypatch.setenv("GD_THREADS", "4")
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a/train.jsonl").read_bytes() == (tmp_path / "b/train.jsonl").read_bytes()


@pytest.mark.parametrize("extra", [["--n", "0"], ["--cols", "0"], ["--split", "0.5,0.5"], ["--set", "bogus=1"],
                                   ["--colors", "x"]])
def test_gen_rejects_bad_specs(tmp_path, extra):
    assert cli.main(["gen", "--out", str(tmp_path / "x"), *extra]) == 2


def test_gen_config_file_and_overrides(tmp_path):
    f = tmp_path / "gen.txt"
    f.write_text("rows=2\ncols=2\nn=10\n")
    assert cli.main(["gen", "--config", str(f), "--set", "n=20", "--out", str(tmp_path / "d")]) == 0
    assert json.loads((tmp_path / "d/manifest.json").read_text())["spec"]["num_graphs"] == 20


# -- train / eval -------------------------------------------------------------

def test_train_artifacts(run_dir):
    assert {p.name for p in run_dir.iterdir()} >= {"report.json", "metrics.csv", "best.ckpt", "config.txt"}
    rows = read_csv(run_dir / "metrics.csv")
    assert list(rows[0]) == ["epoch", "train_loss", "val_acc", "lr"] and len(rows) == 3
    report = json.loads((run_dir / "report.json").read_text())
    cfg = cfgmod.from_dict(report["config"])
    assert run_dir.name == f"{cfgmod.config_hash(cfg)}-s{cfg.seed}"
    assert cfg.model.in_dim == 3 and cfg.model.num_classes == 6


def test_eval_reproduces_report(run_dir, data_dir, capsys):
    capsys.readouterr()
    assert cli.main(["eval", str(run_dir), "--data", str(data_dir)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["accuracy"] == json.loads((run_dir / "report.json").read_text())["test_acc"]


def test_echoed_config_reproduces_run(run_dir, data_dir, tmp_path):
    report = json.loads((run_dir / "report.json").read_text())
    f = tmp_path / "echo.txt"
    f.write_text(cfgmod.dumps(cfgmod.from_dict(report["config"])))
    assert cli.main(["train", "--data", str(data_dir), "--config", str(f), "--out", str(tmp_path)]) == 0
    again = tmp_path / run_dir.name
    assert (again / "metrics.csv").read_bytes() == (run_dir / "metrics.csv").read_bytes()
    assert (again / "best.ckpt").read_bytes() == (run_dir / "best.ckpt").read_bytes()


def test_seed_flag_names_run_dir(data_dir, tmp_path):
    assert cli.main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--seed", "4",
                     *sets(TINY_SETS)]) == 0
    (run,) = list(tmp_path.iterdir())
    assert run.name.endswith("-s4")


def test_train_vanilla_baseline(data_dir, tmp_path):
    assert cli.main(["train", "--data", str(data_dir), "--baseline", "vanilla", "--out", str(tmp_path),
                     *sets(TINY_SETS)]) == 0
    (run,) = list(tmp_path.iterdir())
    report = json.loads((run / "report.json").read_text())
    assert report["config"]["baseline_mode"] == "vanilla_transformer"
    assert (run / "best.ckpt").exists()
    assert cli.main(["eval", str(run), "--data", str(data_dir)]) == 0


def test_train_usage_errors(data_dir, tmp_path):
    assert cli.main(["train", "--data", str(data_dir), "--set", "model.bogus=1"]) == 2
    assert cli.main(["train", "--data", str(data_dir), "--set", "nokeyvalue"]) == 2
    assert cli.main(["train", "--data", str(tmp_path / "missing")]) == 2
    assert cli.main(["train"]) == 2
    assert cli.main(["frobnicate"]) == 2


def test_train_nan_exit_code(data_dir, tmp_path):
    assert cli.main(["train", "--data", str(data_dir), "--out", str(tmp_path),
                     *sets(TINY_SETS + ["base_lr=1e300", "warmup_epochs=0"])]) == 3


def test_global_flags_before_subcommand(data_dir, tmp_path):
    assert cli.main(["--out", str(tmp_path), "--seed", "2", "train", "--data", str(data_dir),
                     *sets(TINY_SETS)]) == 0
    assert [p.name.endswith("-s2") for p in tmp_path.iterdir()] == [True]


# -- dump ---------------------------------------------------------------------

def test_dump_attention_rows_sum_to_one(run_dir, data_dir, tmp_path):
    assert cli.main(["dump", "attention", "--run", str(run_dir), "--graph", str(data_dir / "test.jsonl"),
                     "--out", str(tmp_path)]) == 0
    files = sorted(tmp_path.glob("attention_l*_h*.csv"))
    assert len(files) == 2
    for f in files:
        rows = read_csv(f)
        assert list(rows[0]) == ["i", "j", "weight"]
        sums = {}
        for r in rows:
            sums[r["i"]] = sums.get(r["i"], 0.0) + float(r["weight"])
        assert all(abs(s - 1) < 1e-6 for s in sums.values())


def test_dump_raw_virtual_edges_identity_channel(data_dir, tmp_path):
    assert cli.main(["dump", "virtual_edges", "--raw", "--graph", str(data_dir / "test.jsonl"),
                     "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "virtual_edges_raw.csv")
    assert list(rows[0]) == ["i", "j", "channel", "value"]
    for r in rows:
        if r["channel"] == "0":
            assert float(r["value"]) == (1.0 if r["i"] == r["j"] else 0.0)


def _dump_array(tmp_path, what, graph_file, run, name, cols):
    assert cli.main(["dump", what, "--run", str(run), "--graph", str(graph_file), "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / name)
    idx = np.array([[int(r[c]) for c in cols] for r in rows])
    shape = tuple(idx.max(axis=0) + 1)
    arr = np.zeros(shape)
    arr[tuple(idx.T)] = [float(r[list(r)[-1]]) for r in rows]
    return arr


@pytest.mark.parametrize("what,name,cols", [
    ("pe", "pe.csv", ["node", "dim"]),
    ("virtual_edges", "virtual_edges.csv", ["i", "j", "channel"]),
    ("attention", "attention_l0_h1.csv", ["i", "j"]),
])
def test_dump_permuted_graph(run_dir, data_dir, tmp_path, what, name, cols):
    g = read_jsonl(data_dir / "test.jsonl")[0]
    perm = np.random.default_rng(0).permutation(g.num_nodes)
    write_jsonl(tmp_path / "p.jsonl", [g.permute(perm)])
    a = _dump_array(tmp_path / "a", what, data_dir / "test.jsonl", run_dir, name, cols)
    b = _dump_array(tmp_path / "b", what, tmp_path / "p.jsonl", run_dir, name, cols)
    if what == "pe":
        np.testing.assert_allclose(b[perm], a, atol=1e-9)
    else:
        np.testing.assert_allclose(b[np.ix_(perm, perm)], a, atol=1e-9)


def test_dump_without_run_uses_config(data_dir, tmp_path):
    assert cli.main(["dump", "pe", "--graph", str(data_dir / "val.jsonl"), "--set", "model.k=5",
                     "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "pe.csv")
    assert list(rows[0]) == ["node", "dim", "value"] and all(float(r["value"]) >= 0 for r in rows)


def test_dump_errors(run_dir, data_dir, tmp_path):
    g = str(data_dir / "test.jsonl")
    assert cli.main(["dump", "pe", "--run", str(run_dir), "--graph", g, "--index", "999"]) == 2
    assert cli.main(["dump", "pe", "--run", str(tmp_path), "--graph", g]) == 2
    assert cli.main(["dump", "pe", "--graph", g, "--set", "baseline_mode=vanilla_transformer",
                     "--out", str(tmp_path)]) == 2
    assert cli.main(["dump", "pe", "--graph", g, "--set", "model.in_dim=5", "--out", str(tmp_path)]) == 2


# -- selftest -------------------------------------------------------------------

def test_selftest_passes_and_is_repeatable(capsys, tmp_path):
    assert cli.main(["selftest", "--out", str(tmp_path)]) == 0
    first = capsys.readouterr().out
    assert "FAIL" not in first and first.endswith("checks passed\n")
    assert cli.main(["selftest"]) == 0
    assert capsys.readouterr().out == first == (tmp_path / "selftest.txt").read_text()


def test_selftest_detects_corrupted_backward(monkeypatch, capsys):
    orig = T.Sigmoid.backward

    def broken(self, g):
        return orig(self, g) * 1.01
    monkeypatch.setattr(T.Sigmoid, "backward", broken)
    assert cli.main(["selftest", "--only", "grad.sigmoid", "--only", "grad.matmul"]) == 4
    out = capsys.readouterr().out
    assert "FAIL grad.sigmoid" in out and "PASS grad.matmul" in out
