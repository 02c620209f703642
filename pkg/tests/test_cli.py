import json
import os

import pytest

from dgnn import checkpoint as ck
from dgnn import cli
from dgnn import dataset as ds


def run(argv):
    return cli.main(argv)


@pytest.fixture(scope="module")
def split_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    man = root / "man.jsonl"
    assert run(["gen", "--out", str(man), "--seed", "0"]) == 0
    out = root / "man_split.jsonl"
    assert run(["split", "--in", str(man), "--out", str(out),
                "--protocol", "random", "--seed", "0"]) == 0
    return out


TINY = ["--hidden-dim", "8", "--steps", "1", "--net-width", "16",
        "--epochs", "2", "--batch-size", "64"]


def test_gen_is_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run(["gen", "--out", str(a), "--seed", "7"]) == 0
    assert run(["gen", "--out", str(b), "--seed", "7"]) == 0
    assert a.read_bytes() == b.read_bytes()
    c = tmp_path / "c.jsonl"
    assert run(["gen", "--out", str(c), "--seed", "8"]) == 0
    assert a.read_bytes() != c.read_bytes()


def test_split_assigns_all_three(split_manifest):
    man = ds.load_manifest(str(split_manifest))
    counts = {name: len(man.split_samples(name))
              for name in ("train", "val", "test")}
    assert counts == {"train": 288, "val": 36, "test": 36}


def test_split_leave_alcohol_out_keeps_groups_apart(tmp_path, split_manifest):
    out = tmp_path / "lao.jsonl"
    assert run(["split", "--in", str(split_manifest), "--out", str(out),
                "--protocol", "leave-alcohol-out", "--seed", "1"]) == 0
    man = ds.load_manifest(str(out))
    seen = {}
    for s in man.samples:
        key = ds.graph_key(s.alcohol)
        assert seen.setdefault(key, s.split) == s.split


def test_train_eval_round_trip(tmp_path, split_manifest, capsys):
    ckpt = tmp_path / "model.json"
    assert run(["train", "--in", str(split_manifest), "--out", str(ckpt),
                "--strategy", "dg", "--seed", "0"] + TINY) == 0
    capsys.readouterr()
    assert run(["eval", "--ckpt", str(ckpt), "--in", str(split_manifest),
                "--split", "test"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "method,split,r2,rmse,sre,mae"
    fields = lines[1].split(",")
    assert fields[0] == "mpnn_dg"
    assert fields[1] == "test"
    float(fields[2])  # parses


def test_baseline_command(tmp_path, split_manifest, capsys):
    ckpt = tmp_path / "mlp.json"
    assert run(["baseline", "--in", str(split_manifest), "--out", str(ckpt),
                "--epochs", "1", "--batch-size", "64"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("method,split,")
    assert "mlp,test," in out
    model = ck.load_model(str(ckpt))
    assert model.config.nbits > 0


def test_config_file_and_flag_precedence(tmp_path, split_manifest):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("strategy=fc\nepochs=1\nhidden_dim=8\nsteps=1\n"
                   "net_width=16\nbatch_size=64\n")
    ckpt = tmp_path / "from_file.json"
    assert run(["train", "--in", str(split_manifest), "--out", str(ckpt),
                "--config", str(cfg)]) == 0
    assert ck.load_model(str(ckpt)).config.strategy == "fc"

    ckpt2 = tmp_path / "flag_wins.json"
    assert run(["train", "--in", str(split_manifest), "--out", str(ckpt2),
                "--config", str(cfg), "--strategy", "dg"]) == 0
    assert ck.load_model(str(ckpt2)).config.strategy == "dg"


def test_config_file_rejects_garbage(tmp_path, split_manifest, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("this line has no equals sign\n")
    ckpt = tmp_path / "x.json"
    assert run(["train", "--in", str(split_manifest), "--out", str(ckpt),
                "--config", str(cfg)]) == 1
    assert capsys.readouterr().err.startswith("error:")

    cfg.write_text("norm=maybe\n")
    assert run(["train", "--in", str(split_manifest), "--out", str(ckpt),
                "--config", str(cfg)] + TINY) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and "norm" in err


def test_errors_are_one_line_and_nonzero(tmp_path, capsys):
    assert run(["split", "--in", str(tmp_path / "nope.jsonl"),
                "--protocol", "random"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:")
    assert err.count("\n") == 1

    assert run(["gen", "--out", str(tmp_path / "m.jsonl"),
                "--seed", "0"]) == 0
    assert run(["split", "--in", str(tmp_path / "m.jsonl"),
                "--fractions", "0.5,0.5"]) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_eval_rejects_unknown_split(tmp_path, split_manifest, capsys):
    ckpt = tmp_path / "m.json"
    assert run(["train", "--in", str(split_manifest), "--out", str(ckpt),
                "--strategy", "dg", "--seed", "0"] + TINY) == 0
    capsys.readouterr()
    assert run(["eval", "--ckpt", str(ckpt), "--in", str(split_manifest),
                "--split", "holdout"]) == 1
    assert "holdout" in capsys.readouterr().err


def test_threads_flag_sets_environment(tmp_path):
    saved = {var: os.environ.get(var)
             for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                         "MKL_NUM_THREADS")}
    try:
        out = tmp_path / "m.jsonl"
        assert run(["gen", "--out", str(out), "--seed", "0",
                    "--threads", "2"]) == 0
        assert os.environ["OMP_NUM_THREADS"] == "2"
        assert os.environ["OPENBLAS_NUM_THREADS"] == "2"
        assert run(["gen", "--out", str(out), "--threads", "zero"]) == 1
    finally:
        for var, val in saved.items():
            if val is None:
                os.environ.pop(var, None)
            else:
                os.environ[var] = val


def test_threads_env_fallback(tmp_path, monkeypatch):
    saved = os.environ.get("OMP_NUM_THREADS")
    monkeypatch.setenv("DGNN_THREADS", "3")
    try:
        out = tmp_path / "m.jsonl"
        assert run(["gen", "--out", str(out), "--seed", "0"]) == 0
        assert os.environ["OMP_NUM_THREADS"] == "3"
    finally:
        if saved is None:
            os.environ.pop("OMP_NUM_THREADS", None)
        else:
            os.environ["OMP_NUM_THREADS"] = saved


def test_outliers_max_iters_zero(tmp_path, split_manifest, capsys):
    clean = tmp_path / "clean.jsonl"
    report = tmp_path / "outliers.jsonl"
    assert run(["outliers", "--in", str(split_manifest), "--out", str(clean),
                "--report", str(report), "--max-iters", "0",
                "--strategy", "dg", "--seed", "0"] + TINY) == 0
    assert "flagged 0" in capsys.readouterr().out
    assert len(ds.load_manifest(str(clean))) == 360
    assert report.read_text() == ""


def test_exp1_writes_csv(tmp_path, split_manifest):
    outdir = tmp_path / "exp1"
    assert run(["exp1", "--in", str(split_manifest), "--outdir", str(outdir),
                "--seed", "0"] + TINY) == 0
    csv_path = outdir / "exp1_metrics.csv"
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == "method,split,r2,rmse,sre,mae"
    methods = {line.split(",")[0] for line in lines[1:]}
    assert methods == {"mpnn_dg", "mpnn_fc", "mpnn_gn", "mlp"}
    assert len(lines) == 1 + 4 * 3
    assert (outdir / "labels_hist.dat").exists()
    assert (outdir / "mpnn_gn_epochs.jsonl").exists()
    assert (outdir / "mlp_test_scatter.dat").exists()
