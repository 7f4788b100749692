import csv
import math

import numpy as np
import pytest

from plangen.cli import build_parser, main, parse_selector, read_pgm, resolve_config
from plangen.tasks import hierholzer, is_eulerian_circuit, parse_source, read_dataset
from plangen.training import load_model


@pytest.fixture
def copy_data(tmp_path):
    out = tmp_path / "copy"
    assert main(["gen", "copy", "--vocab", "4", "--min-len", "2", "--max-len", "4", "--count", "60",
                 "--seed", "3", "--out", str(out)]) == 0
    return out


TINY = ["--hidden", "12", "--embed-dim", "6", "--align-hidden", "8", "--summary-dim", "4", "--k", "3"]


def _train(data, out, *extra):
    return main(["train", "--train", str(data / "train.tsv"), "--valid", str(data / "valid.tsv"),
                 "--out", str(out), *TINY, *extra])


def _metrics(path):
    with open(path) as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------- gen

def test_gen_writes_three_files(copy_data, capsys):
    sizes = {name: len(read_dataset(copy_data / f"{name}.tsv")) for name in ("train", "valid", "test")}
    assert sizes == {"train": 48, "valid": 6, "test": 6}


def test_gen_is_byte_identical_for_same_seed(tmp_path):
    for d in ("a", "b"):
        assert main(["gen", "euler", "--nodes", "5", "--count", "200", "--seed", "9", "--out", str(tmp_path / d)]) == 0
    for name in ("train", "valid", "test"):
        assert (tmp_path / "a" / f"{name}.tsv").read_bytes() == (tmp_path / "b" / f"{name}.tsv").read_bytes()


def test_gen_euler_seven_nodes_validated(tmp_path):
    assert main(["gen", "euler", "--nodes", "7", "--count", "10000", "--out", str(tmp_path)]) == 0
    seen = {}
    total = 0
    for i, name in enumerate(("train", "valid", "test")):
        ds = read_dataset(tmp_path / f"{name}.tsv")
        total += len(ds)
        for inst in ds:
            g, start = parse_source(ds.vocab, inst.source)
            walk = [int(t) for t in ds.vocab.decode(inst.target[:-1])]
            assert is_eulerian_circuit(g, walk, start) and walk == hierholzer(g, start)
            assert seen.setdefault(g.edges, i) == i  # graphs never cross splits
    assert total == 10000


def test_gen_small_graph_is_user_error(tmp_path, capsys):
    assert main(["gen", "euler", "--nodes", "2", "--out", str(tmp_path)]) == 2
    assert "n >= 3 required" in capsys.readouterr().err


def test_gen_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen", "copy", "--count", "20", "--out", str(blocker / "sub")]) == 2


# ---------------------------------------------------------------- config

def test_config_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment line\nmode = baseline\nlearning-rate = 0.01  # trailing\nlayer_norm = true\nhidden=20\n")
    args = build_parser().parse_args(["train", "--config", str(cfg), "--mode", "rpag", "--hidden", "30"])
    rc = resolve_config(args)
    assert rc.mode == "rpag" and rc.hidden == 30
    assert rc.learning_rate == 0.01 and rc.layer_norm is True
    assert rc.clip_threshold == 5.0 and rc.k == 10  # untouched defaults


def test_config_default_values():
    rc = resolve_config(build_parser().parse_args(["train"]))
    assert (rc.learning_rate, rc.clip_threshold, rc.k, rc.beam_width) == (2e-4, 5.0, 10, 4)


def test_config_errors(tmp_path, copy_data):
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense_key = 3\n")
    assert main(["train", "--config", str(bad), "--train", str(copy_data / "train.tsv")]) == 2
    bad.write_text("hidden = lots\n")
    assert main(["train", "--config", str(bad), "--train", str(copy_data / "train.tsv")]) == 2
    assert main(["train", "--train", str(copy_data / "train.tsv"), "--mode", "other"]) == 2


# ---------------------------------------------------------------- train

def test_train_metrics_file(copy_data, tmp_path):
    out = tmp_path / "run"
    assert _train(copy_data, out, "--max-updates", "25", "--log-interval", "10", "--eval-interval", "10",
                  "--lr", "1e-3") == 0
    rows = _metrics(out / "metrics.csv")
    assert rows[0] == ["update", "nll", "commit_penalty", "valid_accuracy", "wall_time"]
    assert len(rows) - 1 == math.ceil(25 / 10)
    assert [r[0] for r in rows[1:]] == ["10", "20", "25"]
    for r in rows[1:]:
        assert all(math.isfinite(float(x)) for x in r)
    assert (out / "checkpoint.npz").is_file()


def test_train_baseline_penalty_column_zero(copy_data, tmp_path):
    out = tmp_path / "base"
    assert _train(copy_data, out, "--mode", "baseline", "--max-updates", "6", "--log-interval", "3") == 0
    assert [float(r[2]) for r in _metrics(out / "metrics.csv")[1:]] == [0.0, 0.0]


def test_train_missing_dataset(tmp_path):
    assert main(["train", "--train", str(tmp_path / "none.tsv")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # the overflow is the point
def test_train_nan_exits_numeric(copy_data, tmp_path, capsys):
    code = _train(copy_data, tmp_path / "nan", "--max-updates", "50", "--lr", "1e300", "--mode", "baseline",
                  "--eval-interval", "0")
    assert code == 3
    assert "update" in capsys.readouterr().err


def test_train_resume_matches_unbroken_run(copy_data, tmp_path):
    common = ["--max-updates", "20", "--log-interval", "4", "--eval-interval", "8", "--lr", "2e-3",
              "--batch-size", "2", "--dense-switch-grad"]
    assert _train(copy_data, tmp_path / "full", *common) == 0
    half = [c if c != "20" else "8" for c in common]
    assert _train(copy_data, tmp_path / "part", *half) == 0
    assert _train(copy_data, tmp_path / "part", *common, "--resume", str(tmp_path / "part" / "checkpoint.npz")) == 0
    full = [r[:4] for r in _metrics(tmp_path / "full" / "metrics.csv")]
    part = [r[:4] for r in _metrics(tmp_path / "part" / "metrics.csv")]
    assert full == part
    a, _, _ = load_model(tmp_path / "full" / "checkpoint.npz")
    b, _, _ = load_model(tmp_path / "part" / "checkpoint.npz")
    for x, y in zip(a.parameters().values(), b.parameters().values()):
        np.testing.assert_array_equal(x.data, y.data)


# ---------------------------------------------------------------- eval

@pytest.fixture
def overfit(tmp_path):
    data = tmp_path / "one"
    data.mkdir()
    (data / "train.tsv").write_text("#plangen-dataset kind=copy vocab=PAD,BOS,EOS,0,1,2,3\n0 2 1\t0 2 1 EOS\n")
    out = tmp_path / "ofit"
    assert main(["train", "--train", str(data / "train.tsv"), "--out", str(out), "--hidden", "32",
                 "--embed-dim", "8", "--k", "3", "--lr", "1e-2", "--max-updates", "150",
                 "--eval-interval", "0", "--log-interval", "50"]) == 0
    return data / "train.tsv", out / "checkpoint.npz"


def test_eval_overfit_checkpoint(overfit, capsys):
    data, ckpt = overfit
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data)]) == 0
    assert "exact_match_accuracy 1.000000" in capsys.readouterr().out


def test_eval_beam_one_matches_greedy_file(copy_data, tmp_path):
    out = tmp_path / "r"
    assert _train(copy_data, out, "--max-updates", "30", "--lr", "3e-3", "--eval-interval", "0") == 0
    g, b = tmp_path / "g.tsv", tmp_path / "b.tsv"
    ck = str(out / "checkpoint.npz")
    assert main(["eval", "--checkpoint", ck, "--data", str(copy_data / "test.tsv"), "--greedy", "--out", str(g)]) == 0
    assert main(["eval", "--checkpoint", ck, "--data", str(copy_data / "test.tsv"), "--beam", "1", "--out", str(b)]) == 0
    assert g.read_bytes() == b.read_bytes()
    header = g.read_text().splitlines()[0].split("\t")
    assert header == ["id", "source", "target", "prediction", "exact", "valid"]


def test_eval_errors(copy_data, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.npz"), "--data", str(copy_data / "test.tsv")]) == 2
    out = tmp_path / "r"
    assert _train(copy_data, out, "--max-updates", "1", "--eval-interval", "0") == 0
    main(["gen", "euler", "--nodes", "5", "--count", "50", "--out", str(tmp_path / "e")])
    assert main(["eval", "--checkpoint", str(out / "checkpoint.npz"), "--data", str(tmp_path / "e" / "test.tsv")]) == 2


def test_eval_reports_valid_circuits(tmp_path, capsys):
    main(["gen", "euler", "--nodes", "4", "--count", "40", "--split-by", "instance", "--out", str(tmp_path / "e")])
    e = tmp_path / "e"
    assert main(["train", "--train", str(e / "train.tsv"), "--out", str(tmp_path / "r"), *TINY,
                 "--max-updates", "2", "--eval-interval", "0"]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(tmp_path / "r" / "checkpoint.npz"), "--data", str(e / "test.tsv")]) == 0
    assert "valid_circuit_accuracy" in capsys.readouterr().out


# ---------------------------------------------------------------- dump

def _dump(copy_data, tmp_path, mode, *extra):
    out = tmp_path / mode
    assert _train(copy_data, out, "--mode", mode, "--max-updates", "0", "--eval-interval", "0") == 0
    dump = tmp_path / f"dump_{mode}"
    assert main(["dump", "--checkpoint", str(out / "checkpoint.npz"), "--data", str(copy_data / "test.tsv"),
                 "--select", "0-2", "--teacher-forcing", "--out", str(dump), *extra]) == 0
    return dump


def _alignments(path):
    rows = list(csv.reader(open(path)))
    return rows[0], [r[0] for r in rows[1:]], np.array([[float(x) for x in r[1:]] for r in rows[1:]])


def test_dump_untrained_pag(copy_data, tmp_path):
    dump = _dump(copy_data, tmp_path, "pag")
    files = sorted(p.name for p in dump.iterdir())
    assert len([f for f in files if f.endswith("_alignments.csv")]) == 3
    for f in dump.glob("*_alignments.csv"):
        header, targets, alpha = _alignments(f)
        assert header[0] == "target\\source" and len(header) - 1 == alpha.shape[1]
        np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-6)
        # step 1 commits, so small random weights perturb the all-ones plan only slightly
        np.testing.assert_allclose(alpha[0], 1.0 / alpha.shape[1], atol=1e-3)
        img = read_pgm(f.with_suffix(".pgm"))
        assert img.shape == alpha.shape
        np.testing.assert_allclose(img, 1.0 - alpha, atol=0.5 / 255 + 1e-12)
        stem = f.name.replace("_alignments.csv", "")
        g = [int(r[2]) for r in list(csv.reader(open(dump / f"{stem}_commitments.csv")))[1:]]
        assert g[0] == 1 and len(g) == len(targets)
        plans = list(csv.reader(open(dump / f"{stem}_plans.csv")))[1:]
        assert len(plans) == 3 * sum(g)  # k rows per commit step


def test_dump_rpag_constant_runs(copy_data, tmp_path):
    dump = _dump(copy_data, tmp_path, "rpag")
    for f in dump.glob("*_alignments.csv"):
        _, _, alpha = _alignments(f)
        stem = f.name.replace("_alignments.csv", "")
        g = [int(r[2]) for r in list(csv.reader(open(dump / f"{stem}_commitments.csv")))[1:]]
        for t in range(1, len(g)):
            if g[t] == 0:
                np.testing.assert_array_equal(alpha[t], alpha[t - 1])


def test_dump_selector_errors(copy_data, tmp_path):
    out = tmp_path / "r"
    assert _train(copy_data, out, "--max-updates", "0") == 0
    code = main(["dump", "--checkpoint", str(out / "checkpoint.npz"), "--data", str(copy_data / "test.tsv"),
                 "--select", "99", "--out", str(tmp_path / "d")])
    assert code == 2


def test_parse_selector():
    assert parse_selector("all", 3) == [0, 1, 2]
    assert parse_selector("0,2-4,2", 10) == [0, 2, 3, 4]
    assert parse_selector("7", 5) == []
