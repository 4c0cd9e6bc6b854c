import argparse
import subprocess
import sys

import numpy as np
import pytest

from attnguide.cli import build_parser, dispatch
from attnguide.patterns import parse_pattern_csv
from attnguide.probe import parse_probe_report

FAST = ["--hidden", "32", "--seq-len", "24", "--batch", "8", "--no-plot"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "c.txt"
    assert dispatch(["toy-corpus", "--out", str(path), "--bytes", "15000", "--seed", "1"]) == 0
    return path


def test_patterns_first_len3(capsys):
    assert dispatch(["patterns", "--kind", "first", "--len", "3"]) == 0
    out = capsys.readouterr().out
    assert out == "1.000000,0.000000,0.000000\n" * 3


def test_patterns_sentence_to_file(tmp_path):
    out = tmp_path / "p.csv"
    assert dispatch(["patterns", "--kind", "Period", "--sentence", "a . b .", "--out", str(out)]) == 0
    m = parse_pattern_csv(out.read_text())
    assert m.shape == (6, 6)
    assert np.all(m[:, [2, 4]] == 0.5)
    assert (tmp_path / "p.png").stat().st_size > 0


def test_train_twice_identical_metrics(tmp_path, corpus):
    args = ["train", "--corpus", str(corpus), "--steps", "12", "--seed", "7"] + FAST
    assert dispatch(args + ["--out", str(tmp_path / "a")]) == 0
    assert dispatch(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_no_ag_equals_lambda_zero(tmp_path, corpus):
    args = ["train", "--corpus", str(corpus), "--steps", "8"] + FAST
    assert dispatch(args + ["--no-ag", "--out", str(tmp_path / "a")]) == 0
    assert dispatch(args + ["--lambda", "0", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_train_eval_probe_pipeline(tmp_path, corpus, capsys):
    run = tmp_path / "run"
    assert dispatch(["train", "--corpus", str(corpus), "--steps", "10", "--out", str(run),
                     "--valid-corpus", str(corpus), "--hidden", "32", "--seq-len", "24", "--batch", "8"]) == 0
    assert (run / "curves.png").stat().st_size > 0
    assert "valid_mlm=" in capsys.readouterr().out
    ckpt = str(run / "final.agckpt")
    assert dispatch(["eval", "--checkpoint", ckpt, "--corpus", str(corpus)]) == 0
    first = float(capsys.readouterr().out)
    assert float((run / "valid.txt").read_text()) == pytest.approx(first, abs=1e-6)
    assert dispatch(["eval", "--checkpoint", ckpt, "--corpus", str(corpus), "--vocab", str(run / "vocab.txt")]) == 0
    assert float(capsys.readouterr().out) == first

    report = tmp_path / "probe.csv"
    data = tmp_path / "probe.tsv"
    assert dispatch(["probe", "--checkpoint", ckpt, "--synthetic", "40", "--distractor",
                     "--out", str(report), "--save-dataset", str(data)]) == 0
    acc, best, mean = parse_probe_report(report.read_text())
    assert acc.shape == (2, 4) and best >= mean
    assert (tmp_path / "probe.png").exists()
    assert dispatch(["probe", "--checkpoint", ckpt, "--dataset", str(data)]) == 0
    acc2, _, _ = parse_probe_report(capsys.readouterr().out)
    np.testing.assert_array_equal(acc, acc2)


def test_resume(tmp_path, corpus):
    args = ["train", "--corpus", str(corpus), "--steps", "12", "--checkpoint-every", "6"] + FAST
    assert dispatch(args + ["--out", str(tmp_path / "full")]) == 0
    full = (tmp_path / "full" / "metrics.csv").read_bytes()
    assert dispatch(args + ["--out", str(tmp_path / "full"),
                            "--resume", str(tmp_path / "full" / "latest.agckpt")]) == 0
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == full


def test_ablate(tmp_path, corpus, capsys):
    assert dispatch(["ablate", "--corpus", str(corpus), "--heads", "8", "--layers", "1", "--steps", "40",
                     "--probe-step", "5", "--omit", "next,prev", "--omit", "delim", "--out", str(tmp_path)]
                    + FAST) == 0
    text = (tmp_path / "ablation.txt").read_text()
    assert "[Next,Prev]" in text and "[Delim]" in text
    assert text == capsys.readouterr().out


def test_usage_errors_exit_1(capsys):
    assert dispatch(["train", "--bogus"]) == 1
    assert "usage:" in capsys.readouterr().err
    assert dispatch([]) == 1
    assert dispatch(["patterns", "--kind", "sideways", "--len", "3"]) == 1
    assert dispatch(["patterns", "--kind", "next", "--len", "3", "--sentence", "a"]) == 1
    assert dispatch(["ablate", "--corpus", "x", "--omit", "next,bogus"]) == 1


def test_runtime_errors_exit_2(tmp_path, capsys):
    assert dispatch(["eval", "--checkpoint", str(tmp_path / "missing"), "--corpus", "x"]) == 2
    assert "error:" in capsys.readouterr().err
    bad = tmp_path / "bad.agckpt"
    bad.write_bytes(b"not a checkpoint")
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    assert dispatch(["eval", "--checkpoint", str(bad), "--corpus", str(empty)]) == 2
    assert dispatch(["train", "--corpus", str(empty), "--out", str(tmp_path / "o"), "--steps", "2"]) == 2


def _subparsers(parser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


def test_help_lists_every_flag_with_default():
    for name, sub in _subparsers(build_parser()).items():
        text = " ".join(sub.format_help().split())
        fmt = sub._get_formatter()
        for action in sub._actions:
            if isinstance(action, argparse._HelpAction):
                continue
            assert action.option_strings[-1] in text, (name, action.dest)
            assert "(default:" in fmt._get_help_string(action), (name, action.dest)


def test_spec_flags_present():
    subs = _subparsers(build_parser())
    flags = {name: {s for a in p._actions for s in a.option_strings} for name, p in subs.items()}
    train_flags = {"--corpus", "--valid-corpus", "--out", "--layers", "--heads", "--hidden", "--seq-len",
                   "--vocab-size", "--batch", "--steps", "--lr", "--warmup", "--lambda", "--alpha0",
                   "--mask-prob", "--seed", "--no-ag", "--bert-style-mask", "--clip-norm", "--checkpoint-every"}
    assert train_flags <= flags["train"]
    assert {"--checkpoint", "--corpus", "--seed"} <= flags["eval"]
    assert {"--checkpoint", "--dataset", "--synthetic", "--distractor", "--seed", "--out"} <= flags["probe"]
    assert {"--kind", "--len", "--sentence", "--out"} <= flags["patterns"]
    assert train_flags | {"--omit", "--probe-step", "--refill"} <= flags["ablate"]


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "attnguide", "patterns", "--kind", "next", "--len", "2"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout == "0.000000,1.000000\n0.500000,0.500000\n"
    proc = subprocess.run([sys.executable, "-m", "attnguide", "nope"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage" in proc.stderr
