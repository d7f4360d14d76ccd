import json

import numpy as np
import pytest

from flowrules.cli import main
from flowrules.harness.synth import load_matrix, save_matrix


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["--seed", "2", "synth", "--out", str(d / "data"), "--d", "3", "--n-train", "600",
                 "--n-test", "200", "--n-anomaly", "100", "--train-flows", "200", "--test-flows", "100",
                 "--attack-flows", "30"]) == 0
    assert main(["train", "--data", str(d / "data/train.csv"), "--trees", "30", "--out", str(d / "m.json")]) == 0
    assert main(["extract", "--model", str(d / "m.json"), "--data", str(d / "data/train.csv"),
                 "--max-iters", "5", "--out", str(d / "r.json")]) == 0
    return d


def test_compile_and_classify(work, capsys):
    assert main(["compile", "--rules", str(work / "r.json"), "--out", str(work / "p.txt")]) == 0
    assert (work / "p.txt").read_text().startswith("flowrules-program")
    assert main(["classify", "--rules", str(work / "r.json"), "--features", str(work / "data/test.csv"),
                 "--out", str(work / "c.csv")]) == 0
    lines = (work / "c.csv").read_text().splitlines()
    assert len(lines) == 201


def test_interpret(work):
    assert main(["interpret", "--rules", str(work / "r.json"), "--features", str(work / "data/anomalies.csv"),
                 "--topk", "2", "--out", str(work / "i.csv")]) == 0
    header = (work / "i.csv").read_text().splitlines()[0]
    assert header.split(",")[:3] == ["row", "decision", "clause_id"]


def test_debug_and_eval(work, capsys):
    X, names = load_matrix(work / "data/anomalies.csv")
    save_matrix(X[:3], work / "fps.csv", names)
    assert main(["debug", "--rules", str(work / "r.json"), "--fps", str(work / "fps.csv"),
                 "--model", str(work / "m.json"), "--mode", "exclude", "--out", str(work / "r2.json"),
                 "--delta", str(work / "d.json")]) == 0
    assert json.loads((work / "d.json").read_text())
    capsys.readouterr()
    assert main(["eval", "--rules", str(work / "r2.json"), "--model", str(work / "m.json"),
                 "--features", str(work / "data/test.csv"), "--out", str(work / "e.json")]) == 0
    report = json.loads((work / "e.json").read_text())
    assert 0.0 <= report["fidelity"] <= 1.0


def test_flow_pipeline(work, capsys):
    d = work
    assert main(["train", "--data", str(d / "data/trace_train.csv"), "--trees", "30",
                 "--out", str(d / "fm.json")]) == 0
    assert main(["extract", "--model", str(d / "fm.json"), "--data", str(d / "data/trace_train.csv"),
                 "--max-iters", "3", "--explorers", "4", "--aux", "2", "--out", str(d / "fr.json")]) == 0
    assert main(["compile", "--rules", str(d / "fr.json"), "--out", str(d / "fp.txt")]) == 0
    assert main(["simulate", "--program", str(d / "fp.txt"), "--trace", str(d / "data/trace_test.csv"),
                 "--out", str(d / "v.csv")]) == 0
    capsys.readouterr()
    assert main(["eval", "--rules", str(d / "fr.json"), "--model", str(d / "fm.json"),
                 "--verdicts", str(d / "v.csv"), "--labels", str(d / "data/labels_test.csv"),
                 "--program", str(d / "fp.txt")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["tpr"] is not None and report["n_entries"] > 0


def test_errors_return_nonzero(tmp_path, capsys):
    assert main(["classify", "--rules", str(tmp_path / "missing.json"), "--features", "x.csv"]) == 1
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["nope"])
