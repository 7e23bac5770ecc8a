import csv

import pytest

from fiemf.cli import main

FAST = ["--max-iters", "5", "--dim", "3", "-k", "4"]


def _data(wsdream_files):
    rt, users = wsdream_files
    return ["--rt", str(rt), "--users", str(users)]


def test_prepare_prints_counts(wsdream_files, capsys):
    assert main(["prepare", *_data(wsdream_files)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "40 users, 80 services, 3200 records"
    assert out[-1] == "6 regions"


def test_prepare_bad_file(tmp_path, capsys):
    bad = tmp_path / "rt.txt"
    bad.write_text("1 2\nx 3\n")
    assert main(["prepare", "--rt", str(bad)]) == 1
    assert "line 2" in capsys.readouterr().err


def test_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["prepare", "--bogus"])
    assert exc.value.code == 2


def test_evaluate_one_cell(tmp_path, wsdream_files, capsys):
    out = tmp_path / "run"
    code = main(["evaluate", *_data(wsdream_files), "--methods", "umean", "--density", "0.05",
                 "--seed", "1", "--out", str(out)])
    assert code == 0
    with open(out / "report.csv") as fh:
        rows = [r for r in csv.DictReader(fh) if r["provenance"] == "run"]
    assert len(rows) == 1 and rows[0]["seed"] == "1" and rows[0]["density"] == "0.05"
    assert "published 0.8816" in capsys.readouterr().out


def test_global_flags_before_subcommand(tmp_path, wsdream_files):
    out = tmp_path / "run"
    assert main(["--seed", "4", "--out", str(out), "evaluate", *_data(wsdream_files),
                 "--methods", "imean", "--density", "0.1"]) == 0
    with open(out / "report.csv") as fh:
        rows = [r for r in csv.DictReader(fh) if r["provenance"] == "run"]
    assert rows[0]["seed"] == "4"


def test_config_file_and_flag_override(tmp_path, wsdream_files):
    rt, users = wsdream_files
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(f"rt_path: {rt}\nusers_path: {users}\nmethods: [umean, imean]\n"
                   f"densities: [0.1]\nseeds: [1, 2]\noutput_dir: {tmp_path / 'a'}\n")
    assert main(["evaluate", "--config", str(cfg), "--methods", "imean"]) == 0
    with open(tmp_path / "a" / "report.csv") as fh:
        rows = [r for r in csv.DictReader(fh) if r["provenance"] == "run"]
    assert {r["method"] for r in rows} == {"imean"} and len(rows) == 2


def test_split_neighbors_train(tmp_path, wsdream_files, capsys):
    data = _data(wsdream_files)
    out = str(tmp_path / "o")
    assert main(["split", "--rt", data[1], "--density", "0.2", "--seed", "2", "--out", out]) == 0
    assert (tmp_path / "o" / "train_d0.2_s2.csv").exists()
    assert main(["neighbors", "--rt", data[1], "--density", "0.2", "--seed", "2", "-k", "4",
                 "--out", out]) == 0
    assert (tmp_path / "o" / "neighbors_d0.2_s2_k4.csv").exists()
    assert main(["train", *data, "--density", "0.2", "--seed", "2", "--out", out, *FAST]) == 0
    assert (tmp_path / "o" / "fiemf_d0.2_s2.npz").exists()
    assert "MAE" in capsys.readouterr().out


def test_sweep_and_report(tmp_path, wsdream_files, capsys):
    out = str(tmp_path / "o")
    assert main(["sweep", *_data(wsdream_files), "--param", "alpha", "--values", "0.5",
                 "--density", "0.2", "--seeds", "1", "--out", out, *FAST]) == 0
    assert (tmp_path / "o" / "sweep_alpha.csv").exists()
    assert main(["evaluate", *_data(wsdream_files), "--methods", "umean,fiemf", "--density",
                 "0.05,0.1,0.15,0.2", "--seed", "1", "--out", out, *FAST]) == 0
    assert main(["report", str(tmp_path / "o" / "report.csv"), "--out", out]) == 0
    with open(tmp_path / "o" / "table.csv") as fh:
        rows = list(csv.reader(fh))
    assert [r[0] for r in rows[1:]] == ["UMEAN", "NIMF", "NBMF", "FIEMF"]
    assert rows[-1][1] == "run"


def test_evaluate_failure_exit_code(tmp_path, wsdream_files):
    assert main(["evaluate", *_data(wsdream_files), "--methods", "fiemf", "--density", "0.2",
                 "--seed", "1", "--out", str(tmp_path), "--alpha", "1", "--lam", "0", "--gamma", "0",
                 "--eta", "80", "--reg-mode", "entry", "--max-iters", "3"]) == 1
