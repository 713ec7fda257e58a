import json

from raruq.cli import main


def test_simulate_run_report_abstain_select(tmp_path, capsys):
    w = tmp_path / "w"
    assert main(["simulate", "--out", str(w), "--n-queries", "8", "--corpus-size", "200", "--seed", "3"]) == 0
    assert (w / "config.toml").exists()
    assert main(["run", "--config", str(w / "config.toml"), "--estimators.B", "3", "--run.run_id=r1",
                 "--estimators.methods", "R2C,SelfC,ReaC,RrrC,PTrue"]) == 0
    run = w / "runs" / "r1"
    assert sum(1 for _ in open(run / "results.jsonl")) == 40
    capsys.readouterr()
    assert main(["report", str(run), "--plots"]) == 0
    out = capsys.readouterr().out
    assert "AUROC" in out and "no multiple-comparison correction" in out
    assert (run / "accuracy_rejection.svg").exists() and (run / "auroc_vs_tokens.svg").exists()
    assert main(["abstain", str(run), "--tau", "0.9"]) == 0
    assert (run / "abstain.csv").exists()
    capsys.readouterr()
    assert main(["select", str(run), "--names", "sys", "--out", str(tmp_path / "sel.csv")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["n"] == 8 and summary["selection_EM"] == summary["per_system_EM"]["sys"]


def test_index_subcommand(tmp_path, capsys):
    (tmp_path / "c.jsonl").write_text('{"id": "a", "text": "x y"}\n{"id": "b", "text": "y"}\n')
    assert main(["index", "--corpus", str(tmp_path / "c.jsonl"), "--out", str(tmp_path / "i.pkl")]) == 0
    assert "indexed 2 documents" in capsys.readouterr().out


def test_config_error_exit_2(tmp_path, capsys):
    main(["simulate", "--out", str(tmp_path), "--n-queries", "3", "--corpus-size", "30"])
    assert main(["run", "--config", str(tmp_path / "config.toml"), "--estimators.B", "0"]) == 2
    assert "estimators.B" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "config.toml"), "--estimators.methods", "Nope"]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.toml")]) == 2
    assert main(["abstain", str(tmp_path)]) == 2


def test_runtime_error_exit_1(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 1
    assert "no results" in capsys.readouterr().err
