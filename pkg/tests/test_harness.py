import csv
import json

import pytest

from raruq.config import ConfigError, load_config
from raruq.gateway import BackendError
from raruq.harness import RunError, abstain_eval, load_results, report, run_uq, select_eval
from raruq.metrics import auroc
from raruq.synthworld import WorldSpec, build_world, write_world


def make_world(path, n=10, seed=0):
    write_world(build_world(WorldSpec(n_queries=n, corpus_size=300, seed=seed)), path)
    (path / "config.toml").write_text(
        '[backend]\nworld = "world.json"\n[retrieval]\ncorpus = "corpus.jsonl"\n'
        '[run]\ndataset = "dataset.jsonl"\nruns_dir = "runs"\n'
    )
    return path / "config.toml"


@pytest.fixture(scope="module")
def world_cfg(tmp_path_factory):
    return make_world(tmp_path_factory.mktemp("w"))


def cfg_with(path, **over):
    base = {"estimators.methods": '["R2C", "SelfC"]', "estimators.B": "4", "run.workers": "2"}
    base.update({k.replace("__", "."): str(v) for k, v in over.items()})
    return load_config(path, base)


@pytest.fixture(scope="module")
def done_run(world_cfg):
    cfg = cfg_with(world_cfg, run__run_id='"base"')
    return run_uq(cfg), cfg


def test_cardinality_and_idempotent_rerun(done_run):
    outcome, cfg = done_run
    assert outcome.written == 20 and outcome.failures == 0 and outcome.exit_code == 0
    rows = load_results(outcome.run_dir)
    assert len(rows) == 20
    again = run_uq(cfg)
    assert again.written == 0 and again.skipped == 20
    assert len(load_results(outcome.run_dir)) == 20
    manifest = json.loads((outcome.run_dir / "manifest.json").read_text())
    assert manifest["config_digest"] == cfg.digest() and manifest["methods"] == ["R2C", "SelfC"]


def test_resume_after_partial(world_cfg, tmp_path):
    cfg = cfg_with(world_cfg, run__run_id='"partial"', run__runs_dir=json.dumps(str(tmp_path)))
    full = run_uq(cfg)
    path = full.run_dir / "results.jsonl"
    lines = path.read_text().splitlines(keepends=True)
    path.write_text("".join(lines[:7]))
    resumed = run_uq(cfg)
    assert resumed.written == 13 and resumed.skipped == 7
    assert sorted(path.read_text().splitlines()) == sorted(l.rstrip("\n") for l in lines)


def test_digest_mismatch_is_config_error(done_run, world_cfg):
    outcome, _ = done_run
    cfg = cfg_with(world_cfg, run__run_id='"base"', estimators__B="5")
    with pytest.raises(ConfigError):
        run_uq(cfg)


def test_master_seed_changes_samples_not_most_likely(world_cfg, tmp_path):
    runs = json.dumps(str(tmp_path))
    a = run_uq(cfg_with(world_cfg, run__run_id='"a"', run__runs_dir=runs, run__master_seed="1"))
    b = run_uq(cfg_with(world_cfg, run__run_id='"b"', run__runs_dir=runs, run__master_seed="2"))
    ra, rb = load_results(a.run_dir), load_results(b.run_dir)
    assert [r["most_likely"] for r in ra] == [r["most_likely"] for r in rb]
    assert [r["samples"] for r in ra] != [r["samples"] for r in rb]


def test_determinism_across_worker_counts(world_cfg, tmp_path):
    runs = json.dumps(str(tmp_path))
    one = run_uq(cfg_with(world_cfg, run__run_id='"w1"', run__runs_dir=runs, run__workers="1", backend__max_in_flight="1"))
    four = run_uq(cfg_with(world_cfg, run__run_id='"w4"', run__runs_dir=runs, run__workers="4", backend__max_in_flight="8"))
    assert (one.run_dir / "results.jsonl").read_bytes() == (four.run_dir / "results.jsonl").read_bytes()


def test_report_recomputes_auroc_and_tokens(done_run):
    outcome, _ = done_run
    out = report(outcome.run_dir)
    rows = load_results(outcome.run_dir)
    for s in out["summary"]:
        rs = [r for r in rows if r["method"] == s["method"]]
        U, y = [r["uncertainty"] for r in rs], [r["correct"] for r in rs]
        if 0 < sum(y) < len(y):
            assert s["AUROC"] == pytest.approx(auroc(U, y), abs=1e-12)
        toks = [p["token_count"] for r in rs for p in r["samples"]]
        assert s["mean_tokens"] == pytest.approx(sum(toks) / len(toks))
        assert s["n"] == 10
    with open(outcome.run_dir / "summary.csv") as fh:
        header = next(csv.reader(fh))
    for col in ("EM", "AUROC", "AUARC", "mean_U", "mean_tokens", "mean_unique_docs", "mean_query_diversity"):
        assert col in header
    assert (outcome.run_dir / "significance.csv").exists()
    assert (outcome.run_dir / "method_R2C.csv").exists()


def test_report_is_pure(done_run):
    outcome, _ = done_run
    report(outcome.run_dir)
    first = {f.name: f.read_bytes() for f in outcome.run_dir.glob("*.csv")}
    report(outcome.run_dir)
    assert {f.name: f.read_bytes() for f in outcome.run_dir.glob("*.csv")} == first


def test_report_empty_dir(tmp_path):
    with pytest.raises(RunError, match="no results"):
        report(tmp_path)


def test_abstain_tau_one_equals_em(done_run):
    outcome, _ = done_run
    rows = load_results(outcome.run_dir)
    for r in abstain_eval(outcome.run_dir, tau=1.0):
        em = sum(x["correct"] for x in rows if x["method"] == r["method"]) / 10
        assert r["abstain_accuracy"] == pytest.approx(em) and r["B"] == r["D"] == 0


def test_abstain_calibrated_grid_member(done_run, tmp_path):
    outcome, _ = done_run
    val_cfg = make_world(tmp_path / "val", n=12, seed=1)
    # distinct ids for the validation split
    ds = tmp_path / "val" / "dataset.jsonl"
    ds.write_text("".join(l.replace('"q0', '"v0') for l in ds.read_text().splitlines(True)))
    val = run_uq(cfg_with(val_cfg, run__run_id='"val"'))
    from raruq.downstream import THRESHOLD_GRID

    for r in abstain_eval(outcome.run_dir, validation_dir=val.run_dir):
        assert r["tau"] in THRESHOLD_GRID


def test_abstain_overlap_is_error(done_run):
    outcome, _ = done_run
    with pytest.raises(RunError, match="overlap"):
        abstain_eval(outcome.run_dir, validation_dir=outcome.run_dir)


def test_select_single_system_identity(done_run):
    outcome, _ = done_run
    s = select_eval([outcome.run_dir], names=["only"])["summary"]
    assert s["selection_EM"] == s["per_system_EM"]["only"] == s["ideal_EM"]


def _fake_run(path, correct):
    path.mkdir()
    with open(path / "results.jsonl", "w") as fh:
        for i, c in enumerate(correct):
            fh.write(json.dumps({"query_id": f"q{i}", "method": "R2C", "uncertainty": 0.5 if c else 0.2,
                                 "correct": c, "golds": ["gold"],
                                 "most_likely": {"response": "gold" if c else f"wrong{path.name}"}}) + "\n")
    return path


def test_select_ideal_is_union(tmp_path):
    a = _fake_run(tmp_path / "a", [1, 1, 0, 0])
    b = _fake_run(tmp_path / "b", [0, 0, 1, 0])
    out = select_eval([a, b], out_path=tmp_path / "sel.csv")
    assert out["summary"]["ideal_EM"] == 0.75
    # the wrong answer always carries the lower uncertainty here
    assert out["summary"]["selection_EM"] == 0.0
    assert (tmp_path / "sel.csv").read_text().startswith("query_id,K,chosen_system")
    nc = select_eval([a, b], clustering=False)
    assert all(r["K"] == 2 for r in nc["rows"])


def test_partial_failure_exit_code(world_cfg, tmp_path):
    from raruq.harness import build_backends

    cfg = cfg_with(world_cfg, run__run_id='"fail"', run__runs_dir=json.dumps(str(tmp_path)), engine__retries="0")
    agent, _, _ = build_backends(cfg)

    class Broken:
        def __init__(self, bad_question):
            self.bad = bad_question

        def complete(self, req):
            if any(self.bad in c for _, c in req.messages):
                raise BackendError("boom", 500)
            return agent.complete(req)

    from raruq.harness import load_dataset

    bad_q = load_dataset(cfg.run.dataset)[3].question
    outcome = run_uq(cfg, backend=Broken(bad_q))
    assert outcome.failures == 2 and outcome.written == 18 and outcome.exit_code == 3
    errs = (outcome.run_dir / "errors.jsonl").read_text().splitlines()
    assert len(errs) == 2 and "boom" in errs[0]
