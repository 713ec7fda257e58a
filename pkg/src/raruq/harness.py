"""Run orchestration, persistence and the report / abstain / select evaluations.

A run directory holds:

* ``manifest.json``: resolved config, its digest, seed, inputs and timestamps;
* ``results.jsonl``: one uncertainty result per (query, method), in dataset order;
* ``generations.jsonl``: one record per generated path;
* ``errors.jsonl``: per-item failures.

Every report is computed from these files alone.
"""

from __future__ import annotations

import csv
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import __version__
from .config import Config, ConfigError, config_digest
from .core import QAItem, ReasoningPath, UncertaintyResult, dumps
from .downstream import (
    Candidate,
    CandidatePool,
    abstain_metrics,
    calibrate_threshold,
    cluster_responses,
    confusion_from,
    no_clustering,
    score_and_select,
)
from .engine import EngineConfig, RAREngine
from .estimators import EstimatorConfig, UQEstimator
from .gateway import AgentBackend, BackendError, BoundedBackend, PromptTemplate, RemoteBackend
from .metrics import (
    HashEmbedder,
    UndefinedMetricError,
    auarc,
    accuracy_rejection_curve,
    auroc,
    delong_test,
    exact_match,
    query_diversity,
    unique_docs,
)
from .perturbations import PerturbationActions
from .prompts import DEFAULTS
from .retrieval import BM25Retriever, HTTPScoreClient, build_index, load_corpus_jsonl, load_index

log = logging.getLogger(__name__)


class RunError(RuntimeError):
    pass


def read_jsonl(path) -> list[dict]:
    p = Path(path)
    if not p.exists():
        return []
    out = []
    with p.open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def load_dataset(path) -> list[QAItem]:
    items = [QAItem.from_dict(d) for d in read_jsonl(path)]
    seen = set()
    for it in items:
        if it.id in seen:
            raise ConfigError(f"run.dataset: duplicate query id {it.id!r}")
        seen.add(it.id)
    return items


# -- building the pipeline from config --


def _templates(cfg: Config) -> dict[str, PromptTemplate]:
    out = dict(DEFAULTS)
    for name, body in cfg.prompts.items():
        try:
            out[name] = PromptTemplate(name, body, DEFAULTS[name].required_vars)
        except ValueError as exc:
            raise ConfigError(f"prompts.{name}: {exc}") from exc
    return out


def build_backends(cfg: Config) -> tuple[AgentBackend, Optional[AgentBackend], Optional[AgentBackend]]:
    """Returns ``(agent, summary, judge)``; the latter two may be ``None`` (meaning: use the agent)."""
    b = cfg.backend
    if b.kind == "synthetic":
        if not b.world:
            raise ConfigError("backend.world: required for the synthetic backend")
        from .synthworld import load_world

        try:
            world = load_world(b.world)
        except FileNotFoundError as exc:
            raise ConfigError(f"backend.world: file not found: {b.world}") from exc
        agent: AgentBackend = world.agent()
        summary = judge = None
    else:
        agent = RemoteBackend(b.url, b.model, b.token_env or None, b.timeout)
        summary = RemoteBackend(b.summary_url, b.summary_model or b.model, b.token_env or None, b.timeout) if b.summary_url else None
        judge = RemoteBackend(b.judge_url, b.judge_model or b.model, b.token_env or None, b.timeout) if b.judge_url else None
    wrap = lambda x: None if x is None else BoundedBackend(x, b.max_in_flight)  # noqa: E731
    return wrap(agent), wrap(summary), wrap(judge)


def build_retriever(cfg: Config) -> BM25Retriever:
    r = cfg.retrieval
    try:
        if r.index:
            index = load_index(r.index)
        elif r.corpus:
            index = build_index(load_corpus_jsonl(r.corpus))
        else:
            raise ConfigError("retrieval.corpus: a corpus or an index snapshot is required")
    except FileNotFoundError as exc:
        raise ConfigError(f"retrieval: file not found: {exc.filename}") from exc
    reranker = HTTPScoreClient(r.rerank_url, r.rerank_timeout) if r.rerank_url else None
    return BM25Retriever(index, reranker=reranker, pool_size=r.pool_size)


def build_estimator(cfg: Config, backend=None, retriever=None) -> UQEstimator:
    templates = _templates(cfg)
    agent, summary, judge = build_backends(cfg) if backend is None else (backend, None, None)
    retriever = retriever or build_retriever(cfg)
    e = cfg.engine
    engine = RAREngine(
        agent,
        retriever,
        EngineConfig(
            k_docs=cfg.retrieval.k,
            max_steps=e.max_steps,
            most_likely_temperature=e.most_likely_temperature,
            sample_temperature=e.sample_temperature,
            max_tokens=e.max_tokens,
            rar_prompt=templates["rar_system"],
            retries=e.retries,
            backoff=e.backoff,
        ),
    )
    actions = PerturbationActions(engine, summary, templates)
    judge_backend = judge or (agent if cfg.estimators.equivalence == "judge" else None)
    est = UQEstimator(
        engine,
        actions,
        judge_backend=judge_backend,
        master_seed=cfg.run.master_seed,
        max_in_flight=cfg.backend.max_in_flight,
        ptrue_template=templates["p_true"],
        equivalence_template=templates["equivalence"],
    )
    return est


# -- run --


@dataclass
class RunOutcome:
    run_dir: Path
    written: int
    skipped: int
    failures: int

    @property
    def exit_code(self) -> int:
        return 3 if self.failures else 0


def _result_record(res: UncertaintyResult, item: QAItem) -> dict:
    d = res.to_dict()
    d["golds"] = list(item.gold_answers)
    d["correct"] = exact_match(res.most_likely.response, item.gold_answers)
    return d


def _generation_records(res: UncertaintyResult) -> list[dict]:
    recs = [{"query_id": res.query_id, "method": res.method, "role": "most_likely", "b": 0, "path": res.most_likely.to_dict()}]
    for b, s in enumerate(res.samples, start=1):
        recs.append({"query_id": res.query_id, "method": res.method, "role": "sample", "b": b, "path": s.to_dict()})
    return recs


def run_dir_for(cfg: Config) -> Path:
    run_id = cfg.run.run_id or cfg.digest()[:12]
    return Path(cfg.run.runs_dir) / run_id


def run_uq(cfg: Config, backend=None, retriever=None, run_dir: Optional[Path] = None) -> RunOutcome:
    """Estimate uncertainty for every dataset item and method; resumable."""
    if not cfg.run.dataset:
        raise ConfigError("run.dataset: required")
    try:
        items = load_dataset(cfg.run.dataset)
    except FileNotFoundError as exc:
        raise ConfigError(f"run.dataset: file not found: {cfg.run.dataset}") from exc
    out = Path(run_dir) if run_dir else run_dir_for(cfg)
    out.mkdir(parents=True, exist_ok=True)
    resolved = cfg.to_dict()
    manifest_path = out / "manifest.json"
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    if manifest_path.exists():
        old = json.loads(manifest_path.read_text())
        if old.get("config_digest") != config_digest(resolved):
            raise ConfigError(f"{out}: existing run was produced by a different config")
        started = old.get("started", started)

    done = {(d["query_id"], d["method"]) for d in read_jsonl(out / "results.jsonl")}
    methods = list(cfg.estimators.methods)
    todo = [(it, [m for m in methods if (it.id, m) not in done]) for it in items]
    todo = [(it, ms) for it, ms in todo if ms]
    skipped = len(items) * len(methods) - sum(len(ms) for _, ms in todo)

    manifest = {
        "run_id": out.name,
        "config_digest": config_digest(resolved),
        "config": resolved,
        "master_seed": cfg.run.master_seed,
        "dataset_path": cfg.run.dataset,
        "corpus_path": cfg.retrieval.index or cfg.retrieval.corpus,
        "methods": methods,
        "started": started,
        "finished": None,
        "engine_version": __version__,
    }
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))

    written = failures = 0
    if todo:
        est = build_estimator(cfg, backend, retriever)
        ecfgs = {
            m: EstimatorConfig(
                method=m,
                B=cfg.estimators.B,
                sample_temperature=cfg.engine.sample_temperature,
                equivalence=cfg.estimators.equivalence,
                ptrue_use_samples=cfg.estimators.ptrue_use_samples,
            )
            for m in methods
        }

        def work(entry):
            item, ms = entry
            rows = []
            for m in ms:
                try:
                    res = est.estimate(item, ecfgs[m])
                    rows.append(("ok", m, res))
                except (BackendError, ValueError) as exc:
                    log.error("query %s method %s failed: %s", item.id, m, exc)
                    rows.append(("error", m, f"{type(exc).__name__}: {exc}"))
            est.forget(item.id)
            return item, rows

        lock = threading.Lock()
        with (out / "results.jsonl").open("a") as res_fh, (out / "generations.jsonl").open("a") as gen_fh, (
            out / "errors.jsonl"
        ).open("a") as err_fh, ThreadPoolExecutor(cfg.run.workers) as pool:
            # map() yields in submission order, so files are written in dataset order
            for item, rows in pool.map(work, todo):
                with lock:
                    for status, m, payload in rows:
                        if status == "ok":
                            res_fh.write(dumps(_result_record(payload, item)) + "\n")
                            for rec in _generation_records(payload):
                                gen_fh.write(dumps(rec) + "\n")
                            written += 1
                        else:
                            err_fh.write(dumps({"query_id": item.id, "method": m, "error": payload}) + "\n")
                            failures += 1
                    res_fh.flush()
                    gen_fh.flush()
        est.close()

    manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    manifest["failures"] = failures
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return RunOutcome(out, written, skipped, failures)


# -- reports --


def load_results(run_dir) -> list[dict]:
    rows = read_jsonl(Path(run_dir) / "results.jsonl")
    if not rows:
        raise RunError(f"{run_dir}: no results")
    return rows


def by_method(rows: Iterable[dict]) -> dict[str, list[dict]]:
    out: dict[str, list[dict]] = {}
    for r in rows:
        out.setdefault(r["method"], []).append(r)
    return out


def _safe(fn, *args) -> float:
    try:
        return float(fn(*args))
    except UndefinedMetricError:
        return float("nan")


def _diversity(samples: Sequence[dict], embedder) -> Optional[float]:
    queries = [s["query"] for p in samples for s in p["states"] if "query" in s]
    if len(queries) < 2:
        return None
    return query_diversity(embedder.embed(queries))


def summarize(rows: Sequence[dict], reference: str = "SelfC", embedder=None) -> tuple[list[dict], list[dict]]:
    """Per-method summary rows and per-pair DeLong rows."""
    embedder = embedder or HashEmbedder()
    groups = by_method(rows)
    summary = []
    for method, rs in groups.items():
        U = [r["uncertainty"] for r in rs]
        y = [int(r["correct"]) for r in rs]
        tokens = [s["token_count"] for r in rs for s in r["samples"]]
        ud = [unique_docs([ReasoningPath.from_dict(s) for s in r["samples"]]) for r in rs]
        div = [d for d in (_diversity(r["samples"], embedder) for r in rs) if d is not None]
        summary.append(
            {
                "method": method,
                "n": len(rs),
                "EM": float(np.mean(y)),
                "AUROC": _safe(auroc, U, y),
                "AUARC": _safe(auarc, U, y),
                "mean_U": float(np.mean(U)),
                "mean_tokens": float(np.mean(tokens)) if tokens else 0.0,
                "mean_unique_docs": float(np.mean(ud)),
                "mean_query_diversity": float(np.mean(div)) if div else float("nan"),
            }
        )
    sig = []
    if reference in groups:
        ref = {r["query_id"]: r for r in groups[reference]}
        for method, rs in groups.items():
            if method == reference:
                continue
            common = [r for r in rs if r["query_id"] in ref]
            y = [int(ref[r["query_id"]]["correct"]) for r in common]
            a = [r["uncertainty"] for r in common]
            b = [ref[r["query_id"]]["uncertainty"] for r in common]
            try:
                d = delong_test(a, b, y)
                sig.append({"method": method, "reference": reference, "n": len(common), "auroc": d.auroc_a,
                            "auroc_reference": d.auroc_b, "z": d.z, "p": d.p, "degenerate": d.degenerate})
            except UndefinedMetricError:
                sig.append({"method": method, "reference": reference, "n": len(common), "auroc": float("nan"),
                            "auroc_reference": float("nan"), "z": float("nan"), "p": float("nan"), "degenerate": True})
    p_by = {s["method"]: s["p"] for s in sig}
    for s in summary:
        s["p_vs_reference"] = p_by.get(s["method"], float("nan"))
    return summary, sig


def _write_csv(path: Path, rows: Sequence[dict], header: Optional[Sequence[str]] = None) -> None:
    header = list(header or (rows[0].keys() if rows else []))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k) for k in header})


def report(run_dir, reference: Optional[str] = None, plots: bool = False) -> dict:
    run_dir = Path(run_dir)
    rows = load_results(run_dir)
    if reference is None:
        try:
            reference = json.loads((run_dir / "manifest.json").read_text())["config"]["estimators"]["reference"]
        except (FileNotFoundError, KeyError):
            reference = "SelfC"
    summary, sig = summarize(rows, reference)
    _write_csv(run_dir / "summary.csv", summary)
    _write_csv(run_dir / "significance.csv", sig,
               ["method", "reference", "n", "auroc", "auroc_reference", "z", "p", "degenerate"])
    # DeLong p-values are per pair; no multiple-comparison correction is applied
    for method, rs in by_method(rows).items():
        _write_csv(run_dir / f"method_{method}.csv",
                   [{"query_id": r["query_id"], "U": r["uncertainty"], "correct": r["correct"]} for r in rs])
    if plots:
        _plots(run_dir, rows, summary)
    return {"summary": summary, "significance": sig, "reference": reference}


def _plots(run_dir: Path, rows, summary) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping plots")
        return
    fig, ax = plt.subplots(figsize=(5, 4))
    for method, rs in by_method(rows).items():
        x, acc = accuracy_rejection_curve([r["uncertainty"] for r in rs], [r["correct"] for r in rs])
        ax.plot(x, acc, label=method)
    ax.set_xlabel("rejection rate")
    ax.set_ylabel("accuracy of retained")
    ax.legend()
    fig.tight_layout()
    fig.savefig(run_dir / "accuracy_rejection.svg")
    plt.close(fig)
    fig, ax = plt.subplots(figsize=(5, 4))
    for s in summary:
        ax.scatter(s["mean_tokens"], s["AUROC"])
        ax.annotate(s["method"], (s["mean_tokens"], s["AUROC"]))
    ax.set_xlabel("mean generated tokens per sample")
    ax.set_ylabel("AUROC")
    fig.tight_layout()
    fig.savefig(run_dir / "auroc_vs_tokens.svg")
    plt.close(fig)


def abstain_eval(
    run_dir,
    tau: Optional[float] = None,
    validation_dir=None,
    metric: str = "abstain_accuracy",
) -> list[dict]:
    """Abstention report per method at a fixed or calibrated threshold."""
    if tau is None and validation_dir is None:
        raise ConfigError("abstain: give a threshold or a validation run to calibrate on")
    test = by_method(load_results(run_dir))
    val = by_method(load_results(validation_dir)) if validation_dir is not None else {}
    if val:
        test_ids = {r["query_id"] for rs in test.values() for r in rs}
        val_ids = {r["query_id"] for rs in val.values() for r in rs}
        overlap = test_ids & val_ids
        if overlap:
            raise RunError(f"validation and test splits overlap on {len(overlap)} queries, e.g. {sorted(overlap)[0]!r}")
    out = []
    for method, rs in test.items():
        if validation_dir is not None:
            if method not in val:
                raise RunError(f"validation run has no results for {method}")
            t = calibrate_threshold([(r["uncertainty"], int(r["correct"])) for r in val[method]], metric)
        else:
            t = tau
        cm = confusion_from([r["uncertainty"] for r in rs], [int(r["correct"]) for r in rs], t)
        rep = abstain_metrics(cm)
        out.append({"method": method, "tau": t, "A": cm.answered_correct, "B": cm.abstained_correct,
                    "C": cm.answered_incorrect, "D": cm.abstained_incorrect, **rep.as_dict()})
    _write_csv(Path(run_dir) / "abstain.csv", out)
    return out


def select_eval(
    run_dirs: Sequence,
    names: Optional[Sequence[str]] = None,
    method: str = "R2C",
    aggregation: str = "sum",
    clustering: bool = True,
    out_path=None,
) -> dict:
    """Selection-based ensembling across systems (one run directory per system)."""
    if not run_dirs:
        raise ConfigError("select: at least one run directory required")
    names = list(names) if names else [Path(d).name for d in run_dirs]
    if len(set(names)) != len(names):
        raise ConfigError("select: system names must be unique")
    systems = []
    for d in run_dirs:
        rs = [r for r in load_results(d) if r["method"] == method]
        if not rs:
            raise RunError(f"{d}: no results for method {method}")
        systems.append({r["query_id"]: r for r in rs})
    common = [q for q in systems[0] if all(q in s for s in systems[1:])]
    rows = []
    for q in common:
        pool = CandidatePool(q, tuple(Candidate(n, s[q]["most_likely"]["response"], s[q]["uncertainty"]) for n, s in zip(names, systems)))
        clusters = cluster_responses(pool) if clustering else no_clustering(pool)
        chosen, _, _ = score_and_select(clusters, aggregation)
        golds = systems[0][q]["golds"]
        rows.append({"query_id": q, "K": len(clusters), "chosen_system": chosen.system,
                     "chosen_response": chosen.response, "u_of_chosen": chosen.uncertainty,
                     "correct": exact_match(chosen.response, golds)})
    per_system = {n: float(np.mean([int(s[q]["correct"]) for q in common])) for n, s in zip(names, systems)}
    ideal = float(np.mean([max(int(s[q]["correct"]) for s in systems) for q in common])) if common else 0.0
    summary = {
        "n": len(common),
        "method": method,
        "aggregation": aggregation,
        "clustering": clustering,
        "selection_EM": float(np.mean([r["correct"] for r in rows])) if rows else 0.0,
        "per_system_EM": per_system,
        "ideal_EM": ideal,
    }
    if out_path is not None:
        _write_csv(Path(out_path), rows, ["query_id", "K", "chosen_system", "chosen_response", "u_of_chosen", "correct"])
    return {"summary": summary, "rows": rows}
