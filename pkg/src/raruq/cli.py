"""Command-line entry point: ``python -m raruq <subcommand>``.

Exit codes: 0 success, 1 runtime error, 2 configuration error, 3 partial failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, dump_toml, from_mapping, load_config
from .harness import RunError, abstain_eval, report, run_uq, select_eval

log = logging.getLogger("raruq")


def _split_overrides(extra: Sequence[str]) -> dict[str, str]:
    """Turn ``--section.key value`` / ``--section.key=value`` pairs into a dict."""
    out: dict[str, str] = {}
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unexpected argument {tok!r}; overrides look like --section.key value")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            value = next(it, None)
            if value is None:
                raise ConfigError(f"{key}: missing value")
        out[key] = value
    return out


def cmd_index(args) -> int:
    from .retrieval import build_index, load_corpus_jsonl

    index = build_index(load_corpus_jsonl(args.corpus))
    index.save(args.out)
    print(f"indexed {index.doc_count} documents -> {args.out}")
    return 0


def cmd_simulate(args) -> int:
    from .synthworld import WorldSpec, build_world, write_world

    spec = WorldSpec(
        n_queries=args.n_queries,
        two_hop_fraction=args.two_hop_fraction,
        corpus_size=args.corpus_size,
        distractor_rate=args.distractor_rate,
        err_scale=args.err_scale,
        trap_scale=args.trap_scale,
        seed=args.seed,
    )
    world = build_world(spec)
    paths = write_world(world, args.out)
    cfg = from_mapping(
        {
            "backend": {"kind": "synthetic", "world": "world.json"},
            "retrieval": {"corpus": "corpus.jsonl"},
            "run": {"dataset": "dataset.jsonl", "runs_dir": "runs"},
        }
    )
    cfg_path = Path(args.out) / "config.toml"
    cfg_path.write_text(dump_toml(cfg))
    print(json.dumps({**paths, "config": str(cfg_path)}, indent=1))
    return 0


def cmd_run(args, overrides) -> int:
    cfg = load_config(args.config, overrides)
    outcome = run_uq(cfg)
    print(
        f"{outcome.run_dir}: {outcome.written} results written, {outcome.skipped} already present, "
        f"{outcome.failures} failures"
    )
    return outcome.exit_code


def _fmt(v):
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def cmd_report(args) -> int:
    out = report(args.run_dir, reference=args.reference, plots=args.plots)
    cols = ["method", "n", "EM", "AUROC", "AUARC", "mean_U", "mean_tokens", "mean_unique_docs", "mean_query_diversity", "p_vs_reference"]
    print("\t".join(cols))
    for row in out["summary"]:
        print("\t".join(_fmt(row[c]) for c in cols))
    print(f"(DeLong p-values against {out['reference']}; no multiple-comparison correction)")
    return 0


def cmd_abstain(args) -> int:
    if args.tau is None and args.calibrate is None:
        raise ConfigError("abstain: pass --tau or --calibrate VALIDATION_RUN")
    rows = abstain_eval(args.run_dir, tau=args.tau, validation_dir=args.calibrate, metric=args.metric)
    cols = ["method", "tau", "A", "B", "C", "D", "reliable_accuracy", "effective_reliability", "abstain_accuracy", "abstain_f1", "flags"]
    print("\t".join(cols))
    for r in rows:
        print("\t".join(_fmt(r[c]) for c in cols))
    return 0


def cmd_select(args) -> int:
    out = select_eval(
        args.run_dirs,
        names=args.names.split(",") if args.names else None,
        method=args.method,
        aggregation=args.aggregation,
        clustering=not args.no_clustering,
        out_path=args.out,
    )
    print(json.dumps(out["summary"], indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="raruq", description="Uncertainty estimation for retrieval-augmented reasoning agents.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("index", help="build a BM25 snapshot from a JSONL corpus")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("simulate", help="write a synthetic world (corpus, dataset, world.json, config.toml)")
    s.add_argument("--out", required=True)
    s.add_argument("--n-queries", type=int, default=200)
    s.add_argument("--two-hop-fraction", type=float, default=0.5)
    s.add_argument("--corpus-size", type=int, default=3000)
    s.add_argument("--distractor-rate", type=float, default=1.0)
    s.add_argument("--err-scale", type=float, default=0.6)
    s.add_argument("--trap-scale", type=float, default=0.6)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("run", help="estimate uncertainty over a dataset; extra --section.key value pairs override the config")
    s.add_argument("--config", default=None)

    s = sub.add_parser("report", help="summary and significance CSVs for a run directory")
    s.add_argument("run_dir")
    s.add_argument("--reference", default=None)
    s.add_argument("--plots", action="store_true")

    s = sub.add_parser("abstain", help="abstention metrics at a fixed or calibrated threshold")
    s.add_argument("run_dir")
    s.add_argument("--tau", type=float, default=None)
    s.add_argument("--calibrate", default=None, metavar="VALIDATION_RUN")
    s.add_argument("--metric", default="abstain_accuracy", choices=["abstain_accuracy", "abstain_f1"])

    s = sub.add_parser("select", help="selection-based ensembling across run directories")
    s.add_argument("run_dirs", nargs="+")
    s.add_argument("--names", default=None, help="comma-separated system names")
    s.add_argument("--method", default="R2C")
    s.add_argument("--aggregation", default="sum", choices=["sum", "mean"])
    s.add_argument("--no-clustering", action="store_true")
    s.add_argument("--out", default=None)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.cmd == "run":
            return cmd_run(args, _split_overrides(extra))
        if extra:
            parser.error(f"unrecognized arguments: {' '.join(extra)}")
        return {
            "index": cmd_index,
            "simulate": cmd_simulate,
            "report": cmd_report,
            "abstain": cmd_abstain,
            "select": cmd_select,
        }[args.cmd](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (RunError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
