"""Command-line entry point: ``python -m attnmi <verb> ...``.

Verbs: generate-data, train, analyze, run, compare, plot-data.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments as ex
from .analysis import AnalysisConfig, analyze, capture, save_report, write_records
from .data import GENERATORS, export_split, make_dataset
from .errors import AttnMIError
from .models import ATTENTIONS, ENCODERS, SCORINGS, ModelConfig
from .trainer import REGIMES, TrainConfig, load_run, save_run, train

log = logging.getLogger("attnmi")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--manifest", default=d(None), help="experiment manifest (JSON)")
    parser.add_argument("--out", default=d(None), help="output directory (default: $ATTNMI_OUT or ./attnmi_out)")
    parser.add_argument("--seed", type=int, default=d(None), help="random seed")
    parser.add_argument("--workers", type=int, default=d(None), help="parallel cells")
    parser.add_argument("--log-level", default=d("INFO"), choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _json_arg(text: str | None) -> dict:
    if not text:
        return {}
    p = Path(text)
    return json.loads(p.read_text()) if p.exists() else json.loads(text)


def _dataset_spec(args) -> dict:
    if args.data:
        return {"path": args.data}
    params = _json_arg(args.params)
    return {"generator": args.generator, "params": params, "seed": args.seed or 0}


def _add_dataset_flags(p) -> None:
    p.add_argument("--data", help="dataset directory (train/validation/test.jsonl) or a JSONL file")
    p.add_argument("--generator", choices=sorted(GENERATORS), default="planted_token")
    p.add_argument("--params", help='generator parameters as JSON, e.g. \'{"n": 3000, "T": 10, "vocab_size": 40}\'')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attnmi", description="attention vs. mutual-information experiments")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic dataset (or every manifest dataset) as JSONL")
    _global_flags(p, suppress=True)
    _add_dataset_flags(p)

    p = sub.add_parser("train", help="train one model and write a run directory")
    _global_flags(p, suppress=True)
    _add_dataset_flags(p)
    p.add_argument("--encoder", choices=ENCODERS, default="bilstm")
    p.add_argument("--attention", choices=ATTENTIONS, default="additive")
    p.add_argument("--scoring", choices=SCORINGS, default="softmax")
    p.add_argument("--model-config", help="extra ModelConfig fields (JSON string or file)")
    p.add_argument("--regime", choices=REGIMES, default="normal")
    p.add_argument("--base", help="run directory of the normal model (fix_rep / adversarial)")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--train-config", help="extra TrainConfig fields (JSON string or file)")

    p = sub.add_parser("analyze", help="rank/MI analysis of a run directory, or re-analysis of a manifest")
    _global_flags(p, suppress=True)
    _add_dataset_flags(p)
    p.add_argument("--run", help="run directory written by 'train'")
    p.add_argument("--analysis-config", help="AnalysisConfig fields (JSON string or file)")
    p.add_argument("--records", action="store_true", help="also dump captured attention records as JSONL")

    p = sub.add_parser("run", help="full train -> capture -> analyze grid from a manifest")
    _global_flags(p, suppress=True)

    p = sub.add_parser("compare", help="delta tau table between two regimes")
    _global_flags(p, suppress=True)
    p.add_argument("--summary", help="summary.json (default: <out>/summary.json)")
    p.add_argument("--baseline", default="normal")
    p.add_argument("--target", required=True)

    p = sub.add_parser("plot-data", help="write box-plot CSVs and tables from a summary")
    _global_flags(p, suppress=True)
    p.add_argument("--summary", help="summary.json (default: <out>/summary.json)")
    return parser


def _need_manifest(args) -> ex.ExperimentManifest:
    if not args.manifest:
        raise AttnMIError(f"'{args.verb}' needs --manifest")
    m = ex.ExperimentManifest.load(args.manifest)
    if args.seed is not None:
        m.seeds = [args.seed]
    return m


def _summary_path(args) -> Path:
    if args.summary:
        return Path(args.summary)
    if args.manifest:
        return ex.resolve_output(ex.ExperimentManifest.load(args.manifest), args.out) / "summary.json"
    return Path(args.out or ex.default_output_root()) / "summary.json"


def cmd_generate_data(args) -> int:
    if args.manifest:
        m = _need_manifest(args)
        root = ex.resolve_output(m, args.out) / "data"
        for spec in m.datasets:
            export_split(make_dataset({k: v for k, v in spec.items() if k != "name"}), root / spec["name"])
            print(root / spec["name"])
        return 0
    out = Path(args.out or ex.default_output_root() / "data" / args.generator)
    export_split(make_dataset(_dataset_spec(args)), out)
    print(out)
    return 0


def cmd_train(args) -> int:
    ds = make_dataset(_dataset_spec(args))
    cfg = ModelConfig.from_dict({"vocab_size": ds.vocab_size, "output_size": ds.output_size,
                                 **_json_arg(args.model_config), "encoder_kind": args.encoder,
                                 "attention_kind": args.attention, "scoring": args.scoring})
    tc = TrainConfig.from_dict({**_json_arg(args.train_config), "regime": args.regime,
                                "seed": args.seed or 0, "lambda": args.lam})
    base = None
    if args.base:
        base, _, _ = load_run(args.base)
        tc.base_checkpoint = str(Path(args.base) / "model.json")
    model, report = train(cfg, ds, tc, base=base)
    out = Path(args.out or ex.default_output_root() / "runs" / f"{args.encoder}-{args.attention}-{args.regime}")
    save_run(out, model, tc, report)
    print(json.dumps({"out": str(out), "best_epoch": report.best_epoch, "test_accuracy": report.test_accuracy}))
    return 0


def cmd_analyze(args) -> int:
    if args.manifest:
        s = ex.reanalyze(_need_manifest(args), args.out)
        print(json.dumps(s.gumbel or {"runs": len(s.runs), "failures": len(s.failures)}))
        return 0 if s.ok else 1
    if not args.run:
        raise AttnMIError("'analyze' needs --run or --manifest")
    model, _, _ = load_run(args.run)
    cfg = AnalysisConfig(**_json_arg(args.analysis_config))
    if args.seed is not None:
        cfg.seed = args.seed
    ds = make_dataset(_dataset_spec(args))
    records = capture(model, getattr(ds, cfg.split))
    report = analyze(records, cfg)
    out = Path(args.out or args.run)
    out.mkdir(parents=True, exist_ok=True)
    save_report(report, out / f"analysis-{cfg.hash()}.json")
    if args.records:
        write_records(records, out / "records.jsonl")
    print(json.dumps({"k": report.k, "tau": report.weighted_kendall_tau, "confidence": report.tau_confidence,
                      "flags": report.flags}))
    return 0


def cmd_run(args) -> int:
    s = ex.run(_need_manifest(args), args.out, args.workers)
    print(json.dumps({"runs": len(s.runs), "failures": len(s.failures), "gumbel": s.gumbel}))
    return 0 if s.ok else 1


def cmd_compare(args) -> int:
    s = ex.GridSummary.load(_summary_path(args))
    print(json.dumps(ex.compare(s, args.baseline, args.target), indent=2))
    return 0


def cmd_plot_data(args) -> int:
    path = _summary_path(args)
    s = ex.GridSummary.load(path)
    out = Path(args.out) if args.out and args.summary else path.parent / "tables"
    for p in ex.emit_plot_data(s, out):
        print(p)
    return 0


COMMANDS = {"generate-data": cmd_generate_data, "train": cmd_train, "analyze": cmd_analyze, "run": cmd_run,
            "compare": cmd_compare, "plot-data": cmd_plot_data}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except (AttnMIError, OSError, json.JSONDecodeError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
