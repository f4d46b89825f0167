"""Manifest-driven experiment grids: train -> capture -> analyze per cell, then aggregate.

A manifest names one or more datasets, a set of model configurations (given
explicitly or as an encoder x attention x scoring grid), the regimes to run,
the seeds, and the train/analysis settings. Every cell is keyed by a hash of
its dataset spec, model config, regime and train config (seed included), so a
finished cell is never retrained. Analysis results live under their own hash
and can be recomputed from cached checkpoints.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .analysis import AnalysisConfig, analyze, capture, config_hash, load_report, save_report
from .data import DatasetSplit, make_dataset
from .errors import AttnMIError, ConfigurationError
from .models import ATTENTIONS, ENCODERS, SCORINGS, ModelConfig
from .trainer import REGIMES, TrainConfig, load_run, save_run, train

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_OUT = "attnmi_out"
BASE_REGIMES = ("normal", "fix_attn")  # do not depend on another cell
DEFAULT_LAMBDA = 1e-2  # adversarial weight when the manifest gives none
SATURATION = 0.95  # tau at or above this counts as "unchanged" in the gumbel tally

MANIFEST_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "attnmi experiment manifest",
    "type": "object",
    "required": ["schema_version", "datasets"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "datasets": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name"],
                "properties": {
                    "name": {"type": "string"},
                    "generator": {"enum": ["planted_token", "distractor", "symmetric"]},
                    "params": {"type": "object"},
                    "seed": {"type": "integer"},
                    "path": {"type": "string"},
                },
            },
        },
        "models": {"type": "array", "items": {"type": "object"},
                   "description": "explicit ModelConfig dicts; vocab_size/output_size default to the dataset's"},
        "grid": {
            "type": "object",
            "properties": {
                "encoders": {"type": "array", "items": {"enum": list(ENCODERS)}},
                "attentions": {"type": "array", "items": {"enum": list(ATTENTIONS)}},
                "scorings": {"type": "array", "items": {"enum": list(SCORINGS)}},
                "model": {"type": "object", "description": "shared ModelConfig fields"},
            },
        },
        "regimes": {"type": "array", "items": {"enum": list(REGIMES)}},
        "seeds": {"type": "array", "items": {"type": "integer"}, "uniqueItems": True},
        "train": {"type": "object", "description": "TrainConfig fields except seed and regime"},
        "analysis": {"type": "object", "description": "AnalysisConfig fields"},
        "output_dir": {"type": "string"},
        "workers": {"type": "integer", "minimum": 1},
    },
}


def default_output_root() -> Path:
    return Path(os.environ.get("ATTNMI_OUT", DEFAULT_OUT))


@dataclass
class ExperimentManifest:
    datasets: list[dict]
    models: list[dict] = field(default_factory=list)
    grid: dict | None = None
    regimes: list[str] = field(default_factory=lambda: ["normal"])
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    train: dict = field(default_factory=dict)
    analysis: dict = field(default_factory=dict)
    output_dir: str | None = None
    workers: int = 1
    name: str = "grid"
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported schema_version {self.schema_version}")
        if not self.datasets:
            raise ConfigurationError("manifest needs at least one dataset")
        names = [d.get("name") for d in self.datasets]
        if None in names or len(set(names)) != len(names):
            raise ConfigurationError("every dataset needs a unique name")
        for d in self.datasets:
            if ("path" in d) == ("generator" in d):
                raise ConfigurationError(f"dataset {d['name']!r}: give exactly one of generator or path")
        if not self.models and not self.grid:
            raise ConfigurationError("manifest needs models or a grid")
        bad = set(self.regimes) - set(REGIMES)
        if bad or not self.regimes:
            raise ConfigurationError(f"unknown regimes {sorted(bad)}")
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise ConfigurationError("seeds must be a nonempty list of distinct integers")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        for key in ("seed", "regime"):
            if key in self.train:
                raise ConfigurationError(f"train.{key} is set per cell, not in the manifest")
        TrainConfig.from_dict(self.train)  # field check
        AnalysisConfig(**self.analysis)
        self.model_dicts()

    def model_dicts(self) -> list[dict]:
        out = [dict(m) for m in self.models]
        if self.grid:
            shared = dict(self.grid.get("model", {}))
            for enc, att, sc in itertools.product(self.grid.get("encoders", ENCODERS),
                                                  self.grid.get("attentions", ATTENTIONS),
                                                  self.grid.get("scorings", ["softmax"])):
                out.append({**shared, "encoder_kind": enc, "attention_kind": att, "scoring": sc})
        for m in out:
            ModelConfig.from_dict({"vocab_size": 10, **m})  # key/value check before any work
        return out

    def analysis_config(self) -> AnalysisConfig:
        return AnalysisConfig(**self.analysis)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentManifest:
        d = dict(d)
        if "schema_version" not in d:
            raise ConfigurationError("manifest lacks schema_version")
        allowed = set(MANIFEST_SCHEMA["properties"])
        unknown = set(d) - allowed
        if unknown:
            raise ConfigurationError(f"unknown manifest keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> ExperimentManifest:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


# ---------------------------------------------------------------------------
# cells


@dataclass
class Cell:
    dataset: str
    dataset_spec: dict
    model: dict
    regime: str
    seed: int
    train: dict
    base: str | None = None  # key of the normal cell this one builds on

    @property
    def key(self) -> str:
        return config_hash({"dataset": self.dataset_spec, "model": self.model, "regime": self.regime,
                            "train": self.train, "base": self.base})

    def label(self) -> dict:
        return {"dataset": self.dataset, "encoder_kind": self.model["encoder_kind"],
                "attention_kind": self.model["attention_kind"], "scoring": self.model.get("scoring", "softmax"),
                "regime": self.regime, "seed": self.seed}


_DATASETS: dict[str, DatasetSplit] = {}


def _dataset(spec: dict) -> DatasetSplit:
    """Per-process cache; generation is deterministic in the spec."""
    key = config_hash(spec)
    if key not in _DATASETS:
        _DATASETS[key] = make_dataset({k: v for k, v in spec.items() if k != "name"})
    return _DATASETS[key]


def plan_cells(manifest: ExperimentManifest) -> list[Cell]:
    """Expand the manifest; base regimes come first so dependents can find their checkpoints."""
    cells = []
    for ds_spec in manifest.datasets:
        ds = _dataset(ds_spec)
        for m in manifest.model_dicts():
            model = ModelConfig.from_dict({"vocab_size": ds.vocab_size, "output_size": ds.output_size, **m}).to_dict()
            for seed in manifest.seeds:
                bases = {}
                for regime in sorted(manifest.regimes, key=lambda r: REGIMES.index(r)):
                    extra = {"lambda": DEFAULT_LAMBDA} if regime == "adversarial" else {}
                    tc = TrainConfig.from_dict({**extra, **manifest.train, "seed": seed, "regime": regime})
                    if regime != "adversarial":
                        tc.lam = None
                    base = None
                    if regime in ("fix_rep", "adversarial"):
                        if "normal" not in bases:
                            normal = TrainConfig.from_dict({**manifest.train, "seed": seed, "regime": "normal"})
                            bases["normal"] = Cell(ds_spec["name"], ds_spec, model, "normal", seed,
                                                   normal.to_dict()).key
                        base = bases["normal"]
                    cell = Cell(ds_spec["name"], ds_spec, model, regime, seed, tc.to_dict(), base)
                    if regime == "normal":
                        bases["normal"] = cell.key
                    cells.append(cell)
    return cells


def _cell_dir(root: Path, key: str) -> Path:
    return root / "cells" / key


def run_cell(cell: Cell, root: str, analysis: dict) -> dict:
    """Train (unless cached), capture and analyze one cell. Never raises."""
    root = Path(root)
    out = _cell_dir(root, cell.key)
    acfg = AnalysisConfig(**analysis)
    result = {"key": cell.key, **cell.label(), "status": "ok", "trained": False, "analyzed": False,
              "base": cell.base}
    t0 = time.perf_counter()
    try:
        ds = _dataset(cell.dataset_spec)
        if (out / "report.json").exists():
            model, _, report = load_run(out)
        else:
            base_model = None
            if cell.base is not None:
                base_dir = _cell_dir(root, cell.base)
                if not (base_dir / "model.json").exists():
                    raise ConfigurationError(f"base checkpoint {base_dir} missing (did the normal cell fail?)")
                base_model, _, _ = load_run(base_dir)
            tc = TrainConfig.from_dict(cell.train)
            if cell.base is not None:
                tc.base_checkpoint = str(_cell_dir(root, cell.base) / "model.json")
            model, report = train(ModelConfig.from_dict(cell.model), ds, tc, base=base_model)
            save_run(out, model, tc, report)
            (out / "cell.json").write_text(json.dumps({**cell.label(), "key": cell.key, "base": cell.base,
                                                       "dataset_spec": cell.dataset_spec}, indent=2))
            result["trained"] = True
        afile = out / f"analysis-{acfg.hash()}.json"
        if afile.exists():
            ar = load_report(afile)
        else:
            examples = getattr(ds, acfg.split)
            ar = analyze(capture(model, examples), acfg)
            save_report(ar, afile)
            result["analyzed"] = True
        result.update(tau=ar.weighted_kendall_tau, tau_confidence=ar.tau_confidence, flags=ar.flags,
                      attention_entropy=ar.attention_entropy, k=ar.k,
                      test_accuracy=report.test_accuracy, adversarial=report.adversarial)
    except (AttnMIError, OSError, ValueError, FloatingPointError) as exc:
        log.error("cell %s (%s) failed: %s", cell.key, cell.label(), exc)
        result.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    result["seconds"] = time.perf_counter() - t0
    return result


def _pool_run(cells: list[Cell], root: Path, analysis: dict, workers: int) -> list[dict]:
    if workers == 1 or len(cells) <= 1:
        return [run_cell(c, str(root), analysis) for c in cells]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_cell, cells, itertools.repeat(str(root)), itertools.repeat(analysis)))


def resolve_output(manifest: ExperimentManifest, out=None) -> Path:
    if out is not None:
        return Path(out)
    if manifest.output_dir:
        return Path(manifest.output_dir)
    return default_output_root() / manifest.name


def run(manifest: ExperimentManifest, out=None, workers: int | None = None) -> GridSummary:
    """Execute every cell, write per-cell artifacts plus ``summary.json`` and CSV tables.

    Cells that fail are recorded in ``summary.failures`` and the rest still run.
    """
    root = resolve_output(manifest, out)
    root.mkdir(parents=True, exist_ok=True)
    manifest.save(root / "manifest.json")
    workers = workers or manifest.workers
    cells = plan_cells(manifest)
    first = [c for c in cells if c.regime in BASE_REGIMES]
    second = [c for c in cells if c.regime not in BASE_REGIMES]
    log.info("running %d cells (%d dependent) with %d worker(s) in %s", len(cells), len(second), workers, root)
    # join barrier: dependents start only after every base cell finished
    results = _pool_run(first, root, manifest.analysis, workers)
    results += _pool_run(second, root, manifest.analysis, workers)
    summary = summarize(results)
    (root / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2))
    emit_plot_data(summary, root / "tables")
    return summary


# ---------------------------------------------------------------------------
# aggregation

_CELL_FIELDS = ("dataset", "encoder_kind", "attention_kind", "scoring", "regime")


def _quartiles(values) -> dict:
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return {"n": 0, "mean": None, "median": None, "q1": None, "q3": None, "min": None, "max": None}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"n": int(len(v)), "mean": float(v.mean()), "median": float(med), "q1": float(q1), "q3": float(q3),
            "min": float(v.min()), "max": float(v.max())}


@dataclass
class GridSummary:
    runs: list[dict]
    cells: list[dict] = field(default_factory=list)
    delta_tau: dict = field(default_factory=dict)
    gumbel: dict = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def datasets(self) -> list[str]:
        return sorted({r["dataset"] for r in self.runs})

    @property
    def regimes(self) -> list[str]:
        return sorted({r["regime"] for r in self.runs}, key=REGIMES.index)

    def taus(self, **where) -> dict[int, float]:
        """``{seed: tau}`` for the runs matching ``where`` (degenerate runs with no tau are skipped)."""
        out = {}
        for r in self.runs:
            if r.get("status") == "ok" and r.get("tau") is not None and all(r[k] == v for k, v in where.items()):
                out[r["seed"]] = r["tau"]
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> GridSummary:
        return cls(**d)

    @classmethod
    def load(cls, path) -> GridSummary:
        return cls.from_dict(json.loads(Path(path).read_text()))


def summarize(results: list[dict]) -> GridSummary:
    """Pure function of the per-cell results."""
    runs = sorted(results, key=lambda r: tuple(str(r[k]) for k in _CELL_FIELDS) + (r["seed"],))
    summary = GridSummary(runs=runs, failures=[r for r in runs if r["status"] != "ok"])
    groups: dict[tuple, list[dict]] = {}
    for r in runs:
        groups.setdefault(tuple(r[k] for k in _CELL_FIELDS), []).append(r)
    for key, rs in groups.items():
        ok = [r for r in rs if r["status"] == "ok"]
        taus = [r["tau"] for r in ok if r.get("tau") is not None]
        ent = [r["attention_entropy"] for r in ok]
        summary.cells.append({**dict(zip(_CELL_FIELDS, key)), "tau": _quartiles(taus),
                              "attention_entropy": float(np.mean(ent)) if ent else None,
                              "n_runs": len(rs), "n_failed": len(rs) - len(ok),
                              "n_degenerate": sum(r.get("tau_confidence") == "degenerate" for r in ok),
                              "n_low_confidence": sum(r.get("tau_confidence") == "low" for r in ok)})
    for target in summary.regimes:
        if target != "normal" and "normal" in summary.regimes:
            summary.delta_tau[target] = compare(summary, "normal", target)
    if {"softmax", "gumbel_softmax"} <= {r["scoring"] for r in runs}:
        summary.gumbel = gumbel_counts(summary)
    return summary


def _pairs(summary: GridSummary, where_a: dict, where_b: dict, group: tuple) -> dict:
    """Per cell, mean(a) - mean(b) over seeds where both have a tau."""
    out = {}
    keys = {tuple(r[k] for k in group) for r in summary.runs}
    for key in sorted(keys, key=str):
        sel = dict(zip(group, key))
        a = summary.taus(**sel, **where_a)
        b = summary.taus(**sel, **where_b)
        shared = sorted(set(a) & set(b))
        if shared:
            out[key] = (float(np.mean([a[s] for s in shared])), float(np.mean([b[s] for s in shared])), shared)
    return out


def compare(summary: GridSummary, baseline: str, target: str) -> dict:
    """Delta tau = mean tau(baseline) - mean tau(target), per dataset and per model cell.

    Only seeds present (with a tau) under both regimes contribute.
    """
    present = set(summary.regimes)
    for reg in (baseline, target):
        if reg not in present:
            raise ConfigurationError(f"regime {reg!r} not in summary (have {sorted(present)})")
    table = {}
    for ds in summary.datasets:
        pairs = _pairs(summary, {"dataset": ds, "regime": baseline}, {"dataset": ds, "regime": target},
                       ("encoder_kind", "attention_kind", "scoring"))
        if not pairs:
            raise ConfigurationError(f"no shared seeds between {baseline!r} and {target!r} on {ds!r}")
        cells = [{"encoder_kind": k[0], "attention_kind": k[1], "scoring": k[2], "delta_tau": a - b,
                  "n_seeds": len(s)} for k, (a, b, s) in pairs.items()]
        table[ds] = {"cells": cells, "mean_delta_tau": float(np.mean([c["delta_tau"] for c in cells]))}
    return table


def gumbel_counts(summary: GridSummary, regime: str = "normal") -> dict:
    """Per dataset, how many (encoder, attention) cells gain tau under gumbel scoring, as ``N/M``."""
    out = {}
    for ds in summary.datasets:
        pairs = _pairs(summary, {"dataset": ds, "regime": regime, "scoring": "gumbel_softmax"},
                       {"dataset": ds, "regime": regime, "scoring": "softmax"}, ("encoder_kind", "attention_kind"))
        m = len(pairs)
        inc = sum(g > s for g, s, _ in pairs.values())
        held = sum(g >= s or min(g, s) >= SATURATION for g, s, _ in pairs.values())
        ent = {}
        for c in summary.cells:
            if c["dataset"] == ds and c["regime"] == regime:
                ent.setdefault((c["encoder_kind"], c["attention_kind"]), {})[c["scoring"]] = c["attention_entropy"]
        lower = sum(1 for e in ent.values() if len(e) == 2 and None not in e.values()
                    and e["gumbel_softmax"] < e["softmax"])
        out[ds] = {"increased": f"{inc}/{m}", "increased_or_saturated": f"{held}/{m}",
                   "entropy_decreased": f"{lower}/{len(ent)}", "m": m, "n_increased": inc,
                   "n_increased_or_saturated": held, "n_entropy_decreased": lower}
    return out


# ---------------------------------------------------------------------------
# CSV output

PLOT_COLUMNS = ("attention_kind", "encoder_kind", "scoring", "regime", "seed", "tau")


def emit_plot_data(summary: GridSummary, directory) -> list[Path]:
    """Box-plot data (one CSV per dataset) plus the delta-tau, adversarial and gumbel tables."""
    if not summary.runs:
        raise ConfigurationError("empty summary")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for ds in summary.datasets:
        path = directory / f"tau_{ds}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(PLOT_COLUMNS)
            for r in summary.runs:
                if r["dataset"] == ds:
                    tau = "" if r.get("tau") is None else repr(float(r["tau"]))
                    w.writerow([r["attention_kind"], r["encoder_kind"], r["scoring"], r["regime"], r["seed"], tau])
        written.append(path)
    if summary.delta_tau:
        path = directory / "delta_tau.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dataset", "target_regime", "encoder_kind", "attention_kind", "scoring", "delta_tau",
                        "n_seeds"])
            for target, table in summary.delta_tau.items():
                for ds, t in table.items():
                    for c in t["cells"]:
                        w.writerow([ds, target, c["encoder_kind"], c["attention_kind"], c["scoring"],
                                    repr(c["delta_tau"]), c["n_seeds"]])
        written.append(path)
    adv = [r for r in summary.runs if r.get("adversarial")]
    if adv:
        path = directory / "adversarial.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dataset", "encoder_kind", "attention_kind", "scoring", "seed", "lambda", "output_tvd",
                        "output_jsd", "attention_kl", "attention_jsd", "tau"])
            for r in adv:
                a = r["adversarial"]
                w.writerow([r["dataset"], r["encoder_kind"], r["attention_kind"], r["scoring"], r["seed"],
                            a["lambda"], a["output_tvd"], a["output_jsd"], a["attention_kl"], a["attention_jsd"],
                            "" if r.get("tau") is None else r["tau"]])
        written.append(path)
    if summary.gumbel:
        path = directory / "gumbel.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dataset", "increased", "increased_or_saturated", "entropy_decreased"])
            for ds, g in summary.gumbel.items():
                w.writerow([ds, g["increased"], g["increased_or_saturated"], g["entropy_decreased"]])
        written.append(path)
    return written


def read_plot_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"] = int(r["seed"])
        r["tau"] = float(r["tau"]) if r["tau"] else None
    return rows


def reanalyze(manifest: ExperimentManifest, out=None) -> GridSummary:
    """Analysis stage only, on checkpoints that already exist. Missing checkpoints count as failures."""
    root = resolve_output(manifest, out)
    results = []
    for cell in plan_cells(manifest):
        if not (_cell_dir(root, cell.key) / "report.json").exists():
            results.append({"key": cell.key, **cell.label(), "status": "failed", "base": cell.base,
                            "error": "no checkpoint; run the training stage first"})
            continue
        results.append(run_cell(cell, str(root), manifest.analysis))
    summary = summarize(results)
    (root / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2))
    emit_plot_data(summary, root / "tables")
    return summary
