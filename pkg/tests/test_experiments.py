import json

import numpy as np
import pytest

from attnmi import experiments as ex
from attnmi.cli import main
from attnmi.errors import AttnMIError, ConfigurationError

TINY_DATA = {"name": "planted", "generator": "planted_token", "params": {"n": 300, "T": 6, "vocab_size": 20},
             "seed": 0}
TINY_MODEL = {"embed_dim": 8, "hidden_dim": 8}
TINY_TRAIN = {"max_epochs": 3, "learning_rate": 0.01}


def manifest(**kw):
    d = {"schema_version": 1, "datasets": [TINY_DATA],
         "grid": {"encoders": ["mlp"], "attentions": ["additive"], "model": TINY_MODEL},
         "seeds": [0, 1], "train": TINY_TRAIN, "analysis": {"permutations": 5}}
    d.update(kw)
    return ex.ExperimentManifest.from_dict(d)


def count_training(monkeypatch):
    calls = []
    real = ex.train

    def spy(*a, **k):
        calls.append(1)
        return real(*a, **k)

    monkeypatch.setattr(ex, "train", spy)
    return calls


# ---------------------------------------------------------------- manifest


@pytest.mark.parametrize("bad", [
    {"seeds": [1, 1]},
    {"seeds": []},
    {"schema_version": 2},
    {"colour": "red"},
    {"regimes": ["sideways"]},
    {"train": {"seed": 3}},
    {"train": {"learning_rat": 0.1}},
    {"grid": {"encoders": ["transformer"]}},
    {"datasets": [{"name": "x"}]},
    {"datasets": [TINY_DATA, TINY_DATA]},
    {"workers": 0},
])
def test_manifest_rejects(bad):
    with pytest.raises(ConfigurationError):
        manifest(**bad)


def test_manifest_requires_schema_version():
    with pytest.raises(ConfigurationError):
        ex.ExperimentManifest.from_dict({"datasets": [TINY_DATA], "models": [{}]})


def test_manifest_round_trip(tmp_path):
    m = manifest()
    m.save(tmp_path / "m.json")
    assert ex.ExperimentManifest.load(tmp_path / "m.json") == m
    assert set(json.loads((tmp_path / "m.json").read_text())) <= set(ex.MANIFEST_SCHEMA["properties"])
    assert ex.ExperimentManifest.from_dict({"schema_version": 1, "datasets": [TINY_DATA],
                                            "models": [{}]}).seeds == list(range(10))


def test_plan_orders_base_regimes_first_and_links_dependents():
    m = manifest(regimes=["adversarial", "fix_rep", "normal", "fix_attn"], seeds=[0])
    cells = ex.plan_cells(m)
    assert [c.regime for c in cells] == ["normal", "fix_attn", "fix_rep", "adversarial"]
    normal = cells[0]
    assert all(c.base == normal.key for c in cells[2:]) and cells[1].base is None
    assert cells[3].train["lambda"] == ex.DEFAULT_LAMBDA and cells[0].train["lambda"] is None
    assert len({c.key for c in cells}) == 4
    assert [c.key for c in ex.plan_cells(m)] == [c.key for c in cells]


def test_output_root_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("ATTNMI_OUT", str(tmp_path / "env"))
    m = manifest(name="g")
    assert ex.resolve_output(m) == tmp_path / "env" / "g"
    assert ex.resolve_output(manifest(output_dir=str(tmp_path / "m"))) == tmp_path / "m"
    assert ex.resolve_output(m, tmp_path / "cli") == tmp_path / "cli"


# ---------------------------------------------------------------- grid execution


@pytest.fixture(scope="module")
def grid(tmp_path_factory):
    out = tmp_path_factory.mktemp("grid")
    m = manifest(grid={"encoders": ["mlp"], "attentions": ["additive", "dot"],
                       "scorings": ["softmax", "gumbel_softmax"], "model": TINY_MODEL},
                 regimes=["normal", "fix_attn", "fix_rep", "adversarial"], seeds=[0, 1, 2])
    return m, out, ex.run(m, out)


def test_one_cell_two_seeds_layout(tmp_path, monkeypatch):
    calls = count_training(monkeypatch)
    s = ex.run(manifest(), tmp_path)
    reports = list(tmp_path.glob("cells/*/report.json"))
    assert len(reports) == 2 and len(calls) == 2
    assert (tmp_path / "summary.json").exists() and (tmp_path / "manifest.json").exists()
    assert s.ok and len(s.runs) == 2 and all(r["trained"] and r["analyzed"] for r in s.runs)

    calls.clear()
    again = ex.run(manifest(), tmp_path)
    assert not calls and not any(r["trained"] or r["analyzed"] for r in again.runs)
    assert [r["tau"] for r in again.runs] == [r["tau"] for r in s.runs]


def test_new_analysis_config_reuses_checkpoints(tmp_path, monkeypatch):
    ex.run(manifest(), tmp_path)
    calls = count_training(monkeypatch)
    s = ex.reanalyze(manifest(analysis={"permutations": 5, "seed": 7}), tmp_path)
    assert not calls and s.ok and all(r["analyzed"] for r in s.runs)
    missing = ex.reanalyze(manifest(seeds=[5]), tmp_path)
    assert len(missing.failures) == 1


def test_parallel_matches_serial(tmp_path):
    m = manifest(regimes=["normal", "fix_rep"])
    a = ex.run(m, tmp_path / "a", workers=1)
    b = ex.run(m, tmp_path / "b", workers=2)
    assert [(r["key"], r["tau"]) for r in a.runs] == [(r["key"], r["tau"]) for r in b.runs]


def test_grid_summary_tables(grid):
    m, out, s = grid
    assert s.ok and len(s.runs) == 2 * 2 * 4 * 3
    assert all(r["tau"] is None or -1 <= r["tau"] <= 1 for r in s.runs)
    rows = ex.read_plot_csv(out / "tables" / "tau_planted.csv")
    assert len(rows) == len(s.runs)
    assert list(rows[0]) == list(ex.PLOT_COLUMNS)
    # quartiles recomputed from the CSV match the summary
    for c in s.cells:
        taus = [r["tau"] for r in rows if r["tau"] is not None and r["attention_kind"] == c["attention_kind"]
                and r["encoder_kind"] == c["encoder_kind"] and r["scoring"] == c["scoring"]
                and r["regime"] == c["regime"]]
        if taus:
            q1, med, q3 = np.percentile(taus, [25, 50, 75])
            assert abs(q1 - c["tau"]["q1"]) <= 1e-9 and abs(med - c["tau"]["median"]) <= 1e-9
            assert abs(q3 - c["tau"]["q3"]) <= 1e-9
    for name in ("delta_tau.csv", "adversarial.csv", "gumbel.csv"):
        assert (out / "tables" / name).exists()
    assert set(s.delta_tau) == {"fix_attn", "fix_rep", "adversarial"}
    g = s.gumbel["planted"]
    assert g["m"] == 2 and g["increased"].endswith("/2")
    assert ex.GridSummary.load(out / "summary.json") == s
    assert ex.summarize(s.runs) == s


def test_adversarial_runs_record_divergences(grid):
    _, _, s = grid
    adv = [r for r in s.runs if r["regime"] == "adversarial"]
    assert adv and all(r["adversarial"]["lambda"] == ex.DEFAULT_LAMBDA for r in adv)
    assert all(0 <= r["adversarial"]["output_tvd"] <= 1 for r in adv)


def test_compare(grid):
    _, _, s = grid
    same = ex.compare(s, "normal", "normal")
    assert all(c["delta_tau"] == 0 for c in same["planted"]["cells"]) and same["planted"]["mean_delta_tau"] == 0
    d = ex.compare(s, "normal", "fix_attn")
    assert d == s.delta_tau["fix_attn"]
    assert all(c["n_seeds"] <= 3 for c in d["planted"]["cells"])
    with pytest.raises(ConfigurationError):
        ex.compare(ex.summarize([r for r in s.runs if r["regime"] == "normal"]), "normal", "fix_rep")


def test_failed_cell_is_recorded(tmp_path, monkeypatch):
    real = ex.train

    def flaky(cfg, ds, tc, base=None):
        if tc.seed == 1:
            raise AttnMIError("injected")
        return real(cfg, ds, tc, base=base)

    monkeypatch.setattr(ex, "train", flaky)
    s = ex.run(manifest(regimes=["normal", "fix_rep"]), tmp_path)
    assert not s.ok
    failed = {(r["regime"], r["seed"]) for r in s.failures}
    assert failed == {("normal", 1), ("fix_rep", 1)}
    assert any("injected" in r["error"] for r in s.failures)
    assert all(r["status"] == "ok" for r in s.runs if r["seed"] == 0)
    assert json.loads((tmp_path / "summary.json").read_text())["failures"]

    m = manifest(regimes=["normal", "fix_rep"])
    m.save(tmp_path / "m.json")
    assert main(["run", "--manifest", str(tmp_path / "m.json"), "--out", str(tmp_path), "--log-level", "ERROR"]) == 1


# ---------------------------------------------------------------- CLI


def test_cli_end_to_end(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("ATTNMI_OUT", str(tmp_path / "env"))
    m = manifest(regimes=["normal", "fix_attn"], seeds=[0])
    m.save(tmp_path / "m.json")
    q = ["--log-level", "ERROR"]
    assert main(["run", "--manifest", str(tmp_path / "m.json")] + q) == 0
    root = tmp_path / "env" / "grid"
    assert (root / "summary.json").exists()
    capsys.readouterr()
    assert main(["compare", "--manifest", str(tmp_path / "m.json"), "--target", "fix_attn"] + q) == 0
    assert "mean_delta_tau" in json.loads(capsys.readouterr().out)["planted"]
    assert main(["compare", "--summary", str(root / "summary.json"), "--target", "adversarial"] + q) == 2
    assert main(["plot-data", "--summary", str(root / "summary.json"), "--out", str(tmp_path / "t")] + q) == 0
    assert (tmp_path / "t" / "tau_planted.csv").exists()
    assert main(["analyze", "--manifest", str(tmp_path / "m.json")] + q) == 0
    assert main(["run", "--manifest", str(tmp_path / "missing.json")] + q) == 2


def test_cli_single_run(tmp_path, capsys):
    q = ["--log-level", "ERROR"]
    params = json.dumps(TINY_DATA["params"])
    assert main(["generate-data", "--params", params, "--out", str(tmp_path / "data")] + q) == 0
    assert (tmp_path / "data" / "train.jsonl").exists()
    tc = json.dumps(TINY_TRAIN)
    mc = json.dumps(TINY_MODEL)
    assert main(["train", "--data", str(tmp_path / "data"), "--encoder", "mlp", "--model-config", mc,
                 "--train-config", tc, "--out", str(tmp_path / "run")] + q) == 0
    assert main(["train", "--data", str(tmp_path / "data"), "--encoder", "mlp", "--model-config", mc,
                 "--train-config", tc, "--regime", "adversarial", "--lambda", "0.001",
                 "--base", str(tmp_path / "run"), "--out", str(tmp_path / "adv")] + q) == 0
    capsys.readouterr()
    assert main(["analyze", "--run", str(tmp_path / "adv"), "--data", str(tmp_path / "data"), "--records",
                 "--analysis-config", '{"permutations": 3}'] + q) == 0
    out = json.loads(capsys.readouterr().out)
    assert {"k", "tau", "confidence", "flags"} <= set(out)
    assert (tmp_path / "adv" / "records.jsonl").exists()
    assert list((tmp_path / "adv").glob("analysis-*.json"))
    assert main(["analyze"] + q) == 2
