"""Acceptance criteria 1-12 at desk scale.

The replication grid (criteria 7-11) trains 9 encoder/attention cells x 2
scorings x 5 seeds on the planted-token and distractor tasks plus the three
extra regimes for BiLSTM + additive. On one CPU this takes roughly half an
hour. Set ATTNMI_ACCEPTANCE_DIR to keep the checkpoints between sessions;
cells are keyed by config hash, so a rerun only recomputes what changed.
"""

import itertools
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import binomtest

from attnmi import autodiff as ad
from attnmi.analysis import (AnalysisConfig, analyze, capture, fit_quantizer, mutual_information, weighted_kendall)
from attnmi.data import analytic_distractor_mi, generate_distractor_task, generate_planted_token, generate_symmetric_task
from attnmi.divergences import jsd, kl, tvd
from attnmi.experiments import ExperimentManifest, run
from attnmi.models import ATTENTIONS, ENCODERS, Model, ModelConfig, attention_logits, normalize_scores
from attnmi.trainer import TrainConfig, gradient_check, train_normal

from conftest import record

SEEDS = list(range(5))
ALPHA = 0.05
# 2400 train / 300 validation / 3300 test: the plug-in MI bias shrinks with the test size
SPLIT = {"n": 6000, "T": 10, "vocab_size": 40, "fractions": [0.4, 0.05, 0.55]}
DATASETS = [
    {"name": "planted", "generator": "planted_token", "params": dict(SPLIT), "seed": 0},
    {"name": "distractor", "generator": "distractor", "params": dict(SPLIT, noise_rate=0.11), "seed": 0},
]
DESK_MODEL = {"embed_dim": 16, "hidden_dim": 32, "cnn_kernel_sizes": [1, 3, 5]}
DESK_TRAIN = {"max_epochs": 40, "learning_rate": 0.003}
COMMON = dict(schema_version=1, datasets=DATASETS, seeds=SEEDS, train=DESK_TRAIN, analysis={"permutations": 0})


def sign_test(wins: int, n: int) -> float:
    return binomtest(wins, n, 0.5, alternative="greater").pvalue if n else 1.0


@pytest.fixture(scope="module")
def out_root(tmp_path_factory):
    env = os.environ.get("ATTNMI_ACCEPTANCE_DIR")
    if env:
        Path(env).mkdir(parents=True, exist_ok=True)
        return Path(env)
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def grid(out_root):
    m = ExperimentManifest.from_dict({**COMMON, "name": "grid", "grid": {
        "encoders": list(ENCODERS), "attentions": list(ATTENTIONS), "scorings": ["softmax", "gumbel_softmax"],
        "model": DESK_MODEL}})
    s = run(m, out_root / "grid")
    assert s.ok, s.failures
    return s


@pytest.fixture(scope="module")
def regimes(out_root):
    m = ExperimentManifest.from_dict({**COMMON, "name": "regimes", "models": [
        {**DESK_MODEL, "encoder_kind": "bilstm", "attention_kind": "additive"}],
        "regimes": ["normal", "fix_attn", "fix_rep", "adversarial"]})
    s = run(m, out_root / "regimes")
    assert s.ok, s.failures
    return s


# ---------------------------------------------------------------- property suite


def test_c01_gradient_correctness():
    t0 = time.perf_counter()
    ds = generate_planted_token(200, 6, 20, seed=0)
    worst = {}
    for enc, att, sc in itertools.product(ENCODERS, ATTENTIONS, ("softmax", "gumbel_softmax")):
        cfg = ModelConfig(vocab_size=20, encoder_kind=enc, attention_kind=att, scoring=sc, embed_dim=4,
                          hidden_dim=6, cnn_kernel_sizes=[1, 3])
        errs = gradient_check(Model(cfg, seed=1), ds.train[:2], seed=None if sc == "softmax" else 3)
        worst[(enc, att, sc)] = max(errs.values())
    elapsed = time.perf_counter() - t0
    top = max(worst.values())
    ok = top < 1e-3 and elapsed < 120
    record(1, ok, f"worst rel. err {top:.1e} over {len(worst)} models, {elapsed:.0f}s")
    assert ok


def test_c02_attention_contract():
    rng = np.random.default_rng(0)
    worst_sum = worst_uniform = 0.0
    for att in ATTENTIONS:
        cfg = ModelConfig(vocab_size=20, attention_kind=att, embed_dim=4, hidden_dim=8)
        params = Model(cfg, seed=0).params
        for _ in range(1000):
            T = int(rng.integers(1, 16))
            h = ad.Tensor(rng.normal(scale=3.0, size=(T, 8)))
            a = normalize_scores(attention_logits(h, params, cfg), cfg).data
            assert np.all(a >= 0)
            worst_sum = max(worst_sum, abs(a.sum() - 1))
            same = ad.Tensor(np.tile(rng.normal(size=8), (T, 1)))
            u = normalize_scores(attention_logits(same, params, cfg), cfg).data
            worst_uniform = max(worst_uniform, np.abs(u - 1 / T).max())
    ok = worst_sum <= 1e-6 and worst_uniform <= 1e-9
    record(2, ok, f"max |sum-1| {worst_sum:.1e}, max |a-1/T| on identical rows {worst_uniform:.1e}")
    assert ok


def test_c03_mi_oracle():
    rng = np.random.default_rng(0)
    perfect = mutual_information([0, 1] * 5000, [0, 1] * 5000)
    indep = mutual_information(rng.integers(0, 2, 100_000), rng.integers(0, 2, 100_000))
    cell = mutual_information([0, 0, 0, 1, 1, 1], [0, 0, 1, 0, 1, 1])
    hand = (4 / 6) * np.log2(4 / 3) + (2 / 6) * np.log2(2 / 3)
    ok = abs(perfect - 1) <= 1e-9 and indep < 0.01 and abs(cell - hand) <= 1e-6 and abs(cell - 0.0817) <= 1e-4
    record(3, ok, f"perfect {perfect:.12f}, independent {indep:.5f}, [[2,1],[1,2]] {cell:.7f}")
    assert ok


def test_c04_distractor_mi():
    lines, ok = [], True
    for noise in (0.0, 0.11, 0.3):
        ds = generate_distractor_task(3000, 10, 40, noise, seed=0)
        cfg = ModelConfig(vocab_size=40, encoder_kind="bilstm", attention_kind="additive", **{
            k: v for k, v in DESK_MODEL.items() if k != "cnn_kernel_sizes"})
        model, rep = train_normal(cfg, ds, TrainConfig(seed=0, **DESK_TRAIN))
        trained = rep.test_accuracy >= 0.9 * (1 - noise)
        probe = generate_distractor_task(12500, 10, 40, noise, seed=100)
        examples = probe.train[:10_000]
        pos = probe.meta["signal_positions"]["train"][:10_000]
        H = np.array([r.hidden[p] for r, p in zip(capture(model, examples, batch_size=500), pos)])
        mi = mutual_information(fit_quantizer(H, seed=0).labels, [e.label for e in examples])
        target = analytic_distractor_mi(noise)
        ok = ok and trained and abs(mi - target) <= 0.05
        lines.append(f"noise {noise}: {mi:.3f} vs {target:.3f} (acc {rep.test_accuracy:.3f})")
    record(4, ok, "; ".join(lines))
    assert ok


def brute(m, a):
    num = den = 0.0
    for i, j in itertools.combinations(range(len(m)), 2):
        w = a[i] + a[j]
        num += w * np.sign(m[i] - m[j]) * np.sign(a[i] - a[j])
        den += w
    return num / den


def test_c05_weighted_kendall():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(2, 9))
        m = np.round(rng.random(k), 1)  # rounding creates ties
        a = np.sort(rng.dirichlet(np.ones(k)))[::-1]
        worst = max(worst, abs(weighted_kendall(m, a) - brute(m, a)))
    a = np.array([0.4, 0.3, 0.2, 0.1])
    extremes = weighted_kendall(a * 2, a) == 1.0 and weighted_kendall(-a, a) == -1.0
    ok = worst <= 1e-12 and extremes
    record(5, ok, f"max |tau - brute force| {worst:.1e} over 1000 instances; extremes +-1: {extremes}")
    assert ok


def test_c06_divergences():
    p = np.array([0.2, 0.5, 0.3])
    checks = [
        tvd(p, p) == 0.0, tvd([1, 0], [0, 1]) == 1.0, abs(tvd([0.5, 0.5], [0.75, 0.25]) - 0.25) <= 1e-9,
        kl(p, p) == 0.0, jsd(p, p) == 0.0, abs(jsd([1, 0], [0, 1]) - np.log(2)) <= 1e-9,
        abs(kl([0.5, 0.5], [0.25, 0.75]) - (0.5 * np.log(2) + 0.5 * np.log(2 / 3))) <= 1e-9,
    ]
    rng = np.random.default_rng(0)
    top = max(jsd(rng.dirichlet(np.full(5, 0.1)), rng.dirichlet(np.full(5, 0.1))) for _ in range(2000))
    ok = all(checks) and top <= np.log(2) + 1e-12
    record(6, ok, f"{sum(checks)}/{len(checks)} hand values; max random jsd {top:.4f} <= log 2")
    assert ok


# ---------------------------------------------------------------- directional replications


def cell_mean(s, **where):
    t = s.taus(**where)
    return float(np.mean(list(t.values()))) if t else float("nan")


def test_c07_mechanism_ordering(grid):
    wins = n = 0
    lines, ok = [], True
    for ds in grid.datasets:
        for seed in SEEDS:
            add = [grid.taus(dataset=ds, attention_kind="additive", scoring="softmax", encoder_kind=e).get(seed)
                   for e in ENCODERS]
            dot = [grid.taus(dataset=ds, attention_kind="dot", scoring="softmax", encoder_kind=e).get(seed)
                   for e in ENCODERS]
            if None in add or None in dot:
                continue
            n += 1
            wins += np.mean(add) > np.mean(dot)
        means = {(e, a): cell_mean(grid, dataset=ds, encoder_kind=e, attention_kind=a, scoring="softmax")
                 for e in ENCODERS for a in ATTENTIONS}
        add_m = np.mean([means[(e, "additive")] for e in ENCODERS])
        dot_m = np.mean([means[(e, "dot")] for e in ENCODERS])
        best = max(means.values())
        ba = means[("bilstm", "additive")]
        ok = ok and add_m > dot_m and ba >= best - 0.05
        lines.append(f"{ds}: additive {add_m:.3f} vs dot {dot_m:.3f}, bilstm+additive {ba:.3f} vs max {best:.3f}")
    p = sign_test(wins, n)
    ok = ok and p < ALPHA
    record(7, ok, "; ".join(lines) + f"; sign test {wins}/{n} p={p:.3f}")
    assert ok


def regime_deltas(s, target, datasets=None):
    deltas = []
    for ds in datasets or s.datasets:
        a = s.taus(dataset=ds, regime="normal")
        b = s.taus(dataset=ds, regime=target)
        deltas += [a[k] - b[k] for k in sorted(set(a) & set(b))]
    return np.array(deltas)


def test_c08_fix_attn(regimes):
    d = regime_deltas(regimes, "fix_attn")
    p = sign_test(int((d > 0).sum()), len(d))
    ok = len(d) >= 5 and d.mean() > 0 and p < ALPHA
    record(8, ok, f"mean delta tau {d.mean():+.3f}, {(d > 0).sum()}/{len(d)} positive, sign test p={p:.3f}")
    assert ok


def test_c09_fix_rep(regimes):
    per_ds = {ds: float(regime_deltas(regimes, "fix_rep", [ds]).mean()) for ds in regimes.datasets}
    ok = all(abs(v) <= 0.1 for v in per_ds.values())
    record(9, ok, ", ".join(f"{ds} mean delta tau {v:+.3f}" for ds, v in per_ds.items()) + " (bound 0.1)")
    assert ok


def test_c10_adversarial(regimes):
    lines, ok = [], True
    for ds in regimes.datasets:
        adv = [r["adversarial"] for r in regimes.runs if r["dataset"] == ds and r["regime"] == "adversarial"]
        t = np.mean([a["output_tvd"] for a in adv])
        j = np.mean([a["attention_jsd"] for a in adv])
        a = regimes.taus(dataset=ds, regime="normal")
        b = regimes.taus(dataset=ds, regime="adversarial")
        dt = float(np.mean([a[k] - b[k] for k in sorted(set(a) & set(b))]))
        ok = ok and t <= 0.05 and j >= 0.1 and dt <= 0.15
        lines.append(f"{ds}: TVD {t:.4f}, attention JSD {j:.3f}, delta tau {dt:+.3f}")
    record(10, ok, "; ".join(lines))
    assert ok


def test_c11_gumbel(grid):
    lines, ok = [], True
    ent_s, ent_g = [], []
    for ds in grid.datasets:
        held = 0
        for e, a in itertools.product(ENCODERS, ATTENTIONS):
            ts = cell_mean(grid, dataset=ds, encoder_kind=e, attention_kind=a, scoring="softmax")
            tg = cell_mean(grid, dataset=ds, encoder_kind=e, attention_kind=a, scoring="gumbel_softmax")
            held += tg >= ts or min(ts, tg) >= 0.95
        for r in grid.runs:
            if r["dataset"] == ds:
                (ent_g if r["scoring"] == "gumbel_softmax" else ent_s).append(r["attention_entropy"])
        ok = ok and held > 4
        lines.append(f"{ds}: tau up or saturated in {held}/9 cells")
    # paired per (dataset, seed): mean entropy over the 9 cells
    wins = n = 0
    for ds in grid.datasets:
        for seed in SEEDS:
            es = [r["attention_entropy"] for r in grid.runs if r["dataset"] == ds and r["seed"] == seed
                  and r["scoring"] == "softmax"]
            eg = [r["attention_entropy"] for r in grid.runs if r["dataset"] == ds and r["seed"] == seed
                  and r["scoring"] == "gumbel_softmax"]
            n += 1
            wins += np.mean(eg) < np.mean(es)
    p = sign_test(wins, n)
    ok = ok and np.mean(ent_g) < np.mean(ent_s) and p < ALPHA
    lines.append(f"entropy {np.mean(ent_s):.3f} -> {np.mean(ent_g):.3f}, {wins}/{n} lower, sign test p={p:.3f}")
    record(11, ok, "; ".join(lines))
    assert ok


def test_c12_uniform_caution():
    ds = generate_symmetric_task(1000, 8, 30, seed=0)
    reports = []
    for att in ATTENTIONS:
        cfg = ModelConfig(vocab_size=30, encoder_kind="mlp", attention_kind=att, embed_dim=8, hidden_dim=16)
        model, _ = train_normal(cfg, ds, TrainConfig(max_epochs=3, learning_rate=0.003))
        reports.append(analyze(capture(model, ds.test), AnalysisConfig(permutations=0)))
    spread = max(max(d["mean_attention"] for d in r.per_rank) - min(d["mean_attention"] for d in r.per_rank)
                 for r in reports)
    ok = spread <= 0.01 and all("near_uniform_attention" in r.flags and r.tau_confidence == "degenerate"
                                for r in reports)
    record(12, ok, f"mean-attention spread {spread:.1e}; confidences {[r.tau_confidence for r in reports]}")
    assert ok
