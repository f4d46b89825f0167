"""Mutual information between attention-ranked hidden states and model outputs.

The pipeline:

1. :func:`capture` runs a model over a split and keeps, per sample, the
   hidden states, attention scores and output logits.
2. :func:`select_k` picks how many attention ranks to analyse.
3. :func:`rank_group` collects, for each rank ``r``, the hidden state that
   received the ``r``-th largest attention score in every sample.
4. Each group is quantized with k-means (:func:`fit_quantizer`), outputs
   are quantized (binary logits) or replaced by predicted classes, and
   :func:`mutual_information` gives one MI value per rank.
5. :func:`weighted_kendall` compares the MI order with the mean-attention
   order, weighting each pair by its attention mass.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import Example, batches
from .errors import AnalysisError, ShapeError

# ---------------------------------------------------------------------------
# records


@dataclass
class AttentionRecord:
    id: int
    hidden: np.ndarray      # (T, l)
    attention: np.ndarray   # (T,)
    logits: np.ndarray      # (o,)
    pred: int
    label: int

    @property
    def length(self) -> int:
        return len(self.attention)

    def to_dict(self) -> dict:
        return {"id": int(self.id), "T": self.length, "hidden": self.hidden.tolist(),
                "attention": self.attention.tolist(), "logits": self.logits.tolist(),
                "pred": int(self.pred), "label": int(self.label)}

    @classmethod
    def from_dict(cls, d: dict) -> AttentionRecord:
        hidden = np.asarray(d["hidden"], dtype=float)
        attention = np.asarray(d["attention"], dtype=float)
        T = int(d.get("T", len(attention)))
        if hidden.ndim != 2 or hidden.shape[0] != T or attention.shape != (T,):
            raise ShapeError(f"record {d.get('id')}: inconsistent T={T}, hidden {hidden.shape}, "
                             f"attention {attention.shape}")
        return cls(int(d["id"]), hidden, attention, np.atleast_1d(np.asarray(d["logits"], dtype=float)),
                   int(d["pred"]), int(d["label"]))


def capture(model, examples: Sequence[Example], batch_size: int = 128) -> list[AttentionRecord]:
    """Evaluation-mode forward pass over ``examples``, one record per sample."""
    records: list[AttentionRecord | None] = [None] * len(examples)
    with ad.no_grad():
        for b in batches(examples, batch_size):
            res = model.forward(b.tokens, b.mask, b.query, b.query_mask, mode="eval")
            probs = res.probabilities.data
            preds = (probs[:, 0] >= 0.5).astype(int) if probs.shape[-1] == 1 else probs.argmax(-1)
            for row, idx in enumerate(b.indices):
                T = int(b.mask[row].sum())
                records[idx] = AttentionRecord(
                    id=int(idx),
                    hidden=res.hidden.data[row, :T].copy(),
                    attention=res.attention.data[row, :T].copy(),
                    logits=res.logits.data[row].copy(),
                    pred=int(preds[row]),
                    label=int(b.labels[row]),
                )
    return records


def write_records(records: Sequence[AttentionRecord], path) -> None:
    """JSONL dump: one ``{id, T, hidden, attention, logits, pred, label}`` object per line."""
    with Path(path).open("w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict()) + "\n")


def read_records(path) -> list[AttentionRecord]:
    out = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(AttentionRecord.from_dict(json.loads(line)))
                except (KeyError, ValueError, TypeError) as exc:
                    raise AnalysisError(f"{path}:{lineno}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# choosing k and grouping by rank


def select_k_details(records: Sequence[AttentionRecord], percentile: float = 10.0,
                     threshold: float = 1e-5, coverage: float = 0.8) -> tuple[int, int, int]:
    """Return ``(k, k_percentile, k_attention)``.

    ``k_percentile`` is the given percentile of sequence lengths (lower
    interpolation). ``k_attention`` is the largest ``k`` for which at least
    ``coverage`` of all samples have a ``k``-th largest attention weight
    above ``threshold``; samples shorter than ``k`` count as failing.
    """
    if not records:
        raise AnalysisError("no records to select k from")
    lengths = np.array([r.length for r in records])
    k1 = max(1, int(np.percentile(lengths, percentile, method="lower")))
    max_len = int(lengths.max())
    ok = np.zeros((len(records), max_len), dtype=bool)
    for i, r in enumerate(records):
        s = np.sort(r.attention)[::-1]
        ok[i, :len(s)] = s > threshold
    frac = ok.mean(axis=0)
    passing = np.nonzero(frac >= coverage)[0]
    # frac is non-increasing in k, so the largest passing index is a prefix end
    k2 = int(passing.max()) + 1 if passing.size else 1
    return max(1, min(k1, k2)), k1, k2


def select_k(records: Sequence[AttentionRecord], **kwargs) -> int:
    return select_k_details(records, **kwargs)[0]


def attention_ranks(attention: np.ndarray) -> np.ndarray:
    """Positions sorted by descending attention; ties go to the earlier position."""
    return np.argsort(-np.asarray(attention), kind="stable")


@dataclass
class RankGroup:
    rank: int
    members: np.ndarray         # (n_retained, l)
    mean_attention: float
    sample_ids: np.ndarray
    positions: np.ndarray


def rank_group(records: Sequence[AttentionRecord], k: int) -> list[RankGroup]:
    """Group the ``r``-th most attended hidden state of each sample, for ``r = 1..k``.

    Samples shorter than ``k`` are dropped from every group.
    """
    if k < 1:
        raise AnalysisError(f"k must be >= 1, got {k}")
    kept = [r for r in records if r.length >= k]
    if not kept:
        raise AnalysisError(f"no sample has length >= k={k}")
    order = np.stack([attention_ranks(r.attention)[:k] for r in kept])       # (n, k)
    scores = np.stack([r.attention[o] for r, o in zip(kept, order)])          # (n, k)
    ids = np.array([r.id for r in kept])
    groups = []
    for j in range(k):
        members = np.stack([r.hidden[o[j]] for r, o in zip(kept, order)])
        groups.append(RankGroup(j + 1, members, float(scores[:, j].mean()), ids, order[:, j]))
    return groups


# ---------------------------------------------------------------------------
# vector quantization


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    history: list[float]
    n_iter: int


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(X: np.ndarray, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [X[rng.integers(n)]]
    closest = _sq_dists(X, centers[0][None])[:, 0]
    for _ in range(1, n_clusters):
        total = closest.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=closest / total)
        centers.append(X[idx])
        closest = np.minimum(closest, _sq_dists(X, X[idx][None])[:, 0])
    return np.array(centers)


def kmeans(X, n_clusters: int, rng: np.random.Generator, n_init: int = 10, max_iter: int = 100) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding; best of ``n_init`` restarts.

    Iteration stops once assignments no longer change. ``history`` holds the
    within-cluster sum of squares after each assignment step of the best run.
    Empty clusters keep their previous centroid.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if n_clusters < 1 or n_clusters > len(X):
        raise AnalysisError(f"cannot form {n_clusters} clusters from {len(X)} points")
    best: KMeansResult | None = None
    for _ in range(n_init):
        C = _kmeanspp(X, n_clusters, rng)
        labels = None
        history = []
        for it in range(1, max_iter + 1):
            d = _sq_dists(X, C)
            new = d.argmin(axis=1)
            history.append(float(d[np.arange(len(X)), new].sum()))
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            counts = np.bincount(labels, minlength=n_clusters)
            sums = np.zeros_like(C)
            np.add.at(sums, labels, X)
            filled = counts > 0
            C = C.copy()
            C[filled] = sums[filled] / counts[filled, None]
        labels = new
        inertia = history[-1]
        if best is None or inertia < best.inertia:
            best = KMeansResult(C, labels, inertia, history, it)
    return best


@dataclass
class QuantizerModel:
    kind: str
    n_clusters: int
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    history: list[float] = field(default_factory=list)
    tried: list[int] = field(default_factory=list)

    def assign(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        return _sq_dists(X, self.centroids).argmin(axis=1)

    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_clusters)


def fit_quantizer(vectors, kind: str = "representation", seed: int | np.random.Generator = 0,
                  n_start: int = 50, n_max: int = 200, n_step: int = 5, min_count: int = 2,
                  grow: bool = False, logit_clusters: int = 5, n_init: int = 10,
                  max_iter: int = 100) -> QuantizerModel:
    """k-means quantizer.

    Representations: start at ``n_start`` clusters and step down by
    ``n_step`` (then by one below ``n_step``) until every centroid owns at
    least ``min_count`` vectors; falls back to a single cluster. With
    ``grow=True`` and every cluster holding ten or more vectors, the count
    is instead raised toward ``n_max`` while the rule still holds.
    Logits: a fixed ``logit_clusters`` clusters.
    """
    X = np.asarray(vectors, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if kind not in ("representation", "logit"):
        raise AnalysisError(f"unknown quantizer kind {kind!r}")
    if len(X) < 2 * min_count:
        raise AnalysisError(f"need at least {2 * min_count} vectors to quantize, got {len(X)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_unique = len(np.unique(X, axis=0))

    def fit(n):
        r = kmeans(X, n, rng, n_init=n_init, max_iter=max_iter)
        return QuantizerModel(kind, n, r.centroids, r.labels, r.inertia, r.history)

    if kind == "logit":
        q = fit(max(1, min(logit_clusters, n_unique)))
        q.tried = [q.n_clusters]
        return q

    tried = []
    n = max(1, min(n_start, n_max, n_unique, len(X) // min_count))
    chosen = None
    while n > 1:
        q = fit(n)
        tried.append(n)
        if q.cluster_sizes().min() >= min_count:
            chosen = q
            break
        n = n - n_step if n - n_step >= n_step else n - 1
    if chosen is None:
        chosen = fit(1)
        tried.append(1)
    elif grow:
        while chosen.cluster_sizes().min() >= 10 and chosen.n_clusters + n_step <= min(n_max, n_unique):
            q = fit(chosen.n_clusters + n_step)
            tried.append(q.n_clusters)
            if q.cluster_sizes().min() < min_count:
                break
            chosen = q
    chosen.tried = tried
    return chosen


# ---------------------------------------------------------------------------
# information measures


def _codes(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim > 1:
        return np.unique(x, axis=0, return_inverse=True)[1].ravel()
    return np.unique(x, return_inverse=True)[1].ravel()


def mutual_information(labels_x, labels_y) -> float:
    """Plug-in MI in bits from the empirical joint distribution of two label sequences."""
    x, y = np.asarray(labels_x), np.asarray(labels_y)
    if len(x) != len(y):
        raise ShapeError(f"label sequences differ in length: {len(x)} vs {len(y)}")
    if len(x) == 0:
        raise AnalysisError("mutual information needs at least one sample")
    xi, yi = _codes(x), _codes(y)
    return _mi_codes(xi, yi)


def _mi_codes(xi: np.ndarray, yi: np.ndarray) -> float:
    n = len(xi)
    nx, ny = xi.max() + 1, yi.max() + 1
    joint = np.bincount(xi * ny + yi, minlength=nx * ny).reshape(nx, ny) / n
    px = joint.sum(1, keepdims=True)
    py = joint.sum(0, keepdims=True)
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log2(joint[nz] / (px @ py)[nz])))
    return max(mi, 0.0)


def entropy_bits(labels) -> float:
    p = np.bincount(_codes(labels)) / len(labels)
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def permutation_baseline(labels_x, labels_y, n_permutations: int = 200,
                         rng: np.random.Generator | None = None) -> tuple[float, float, float]:
    """Shuffled-label MI: ``(mean, 99th percentile, p-value of the observed MI)``."""
    rng = rng or np.random.default_rng(0)
    xi, yi = _codes(labels_x), _codes(labels_y)
    observed = _mi_codes(xi, yi)
    null = np.array([_mi_codes(xi, rng.permutation(yi)) for _ in range(n_permutations)])
    p_value = (1 + np.sum(null >= observed - 1e-12)) / (1 + n_permutations)
    return float(null.mean()), float(np.percentile(null, 99)), float(p_value)


def weighted_kendall(m, a_bar) -> float:
    """Attention-weighted Kendall correlation.

    ``tau = sum_{i<j} w_ij sign(m_i - m_j) sign(a_i - a_j) / sum_{i<j} w_ij``
    with ``w_ij = a_i + a_j``. Tied pairs add nothing to the numerator.
    """
    m = np.asarray(m, dtype=float)
    a = np.asarray(a_bar, dtype=float)
    if m.shape != a.shape or m.ndim != 1:
        raise ShapeError(f"m and a_bar must be equal-length vectors, got {m.shape} and {a.shape}")
    if len(m) < 2:
        raise AnalysisError("weighted Kendall correlation needs k >= 2")
    if np.any(a < 0):
        raise AnalysisError("attention weights must be non-negative")
    i, j = np.triu_indices(len(m), 1)
    w = a[i] + a[j]
    total = w.sum()
    if total <= 0:
        return 0.0
    return float(np.sum(w * np.sign(m[i] - m[j]) * np.sign(a[i] - a[j])) / total)


def attention_entropy(records: Sequence[AttentionRecord]) -> float:
    """Mean of ``H(a) / log T`` over records with ``T >= 2``."""
    if not records:
        raise AnalysisError("no records")
    vals = []
    for r in records:
        if r.length < 2:
            continue
        p = r.attention[r.attention > 0]
        vals.append(float(-(p * np.log(p)).sum() / np.log(r.length)))
    return float(np.mean(vals)) if vals else 0.0


# ---------------------------------------------------------------------------
# full analysis


@dataclass
class AnalysisConfig:
    percentile: float = 10.0
    attention_threshold: float = 1e-5
    coverage: float = 0.8
    k: int | None = None
    min_k: int = 2
    n_start: int = 50
    n_max: int = 200
    n_step: int = 5
    min_count: int = 2
    grow: bool = False
    logit_clusters: int = 5
    n_init: int = 10
    max_iter: int = 100
    shared_quantizer: bool = False
    permutations: int = 200
    uniform_tolerance: float = 0.01
    seed: int = 0
    split: str = "test"
    target: str = "output"  # or "label": MI against the true label instead of the model output

    def __post_init__(self):
        if self.target not in ("output", "label"):
            raise AnalysisError(f"target must be 'output' or 'label', got {self.target!r}")
        if self.split not in ("train", "validation", "test"):
            raise AnalysisError(f"unknown split {self.split!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class AnalysisReport:
    k: int
    k_percentile: int
    k_attention: int
    per_rank: list[dict]
    weighted_kendall_tau: float | None
    tau_confidence: str
    flags: list[str]
    attention_entropy: float
    n_samples: int
    n_retained: int
    output_kind: str
    output_clusters: int
    config_hash: str
    seeds: dict

    @property
    def mi(self) -> list[float]:
        return [r["mi_bits"] for r in self.per_rank]

    @property
    def mean_attention(self) -> list[float]:
        return [r["mean_attention"] for r in self.per_rank]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> AnalysisReport:
        return cls(**d)


def output_codes(records: Sequence[AttentionRecord], cfg: AnalysisConfig,
                 rng: np.random.Generator) -> tuple[np.ndarray, str, int]:
    """Discrete model outputs: clustered logits for single-logit models, predicted class otherwise.

    With ``cfg.target == "label"`` the true labels are used instead.
    """
    if cfg.target == "label":
        labels = np.array([r.label for r in records])
        return labels, "true_label", int(len(np.unique(labels)))
    logits = np.stack([r.logits for r in records])
    if logits.shape[1] == 1:
        q = fit_quantizer(logits, "logit", rng, logit_clusters=cfg.logit_clusters,
                          n_init=cfg.n_init, max_iter=cfg.max_iter)
        return q.labels, "logit_clusters", q.n_clusters
    preds = np.array([r.pred for r in records])
    return preds, "predicted_class", int(len(np.unique(preds)))


def rank_mi_profile(records: Sequence[AttentionRecord], k: int, cfg: AnalysisConfig | None = None,
                    seed: int | None = None) -> tuple[list[float], list[float], list[dict]]:
    """Per-rank MI (bits) and mean attention, plus per-rank details."""
    return _profile(records, k, cfg or AnalysisConfig(), seed)[:3]


def _profile(records, k, cfg, seed=None):
    seed = cfg.seed if seed is None else seed
    groups = rank_group(records, k)
    kept_ids = set(groups[0].sample_ids.tolist())
    kept = [r for r in records if r.id in kept_ids]
    by_id = {r.id: i for i, r in enumerate(kept)}
    ss = np.random.SeedSequence(seed)
    out_rng, *group_seeds = [np.random.default_rng(s) for s in ss.spawn(k + 1)]
    y, y_kind, n_out = output_codes(kept, cfg, out_rng)
    qkw = dict(n_start=cfg.n_start, n_max=cfg.n_max, n_step=cfg.n_step, min_count=cfg.min_count,
               grow=cfg.grow, n_init=cfg.n_init, max_iter=cfg.max_iter)
    shared = None
    if cfg.shared_quantizer:
        shared = fit_quantizer(np.concatenate([g.members for g in groups]), "representation",
                               group_seeds[0], **qkw)
    details = []
    for g, rng in zip(groups, group_seeds):
        yg = y[[by_id[i] for i in g.sample_ids]]
        if shared is None:
            q = fit_quantizer(g.members, "representation", rng, **qkw)
            x = q.labels
        else:
            q = shared
            x = shared.assign(g.members)
        mi = mutual_information(x, yg)
        base_mean, base_q99, p = permutation_baseline(x, yg, cfg.permutations, rng) if cfg.permutations else (
            float("nan"), float("nan"), float("nan"))
        details.append({
            "rank": g.rank, "mi_bits": mi, "mean_attention": g.mean_attention,
            "n_clusters": int(q.n_clusters), "permutation_baseline_mean": base_mean,
            "permutation_baseline_q99": base_q99, "permutation_p_value": p,
        })
    return [d["mi_bits"] for d in details], [d["mean_attention"] for d in details], details, y_kind, n_out


def analyze(records: Sequence[AttentionRecord], cfg: AnalysisConfig | None = None) -> AnalysisReport:
    """Full rank/MI/Kendall analysis of captured records. Pure in ``(records, cfg)``."""
    cfg = cfg or AnalysisConfig()
    if not records:
        raise AnalysisError("no records to analyze")
    k, k1, k2 = select_k_details(records, cfg.percentile, cfg.attention_threshold, cfg.coverage)
    selected = k
    if cfg.k is not None:
        k = cfg.k
    elif k < cfg.min_k:
        # tau needs two ranks; only raise k when enough long samples remain
        if sum(r.length >= cfg.min_k for r in records) >= 2 * cfg.min_count:
            k = cfg.min_k
    kept = [r for r in records if r.length >= k]
    m, a_bar, per_rank, y_kind, n_out = _profile(records, k, cfg)
    flags = []
    if k < 2:
        flags.append("k_below_2")
        tau = None
    else:
        tau = weighted_kendall(m, a_bar)
        if max(a_bar) - min(a_bar) < cfg.uniform_tolerance:
            flags.append("near_uniform_attention")
        if np.ptp(m) == 0:
            flags.append("tied_mi")
    if flags:
        confidence = "degenerate"
    else:
        # a raised k or a single rank pair still gives a number, but one that is only ever -1, 0 or 1
        if cfg.k is None and k > selected:
            flags.append("k_raised")
        if k == 2:
            flags.append("single_pair")
        confidence = "low" if flags else "ok"
    return AnalysisReport(
        k=int(k), k_percentile=int(k1), k_attention=int(k2), per_rank=per_rank,
        weighted_kendall_tau=tau, tau_confidence=confidence, flags=flags,
        attention_entropy=attention_entropy(records), n_samples=len(records), n_retained=len(kept),
        output_kind=y_kind, output_clusters=int(n_out), config_hash=cfg.hash(),
        seeds={"analysis": cfg.seed},
    )


def save_report(report: AnalysisReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2))


def load_report(path) -> AnalysisReport:
    return AnalysisReport.from_dict(json.loads(Path(path).read_text()))
