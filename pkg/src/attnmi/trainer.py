"""Training regimes: normal, Fix Attn, Fix Rep and adversarial.

All regimes share one loop (:func:`_fit`): Adam with L2 weight decay,
global-norm clipping, shuffled mini-batches and early stopping on the
validation split. Randomness comes from three streams spawned from
``TrainConfig.seed`` (initialisation, shuffling, Gumbel noise), so a run
is a pure function of its configuration.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DatasetSplit, Example, batches, make_batch
from .divergences import jsd, kl, rowwise, tvd
from .errors import ConfigurationError, TrainingError
from .models import Model, ModelConfig

log = logging.getLogger(__name__)

REGIMES = ("normal", "fix_attn", "fix_rep", "adversarial")
DEFAULT_LAMBDAS = (2e-4, 5e-4, 8e-4)
_EPS = 1e-12


@dataclass
class TrainConfig:
    max_epochs: int = 40
    batch_size: int = 32
    patience: int = 5
    seed: int = 0
    regime: str = "normal"
    lam: float | None = None
    base_checkpoint: str | None = None
    learning_rate: float = 0.001
    weight_decay: float = 1e-5
    clip_norm: float = 5.0
    fix_attn_mode: str = "frozen_params"
    fix_rep_trains_decoder: bool = True
    kl_direction: str = "adversary_base"

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigurationError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ConfigurationError("max_epochs, batch_size and patience must be positive")
        if self.fix_attn_mode not in ("frozen_params", "uniform"):
            raise ConfigurationError(f"unknown fix_attn_mode {self.fix_attn_mode!r}")
        if self.kl_direction not in ("adversary_base", "base_adversary"):
            raise ConfigurationError(f"unknown kl_direction {self.kl_direction!r}")
        if self.regime == "adversarial" and (self.lam is None or not self.lam > 0):
            raise ConfigurationError("adversarial training needs lambda > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainReport:
    regime: str
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_metric: float = float("nan")
    test_accuracy: float = float("nan")
    test_f1: float = float("nan")
    stopped_early: bool = False
    adversarial: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainReport:
        return cls(**d)


# ---------------------------------------------------------------------------
# evaluation helpers


def predict(model: Model, examples: list[Example], batch_size: int = 256,
            uniform_attention: bool = False) -> np.ndarray:
    preds = np.empty(len(examples), dtype=int)
    with ad.no_grad():
        for b in batches(examples, batch_size):
            res = model.forward(b.tokens, b.mask, b.query, b.query_mask, mode="eval",
                                uniform_attention=uniform_attention)
            preds[b.indices] = _predicted_class(res.probabilities.data)
    return preds


def _predicted_class(probs: np.ndarray) -> np.ndarray:
    if probs.shape[-1] == 1:
        return (probs[:, 0] >= 0.5).astype(int)
    return probs.argmax(axis=-1)


def accuracy(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    return float(np.mean(y_true == y_pred)) if len(y_true) else float("nan")


def f1(y_true, y_pred, num_classes: int = 2) -> float:
    """Positive-class F1 for binary tasks, macro F1 otherwise."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    classes = [1] if num_classes == 2 else range(num_classes)
    scores = []
    for c in classes:
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def classification_loss(res, labels: np.ndarray) -> Tensor:
    if res.logits.shape[-1] == 1:
        return ad.bce_with_logits(res.logits, labels.reshape(-1, 1).astype(float))
    return ad.cross_entropy(res.logits, labels)


# ---------------------------------------------------------------------------
# the shared loop


def _streams(seed: int):
    init, shuffle, noise = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init), np.random.default_rng(shuffle), np.random.default_rng(noise))


def _fit(model: Model, dataset: DatasetSplit, tc: TrainConfig, trainable: list[str], loss_fn,
         val_metric_fn, shuffle_rng, noise_rng, uniform_attention: bool = False) -> TrainReport:
    if not dataset.train or not dataset.validation:
        raise ConfigurationError("training needs non-empty train and validation splits")
    for name, p in model.params.items():
        p.requires_grad = name in trainable
        p.grad = None
    params = {n: model.params[n] for n in trainable}
    opt = ad.Adam(params, learning_rate=tc.learning_rate, weight_decay=tc.weight_decay)
    report = TrainReport(regime=tc.regime)
    best_state, best_key, since_best = None, (-np.inf, -np.inf), 0

    for epoch in range(1, tc.max_epochs + 1):
        losses = []
        for b in batches(dataset.train, tc.batch_size, shuffle_rng):
            res = model.forward(b.tokens, b.mask, b.query, b.query_mask, mode="train", rng=noise_rng,
                                uniform_attention=uniform_attention)
            loss = loss_fn(res, b)
            if not np.isfinite(loss.data):
                raise TrainingError(f"loss diverged (non-finite) in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            ad.clip_grad_norm(params.values(), tc.clip_norm)
            try:
                opt.step()
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from None
            losses.append(float(loss.data) * len(b.labels))
        train_loss = float(np.sum(losses) / len(dataset.train))
        metric, tiebreak = val_metric_fn(model)
        report.epochs.append({"epoch": epoch, "train_loss": train_loss, "val_metric": metric})
        log.debug("epoch %d loss %.5f val %.5f", epoch, train_loss, metric)
        if (metric, tiebreak) > best_key:
            best_key, best_state, since_best = (metric, tiebreak), model.state_dict(), 0
            report.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= tc.patience:
                report.stopped_early = True
                break

    for name, value in best_state.items():
        model.params[name].data[...] = value
    for p in model.params.values():
        p.requires_grad = True
        p.grad = None
    report.best_val_metric = best_key[0]
    return report


def _finish(model: Model, dataset: DatasetSplit, report: TrainReport, uniform_attention=False) -> TrainReport:
    if dataset.test:
        preds = predict(model, dataset.test, uniform_attention=uniform_attention)
        y = [e.label for e in dataset.test]
        report.test_accuracy = accuracy(y, preds)
        report.test_f1 = f1(y, preds, dataset.num_classes)
    return report


def _val_accuracy(dataset, uniform_attention=False):
    """Validation accuracy, with negative validation loss as the tie-breaker."""
    y = np.array([e.label for e in dataset.validation])

    def metric(m):
        preds = np.empty(len(y), dtype=int)
        total = 0.0
        with ad.no_grad():
            for b in batches(dataset.validation, 256):
                res = m.forward(b.tokens, b.mask, b.query, b.query_mask, mode="eval",
                                uniform_attention=uniform_attention)
                preds[b.indices] = _predicted_class(res.probabilities.data)
                total += float(classification_loss(res, b.labels).data) * len(b.labels)
        return accuracy(y, preds), -total / len(y)

    return metric


def _check_output_size(config: ModelConfig, dataset: DatasetSplit) -> None:
    if config.output_size != dataset.output_size:
        raise ConfigurationError(
            f"model output_size={config.output_size} but dataset has {dataset.num_classes} classes"
        )
    if config.vocab_size < dataset.vocab_size:
        raise ConfigurationError(f"model vocab_size={config.vocab_size} < dataset vocab {dataset.vocab_size}")


# ---------------------------------------------------------------------------
# regimes


def train_normal(config: ModelConfig, dataset: DatasetSplit, tc: TrainConfig) -> tuple[Model, TrainReport]:
    """Supervised cross-entropy training with early stopping on validation accuracy."""
    _check_output_size(config, dataset)
    init_rng, shuffle_rng, noise_rng = _streams(tc.seed)
    model = Model(config, seed=init_rng)
    report = _fit(model, dataset, tc, list(model.params), lambda r, b: classification_loss(r, b.labels),
                  _val_accuracy(dataset), shuffle_rng, noise_rng)
    return model, _finish(model, dataset, report)


def train_fix_attn(config: ModelConfig, dataset: DatasetSplit, tc: TrainConfig) -> tuple[Model, TrainReport]:
    """Attention frozen at its random initialisation; encoder and decoder trained from scratch.

    ``fix_attn_mode="uniform"`` replaces the scores with a uniform
    distribution over real positions instead.
    """
    _check_output_size(config, dataset)
    init_rng, shuffle_rng, noise_rng = _streams(tc.seed)
    model = Model(config, seed=init_rng)
    uniform = tc.fix_attn_mode == "uniform"
    trainable = [n for n in model.params if not n.startswith("attention.")]
    report = _fit(model, dataset, tc, trainable, lambda r, b: classification_loss(r, b.labels),
                  _val_accuracy(dataset, uniform), shuffle_rng, noise_rng, uniform_attention=uniform)
    return model, _finish(model, dataset, report, uniform)


def _resolve_base(base, tc: TrainConfig) -> Model:
    if base is not None:
        return base
    if tc.base_checkpoint is None:
        raise ConfigurationError(f"regime {tc.regime!r} needs a base model or base_checkpoint")
    return Model.load(tc.base_checkpoint)


def train_fix_rep(config: ModelConfig, dataset: DatasetSplit, tc: TrainConfig,
                  base: Model | None = None) -> tuple[Model, TrainReport]:
    """Embedding and encoder copied from a trained base and frozen; attention retrained from scratch."""
    base = _resolve_base(base, tc)
    _check_output_size(config, dataset)
    _check_compatible(base.config, config, ("vocab_size", "embed_dim", "hidden_dim", "encoder_kind",
                                            "cnn_kernel_sizes", "output_size"))
    init_rng, shuffle_rng, noise_rng = _streams(tc.seed)
    model = Model(config, seed=init_rng)
    frozen = ["embedding"] + [n for n in model.params if n.startswith("encoder.")]
    if not tc.fix_rep_trains_decoder:
        frozen += [n for n in model.params if n.startswith("decoder.")]
    for name in frozen:
        model.params[name].data[...] = base.params[name].data
    trainable = [n for n in model.params if n not in frozen]
    report = _fit(model, dataset, tc, trainable, lambda r, b: classification_loss(r, b.labels),
                  _val_accuracy(dataset), shuffle_rng, noise_rng)
    return model, _finish(model, dataset, report)


def _check_compatible(base: ModelConfig, new: ModelConfig, keys) -> None:
    for k in keys:
        if getattr(base, k) != getattr(new, k):
            raise ConfigurationError(f"base checkpoint {k}={getattr(base, k)!r} != requested {getattr(new, k)!r}")


def _attention_kl(a_adv: Tensor, a_base: np.ndarray, direction: str) -> Tensor:
    """Per-sample KL between attention distributions, shape ``(B,)``."""
    log_adv = ad.log(ad.add(a_adv, _EPS))
    log_base = np.log(a_base + _EPS)
    if direction == "adversary_base":
        return ad.sum(ad.mul(a_adv, ad.sub(log_adv, Tensor(log_base))), axis=-1)
    return ad.sum(ad.mul(Tensor(a_base), ad.sub(Tensor(log_base), log_adv)), axis=-1)


def _output_tvd(probs: Tensor, base_probs: np.ndarray) -> Tensor:
    diff = ad.absolute(ad.sub(probs, Tensor(base_probs)))
    if probs.shape[-1] == 1:
        return ad.reshape(diff, (probs.shape[0],))
    return ad.scale(ad.sum(diff, axis=-1), 0.5)


def _base_outputs(base: Model, b):
    with ad.no_grad():
        r = base.forward(b.tokens, b.mask, b.query, b.query_mask, mode="eval")
    return r.probabilities.data, r.attention.data


def adversarial_objective(model: Model, base: Model, b, lam: float, direction: str = "adversary_base",
                          mode: str = "train", rng=None) -> tuple[Tensor, Tensor, Tensor]:
    """``mean TVD(y_a, y_b) - lam * mean KL(a_a, a_b)`` for one batch.

    Returns ``(objective, per-sample tvd, per-sample kl)``.
    """
    base_p, base_a = _base_outputs(base, b)
    res = model.forward(b.tokens, b.mask, b.query, b.query_mask, mode=mode, rng=rng)
    t = _output_tvd(res.probabilities, base_p)
    k = _attention_kl(res.attention, base_a, direction)
    return ad.sub(ad.mean(t), ad.scale(ad.mean(k), lam)), t, k


def train_adversarial(base: Model | None, dataset: DatasetSplit, lam: float, tc: TrainConfig,
                      config: ModelConfig | None = None) -> tuple[Model, TrainReport]:
    """Fresh model trained to match the base model's outputs while pushing its attention away.

    The base model is never updated. Early stopping keeps the epoch with
    the lowest validation objective.
    """
    if not lam > 0:
        raise ConfigurationError(f"lambda must be > 0, got {lam}")
    base = _resolve_base(base, tc)
    config = config or base.config
    _check_output_size(config, dataset)
    init_rng, shuffle_rng, noise_rng = _streams(tc.seed)
    model = Model(config, seed=init_rng)
    frozen_base = {n: p.requires_grad for n, p in base.params.items()}
    for p in base.params.values():
        p.requires_grad = False

    def loss_fn(res, b):
        base_p, base_a = _base_outputs(base, b)
        t = _output_tvd(res.probabilities, base_p)
        k = _attention_kl(res.attention, base_a, tc.kl_direction)
        return ad.sub(ad.mean(t), ad.scale(ad.mean(k), lam))

    def val_metric(m):
        total, n = 0.0, 0
        with ad.no_grad():
            for b in batches(dataset.validation, 256):
                obj, _, _ = adversarial_objective(m, base, b, lam, tc.kl_direction, mode="eval")
                total += float(obj.data) * len(b.labels)
                n += len(b.labels)
        return -total / n, 0.0

    try:
        report = _fit(model, dataset, tc, list(model.params), loss_fn, val_metric, shuffle_rng, noise_rng)
    finally:
        for n, flag in frozen_base.items():
            base.params[n].requires_grad = flag
    report = _finish(model, dataset, report)
    report.adversarial = {"lambda": lam, **adversarial_metrics(model, base, dataset.test or dataset.validation)}
    return model, report


def adversarial_metrics(model: Model, base: Model, examples: list[Example]) -> dict:
    """Mean TVD/JSD between outputs and mean KL/JSD between attention distributions."""
    out_a, out_b, att_a, att_b, masks = [], [], [], [], []
    with ad.no_grad():
        for b in batches(examples, 256):
            ra = model.forward(b.tokens, b.mask, b.query, b.query_mask, mode="eval")
            rb = base.forward(b.tokens, b.mask, b.query, b.query_mask, mode="eval")
            out_a.extend(ra.output_distribution())
            out_b.extend(rb.output_distribution())
            for i in range(len(b.labels)):
                att_a.append(ra.attention.data[i][b.mask[i]])
                att_b.append(rb.attention.data[i][b.mask[i]])
    out_a, out_b = np.array(out_a), np.array(out_b)
    return {
        "output_tvd": float(rowwise(tvd, out_a, out_b).mean()),
        "output_jsd": float(rowwise(jsd, out_a, out_b).mean()),
        "attention_kl": float(np.mean([kl(p, q) for p, q in zip(att_a, att_b)])),
        "attention_jsd": float(np.mean([jsd(p, q) for p, q in zip(att_a, att_b)])),
    }


def train(config: ModelConfig, dataset: DatasetSplit, tc: TrainConfig,
          base: Model | None = None) -> tuple[Model, TrainReport]:
    """Dispatch on ``tc.regime``."""
    if tc.regime == "normal":
        return train_normal(config, dataset, tc)
    if tc.regime == "fix_attn":
        return train_fix_attn(config, dataset, tc)
    if tc.regime == "fix_rep":
        return train_fix_rep(config, dataset, tc, base)
    return train_adversarial(base, dataset, tc.lam, tc, config)


# ---------------------------------------------------------------------------
# run directories


def save_run(directory, model: Model, tc: TrainConfig, report: TrainReport) -> None:
    """Write ``config.json``, ``model.json``, ``report.json`` and ``log.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(
        json.dumps({"model": model.config.to_dict(), "train": tc.to_dict()}, indent=2))
    model.save(directory / "model.json")
    with (directory / "log.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_metric"])
        for row in report.epochs:
            w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_metric"])])
    (directory / "report.json").write_text(json.dumps(report.to_dict(), indent=2))


def load_run(directory) -> tuple[Model, TrainConfig, TrainReport]:
    directory = Path(directory)
    cfg = json.loads((directory / "config.json").read_text())
    model = Model.load(directory / "model.json")
    report = TrainReport.from_dict(json.loads((directory / "report.json").read_text()))
    return model, TrainConfig.from_dict(cfg["train"]), report


def gradient_check(model: Model, examples: list[Example], h: float = 1e-4, floor: float = 1e-6,
                   seed: int | None = None) -> dict[str, float]:
    """Per-parameter relative error between backprop and central differences of the loss.

    ``seed`` fixes the gumbel noise so train-mode losses are repeatable; with
    ``None`` the eval-mode forward is used.
    """
    b = make_batch(examples)
    mode = "eval" if seed is None else "train"

    def loss() -> Tensor:
        rng = None if seed is None else np.random.default_rng(seed)
        res = model.forward(b.tokens, b.mask, b.query, b.query_mask, mode=mode, rng=rng)
        return classification_loss(res, b.labels)

    for p in model.params.values():
        p.grad = None
    loss().backward()
    errors = {}
    with ad.no_grad():
        for name, p in model.params.items():
            num = ad.numerical_gradient(lambda: float(loss().data), p.data, h)
            errors[name] = ad.relative_error(p.grad, num, floor)
    return errors
