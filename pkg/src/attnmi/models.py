"""Encoder-attention-decoder classifiers.

The pipeline is embed -> encode -> attend -> context -> decode. All module
functions accept an optional leading batch axis: hidden states are
``(T, l)`` or ``(B, T, l)`` and attention logits/scores ``(T,)`` or ``(B, T)``.

Parameters live in a flat ``name -> Tensor`` map whose prefixes
(``embedding``, ``encoder.``, ``query.``, ``attention.``, ``decoder.``)
identify the component each weight belongs to.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, InvalidInputError, ShapeError

ENCODERS = ("bilstm", "cnn", "mlp")
ATTENTIONS = ("dot", "additive", "deep")
SCORINGS = ("softmax", "gumbel_softmax")

COMPONENT_PREFIXES = {
    "embedding": ("embedding",),
    "encoder": ("encoder.",),
    "attention": ("attention.",),
    "decoder": ("decoder.",),
}


@dataclass
class ModelConfig:
    vocab_size: int
    output_size: int = 1
    encoder_kind: str = "bilstm"
    attention_kind: str = "additive"
    embed_dim: int = 128
    hidden_dim: int | None = None
    attention_dim: int | None = None
    deep_depth: int = 2
    deep_hidden: int = 64
    scoring: str = "softmax"
    gumbel_temperature: float = 0.8
    gumbel_noise_at_eval: bool = False
    uses_query: bool = False
    cnn_kernel_sizes: list[int] = field(default_factory=lambda: [1, 3, 5, 7, 15])

    def __post_init__(self):
        if self.hidden_dim is None:
            self.hidden_dim = 256 if self.encoder_kind == "bilstm" else 128
        if self.attention_dim is None:
            self.attention_dim = max(1, self.hidden_dim // 2)
        self.cnn_kernel_sizes = [int(k) for k in self.cnn_kernel_sizes]
        self.validate()

    def validate(self) -> None:
        if self.encoder_kind not in ENCODERS:
            raise ConfigurationError(f"encoder_kind must be one of {ENCODERS}, got {self.encoder_kind!r}")
        if self.attention_kind not in ATTENTIONS:
            raise ConfigurationError(f"attention_kind must be one of {ATTENTIONS}, got {self.attention_kind!r}")
        if self.scoring not in SCORINGS:
            raise ConfigurationError(f"scoring must be one of {SCORINGS}, got {self.scoring!r}")
        for name in ("vocab_size", "output_size", "embed_dim", "hidden_dim", "attention_dim",
                     "deep_depth", "deep_hidden"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if self.output_size == 2:
            raise ConfigurationError("binary tasks use output_size=1")
        if not self.gumbel_temperature > 0:
            raise ConfigurationError("gumbel_temperature must be > 0")
        if self.encoder_kind == "bilstm" and self.hidden_dim % 2:
            raise ConfigurationError("bilstm hidden_dim must be even (two directions)")
        if self.encoder_kind == "cnn":
            if not self.cnn_kernel_sizes or any(k < 1 or k % 2 == 0 for k in self.cnn_kernel_sizes):
                raise ConfigurationError("cnn_kernel_sizes must be odd positive integers")
            if self.hidden_dim < len(self.cnn_kernel_sizes):
                raise ConfigurationError("cnn hidden_dim must be at least the number of kernels")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)

    def cnn_channels(self) -> list[int]:
        """Per-kernel channel counts; they sum to ``hidden_dim``."""
        n = len(self.cnn_kernel_sizes)
        base, extra = divmod(self.hidden_dim, n)
        return [base + (1 if i < extra else 0) for i in range(n)]


# ---------------------------------------------------------------------------
# parameter initialisation


def init_parameters(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh parameters: uniform in +-1/sqrt(fan_in); LSTM forget-gate bias 1."""
    u = ad.init_uniform
    p: dict[str, np.ndarray] = {}
    d, l, V = config.embed_dim, config.hidden_dim, config.vocab_size
    p["embedding"] = rng.normal(0.0, 1.0, size=(V, d))
    p.update(init_encoder(config, rng))
    if config.attention_kind == "dot":
        if not config.uses_query:
            p["attention.w"] = u(rng, (l, 1), l)
    elif config.attention_kind == "additive":
        a = config.attention_dim
        p["attention.W2"] = u(rng, (l, a), l)
        p["attention.b2"] = u(rng, (a,), l)
        p["attention.W1"] = u(rng, (a, 1), a)
        if config.uses_query:
            p["attention.W3"] = u(rng, (l, a), l)
    else:
        m = config.deep_hidden
        p["attention.Wh"] = u(rng, (l, m), l)
        p["attention.bh"] = u(rng, (m,), l)
        if config.uses_query:
            p["attention.WQ"] = u(rng, (l, m), l)
        for i in range(1, config.deep_depth + 1):
            out = 1 if i == config.deep_depth else m
            p[f"attention.D{i}.W"] = u(rng, (m, out), m)
            if out != 1:
                p[f"attention.D{i}.b"] = u(rng, (out,), m)
    p["decoder.W"] = u(rng, (l, config.output_size), l)
    p["decoder.b"] = u(rng, (config.output_size,), l)
    return p


def init_encoder(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    u = ad.init_uniform
    d, l = config.embed_dim, config.hidden_dim
    p = {}
    if config.encoder_kind == "mlp":
        p["encoder.W"] = u(rng, (d, l), d)
        p["encoder.b"] = u(rng, (l,), d)
    elif config.encoder_kind == "cnn":
        for k, c in zip(config.cnn_kernel_sizes, config.cnn_channels()):
            p[f"encoder.conv{k}.W"] = u(rng, (k * d, c), k * d)
            p[f"encoder.conv{k}.b"] = u(rng, (c,), k * d)
    else:
        H = l // 2
        for direction in ("fwd", "bwd"):
            p[f"encoder.{direction}.Wx"] = u(rng, (d, 4 * H), H)
            p[f"encoder.{direction}.Wh"] = u(rng, (H, 4 * H), H)
            b = u(rng, (4 * H,), H)
            b[H:2 * H] = 1.0
            p[f"encoder.{direction}.b"] = b
    return p


# ---------------------------------------------------------------------------
# embedding and encoders


def embed(tokens, table: Tensor) -> Tensor:
    tokens = np.asarray(tokens, dtype=int)
    if tokens.size == 0 or tokens.shape[-1] == 0:
        raise InvalidInputError("token sequence must contain at least one token")
    if tokens.min() < 0 or tokens.max() >= table.shape[0]:
        raise InvalidInputError(f"token id outside vocabulary of size {table.shape[0]}")
    return ad.embedding(table, tokens)


def _mask_tensor(mask: np.ndarray, width: int) -> Tensor:
    return Tensor(np.repeat(mask[..., None].astype(float), width, axis=-1))


def encode(x: Tensor, params: dict[str, Tensor], config: ModelConfig, mask=None) -> Tensor:
    """Hidden states ``(..., T, l)`` for embedded input ``(..., T, d)``.

    ``mask`` marks real (non-pad) positions. Pad embeddings are zeroed
    before encoding so batched and per-sample results agree.
    """
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape[:-1]:
            raise ShapeError(f"mask {mask.shape} does not match input {x.shape}")
        if not mask.all():
            x = ad.mul(x, _mask_tensor(mask, x.shape[-1]))
    kind = config.encoder_kind
    if kind == "mlp":
        return ad.tanh(ad.linear(x, params["encoder.W"], params["encoder.b"]))
    if kind == "cnn":
        return _cnn(x, params, config)
    return _bilstm(x, params, config, mask)


def _cnn(x: Tensor, params, config: ModelConfig) -> Tensor:
    T = x.shape[-2]
    outs = []
    for k in config.cnn_kernel_sizes:
        half = (k - 1) // 2
        xp = ad.pad_axis(x, -2, half, half) if half else x
        if k == 1:
            unfolded = xp
        else:
            unfolded = ad.concat([xp[..., j:j + T, :] for j in range(k)], axis=-1)
        outs.append(ad.relu(ad.linear(unfolded, params[f"encoder.conv{k}.W"], params[f"encoder.conv{k}.b"])))
    return outs[0] if len(outs) == 1 else ad.concat(outs, axis=-1)


def _bilstm(x: Tensor, params, config: ModelConfig, mask) -> Tensor:
    squeeze = x.data.ndim == 2
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
        mask = None if mask is None else mask[None]
    B, T, _ = x.shape
    if mask is None:
        mask = np.ones((B, T), dtype=bool)
    fwd = _lstm_direction(x, params, "fwd", mask, reverse=False)
    bwd = _lstm_direction(x, params, "bwd", mask, reverse=True)
    h = ad.concat([fwd, bwd], axis=-1)
    if squeeze:
        h = ad.reshape(h, h.shape[1:])
    return h


def _lstm_direction(x: Tensor, params, direction: str, mask: np.ndarray, reverse: bool) -> Tensor:
    Wx = params[f"encoder.{direction}.Wx"]
    Wh = params[f"encoder.{direction}.Wh"]
    b = params[f"encoder.{direction}.b"]
    B, T, _ = x.shape
    H = Wh.shape[0]
    xz = ad.linear(x, Wx, b)
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    outputs: list[Tensor | None] = [None] * T
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        z = ad.add(xz[:, t, :], ad.matmul(h, Wh))
        hc = ad.lstm_cell(z, c)
        h_new, c_new = hc[0], hc[1]
        m = mask[:, t]
        if m.all():
            c, h = c_new, h_new
        else:
            keep = _mask_tensor(m, H)
            drop = Tensor(1.0 - keep.data)
            c = ad.add(ad.mul(keep, c_new), ad.mul(drop, c))
            h = ad.add(ad.mul(keep, h_new), ad.mul(drop, h))
        outputs[t] = h
    return ad.stack(outputs, axis=1)


def mean_pool(h: Tensor, mask=None) -> Tensor:
    """Average of hidden rows over real positions: ``(..., T, l) -> (..., l)``."""
    if mask is None:
        mask = np.ones(h.shape[:-1], dtype=bool)
    w = np.asarray(mask, dtype=float)
    w = w / w.sum(axis=-1, keepdims=True)
    return context(h, Tensor(w))


# ---------------------------------------------------------------------------
# attention


def _query_term(q: Tensor | None, weight: Tensor, T: int) -> Tensor:
    proj = ad.matmul(q if q.data.ndim > 1 else ad.reshape(q, (1, -1)), weight)
    if q.data.ndim == 1:
        proj = ad.reshape(proj, (proj.shape[-1],))
    return ad.expand(proj, -2, T)


def dot_logits(h: Tensor, q: Tensor | None = None, weight: Tensor | None = None,
               scale_dim: int | None = None) -> Tensor:
    """Scaled dot-product logits ``h q / sqrt(m)``, or ``h w`` when no query is given."""
    if q is not None:
        if q.shape[-1] != h.shape[-1]:
            raise ShapeError(f"query length {q.shape[-1]} != hidden size {h.shape[-1]}")
        m = h.shape[-1] if scale_dim is None else scale_dim
        spec = "tl,l->t" if h.data.ndim == 2 else "btl,bl->bt"
        return ad.scale(ad.einsum(spec, h, q), 1.0 / np.sqrt(m))
    if weight is None:
        raise ConfigurationError("query-free dot attention needs a weight vector")
    out = ad.matmul(h, weight)
    return ad.reshape(out, out.shape[:-1])


def additive_logits(h: Tensor, params: dict[str, Tensor], q: Tensor | None = None) -> Tensor:
    pre = ad.linear(h, params["attention.W2"], params["attention.b2"])
    if q is not None:
        pre = ad.add(pre, _query_term(q, params["attention.W3"], h.shape[-2]))
    out = ad.matmul(ad.tanh(pre), params["attention.W1"])
    return ad.reshape(out, out.shape[:-1])


def deep_logits(h: Tensor, params: dict[str, Tensor], depth: int, q: Tensor | None = None) -> Tensor:
    x = ad.linear(h, params["attention.Wh"], params["attention.bh"])
    if q is not None:
        x = ad.add(x, _query_term(q, params["attention.WQ"], h.shape[-2]))
    for i in range(1, depth + 1):
        x = ad.linear(ad.relu(x), params[f"attention.D{i}.W"], params.get(f"attention.D{i}.b"))
    return ad.reshape(x, x.shape[:-1])


def gumbel_softmax(logits, temperature: float, rng: np.random.Generator | None = None, mask=None) -> Tensor:
    """``softmax((logits + g) / temperature)`` with standard Gumbel noise ``g``.

    ``rng=None`` disables the noise, leaving a temperature-scaled softmax.
    """
    if not temperature > 0:
        raise ConfigurationError(f"temperature must be > 0, got {temperature}")
    logits = ad.as_tensor(logits)
    z = logits
    if rng is not None:
        u = rng.random(logits.shape)
        u = np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).eps)
        noise = -np.log(-np.log(u))
        if mask is not None:
            noise = np.where(mask, noise, 0.0)
        z = ad.add(z, Tensor(noise))
    if temperature != 1.0:
        z = ad.scale(z, 1.0 / temperature)
    return ad.softmax(z, mask)


def normalize_scores(logits: Tensor, config: ModelConfig, mask=None, mode: str = "eval",
                     rng: np.random.Generator | None = None) -> Tensor:
    if config.scoring == "softmax":
        return ad.softmax(logits, mask)
    noisy = mode == "train" or config.gumbel_noise_at_eval
    if noisy and rng is None:
        raise ConfigurationError("gumbel noise requested but no random generator was supplied")
    return gumbel_softmax(logits, config.gumbel_temperature, rng if noisy else None, mask)


def attention_logits(h: Tensor, params: dict[str, Tensor], config: ModelConfig,
                     q: Tensor | None = None) -> Tensor:
    if config.uses_query and q is None:
        raise ConfigurationError("model uses a query vector but none was supplied")
    if not config.uses_query:
        q = None
    kind = config.attention_kind
    if kind == "dot":
        return dot_logits(h, q, params.get("attention.w"))
    if kind == "additive":
        return additive_logits(h, params, q)
    return deep_logits(h, params, config.deep_depth, q)


def _attend(kind: str, h, params, config: ModelConfig, q=None, mask=None, mode="eval", rng=None) -> Tensor:
    if config.attention_kind != kind:
        raise ConfigurationError(f"config has attention_kind={config.attention_kind!r}, not {kind!r}")
    return normalize_scores(attention_logits(h, params, config, q), config, mask, mode, rng)


def attend_dot(h, params, config, q=None, mask=None, mode="eval", rng=None) -> Tensor:
    return _attend("dot", h, params, config, q, mask, mode, rng)


def attend_additive(h, params, config, q=None, mask=None, mode="eval", rng=None) -> Tensor:
    return _attend("additive", h, params, config, q, mask, mode, rng)


def attend_deep(h, params, config, q=None, mask=None, mode="eval", rng=None) -> Tensor:
    return _attend("deep", h, params, config, q, mask, mode, rng)


def uniform_scores(mask: np.ndarray) -> Tensor:
    m = np.asarray(mask, dtype=float)
    return Tensor(m / m.sum(axis=-1, keepdims=True))


def context(h: Tensor, a: Tensor) -> Tensor:
    """Attention-weighted sum of hidden rows: ``c = sum_i a_i h_i``."""
    if a.shape != h.shape[:-1]:
        raise ShapeError(f"attention shape {a.shape} does not match hidden states {h.shape}")
    spec = "t,tl->l" if h.data.ndim == 2 else "bt,btl->bl"
    return ad.einsum(spec, a, h)


def decode(c: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Return ``(logits, probabilities)``: sigmoid for one output, softmax otherwise."""
    W = params["decoder.W"]
    if c.shape[-1] != W.shape[0]:
        raise ShapeError(f"context length {c.shape[-1]} != decoder input {W.shape[0]}")
    logits = ad.linear(c, W, params["decoder.b"])
    probs = ad.sigmoid(logits) if W.shape[1] == 1 else ad.softmax(logits)
    return logits, probs


# ---------------------------------------------------------------------------
# the model


@dataclass
class ForwardResult:
    hidden: Tensor          # (B, T, l)
    attention_logits: Tensor | None
    attention: Tensor       # (B, T)
    context: Tensor         # (B, l)
    logits: Tensor          # (B, o)
    probabilities: Tensor   # (B, o)
    mask: np.ndarray        # (B, T) bool

    def output_distribution(self) -> np.ndarray:
        """Probability vectors per sample; binary outputs become ``[1 - p, p]``."""
        p = self.probabilities.data
        if p.shape[-1] == 1:
            return np.concatenate([1.0 - p, p], axis=-1)
        return p


class Model:
    """Parameters plus configuration. ``forward`` works on padded batches."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None,
                 seed: int | np.random.Generator = 0):
        self.config = config
        if params is None:
            rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
            params = init_parameters(config, rng)
        expected = set(init_parameters(config, np.random.default_rng(0)))
        if set(params) != expected:
            raise ConfigurationError(
                f"parameter names do not match config: missing {sorted(expected - set(params))}, "
                f"unexpected {sorted(set(params) - expected)}"
            )
        self.params: dict[str, Tensor] = {
            name: Tensor(value, requires_grad=True, name=name) for name, value in params.items()
        }

    def component(self, name: str) -> dict[str, Tensor]:
        prefixes = COMPONENT_PREFIXES[name]
        return {k: v for k, v in self.params.items() if k.startswith(prefixes)}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def copy(self) -> Model:
        return Model(self.config, self.state_dict())

    def query_vector(self, query_tokens, query_mask=None) -> Tensor:
        xq = embed(query_tokens, self.params["embedding"])
        hq = encode(xq, self.params, self.config, query_mask)
        return mean_pool(hq, query_mask)

    def forward(self, tokens, mask=None, query=None, query_mask=None, mode: str = "eval",
                rng: np.random.Generator | None = None, uniform_attention: bool = False) -> ForwardResult:
        if mode not in ("train", "eval"):
            raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
        tokens = np.asarray(tokens, dtype=int)
        if tokens.ndim == 1:
            tokens = tokens[None]
            mask = None if mask is None else np.asarray(mask)[None]
            if query is not None:
                query = np.asarray(query)[None]
                query_mask = None if query_mask is None else np.asarray(query_mask)[None]
        mask = np.ones(tokens.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        cfg = self.config
        x = embed(tokens, self.params["embedding"])
        h = encode(x, self.params, cfg, mask)
        q = None
        if cfg.uses_query:
            if query is None:
                raise ConfigurationError("model uses a query vector but no query tokens were supplied")
            qmask = np.ones(np.shape(query), dtype=bool) if query_mask is None else query_mask
            q = self.query_vector(query, qmask)
        if uniform_attention:
            logits_a = None
            a = uniform_scores(mask)
        else:
            logits_a = attention_logits(h, self.params, cfg, q)
            a = normalize_scores(logits_a, cfg, mask, mode, rng)
        c = context(h, a)
        logits, probs = decode(c, self.params)
        return ForwardResult(h, logits_a, a, c, logits, probs, mask)

    def save(self, path) -> None:
        ad.save_parameters(path, self.params, header={"model_config": self.config.to_dict()})

    @classmethod
    def load(cls, path) -> Model:
        params, header = ad.load_parameters(path)
        if "model_config" not in header:
            raise ConfigurationError(f"{path}: checkpoint has no model_config")
        return cls(ModelConfig.from_dict(header["model_config"]), params)


def save_config(config: ModelConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2))


def load_config(path) -> ModelConfig:
    return ModelConfig.from_dict(json.loads(Path(path).read_text()))
