"""SMTAFormer: static MLP + per-channel transformer encoders + attentive fusion.

Three fusion strategies are supported:

``dsaf``
    intra-temporal self-attention over the channel summaries, then an
    inter static/temporal attention whose query is the static embedding.
``saf``
    only the inter static/temporal attention.
``concat``
    no attention fusion; the static and channel vectors are flattened into
    one ``(n + 1) * d`` vector for the prediction head.

A logistic-regression reference model shares the same batch interface.
"""
from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError, PipelineOrderError, SchemaError
from .layers import EncoderBlock, Linear, MultiHeadAttention, embed_channel, positional_encoding

FUSIONS = ("concat", "saf", "dsaf")
CHECKPOINT_FORMAT = "smtaformer-checkpoint"


@dataclass
class ModelConfig:
    static_dim: int
    channel_dims: tuple[int, ...]
    steps: int
    d: int = 64
    heads: int = 4
    layers: int = 2
    d_ff: int | None = None
    head_hidden: int = 32
    fusion: str = "dsaf"
    share_channel_encoders: bool = True
    positional_encoding: bool = True
    channel_names: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        self.channel_dims = tuple(int(x) for x in self.channel_dims)
        self.channel_names = tuple(self.channel_names) or tuple(f"ch{i}" for i in range(len(self.channel_dims)))
        if self.d_ff is None:
            self.d_ff = 2 * self.d
        self.validate()

    @property
    def n_channels(self) -> int:
        return len(self.channel_dims)

    def validate(self) -> None:
        problems = []
        if self.n_channels < 1:
            problems.append("at least one temporal channel is required")
        if any(w < 1 for w in self.channel_dims):
            problems.append(f"channel widths must be positive, got {self.channel_dims}")
        if len(self.channel_names) != self.n_channels:
            problems.append("channel_names must match channel_dims")
        if self.static_dim < 1:
            problems.append("static_dim must be positive")
        if self.steps < 1:
            problems.append("steps must be >= 1")
        if self.d < 2 or self.d % 2:
            problems.append(f"model width d must be even and >= 2, got {self.d}")
        if self.heads < 1:
            problems.append("heads must be >= 1")
        if self.layers < 1:
            problems.append("layers must be >= 1")
        if self.d_ff < 1 or self.head_hidden < 1:
            problems.append("d_ff and head_hidden must be positive")
        if self.fusion not in FUSIONS:
            problems.append(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if problems:
            raise ConfigurationError("; ".join(problems))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["channel_dims"] = list(self.channel_dims)
        out["channel_names"] = list(self.channel_names)
        return out


@dataclass
class LogisticConfig:
    static_dim: int
    channel_dims: tuple[int, ...]
    steps: int
    channel_names: tuple[str, ...] = ()
    seed: int = 0
    fusion: str = field(default="logistic", init=False)

    def __post_init__(self):
        self.channel_dims = tuple(int(x) for x in self.channel_dims)
        self.channel_names = tuple(self.channel_names) or tuple(f"ch{i}" for i in range(len(self.channel_dims)))

    @property
    def n_channels(self) -> int:
        return len(self.channel_dims)

    @property
    def feature_dim(self) -> int:
        return self.steps * (self.static_dim + sum(self.channel_dims))

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("fusion")
        out["channel_dims"] = list(self.channel_dims)
        out["channel_names"] = list(self.channel_names)
        return out


@dataclass
class BatchTrace:
    """Outputs of one batched forward pass (kept as graph tensors)."""

    probs: Tensor
    intra_weights: Tensor | None = None
    inter_weights: Tensor | None = None


@dataclass
class ForwardTrace:
    prediction: float
    intra_weights: np.ndarray | None  # (heads, n, n)
    inter_weights: np.ndarray | None  # (heads, 1, n + 1); column 0 is the static key


def _check_inputs(static: np.ndarray, channels: Sequence[np.ndarray], static_dim, channel_dims, steps):
    if static.ndim != 2 or static.shape[1] != static_dim:
        raise DimensionError(f"static stage: expected (batch, {static_dim}), got {static.shape}")
    if len(channels) != len(channel_dims):
        raise DimensionError(f"temporal stage: expected {len(channel_dims)} channels, got {len(channels)}")
    batch = static.shape[0]
    for i, (x, w) in enumerate(zip(channels, channel_dims)):
        if x.shape != (batch, steps, w):
            raise DimensionError(f"temporal stage: channel {i} expected {(batch, steps, w)}, got {x.shape}")
    if np.isnan(static).any() or any(np.isnan(x).any() for x in channels):
        raise PipelineOrderError("missing values reached the model; impute before the forward pass")


class SMTAFormer:
    def __init__(self, config: ModelConfig):
        self.config = config
        c = config
        rng = np.random.default_rng(c.seed)
        self.static = Linear(c.static_dim, c.d, rng)
        self.embeddings = [Linear(w, c.d, rng) for w in c.channel_dims]
        n_stacks = 1 if c.share_channel_encoders else c.n_channels
        self.encoders = [[EncoderBlock(c.d, c.heads, c.d_ff, rng) for _ in range(c.layers)] for _ in range(n_stacks)]
        self.intra = MultiHeadAttention(c.d, c.heads, rng) if c.fusion == "dsaf" else None
        self.inter = MultiHeadAttention(c.d, c.heads, rng) if c.fusion in ("saf", "dsaf") else None
        head_in = (c.n_channels + 1) * c.d if c.fusion == "concat" else c.d
        self.head_hidden = Linear(head_in, c.head_hidden, rng)
        self.head_out = Linear(c.head_hidden, 1, rng)
        pe = positional_encoding(c.steps, c.d)
        self.pos_encoding = pe if c.positional_encoding else np.zeros_like(pe)

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self._iter_parameters())

    def _iter_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.static.named_parameters("static")
        for i, layer in enumerate(self.embeddings):
            yield from layer.named_parameters(f"embed.{i}")
        for s, stack in enumerate(self.encoders):
            for j, block in enumerate(stack):
                yield from block.named_parameters(f"encoder.{s}.{j}")
        if self.intra is not None:
            yield from self.intra.named_parameters("intra")
        if self.inter is not None:
            yield from self.inter.named_parameters("inter")
        yield from self.head_hidden.named_parameters("head.hidden")
        yield from self.head_out.named_parameters("head.out")

    # -- stages --------------------------------------------------------------

    def encode_static(self, static: Tensor) -> Tensor:
        if static.shape[-1] != self.config.static_dim:
            raise DimensionError(f"static stage: expected width {self.config.static_dim}, got {static.shape}")
        return ad.relu(self.static(static))

    def _run_encoder(self, x: Tensor, stack: list[EncoderBlock]) -> Tensor:
        for block in stack:
            x, _ = block(x)
        return x

    def encode_channel(self, i: int, x: Tensor) -> Tensor:
        """(batch, t, d_i) -> (batch, d): embed, add position, encode, average over time."""
        if not 0 <= i < self.config.n_channels:
            raise ConfigurationError(f"channel index {i} out of range")
        if np.isnan(x.data).any():
            raise PipelineOrderError(f"channel {i} has missing values; impute before the forward pass")
        stack = self.encoders[0 if self.config.share_channel_encoders else i]
        e = embed_channel(x, self.embeddings[i]) + self.pos_encoding
        return ad.mean_over_time(self._run_encoder(e, stack))

    def encode_channels(self, channels: Sequence[Tensor]) -> Tensor:
        """Stack of channel summaries, (batch, n, d)."""
        c = self.config
        if c.share_channel_encoders:
            embedded = [embed_channel(x, layer) + self.pos_encoding for x, layer in zip(channels, self.embeddings)]
            e = ad.stack(embedded, axis=1)  # (batch, n, t, d)
            return ad.mean_over_time(self._run_encoder(e, self.encoders[0]))
        return ad.stack([self.encode_channel(i, x) for i, x in enumerate(channels)], axis=1)

    def intra_temporal_fusion(self, summaries: Tensor) -> tuple[Tensor, Tensor]:
        if self.intra is None:
            raise ConfigurationError(f"fusion {self.config.fusion!r} has no intra-temporal stage")
        if summaries.shape[-2] < 1:
            raise ConfigurationError("intra-temporal fusion needs at least one channel")
        return self.intra(summaries, summaries)

    def inter_fusion(self, static_repr: Tensor, summaries: Tensor) -> tuple[Tensor, Tensor]:
        """Static row queries the stacked [static; channels] rows. Returns (batch, d) and weights."""
        if self.inter is None:
            raise ConfigurationError(f"fusion {self.config.fusion!r} has no inter fusion stage")
        d = self.config.d
        if static_repr.shape[-1] != d or summaries.shape[-1] != d:
            raise DimensionError(f"inter fusion: widths must be {d}, got {static_repr.shape} and {summaries.shape}")
        lead = static_repr.shape[:-1]
        query = ad.reshape(static_repr, lead + (1, d))
        keys = ad.concat([query, summaries], axis=-2)
        fused, weights = self.inter(query, keys)
        return ad.reshape(fused, lead + (d,)), weights

    def predict_head(self, x: Tensor) -> Tensor:
        out = self.head_out(ad.relu(self.head_hidden(x)))
        return ad.sigmoid(ad.reshape(out, out.shape[:-1]))

    # -- full pass -----------------------------------------------------------

    def forward_batch(self, static: np.ndarray, channels: Sequence[np.ndarray]) -> BatchTrace:
        c = self.config
        static = np.asarray(static, dtype=np.float64)
        channels = [np.asarray(x, dtype=np.float64) for x in channels]
        _check_inputs(static, channels, c.static_dim, c.channel_dims, c.steps)
        s = self.encode_static(Tensor(static))
        m = self.encode_channels([Tensor(x) for x in channels])
        intra_w = inter_w = None
        if c.fusion == "concat":
            batch = static.shape[0]
            fused = ad.concat([s, ad.reshape(m, (batch, c.n_channels * c.d))], axis=-1)
        else:
            if c.fusion == "dsaf":
                m, intra_w = self.intra_temporal_fusion(m)
            fused, inter_w = self.inter_fusion(s, m)
        return BatchTrace(self.predict_head(fused), intra_w, inter_w)

    def forward(self, record) -> ForwardTrace:
        with ad.no_grad():
            trace = self.forward_batch(record.static[None, :], [x[None] for x in record.channels])
        return ForwardTrace(
            prediction=float(trace.probs.data[0]),
            intra_weights=None if trace.intra_weights is None else trace.intra_weights.data[0].copy(),
            inter_weights=None if trace.inter_weights is None else trace.inter_weights.data[0].copy(),
        )


class LogisticReference:
    """Logistic regression on static features repeated at every time step."""

    def __init__(self, config: LogisticConfig):
        self.config = config
        self.weight = Tensor(np.zeros((config.feature_dim, 1)), requires_grad=True)
        self.bias = Tensor(np.zeros(1), requires_grad=True)

    def named_parameters(self) -> dict[str, Tensor]:
        return {"logistic.weight": self.weight, "logistic.bias": self.bias}

    def features(self, static: np.ndarray, channels: Sequence[np.ndarray]) -> np.ndarray:
        c = self.config
        _check_inputs(static, channels, c.static_dim, c.channel_dims, c.steps)
        batch = static.shape[0]
        repeated = np.broadcast_to(static[:, None, :], (batch, c.steps, c.static_dim))
        per_step = np.concatenate([repeated, *channels], axis=-1)
        return per_step.reshape(batch, -1)

    def forward_batch(self, static: np.ndarray, channels: Sequence[np.ndarray]) -> BatchTrace:
        x = Tensor(self.features(np.asarray(static, dtype=np.float64), [np.asarray(a, dtype=np.float64) for a in channels]))
        logits = ad.matmul(x, self.weight) + self.bias
        return BatchTrace(ad.sigmoid(ad.reshape(logits, (x.shape[0],))))

    def forward(self, record) -> ForwardTrace:
        with ad.no_grad():
            trace = self.forward_batch(record.static[None, :], [x[None] for x in record.channels])
        return ForwardTrace(float(trace.probs.data[0]), None, None)


def logistic_reference(features: np.ndarray, weights: np.ndarray, bias: float = 0.0) -> float:
    """Probability from a flattened feature vector and a weight vector."""
    features = np.asarray(features, dtype=np.float64).reshape(-1)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if features.shape != weights.shape:
        raise DimensionError(f"logistic_reference: features {features.shape} vs weights {weights.shape}")
    logit = Tensor(np.array([[features @ weights + bias]]))
    return float(ad.sigmoid(logit).data[0, 0])


def build_model(config: ModelConfig | LogisticConfig):
    if isinstance(config, LogisticConfig):
        return LogisticReference(config)
    return SMTAFormer(config)


def config_from_dict(data: dict) -> ModelConfig | LogisticConfig:
    data = dict(data)
    if data.pop("kind", "smtaformer") == "logistic" or data.get("fusion") == "logistic":
        data.pop("fusion", None)
        return LogisticConfig(**data)
    return ModelConfig(**data)


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------


def save_checkpoint(model, path: str | Path) -> None:
    """Write config and all parameters (little-endian float64, base64) to one JSON file."""
    kind = "logistic" if isinstance(model, LogisticReference) else "smtaformer"
    params = []
    for name, p in model.named_parameters().items():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        params.append({"name": name, "shape": list(p.shape), "dtype": "<f8", "data": base64.b64encode(raw).decode("ascii")})
    doc = {"format": CHECKPOINT_FORMAT, "version": 1, "kind": kind, "config": model.config.to_dict(), "parameters": params}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path: str | Path):
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise SchemaError(f"{path} is not a model checkpoint")
    cfg = dict(doc["config"], kind=doc["kind"])
    model = build_model(config_from_dict(cfg))
    params = model.named_parameters()
    stored = {entry["name"]: entry for entry in doc["parameters"]}
    if set(stored) != set(params):
        raise SchemaError(f"checkpoint parameters do not match the model: {sorted(set(stored) ^ set(params))}")
    for name, p in params.items():
        entry = stored[name]
        values = np.frombuffer(base64.b64decode(entry["data"]), dtype=entry["dtype"]).astype(np.float64)
        if tuple(entry["shape"]) != p.shape:
            raise SchemaError(f"parameter {name}: shape {entry['shape']} does not match {p.shape}")
        p.data[...] = values.reshape(p.shape)
    return model


__all__ = [
    "FUSIONS",
    "BatchTrace",
    "ForwardTrace",
    "LogisticConfig",
    "LogisticReference",
    "ModelConfig",
    "SMTAFormer",
    "build_model",
    "config_from_dict",
    "load_checkpoint",
    "logistic_reference",
    "save_checkpoint",
]
