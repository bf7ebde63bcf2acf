"""A small post-LN transformer encoder whose between-layer connections follow a
:class:`WiringSpec`.

Each layer function phi_l keeps the usual inner residuals and layer norms of
the attention and feed-forward sub-blocks:

    x = LN1(h + MHA(h));  phi_l(h) = LN2(x + FFN(x))

Only the junction between consecutive layers changes with the wiring. With
all-monotone wiring this is the BERT layout.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as tn
from .ode_blocks import EXPLICIT, IMPLICIT, MODES, MONOTONE, EulerConfig, LayerFn, connect
from .tensor import DimensionError, Tape, Tensor

CHECKPOINT_FORMAT = "imconnect-checkpoint"
CHECKPOINT_VERSION = 1
INIT_SCALE = 0.02


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 200
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 6
    ffn_dim: int = 64
    max_seq_len: int = 32
    num_classes: int = 2
    activation: str = "gelu"
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "ffn_dim", "max_seq_len", "num_classes"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.activation not in tn.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class WiringSpec:
    """Per-layer connection modes.

    ``euler`` supplies gamma and the iteration count for implicit layers.
    Explicit layers use ``explicit_gamma`` (1.0: a plain residual between
    layers, the EX layout).
    """

    modes: tuple[str, ...]
    euler: EulerConfig = field(default_factory=EulerConfig)
    explicit_gamma: float = 1.0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(self.modes))
        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise ConfigError(f"unknown connection modes {bad}")
        if not self.explicit_gamma > 0:
            raise ConfigError("explicit_gamma must be positive")

    @property
    def n_layers(self) -> int:
        return len(self.modes)

    @property
    def n_implicit(self) -> int:
        return sum(m == IMPLICIT for m in self.modes)

    def label(self) -> str:
        return self.name or ",".join(self.modes)

    def layer_config(self, index: int) -> EulerConfig:
        mode = self.modes[index]
        if mode == EXPLICIT:
            return EulerConfig(mode=EXPLICIT, gamma=self.explicit_gamma, iterations=0)
        return self.euler.with_mode(mode)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "modes": list(self.modes),
            "explicit_gamma": self.explicit_gamma,
            "euler": asdict(self.euler),
        }

    @classmethod
    def from_dict(cls, d: dict) -> WiringSpec:
        return cls(tuple(d["modes"]), EulerConfig(**d.get("euler", {})), d.get("explicit_gamma", 1.0), d.get("name", ""))


def all_monotone(n_layers: int, euler: EulerConfig | None = None) -> WiringSpec:
    return WiringSpec((MONOTONE,) * n_layers, euler or EulerConfig(), name="monotone")


def all_explicit(n_layers: int, euler: EulerConfig | None = None, gamma: float = 1.0) -> WiringSpec:
    return WiringSpec((EXPLICIT,) * n_layers, euler or EulerConfig(), gamma, name="explicit")


def all_implicit(n_layers: int, euler: EulerConfig | None = None) -> WiringSpec:
    return WiringSpec((IMPLICIT,) * n_layers, euler or EulerConfig(), name="implicit")


def implicit_group(n_layers: int, first: int, last: int, euler: EulerConfig | None = None) -> WiringSpec:
    """Implicit connections on layers ``first..last`` (1-based, inclusive);
    the rest stay monotone."""
    if not 1 <= first <= last <= n_layers:
        raise ConfigError(f"group ({first}-{last}) does not fit in {n_layers} layers")
    modes = tuple(IMPLICIT if first <= i + 1 <= last else MONOTONE for i in range(n_layers))
    return WiringSpec(modes, euler or EulerConfig(), name=f"layers({first}-{last})")


def contiguous_groups(n_layers: int, n_groups: int = 4) -> list[tuple[int, int]]:
    """Split 1..n_layers into ``n_groups`` contiguous near-equal blocks.
    For 12 layers: (1-3), (4-6), (7-9), (10-12)."""
    if not 1 <= n_groups <= n_layers:
        raise ConfigError(f"cannot split {n_layers} layers into {n_groups} groups")
    edges = [round(k * n_layers / n_groups) for k in range(n_groups + 1)]
    return [(edges[k] + 1, edges[k + 1]) for k in range(n_groups)]


def placement_presets(n_layers: int, euler: EulerConfig | None = None, n_groups: int = 4) -> list[WiringSpec]:
    """The layer-placement ablation: monotone base, each contiguous group, all layers."""
    out = [all_monotone(n_layers, euler)]
    out += [implicit_group(n_layers, a, b, euler) for a, b in contiguous_groups(n_layers, n_groups)]
    out.append(all_implicit(n_layers, euler))
    return out


# -- parameters -----------------------------------------------------------------------


def parameter_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.ffn_dim
    shapes = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.max_seq_len, d)}
    for l in range(cfg.n_layers):
        p = f"layer{l}."
        for name in ("q", "k", "v", "o"):
            shapes[p + "w" + name] = (d, d)
            shapes[p + "b" + name] = (d,)
        shapes[p + "ln1.w"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        shapes[p + "ffn.w1"] = (d, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.w2"] = (f, d)
        shapes[p + "ffn.b2"] = (d,)
        shapes[p + "ln2.w"] = (d,)
        shapes[p + "ln2.b"] = (d,)
    shapes["head.w"] = (d, cfg.num_classes)
    shapes["head.b"] = (cfg.num_classes,)
    return shapes


@dataclass
class EncoderModel:
    config: EncoderConfig
    params: dict[str, np.ndarray]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> EncoderModel:
        return EncoderModel(self.config, {k: v.copy() for k, v in self.params.items()})


def build_encoder(cfg: EncoderConfig) -> EncoderModel:
    """Weights ~ N(0, 0.02^2) from ``cfg.seed``; biases zero; layer norms identity."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith("ln1.w") or name.endswith("ln2.w"):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, INIT_SCALE, size=shape)
    return EncoderModel(cfg, params)


def bind(model: EncoderModel, tape: Tape | None = None) -> dict[str, Tensor]:
    """Wrap parameters as tensors, watched on ``tape`` when given."""
    if tape is None:
        return {k: Tensor(v) for k, v in model.params.items()}
    return {k: tape.watch(v) for k, v in model.params.items()}


# -- forward ------------------------------------------------------------------------------


def layer_fn(model: EncoderModel, layer_index: int, bound: dict[str, Tensor] | None = None) -> LayerFn:
    cfg = model.config
    if not 0 <= layer_index < cfg.n_layers:
        raise IndexError(f"layer index {layer_index} out of range for {cfg.n_layers} layers")
    P = bound if bound is not None else bind(model)
    p = f"layer{layer_index}."
    wq, bq, wk, bk = P[p + "wq"], P[p + "bq"], P[p + "wk"], P[p + "bk"]
    wv, bv, wo, bo = P[p + "wv"], P[p + "bv"], P[p + "wo"], P[p + "bo"]
    ln1w, ln1b, ln2w, ln2b = P[p + "ln1.w"], P[p + "ln1.b"], P[p + "ln2.w"], P[p + "ln2.b"]
    w1, b1, w2, b2 = P[p + "ffn.w1"], P[p + "ffn.b1"], P[p + "ffn.w2"], P[p + "ffn.b2"]
    act = tn.ACTIVATIONS[cfg.activation]
    H, dh = cfg.n_heads, cfg.head_dim
    inv_sqrt = 1.0 / math.sqrt(dh)

    def heads(x, B, S):
        return tn.transpose(tn.reshape(x, (B, S, H, dh)), (0, 2, 1, 3))

    def phi(h: Tensor) -> Tensor:
        if h.ndim != 3 or h.shape[-1] != cfg.d_model:
            raise DimensionError(f"layer input must be [batch, seq, {cfg.d_model}], got {h.shape}")
        B, S, D = h.shape
        q = heads(tn.linear(h, wq, bq), B, S)
        k = heads(tn.linear(h, wk, bk), B, S)
        v = heads(tn.linear(h, wv, bv), B, S)
        scores = tn.mul(tn.matmul(q, tn.transpose(k)), inv_sqrt)
        ctx = tn.matmul(tn.softmax(scores), v)
        ctx = tn.reshape(tn.transpose(ctx, (0, 2, 1, 3)), (B, S, D))
        x = tn.layer_norm(tn.add(h, tn.linear(ctx, wo, bo)), ln1w, ln1b)
        f = tn.linear(act(tn.linear(x, w1, b1)), w2, b2)
        return tn.layer_norm(tn.add(x, f), ln2w, ln2b)

    return phi


def embed(model: EncoderModel, token_ids, bound: dict[str, Tensor] | None = None) -> Tensor:
    cfg = model.config
    ids = np.asarray(token_ids)
    if ids.ndim != 2:
        raise DimensionError(f"token ids must be [batch, seq], got shape {ids.shape}")
    if ids.shape[1] > cfg.max_seq_len:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")
    P = bound if bound is not None else bind(model)
    B, S = ids.shape
    tok = tn.take(P["tok_emb"], ids.astype(np.int64))
    pos = tn.expand(tn.take(P["pos_emb"], slice(0, S)), (B, S, cfg.d_model))
    return tn.add(tok, pos)


def encode(model: EncoderModel, wiring: WiringSpec, embeddings: Tensor,
           bound: dict[str, Tensor] | None = None,
           layer_override: Callable[[int, LayerFn], LayerFn] | None = None,
           collect: list | None = None) -> Tensor:
    """Run the layer stack. ``layer_override(l, phi)`` may replace phi_l
    (test hook); ``collect`` receives each layer's output."""
    cfg = model.config
    if wiring.n_layers != cfg.n_layers:
        raise ConfigError(f"wiring has {wiring.n_layers} layers, model has {cfg.n_layers}")
    P = bound if bound is not None else bind(model)
    h = embeddings
    for l in range(cfg.n_layers):
        phi = layer_fn(model, l, P)
        if layer_override is not None:
            phi = layer_override(l, phi)
        h = connect(h, phi, wiring.layer_config(l))
        if collect is not None:
            collect.append(h)
    return h


def classify(model: EncoderModel, hidden: Tensor, bound: dict[str, Tensor] | None = None) -> Tensor:
    P = bound if bound is not None else bind(model)
    pooled = tn.take(hidden, (slice(None), 0))
    return tn.linear(pooled, P["head.w"], P["head.b"])


def forward_from_embeddings(model: EncoderModel, wiring: WiringSpec, embeddings,
                            bound: dict[str, Tensor] | None = None, **kw) -> Tensor:
    emb = tn.as_tensor(embeddings)
    cfg = model.config
    if emb.ndim != 3 or emb.shape[-1] != cfg.d_model or emb.shape[1] > cfg.max_seq_len:
        raise DimensionError(f"embeddings must be [batch, seq<={cfg.max_seq_len}, {cfg.d_model}], got {emb.shape}")
    if not np.isfinite(emb.data).all():
        raise ValueError("embeddings contain non-finite values")
    P = bound if bound is not None else bind(model)
    return classify(model, encode(model, wiring, emb, P, **kw), P)


def forward(model: EncoderModel, wiring: WiringSpec, token_ids,
            bound: dict[str, Tensor] | None = None, **kw) -> Tensor:
    P = bound if bound is not None else bind(model)
    return forward_from_embeddings(model, wiring, embed(model, token_ids, P), P, **kw)


# -- checkpoints --------------------------------------------------------------------------


def save_checkpoint(model: EncoderModel, path) -> None:
    """JSON container: format tag and version, config header, then named
    parameter blocks with shape and row-major float64 payload."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "parameters": [
            {"name": k, "shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in model.params.items()
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_checkpoint(path) -> EncoderModel:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an imconnect checkpoint")
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')}")
    cfg = EncoderConfig(**doc["config"])
    expected = parameter_shapes(cfg)
    params = {}
    for block in doc["parameters"]:
        shape = tuple(block["shape"])
        if expected.get(block["name"]) != shape:
            raise ValueError(f"parameter {block['name']} has shape {shape}, expected {expected.get(block['name'])}")
        params[block["name"]] = np.asarray(block["data"], dtype=np.float64).reshape(shape)
    missing = set(expected) - set(params)
    if missing:
        raise ValueError(f"checkpoint is missing parameters {sorted(missing)}")
    return EncoderModel(cfg, {k: params[k] for k in expected})
