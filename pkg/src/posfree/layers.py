"""The two feature extractors under comparison, with analytic gradients.

Pipeline for a batch of ``(tokens, values, mask)`` of shape ``(..., l)``::

    e   = E[token] + (mask ? m : value * w1 + b1)          # embed
    e'  = softmax(scores) @ V                              # one block
    out = e' @ w2 + b2                                     # predict

``attention`` blocks score token pairs as ``(e w_q)(e w_k)^T`` and mix
``e w_v``. ``adjacency`` blocks look the score up in a trainable
vocabulary-indexed matrix ``A[token_i, token_j]`` (or ``U[token_i] . V[token_j]``
when factorized) and mix ``e`` directly. Nothing in the pipeline depends on
slot index, so both models are permutation equivariant.

All functions accept arbitrary leading batch dimensions.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, UsageError
from .numerics import make_rng, softmax_rows

ARCHITECTURES = ("attention", "adjacency")
ADJACENCY_MODES = ("dense", "factorized")
INIT_SCALE = 0.1
_ONE_HOT_MAX_VOCAB = 64


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "attention"
    vocab_size: int = 4
    seq_len: int = 4
    hidden_dim: int = 8
    adjacency_mode: str = "dense"
    rank: int = 0
    attention_scaling: bool = False
    num_layers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.adjacency_mode not in ADJACENCY_MODES:
            raise ConfigError(f"adjacency_mode must be one of {ADJACENCY_MODES}, got {self.adjacency_mode!r}")
        for name in ("vocab_size", "seq_len", "hidden_dim", "num_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.seq_len > self.vocab_size:
            raise ConfigError(
                f"seq_len {self.seq_len} exceeds vocab_size {self.vocab_size}; tokens are drawn without replacement")
        if self.factorized and not 0 < self.rank <= self.vocab_size:
            raise ConfigError(f"factorized adjacency needs 0 < rank <= vocab_size, got rank={self.rank}")

    @property
    def factorized(self) -> bool:
        return self.architecture == "adjacency" and self.adjacency_mode == "factorized"

    def with_(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})


def param_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Field names and shapes in declaration (and serialization) order."""
    s, d, L = cfg.vocab_size, cfg.hidden_dim, cfg.num_layers
    layout = [
        ("token_embedding", (s, d)),
        ("value_weight", (d,)),
        ("value_bias", (d,)),
        ("mask_embedding", (d,)),
    ]
    if cfg.architecture == "attention":
        layout += [("w_q", (L, d, d)), ("w_k", (L, d, d)), ("w_v", (L, d, d))]
    elif cfg.factorized:
        layout += [("adj_u", (L, s, cfg.rank)), ("adj_v", (L, s, cfg.rank))]
    else:
        layout += [("adjacency", (L, s, s))]
    layout += [("head_weight", (d,)), ("head_bias", (1,))]
    return layout


class ParameterSet:
    """All trainable weights of one model, stored in a single flat buffer.

    Fields are exposed as attributes (numpy views into ``flat``), so writes
    through a field update the buffer and the optimizer can step ``flat``
    in one vectorized update.
    """

    def __init__(self, config: ModelConfig, flat: np.ndarray | None = None):
        layout = param_layout(config)
        size = sum(math.prod(shape) for _, shape in layout)
        if flat is None:
            flat = np.zeros(size)
        elif flat.shape != (size,):
            raise ConfigError(f"flat buffer has shape {flat.shape}, layout needs ({size},)")
        self.config = config
        self.flat = flat
        self._fields: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in layout:
            n = math.prod(shape)
            self._fields[name] = flat[offset:offset + n].reshape(shape)
            offset += n

    def __getattr__(self, name):
        fields = self.__dict__.get("_fields", {})
        if name in fields:
            return fields[name]
        raise AttributeError(name)

    @property
    def names(self) -> list[str]:
        return list(self._fields)

    def items(self):
        return self._fields.items()

    def zeros_like(self) -> "ParameterSet":
        return ParameterSet(self.config)

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.config, self.flat.copy())

    def norms(self) -> dict[str, float]:
        return {k: float(np.linalg.norm(v)) for k, v in self._fields.items()}


def init_params(cfg: ModelConfig) -> ParameterSet:
    """I.i.d. uniform(-0.1, 0.1) over every trainable entry, seeded by ``cfg.seed``."""
    p = ParameterSet(cfg)
    p.flat[:] = make_rng(cfg.seed, "init").uniform(-INIT_SCALE, INIT_SCALE, p.flat.size)
    return p


# --------------------------------------------------------------------------
# Forward pieces
# --------------------------------------------------------------------------

@dataclass
class LayerActivation:
    inputs: np.ndarray
    attention: np.ndarray
    outputs: np.ndarray
    queries: np.ndarray | None = None
    keys: np.ndarray | None = None
    values: np.ndarray | None = None
    gathered_u: np.ndarray | None = None
    gathered_v: np.ndarray | None = None


@dataclass
class Trace:
    tokens: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    layers: list[LayerActivation] = field(default_factory=list)
    features: np.ndarray | None = None


def _check_tokens(tokens: np.ndarray, vocab_size: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    if not np.issubdtype(tokens.dtype, np.integer):
        raise DataError(f"token ids must be integers, got dtype {tokens.dtype}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise DataError(f"token id out of range [0, {vocab_size}): min {tokens.min()}, max {tokens.max()}")
    return tokens


def embed(tokens, values, mask, params: ParameterSet) -> np.ndarray:
    tokens = _check_tokens(tokens, params.config.vocab_size)
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not tokens.shape == values.shape == mask.shape:
        raise DataError(f"tokens {tokens.shape}, values {values.shape}, mask {mask.shape} must align")
    value_part = values[..., None] * params.value_weight + params.value_bias
    return params.token_embedding[tokens] + np.where(mask[..., None], params.mask_embedding, value_part)


def attention_forward(e: np.ndarray, params: ParameterSet, layer: int = 0) -> LayerActivation:
    cfg = params.config
    if cfg.architecture != "attention":
        raise UsageError("attention_forward called on an adjacency model")
    q = e @ params.w_q[layer]
    k = e @ params.w_k[layer]
    v = e @ params.w_v[layer]
    scores = q @ np.swapaxes(k, -1, -2)
    if cfg.attention_scaling:
        scores /= math.sqrt(cfg.hidden_dim)
    att = softmax_rows(scores)
    return LayerActivation(inputs=e, attention=att, outputs=att @ v, queries=q, keys=k, values=v)


def gather_scores(tokens, params: ParameterSet, layer: int = 0):
    """Per-sample score matrix looked up by token identity.

    Returns ``(G, U[tokens], V[tokens])``; the last two are None in dense mode.
    """
    tokens = _check_tokens(tokens, params.config.vocab_size)
    if params.config.factorized:
        ug = params.adj_u[layer][tokens]
        vg = params.adj_v[layer][tokens]
        return ug @ np.swapaxes(vg, -1, -2), ug, vg
    a = params.adjacency[layer]
    return a[tokens[..., :, None], tokens[..., None, :]], None, None


def adjacency_forward(e: np.ndarray, tokens, params: ParameterSet, layer: int = 0) -> LayerActivation:
    if params.config.architecture != "adjacency":
        raise UsageError("adjacency_forward called on an attention model")
    g, ug, vg = gather_scores(tokens, params, layer)
    att = softmax_rows(g)
    return LayerActivation(inputs=e, attention=att, outputs=att @ e, gathered_u=ug, gathered_v=vg)


def predict(features: np.ndarray, params: ParameterSet) -> np.ndarray:
    return features @ params.head_weight + params.head_bias[0]


def forward(params: ParameterSet, tokens, values, mask) -> tuple[np.ndarray, Trace]:
    """Full embed -> blocks -> head pass. Returns predictions and the trace
    needed by :func:`backward`."""
    tokens = np.asarray(tokens)
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    x = embed(tokens, values, mask, params)
    trace = Trace(tokens=tokens, values=values, mask=mask)
    attention = params.config.architecture == "attention"
    for layer in range(params.config.num_layers):
        act = attention_forward(x, params, layer) if attention else adjacency_forward(x, tokens, params, layer)
        trace.layers.append(act)
        x = act.outputs
    trace.features = x
    return predict(x, params), trace


# --------------------------------------------------------------------------
# Backward
# --------------------------------------------------------------------------

def _softmax_backward(att: np.ndarray, d_att: np.ndarray) -> np.ndarray:
    return att * (d_att - (d_att * att).sum(axis=-1, keepdims=True))


def _scatter_rows(out: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    """``out[idx[i]] += rows[i]`` with repeated indices accumulated."""
    if out.shape[0] <= _ONE_HOT_MAX_VOCAB:
        out += np.eye(out.shape[0])[idx].T @ rows
    else:
        np.add.at(out, idx, rows)


def backward(trace: Trace | None, d_pred, params: ParameterSet) -> ParameterSet:
    """Exact reverse-mode gradient of ``sum(d_pred * predictions)`` with
    respect to every field of ``params``."""
    if trace is None or trace.features is None:
        raise UsageError("backward needs the trace returned by forward()")
    cfg = params.config
    d = cfg.hidden_dim
    grads = params.zeros_like()
    d_pred = np.asarray(d_pred, dtype=np.float64)
    if d_pred.shape != trace.tokens.shape:
        raise DataError(f"loss gradient shape {d_pred.shape} does not match predictions {trace.tokens.shape}")

    feats = trace.features
    grads.head_weight[:] = d_pred.reshape(-1) @ feats.reshape(-1, d)
    grads.head_bias[0] = d_pred.sum()
    dx = d_pred[..., None] * params.head_weight

    tokens = trace.tokens
    for layer in reversed(range(cfg.num_layers)):
        act = trace.layers[layer]
        if cfg.architecture == "attention":
            v = act.values
            d_att = dx @ np.swapaxes(v, -1, -2)
            dv = np.swapaxes(act.attention, -1, -2) @ dx
            ds = _softmax_backward(act.attention, d_att)
            if cfg.attention_scaling:
                ds /= math.sqrt(d)
            dq = ds @ act.keys
            dk = np.swapaxes(ds, -1, -2) @ act.queries
            e2 = act.inputs.reshape(-1, d)
            grads.w_q[layer] = e2.T @ dq.reshape(-1, d)
            grads.w_k[layer] = e2.T @ dk.reshape(-1, d)
            grads.w_v[layer] = e2.T @ dv.reshape(-1, d)
            dx = dq @ params.w_q[layer].T + dk @ params.w_k[layer].T + dv @ params.w_v[layer].T
        else:
            d_att = dx @ np.swapaxes(act.inputs, -1, -2)
            dg = _softmax_backward(act.attention, d_att)
            dx = np.swapaxes(act.attention, -1, -2) @ dx
            if cfg.factorized:
                r = cfg.rank
                du = dg @ act.gathered_v
                dvv = np.swapaxes(dg, -1, -2) @ act.gathered_u
                flat_tok = tokens.reshape(-1)
                _scatter_rows(grads.adj_u[layer], flat_tok, du.reshape(-1, r))
                _scatter_rows(grads.adj_v[layer], flat_tok, dvv.reshape(-1, r))
            else:
                s = cfg.vocab_size
                pair = (tokens[..., :, None] * s + tokens[..., None, :]).reshape(-1)
                grads.adjacency[layer] = np.bincount(pair, weights=dg.reshape(-1), minlength=s * s).reshape(s, s)

    dx2 = dx.reshape(-1, d)
    _scatter_rows(grads.token_embedding, tokens.reshape(-1), dx2)
    masked = trace.mask.reshape(-1).astype(np.float64)
    visible = 1.0 - masked
    grads.mask_embedding[:] = masked @ dx2
    grads.value_weight[:] = (visible * trace.values.reshape(-1)) @ dx2
    grads.value_bias[:] = visible @ dx2
    return grads


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

_MAGIC = b"POSFREE\x01"


def save_checkpoint(path, params: ParameterSet) -> None:
    """Binary layout: 8-byte magic, little-endian uint32 header length, UTF-8
    JSON ModelConfig header, then every field as little-endian float64 in
    declaration order."""
    header = json.dumps(asdict(params.config), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(params.flat.astype("<f8").tobytes())


def load_checkpoint(path) -> ParameterSet:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise DataError(f"{path}: not a parameter checkpoint")
    (hlen,) = struct.unpack("<I", raw[8:12])
    cfg = ModelConfig(**json.loads(raw[12:12 + hlen]))
    body = np.frombuffer(raw[12 + hlen:], dtype="<f8").astype(np.float64)
    return ParameterSet(cfg, body)
