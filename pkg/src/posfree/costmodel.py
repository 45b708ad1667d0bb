"""Analytic per-sample forward FLOPs and retained-activation memory.

Counting convention (fixed, and recorded in every report):

* one multiply-add = 2 FLOPs; a softmax costs ``SOFTMAX_FLOPS`` per element;
  a dense adjacency gather costs 1 FLOP per looked-up score.
* attention layer: q/k/v projections ``3 * 2 l d^2``, scores ``2 l^2 d``,
  softmax over ``heads`` maps of ``l^2``, weighted sum ``2 l^2 d``.
* adjacency layer: gather ``l^2`` (or ``2 l^2 r`` when factorized), softmax
  over one ``l^2`` map, weighted sum ``2 l^2 d``.
* memory counts every tensor kept for the backward pass, once: the layer
  input, q/k/v and a score plus a probability map per head for attention;
  the layer input, gathered scores and the probability map (plus the gathered
  factor rows when factorized) for adjacency; and the final features.
* parameter storage is reported separately and is not part of memory.

Embedding lookups and the value/output linear layers are common to both
architectures and are left out of FLOPs and memory.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

from .errors import ConfigError
from .layers import ADJACENCY_MODES, ARCHITECTURES

SOFTMAX_FLOPS = 5
CONVENTION = (f"forward only; multiply-add=2 FLOPs; softmax={SOFTMAX_FLOPS} FLOPs/element; gather=1 FLOP; "
              "memory=retained activations per sample, parameters excluded")


@dataclass(frozen=True)
class CostConfig:
    num_layers: int = 6
    hidden_dim: int = 256
    seq_len: int = 512
    vocab_size: int = 60_000
    architecture: str = "attention"
    adjacency_mode: str = "dense"
    rank: int = 48
    heads: int = 8
    bytes_per_scalar: int = 4

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.adjacency_mode not in ADJACENCY_MODES:
            raise ConfigError(f"adjacency_mode must be one of {ADJACENCY_MODES}, got {self.adjacency_mode!r}")
        for name in ("num_layers", "hidden_dim", "seq_len", "vocab_size", "rank", "heads", "bytes_per_scalar"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.rank > self.vocab_size:
            raise ConfigError(f"rank {self.rank} exceeds vocab_size {self.vocab_size}")

    @property
    def factorized(self) -> bool:
        return self.architecture == "adjacency" and self.adjacency_mode == "factorized"

    def with_(self, **changes) -> "CostConfig":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        return CostConfig(**{**fields, **changes})


@dataclass
class CostReport:
    config: CostConfig
    flops_breakdown: dict[str, int] = field(default_factory=dict)
    memory_breakdown: dict[str, int] = field(default_factory=dict)
    params: int = 0
    convention: str = CONVENTION

    @property
    def flops(self) -> int:
        return sum(self.flops_breakdown.values())

    @property
    def memory_bytes(self) -> int:
        return sum(self.memory_breakdown.values())


def _layer_flops(cfg: CostConfig) -> dict[str, int]:
    l, d = cfg.seq_len, cfg.hidden_dim
    if cfg.architecture == "attention":
        return {"qkv_projection": 3 * 2 * l * d * d,
                "scores": 2 * l * l * d,
                "softmax": SOFTMAX_FLOPS * cfg.heads * l * l,
                "weighted_sum": 2 * l * l * d}
    gather = 2 * l * l * cfg.rank if cfg.factorized else l * l
    return {"gather": gather, "softmax": SOFTMAX_FLOPS * l * l, "weighted_sum": 2 * l * l * d}


def _layer_scalars(cfg: CostConfig) -> dict[str, int]:
    l, d = cfg.seq_len, cfg.hidden_dim
    if cfg.architecture == "attention":
        return {"input": l * d, "qkv": 3 * l * d, "scores": cfg.heads * l * l, "attention": cfg.heads * l * l}
    out = {"input": l * d, "scores": l * l, "attention": l * l}
    if cfg.factorized:
        out["factor_rows"] = 2 * l * cfg.rank
    return out


def param_count(cfg: CostConfig) -> int:
    s, d = cfg.vocab_size, cfg.hidden_dim
    shared = s * d + 3 * d + d + 1  # token table, value path, mask vector, head
    if cfg.architecture == "attention":
        per_layer = 3 * d * d
    else:
        per_layer = 2 * s * cfg.rank if cfg.factorized else s * s
    return shared + cfg.num_layers * per_layer


def flops(cfg: CostConfig) -> CostReport:
    report = CostReport(cfg, params=param_count(cfg))
    for layer in range(cfg.num_layers):
        for k, v in _layer_flops(cfg).items():
            report.flops_breakdown[f"layer{layer}.{k}"] = v
    return report


def memory(cfg: CostConfig) -> CostReport:
    report = CostReport(cfg, params=param_count(cfg))
    b = cfg.bytes_per_scalar
    for layer in range(cfg.num_layers):
        for k, v in _layer_scalars(cfg).items():
            report.memory_breakdown[f"layer{layer}.{k}"] = v * b
    report.memory_breakdown["features"] = cfg.seq_len * cfg.hidden_dim * b
    return report


def cost(cfg: CostConfig) -> CostReport:
    """FLOPs and memory in one report."""
    report = flops(cfg)
    report.memory_breakdown = memory(cfg).memory_breakdown
    return report


# (hidden_dim, seq_len) pairs of the published efficiency comparison; all 6 layers
TABLE2_SETTINGS = ((256, 512), (128, 512), (512, 512), (256, 256), (256, 1024))
PUBLISHED_TABLE2 = {  # (TF FLOPs, GNN FLOPs, TF mem, GNN mem)
    (256, 512): (2.01e9, 0.76e9, 169.96e6, 27.50e6),
    (128, 512): (0.70e9, 0.41e9, 147.52e6, 19.41e6),
    (512, 512): (6.44e9, 1.77e9, 216.04e6, 44.34e6),
    (256, 256): (0.81e9, 0.24e9, 52.29e6, 9.41e6),
    (256, 1024): (5.64e9, 2.63e9, 588.14e6, 76.63e6),
}

COST_COLUMNS = ("arch", "layers", "d", "l", "flops", "mem_bytes", "params")


def cost_pair(template: CostConfig) -> tuple[CostReport, CostReport]:
    """(attention, adjacency) reports at the same shape."""
    return cost(template.with_(architecture="attention")), cost(template.with_(architecture="adjacency"))


def cost_csv(reports) -> str:
    out = io.StringIO()
    out.write(",".join(COST_COLUMNS) + "\n")
    for r in reports:
        c = r.config
        arch = "adjacency-factorized" if c.factorized else c.architecture
        out.write(f"{arch},{c.num_layers},{c.hidden_dim},{c.seq_len},{r.flops},{r.memory_bytes},{r.params}\n")
    return out.getvalue()


def memory_crossing(template: CostConfig, l_values, budget_bytes: float) -> int | None:
    """Smallest listed l whose memory reaches ``budget_bytes``; None if none does."""
    for l in sorted(l_values):
        if memory(template.with_(seq_len=l)).memory_bytes >= budget_bytes:
            return l
    return None


def scaling_table(template: CostConfig, l_values, budget_bytes: float | None = None) -> tuple[str, dict]:
    """CSV of FLOPs and memory for both architectures at each l, plus the
    budget-crossing l of each (None means it stays under budget)."""
    l_values = sorted(l_values)
    if not l_values:
        raise ConfigError("scaling_table needs at least one sequence length")
    reports = []
    for l in l_values:
        reports.extend(cost_pair(template.with_(seq_len=l)))
    crossings = {}
    if budget_bytes is not None:
        for arch in ARCHITECTURES:
            crossings[arch] = memory_crossing(template.with_(architecture=arch), l_values, budget_bytes)
    return cost_csv(reports), crossings
