"""Synthetic permutation/value datasets with a tunable relative-position effect.

Each sample is a random ordering of the full token set. Values are generated
left to right: the token at 1-based slot ``p_k`` receives

    v_k = u_k + alpha * p_k + sum_{j < k} beta(t_j, t_k, p_j, p_k) * v_j
    beta(i, j, p_i, p_j) = e[i, j] + e_p * (p_i - p_j)

with exogenous ``u_k ~ N(mu[t_k], sigma^2)``. Because ``v`` is affine in the
Gaussian vector ``u`` for a fixed ordering, the minimum achievable masked-value
error (given the ordering) has a closed form; see :func:`bayes_risk`.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .numerics import make_rng

DEFAULT_MEANS = (-0.5, -0.25, 0.25, 0.5)
TRANSFER_RANGE = (0.2, 0.5)


@dataclass(frozen=True)
class SynthConfig:
    token_count: int = 4
    means: tuple[float, ...] = DEFAULT_MEANS
    sigma: float = 0.1
    alpha: float = -0.1
    e_p: float = 0.0
    # None -> drawn from the seed with sample_e_ij
    transfer: tuple[tuple[float, ...], ...] | None = None
    sample_count: int = 20_000
    split: float = 0.7
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "means", tuple(float(m) for m in self.means))
        if self.transfer is not None:
            object.__setattr__(self, "transfer", tuple(tuple(float(x) for x in row) for row in self.transfer))
        if self.token_count < 1:
            raise ConfigError(f"token_count must be positive, got {self.token_count}")
        if len(self.means) != self.token_count:
            raise ConfigError(f"{len(self.means)} means given for {self.token_count} tokens")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be nonnegative, got {self.sigma}")
        if not 0.0 <= self.e_p <= 1.0:
            raise ConfigError(f"e_p must lie in [0, 1], got {self.e_p}")
        if not 0.0 < self.split < 1.0:
            raise ConfigError(f"split must lie in (0, 1), got {self.split}")
        if self.sample_count < 2:
            raise ConfigError(f"sample_count must be at least 2, got {self.sample_count}")
        if self.transfer is not None and np.shape(self.transfer) != (self.token_count, self.token_count):
            raise ConfigError(f"transfer matrix must be {self.token_count}x{self.token_count}")

    def with_(self, **changes) -> "SynthConfig":
        return SynthConfig(**{**asdict(self), **changes})

    @property
    def n_train(self) -> int:
        n = int(round(self.sample_count * self.split))
        return min(max(n, 1), self.sample_count - 1)


@dataclass(frozen=True)
class SynthSample:
    permutation: tuple[int, ...]
    values: tuple[float, ...]

    @property
    def positions(self) -> tuple[int, ...]:
        return tuple(range(1, len(self.permutation) + 1))


@dataclass
class SynthDataset:
    """Samples stored column-wise: ``tokens[n, k]`` is the token in slot k."""

    config: SynthConfig
    transfer: np.ndarray
    tokens: np.ndarray
    values: np.ndarray
    n_train: int = field(default=0)

    @property
    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.tokens[:self.n_train], self.values[:self.n_train]

    @property
    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.tokens[self.n_train:], self.values[self.n_train:]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]

    def sample(self, i: int) -> SynthSample:
        return SynthSample(tuple(int(t) for t in self.tokens[i]), tuple(float(v) for v in self.values[i]))


def sample_e_ij(rng: np.random.Generator, token_count: int = 4,
                low: float = TRANSFER_RANGE[0], high: float = TRANSFER_RANGE[1]) -> np.ndarray:
    """Draw a transfer matrix with i.i.d. uniform entries in (low, high).

    Diagonal entries are drawn too but never used: tokens are distinct within
    a sample, so no token transfers to itself.
    """
    e = rng.uniform(low, high, size=(token_count, token_count))
    # uniform() is half-open; keep the lower end open as well
    e[e <= low] = np.nextafter(low, high)
    return e


def transfer_matrix(cfg: SynthConfig) -> np.ndarray:
    if cfg.transfer is not None:
        return np.array(cfg.transfer, dtype=np.float64)
    return sample_e_ij(make_rng(cfg.seed, "transfer"), cfg.token_count)


def beta(i: int, j: int, p_i: int, p_j: int, transfer: np.ndarray, e_p: float) -> float:
    return float(transfer[i, j] + e_p * (p_i - p_j))


def gen_values(permutation, u_draws, transfer: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    """Values for one sample, in slot order. ``u_draws`` is indexed by token id."""
    perm = list(permutation)
    v = np.zeros(len(perm))
    for k, tk in enumerate(perm):
        acc = u_draws[tk] + cfg.alpha * (k + 1)
        for j in range(k):
            acc += beta(perm[j], tk, j + 1, k + 1, transfer, cfg.e_p) * v[j]
        v[k] = acc
    return v


def _values_batch(tokens: np.ndarray, u: np.ndarray, transfer: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    n, l = tokens.shape
    rows = np.arange(n)
    v = np.zeros((n, l))
    for k in range(l):
        acc = u[rows, tokens[:, k]] + cfg.alpha * (k + 1)
        for j in range(k):
            acc = acc + (transfer[tokens[:, j], tokens[:, k]] + cfg.e_p * (j - k)) * v[:, j]
        v[:, k] = acc
    return v


def gen_dataset(cfg: SynthConfig) -> SynthDataset:
    """Uniformly random orderings with fresh exogenous draws per sample.

    Deterministic in ``cfg`` (including seed). The first ``n_train`` samples
    form the train split.
    """
    transfer = transfer_matrix(cfg)
    rng = make_rng(cfg.seed, "samples")
    n, t = cfg.sample_count, cfg.token_count
    tokens = rng.permuted(np.tile(np.arange(t), (n, 1)), axis=1)
    u = np.asarray(cfg.means) + cfg.sigma * rng.standard_normal((n, t))
    values = _values_batch(tokens, u, transfer, cfg)
    return SynthDataset(config=cfg, transfer=transfer, tokens=tokens, values=values, n_train=cfg.n_train)


# --------------------------------------------------------------------------
# Closed-form Gaussian oracle
# --------------------------------------------------------------------------

def ordering_moments(permutation, transfer: np.ndarray, cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean, covariance and noise gain of slot values for a fixed ordering.

    ``v = G (u + alpha * p)`` with ``G = (I - B)^{-1}`` and ``B`` the strictly
    lower-triangular matrix of beta coefficients.
    """
    perm = list(permutation)
    l = len(perm)
    b = np.zeros((l, l))
    for k in range(l):
        for j in range(k):
            b[k, j] = beta(perm[j], perm[k], j + 1, k + 1, transfer, cfg.e_p)
    gain = np.linalg.solve(np.eye(l) - b, np.eye(l))
    means = np.asarray(cfg.means)[perm] + cfg.alpha * np.arange(1, l + 1)
    return gain @ means, cfg.sigma ** 2 * gain @ gain.T, gain


def _conditional(cov: np.ndarray, target: list[int], observed: list[int], perm) -> tuple[np.ndarray, np.ndarray]:
    """Regression matrix and conditional variances of ``target`` given ``observed``."""
    if not observed:
        return np.zeros((len(target), 0)), np.diag(cov)[target].copy()
    c_oo = cov[np.ix_(observed, observed)]
    c_to = cov[np.ix_(target, observed)]
    try:
        chol = np.linalg.cholesky(c_oo)
    except np.linalg.LinAlgError:
        raise NumericError(f"singular conditioning covariance for ordering {tuple(perm)}") from None
    coef = np.linalg.solve(chol.T, np.linalg.solve(chol, c_to.T)).T
    var = np.diag(cov)[target] - np.einsum("ij,ij->i", coef, c_to)
    return coef, var


def risk_terms(cfg: SynthConfig, transfer: np.ndarray | None = None, masks_per_sample: int = 1) -> np.ndarray:
    """Conditional variance of each masked slot, for every ordering and every
    mask subset of the given size (each equally likely)."""
    if cfg.sigma <= 0:
        raise ConfigError("bayes risk needs sigma > 0")
    l = cfg.token_count
    if not 1 <= masks_per_sample < l + 1:
        raise ConfigError(f"masks_per_sample must be in [1, {l}], got {masks_per_sample}")
    transfer = transfer_matrix(cfg) if transfer is None else transfer
    terms = []
    for perm in itertools.permutations(range(l)):
        _, cov, _ = ordering_moments(perm, transfer, cfg)
        for masked in itertools.combinations(range(l), masks_per_sample):
            observed = [k for k in range(l) if k not in masked]
            _, var = _conditional(cov, list(masked), observed, perm)
            terms.extend(var)
    return np.asarray(terms)


def bayes_risk(cfg: SynthConfig, transfer: np.ndarray | None = None, masks_per_sample: int = 1) -> float:
    """Minimum expected squared error on a masked value for a predictor that
    knows the ordering, averaged over uniform orderings and mask choices."""
    return float(risk_terms(cfg, transfer, masks_per_sample).mean())


def bayes_risk_stderr(cfg: SynthConfig, n_test: int, transfer: np.ndarray | None = None,
                      masks_per_sample: int = 1) -> float:
    """Standard error of the Bayes predictor's mean squared error over
    ``n_test`` masked values. Residuals are N(0, c) with c drawn from the
    risk terms, so E[r^4] = 3 E[c^2]."""
    c = risk_terms(cfg, transfer, masks_per_sample)
    return math.sqrt(max(3.0 * np.mean(c ** 2) - np.mean(c) ** 2, 0.0) / n_test)


def conditional_variance(cfg: SynthConfig, permutation, target_slot: int, observed_slots,
                         transfer: np.ndarray | None = None) -> float:
    transfer = transfer_matrix(cfg) if transfer is None else transfer
    _, cov, _ = ordering_moments(permutation, transfer, cfg)
    _, var = _conditional(cov, [target_slot], sorted(observed_slots), permutation)
    return float(var[0])


def conditional_mean_predictor(cfg: SynthConfig, transfer: np.ndarray | None = None):
    """Predictor returning E[v_masked | visible values, ordering]; the
    ordering is read from the slot order of ``tokens``."""
    transfer = transfer_matrix(cfg) if transfer is None else transfer
    cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}

    def moments(perm):
        if perm not in cache:
            mean, cov, _ = ordering_moments(perm, transfer, cfg)
            cache[perm] = (mean, cov)
        return cache[perm]

    def predict(tokens, values, mask):
        tokens = np.asarray(tokens)
        values = np.asarray(values, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        out = values.copy()
        keys = np.concatenate([tokens, mask.astype(tokens.dtype)], axis=1)
        groups, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        l = tokens.shape[1]
        for g, key in enumerate(groups):
            rows = np.flatnonzero(inverse == g)
            perm = tuple(int(t) for t in key[:l])
            m = key[l:].astype(bool)
            target = list(np.flatnonzero(m))
            if not target:
                continue
            observed = list(np.flatnonzero(~m))
            mean, cov = moments(perm)
            coef, _ = _conditional(cov, target, observed, perm)
            resid = values[np.ix_(rows, observed)] - mean[observed]
            out[np.ix_(rows, target)] = mean[target] + resid @ coef.T
        return out

    return predict


# --------------------------------------------------------------------------
# Text serialization
# --------------------------------------------------------------------------

_HEADER = "# posfree-dataset v1"


def _format_config(cfg: SynthConfig, transfer: np.ndarray) -> list[str]:
    d = asdict(cfg)
    d["means"] = ",".join(repr(m) for m in cfg.means)
    d["transfer"] = ";".join(",".join(repr(float(x)) for x in row) for row in transfer)
    return [f"# {k}={d[k]}" for k in sorted(d)]


def write_split(path, dataset: SynthDataset, split: str) -> None:
    tokens, values = dataset.train if split == "train" else dataset.test
    lines = [_HEADER, f"# split={split}"] + _format_config(dataset.config, dataset.transfer)
    for tok, val in zip(tokens, values):
        lines.append(",".join(str(int(t)) for t in tok) + "\t" + ",".join(f"{v:.9g}" for v in val))
    Path(path).write_text("\n".join(lines) + "\n")


def read_split(path) -> tuple[SynthConfig, np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(config, transfer, tokens, values)`` from a split file."""
    text = Path(path).read_text().splitlines()
    if not text or text[0] != _HEADER:
        raise DataError(f"{path}: missing dataset header")
    meta, rows = {}, []
    for lineno, line in enumerate(text[1:], start=2):
        if line.startswith("# "):
            key, _, val = line[2:].partition("=")
            meta[key] = val
            continue
        try:
            tok_s, val_s = line.split("\t")
            rows.append(([int(x) for x in tok_s.split(",")], [float(x) for x in val_s.split(",")]))
        except ValueError:
            raise DataError(f"{path}:{lineno}: malformed record {line!r}") from None
    transfer = np.array([[float(x) for x in r.split(",")] for r in meta["transfer"].split(";")])
    cfg = SynthConfig(
        token_count=int(meta["token_count"]),
        means=tuple(float(x) for x in meta["means"].split(",")),
        sigma=float(meta["sigma"]),
        alpha=float(meta["alpha"]),
        e_p=float(meta["e_p"]),
        transfer=tuple(map(tuple, transfer)),
        sample_count=int(meta["sample_count"]),
        split=float(meta["split"]),
        seed=int(meta["seed"]),
    )
    if not rows:
        return cfg, transfer, np.zeros((0, cfg.token_count), np.int64), np.zeros((0, cfg.token_count))
    tokens = np.array([r[0] for r in rows], dtype=np.int64)
    values = np.array([r[1] for r in rows], dtype=np.float64)
    return cfg, transfer, tokens, values
