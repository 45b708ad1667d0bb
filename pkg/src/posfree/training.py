"""Masked value prediction: masking, loss, the training loop and evaluation.

Both architectures go through the same data pipeline. Batch order and train
masks come from ``make_rng(seed, "batches", epoch)`` and test masks from
``make_rng(seed, "test-mask")``, so neither depends on the model and paired
runs score identical prediction problems.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, DataError, NumericError, UsageError
from .layers import INIT_SCALE, ModelConfig, ParameterSet, backward, forward, init_params
from .numerics import AdamState, adam_step, make_rng
from .synthgen import SynthDataset, SynthSample

Predictor = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    lr: float = 0.001
    masks_per_sample: int = 1
    seed: int = 0

    def __post_init__(self):
        # zero epochs is allowed: it yields an untrained baseline report
        if self.epochs < 0:
            raise ConfigError(f"epochs must be nonnegative, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.masks_per_sample < 1:
            raise ConfigError(f"masks_per_sample must be positive, got {self.masks_per_sample}")
        if not self.lr >= 0:
            raise ConfigError(f"learning rate must be nonnegative, got {self.lr}")

    def with_(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})


@dataclass
class TrainReport:
    train_losses: list[float]
    test_losses: list[float]
    model_config: dict
    train_config: dict
    data_config: dict
    init: str = f"uniform(-{INIT_SCALE}, {INIT_SCALE})"
    optimizer: dict = field(default_factory=dict)
    seconds: float = field(default=0.0, compare=False)

    @property
    def best_test_loss(self) -> float | None:
        return min(self.test_losses) if self.test_losses else None

    @property
    def best_epoch(self) -> int | None:
        """1-based epoch of the best test loss (earliest on ties)."""
        if not self.test_losses:
            return None
        return int(np.argmin(self.test_losses)) + 1

    def write(self, csv_path) -> Path:
        """Write the loss curves as CSV plus a ``.meta.txt`` sidecar with
        every config field. Both are deterministic; wall-clock time is left
        to the caller's manifest. Returns the sidecar path."""
        csv_path = Path(csv_path)
        lines = ["epoch,train_loss,test_loss"]
        for i, (tr, te) in enumerate(zip(self.train_losses, self.test_losses), start=1):
            lines.append(f"{i},{tr!r},{te!r}")
        csv_path.write_text("\n".join(lines) + "\n")
        meta = csv_path.with_suffix(".meta.txt")
        out = []
        for section, values in (("model", self.model_config), ("train", self.train_config),
                                ("data", self.data_config), ("optimizer", self.optimizer)):
            out.extend(f"{section}.{k}={v!r}" for k, v in values.items())
        out.append(f"init={self.init}")
        out.append(f"best_test_loss={self.best_test_loss!r}")
        out.append(f"best_epoch={self.best_epoch}")
        meta.write_text("\n".join(out) + "\n")
        return meta


def make_masks(rng: np.random.Generator, n: int, seq_len: int, masks_per_sample: int = 1) -> np.ndarray:
    """Boolean ``(n, seq_len)`` array with exactly ``masks_per_sample`` slots
    set per row, chosen uniformly without replacement."""
    if not 1 <= masks_per_sample <= seq_len:
        raise UsageError(f"cannot mask {masks_per_sample} of {seq_len} slots")
    order = np.argsort(rng.random((n, seq_len)), axis=1)
    mask = np.zeros((n, seq_len), dtype=bool)
    np.put_along_axis(mask, order[:, :masks_per_sample], True, axis=1)
    return mask


def mask_sample(sample: SynthSample, rng: np.random.Generator, masks_per_sample: int = 1):
    """Returns ``(tokens, masked_values, mask_flags, targets)``. Masked slots
    carry 0.0 in ``masked_values``; ``targets`` are their true values in slot
    order."""
    tokens = np.asarray(sample.permutation)
    values = np.asarray(sample.values, dtype=np.float64)
    flags = make_masks(rng, 1, len(tokens), masks_per_sample)[0]
    return tokens, np.where(flags, 0.0, values), flags, values[flags]


def mvp_loss(predictions, targets, mask) -> float:
    """Mean squared error over the masked positions of the batch."""
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not predictions.shape == targets.shape == mask.shape:
        raise DataError(f"predictions {predictions.shape}, targets {targets.shape}, mask {mask.shape} must align")
    count = int(mask.sum())
    if count == 0:
        raise UsageError("mvp_loss needs at least one masked position")
    err = np.where(mask, predictions - targets, 0.0)
    return float((err * err).sum() / count)


def _as_predictor(model) -> Predictor:
    if isinstance(model, ParameterSet):
        return lambda tokens, values, mask: forward(model, tokens, values, mask)[0]
    if callable(model):
        return model
    raise UsageError(f"cannot evaluate a {type(model).__name__}")


def eval_masks(seed: int, n: int, seq_len: int, masks_per_sample: int = 1) -> np.ndarray:
    return make_masks(make_rng(seed, "test-mask"), n, seq_len, masks_per_sample)


def evaluate(model, tokens, values, mask_seed: int, masks_per_sample: int = 1,
             mask: np.ndarray | None = None) -> float:
    """Masked-value MSE of ``model`` (a ParameterSet or a callable
    ``(tokens, values, mask) -> predictions``) over a whole split.

    Masks are drawn from ``mask_seed`` unless given explicitly. Inputs at
    masked slots are zeroed before the model sees them.
    """
    tokens = np.asarray(tokens)
    values = np.asarray(values, dtype=np.float64)
    if mask is None:
        mask = eval_masks(mask_seed, *tokens.shape, masks_per_sample)
    pred = _as_predictor(model)(tokens, np.where(mask, 0.0, values), mask)
    return mvp_loss(pred, values, mask)


def _check_schema(model_cfg: ModelConfig, dataset: SynthDataset) -> None:
    diffs = []
    if dataset.seq_len != model_cfg.seq_len:
        diffs.append(f"seq_len: model {model_cfg.seq_len}, data {dataset.seq_len}")
    if dataset.config.token_count > model_cfg.vocab_size:
        diffs.append(f"vocab_size: model {model_cfg.vocab_size}, data needs {dataset.config.token_count}")
    if diffs:
        raise DataError("dataset does not match model config: " + "; ".join(diffs))


def epoch_batches(train_cfg: TrainConfig, epoch: int, n: int, seq_len: int):
    """Sample order and train masks for one epoch (0-based). Depends only on
    the train seed, never on the architecture."""
    rng = make_rng(train_cfg.seed, "batches", epoch)
    order = rng.permutation(n)
    masks = make_masks(rng, n, seq_len, train_cfg.masks_per_sample)
    for start in range(0, n, train_cfg.batch_size):
        idx = order[start:start + train_cfg.batch_size]
        yield idx, masks[start:start + len(idx)]


def train(model_cfg: ModelConfig, dataset: SynthDataset, train_cfg: TrainConfig,
          callback: Callable[[int, float, float], None] | None = None) -> tuple[ParameterSet, TrainReport]:
    """Adam on the masked-value loss. Returns the final parameters and a
    report whose best test loss is the minimum over per-epoch evaluations."""
    _check_schema(model_cfg, dataset)
    l = dataset.seq_len
    if train_cfg.masks_per_sample >= l:
        raise ConfigError(f"masks_per_sample must be below the sequence length {l}")
    started = time.perf_counter()
    params = init_params(model_cfg)
    state = AdamState.zeros(params.flat.size)
    tr_tok, tr_val = dataset.train
    te_tok, te_val = dataset.test
    te_mask = eval_masks(train_cfg.seed, len(te_tok), l, train_cfg.masks_per_sample)
    te_input = np.where(te_mask, 0.0, te_val)
    report = TrainReport([], [], asdict(model_cfg), asdict(train_cfg), asdict(dataset.config),
                         optimizer={"name": "adam", "lr": train_cfg.lr, **state.hyperparameters()})

    for epoch in range(train_cfg.epochs):
        sq_sum, count = 0.0, 0
        for b, (idx, mask) in enumerate(epoch_batches(train_cfg, epoch, len(tr_tok), l)):
            tokens, values = tr_tok[idx], tr_val[idx]
            pred, trace = forward(params, tokens, np.where(mask, 0.0, values), mask)
            err = np.where(mask, pred - values, 0.0)
            n_masked = int(mask.sum())
            batch_sq = float((err * err).sum())
            if not math.isfinite(batch_sq):
                norms = ", ".join(f"{k}={v:.3g}" for k, v in params.norms().items())
                raise NumericError(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}; parameter norms: {norms}")
            grads = backward(trace, (2.0 / n_masked) * err, params)
            adam_step(params.flat, grads.flat, state, train_cfg.lr)
            sq_sum += batch_sq
            count += n_masked
        test_loss = mvp_loss(forward(params, te_tok, te_input, te_mask)[0], te_val, te_mask)
        if not math.isfinite(test_loss):
            raise NumericError(f"non-finite test loss after epoch {epoch + 1}")
        report.train_losses.append(sq_sum / count)
        report.test_losses.append(test_loss)
        if callback is not None:
            callback(epoch + 1, report.train_losses[-1], test_loss)

    report.seconds = time.perf_counter() - started
    return params, report
