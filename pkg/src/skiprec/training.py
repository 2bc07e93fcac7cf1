"""Mini-batch AdaGrad training loop and checkpoint persistence.

Batches are length-bucketed: examples are stable-sorted by clicked-sequence
length, cut into consecutive fixed-size chunks, and the chunk order is
shuffled once per epoch. Per-batch gradients are the mean over examples,
clipped by global L2 norm (only when the norm strictly exceeds the
threshold), then applied with AdaGrad.

Every random draw is keyed by absolute indices through SeedSequence
([seed, stream, epoch, batch]), never by state carried across epochs or
batches. Training k epochs, checkpointing, and training k' more therefore
produces bit-identical parameters to an uninterrupted k+k' epoch run.

Checkpoints are a little-endian binary container: the 6-byte magic
"SRU2B1", a version byte, the named parameter tensors, the optimizer
accumulators in the same encoding, and a canonical-JSON config dump. Tensor
encoding: u64 name length, name bytes, u64 rank, u64 per-dim sizes,
row-major float64 payload. Loading a truncated or foreign file reports the
byte offset where parsing failed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .batched import pooled_batch_step, prepare_pooled
from .data import TrainingExample
from .encoders import (
    Model,
    combine_with_extras,
    example_index,
    project_rows,
    scatter_tables,
    state_from_q,
    zero_grads,
)
from .losses import LossConfig, NegativeSampler, state_objective_grads

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SRU2B1"
CHECKPOINT_VERSION = 1

_STREAM_BATCH_ORDER = 21
_STREAM_NEGATIVES = 22


class TrainingDivergedError(RuntimeError):
    """A non-finite loss or gradient appeared; message says where."""


class CheckpointFormatError(ValueError):
    """The checkpoint bytes cannot be parsed; message carries the offset."""


class CheckpointMismatchError(ValueError):
    """A checkpoint's tensors do not fit the model built from the config."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    batch_size: int = 64
    epochs: int = 10
    clip_norm: float = 5.0
    adagrad_eps: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if not (np.isfinite(self.learning_rate) and self.learning_rate >= 0.0):
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not (np.isfinite(self.clip_norm) and self.clip_norm > 0.0):
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm!r}")
        if not (np.isfinite(self.adagrad_eps) and self.adagrad_eps > 0.0):
            raise ValueError(f"adagrad_eps must be > 0, got {self.adagrad_eps!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {self.seed!r}")


@dataclass
class OptimizerState:
    """AdaGrad squared-gradient accumulators, one per parameter tensor."""

    accumulators: dict[str, np.ndarray]

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({name: np.zeros_like(t) for name, t in params.items()})


@dataclass
class TrainResult:
    loss_trace: list[float] = field(default_factory=list)
    ce_trace: list[float] = field(default_factory=list)
    triplet_trace: list[float] = field(default_factory=list)
    optimizer: OptimizerState | None = None


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place when the global norm strictly exceeds
    max_norm; returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def adagrad_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    opt: OptimizerState,
    learning_rate: float,
    eps: float = 1e-8,
) -> None:
    """acc += g^2; theta -= lr * g / sqrt(acc + eps), elementwise."""
    for name, g in grads.items():
        acc = opt.accumulators[name]
        acc += g * g
        params[name] -= learning_rate * g / np.sqrt(acc + eps)


def make_batches(
    examples: list[TrainingExample], batch_size: int, seed
) -> list[list[TrainingExample]]:
    """Length-bucketed batches in a seed-determined order.

    seed may be an int or a sequence of ints (SeedSequence entropy).
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = sorted(range(len(examples)), key=lambda i: len(examples[i].clicked_seq))
    chunks = [
        [examples[i] for i in order[start : start + batch_size]]
        for start in range(0, len(examples), batch_size)
    ]
    rng = np.random.default_rng(seed)
    return [chunks[i] for i in rng.permutation(len(chunks))]


def _batch_step(
    model: Model,
    batch: list[TrainingExample],
    loss_cfg: LossConfig,
    sampler: NegativeSampler,
    seed: int,
    epoch: int,
    b_idx: int,
    grads: dict[str, np.ndarray],
    cache: dict,
) -> tuple[float, float, float]:
    """Loss and gradients for one mini-batch (sums, not yet averaged).

    The item projection runs once per batch and the embedding tables take
    one scatter per batch. With the meanpool encoder the objective itself
    runs batch-vectorized over the deduplicated row set; otherwise
    (recurrent encoder, or uneven label counts) it falls back to the
    per-example functions, which compute the same thing.
    """
    rng = np.random.default_rng([seed, _STREAM_NEGATIVES, epoch, b_idx])
    indices = []
    row_blocks = []
    pos_extras = []
    corrections = []
    bounds = [0]
    for ex in batch:
        index = example_index(model, ex, cache)
        neg_rows, probs = sampler.sample_rows(
            index.label_rows, loss_cfg.num_negatives, rng
        )
        rows, pos_extra = combine_with_extras(index, neg_rows)
        indices.append(index)
        row_blocks.append(rows)
        pos_extras.append(pos_extra)
        corrections.append(np.log(probs) if loss_cfg.correction else None)
        bounds.append(bounds[-1] + len(rows))

    pooled = None
    if model.clicked_variant == "meanpool":
        pooled = prepare_pooled(
            indices,
            pos_extras,
            corrections if loss_cfg.correction else None,
            bounds,
        )

    if pooled is not None:
        # Batch examples share negatives heavily, so projecting each distinct
        # row once cuts the dense work several-fold.
        uniq_rows, inv = np.unique(np.concatenate(row_blocks), return_inverse=True)
        pooled.remap(inv)
        feat, x, q_all = project_rows(model, uniq_rows)
        dq_all = np.zeros_like(q_all)
        total, ce, tri = pooled_batch_step(
            model, pooled, q_all, dq_all, loss_cfg, grads
        )
    else:
        feat, x, q_all = project_rows(model, np.concatenate(row_blocks))
        dq_all = np.zeros_like(q_all)
        total = 0.0
        ce = 0.0
        tri = 0.0
        for i in range(len(batch)):
            lo, hi = bounds[i], bounds[i + 1]
            state = state_from_q(
                model, indices[i], row_blocks[i], q_all[lo:hi], pos_extras[i]
            )
            parts = state_objective_grads(
                model, state, corrections[i], loss_cfg, grads, dq_all[lo:hi]
            )
            total += parts.total
            ce += parts.ce
            tri += parts.triplet

    dpre = dq_all * (1.0 - q_all * q_all)
    grads["w_item_proj"] += dpre.T @ x
    grads["b_item_proj"] += dpre.sum(axis=0)
    dx = dpre @ model.params["w_item_proj"]
    scatter_tables(model, feat, dx, grads)
    return total, ce, tri


def train(
    model: Model,
    examples: list[TrainingExample],
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    optimizer: OptimizerState | None = None,
    epoch_offset: int = 0,
    sampler: NegativeSampler | None = None,
) -> TrainResult:
    """Run train_cfg.epochs epochs over the examples, updating model.params.

    epoch_offset shifts the absolute epoch indices used for seeding, which
    is what makes checkpoint-resume bit-exact. Pass the optimizer state
    from the previous run when resuming.
    """
    loss_cfg.validate()
    train_cfg.validate()
    if not examples:
        raise ValueError("no training examples")
    for ex in examples:
        if not ex.labels:
            raise ValueError(f"example for user {ex.user_id!r} carries no labels")
    if epoch_offset < 0:
        raise ValueError(f"epoch_offset must be >= 0, got {epoch_offset}")
    if sampler is None:
        sampler = NegativeSampler.from_click_frequency(examples, model.catalog)
    sampler.ensure_rows(model.catalog)
    opt = optimizer if optimizer is not None else OptimizerState.fresh(model.params)

    cache: dict = {}
    result = TrainResult(optimizer=opt)
    for epoch in range(epoch_offset, epoch_offset + train_cfg.epochs):
        batches = make_batches(
            examples, train_cfg.batch_size, [train_cfg.seed, _STREAM_BATCH_ORDER, epoch]
        )
        sum_total = 0.0
        sum_ce = 0.0
        sum_tri = 0.0
        n_batches = 0
        for b_idx, batch in enumerate(batches):
            grads = zero_grads(model)
            batch_total, batch_ce, batch_tri = _batch_step(
                model, batch, loss_cfg, sampler, train_cfg.seed, epoch, b_idx,
                grads, cache,
            )
            inv = 1.0 / len(batch)
            batch_total *= inv
            batch_ce *= inv
            batch_tri *= inv
            if not np.isfinite(batch_total):
                raise TrainingDivergedError(
                    f"non-finite loss {batch_total} at epoch {epoch} batch {b_idx}"
                )
            for name, g in grads.items():
                g *= inv
                if not np.isfinite(g).all():
                    raise TrainingDivergedError(
                        f"non-finite gradient in {name} at epoch {epoch} batch {b_idx}"
                    )
            clip_global_norm(grads, train_cfg.clip_norm)
            adagrad_step(
                model.params, grads, opt, train_cfg.learning_rate, train_cfg.adagrad_eps
            )
            sum_total += batch_total
            sum_ce += batch_ce
            sum_tri += batch_tri
            n_batches += 1
        result.loss_trace.append(sum_total / n_batches)
        result.ce_trace.append(sum_ce / n_batches)
        result.triplet_trace.append(sum_tri / n_batches)
        logger.info(
            "epoch %d: loss %.6f (ce %.6f, triplet %.6f)",
            epoch,
            result.loss_trace[-1],
            result.ce_trace[-1],
            result.triplet_trace[-1],
        )
    return result


def write_loss_trace(path, trace: list[float], epoch_offset: int = 0) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        for i, loss in enumerate(trace):
            fh.write(f"{epoch_offset + i},{loss!r}\n")


# --- checkpoint container ---------------------------------------------------


def _u64(value: int) -> bytes:
    return int(value).to_bytes(8, "little", signed=False)


def _write_tensor_block(fh, tensors: dict[str, np.ndarray]) -> None:
    fh.write(_u64(len(tensors)))
    for name, tensor in tensors.items():
        encoded = name.encode("utf-8")
        fh.write(_u64(len(encoded)))
        fh.write(encoded)
        fh.write(_u64(tensor.ndim))
        for dim in tensor.shape:
            fh.write(_u64(dim))
        fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, fh):
        self.fh = fh
        self.offset = 0

    def read_exact(self, n: int) -> bytes:
        data = self.fh.read(n)
        if len(data) != n:
            raise CheckpointFormatError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.offset}, "
                f"got {len(data)}"
            )
        self.offset += n
        return data

    def read_u64(self) -> int:
        return int.from_bytes(self.read_exact(8), "little", signed=False)


def _read_tensor_block(reader: _Reader, what: str) -> dict[str, np.ndarray]:
    count = reader.read_u64()
    if count > 1_000_000:
        raise CheckpointFormatError(
            f"implausible {what} tensor count {count} at offset {reader.offset - 8}"
        )
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = reader.read_u64()
        if name_len > 4096:
            raise CheckpointFormatError(
                f"implausible tensor name length {name_len} at offset {reader.offset - 8}"
            )
        try:
            name = reader.read_exact(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(
                f"tensor name is not UTF-8 at offset {reader.offset - name_len}: {exc}"
            ) from exc
        rank = reader.read_u64()
        if rank > 8:
            raise CheckpointFormatError(
                f"implausible tensor rank {rank} for '{name}' at offset {reader.offset - 8}"
            )
        shape = tuple(reader.read_u64() for _ in range(rank))
        n_values = 1
        for dim in shape:
            n_values *= dim
        if n_values > 200_000_000:
            raise CheckpointFormatError(
                f"implausible tensor size {shape} for '{name}'"
            )
        payload = reader.read_exact(8 * n_values)
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return tensors


def save_checkpoint(
    path, params: dict[str, np.ndarray], opt: OptimizerState, config: dict
) -> None:
    """Write parameters, optimizer accumulators, and the config snapshot."""
    config_bytes = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(bytes([CHECKPOINT_VERSION]))
        _write_tensor_block(fh, params)
        _write_tensor_block(fh, opt.accumulators)
        fh.write(_u64(len(config_bytes)))
        fh.write(config_bytes)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], dict]:
    """Read a checkpoint back; returns (params, accumulators, config)."""
    with open(path, "rb") as fh:
        reader = _Reader(fh)
        magic = reader.read_exact(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(
                f"bad magic {magic!r} at offset 0, expected {CHECKPOINT_MAGIC!r}"
            )
        version = reader.read_exact(1)[0]
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(
                f"unsupported checkpoint version {version} at offset 6"
            )
        params = _read_tensor_block(reader, "parameter")
        accumulators = _read_tensor_block(reader, "accumulator")
        config_len = reader.read_u64()
        if config_len > 100_000_000:
            raise CheckpointFormatError(
                f"implausible config length {config_len} at offset {reader.offset - 8}"
            )
        config_bytes = reader.read_exact(config_len)
        trailing = fh.read(1)
        if trailing:
            raise CheckpointFormatError(
                f"trailing bytes after checkpoint body at offset {reader.offset}"
            )
    try:
        config = json.loads(config_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"config block is not valid JSON: {exc}") from exc
    return params, accumulators, config


def check_checkpoint_fits(model: Model, params: dict[str, np.ndarray]) -> None:
    """Raise CheckpointMismatchError unless names and shapes line up."""
    expected = {name: t.shape for name, t in model.params.items()}
    got = {name: t.shape for name, t in params.items()}
    if expected == got:
        return
    missing = sorted(set(expected) - set(got))
    extra = sorted(set(got) - set(expected))
    differing = sorted(
        name for name in set(expected) & set(got) if expected[name] != got[name]
    )
    parts = []
    if missing:
        parts.append(f"missing tensors: {missing}")
    if extra:
        parts.append(f"unexpected tensors: {extra}")
    if differing:
        detail = ", ".join(
            f"{name} {got[name]} != {expected[name]}" for name in differing
        )
        parts.append(f"shape mismatches: {detail}")
    raise CheckpointMismatchError("; ".join(parts))


def restore_model(model: Model, params: dict[str, np.ndarray]) -> None:
    """Copy checkpoint tensors into the model after a compatibility check."""
    check_checkpoint_fits(model, params)
    for name in model.params:
        model.params[name][...] = params[name]
