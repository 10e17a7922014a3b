"""Adam, the epoch loop with best-validation retention, and checkpoint files."""
from __future__ import annotations

import csv
import io
import logging
import struct
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .data import LoadedSplit, batch_iterator
from .head import Model
from .loss import total_loss
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

LR_METHODS = 1e-5
LR_RESULTS = 5e-6


@dataclass
class TrainConfig:
    learning_rate: float = LR_RESULTS
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 10
    seed: int = 0
    worker_threads: int = 8
    lambda_fs: float = 0.05

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.worker_threads < 1:
            raise ValueError(f"worker_threads must be >= 1, got {self.worker_threads}")
        if self.lambda_fs < 0:
            raise ValueError(f"lambda_fs must be >= 0, got {self.lambda_fs}")


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    config: TrainConfig,
    grads: dict[str, np.ndarray] | None = None,
) -> None:
    """One bias-corrected Adam update, in place. Missing gradients count as zero."""
    g_of = {k: (grads[k] if grads is not None and k in grads else p.grad) for k, p in params.items()}
    for name, g in g_of.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    lr = config.learning_rate
    for name, p in params.items():
        g = g_of[name]
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        step = (lr / c1) * m / (np.sqrt(v / c2) + config.eps)
        p.data = (p.data - step).astype(p.dtype)


# --------------------------------------------------------------------------
# epochs
# --------------------------------------------------------------------------

@dataclass
class EpochStats:
    loss: float
    ce: float
    fsl: float
    acc: float
    n: int


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    train_ce: float
    train_fsl: float
    train_acc: float
    val_loss: float
    val_acc: float
    seconds: float

    HEADER = "epoch,train_loss,train_ce,train_fsl,train_acc,val_loss,val_acc,seconds"

    def csv_row(self) -> str:
        vals = [getattr(self, f.name) for f in fields(self)][1:]
        return f"{self.epoch}," + ",".join(f"{v:.6f}" for v in vals)


def argmax_predictions(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.asarray(logits).argmax(axis=1)


def run_epoch(
    model: Model,
    split: LoadedSplit,
    config: TrainConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    state: AdamState | None = None,
    epoch: int = 0,
) -> EpochStats:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if split.class_names and len(split.class_names) != model.config.head.n_class:
        raise ValueError(
            f"data has {len(split.class_names)} classes but the model predicts {model.config.head.n_class}"
        )
    training = mode == "train"
    if training and state is None:
        raise ValueError("train mode needs an AdamState")
    tot = {"loss": 0.0, "ce": 0.0, "fsl": 0.0}
    correct = n_seen = 0
    for batch in batch_iterator(split, config.batch_size, shuffle=training, seed=config.seed, epoch=epoch):
        x = Tensor(batch.images)
        if training:
            model.zero_grad()
            with Tape() as tape:
                logits, prelogits = model(x, True, rng)
                loss, ce, fs = total_loss(logits, prelogits, batch.labels, config.lambda_fs)
                _check_finite(loss, batch.paths)
                tape.backward(loss)
            adam_step(model.params, state, config)
        else:
            logits, prelogits = model(x, False)
            loss, ce, fs = total_loss(logits, prelogits, batch.labels, config.lambda_fs)
            _check_finite(loss, batch.paths)
        b = len(batch.labels)
        tot["loss"] += loss.item() * b
        tot["ce"] += ce.item() * b
        tot["fsl"] += fs.item() * b
        correct += int((argmax_predictions(logits.data) == batch.labels).sum())
        n_seen += b
    return EpochStats(tot["loss"] / n_seen, tot["ce"] / n_seen, tot["fsl"] / n_seen, correct / n_seen, n_seen)


def _check_finite(loss: Tensor, paths) -> None:
    if not np.isfinite(loss.item()):
        raise FloatingPointError(f"non-finite loss {loss.item()} on batch {list(paths)}")


def predict(model: Model, split: LoadedSplit, batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode logits and prelogits for every sample, in split order."""
    logits, feats = [], []
    for batch in batch_iterator(split, batch_size):
        lg, pre = model(Tensor(batch.images), False)
        logits.append(lg.data)
        feats.append(pre.data)
    return np.concatenate(logits), np.concatenate(feats)


@dataclass
class FitResult:
    best_params: dict[str, np.ndarray]
    best_epoch: int
    best_val_acc: float
    logs: list[EpochLog]
    final_params: dict[str, np.ndarray]


def fit(
    model: Model,
    train: LoadedSplit,
    val: LoadedSplit,
    config: TrainConfig,
    log_path=None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> FitResult:
    """Train for ``config.epochs`` epochs keeping the snapshot with the best val accuracy.

    Ties keep the earlier epoch. When ``log_path`` is given the CSV is
    rewritten after every epoch.
    """
    dropout_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    state = AdamState()
    logs: list[EpochLog] = []
    best: dict[str, np.ndarray] | None = None
    best_epoch, best_acc = 0, -1.0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        tr = run_epoch(model, train, config, "train", dropout_rng, state, epoch)
        va = run_epoch(model, val, config, "eval")
        entry = EpochLog(epoch, tr.loss, tr.ce, tr.fsl, tr.acc, va.loss, va.acc, time.perf_counter() - t0)
        logs.append(entry)
        if va.acc > best_acc:
            best_acc, best_epoch, best = va.acc, epoch, model.snapshot()
        if log_path is not None:
            write_epoch_csv(log_path, logs)
        if on_epoch is not None:
            on_epoch(entry)
    assert best is not None
    return FitResult(best, best_epoch, best_acc, logs, model.snapshot())


def select_best(val_accs) -> int:
    """1-based epoch of the first maximum."""
    return int(np.argmax(np.asarray(val_accs))) + 1


def write_epoch_csv(path, logs: list[EpochLog]) -> None:
    lines = [EpochLog.HEADER] + [e.csv_row() for e in logs]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_epoch_csv(path) -> list[EpochLog]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [
        EpochLog(int(r["epoch"]), *(float(r[f.name]) for f in fields(EpochLog)[1:]))
        for r in rows
    ]


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

MAGIC = b"ICNT"
FORMAT_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(Exception):
    pass


def save_checkpoint(params, meta: str, path) -> None:
    """Write named tensors plus a UTF-8 metadata block (little-endian throughout)."""
    buf = io.BytesIO()
    meta_b = meta.encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(meta_b)))
    buf.write(meta_b)
    buf.write(struct.pack("<I", len(params)))
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_TAGS:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<BB", _DTYPE_TAGS[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"{self.path}: truncated file reading {what} at offset {self.pos} "
                f"(need {n} bytes, {len(self.data) - self.pos} left)"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path, expected: dict | None = None) -> tuple[dict[str, np.ndarray], str]:
    """Read a checkpoint; with ``expected`` (name -> Tensor/array/shape), verify names and shapes."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic at offset 0")
    version, meta_len = r.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} at offset 4")
    try:
        meta = r.take(meta_len, "metadata").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: metadata is not valid UTF-8 (offset 12)") from exc
    (count,) = r.unpack("<I", "tensor count")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "tensor name").decode("utf-8")
        start = r.pos
        tag, rank = r.unpack("<BB", f"dtype/rank of {name!r}")
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} for {name!r} at offset {start}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name!r}")
        dt = _TAG_DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(r.take(nbytes, f"data of {name!r}"), dtype=dt).reshape(dims).copy()
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes at offset {r.pos}")
    if expected is not None:
        verify_shapes(arrays, expected, path)
    return arrays, meta


def verify_shapes(arrays, expected, path) -> None:
    for name, ref in expected.items():
        shape = tuple(ref) if isinstance(ref, (tuple, list)) else tuple(ref.shape)
        if name not in arrays:
            raise CheckpointError(f"{path}: tensor {name!r} missing from checkpoint")
        if arrays[name].shape != shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {arrays[name].shape}, model expects {shape}"
            )
    extra = sorted(set(arrays) - set(expected))
    if extra:
        raise CheckpointError(f"{path}: unexpected tensor {extra[0]!r} in checkpoint")
