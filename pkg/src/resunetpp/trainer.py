"""Training loop, binary checkpoint container, and evaluation.

Checkpoint layout (all integers little-endian): magic "RUPP", format version
(4-byte unsigned), tensor count (4-byte unsigned), then per tensor: name
length (4 bytes) + UTF-8 name + rank (4 bytes) + dims (8 bytes each) + raw
f32 data. Model tensors come first under "model/...", optimizer moments and
step counter follow under "opt/...", and "conf/..." entries record the model
geometry so a checkpoint alone is enough to rebuild the network.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .data import shuffle_epoch
from .errors import CheckpointError, NonFiniteLossError, ValidationError
from .losses import (LossConfig, binarize, dice_coefficient, jaccard_index,
                     jaccard_loss, pixel_accuracy, soft_jaccard_index)
from .model import ResUnetPPConfig, ResUnetPPModel, build_model
from .optim import LRSchedule, MomentOptimizer, reduce_on_plateau, schedule_lr

CHECKPOINT_MAGIC = b"RUPP"
CHECKPOINT_VERSION = 1
HISTORY_HEADER = "epoch,train_loss,val_loss,val_iou,lr,seconds"


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    optimizer: str = "nadam"
    initial_lr: float = 1e-3
    adam_eps: float = 1e-8
    early_stop_patience: int = 10
    min_delta: float = 1e-4
    checkpoint_path: str | None = None       # best-so-far weights
    last_checkpoint_path: str | None = None  # rolling end-of-epoch state
    seed: int = 0
    conf_extras: dict | None = None          # extra conf/ entries for checkpoints

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.early_stop_patience < 1:
            raise ValidationError("early_stop_patience must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_iou: float
    lr: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def to_csv(self, path) -> None:
        lines = [HISTORY_HEADER]
        for r in self.records:
            lines.append(",".join([
                str(r.epoch), repr(float(r.train_loss)), repr(float(r.val_loss)),
                repr(float(r.val_iou)), repr(float(r.lr)), repr(float(r.seconds)),
            ]))
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class OptimizerSnapshot:
    t: int
    epoch: int | None
    m: dict
    v: dict


# --- checkpoint codec -------------------------------------------------------

def _write_tensor(fh, name: str, arr) -> None:
    data = np.ascontiguousarray(arr, dtype="<f4")
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", data.ndim))
    for d in data.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(data.tobytes())


def _config_entries(config: ResUnetPPConfig, extras: dict | None):
    entries = [
        ("conf/input_channels", [config.input_channels]),
        ("conf/base_channels", [config.base_channels]),
        ("conf/depth", [config.depth]),
        ("conf/input_size", list(config.input_size)),
        ("conf/aspp_dilations", list(config.aspp_dilations)),
        ("conf/seed", [config.seed]),
    ]
    for key, value in (extras or {}).items():
        arr = np.atleast_1d(np.asarray(value, dtype=np.float32))
        entries.append((f"conf/{key}", arr))
    return entries


def checkpoint_save(model: ResUnetPPModel, optimizer, path,
                    epoch: int | None = None, conf_extras: dict | None = None) -> None:
    """Write model parameters, batch-norm state, and optimizer moments."""
    entries = [(f"model/{name}", var.value) for name, var in model.parameters()]
    entries += [(f"model/{name}", arr) for name, arr in model.state_tensors()]
    if optimizer is not None:
        for name, _ in optimizer.params:
            entries.append((f"opt/{name}.m", optimizer.m[name]))
            entries.append((f"opt/{name}.v", optimizer.v[name]))
        entries.append(("opt/t", np.array([optimizer.t], dtype=np.float32)))
        if epoch is not None:
            entries.append(("opt/epoch", np.array([epoch], dtype=np.float32)))
    entries += _config_entries(model.config, conf_extras)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            _write_tensor(fh, name, arr)


def _read_exact(fh, n: int, what: str) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointError(f"unexpected end of file while reading {what}")
    return b


def read_checkpoint(path) -> dict[str, np.ndarray]:
    """Parse a checkpoint into a name -> f32 array mapping."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "format version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors = {}
        for i in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, f"tensor {i} name length"))
            name = _read_exact(fh, name_len, f"tensor {i} name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of tensor {name!r}"))
            dims = [struct.unpack("<Q", _read_exact(fh, 8, f"dims of tensor {name!r}"))[0]
                    for _ in range(rank)]
            size = int(np.prod(dims, dtype=np.int64)) if dims else 1
            raw = _read_exact(fh, 4 * size, f"data of tensor {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        return tensors


def load_into_model(model: ResUnetPPModel, tensors: dict[str, np.ndarray]) -> None:
    """Copy model/... tensors into the model; names must match exactly."""
    targets = {f"model/{name}": var.value for name, var in model.parameters()}
    targets.update({f"model/{name}": arr for name, arr in model.state_tensors()})
    have = {k for k in tensors if k.startswith("model/")}
    missing = sorted(set(targets) - have)
    extra = sorted(have - set(targets))
    if missing or extra:
        raise CheckpointError(
            f"checkpoint does not match the model architecture; "
            f"missing tensors: {missing}; unexpected tensors: {extra}")
    for name, dest in targets.items():
        data = tensors[name]
        if data.shape != dest.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {data.shape}, expected {dest.shape}")
        dest[...] = data.astype(dest.dtype)


def _config_from_tensors(tensors: dict[str, np.ndarray]) -> ResUnetPPConfig:
    required = ("conf/input_channels", "conf/base_channels", "conf/depth",
                "conf/input_size", "conf/aspp_dilations", "conf/seed")
    missing = [k for k in required if k not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint carries no model geometry: missing {missing}")
    size = tensors["conf/input_size"]
    return ResUnetPPConfig(
        input_channels=int(tensors["conf/input_channels"][0]),
        base_channels=int(tensors["conf/base_channels"][0]),
        depth=int(tensors["conf/depth"][0]),
        input_size=(int(size[0]), int(size[1])),
        aspp_dilations=tuple(int(d) for d in tensors["conf/aspp_dilations"]),
        seed=int(tensors["conf/seed"][0]),
    )


def checkpoint_load(path, config: ResUnetPPConfig | None = None):
    """Rebuild (model, OptimizerSnapshot | None) from a checkpoint file.

    Without "opt/" tensors the model loads alone (resume-for-inference).
    """
    tensors = read_checkpoint(path)
    if config is None:
        config = _config_from_tensors(tensors)
    model = build_model(config)
    load_into_model(model, tensors)
    snapshot = None
    opt_keys = [k for k in tensors if k.startswith("opt/")]
    if opt_keys:
        if "opt/t" not in tensors:
            raise CheckpointError("optimizer tensors present but opt/t is missing")
        m = {}
        v = {}
        for key in opt_keys:
            if key.endswith(".m"):
                m[key[len("opt/"):-2]] = tensors[key]
            elif key.endswith(".v"):
                v[key[len("opt/"):-2]] = tensors[key]
        epoch = int(tensors["opt/epoch"][0]) if "opt/epoch" in tensors else None
        snapshot = OptimizerSnapshot(t=int(tensors["opt/t"][0]), epoch=epoch, m=m, v=v)
    return model, snapshot


def restore_optimizer(optimizer: MomentOptimizer, snapshot: OptimizerSnapshot) -> None:
    names = {name for name, _ in optimizer.params}
    if set(snapshot.m) != names or set(snapshot.v) != names:
        raise CheckpointError("optimizer snapshot does not match the parameter set")
    optimizer.t = snapshot.t
    for name in names:
        optimizer.m[name][...] = snapshot.m[name].astype(optimizer.m[name].dtype)
        optimizer.v[name][...] = snapshot.v[name].astype(optimizer.v[name].dtype)


def conf_value(path, key: str):
    """Read one conf/ entry from a checkpoint, or None when absent."""
    tensors = read_checkpoint(path)
    full = f"conf/{key}"
    return tensors[full] if full in tensors else None


# --- training loop ----------------------------------------------------------

def _batches(samples, batch_size):
    for i in range(0, len(samples), batch_size):
        yield samples[i:i + batch_size]


def _validation_pass(model, samples, batch_size, loss_cfg: LossConfig):
    """Global-ratio val loss plus mean per-sample binarized IoU (eval mode)."""
    inter = 0.0
    total_p = 0.0
    total_t = 0.0
    ious = []
    for batch in _batches(samples, batch_size):
        x = np.stack([s.image for s in batch])
        t = np.stack([s.mask for s in batch])
        probs = model.forward(Tape(grad_enabled=False), x, mode="eval").value
        p64 = probs.astype(np.float64)
        inter += float((p64 * t).sum())
        total_p += float(p64.sum())
        total_t += float(t.sum())
        for k, s in enumerate(batch):
            pred_bin = binarize(probs[k], loss_cfg.binarize_threshold)
            ious.append(jaccard_index(pred_bin, s.mask))
    eps = loss_cfg.smooth_eps
    union = total_p + total_t - inter
    val_loss = 1.0 - (inter + eps) / (union + eps)
    return float(val_loss), float(np.mean(ious))


def _model_snapshot(model):
    params = {name: var.value.copy() for name, var in model.parameters()}
    state = {name: arr.copy() for name, arr in model.state_tensors()}
    return params, state


def _restore_snapshot(model, snapshot) -> None:
    params, state = snapshot
    for name, var in model.parameters():
        var.value[...] = params[name]
    for name, arr in model.state_tensors():
        arr[...] = state[name]


def train(model: ResUnetPPModel, split, cfg: TrainConfig, *,
          loss_cfg: LossConfig | None = None, schedule: LRSchedule | None = None,
          optimizer: MomentOptimizer | None = None, start_epoch: int = 0,
          log=None):
    """Run the training loop and return (model, TrainHistory).

    Per epoch: deterministic reshuffle keyed by (seed, epoch), one
    forward/backward/step per mini-batch in train mode, then a full
    validation pass in eval mode. The best-validation weights are
    checkpointed and restored into the returned model; training stops early
    after `early_stop_patience` epochs without a min_delta improvement.
    """
    if not split.train:
        raise ValidationError("training split is empty")
    if not split.val:
        raise ValidationError("validation split is empty")
    loss_cfg = loss_cfg or LossConfig()
    opt = optimizer or MomentOptimizer(model.parameters(), kind=cfg.optimizer,
                                       lr=cfg.initial_lr, eps=cfg.adam_eps)
    sched = schedule or LRSchedule(initial_lr=cfg.initial_lr,
                                   cycle_length_epochs=max(1, cfg.epochs // 10))

    history = TrainHistory()
    val_losses = []
    best_val = float("inf")
    best_state = None
    stall = 0
    plateau_mult = 1.0

    for epoch in range(start_epoch, cfg.epochs):
        tic = time.perf_counter()
        lr = max(sched.min_lr, schedule_lr(sched, epoch) * plateau_mult)
        opt.lr = lr

        order = shuffle_epoch(split.train, cfg.seed, epoch)
        loss_sum = 0.0
        seen = 0
        for bi, batch in enumerate(_batches(order, cfg.batch_size)):
            x = np.stack([s.image for s in batch])
            t = np.stack([s.mask for s in batch])
            tape = Tape()
            pred = model.forward(tape, x, mode="train")
            loss = jaccard_loss(pred, t, loss_cfg)
            value = float(loss.value)
            if not np.isfinite(value):
                raise NonFiniteLossError(
                    f"non-finite loss {value} at epoch {epoch}, batch {bi}")
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
            loss_sum += value * len(batch)
            seen += len(batch)
        train_loss = loss_sum / seen

        val_loss, val_iou = _validation_pass(model, split.val, cfg.batch_size, loss_cfg)
        seconds = time.perf_counter() - tic
        history.records.append(EpochRecord(epoch, train_loss, val_loss, val_iou,
                                           lr, seconds))
        val_losses.append(val_loss)
        if log:
            log(f"epoch {epoch:3d}  train_loss={train_loss:.6f}  "
                f"val_loss={val_loss:.6f}  val_iou={val_iou:.4f}  lr={lr:.2e}")

        if cfg.last_checkpoint_path:
            checkpoint_save(model, opt, cfg.last_checkpoint_path, epoch=epoch,
                            conf_extras=cfg.conf_extras)
        if best_val - val_loss >= cfg.min_delta:
            best_val = val_loss
            stall = 0
            best_state = _model_snapshot(model)
            if cfg.checkpoint_path:
                checkpoint_save(model, opt, cfg.checkpoint_path, epoch=epoch,
                                conf_extras=cfg.conf_extras)
        else:
            stall += 1

        plateau_mult *= reduce_on_plateau(sched, val_losses)
        if stall >= cfg.early_stop_patience:
            if log:
                log(f"early stop at epoch {epoch} "
                    f"(no val improvement for {stall} epochs)")
            break

    if best_state is not None:
        _restore_snapshot(model, best_state)
    return model, history


@dataclass
class EvalRow:
    id: str
    loss: float
    iou: float
    dice: float
    pixel_acc: float


@dataclass
class EvalReport:
    mean_loss: float
    mean_iou: float
    mean_dice: float
    mean_pixel_accuracy: float
    rows: list[EvalRow]

    def to_csv(self, path) -> None:
        lines = ["id,loss,iou,dice,pixel_accuracy"]
        for r in self.rows:
            lines.append(f"{r.id},{repr(r.loss)},{repr(r.iou)},"
                         f"{repr(r.dice)},{repr(r.pixel_acc)}")
        Path(path).write_text("\n".join(lines) + "\n")


def evaluate(model: ResUnetPPModel, samples, loss_cfg: LossConfig | None = None) -> EvalReport:
    """Per-sample eval-mode metrics; aggregates are arithmetic means."""
    if not samples:
        raise ValidationError("no samples to evaluate")
    loss_cfg = loss_cfg or LossConfig()
    rows = []
    for s in samples:
        probs = model.forward(Tape(grad_enabled=False), s.image[None], mode="eval").value[0]
        loss = 1.0 - soft_jaccard_index(probs.astype(np.float64), s.mask,
                                        loss_cfg.smooth_eps)
        pred_bin = binarize(probs, loss_cfg.binarize_threshold)
        rows.append(EvalRow(
            id=s.id,
            loss=float(loss),
            iou=jaccard_index(pred_bin, s.mask),
            dice=dice_coefficient(pred_bin, s.mask),
            pixel_acc=pixel_accuracy(pred_bin, s.mask),
        ))
    return EvalReport(
        mean_loss=float(np.mean([r.loss for r in rows])),
        mean_iou=float(np.mean([r.iou for r in rows])),
        mean_dice=float(np.mean([r.dice for r in rows])),
        mean_pixel_accuracy=float(np.mean([r.pixel_acc for r in rows])),
        rows=rows,
    )
