"""Training engine: losses, Adam, the seeded train loop, evaluation
over metric records, and the binary checkpoint container.

Determinism contract: a TrainConfig fully determines a run. Shuffling,
drop-connect masks and augmentation all derive their streams from
cfg.seed plus loop indices, so repeating a run reproduces the history
bit for bit, and resuming from a checkpoint reproduces inference
exactly (parameters and running statistics round-trip untouched).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .augment import AugmentConfig, pipeline
from .data import CineSample
from .metrics import (
    MetricsReport,
    SliceRecord,
    aggregate,
    apd,
    dice,
    extract_contour,
    sensitivity,
)
from .model import ModelState, UNetSpec, build, forward
from .tensor import Tape, Tensor, backward, record, reduce_sum, sigmoid

__all__ = [
    "TrainConfig",
    "TrainingDivergedError",
    "CheckpointError",
    "soft_dice_loss",
    "bce_loss",
    "make_loss",
    "AdamState",
    "adam_step",
    "sgd_step",
    "train",
    "evaluate",
    "predict_masks",
    "save_checkpoint",
    "load_checkpoint",
    "history_to_csv",
]

OPTIMIZERS = ("adam", "sgd")
LOSSES = ("soft_dice", "bce", "sum")


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 16
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    loss: str = "soft_dice"
    seed: int = 0
    augment: bool = False
    variant: str = "gbu"
    activation: str = "elu"
    split_ratio: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")


# ---------------------------------------------------------------------------
# Losses


def _as_target(truth, like: Tensor) -> Tensor:
    t = truth if isinstance(truth, Tensor) else Tensor(np.asarray(truth, dtype=np.float64))
    if t.shape != like.shape:
        raise ValueError(f"target shape {t.shape} != logits shape {like.shape}")
    return t


def soft_dice_loss(logits: Tensor, truth) -> Tensor:
    """1 - (2*sum(p*t) + 1) / (sum(p) + sum(t) + 1) with p = sigmoid(z),
    computed per sample and averaged over the batch. The +1 smoothing
    keeps empty-truth samples finite and drives their loss toward zero
    as predictions empty out."""
    t = _as_target(truth, logits)
    p = sigmoid(logits)
    inter = reduce_sum(p * t, "layer")
    num = inter * 2.0 + 1.0
    den = reduce_sum(p, "layer") + reduce_sum(t, "layer") + 1.0
    per_sample = 1.0 - num / den
    return reduce_sum(per_sample, "all") * (1.0 / logits.shape[0])


def bce_loss(logits: Tensor, truth) -> Tensor:
    """Mean binary cross-entropy on logits, in the overflow-safe form
    max(z,0) - z*t + log(1 + exp(-|z|)). Gradient is (sigmoid(z) - t)
    divided by the element count."""
    t = _as_target(truth, logits)
    z = logits.data
    td = t.data
    val = float(np.mean(np.maximum(z, 0.0) - z * td + np.log1p(np.exp(-np.abs(z)))))
    out = Tensor(np.full((1, 1, 1, 1), val))

    def bwd(g):
        sig = np.empty_like(z)
        pos = z >= 0
        sig[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        sig[~pos] = ez / (1.0 + ez)
        return (float(g.reshape(())) * (sig - td) / z.size,)

    return record(out, (logits,), bwd)


def make_loss(name: str):
    if name == "soft_dice":
        return soft_dice_loss
    if name == "bce":
        return bce_loss
    if name == "sum":
        return lambda z, t: soft_dice_loss(z, t) + bce_loss(z, t)
    raise ValueError(f"unknown loss {name!r}")


# ---------------------------------------------------------------------------
# Optimizers


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update in place. Parameters whose grad
    is None are treated as having zero gradient and stay put."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def sgd_step(params: dict[str, Tensor], lr: float):
    for p in params.values():
        if p.grad is not None:
            p.data -= lr * p.grad


# ---------------------------------------------------------------------------
# Batching helpers


def _stack_batch(samples: list[CineSample]) -> tuple[np.ndarray, np.ndarray]:
    shapes = {s.image.shape for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"batch mixes image sizes: {sorted(shapes)}")
    x = np.stack([s.image for s in samples])[:, None, :, :]
    t = np.stack([s.mask for s in samples]).astype(np.float64)[:, None, :, :]
    return x, t


def _mix(seed: int, a: int, b: int) -> int:
    return (seed * 0x9E3779B97F4A7C15 + a * 0xBF58476D1CE4E5B9 + b * 0x94D049BB133111EB + 1) % (2 ** 63)


# ---------------------------------------------------------------------------
# Train / evaluate


def train(model: ModelState, spec: UNetSpec, train_samples: list[CineSample],
          val_samples: list[CineSample], cfg: TrainConfig,
          log=None) -> tuple[ModelState, list[tuple[int, float, float]]]:
    """Seeded mini-batch training with best-validation restore.

    Per epoch: seeded shuffle, fixed-size batches (last one short),
    optional per-sample augmentation (fresh draws each epoch, streams
    keyed by cfg.seed and the sample's dataset index), forward in train
    mode, backward, one optimizer step. After each epoch the validation
    dice is recorded and the best parameter snapshot is kept; training
    returns with that snapshot restored. epochs=0 returns the model as
    built, history empty. A non-finite loss aborts with epoch/batch in
    the error.
    """
    if not train_samples:
        raise ValueError("train: no training samples")
    if not val_samples:
        raise ValueError("train: no validation samples")
    shuffle_rng = np.random.default_rng(cfg.seed)
    aug_cfg = AugmentConfig(seed=cfg.seed) if cfg.augment else None
    loss_fn = make_loss(cfg.loss)
    adam = AdamState()
    history: list[tuple[int, float, float]] = []
    best_dice = -1.0
    best_snap = None
    n = len(train_samples)
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        losses = []
        for bi in range(0, n, cfg.batch_size):
            idx = order[bi:bi + cfg.batch_size]
            batch = [train_samples[int(i)] for i in idx]
            if aug_cfg is not None:
                batch = [
                    pipeline(s, aug_cfg, epoch * n + int(i))
                    for s, i in zip(batch, idx)
                ]
            x, t = _stack_batch(batch)
            with Tape() as tape:
                logits = forward(
                    model, spec, Tensor(x), "train",
                    dropconnect_seed=_mix(cfg.seed, epoch, bi),
                )
                loss = loss_fn(logits, t)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {bi // cfg.batch_size}"
                )
            for p in model.params.values():
                p.grad = None
            backward(tape, loss)
            if cfg.optimizer == "adam":
                adam_step(model.params, adam, cfg.learning_rate)
            else:
                sgd_step(model.params, cfg.learning_rate)
            losses.append(value)
        val_report = evaluate(model, spec, val_samples)
        epoch_loss = float(np.mean(losses))
        history.append((epoch, epoch_loss, val_report.dice_mean))
        if log is not None:
            log(f"epoch {epoch}: train_loss={epoch_loss:.4f} "
                f"val_dice={val_report.dice_mean:.4f}")
        if val_report.dice_mean > best_dice:
            best_dice = val_report.dice_mean
            best_snap = model.export_arrays()
    if best_snap is not None:
        model.import_arrays(best_snap)
    return model, history


def predict_masks(model: ModelState, spec: UNetSpec, samples: list[CineSample],
                  batch_size: int = 8) -> np.ndarray:
    """Inference-mode probability maps thresholded at 0.5, strictly:
    a logit of exactly 0 (p = 0.5) is background. Returns (n, H, W)."""
    masks = []
    for i in range(0, len(samples), batch_size):
        x, _ = _stack_batch(samples[i:i + batch_size])
        logits = forward(model, spec, Tensor(x), "infer")
        masks.append((logits.data[:, 0] > 0.0).astype(np.uint8))
    return np.concatenate(masks)


def evaluate(model: ModelState, spec: UNetSpec, samples: list[CineSample],
             apd_symmetric: bool = False, batch_size: int = 8) -> MetricsReport:
    """Run inference and collect one SliceRecord per sample.

    Sensitivity is undefined (None) for empty-truth slices; APD is
    undefined when either side has no contour, and such slices are
    flagged rather than scored. The manual contour file is preferred as
    the APD reference when the sample carries one; otherwise the truth
    mask's traced boundary stands in. Never mutates the model.
    """
    if not samples:
        raise ValueError("evaluate: no samples")
    preds = predict_masks(model, spec, samples, batch_size)
    records = []
    for s, pred in zip(samples, preds):
        truth = s.mask
        d = dice(pred, truth)
        sens = sensitivity(pred, truth) if truth.any() else None
        empty_pred = not pred.any()
        apd_mm = None
        if not empty_pred and truth.any():
            auto = extract_contour(pred)
            manual = s.truth_contour if s.truth_contour is not None else extract_contour(truth)
            apd_mm = apd(auto, manual, s.spacing_mm, symmetric=apd_symmetric)
        records.append(
            SliceRecord(
                case_id=s.case_id, slice_id=s.slice_id, dice=d,
                sensitivity=sens, apd_mm=apd_mm, empty_prediction=empty_pred,
            )
        )
    return aggregate(records)


def history_to_csv(history: list[tuple[int, float, float]]) -> str:
    lines = ["epoch,train_loss,val_dice"]
    for epoch, loss, vd in history:
        lines.append(f"{epoch},{loss!r},{vd!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Checkpoints: magic | version | manifest length | JSON manifest | blob.
# The blob holds every parameter then every running statistic as raw
# little-endian float64 in manifest order, so a round trip is bit-exact.

_MAGIC = b"LVSEGCKP"
_VERSION = 1


def save_checkpoint(path, model: ModelState, spec: UNetSpec,
                    cfg: TrainConfig | None = None, epoch: int = 0,
                    history: list | None = None):
    params = [[name, list(t.shape)] for name, t in model.params.items()]
    running = []
    chunks = []
    for name, t in model.params.items():
        chunks.append(t.data.astype("<f8").tobytes())
    for name, st in model.named_running():
        shape = [1, st.gamma.shape[1], 1, 1]
        initialized = st.running_mean is not None
        running.append([name, shape, initialized])
        if initialized:
            chunks.append(st.running_mean.astype("<f8").tobytes())
            chunks.append(st.running_var.astype("<f8").tobytes())
        else:
            zeros = np.zeros(shape).tobytes()
            chunks.append(zeros)
            chunks.append(zeros)
    manifest = {
        "unet_spec": asdict(spec),
        "train_config": None if cfg is None else asdict(cfg),
        "epoch": epoch,
        "history": [list(h) for h in (history or [])],
        "params": params,
        "running": running,
    }
    mbytes = json.dumps(manifest).encode("utf-8")
    blob = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<Q", len(mbytes)))
        fh.write(mbytes)
        fh.write(blob)


def load_checkpoint(path) -> tuple[ModelState, UNetSpec, dict]:
    """Rebuild the model a checkpoint describes. Refuses anything that
    does not match: wrong magic, unknown version, manifest or blob
    length mismatch, or a parameter table that disagrees with the
    architecture the manifest's own spec builds."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(_MAGIC) + 12 or data[:len(_MAGIC)] != _MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    pos = len(_MAGIC)
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if pos + mlen > len(data):
        raise CheckpointError("manifest length exceeds file size")
    try:
        manifest = json.loads(data[pos:pos + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"manifest is not valid JSON: {e}") from e
    pos += mlen
    try:
        spec = UNetSpec(**manifest["unet_spec"])
        param_table = manifest["params"]
        running_table = manifest["running"]
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"manifest is missing or malforms a field: {e}") from e
    model = build(spec, seed=0)
    names = list(model.params)
    if [p[0] for p in param_table] != names:
        raise CheckpointError("manifest parameter names do not match the architecture")
    expected = sum(int(np.prod(p[1])) for p in param_table)
    expected += 2 * sum(int(np.prod(r[1])) for r in running_table)
    if len(data) - pos != expected * 8:
        raise CheckpointError(
            f"blob holds {len(data) - pos} bytes, manifest promises {expected * 8}"
        )
    for name, shape in param_table:
        t = model.params[name]
        shape = tuple(shape)
        if t.shape != shape:
            raise CheckpointError(
                f"parameter {name}: manifest shape {shape} != model shape {t.shape}"
            )
        size = int(np.prod(shape))
        t.data = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += size * 8
    running_states = dict(model.named_running())
    if [r[0] for r in running_table] != list(running_states):
        raise CheckpointError("manifest running-stat names do not match the architecture")
    for name, shape, initialized in running_table:
        st = running_states[name]
        shape = tuple(shape)
        size = int(np.prod(shape))
        rm = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += size * 8
        rv = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += size * 8
        st.running_mean = rm if initialized else None
        st.running_var = rv if initialized else None
    return model, spec, manifest
