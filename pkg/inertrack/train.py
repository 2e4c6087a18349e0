"""Training loop: segment batches, Adam, plateau scheduling, checkpoints and validation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, TextIO, Tuple

import numpy as np
import pandas as pd
from numpy.typing import NDArray
from tqdm import tqdm

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import CheckpointError
from .loss import LOSS_NAMES, LossState, compute_losses, total_loss
from .preprocess import DataConfig, NormalizationStats, SegmentSample, augment_rotation, stack_segments
from .tensor import Tape, Tensor
from .tfbrt import TFBRT, ModelConfig
from .validators import validate_non_negative, validate_positive, validate_positive_int, validate_range

logger = logging.getLogger(__name__)

HEADING_BINS = 10
BIN_WIDTH_DEG = 360.0 / HEADING_BINS


@dataclass
class TrainConfig:
    batch_size: int = 72
    lr: float = 3e-4
    plateau_factor: float = 0.75
    plateau_patience: int = 10
    max_epochs: int = 100
    seed: int = 0
    augment: bool = True
    loss_eps: float = 0.05
    loss_warmup: int = 50
    grad_clip: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    losses: Tuple[str, ...] = LOSS_NAMES
    checkpoint_dir: Optional[str] = None
    progress: bool = False
    max_steps: Optional[int] = None

    def __post_init__(self) -> None:
        validate_positive_int(self.batch_size, "batch_size")
        validate_positive(self.lr, "lr")
        validate_range(self.plateau_factor, "plateau_factor", 0.0, 1.0)
        validate_positive_int(self.plateau_patience, "plateau_patience")
        validate_positive_int(self.max_epochs, "max_epochs")
        validate_non_negative(self.seed, "seed")
        validate_positive(self.loss_eps, "loss_eps")
        validate_non_negative(self.loss_warmup, "loss_warmup")
        validate_positive(self.grad_clip, "grad_clip")
        validate_range(self.beta1, "beta1", 0.0, 1.0)
        validate_range(self.beta2, "beta2", 0.0, 1.0)
        validate_positive(self.adam_eps, "adam_eps")
        self.losses = tuple(self.losses)
        if not self.losses:
            raise ValueError("losses cannot be empty")
        unknown = [name for name in self.losses if name not in LOSS_NAMES]
        if unknown:
            raise ValueError(f"unknown losses {unknown}; choose from {list(LOSS_NAMES)}")
        if self.max_steps is not None:
            validate_positive_int(self.max_steps, "max_steps")

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["losses"] = list(self.losses)
        return payload

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "TrainConfig":
        known = {item.name for item in fields(cls)}
        values = {key: value for key, value in payload.items() if key in known}
        if "losses" in values:
            values["losses"] = tuple(values["losses"])
        return cls(**values)


# ----------------------------------------------------------------------
# Optimizer
# ----------------------------------------------------------------------
@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, NDArray[np.float64]] = field(default_factory=dict)
    v: Dict[str, NDArray[np.float64]] = field(default_factory=dict)


def grads_are_finite(grads: Mapping[str, NDArray[np.float64]]) -> bool:
    return all(np.all(np.isfinite(grad)) for grad in grads.values())


def clip_gradients(
    grads: Mapping[str, NDArray[np.float64]], max_norm: float
) -> Tuple[Dict[str, NDArray[np.float64]], float]:
    """Scale every gradient so the global L2 norm is at most ``max_norm``."""

    norm = math.sqrt(sum(float(np.sum(grad * grad)) for grad in grads.values()))
    if norm <= max_norm or not math.isfinite(norm):
        return dict(grads), norm
    scale = max_norm / norm
    return {name: grad * scale for name, grad in grads.items()}, norm


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, NDArray[np.float64]],
    lr: float,
    state: AdamState,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> bool:
    """Bias-corrected Adam update in place. Returns ``False`` when the step was skipped."""

    if not grads_are_finite(grads):
        logger.warning("skipping optimizer step %d: non-finite gradient", state.step + 1)
        return False
    state.step += 1
    t = state.step
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise ValueError(f"gradient for {name} has shape {grad.shape}, expected {param.shape}")
        m = beta1 * state.m.get(name, np.zeros_like(param.data)) + (1.0 - beta1) * grad
        v = beta2 * state.v.get(name, np.zeros_like(param.data)) + (1.0 - beta2) * grad * grad
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return True


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without a new best."""

    lr: float
    factor: float = 0.75
    patience: int = 10
    best: float = math.inf
    num_bad_epochs: int = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.num_bad_epochs = 0
            return self.lr
        self.num_bad_epochs += 1
        if self.num_bad_epochs >= self.patience:
            self.lr *= self.factor
            self.num_bad_epochs = 0
            logger.info("validation loss plateaued at %.6f; learning rate reduced to %.6g", self.best, self.lr)
        return self.lr

    def to_dict(self) -> Dict[str, Any]:
        # json has no infinity
        best = None if math.isinf(self.best) else self.best
        return {"lr": self.lr, "factor": self.factor, "patience": self.patience,
                "best": best, "num_bad_epochs": self.num_bad_epochs}

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "PlateauScheduler":
        best = payload["best"]
        return cls(
            lr=float(payload["lr"]),
            factor=float(payload["factor"]),
            patience=int(payload["patience"]),
            best=math.inf if best is None else float(best),
            num_bad_epochs=int(payload["num_bad_epochs"]),
        )


# ----------------------------------------------------------------------
# Training log
# ----------------------------------------------------------------------
@dataclass
class StepLog:
    kind: str  # "step" or "epoch"
    step: int
    epoch: int
    lr: float
    losses: Dict[str, float]
    weights: Dict[str, float]
    total: float
    val_total: Optional[float] = None
    skipped: bool = False


class TrainingLog:
    """In-memory history of step and epoch records, mirrored to a JSON-lines file."""

    def __init__(self, path: Optional[str | Path] = None) -> None:
        self.path = Path(path) if path is not None else None
        self.history: List[StepLog] = []
        self._handle: Optional[TextIO] = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._handle = self.path.open("a", encoding="utf-8")

    def write(self, record: StepLog) -> None:
        self.history.append(record)
        if self._handle is not None:
            self._handle.write(json.dumps(asdict(record), sort_keys=True) + "\n")
            self._handle.flush()

    def steps(self) -> List[StepLog]:
        return [record for record in self.history if record.kind == "step"]

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None


# ----------------------------------------------------------------------
# Trainer
# ----------------------------------------------------------------------
def _batches(items: Sequence[SegmentSample], size: int) -> Iterator[List[SegmentSample]]:
    for start in range(0, len(items), size):
        yield list(items[start:start + size])


class Trainer:
    """Single-writer training loop for a :class:`TFBRT` model."""

    def __init__(
        self,
        model: TFBRT,
        config: Optional[TrainConfig] = None,
        data_config: Optional[DataConfig] = None,
        log: Optional[TrainingLog] = None,
    ) -> None:
        self.model = model
        self.config = config or TrainConfig()
        self.data_config = data_config or DataConfig(
            window_length=model.config.window_length, mag_feature=model.config.mag_feature
        )
        if self.data_config.window_length != model.config.window_length:
            raise ValueError(
                f"data window_length {self.data_config.window_length} does not match "
                f"model window_length {model.config.window_length}"
            )
        self.log = log or TrainingLog()
        self.rng = np.random.default_rng(self.config.seed)
        self.adam = AdamState()
        self.scheduler = PlateauScheduler(self.config.lr, self.config.plateau_factor, self.config.plateau_patience)
        self.loss_state = LossState(names=self.config.losses, warmup=self.config.loss_warmup)
        self.step = 0
        self.epoch = 0
        self.best_val = math.inf

    # ------------------------------------------------------------------
    # Steps
    # ------------------------------------------------------------------
    def _losses(self, velocity: Tensor, gt_vel: NDArray[np.float64], fs: float) -> Dict[str, Tensor]:
        return compute_losses(velocity, gt_vel, 1.0 / fs, self.config.losses, self.config.loss_eps)

    def gradients(
        self, segments: Sequence[SegmentSample], update_stats: bool = False
    ) -> Tuple[Dict[str, NDArray[np.float64]], Dict[str, float], float]:
        """Loss gradients for one batch: ``(grads, raw losses, weighted total)``.

        The running loss statistics are updated with the raw values only when
        ``update_stats`` is set; the optimizer is never touched.
        """

        features, gt_vel = stack_segments(segments)
        self.model.zero_grad()
        with Tape() as tape:
            result = self.model.forward(features, train=True, dropout_key=(self.config.seed, self.step))
            losses = self._losses(result.velocity, gt_vel, segments[0].fs)
            raw = {name: value.item() for name, value in losses.items()}
            if update_stats:
                self.loss_state.update(raw)
            total = total_loss(losses, self.loss_state)
            tape.backward(total)
        grads = {
            name: np.zeros_like(param.data) if param.grad is None else param.grad
            for name, param in self.model.parameters().items()
        }
        self.model.zero_grad()
        return grads, raw, total.item()

    def train_step(self, segments: Sequence[SegmentSample]) -> StepLog:
        if not segments:
            raise ValueError("a training batch needs at least one segment")
        if self.config.augment:
            segments = [augment_rotation(segment, self.rng.uniform(-np.pi, np.pi)) for segment in segments]

        grads, raw, total = self.gradients(segments, update_stats=True)
        weights = self.loss_state.weights()
        grads, _ = clip_gradients(grads, self.config.grad_clip)
        applied = adam_step(
            self.model.parameters(), grads, self.scheduler.lr, self.adam,
            self.config.beta1, self.config.beta2, self.config.adam_eps,
        )
        self.step += 1
        record = StepLog(
            kind="step",
            step=self.step,
            epoch=self.epoch,
            lr=self.scheduler.lr,
            losses=raw,
            weights={name: weights[name] for name in raw},
            total=total,
            skipped=not applied,
        )
        self.log.write(record)
        return record

    def _exhausted(self) -> bool:
        return self.config.max_steps is not None and self.step >= self.config.max_steps

    def train_epoch(self, segments: Sequence[SegmentSample]) -> Dict[str, float]:
        """One shuffled pass over ``segments``; returns the mean raw losses and total."""

        if not segments:
            raise ValueError("the training split produced no segments")
        order = self.rng.permutation(len(segments))
        shuffled = [segments[i] for i in order]
        records = []
        for batch in _batches(shuffled, self.config.batch_size):
            if self._exhausted():
                break
            records.append(self.train_step(batch))
        if not records:
            return {}
        stats = {name: float(np.mean([r.losses[name] for r in records if name in r.losses]))
                 for name in self.config.losses if any(name in r.losses for r in records)}
        stats["total"] = float(np.mean([r.total for r in records]))
        return stats

    def validate(self, segments: Sequence[SegmentSample]) -> float:
        """Weighted total loss over ``segments`` with frozen weights and frozen loss statistics."""

        if not segments:
            raise ValueError("the validation split produced no segments")
        totals, counts = [], []
        for batch in _batches(list(segments), self.config.batch_size):
            features, gt_vel = stack_segments(batch)
            result = self.model.forward(features)
            losses = self._losses(result.velocity, gt_vel, batch[0].fs)
            totals.append(total_loss(losses, self.loss_state).item())
            counts.append(len(batch))
        return float(np.average(totals, weights=counts))

    def fit(
        self,
        train_segments: Sequence[SegmentSample],
        val_segments: Sequence[SegmentSample],
        epochs: Optional[int] = None,
    ) -> List[StepLog]:
        """Train until ``epochs`` (default ``max_epochs``) or ``max_steps``; returns the epoch records.

        With a ``checkpoint_dir`` the latest state goes to ``last.ckpt`` after every
        epoch and the best validation state to ``best.ckpt``.
        """

        final_epoch = self.config.max_epochs if epochs is None else self.epoch + epochs
        checkpoint_dir = Path(self.config.checkpoint_dir) if self.config.checkpoint_dir else None
        epoch_records = []
        progress = tqdm(
            range(self.epoch, final_epoch), desc="epochs", disable=not self.config.progress
        )
        for _ in progress:
            if self._exhausted():
                break
            stats = self.train_epoch(train_segments)
            val_total = self.validate(val_segments)
            self.epoch += 1
            lr = self.scheduler.step(val_total)
            record = StepLog(
                kind="epoch",
                step=self.step,
                epoch=self.epoch,
                lr=lr,
                losses={k: v for k, v in stats.items() if k != "total"},
                weights=self.loss_state.weights(),
                total=stats.get("total", float("nan")),
                val_total=val_total,
            )
            self.log.write(record)
            epoch_records.append(record)
            if self.config.progress:
                progress.set_postfix(train=record.total, val=val_total, lr=lr)
            logger.info("epoch %d: train %.5f, validation %.5f, lr %.3g", self.epoch, record.total, val_total, lr)

            improved = val_total < self.best_val
            if improved:
                self.best_val = val_total
            if checkpoint_dir is not None:
                save_checkpoint(self.to_checkpoint(), checkpoint_dir / "last.ckpt")
                if improved:
                    save_checkpoint(self.to_checkpoint(), checkpoint_dir / "best.ckpt")
        return epoch_records

    # ------------------------------------------------------------------
    # Persistence
    # ------------------------------------------------------------------
    def to_checkpoint(self) -> Checkpoint:
        return build_checkpoint(self.model, trainer=self)

    @classmethod
    def from_checkpoint(
        cls,
        checkpoint: Checkpoint | str | Path,
        config: Optional[TrainConfig] = None,
        data_config: Optional[DataConfig] = None,
        log: Optional[TrainingLog] = None,
        expected: Optional[ModelConfig] = None,
    ) -> "Trainer":
        """Resume training with optimizer moments, scheduler, loss statistics and RNG restored."""

        if not isinstance(checkpoint, Checkpoint):
            checkpoint = load_checkpoint(checkpoint)
        model = model_from_checkpoint(checkpoint, expected=expected)
        meta = checkpoint.metadata
        if "trainer" not in meta:
            raise CheckpointError("checkpoint holds no training state")
        state = meta["trainer"]
        config = config or TrainConfig.from_dict(state["config"])
        trainer = cls(model, config, data_config, log)
        trainer.step = int(state["step"])
        trainer.epoch = int(state["epoch"])
        best = state["best_val"]
        trainer.best_val = math.inf if best is None else float(best)
        trainer.scheduler = PlateauScheduler.from_dict(state["scheduler"])
        trainer.loss_state = LossState.from_dict(state["loss_state"])
        trainer.rng.bit_generator.state = state["rng"]
        trainer.adam = AdamState(
            step=int(state["adam_step"]),
            m={name[len("adam.m/"):]: array for name, array in checkpoint.arrays.items() if name.startswith("adam.m/")},
            v={name[len("adam.v/"):]: array for name, array in checkpoint.arrays.items() if name.startswith("adam.v/")},
        )
        return trainer


def build_checkpoint(model: TFBRT, trainer: Optional[Trainer] = None) -> Checkpoint:
    arrays = {f"param/{name}": array for name, array in model.state_arrays().items()}
    arrays["norm/mean"] = model.stats.mean
    arrays["norm/std"] = model.stats.std
    metadata: Dict[str, Any] = {
        "model": model.config.to_dict(),
        "vel_scale": model.stats.vel_scale,
    }
    if trainer is not None:
        for name, moment in trainer.adam.m.items():
            arrays[f"adam.m/{name}"] = moment
        for name, moment in trainer.adam.v.items():
            arrays[f"adam.v/{name}"] = moment
        metadata["trainer"] = {
            "config": trainer.config.to_dict(),
            "step": trainer.step,
            "epoch": trainer.epoch,
            "best_val": None if math.isinf(trainer.best_val) else trainer.best_val,
            "adam_step": trainer.adam.step,
            "scheduler": trainer.scheduler.to_dict(),
            "loss_state": trainer.loss_state.to_dict(),
            "rng": trainer.rng.bit_generator.state,
        }
    return Checkpoint(arrays=arrays, metadata=metadata)


def model_from_checkpoint(checkpoint: Checkpoint | str | Path, expected: Optional[ModelConfig] = None) -> TFBRT:
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    meta = checkpoint.metadata
    try:
        config = ModelConfig.from_dict(meta["model"])
        stats = NormalizationStats(
            mean=checkpoint.arrays["norm/mean"],
            std=checkpoint.arrays["norm/std"],
            vel_scale=float(meta["vel_scale"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint metadata is incomplete: {exc}") from exc
    params = {name[len("param/"):]: array for name, array in checkpoint.arrays.items() if name.startswith("param/")}
    return TFBRT.from_arrays(config, params, stats, expected=expected)


# ----------------------------------------------------------------------
# Hidden-feature export
# ----------------------------------------------------------------------
def heading_bin(gt_vel: NDArray[np.float64]) -> int:
    """Bin (0..9, 36 degrees each) of the mean ground-truth heading of a window."""

    mean = np.asarray(gt_vel, dtype=np.float64).mean(axis=0)
    degrees = math.degrees(math.atan2(mean[1], mean[0])) % 360.0
    return min(int(degrees // BIN_WIDTH_DEG), HEADING_BINS - 1)


def export_hidden_features(
    model: TFBRT,
    segments: Sequence[SegmentSample],
    path: Optional[str | Path] = None,
) -> pd.DataFrame:
    """One row per window: mean-pooled feedforward output (before the output projection) and heading bin."""

    rows = []
    for segment, hidden in zip(segments, model.hidden_features(segments)):
        for window, vectors in zip(segment.windows, hidden):
            if window.gt_vel is None:
                raise ValueError(f"window {window.index} of {window.sequence_id} has no ground-truth velocity")
            row: Dict[str, Any] = {
                "sequence_id": window.sequence_id,
                "offset": window.offset,
                "heading_bin": heading_bin(window.gt_vel),
            }
            row.update({f"h{i}": value for i, value in enumerate(vectors.mean(axis=0))})
            rows.append(row)
    columns = ["sequence_id", "offset", "heading_bin"] + [f"h{i}" for i in range(model.config.d_hidden)]
    table = pd.DataFrame(rows, columns=columns)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(path, index=False, lineterminator="\n")
        logger.info("exported %d hidden vectors to %s", len(table), path)
    return table
