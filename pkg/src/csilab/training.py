"""ADAM training of the autoencoders on normalized delay-domain data,
plus evaluation producing NMSE / cosine-similarity summary rows.

The loss is the per-batch mean of each sample's summed squared reconstruction
error in the normalized domain. Metrics are computed in the physical domain:
NMSE on the denormalized truncated delay matrix, cosine similarity per
subcarrier in the frequency domain.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from csilab.channel import NormalizationInfo, denormalize, nmse, rho
from csilab.models import ModelGraph
from csilab.tensor import ShapeError


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 200
    epochs: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    val_every: int = 1  # epochs between validation passes
    record_timing: bool = False  # wall_seconds column is zeroed unless set

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.val_every < 1:
            raise ValueError("batch size, epochs, and cadence must be >= 1")


class AdamState:
    """First/second moment accumulators per trainable parameter."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0


def adam_step(store, grads: dict[str, np.ndarray], state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected ADAM update of every trainable parameter with a gradient."""
    state.t += 1
    bc1 = 1.0 - config.beta1 ** state.t
    bc2 = 1.0 - config.beta2 ** state.t
    for name in sorted(grads):
        if not store.is_trainable(name):
            continue
        g = np.asarray(grads[name], dtype=np.float64)
        theta = store[name]
        if g.shape != theta.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter {name!r} shape {theta.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        step = config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.epsilon)
        store[name] = (theta.astype(np.float64) - step).astype(store.dtype)


def mse_loss(prediction: np.ndarray, target: np.ndarray) -> float:
    """Mean over samples of the summed squared error."""
    prediction = np.asarray(prediction)
    target = np.asarray(target)
    if prediction.shape != target.shape:
        raise ShapeError(f"shape mismatch: {prediction.shape} vs {target.shape}")
    d = prediction.astype(np.float64) - target.astype(np.float64)
    return float(np.sum(d * d) / prediction.shape[0])


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_nmse_db: float
    val_rho: float
    wall_seconds: float


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    best_val_nmse_db: float = float("inf")
    best_epoch: int = -1
    best_weights: dict | None = None
    final_weights: dict | None = None

    def history_csv(self) -> str:
        lines = ["epoch,train_loss,val_nmse_db,val_rho,wall_seconds"]
        for r in self.history:
            lines.append(
                f"{r.epoch},{r.train_loss:.8e},{r.val_nmse_db:.6f},{r.val_rho:.8f},{r.wall_seconds:.3f}"
            )
        return "\n".join(lines) + "\n"


def _batched_reconstruct(model: ModelGraph, x: np.ndarray, batch: int) -> np.ndarray:
    out = np.empty_like(x)
    for lo in range(0, x.shape[0], batch):
        out[lo : lo + batch] = model.reconstruct(x[lo : lo + batch])
    return out


@dataclass
class EvalResult:
    nmse_db: float
    rho: float
    per_sample_nmse_db: np.ndarray

    def table_row(self, label: str, cr_den: int) -> str:
        return f"1/{cr_den:<4d} {label:<16s} {self.nmse_db:>9.2f} {self.rho:>8.4f}"


EVAL_HEADER = f"{'CR':<6s} {'method':<16s} {'NMSE dB':>9s} {'rho':>8s}"


def evaluate(model: ModelGraph, x: np.ndarray, info: NormalizationInfo, batch: int = 200) -> EvalResult:
    """Inference-mode reconstruction metrics in the physical channel domain."""
    x = np.asarray(x, dtype=model.store.dtype)
    x_hat = _batched_reconstruct(model, x, batch)
    h = denormalize(x, info)
    h_hat = denormalize(x_hat, info)
    axes = tuple(range(1, h.ndim))
    num = np.sum(np.abs(h - h_hat) ** 2, axis=axes)
    den = np.sum(np.abs(h) ** 2, axis=axes)
    with np.errstate(divide="ignore"):
        per_sample = 10.0 * np.log10(num / den)
    try:
        rho_val = rho(h, h_hat)
    except ValueError:
        rho_val = 0.0  # an all-zero reconstruction gives no beamforming direction
    return EvalResult(nmse_db=nmse(h, h_hat), rho=rho_val, per_sample_nmse_db=per_sample)


def train(
    model: ModelGraph,
    train_x: np.ndarray,
    val_x: np.ndarray,
    info: NormalizationInfo,
    config: TrainConfig,
    log=None,
) -> TrainResult:
    """Shuffled mini-batch ADAM training with per-epoch validation NMSE.

    Deterministic for a fixed seed: data order, initialization, and update
    order are all fixed. Keeps the best-validation weights alongside the
    final ones.
    """
    train_x = np.ascontiguousarray(train_x, dtype=model.store.dtype)
    val_x = np.ascontiguousarray(val_x, dtype=model.store.dtype)
    if train_x.shape[0] < 1 or val_x.shape[0] < 1:
        raise ValueError("empty dataset")
    model._check_input(train_x)
    model._check_input(val_x)

    rng = np.random.default_rng(config.seed)
    state = AdamState()
    result = TrainResult()
    tape = model.trainer
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(train_x.shape[0])
        loss_sum = 0.0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            xb = np.ascontiguousarray(train_x[idx])
            loss = float(tape.forward({"x": xb, "target": xb}, mode="train").reshape(()))
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss {loss} at epoch {epoch}, batch {lo // config.batch_size}"
                )
            grads, _ = tape.backward()
            adam_step(model.store, grads, state, config)
            loss_sum += loss * len(idx)
        train_loss = loss_sum / len(order)

        if epoch % config.val_every == 0 or epoch == config.epochs:
            ev = evaluate(model, val_x, info, batch=config.batch_size)
            val_nmse, val_rho = ev.nmse_db, ev.rho
            if val_nmse < result.best_val_nmse_db:
                result.best_val_nmse_db = val_nmse
                result.best_epoch = epoch
                result.best_weights = model.store.clone_values()
        else:
            val_nmse, val_rho = float("nan"), float("nan")
        wall = time.perf_counter() - t0 if config.record_timing else 0.0
        result.history.append(EpochRecord(epoch, train_loss, val_nmse, val_rho, wall))
        if log is not None:
            log(f"epoch {epoch}/{config.epochs}  loss {train_loss:.6e}  val NMSE {val_nmse:.2f} dB")
    result.final_weights = model.store.clone_values()
    return result
