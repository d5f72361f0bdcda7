"""Training loop with the reference hyperparameters, evaluation metrics, the
CIR-length grid study and the learning-rate range test."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import quant
from .graph import Graph, run_graph
from .dataset import Metrics, SampleSet, Split, prepare
from .model import (
    MlpWeights,
    ModelConfig,
    RemnetWeights,
    build_remnet,
    mlp_backward,
    mlp_forward,
    new_adam,
    remnet_backward,
    remnet_forward,
)
from .nn import adam_step, mae_loss


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seeds: tuple = (0, 1, 2, 3, 4)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")


def _forward_backward(weights, xb, yb, rng):
    """One training step's loss and gradients for either architecture."""
    if isinstance(weights, RemnetWeights):
        pred, cache = remnet_forward(weights, xb, train_mode=True,
                                     dropout_rng=rng, return_cache=True)
        loss, dpred = mae_loss(pred, yb)
        return loss, remnet_backward(weights, cache, dpred)
    if isinstance(weights, MlpWeights):
        pred, cache = mlp_forward(weights, xb, train_mode=True,
                                  dropout_rng=rng, return_cache=True)
        loss, dpred = mae_loss(pred, yb)
        return loss, mlp_backward(weights, cache, dpred)
    raise TypeError(f"cannot train {type(weights).__name__}")


def predict(model, x: np.ndarray) -> np.ndarray:
    """Inference-mode predictions for any model representation."""
    if isinstance(model, RemnetWeights):
        return remnet_forward(model, x)
    if isinstance(model, MlpWeights):
        return mlp_forward(model, x)
    if isinstance(model, Graph):
        return run_graph(model, x)
    if isinstance(model, quant.QuantizedModel):
        return quant.int_predict(model, x)
    raise TypeError(f"cannot predict with {type(model).__name__}")


def train(weights, x: np.ndarray, y: np.ndarray, config: TrainConfig,
          seed: int = 0, state_out: dict | None = None) -> list[float]:
    """Train in place; returns the per-epoch mean training loss history.

    Batches are reshuffled every epoch from the run seed; the last partial
    batch is kept. Aborts on NaN loss. When `state_out` is given, the final
    optimizer state is stored under its "adam" key (for checkpointing).
    """
    n = len(x)
    if n == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    adam = new_adam(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    params = weights.params()
    dtype = next(iter(params.values())).dtype
    x = np.asarray(x, dtype=dtype)
    y = np.asarray(y, dtype=dtype)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = _forward_backward(weights, x[idx], y[idx], rng)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"training diverged: loss={loss} at epoch {epoch}, step {start // config.batch_size}"
                )
            if config.lr > 0:
                adam_step(params, grads, adam)
            losses.append(loss)
        history.append(float(np.mean(losses)))
    if state_out is not None:
        state_out["adam"] = adam
    return history


def evaluate(model, test: SampleSet, K: int) -> Metrics:
    """Mitigated-error metrics: MAE of (range_error - prediction), stratified
    by the LOS flag. Empty strata are reported as absent."""
    if len(test) == 0:
        raise ValueError("empty test set")
    x = prepare(test.cir, K)
    pred = predict(model, x)
    resid = test.range_error - pred
    los_r = resid[test.los]
    nlos_r = resid[~test.los]
    return Metrics(
        mae_m=float(np.mean(np.abs(resid))),
        sigma_m=float(np.std(resid)),
        mae_los_m=float(np.mean(np.abs(los_r))) if los_r.size else None,
        mae_nlos_m=float(np.mean(np.abs(nlos_r))) if nlos_r.size else None,
        n_samples=len(test),
    )


def residuals(model, test: SampleSet, K: int) -> np.ndarray:
    x = prepare(test.cir, K)
    return test.range_error - predict(model, x)


def boxplot_record(abs_resid: np.ndarray) -> dict:
    q1, med, q3 = np.percentile(abs_resid, [25, 50, 75])
    return {
        "min": float(abs_resid.min()), "q1": float(q1), "median": float(med),
        "q3": float(q3), "max": float(abs_resid.max()),
    }


@dataclass
class GridRow:
    K: int
    metrics: Metrics
    per_seed_mae: list[float]
    boxplot: dict
    error: str | None = None


def train_one(split: Split, K: int, config: TrainConfig, seed: int,
              model_config: ModelConfig | None = None) -> tuple[RemnetWeights, list[float]]:
    cfg = model_config or ModelConfig(K=K)
    if cfg.K != K:
        raise ValueError(f"model K={cfg.K} does not match requested K={K}")
    weights = build_remnet(cfg, seed=seed)
    x = prepare(split.train.cir, K)
    y = split.train.range_error
    history = train(weights, x, y, config, seed=seed)
    return weights, history


def cir_grid_study(split: Split, Ks, config: TrainConfig,
                   paper_count_compatible: bool = False) -> list[GridRow]:
    """Per-K accuracy table over the seed list; failures for one K do not
    stop the remaining Ks."""
    rows = []
    for K in Ks:
        try:
            maes, all_resid = [], []
            last_metrics = None
            for seed in config.seeds:
                cfg = ModelConfig(K=K, paper_count_compatible=paper_count_compatible)
                weights, _ = train_one(split, K, config, seed, cfg)
                m = evaluate(weights, split.test, K)
                maes.append(m.mae_m)
                last_metrics = m
                all_resid.append(np.abs(residuals(weights, split.test, K)))
            mean_mae = float(np.mean(maes))
            metrics = Metrics(mean_mae, last_metrics.sigma_m, last_metrics.mae_los_m,
                              last_metrics.mae_nlos_m, last_metrics.n_samples)
            rows.append(GridRow(K, metrics, maes, boxplot_record(np.concatenate(all_resid))))
        except Exception as exc:  # propagate per-K, continue remaining Ks
            rows.append(GridRow(K, None, [], {}, error=str(exc)))
    return rows


def lr_range_test(weights, x: np.ndarray, y: np.ndarray,
                  lr_min: float, lr_max: float, steps: int = 100,
                  batch_size: int = 32, seed: int = 0):
    """Exponential learning-rate sweep over one pass through the data.

    Returns (lrs, losses, suggested_lr); the curve is truncated if the loss
    diverges. The suggestion is the rate at the steepest descent of the
    smoothed curve.
    """
    if not (0 < lr_min < lr_max):
        raise ValueError("need 0 < lr_min < lr_max")
    n = len(x)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    adam = new_adam(lr=lr_min)
    params = weights.params()
    lrs, losses = [], []
    ratio = (lr_max / lr_min) ** (1.0 / max(steps - 1, 1))
    first_loss = None
    for step in range(steps):
        lr = lr_min * ratio ** step
        idx = order[(step * batch_size) % n:(step * batch_size) % n + batch_size]
        loss, grads = _forward_backward(weights, x[idx], y[idx], rng)
        if not np.isfinite(loss) or (first_loss is not None and loss > 10 * first_loss):
            break
        if first_loss is None:
            first_loss = loss
        lrs.append(lr)
        losses.append(loss)
        adam.lr = lr
        adam_step(params, grads, adam)
    smoothed = np.array(losses, dtype=float)
    if len(smoothed) >= 3:
        kernel = np.ones(3) / 3.0
        smoothed = np.convolve(smoothed, kernel, mode="same")
    if len(smoothed) >= 2:
        drops = np.diff(smoothed)
        suggested = lrs[int(np.argmin(drops))]
    else:
        suggested = lr_min
    return np.array(lrs), np.array(losses), float(suggested)


def aggregate_seed_metrics(metrics: list[Metrics]) -> dict:
    maes = [m.mae_m for m in metrics]
    return {
        "mae_mean_m": float(np.mean(maes)),
        "mae_std_m": float(np.std(maes)),
        "per_seed_mae_m": [float(v) for v in maes],
        "n_seeds": len(maes),
    }
