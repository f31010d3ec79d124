"""Minimal differentiable-layer substrate on numpy arrays.

Layers are written as explicit forward/backward pairs; backward routines
accumulate into Param.grad. Everything runs in float32 by default and in
float64 for gradient checking.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DivergenceError(RuntimeError):
    """Raised when training produces a non-finite loss."""


@dataclass
class Param:
    """A trainable array with its gradient and Adam state."""

    value: np.ndarray
    grad: np.ndarray = None  # type: ignore[assignment]
    adam_m: np.ndarray = None  # type: ignore[assignment]
    adam_v: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.value)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.value)


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> Param:
    """Symmetric uniform init scaled by 1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(fan_in)
    return Param(rng.uniform(-bound, bound, size=shape).astype(dtype))


def zeros_init(shape: tuple[int, ...], dtype) -> Param:
    return Param(np.zeros(shape, dtype=dtype))


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Dense:
    """Affine layer y = x @ W + b."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32):
        self.w = uniform_init(rng, (n_in, n_out), fan_in=n_in, dtype=dtype)
        self.b = zeros_init((n_out,), dtype=dtype)

    @property
    def params(self) -> list[Param]:
        return [self.w, self.b]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.w.value.shape[0]:
            raise ValueError(
                f"dense input dim {x.shape[-1]} != weight rows {self.w.value.shape[0]}"
            )
        return x @ self.w.value + self.b.value

    def backward(self, x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients and return the input gradient."""
        self.w.grad += x.T @ upstream
        self.b.grad += upstream.sum(axis=0)
        return upstream @ self.w.value.T


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_multilabel(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Multi binary cross-entropy in the stable logit form.

    Returns the mean loss over all B*C elements and its gradient w.r.t.
    the logits, (sigmoid(z) - y) / (B*C).
    """
    if logits.shape != targets.shape:
        raise ValueError(f"shape mismatch: logits {logits.shape}, targets {targets.shape}")
    if not np.isin(targets, (0.0, 1.0)).all():
        raise ValueError("targets must be binary")
    z, y = logits, targets
    loss_elem = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    grad = (sigmoid(z) - y) / n
    return float(loss_elem.mean()), grad


def dropout_mask(rng: np.random.Generator, shape: tuple[int, ...], keep: float, dtype) -> np.ndarray:
    """Inverted-dropout multiplier: Bernoulli(keep)/keep, so eval is identity."""
    if keep <= 0.0 or keep > 1.0:
        raise ValueError(f"keep probability must be in (0, 1], got {keep}")
    if keep == 1.0:
        return np.ones(shape, dtype=dtype)
    return (rng.random(shape) < keep).astype(dtype) / dtype(keep)


def dropout_forward(
    x: np.ndarray, keep: float, training: bool, rng: np.random.Generator | None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Apply inverted dropout; returns (output, mask). Eval mode is exact identity."""
    if not training or keep == 1.0:
        if keep <= 0.0 or keep > 1.0:
            raise ValueError(f"keep probability must be in (0, 1], got {keep}")
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = dropout_mask(rng, x.shape, keep, x.dtype.type)
    return x * mask, mask


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


def adam_step(
    params: list[Param],
    lr: float,
    t: int,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update applied in place; grads are zeroed after."""
    if t < 1:
        raise ValueError(f"step index t must be >= 1, got {t}")
    for p in params:
        g = p.grad
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * g * g
        m_hat = p.adam_m / (1.0 - beta1**t)
        v_hat = p.adam_v / (1.0 - beta2**t)
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype)
        p.grad = np.zeros_like(p.value)


@dataclass
class TrainConfig:
    """Optimizer and schedule settings; the paper leaves these unspecified,
    so the defaults are conventional values for shallow heads."""

    lr0: float = 1e-3
    decay_factor: float = 0.1
    plateau_epochs: int = 5
    early_stop_epochs: int = 15
    batch_size: int = 64
    dropout_keep: float = 0.6
    max_epochs: int = 200
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 < self.dropout_keep <= 1.0):
            raise ValueError(f"dropout_keep must be in (0, 1], got {self.dropout_keep}")
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not (0.0 < self.decay_factor < 1.0):
            raise ValueError(f"decay_factor must be in (0, 1), got {self.decay_factor}")


IMPROVEMENT_TOL = 1e-4  # min val-mAP gain that counts as progress


def lr_schedule(history: list[float], cfg: TrainConfig) -> tuple[float, bool]:
    """Step-decay learning rate and early-stop flag from validation history.

    An epoch improves when it beats the running best by more than 1e-4.
    Every plateau_epochs consecutive stale epochs multiply the rate by
    decay_factor; training stops once the best epoch is early_stop_epochs
    old, counting the best epoch itself.
    """
    if not history:
        raise ValueError("history must be non-empty")
    best = history[0]
    best_pos = 0
    for i, v in enumerate(history[1:], start=1):
        if v > best + IMPROVEMENT_TOL:
            best, best_pos = v, i
    stale = len(history) - 1 - best_pos
    lr = cfg.lr0 * cfg.decay_factor ** (stale // cfg.plateau_epochs)
    stop = (stale + 1) >= cfg.early_stop_epochs
    return lr, stop


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradcheckResult:
    max_rel_err: float
    passed: bool
    worst: str = ""
    failures: list[str] = field(default_factory=list)


def gradcheck(f, arrays: dict[str, np.ndarray], eps: float = 1e-3, tol: float = 1e-4) -> GradcheckResult:
    """Compare analytic gradients against central finite differences.

    f() must return (loss, grads) where grads maps each name in `arrays`
    to the analytic gradient of the loss w.r.t. that array. The arrays are
    perturbed in place element by element; they must be float64 for the
    stated tolerance to be meaningful.

    Relative error uses max(|analytic|, |numeric|, 1e-6) as denominator so
    that near-zero gradient entries are compared absolutely.
    """
    _, analytic = f()
    for name in arrays:
        g = analytic[name]
        if not np.isfinite(g).all():
            return GradcheckResult(
                max_rel_err=np.inf, passed=False,
                worst=f"{name}: non-finite analytic gradient",
                failures=[f"{name}: non-finite analytic gradient"],
            )
    max_rel = 0.0
    worst = ""
    failures: list[str] = []
    for name, arr in arrays.items():
        g = analytic[name]
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + eps
            loss_plus = f()[0]
            arr[idx] = orig - eps
            loss_minus = f()[0]
            arr[idx] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * eps)
            denom = max(abs(g[idx]), abs(numeric), 1e-6)
            rel = abs(g[idx] - numeric) / denom
            if rel > max_rel:
                max_rel = rel
                worst = f"{name}{list(idx)}: analytic={g[idx]:.3e} numeric={numeric:.3e}"
            if rel >= tol:
                failures.append(
                    f"{name}{list(idx)}: rel_err={rel:.3e} "
                    f"(analytic={g[idx]:.6e}, numeric={numeric:.6e})"
                )
            it.iternext()
    return GradcheckResult(
        max_rel_err=max_rel, passed=max_rel < tol, worst=worst, failures=failures
    )
