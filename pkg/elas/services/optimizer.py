"""
Low-rank optimizer loop: per-factor AdamW on most steps, and a periodic exact
refresh that rebalances each factor pair through an SVD of their product and
resets the refreshed factors' moments.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import numpy as np

from ..core.exceptions import CheckpointError, NonFiniteGradientError, NumericError
from ..schemas.train import TrainConfig
from .lowrank import LowRankLinear
from .numerics import svd

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to base_lr, then cosine decay to min_lr."""
    base_lr: float
    min_lr: float = 0.0
    warmup_fraction: float = 0.1

    @classmethod
    def from_config(cls, config: TrainConfig) -> "LrSchedule":
        return cls(
            base_lr=config.base_lr,
            min_lr=config.min_lr,
            warmup_fraction=config.lr_warmup_fraction,
        )


def lr_at(schedule: LrSchedule, step: int, total: int) -> float:
    """
    Learning rate at ``step`` of ``total``.

    Returns 0 at step 0, base_lr at the end of the ramp and min_lr at total.
    Steps past ``total`` stay at min_lr.
    """
    if total <= 0:
        return schedule.base_lr
    step = max(0, min(step, total))
    warmup = schedule.warmup_fraction * total
    if warmup > 0 and step < warmup:
        return schedule.base_lr * step / warmup
    span = total - warmup
    progress = (step - warmup) / span if span > 0 else 1.0
    cosine = 0.5 * (1.0 + math.cos(math.pi * progress))
    return schedule.min_lr + (schedule.base_lr - schedule.min_lr) * cosine


@dataclass
class OptimizerState:
    """AdamW moments plus per-parameter bias-correction step counters."""
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    refresh_every: int = 500
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: Dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_config(cls, config: TrainConfig) -> "OptimizerState":
        return cls(
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.eps,
            weight_decay=config.weight_decay,
            refresh_every=config.refresh_every,
        )

    def ensure(self, name: str, param: np.ndarray) -> None:
        if name not in self.m:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            self.t[name] = 0

    def reset(self, name: str) -> None:
        """Zero the moments and the step counter of one parameter."""
        if name in self.m:
            self.m[name].fill(0)
            self.v[name].fill(0)
        self.t[name] = 0

    def to_records(self) -> Dict[str, np.ndarray]:
        """Named arrays for checkpointing (``optim.<name>.m`` etc.)."""
        records: Dict[str, np.ndarray] = {"optim.step": np.array([self.step], dtype=np.int64)}
        for name in sorted(self.m):
            records[f"optim.{name}.m"] = self.m[name]
            records[f"optim.{name}.v"] = self.v[name]
            records[f"optim.{name}.t"] = np.array([self.t[name]], dtype=np.int64)
        return records

    def load_records(self, records: Mapping[str, np.ndarray]) -> None:
        """
        Replace the state from checkpoint records.

        Raises:
            CheckpointError: Missing step counter or incomplete moment triple
        """
        if "optim.step" not in records:
            raise CheckpointError("Checkpoint has no optimizer step record")
        names = {
            key[len("optim."):-len(".m")]
            for key in records
            if key.startswith("optim.") and key.endswith(".m")
        }
        m, v, t = {}, {}, {}
        for name in names:
            try:
                m[name] = np.array(records[f"optim.{name}.m"])
                v[name] = np.array(records[f"optim.{name}.v"])
                t[name] = int(records[f"optim.{name}.t"][0])
            except KeyError as e:
                raise CheckpointError(f"Incomplete optimizer state for {name}: {e}") from e
        self.step = int(records["optim.step"][0])
        self.m, self.v, self.t = m, v, t


def _check_gradients(
    params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]
) -> None:
    for name, grad in grads.items():
        if name not in params:
            raise KeyError(f"Gradient for unknown parameter {name!r}")
        if grad.shape != params[name].shape:
            raise ValueError(
                f"Gradient shape {grad.shape} does not match {name} {params[name].shape}"
            )
        if not np.all(np.isfinite(grad)):
            bad = int(grad.size - np.count_nonzero(np.isfinite(grad)))
            raise NonFiniteGradientError(
                f"Non-finite gradient for {name}", {"parameter": name, "non_finite": bad}
            )


def step_approx(
    state: OptimizerState,
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    lr: float,
) -> None:
    """
    One AdamW update applied independently to every parameter, in place.

    All gradients are checked before anything is mutated.

    Raises:
        NonFiniteGradientError: NaN or Inf in any gradient
    """
    _check_gradients(params, grads)
    for name in sorted(grads):
        param, grad = params[name], grads[name]
        state.ensure(name, param)
        state.t[name] += 1
        t = state.t[name]
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * grad
        v *= state.beta2
        v += (1 - state.beta2) * grad * grad
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        if state.weight_decay:
            param -= (lr * state.weight_decay) * param
        param -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype, copy=False)
    state.step += 1


def balanced_factors(A: np.ndarray, B: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Rebalance A @ B into U sqrt(S) and sqrt(S) Vt, in float64.

    The SVD runs on the r x r core of two thin QR factorizations, so the
    d_out x d_in product is never formed.
    """
    a = A.astype(np.float64)
    b = B.astype(np.float64)
    q_a, r_a = np.linalg.qr(a)
    q_b, r_b = np.linalg.qr(b.T)
    core = svd(r_a @ r_b.T)
    root = np.sqrt(core.S)
    new_a = q_a @ (core.U * root)
    new_b = (root[:, None] * core.Vt) @ q_b.T
    return new_a, new_b


def step_exact_refresh(
    state: OptimizerState, layer: LowRankLinear, name: str = ""
) -> bool:
    """
    Exact refresh of one factor pair; preserves A @ B.

    On success A and B are replaced in place by the balanced factors and
    their moments and step counters are zeroed.

    Returns:
        False if the SVD failed and the refresh was skipped
    """
    try:
        new_a, new_b = balanced_factors(layer.A, layer.B)
    except NumericError as e:
        logger.warning(f"Skipping refresh of {name or 'layer'}: {e}")
        return False
    if not (np.all(np.isfinite(new_a)) and np.all(np.isfinite(new_b))):
        logger.warning(f"Skipping refresh of {name or 'layer'}: non-finite factors")
        return False

    layer.A[...] = new_a.astype(layer.A.dtype)
    layer.B[...] = new_b.astype(layer.B.dtype)
    if name:
        state.reset(f"{name}.A")
        state.reset(f"{name}.B")
    return True


def refresh_all(state: OptimizerState, layers: Mapping[str, LowRankLinear]) -> int:
    """
    Refresh every named low-rank layer.

    Returns:
        Number of layers refreshed
    """
    refreshed = sum(step_exact_refresh(state, layer, name) for name, layer in layers.items())
    logger.info(f"Refreshed {refreshed}/{len(layers)} low-rank layers at step {state.step}")
    return refreshed


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """
    Scale all gradients in place so their global L2 norm is at most max_norm.

    Returns:
        Norm before clipping
    """
    total = math.sqrt(
        sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())
    )
    if max_norm > 0 and math.isfinite(total) and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for grad in grads.values():
            grad *= grad.dtype.type(scale)
    return total
