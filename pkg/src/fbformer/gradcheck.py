"""Central finite-difference checks of analytic gradients (run in float64).

Relative error of a gradient tensor is ``|a - n| / max(|a|, |n|, FLOOR)``
with Euclidean norms over the tensor, ``a`` analytic and ``n`` numeric.
Per-tensor norms keep the measure stable for entries whose true gradient is
~0, where an elementwise ratio would only report finite-difference
round-off. The small absolute ``FLOOR`` covers tensors whose gradient is
exactly zero, e.g. a conv bias followed by a one-channel-per-group norm.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import ops
from .config import DecoderConfig, EncoderConfig, FeedbackConfig, LossConfig, ModelConfig
from .feedback import FeedbackFormer
from .tensor import Parameter, Rng, Tensor, backward, no_grad, precision

STEP = 1e-4
TOLERANCE = 1e-4
FLOOR = 1e-10


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, n = np.linalg.norm(analytic), np.linalg.norm(numeric)
    denom = max(a, n, FLOOR)
    return float(np.linalg.norm(analytic - numeric) / denom)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``arr`` (mutated in place, restored)."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def check_function(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
                   step: float = STEP) -> List[float]:
    """Gradient check of ``fn(*tensors)`` w.r.t. every input.

    Non-scalar outputs are reduced with a fixed random projection so every
    output entry contributes. Returns one relative error per input.
    """
    with precision(np.float64):
        arrays = [np.array(x, dtype=np.float64) for x in inputs]
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*tensors)
        proj = Rng(seed).normal(out.shape) if out.size > 1 else None

        def scalar(t: Tensor) -> Tensor:
            return t if proj is None else ops.sum(ops.mul(t, proj))

        backward(scalar(out))
        errors = []
        for t, arr in zip(tensors, arrays):
            def f():
                with no_grad():
                    return scalar(fn(*[Tensor(a) for a in arrays])).item()

            num = numeric_grad(f, arr, step)
            errors.append(rel_error(t.grad, num))
        return errors


@dataclass
class GradcheckReport:
    errors: Dict[str, float]
    step: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def worst(self) -> str:
        return max(self.errors, key=self.errors.get)

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.max_error < tol


def tiny_config(mode: str = "lite") -> ModelConfig:
    return ModelConfig(
        encoder=EncoderConfig(variant="custom", dims=[4, 4, 8, 8], depths=[1, 1, 1, 1], heads=[1, 2, 2, 2],
                              mlp_ratio=2.0),
        decoder=DecoderConfig(channels=4, num_classes=2),
        feedback=FeedbackConfig(mode=mode, hidden=4, attn_downsample=2),
    )


TINY_INPUT = 32


def model_gradcheck(config: Optional[ModelConfig] = None, size: int = TINY_INPUT, seed: int = 0,
                    step: float = STEP, loss: Optional[LossConfig] = None, jitter: float = 0.1,
                    params: Optional[Sequence[str]] = None) -> GradcheckReport:
    """Finite-difference check of every parameter of a small two-round model.

    The objective is the full training loss (both rounds, main + auxiliary
    heads). Parameters get Gaussian jitter first so no weight sits at a
    degenerate initial value (zero biases, unit norm scales, zero gamma).
    """
    from .train import training_loss

    config = config or tiny_config()
    loss = loss or LossConfig()
    rng = Rng(seed).child(99)
    with precision(np.float64):
        model = FeedbackFormer(config, seed=seed).astype(np.float64)
        for p in model.parameters():
            p.data = p.data + rng.normal(p.shape, jitter)
        model.train()
        image = rng.normal((1, 3, size, size))
        label = rng.integers(0, config.decoder.num_classes, size=(1, size, size))

        def objective() -> float:
            with no_grad():
                value, _ = training_loss(model, image, label, loss)
            return value.item()

        model.zero_grad()
        value, _ = training_loss(model, image, label, loss)
        backward(value)
        named = dict(model.named_parameters())
        errors = {}
        for name in params or list(named):
            p: Parameter = named[name]
            num = numeric_grad(objective, p.data, step)
            errors[name] = rel_error(p.grad, num)
    return GradcheckReport(errors, step)
