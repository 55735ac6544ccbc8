"""AdamW with decoupled weight decay.

Weight decay multiplies the parameter directly into the step
(theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)), so with
wd=0 the update reduces exactly to Adam.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class OptimState:
    """Per-parameter Adam moments plus the shared step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimState) -> None:
    """One AdamW update, in place on the parameter tensors.

    Raises on non-finite gradients, naming the offending parameter.
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        update = m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay != 0.0:
            update = update + state.weight_decay * p.data
        p.data = p.data - state.lr * update


def state_arrays(state: OptimState, prefix: str) -> dict[str, np.ndarray]:
    """Flatten optimizer moments for checkpointing."""
    out: dict[str, np.ndarray] = {}
    for name, arr in state.m.items():
        out[f"{prefix}.m.{name}"] = arr
    for name, arr in state.v.items():
        out[f"{prefix}.v.{name}"] = arr
    return out


def restore_state_arrays(state: OptimState, prefix: str, tensors: Mapping[str, np.ndarray]) -> None:
    mp = f"{prefix}.m."
    vp = f"{prefix}.v."
    for name, arr in tensors.items():
        if name.startswith(mp):
            state.m[name[len(mp):]] = np.array(arr, dtype=np.float64)
        elif name.startswith(vp):
            state.v[name[len(vp):]] = np.array(arr, dtype=np.float64)
