"""Deterministic float64 numerical core with exact analytic backward passes.

Matrices are plain 2-D float64 numpy arrays. Every kernel documents its
backward contract; the layer and model code composes these by hand (there is
no autodiff tape). Forward reductions over graph neighborhoods run in CSR
storage order, so single-threaded results are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import Graph


@dataclass
class Param:
    """A trainable matrix and its gradient accumulator."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ValueError("grad shape must match value shape")

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


@dataclass
class AdamState:
    """Per-parameter Adam state (first/second moments plus hyperparameters)."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def new_adam_state(p: Param, lr: float, weight_decay: float = 0.0) -> AdamState:
    return AdamState(
        m=np.zeros_like(p.value), v=np.zeros_like(p.value), lr=lr, weight_decay=weight_decay
    )


def adam_step(p: Param, s: AdamState) -> None:
    """One Adam update with bias correction and decoupled weight decay.

    Weight decay shrinks the value before the moment update; the gradient is
    zeroed afterwards so the next epoch starts clean.
    """
    if s.weight_decay:
        p.value *= 1.0 - s.lr * s.weight_decay
    s.t += 1
    g = p.grad
    s.m = s.beta1 * s.m + (1.0 - s.beta1) * g
    s.v = s.beta2 * s.v + (1.0 - s.beta2) * (g * g)
    m_hat = s.m / (1.0 - s.beta1**s.t)
    v_hat = s.v / (1.0 - s.beta2**s.t)
    p.value -= s.lr * m_hat / (np.sqrt(v_hat) + s.eps)
    p.zero_grad()


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product. Backward: grad_a = G @ b.T, grad_b = a.T @ G."""
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def matmul_backward(
    grad_out: np.ndarray, a: np.ndarray, b: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    return grad_out @ b.T, a.T @ grad_out


def neighbor_sum(g: Graph, h: np.ndarray, gate: np.ndarray | None = None) -> np.ndarray:
    """out_i = sum over neighbors j of gate_j * h_j (gate_j = 1 when absent).

    The reduction runs in CSR storage order (ascending neighbor id per row).
    Backward, using the symmetric adjacency: grad_h_j = gate_j *
    neighbor_sum(G)_j and grad_gate_j = <neighbor_sum(G)_j, h_j>.
    """
    if h.shape[0] != g.num_nodes:
        raise ValueError(f"h has {h.shape[0]} rows, graph has {g.num_nodes} nodes")
    if gate is not None:
        if gate.shape != (g.num_nodes,):
            raise ValueError("gate length must equal num_nodes")
        h = gate[:, None] * h
    return g.adjacency @ h


def neighbor_sum_backward(
    g: Graph, grad_out: np.ndarray, h: np.ndarray, gate: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Gradients of neighbor_sum wrt h and gate (None when gate was absent)."""
    back = g.adjacency @ grad_out
    if gate is None:
        return back, None
    grad_h = gate[:, None] * back
    grad_gate = np.einsum("ij,ij->i", back, h)
    return grad_h, grad_gate


def logistic(x: np.ndarray) -> np.ndarray:
    """Numerically stable sigmoid; output in (0, 1). Backward: y * (1 - y)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logistic_grad(y: np.ndarray) -> np.ndarray:
    """Derivative of the logistic expressed through its output y."""
    return y * (1.0 - y)


def relu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, 0.0)


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    """Embedding nonlinearity: relu (default), elu, logistic, or identity."""
    if kind == "relu":
        return np.where(x > 0, x, 0.0)
    if kind == "elu":
        return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))
    if kind == "logistic":
        return logistic(x)
    if kind == "identity":
        return x
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(x: np.ndarray, kind: str) -> np.ndarray:
    """Derivative of `activation` evaluated at the pre-activation x."""
    if kind == "relu":
        return (x > 0).astype(np.float64)
    if kind == "elu":
        return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))
    if kind == "logistic":
        y = logistic(x)
        return y * (1.0 - y)
    if kind == "identity":
        return np.ones_like(x)
    raise ValueError(f"unknown activation {kind!r}")


def dropout(
    h: np.ndarray, p: float, rng: np.random.Generator | None, training: bool
) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout: zero entries with probability p, scale survivors.

    Returns (output, scaled_mask); the mask is the exact backward multiplier
    and is None in evaluation mode, where the op is the identity. The mask is
    drawn from ``rng``, so reproducibility follows from seeding the generator
    and keeping the call order fixed.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must lie in [0, 1)")
    if not training:
        return h, None
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    keep = rng.random(h.shape) >= p
    scaled = keep / (1.0 - p)
    return h * scaled, scaled


def log_softmax_nll(
    logits: np.ndarray, labels: np.ndarray, mask: np.ndarray
) -> tuple[float, np.ndarray]:
    """Masked mean negative log-likelihood under a row-wise log-softmax.

    Returns (loss, grad) where grad rows vanish outside the mask. Stabilized
    by max subtraction.
    """
    if not np.any(mask):
        raise ValueError("loss mask is empty")
    idx = np.flatnonzero(mask)
    z = logits[idx]
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    picked = log_probs[np.arange(len(idx)), labels[idx]]
    loss = float(-picked.mean())
    grad = np.zeros_like(logits)
    soft = np.exp(log_probs)
    soft[np.arange(len(idx)), labels[idx]] -= 1.0
    grad[idx] = soft / len(idx)
    return loss, grad
