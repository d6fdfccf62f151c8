"""Central finite-difference validation of the hand-derived backward passes.

Soft mode checks the full end-to-end gradient of every parameter. Hard-frozen
mode keeps the hard gate pattern fixed (trials are resampled until every
sensitivity score sits a safe margin away from the threshold) and disables
the straight-through rule, so the analytic gradient is the exact local one
that finite differences measure.

Trials are also resampled when any pre-activation sits too close to a relu
kink, which would otherwise contaminate the difference quotient.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import kernels as K
from .graph import Graph, make_graph
from .model import Model, ModelConfig, _model_forward_full, _model_backward, init_model

_MARGIN = 1e-3  # min distance of relu inputs from 0 and of p_hat from T
_PARAM_NAMES = {True: ("W", "W0", "W1"), False: ("W", "W0", "W2", "W3")}


@dataclass
class GradcheckResult:
    max_rel_err: float
    worst_coord: str
    trials: int


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-2) -> float:
    """Elementwise |a - n| / max(|a|, |n|, floor), maximized.

    The floor keeps difference-quotient noise on near-zero coordinates from
    dominating; genuine errors on trainably sized gradients stay visible.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def random_small_graph(
    rng: np.random.Generator, nodes: int, feat_dim: int, num_classes: int, edge_prob: float = 0.45
) -> Graph:
    iu, ju = np.triu_indices(nodes, k=1)
    hit = rng.random(len(iu)) < edge_prob
    pairs = np.stack([iu[hit], ju[hit]], axis=1).astype(np.int64)
    features = rng.standard_normal((nodes, feat_dim))
    labels = rng.integers(0, num_classes, size=nodes)
    return make_graph(pairs, features, labels, num_classes)


def _admissible(m: Model, g: Graph, hard: bool) -> bool:
    _, state = _model_forward_full(m, g, training=False, rng=None)
    for st in state.layer_states:
        if min(np.abs(st.WX).min(), np.abs(st.A).min()) < _MARGIN:
            return False
        if hard and np.abs(st.p_hat - st.threshold).min() < _MARGIN:
            return False
    return True


def _build_trial(
    rng: np.random.Generator, mode: str, nodes: int, feat_dim: int, out_dim: int, num_layers: int
) -> tuple[Model, Graph, np.ndarray]:
    hard = mode == "hard-frozen"
    for _ in range(64):
        sub = np.random.default_rng(rng.integers(0, 2**63))
        g = random_small_graph(sub, nodes, feat_dim, out_dim)
        cfg = ModelConfig(
            num_layers=num_layers,
            out_dim=out_dim,
            threshold=0.5,
            gate_mode="hard" if hard else "soft",
            dropout=0.0,
            seed=int(sub.integers(0, 2**31)),
        )
        m = init_model(cfg, feat_dim, out_dim)
        if hard:
            # place the threshold mid-gap so no score can cross under +-h
            _, state = _model_forward_full(m, g, training=False, rng=None)
            scores = np.sort(np.concatenate([st.p_hat for st in state.layer_states]))
            gaps = np.diff(scores)
            if len(gaps) == 0 or gaps.max() < 2 * _MARGIN:
                continue
            k = int(np.argmax(gaps))
            t = float((scores[k] + scores[k + 1]) / 2.0)
            m = Model(
                [replace(layer, threshold=t) for layer in m.layers],
                replace(cfg, threshold=t),
            )
        mask = np.zeros(g.num_nodes, dtype=bool)
        mask[sub.permutation(g.num_nodes)[: max(2, g.num_nodes // 2)]] = True
        if _admissible(m, g, hard):
            return m, g, mask
    raise RuntimeError("could not build an admissible gradcheck trial")


def _loss(m: Model, g: Graph, mask: np.ndarray) -> float:
    logits, _ = _model_forward_full(m, g, training=False, rng=None)
    loss, _ = K.log_softmax_nll(logits, g.labels, mask)
    return loss


def run_gradcheck(
    mode: str = "soft",
    nodes: int = 6,
    trials: int = 20,
    seed: int = 0,
    h: float = 1e-5,
    feat_dim: int = 4,
    out_dim: int = 3,
    num_layers: int = 2,
) -> GradcheckResult:
    """Compare analytic parameter gradients against central differences."""
    if mode not in ("soft", "hard-frozen"):
        raise ValueError("mode must be 'soft' or 'hard-frozen'")
    if nodes > 16:
        raise ValueError("gradcheck graphs are capped at 16 nodes")
    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_coord = "none"
    for trial in range(trials):
        m, g, mask = _build_trial(rng, mode, nodes, feat_dim, out_dim, num_layers)
        logits, state = _model_forward_full(m, g, training=False, rng=None)
        _, grad_logits = K.log_softmax_nll(logits, g.labels, mask)
        for p in m.params():
            p.zero_grad()
        _model_backward(m, g, grad_logits, state, ste=(mode != "hard-frozen"))

        for li, layer in enumerate(m.layers):
            simple = not hasattr(layer, "W2")
            for name in _PARAM_NAMES[simple]:
                p = getattr(layer, name)
                analytic = p.grad.copy()
                numeric = np.zeros_like(analytic)
                flat = p.value.reshape(-1)
                for idx in range(flat.size):
                    orig = flat[idx]
                    flat[idx] = orig + h
                    lp = _loss(m, g, mask)
                    flat[idx] = orig - h
                    lm = _loss(m, g, mask)
                    flat[idx] = orig
                    numeric.reshape(-1)[idx] = (lp - lm) / (2.0 * h)
                err = max_rel_error(analytic, numeric)
                if err > worst:
                    flat_err = np.abs(analytic - numeric) / np.maximum(
                        np.maximum(np.abs(analytic), np.abs(numeric)), 1e-2
                    )
                    coord = np.unravel_index(int(np.argmax(flat_err)), analytic.shape)
                    worst = err
                    worst_coord = f"trial {trial} layer {li} {name}{list(coord)}"
    return GradcheckResult(max_rel_err=worst, worst_coord=worst_coord, trials=trials)
