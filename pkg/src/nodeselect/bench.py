"""Experiment harness: noise injection, scalability, threshold and layer-count
sweeps, stacking comparison, and per-layer diagnostics.

Every cell of every experiment is a pure function of (condition, seed), so
single-threaded reruns reproduce report rows byte-for-byte. Wall-clock timing
is recorded only for the scalability experiment, keeping the other rows
deterministic. Reports serialize to CSV for external plotting.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels as K
from . import layers as L
from .graph import Graph, SplitMasks, augment_with_noise, load_graph, make_splits, synth_sbm
from .kernels import Param
from .model import (
    Model,
    ModelConfig,
    ModelState,
    TrainReport,
    _accuracy,
    _glorot,
    _model_forward_full,
    init_model,
    train,
    with_threshold,
)

EXPERIMENTS = ("noise", "scale", "sweep_T", "sweep_L", "stacking", "diagnostics")

CSV_COLUMNS = (
    "experiment",
    "condition",
    "model",
    "seed",
    "clean_acc",
    "noisy_acc",
    "selection_frac",
    "params",
    "peak_bytes",
    "epoch_ms",
)


@dataclass
class SbmRecipe:
    """Desk-scale planted-partition stand-in for the benchmark graphs."""

    n: int = 400
    classes: int = 4
    p_in: float = 0.05
    p_out: float = 0.005
    feat_dim: int = 16
    feat_sep: float = 1.0
    seed: int = 0

    def build(self) -> Graph:
        return synth_sbm(
            self.n, self.classes, self.p_in, self.p_out, self.feat_dim, self.feat_sep, self.seed
        )


@dataclass
class BenchSpec:
    """What to run: experiment name, dataset source, grids, and model config."""

    experiment: str
    data_dir: Path | None = None
    recipe: SbmRecipe = field(default_factory=SbmRecipe)
    fractions: tuple[float, ...] = (0.10, 0.25)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    sizes: tuple[int, ...] = (1000, 2000, 4000)
    t_grid: tuple[float, ...] = tuple(round(0.1 * i, 1) for i in range(11))
    l_grid: tuple[int, ...] = (1, 3, 5, 10, 20)
    cfg: ModelConfig = field(default_factory=ModelConfig)
    jobs: int = 1

    def __post_init__(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"experiment must be one of {EXPERIMENTS}")
        if any(f < 0 for f in self.fractions):
            raise ValueError("fractions must be non-negative")
        if not self.seeds:
            raise ValueError("at least one seed is required")

    def resolve_graph(self) -> Graph:
        if self.data_dir is not None:
            return load_graph(self.data_dir)
        return self.recipe.build()


@dataclass
class BenchRow:
    experiment: str
    condition: str
    model: str
    seed: int
    clean_acc: float | None = None
    noisy_acc: float | None = None
    selection_frac: float | None = None
    params: int | None = None
    peak_bytes: int | None = None
    epoch_ms: float | None = None

    def to_csv_fields(self) -> list[str]:
        def fmt(v) -> str:
            if v is None:
                return ""
            if isinstance(v, float):
                return repr(v)
            return str(v)

        return [fmt(getattr(self, c)) for c in CSV_COLUMNS]


@dataclass
class BenchReport:
    rows: list[BenchRow]

    def write_csv(self, path: str | Path) -> None:
        lines = [",".join(CSV_COLUMNS)]
        lines += [",".join(r.to_csv_fields()) for r in self.rows]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def aggregates(self) -> list[dict]:
        groups: dict[tuple[str, str, str], list[BenchRow]] = {}
        for r in self.rows:
            groups.setdefault((r.experiment, r.condition, r.model), []).append(r)
        out = []
        for (exp, cond, model), rows in groups.items():
            entry = {
                "experiment": exp,
                "condition": cond,
                "model": model,
                "n_seeds": len({r.seed for r in rows}),
            }
            for col in ("clean_acc", "noisy_acc", "selection_frac"):
                vals = [getattr(r, col) for r in rows if getattr(r, col) is not None]
                if vals:
                    entry[f"{col}_mean"] = float(np.mean(vals))
                    entry[f"{col}_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
                else:
                    entry[f"{col}_mean"] = None
                    entry[f"{col}_std"] = None
            out.append(entry)
        return out

    def write_aggregate_csv(self, path: str | Path) -> None:
        cols = (
            "experiment",
            "condition",
            "model",
            "n_seeds",
            "clean_acc_mean",
            "clean_acc_std",
            "noisy_acc_mean",
            "noisy_acc_std",
            "selection_frac_mean",
            "selection_frac_std",
        )

        def fmt(v) -> str:
            if v is None:
                return ""
            if isinstance(v, float):
                return repr(v)
            return str(v)

        lines = [",".join(cols)]
        for entry in self.aggregates():
            lines.append(",".join(fmt(entry[c]) for c in cols))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def select(self, **fields) -> list[BenchRow]:
        rows = self.rows
        for key, value in fields.items():
            rows = [r for r in rows if getattr(r, key) == value]
        return rows

    def degradation(self, model: str, condition: str) -> float:
        """Seed-mean of (clean accuracy - noisy accuracy) for one condition."""
        rows = self.select(model=model, condition=condition)
        if not rows:
            raise KeyError(f"no rows for model={model!r} condition={condition!r}")
        return float(np.mean([r.clean_acc - r.noisy_acc for r in rows]))


GCN_HIDDEN_DIM = 64


@dataclass
class GcnForwardState:
    """Duck-typed ModelState stand-in for the baseline (no selective layers)."""

    layer_states: list
    layer_outputs: list
    drop_masks: list
    logits: np.ndarray
    inner: list = None  # type: ignore[assignment]


@dataclass
class GcnBaselineModel:
    """Two-layer degree-normalized convolution, the comparison foil.

    The conventional form: hidden = act(Ahat X W1^T), logits = Ahat hidden
    W2^T, trained with the same loop, loss, optimizer, and dropout placement
    as the selective model. Bound to one graph at construction (the
    normalized adjacency is fixed).
    """

    W1: Param
    W2: Param
    config: ModelConfig
    norm_adj: object
    num_nodes: int

    @classmethod
    def create(
        cls, cfg: ModelConfig, g: Graph, hidden: int = GCN_HIDDEN_DIM
    ) -> "GcnBaselineModel":
        rng = np.random.default_rng((cfg.seed, 0))
        out_dim = cfg.out_dim if cfg.out_dim is not None else g.num_classes
        W1 = Param(_glorot(rng, hidden, g.feat_dim))
        W2 = Param(_glorot(rng, out_dim, hidden))
        return cls(W1, W2, cfg, L.gcn_normalized_adjacency(g), g.num_nodes)

    @property
    def in_dim(self) -> int:
        return self.W1.value.shape[1]

    def params(self) -> list[Param]:
        return [self.W1, self.W2]

    def forward_pass(self, g: Graph, training: bool, rng):
        if g.num_nodes != self.num_nodes:
            raise ValueError("baseline model is bound to a different graph")
        act = self.config.activation
        H1, st1 = L.gcn_baseline_forward(g, g.features, self.W1, act, self.norm_adj)
        H1d, dm1 = K.dropout(H1, self.config.dropout, rng, training)
        logits, st2 = L.gcn_baseline_forward(g, H1d, self.W2, "identity", self.norm_adj)
        return logits, GcnForwardState([], [], [dm1], logits, [st1, st2])

    def backward_pass(self, g: Graph, grad_logits: np.ndarray, state: GcnForwardState) -> None:
        st1, st2 = state.inner
        grad_H1d = L.gcn_baseline_backward(g, grad_logits, self.W2, st2)
        dm1 = state.drop_masks[0]
        grad_H1 = grad_H1d if dm1 is None else grad_H1d * dm1
        L.gcn_baseline_backward(g, grad_H1, self.W1, st1)


MODEL_NAMES = ("node-select", "gcn")


def _build_model(name: str, cfg: ModelConfig, g: Graph):
    if name == "node-select":
        return init_model(cfg, g.feat_dim, g.num_classes)
    if name == "gcn":
        return GcnBaselineModel.create(cfg, g)
    raise ValueError(f"unknown model {name!r}")


def _param_total(model) -> int:
    return int(sum(p.value.size for p in model.params()))


def _train_cell(task: tuple) -> dict:
    """One (model, graph, masks, cfg) training cell; returns plain fields."""
    name, g, masks, cfg = task
    model = _build_model(name, cfg, g)
    report = train(model, g, masks)
    sel = float(np.mean(report.layer_selection)) if report.layer_selection else None
    return {
        "test_acc": report.test_acc,
        "selection_frac": sel,
        "params": _param_total(model),
        "peak_bytes": report.peak_bytes,
        "standalone": report.layer_standalone_acc,
        "epochs_run": report.epochs_run,
        "wall_time_s": report.wall_time_s,
    }


def _map_cells(tasks: list[tuple], jobs: int) -> list[dict]:
    if jobs <= 1 or len(tasks) <= 1:
        return [_train_cell(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_train_cell, tasks))


def noise_bench(spec: BenchSpec) -> BenchReport:
    """Clean vs pseudo-vertex-augmented accuracy for both models.

    Per seed: one clean run per model (splits from the seed), then one run
    per noise fraction on the augmented graph. A fraction of exactly 0 is a
    no-op: its noisy accuracy is the clean accuracy. Clean and noisy cells
    are seed-paired; pseudo vertices are never scored.
    """
    g = spec.resolve_graph()
    tasks: list[tuple] = []
    keys: list[tuple] = []
    for seed in spec.seeds:
        masks = make_splits(g, (0.2, 0.2, 0.6), seed)
        noisy_data = {
            f: augment_with_noise(g, masks, f, seed) for f in spec.fractions if f > 0
        }
        for name in MODEL_NAMES:
            cfg = replace(spec.cfg, seed=seed)
            tasks.append((name, g, masks, cfg))
            keys.append((seed, name, "clean"))
            for f in spec.fractions:
                if f == 0:
                    continue
                g2, m2 = noisy_data[f]
                tasks.append((name, g2, m2, cfg))
                keys.append((seed, name, f))

    results = dict(zip(keys, _map_cells(tasks, spec.jobs)))
    rows: list[BenchRow] = []
    for seed in spec.seeds:
        for name in MODEL_NAMES:
            clean = results[(seed, name, "clean")]
            rows.append(
                BenchRow(
                    "noise", "clean", name, seed,
                    clean_acc=clean["test_acc"],
                    selection_frac=clean["selection_frac"],
                    params=clean["params"],
                    peak_bytes=clean["peak_bytes"],
                )
            )
            for f in spec.fractions:
                if f == 0:
                    noisy = clean
                else:
                    noisy = results[(seed, name, f)]
                rows.append(
                    BenchRow(
                        "noise", f"noise+{f:g}", name, seed,
                        clean_acc=clean["test_acc"],
                        noisy_acc=noisy["test_acc"],
                        selection_frac=noisy["selection_frac"],
                        params=noisy["params"],
                        peak_bytes=noisy["peak_bytes"],
                    )
                )
    return BenchReport(rows)


def scale_bench(sizes: tuple[int, ...], cfg: ModelConfig, classes: int = 4,
                feat_dim: int = 16, feat_sep: float = 1.0, epochs: int = 5) -> BenchReport:
    """Parameter count, matrix bytes, and per-epoch wall time vs graph size.

    Graphs keep mean degree roughly constant (p_in = 20/n, p_out = 2/n), so
    edges grow linearly with n. Timing rows are the one place wall-clock
    numbers enter a report.
    """
    if list(sizes) != sorted(sizes):
        raise ValueError("sizes must be increasing")
    rows: list[BenchRow] = []
    for n in sizes:
        recipe = SbmRecipe(
            n=n, classes=classes, p_in=min(1.0, 20.0 / n), p_out=min(1.0, 2.0 / n),
            feat_dim=feat_dim, feat_sep=feat_sep, seed=0,
        )
        g = recipe.build()
        masks = make_splits(g, (0.2, 0.2, 0.6), 0)
        for name in MODEL_NAMES:
            run_cfg = replace(cfg, seed=0, epochs=epochs, patience=epochs)
            model = _build_model(name, run_cfg, g)
            t0 = time.perf_counter()
            report = train(model, g, masks)
            elapsed = time.perf_counter() - t0
            rows.append(
                BenchRow(
                    "scale", f"n={n}", name, 0,
                    clean_acc=report.test_acc,
                    selection_frac=(
                        float(np.mean(report.layer_selection))
                        if report.layer_selection else None
                    ),
                    params=_param_total(model),
                    peak_bytes=report.peak_bytes,
                    epoch_ms=1000.0 * elapsed / report.epochs_run,
                )
            )
    return BenchReport(rows)


def selection_fraction(m: Model, g: Graph) -> tuple[float, list[float]]:
    """Mean and per-layer fraction of nodes whose score clears the threshold."""
    _, state = _model_forward_full(m, g, training=False, rng=None)
    per_layer = [float(st.selection_frac) for st in state.layer_states]
    return float(np.mean(per_layer)), per_layer


def sweep_threshold(
    t_values: tuple[float, ...], cfg: ModelConfig, g: Graph, seeds: tuple[int, ...],
    jobs: int = 1,
) -> BenchReport:
    """Accuracy/selection vs threshold, plus a fixed-checkpoint audit.

    Trains one model per (T, seed). The audit rows re-evaluate a single
    trained checkpoint (base config, first seed) across the whole grid with
    frozen weights, where the selected set can only shrink as T rises.
    """
    if any(t < 0 or t > 1 for t in t_values):
        raise ValueError("thresholds must lie in [0, 1]")
    tasks, keys = [], []
    for t in t_values:
        for seed in seeds:
            masks = make_splits(g, (0.2, 0.2, 0.6), seed)
            tasks.append(("node-select", g, masks, replace(cfg, threshold=t, seed=seed)))
            keys.append((t, seed))
    results = dict(zip(keys, _map_cells(tasks, jobs)))
    rows = [
        BenchRow(
            "sweep_T", f"T={t:g}", "node-select", seed,
            clean_acc=results[(t, seed)]["test_acc"],
            selection_frac=results[(t, seed)]["selection_frac"],
        )
        for t in t_values
        for seed in seeds
    ]

    audit_seed = seeds[0]
    audit_cfg = replace(cfg, seed=audit_seed)
    model = init_model(audit_cfg, g.feat_dim, g.num_classes)
    train(model, g, make_splits(g, (0.2, 0.2, 0.6), audit_seed))
    for t in t_values:
        frac, _ = selection_fraction(with_threshold(model, float(t)), g)
        rows.append(
            BenchRow(
                "sweep_T", f"T={t:g}", "node-select-audit", audit_seed,
                selection_frac=frac,
            )
        )
    return BenchReport(rows)


def sweep_layers(
    l_values: tuple[int, ...], cfg: ModelConfig, g: Graph, seeds: tuple[int, ...],
    jobs: int = 1,
) -> BenchReport:
    """Model accuracy, per-layer standalone mean accuracy, and selection size
    as the layer count grows."""
    if any(l < 1 for l in l_values):
        raise ValueError("layer counts must be >= 1")
    tasks, keys = [], []
    for l in l_values:
        for seed in seeds:
            masks = make_splits(g, (0.2, 0.2, 0.6), seed)
            tasks.append(("node-select", g, masks, replace(cfg, num_layers=l, seed=seed)))
            keys.append((l, seed))
    results = dict(zip(keys, _map_cells(tasks, jobs)))
    rows: list[BenchRow] = []
    for l in l_values:
        for seed in seeds:
            res = results[(l, seed)]
            rows.append(
                BenchRow(
                    "sweep_L", f"L={l}", "node-select", seed,
                    clean_acc=res["test_acc"],
                    selection_frac=res["selection_frac"],
                )
            )
            rows.append(
                BenchRow(
                    "sweep_L", f"L={l}", "node-select-layer-mean", seed,
                    clean_acc=float(np.mean(res["standalone"])),
                )
            )
    return BenchReport(rows)


def stacking_compare(
    cfg: ModelConfig, g: Graph, seeds: tuple[int, ...], jobs: int = 1
) -> BenchReport:
    """Matched parallel vs sequential models per seed (needs >= 5 seeds)."""
    if len(seeds) < 5:
        raise ValueError("stacking comparison needs at least 5 seeds")
    tasks, keys = [], []
    for mode in ("parallel", "sequential"):
        for seed in seeds:
            masks = make_splits(g, (0.2, 0.2, 0.6), seed)
            tasks.append(("node-select", g, masks, replace(cfg, stacking=mode, seed=seed)))
            keys.append((mode, seed))
    results = dict(zip(keys, _map_cells(tasks, jobs)))
    rows = [
        BenchRow(
            "stacking", mode, "node-select", seed,
            clean_acc=results[(mode, seed)]["test_acc"],
            selection_frac=results[(mode, seed)]["selection_frac"],
        )
        for mode in ("parallel", "sequential")
        for seed in seeds
    ]
    return BenchReport(rows)


@dataclass
class LayerDiagnostics:
    """Per-layer views of a trained model (figure-analog data)."""

    standalone_acc: list[float]
    selection_frac: list[float]
    p_hat_hist: np.ndarray  # (L, bins) counts
    hist_edges: np.ndarray  # (bins + 1,)
    embed_similarity: float
    per_node_similarity: np.ndarray
    p_hat_trace: dict[int, np.ndarray]


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 and nb == 0.0:
        return 1.0
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def layer_diagnostics(
    m: Model, g: Graph, masks: SplitMasks, report: TrainReport | None = None, bins: int = 20
) -> LayerDiagnostics:
    """Standalone accuracy, selection fraction, and score histogram per layer,
    plus the mean pairwise cosine similarity of the per-node layer embeddings
    (nan for single-layer models). Sensitivity traces come from the training
    report when one is supplied."""
    _, state = _model_forward_full(m, g, training=False, rng=None)
    test_mask = masks.test & ~masks.pseudo
    edges = np.linspace(0.0, 1.0, bins + 1)
    hists = []
    selection = []
    standalone = []
    for st, H in zip(state.layer_states, state.layer_outputs):
        hists.append(np.histogram(st.p_hat, bins=edges)[0])
        selection.append(float(st.selection_frac))
        if H.shape[1] == g.num_classes and np.any(test_mask):
            standalone.append(_accuracy(H, g.labels, test_mask))
        else:
            standalone.append(float("nan"))

    outs = state.layer_outputs
    n_layers = len(outs)
    if n_layers >= 2:
        per_node = np.empty(g.num_nodes)
        for i in range(g.num_nodes):
            sims = [
                _cosine(outs[a][i], outs[b][i])
                for a in range(n_layers)
                for b in range(a + 1, n_layers)
            ]
            per_node[i] = float(np.mean(sims))
        similarity = float(np.mean(per_node))
    else:
        per_node = np.full(g.num_nodes, np.nan)
        similarity = float("nan")

    return LayerDiagnostics(
        standalone_acc=standalone,
        selection_frac=selection,
        p_hat_hist=np.stack(hists),
        hist_edges=edges,
        embed_similarity=similarity,
        per_node_similarity=per_node,
        p_hat_trace=dict(report.p_hat_trace) if report is not None else {},
    )


def write_diagnostics_csvs(diag: LayerDiagnostics, out_dir: str | Path) -> list[Path]:
    """One CSV per figure analog; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    lines = ["layer,standalone_acc,selection_frac"]
    for i, (acc, sel) in enumerate(zip(diag.standalone_acc, diag.selection_frac)):
        lines.append(f"{i},{acc!r},{sel!r}")
    p = out_dir / "diag_layers.csv"
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(p)

    lines = ["layer,bin_lo,bin_hi,count"]
    for i, hist in enumerate(diag.p_hat_hist):
        for b, count in enumerate(hist):
            lines.append(
                f"{i},{diag.hist_edges[b]!r},{diag.hist_edges[b + 1]!r},{int(count)}"
            )
    p = out_dir / "diag_phat_hist.csv"
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(p)

    lines = ["node,mean_pairwise_cosine"]
    for i, v in enumerate(diag.per_node_similarity):
        lines.append(f"{i},{float(v)!r}")
    lines.append(f"all,{diag.embed_similarity!r}")
    p = out_dir / "diag_similarity.csv"
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(p)

    if diag.p_hat_trace:
        lines = ["node,epoch,layer,p_hat"]
        for node, trace in sorted(diag.p_hat_trace.items()):
            for epoch in range(trace.shape[0]):
                for layer in range(trace.shape[1]):
                    lines.append(f"{node},{epoch},{layer},{trace[epoch, layer]!r}")
        p = out_dir / "diag_phat_trace.csv"
        p.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(p)
    return written
