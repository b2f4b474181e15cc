"""Metrics, sample-level cross-validation and ablation runners.

Protocol, per fold:

* the test samples' first layer is the known layer; ``known_ratio`` of
  each test sample's spots (capped at the layer size) are drawn from it
  with a per-sample seeded permutation, so larger ratios extend smaller
  ones;
* scoring covers the spots outside the known layer, which stay unknown at
  every ratio and never enter a training loss;
* learned methods train on the training samples plus the known-layer rows
  of the validation and test samples; the fusion weight is picked on the
  held-out validation samples.
"""

from __future__ import annotations

import json
import math
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConsistencyError, ST3DError, UsageError
from .graph import build_2d_graph, build_3d_graph
from .imputation import (
    UNREACHED, PropagationConfig, overlap_impute, propagate_labels, similarity_impute,
    write_provenance,
)
from .msagnet import (
    ModelConfig, TrainConfig, make_train_item, predict_expression, predict_with_imputation, train,
)
from .records import ExpressionMatrix, SampleStack

METHODS = ("asign3d", "asign2d", "overlap", "similarity", "propagation_only")
LEARNED = ("asign3d", "asign2d")
REPORT_VERSION = 1
ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(11))


# ---------------------------------------------------------------------------
# metrics


def _check_shapes(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise UsageError(f"prediction shape {pred.shape} differs from truth shape {truth.shape}")
    return pred, truth


def metric_mse(pred, truth) -> float:
    pred, truth = _check_shapes(pred, truth)
    return float(np.mean((pred - truth) ** 2))


def metric_mae(pred, truth) -> float:
    pred, truth = _check_shapes(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def metric_pcc(pred, truth, diagnostics: Optional[dict] = None) -> float:
    """Mean over genes (columns) of the Pearson correlation across spots.

    Columns where either side is constant are skipped; their count goes
    to ``diagnostics["constant_genes"]``. Returns NaN when every column is
    skipped.
    """
    pred, truth = _check_shapes(pred, truth)
    if pred.ndim != 2:
        raise UsageError(f"metric_pcc expects a 2-D matrix, got shape {pred.shape}")
    a = pred - pred.mean(axis=0)
    b = truth - truth.mean(axis=0)
    saa, sbb = (a * a).sum(axis=0), (b * b).sum(axis=0)
    ok = (saa > 0) & (sbb > 0)
    if diagnostics is not None:
        diagnostics["constant_genes"] = int((~ok).sum())
    if not ok.any():
        return float("nan")
    r = (a * b).sum(axis=0)[ok] / np.sqrt(saa[ok] * sbb[ok])
    return float(r.mean())


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldSpec:
    fold_id: int
    train_ids: tuple
    test_ids: tuple
    known_layer: dict
    known_ratio: float

    def __post_init__(self):
        if set(self.train_ids) & set(self.test_ids):
            raise ConsistencyError(f"fold {self.fold_id}: train and test samples overlap")
        if not 0.0 <= self.known_ratio <= 1.0:
            raise UsageError(f"known_ratio must lie in [0, 1], got {self.known_ratio}")


def make_folds(samples, n_folds: int, seed: int = 0, known_ratio: float = 0.2,
               known_layer: int = 0) -> list:
    """Seeded partition of samples into ``n_folds`` test sets.

    ``samples`` holds stacks or sample ids. ``known_layer`` is a position
    in each stack's sorted layer list (0 = first layer); with bare ids the
    position itself is recorded.
    """
    samples = list(samples)
    ids = [s.sample_id if isinstance(s, SampleStack) else str(s) for s in samples]
    if len(set(ids)) != len(ids):
        raise UsageError("sample ids must be unique")
    if n_folds < 1:
        raise UsageError(f"n_folds must be >= 1, got {n_folds}")
    if n_folds > len(ids):
        raise UsageError(f"n_folds {n_folds} exceeds the number of samples {len(ids)}")
    known = {}
    for s, sid in zip(samples, ids):
        if isinstance(s, SampleStack):
            if not -s.n_layers <= known_layer < s.n_layers:
                raise UsageError(f"sample {sid!r} has no layer at position {known_layer}")
            known[sid] = s.layers[known_layer].layer_index
        else:
            known[sid] = known_layer
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = []
    for f, part in enumerate(np.array_split(order, n_folds)):
        test = tuple(ids[i] for i in sorted(part))
        train_ids = tuple(i for i in ids if i not in test)
        folds.append(FoldSpec(f, train_ids, test, {t: known[t] for t in test}, known_ratio))
    return folds


# ---------------------------------------------------------------------------
# configuration and report


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of an evaluation run; field names double as config-file keys."""

    n_folds: int = 4
    known_ratio: float = 0.2
    known_layer: int = 0
    seed: int = 0
    k_intra: int = 8
    k_cross: int = 12
    prop_iterations: int = 10
    similarity_m: int = 20
    validation_fraction: float = 0.2
    hidden_dim: int = 16
    gat_layers: int = 3
    gat_heads: int = 2
    transformer_heads: int = 2
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    final_lr_ratio: float = 0.01
    batch_size: int = 2
    steps: int = 80

    def __post_init__(self):
        if not 0.0 <= self.validation_fraction < 1.0:
            raise UsageError(f"validation_fraction must lie in [0, 1), got {self.validation_fraction}")
        if not 0.0 <= self.known_ratio <= 1.0:
            raise UsageError(f"known_ratio must lie in [0, 1], got {self.known_ratio}")

    def model_config(self, feature_dim: int, gene_count: int) -> ModelConfig:
        return ModelConfig(feature_dim=feature_dim, gene_count=gene_count, hidden_dim=self.hidden_dim,
                           gat_layers=self.gat_layers, gat_heads=self.gat_heads,
                           transformer_heads=self.transformer_heads)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr0=self.lr0, momentum=self.momentum, weight_decay=self.weight_decay,
                           final_lr_ratio=self.final_lr_ratio, batch_size=self.batch_size,
                           steps=self.steps, seed=self.seed)


def config_keys() -> tuple:
    return tuple(f.name for f in fields(ExperimentConfig))


@dataclass
class FoldReport:
    fold_id: int
    train_ids: tuple
    validation_ids: tuple
    test_ids: tuple
    known_layer: dict
    alpha: Optional[float]
    mse: float
    mae: float
    pcc: float
    n_eval_spots: int
    constant_genes: int
    unreached_spots: int


@dataclass
class RunReport:
    method: str
    known_ratio: float
    config: dict
    folds: list
    seconds: float = field(default=0.0, compare=False)

    def aggregate(self) -> dict:
        return {k: float(np.mean([getattr(f, k) for f in self.folds])) for k in ("mse", "mae", "pcc")}

    def to_dict(self) -> dict:
        # wall-clock stays out so identical runs give identical bytes
        return {
            "format_version": REPORT_VERSION,
            "method": self.method,
            "known_ratio": self.known_ratio,
            "pcc_axis": "gene",
            "config": self.config,
            "folds": [_clean(asdict(f)) for f in self.folds],
            "aggregate": _clean(self.aggregate()),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def write(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "report.json"
        path.write_text(self.to_json())
        (directory / "timing.json").write_text(json.dumps({"seconds": self.seconds}) + "\n")
        return path


def _clean(obj):
    if isinstance(obj, float):
        return None if math.isnan(obj) else obj
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# fold execution


def known_mask_for(stack: SampleStack, ratio: float, known_layer_index: int, seed: int) -> np.ndarray:
    """Seeded draw of ``round(ratio * n_spots)`` known spots from one layer.

    The draw order depends only on ``seed`` and the sample id, so the known
    set at a larger ratio contains the one at a smaller ratio.
    """
    rows = stack.layer_rows(known_layer_index)
    n_known = min(int(round(ratio * stack.n_spots)), len(rows))
    rng = np.random.default_rng([seed, zlib.crc32(stack.sample_id.encode())])
    mask = np.zeros(stack.n_spots, dtype=bool)
    mask[rows[rng.permutation(len(rows))[:n_known]]] = True
    return mask


def _eval_rows(stack: SampleStack, known_layer_index: int) -> np.ndarray:
    return np.flatnonzero(stack.layer_of != known_layer_index)


def _graph(stack: SampleStack, method: str, cfg: ExperimentConfig):
    if method == "asign2d":
        return build_2d_graph(stack, cfg.k_cross)
    return build_3d_graph(stack, cfg.k_intra, cfg.k_cross)


@dataclass
class _SampleOutcome:
    sample_id: str
    predictions: ExpressionMatrix
    provenance: tuple
    eval_rows: np.ndarray


@dataclass
class FoldOutcome:
    """In-memory fold result; ``loss_spot_ids`` backs the leakage check."""

    reports: dict
    samples: dict
    loss_spot_ids: frozenset = frozenset()
    eval_spot_ids: frozenset = frozenset()


def _score(outcomes, truth_of) -> dict:
    vals = {"mse": [], "mae": [], "pcc": []}
    n_eval = const = unreached = 0
    for o in outcomes:
        r = o.eval_rows
        p, t = o.predictions.values[r], truth_of[o.sample_id][r]
        diag = {}
        vals["pcc"].append(metric_pcc(p, t, diag))
        vals["mse"].append(metric_mse(p, t))
        vals["mae"].append(metric_mae(p, t))
        n_eval += len(r)
        const += diag["constant_genes"]
        unreached += sum(o.provenance[i] == UNREACHED for i in r)
    out = {k: float(np.nanmean(v)) if not all(math.isnan(x) for x in v) else float("nan")
           for k, v in vals.items()}
    out.update(n_eval_spots=n_eval, constant_genes=const, unreached_spots=unreached)
    return out


def _baseline(stack, method, known, cfg, graph=None) -> tuple:
    if not known.any():
        raise UsageError(f"method {method!r} needs known_ratio > 0")
    labels = stack.expression.with_values(np.where(known[:, None], stack.expression.values, 0.0))
    if method == "overlap":
        res = overlap_impute(stack, labels, known)
    elif method == "similarity":
        res = similarity_impute(stack.features, labels, known, cfg.similarity_m)
    else:
        res = propagate_labels(graph, labels, known, PropagationConfig(cfg.prop_iterations))
    return res.predictions, res.provenance


def _split_validation(train_ids, cfg: ExperimentConfig, fold_id: int):
    n_val = int(math.ceil(cfg.validation_fraction * len(train_ids))) if cfg.validation_fraction > 0 else 0
    if len(train_ids) - n_val < 1:
        n_val = 0
    order = np.random.default_rng([cfg.seed, fold_id, 1]).permutation(len(train_ids))
    val = tuple(sorted(train_ids[i] for i in order[:n_val]))
    return tuple(t for t in train_ids if t not in val), val


def run_fold(fold: FoldSpec, stacks: dict, method: str, ratios, cfg: ExperimentConfig) -> FoldOutcome:
    """Run one fold for every ratio in ``ratios``; learned methods train once."""
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    try:
        return _run_fold(fold, stacks, method, tuple(ratios), cfg)
    except ST3DError as exc:
        raise type(exc)(f"fold {fold.fold_id}: {exc}") from exc


def _run_fold(fold, stacks, method, ratios, cfg) -> FoldOutcome:
    test = [stacks[t] for t in fold.test_ids]
    known_layer = dict(fold.known_layer)
    truth_of = {s.sample_id: s.expression.values for s in test}
    graphs = {s.sample_id: _graph(s, method, cfg) for s in test}
    eval_ids = frozenset(s.spot_ids[i] for s in test for i in _eval_rows(s, known_layer[s.sample_id]))

    reports, samples = {}, {}
    loss_ids: set = set()
    if method in LEARNED:
        train_ids, val_ids = _split_validation(fold.train_ids, cfg, fold.fold_id)
        val = [stacks[v] for v in val_ids]
        for v in val:
            known_layer[v.sample_id] = v.layers[cfg.known_layer].layer_index
            graphs[v.sample_id] = _graph(v, method, cfg)
            truth_of[v.sample_id] = v.expression.values
        items = []
        for tid in train_ids:
            s = stacks[tid]
            items.append(make_train_item(s, _graph(s, method, cfg)))
        for s in val + test:
            items.append(make_train_item(s, graphs[s.sample_id], s.layer_rows(known_layer[s.sample_id])))
        first = stacks[train_ids[0]] if train_ids else test[0]
        model_cfg = cfg.model_config(first.features.cols, first.expression.cols)
        result = train(items, model_cfg, cfg.train_config())
        loss_ids = set(result.loss_spot_ids)
        if loss_ids & eval_ids:
            raise ConsistencyError(f"fold {fold.fold_id}: unknown test spots reached the training loss")
        model_pred = {s.sample_id: predict_expression(result.model, s, graphs[s.sample_id]) for s in val + test}

        for ratio in ratios:
            masks = {s.sample_id: known_mask_for(s, ratio, known_layer[s.sample_id], cfg.seed)
                     for s in val + test}
            prop = PropagationConfig(cfg.prop_iterations)

            def fused(s, a):
                res = predict_with_imputation(s, graphs[s.sample_id], result.model, masks[s.sample_id], a,
                                              prop, model_pred[s.sample_id])
                return _SampleOutcome(s.sample_id, res.predictions, res.provenance,
                                      _eval_rows(s, known_layer[s.sample_id]))

            alpha = 1.0
            if ratio > 0 and val:
                best = -np.inf
                for a in ALPHA_GRID:
                    score = _score([fused(v, a) for v in val], truth_of)["pcc"]
                    if score > best + 1e-12:
                        best, alpha = score, a
            elif ratio > 0:
                alpha = 0.5
            outs = [fused(s, alpha) for s in test]
            sc = _score(outs, truth_of)
            reports[ratio] = FoldReport(fold.fold_id, tuple(train_ids), val_ids, fold.test_ids,
                                        {t: known_layer[t] for t in fold.test_ids}, alpha,
                                        sc["mse"], sc["mae"], sc["pcc"], sc["n_eval_spots"],
                                        sc["constant_genes"], sc["unreached_spots"])
            samples[ratio] = outs
    else:
        for ratio in ratios:
            outs = []
            for s in test:
                known = known_mask_for(s, ratio, known_layer[s.sample_id], cfg.seed)
                pred, prov = _baseline(s, method, known, cfg, graphs[s.sample_id])
                outs.append(_SampleOutcome(s.sample_id, pred, prov, _eval_rows(s, known_layer[s.sample_id])))
            sc = _score(outs, truth_of)
            reports[ratio] = FoldReport(fold.fold_id, tuple(fold.train_ids), (), fold.test_ids,
                                        dict(fold.known_layer), None, sc["mse"], sc["mae"], sc["pcc"],
                                        sc["n_eval_spots"], sc["constant_genes"], sc["unreached_spots"])
            samples[ratio] = outs
    return FoldOutcome(reports, samples, frozenset(loss_ids), eval_ids)


def _fold_job(args):
    return run_fold(*args)


def run_sweep(stacks, method: str, ratios, cfg: ExperimentConfig = ExperimentConfig(), jobs: int = 1,
              outdir=None, keep_outcomes: Optional[list] = None) -> dict:
    """One :class:`RunReport` per ratio, sharing trained models across ratios."""
    stacks = list(stacks)
    ratios = tuple(float(r) for r in ratios)
    if not ratios:
        raise UsageError("at least one known ratio is required")
    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise UsageError(f"known ratio must lie in [0, 1], got {r}")
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    if method not in LEARNED and 0.0 in ratios:
        raise UsageError(f"method {method!r} needs known_ratio > 0")
    t0 = time.perf_counter()
    by_id = {s.sample_id: s for s in stacks}
    folds = make_folds(stacks, cfg.n_folds, cfg.seed, ratios[0], cfg.known_layer)
    args = [(f, by_id, method, ratios, cfg) for f in folds]
    if jobs > 1 and len(folds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_fold_job, args))
    else:
        outcomes = [_fold_job(a) for a in args]
    if keep_outcomes is not None:
        keep_outcomes.extend(outcomes)
    elapsed = time.perf_counter() - t0
    snapshot = asdict(cfg)
    reports = {}
    for r in ratios:
        snap = dict(snapshot, known_ratio=r)
        reports[r] = RunReport(method, r, snap, [o.reports[r] for o in outcomes], elapsed)
    if outdir is not None:
        write_sample_predictions(outcomes, ratios, outdir)
    return reports


def run_experiment(stacks, method: str, cfg: ExperimentConfig = ExperimentConfig(), jobs: int = 1,
                   outdir=None) -> RunReport:
    """Cross-validated evaluation of one method at ``cfg.known_ratio``."""
    report = run_sweep(stacks, method, (cfg.known_ratio,), cfg, jobs, outdir)[cfg.known_ratio]
    if outdir is not None:
        report.write(outdir)
    return report


def write_sample_predictions(outcomes, ratios, outdir) -> None:
    from .data.io import write_expression

    outdir = Path(outdir)
    for ratio in ratios:
        sub = outdir / "predictions" if len(ratios) == 1 else outdir / f"ratio_{ratio:g}" / "predictions"
        sub.mkdir(parents=True, exist_ok=True)
        for o in outcomes:
            for s in o.samples[ratio]:
                write_expression(s.predictions, sub / f"{s.sample_id}.expression.tsv", s.predictions.spot_ids)
                _write_prov(s, sub / f"{s.sample_id}.provenance.tsv")


def _write_prov(outcome: _SampleOutcome, path) -> None:
    from .imputation import ImputationResult
    write_provenance(ImputationResult(outcome.predictions, outcome.provenance), outcome.predictions.spot_ids, path)


def sweep_table(reports: dict) -> list:
    """Rows ``(known_ratio, mse, mae, pcc)`` of a sweep, ordered by ratio."""
    rows = []
    for r in sorted(reports):
        agg = reports[r].aggregate()
        rows.append((r, agg["mse"], agg["mae"], agg["pcc"]))
    return rows


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    unknown = set(kw) - set(config_keys())
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    return replace(cfg, **kw)
