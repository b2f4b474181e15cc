"""``st3d`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or format error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .errors import DataError, ST3DError, UsageError

log = logging.getLogger("st3d")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config files


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Keys are checked
    against the experiment configuration and values converted to its types."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (t.strip() for t in line.split("=", 1))
        out[key] = _convert(key, value, f"{path}:{lineno}")
    return out


def _convert(key, value, where):
    from .evaluation import ExperimentConfig

    types = {f.name: f.type for f in fields(ExperimentConfig)}
    if key not in types:
        raise UsageError(f"{where}: unknown config key {key!r}")
    kind = {"int": int, "float": float}[types[key]]
    try:
        return kind(value)
    except ValueError:
        raise UsageError(f"{where}: {key} expects {types[key]}, got {value!r}") from None


def build_config(args):
    """Defaults, then the config file, then ``--set`` pairs, then dedicated flags."""
    from .evaluation import ExperimentConfig

    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for pair in getattr(args, "set", None) or ():
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        k, v = (t.strip() for t in pair.split("=", 1))
        values[k] = _convert(k, v, "--set")
    for flag, key in (("seed", "seed"), ("known_ratio", "known_ratio"), ("folds", "n_folds")):
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    return ExperimentConfig(**values)


# ---------------------------------------------------------------------------
# helpers


def _load(manifest):
    from .data.io import load_dataset
    return load_dataset(manifest)


def _outdir(args) -> Path:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _graph_for(stack, mode, cfg, graph_dir=None):
    from .graph import build_2d_graph, build_3d_graph, read_edges

    if graph_dir is not None:
        path = Path(graph_dir) / f"{stack.sample_id}.edges.tsv"
        if not path.is_file():
            raise DataError(f"edge file not found: {path}")
        return read_edges(path, stack.spot_ids, cfg.k_intra, cfg.k_cross)
    if mode == "2d":
        return build_2d_graph(stack, cfg.k_cross)
    return build_3d_graph(stack, cfg.k_intra, cfg.k_cross)


def _known(stack, args, cfg):
    from .evaluation import known_mask_for

    if args.known_ratio is None:
        return stack.known_mask
    return known_mask_for(stack, args.known_ratio, stack.layers[cfg.known_layer].layer_index, cfg.seed)


def _write_tsv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    from .data.io import save_dataset
    from .data.synthetic import SyntheticSpec, generate_batch

    spec = SyntheticSpec(layers=args.layers, spots_per_layer=args.spots, genes=args.genes, rho=args.rho,
                         jitter=args.jitter, length_scale=args.length_scale, feature_dim=args.feature_dim,
                         feature_noise=args.feature_noise)
    seed = 0 if args.seed is None else args.seed
    path = save_dataset(generate_batch(args.samples, spec, seed), _outdir(args))
    print(path)


def cmd_validate(args):
    from .records import validate_stack

    bad = 0
    for st in _load(args.manifest):
        problems = validate_stack(st)
        for v in problems:
            print(f"{st.sample_id}\t{v.kind}\t{v.message}")
        bad += len(problems)
        if not problems:
            print(f"{st.sample_id}\tok")
    if bad:
        raise DataError(f"{args.manifest}: {bad} violation(s)")


def cmd_build_graph(args):
    from .graph import write_edges

    cfg = build_config(args)
    stacks = _load(args.manifest)
    out = _outdir(args)
    for st in stacks:
        g = _graph_for(st, args.mode, cfg)
        write_edges(g, st.spot_ids, out / f"{st.sample_id}.edges.tsv")
        log.info("%s: %d edges", st.sample_id, g.n_edges)


def cmd_impute(args):
    from .data.io import write_expression
    from .imputation import PropagationConfig, overlap_impute, propagate_labels, similarity_impute, write_provenance

    cfg = build_config(args)
    out = _outdir(args)
    for st in _load(args.manifest):
        known = _known(st, args, cfg)
        labels = st.expression.with_values(np.where(known[:, None], st.expression.values, 0.0))
        if args.method == "propagation":
            g = _graph_for(st, args.mode, cfg, args.graphs)
            res = propagate_labels(g, labels, known, PropagationConfig(cfg.prop_iterations))
        elif args.method == "overlap":
            res = overlap_impute(st, labels, known)
        else:
            res = similarity_impute(st.features, labels, known, cfg.similarity_m)
        write_expression(res.predictions, out / f"{st.sample_id}.expression.tsv", st.spot_ids)
        write_provenance(res, st.spot_ids, out / f"{st.sample_id}.provenance.tsv")


def cmd_train(args):
    from .msagnet import make_train_item, save_model, train, write_trace

    cfg = build_config(args)
    stacks = _load(args.manifest)
    items = [make_train_item(st, _graph_for(st, args.mode, cfg, args.graphs)) for st in stacks]
    model_cfg = cfg.model_config(stacks[0].features.cols, stacks[0].expression.cols)
    result = train(items, model_cfg, cfg.train_config(),
                   log=lambda row: log.info("step %d L=%.6g", row["step"], row["L"]))
    out = _outdir(args)
    save_model(result.model, out)
    write_trace(result.trace, out / "trace.csv")


def cmd_predict(args):
    from .data.io import write_expression
    from .imputation import PropagationConfig, write_provenance
    from .msagnet import load_model, predict_with_imputation

    cfg = build_config(args)
    model = load_model(args.model)
    out = _outdir(args)
    for st in _load(args.manifest):
        g = _graph_for(st, args.mode, cfg, args.graphs)
        res = predict_with_imputation(st, g, model, _known(st, args, cfg), args.alpha,
                                      PropagationConfig(cfg.prop_iterations))
        write_expression(res.predictions, out / f"{st.sample_id}.expression.tsv", st.spot_ids)
        write_provenance(res, st.spot_ids, out / f"{st.sample_id}.provenance.tsv")


def cmd_evaluate(args):
    from .evaluation import run_experiment
    from .plotting import plot_fold_metrics

    cfg = build_config(args)
    out = _outdir(args)
    report = run_experiment(_load(args.manifest), args.method, cfg, args.jobs, out)
    _write_tsv(out / "folds.tsv", ("fold_id", "alpha", "mse", "mae", "pcc", "n_eval_spots"),
               [(f.fold_id, f.alpha, f.mse, f.mae, f.pcc, f.n_eval_spots) for f in report.folds])
    plot_fold_metrics(report, out / "folds.png")
    agg = report.aggregate()
    print(f"{args.method}\tmse={agg['mse']:.6g}\tmae={agg['mae']:.6g}\tpcc={agg['pcc']:.6g}")


def cmd_ablate(args):
    from .evaluation import run_sweep, sweep_table
    from .plotting import plot_sweep

    cfg = build_config(args)
    try:
        ratios = tuple(float(r) for r in args.ratios.split(","))
    except ValueError:
        raise UsageError(f"--ratios expects comma-separated numbers, got {args.ratios!r}") from None
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    stacks = _load(args.manifest)
    out = _outdir(args)
    series, rows = {}, []
    for m in methods:
        reports = run_sweep(stacks, m, ratios, cfg, args.jobs)
        series[m] = reports
        for r, rep in reports.items():
            (out / f"report_{m}_{r:g}.json").write_text(rep.to_json())
        rows += [(m,) + row for row in sweep_table(reports)]
    _write_tsv(out / "sweep.tsv", ("method", "known_ratio", "mse", "mae", "pcc"), rows)
    plot_sweep(series, out / "sweep.png")
    for row in rows:
        print("\t".join(str(v) for v in row))


def cmd_heatmap(args):
    from .data.io import read_expression
    from .plotting import export_heatmap

    stacks = {s.sample_id: s for s in _load(args.manifest)}
    if args.sample not in stacks:
        raise UsageError(f"--sample {args.sample!r} not in manifest")
    st = stacks[args.sample]
    expr = read_expression(args.predictions) if args.predictions else st.expression
    if args.gene not in expr.gene_names:
        raise UsageError(f"--gene {args.gene!r} not among the expression columns")
    if expr.spot_ids is not None and list(expr.spot_ids) != list(st.spot_ids):
        pos = {s: i for i, s in enumerate(expr.spot_ids)}
        missing = [s for s in st.spot_ids if s not in pos]
        if missing:
            raise DataError(f"{args.predictions}: no row for spot {missing[0]!r}")
        expr = expr.take_rows([pos[s] for s in st.spot_ids])
    values = expr.values[:, expr.gene_names.index(args.gene)]
    suffix = "" if args.layer is None else f"_L{args.layer}"
    path = export_heatmap(st, values, args.gene, _outdir(args) / f"{st.sample_id}_{args.gene}{suffix}.svg",
                          args.layer)
    print(path)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    from .evaluation import METHODS

    p = _Parser(prog="st3d", description="3D spatial transcriptomics imputation and evaluation.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def add(name, fn, help_, manifest=True, output=True):
        sp = sub.add_parser(name, help=help_, description=help_)
        if manifest:
            sp.add_argument("manifest", help="dataset manifest.json")
        if output:
            sp.add_argument("-o", "--output", required=True, help="output directory")
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int, help="seed for every random draw")
        sp.set_defaults(func=fn)
        return sp

    sp = add("synth", cmd_synth, "generate a seeded synthetic dataset", manifest=False)
    sp.add_argument("--samples", type=int, default=1)
    sp.add_argument("--layers", type=int, default=3)
    sp.add_argument("--spots", type=int, default=200, help="spots per layer")
    sp.add_argument("--genes", type=int, default=20)
    sp.add_argument("--rho", type=float, default=0.8, help="cross-layer correlation in [0, 1]")
    sp.add_argument("--jitter", type=float, default=20.0, help="registration error scale")
    sp.add_argument("--length-scale", type=float, default=500.0)
    sp.add_argument("--feature-dim", type=int, default=16)
    sp.add_argument("--feature-noise", type=float, default=1.0)

    add("validate", cmd_validate, "check a dataset against the data-model invariants", output=False)

    sp = add("build-graph", cmd_build_graph, "write per-sample edge lists")
    sp.add_argument("--mode", choices=("3d", "2d"), default="3d")

    for name, fn, help_ in (("impute", cmd_impute, "non-learned imputation of unknown spots"),
                            ("train", cmd_train, "train the attention graph network"),
                            ("predict", cmd_predict, "model predictions fused with propagated labels")):
        sp = add(name, fn, help_)
        sp.add_argument("--mode", choices=("3d", "2d"), default="3d", help="graph construction")
        sp.add_argument("--graphs", help="directory of edge lists from build-graph")
        if name != "train":
            sp.add_argument("--known-ratio", type=float,
                            help="redraw known spots at this ratio (default: use the spots table)")
    sub.choices["impute"].add_argument("--method", choices=("propagation", "overlap", "similarity"),
                                       default="propagation")
    sub.choices["predict"].add_argument("--model", required=True, help="directory written by train")
    sub.choices["predict"].add_argument("--alpha", type=float, default=0.5, help="fusion weight of the model")

    sp = add("evaluate", cmd_evaluate, "cross-validated evaluation with a JSON report")
    sp.add_argument("--method", choices=METHODS, default="asign3d")
    sp.add_argument("--known-ratio", type=float)
    sp.add_argument("--folds", type=int)
    sp.add_argument("--jobs", type=int, default=1, help="folds run in parallel")

    sp = add("ablate", cmd_ablate, "known-ratio sweep for one or more methods")
    sp.add_argument("--methods", default="asign3d,asign2d")
    sp.add_argument("--ratios", default="0,0.1,0.2,0.3")
    sp.add_argument("--folds", type=int)
    sp.add_argument("--jobs", type=int, default=1)

    sp = add("heatmap", cmd_heatmap, "SVG heatmap of one gene over a sample's spots")
    sp.add_argument("--sample", required=True)
    sp.add_argument("--gene", required=True)
    sp.add_argument("--predictions", help="expression TSV to plot instead of the measured values")
    sp.add_argument("--layer", type=int, help="plot a single layer")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ST3DError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
