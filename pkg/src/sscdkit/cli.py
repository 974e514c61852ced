"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error (bad file, bad config,
numerically degenerate input). Every command is a pure function of its input
files and flags.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig
from .descriptor_core import (
    DescriptorSet,
    apply_whitening,
    fit_whitening,
    l2_normalize_rows,
    match_heatmap,
    principal_spectrum,
    whitening_dims,
)
from .io import (
    FLAG_BIASED_QUERY,
    FormatError,
    load_descriptor_set,
    read_biases,
    read_candidates,
    read_descriptors,
    read_ground_truth,
    write_biases,
    write_candidates,
    write_descriptors,
    write_ground_truth,
    write_rows_csv,
)
from .losses import LossConfig
from .retrieval_eval import INNER_PRODUCT, L2, GroundTruth, distance_histograms, evaluate, knn_search
from .score_norm import (
    ScoreNormConfig,
    compute_biases,
    extend_references,
    integrate_bias,
    mips_to_l2,
    normalize_candidates,
    score_norm_sweep,
)
from .toy_bench import TrainingDiverged, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

SWEEP_LAMBDAS = (0.0, 1.0, 3.0, 10.0, 30.0)
SWEEP_COLUMNS = ("lam", "micro_ap", "recall_at_1", "mrr", "effective_rank", "max_min_ratio", "separation_gap")


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load_subset(path, prefix: str | None) -> DescriptorSet:
    ds = load_descriptor_set(path)
    if prefix is None:
        return ds
    ids = [i for i in ds.ids if i.startswith(prefix)]
    if not ids:
        raise DataError(f"{path}: no ids start with {prefix!r}")
    return ds.subset(ids)


def _load_config(path) -> RunConfig:
    return RunConfig() if path is None else RunConfig.load(path)


# -- toy training --------------------------------------------------------------


def _write_run(cfg: RunConfig, out_dir: Path, write_gt: bool) -> dict:
    enc, hist, result = train(cfg.train)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "history.csv").write_text(hist.to_csv(), encoding="utf-8")
    probe = DescriptorSet(result.queries.ids + result.refs.ids, np.vstack([result.queries.data, result.refs.data]), True)
    write_descriptors(out_dir / "probe.sscd", probe)
    final = {
        "micro_ap": result.micro_ap,
        "recall_at_1": result.recall_at_1,
        "mrr": result.mrr,
        "effective_rank": result.effective_rank,
        "max_min_ratio": result.max_min_ratio,
        "separation_gap": result.separation_gap,
    }
    manifest = {"version": __version__, "seed": cfg.train.seed, "config": cfg.to_dict(), "final": final}
    (out_dir / "manifest.json").write_text(_dump_json(manifest), encoding="utf-8")
    if write_gt:
        pairs = [(q, "r/" + q[2:]) for q in result.queries.ids]
        write_ground_truth(out_dir / "ground_truth.csv", GroundTruth.from_pairs(pairs))
    return final


def _with_train(cfg: RunConfig, **changes) -> RunConfig:
    return replace(cfg, train=replace(cfg.train, **changes))


def cmd_toy_train(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = _with_train(cfg, seed=args.seed)
    if args.lam is not None:
        cfg = _with_train(cfg, loss=LossConfig(cfg.train.loss.tau, args.lam))
    _write_run(cfg, Path(args.out_dir), args.ground_truth)
    return EXIT_OK


def cmd_lambda_sweep(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = _with_train(cfg, seed=args.seed)
    out = Path(args.out_dir)
    rows = []
    for lam in args.lambdas:
        run = _with_train(cfg, loss=LossConfig(cfg.train.loss.tau, lam))
        final = _write_run(run, out / f"lam_{lam:g}", args.ground_truth)
        rows.append([float(lam)] + [float(final[k]) for k in SWEEP_COLUMNS[1:]])
    write_rows_csv(out / "summary.csv", SWEEP_COLUMNS, rows)
    return EXIT_OK


# -- descriptor postprocessing -----------------------------------------------


def cmd_postprocess(args) -> int:
    fit = load_descriptor_set(args.fit_on)
    target = load_descriptor_set(args.apply_to)
    if fit.dim != target.dim:
        raise DataError(f"dimension mismatch: fit set has {fit.dim} dims, apply set has {target.dim}")
    if args.normalize_before:
        fit = fit.normalize()
    dims = whitening_dims(fit.dim) if args.sweep else [args.pca_dim or fit.dim]
    for dim in dims:
        if dim > fit.dim:
            raise DataError(f"pca-dim {dim} exceeds descriptor dimension {fit.dim}")
        if fit.count <= dim:
            raise DataError(f"fit set has {fit.count} rows, need more than pca-dim {dim}")
    out = Path(args.out)
    if args.sweep:
        out.mkdir(parents=True, exist_ok=True)
    for dim in dims:
        t = fit_whitening(fit, dim, args.epsilon)
        ds = apply_whitening(t, target, renormalize=not args.no_renormalize, normalize_input=args.normalize_before)
        write_descriptors(out / f"whitened_d{dim}.sscd" if args.sweep else out, ds)
    return EXIT_OK


# -- search and score normalization ------------------------------------------


def cmd_search(args) -> int:
    qf = read_descriptors(args.queries)
    queries = _load_subset(args.queries, args.query_prefix)
    refs = _load_subset(args.refs, args.ref_prefix)
    metric = args.metric
    if qf.flags & FLAG_BIASED_QUERY and refs.dim + 1 == queries.dim:
        # plain references meet biased queries: append the constant 1 coordinate
        refs = extend_references(refs).base
    if args.mips_to_l2:
        reduced = mips_to_l2(refs)
        queries, refs, metric = reduced.augment_queries(queries), reduced.base, L2
    elif qf.flags & FLAG_BIASED_QUERY and metric != INNER_PRODUCT:
        raise DataError("biased query descriptors only support the inner-product metric (or --mips-to-l2)")
    write_candidates(args.out, knn_search(queries, refs, args.k, metric))
    return EXIT_OK


def cmd_score_normalize(args) -> int:
    cands = read_candidates(args.candidates)
    queries = load_descriptor_set(args.queries)
    background = load_descriptor_set(args.background)
    if args.sweep:
        if args.ground_truth is None:
            raise DataError("--sweep needs --ground-truth")
        rows = score_norm_sweep(queries, background, cands, read_ground_truth(args.ground_truth))
        header = ("n", "n_end", "beta", "micro_ap", "ranking_preserved")
        write_rows_csv(args.out, header, [[r[h] if h != "ranking_preserved" else int(r[h]) for h in header] for r in rows])
        return EXIT_OK
    cfg = ScoreNormConfig(args.n, args.n_end, args.beta)
    if args.biases is not None:
        biases = read_biases(args.biases)
    else:
        biases = compute_biases(queries, background, cfg)
    missing = sorted({c.query_id for c in cands} - set(biases))
    if missing:
        raise DataError(f"no bias for query {missing[0]!r}")
    write_candidates(args.out, normalize_candidates(cands, biases))
    if args.biases_out is not None:
        write_biases(args.biases_out, biases)
    if args.biased_queries_out is not None:
        write_descriptors(args.biased_queries_out, integrate_bias(queries, biases).base, FLAG_BIASED_QUERY)
    return EXIT_OK


# -- evaluation and diagnostics ----------------------------------------------


def cmd_evaluate(args) -> int:
    report = evaluate(read_candidates(args.candidates), read_ground_truth(args.ground_truth), args.k)
    sys.stdout.write(report.to_json() + "\n")
    if args.pr_csv is not None:
        write_rows_csv(args.pr_csv, ("recall", "precision"), [[float(r), float(p)] for r, p in report.pr_points])
    return EXIT_OK


def cmd_spectrum(args) -> int:
    rep = principal_spectrum(load_descriptor_set(args.descriptors))
    text = _dump_json(rep.to_dict())
    if args.out is None:
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_histogram(args) -> int:
    h = distance_histograms(
        _load_subset(args.queries, args.query_prefix),
        _load_subset(args.refs, args.ref_prefix),
        read_ground_truth(args.ground_truth),
        args.bins,
    )
    rows = [[float(lo), float(hi), int(p), int(n)] for lo, hi, p, n in zip(h.edges[:-1], h.edges[1:], h.positive, h.negative)]
    write_rows_csv(args.out, ("bin_lo", "bin_hi", "positive", "negative"), rows)
    sys.stdout.write(_dump_json(h.summary()))
    return EXIT_OK


def cmd_heatmap(args) -> int:
    cells = load_descriptor_set(args.cells)
    if cells.count != args.height * args.width:
        raise DataError(f"cell file has {cells.count} rows, expected height*width = {args.height * args.width}")
    glob = load_descriptor_set(args.global_descriptor)
    if args.global_id is not None:
        row = glob.data[glob.index_of(args.global_id)]
    elif glob.count == 1:
        row = glob.data[0]
    else:
        raise DataError(f"global file has {glob.count} rows; pick one with --global-id")
    grid = l2_normalize_rows(cells.data).reshape(args.height, args.width, -1)
    heat = match_heatmap(grid, row / np.linalg.norm(row))
    write_rows_csv(args.out, [f"x{j}" for j in range(args.width)], [[float(v) for v in r] for r in heat])
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _lambda_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("lambdas must be a non-empty list of non-negative numbers")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sscdkit", description="Copy-detection descriptor toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("toy-train", help="train the synthetic encoder; writes history.csv, probe.sscd, manifest.json")
    s.add_argument("--config", help="RunConfig JSON (defaults used when omitted)")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, help="override train.seed")
    s.add_argument("--lam", type=float, help="override train.loss.lam")
    s.add_argument("--ground-truth", action="store_true", help="also write ground_truth.csv for the probe set")
    s.set_defaults(func=cmd_toy_train)

    s = sub.add_parser("lambda-sweep", help="toy-train once per entropy weight, plus summary.csv")
    s.add_argument("--config")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--lambdas", type=_lambda_list, default=list(SWEEP_LAMBDAS), help="comma-separated (default 0,1,3,10,30)")
    s.add_argument("--ground-truth", action="store_true")
    s.set_defaults(func=cmd_lambda_sweep)

    s = sub.add_parser("postprocess", help="fit PCA whitening on one set and apply it to another")
    s.add_argument("--fit-on", required=True)
    s.add_argument("--apply-to", required=True)
    s.add_argument("--out", required=True, help="output file (a directory with --sweep)")
    s.add_argument("--pca-dim", type=int, help="output dimension (default: input dimension)")
    s.add_argument("--sweep", action="store_true", help="one file per dimension in {d, 3d/4, d/2, d/4, ...}")
    s.add_argument("--normalize-before", action="store_true", help="L2-normalize both sets before whitening")
    s.add_argument("--no-renormalize", action="store_true", help="skip L2 normalization after whitening")
    s.add_argument("--epsilon", type=float, default=1e-6)
    s.set_defaults(func=cmd_postprocess)

    s = sub.add_parser("search", help="exhaustive k-NN search; writes a candidates CSV")
    s.add_argument("--queries", required=True)
    s.add_argument("--refs", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--metric", choices=(INNER_PRODUCT, L2), default=INNER_PRODUCT)
    s.add_argument("--mips-to-l2", action="store_true", help="reduce inner-product search to L2 search")
    s.add_argument("--query-prefix", help="use only query rows whose id starts with this")
    s.add_argument("--ref-prefix", help="use only reference rows whose id starts with this")
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("score-normalize", help="subtract per-query background bias from candidate scores")
    s.add_argument("--candidates", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--background", required=True)
    s.add_argument("--out", required=True, help="normalized candidates CSV (grid CSV with --sweep)")
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--n-end", type=int, default=3)
    s.add_argument("--beta", type=float, default=1.0)
    s.add_argument("--biases", help="read biases from this CSV instead of computing them")
    s.add_argument("--biases-out", help="write the per-query biases CSV")
    s.add_argument("--biased-queries-out", help="write queries with the bias as an extra coordinate")
    s.add_argument("--sweep", action="store_true", help="evaluate the full (n, n_end, beta) grid")
    s.add_argument("--ground-truth", help="ground truth CSV (required with --sweep)")
    s.set_defaults(func=cmd_score_normalize)

    s = sub.add_parser("evaluate", help="print uAP / mAP / recall@1 / MRR as JSON")
    s.add_argument("--candidates", required=True)
    s.add_argument("--ground-truth", required=True)
    s.add_argument("--k", type=int)
    s.add_argument("--pr-csv", help="write precision-recall points")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("spectrum", help="principal values, effective rank and max/min ratio as JSON")
    s.add_argument("--descriptors", required=True)
    s.add_argument("--out", help="write JSON here instead of standard output")
    s.set_defaults(func=cmd_spectrum)

    s = sub.add_parser("histogram", help="positive / nearest-negative squared-distance histograms")
    s.add_argument("--queries", required=True)
    s.add_argument("--refs", required=True)
    s.add_argument("--ground-truth", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--bins", type=int, default=40)
    s.add_argument("--query-prefix", help="use only query rows whose id starts with this")
    s.add_argument("--ref-prefix", help="use only reference rows whose id starts with this")
    s.set_defaults(func=cmd_histogram)

    s = sub.add_parser("heatmap", help="per-location similarity to a global descriptor")
    s.add_argument("--cells", required=True, help="descriptor file with height*width rows, row-major")
    s.add_argument("--height", type=int, required=True)
    s.add_argument("--width", type=int, required=True)
    s.add_argument("--global", dest="global_descriptor", required=True)
    s.add_argument("--global-id", help="row of the global file to use (needed when it has several)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("k", "bins", "height", "width", "pca_dim"):
        v = getattr(args, name, None)
        if v is not None and v < 1:
            parser.error(f"--{name.replace('_', '-')} must be >= 1, got {v}")
    try:
        return args.func(args)
    except (DataError, FormatError, ConfigError, TrainingDiverged, ValueError, KeyError, OSError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"sscdkit {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
