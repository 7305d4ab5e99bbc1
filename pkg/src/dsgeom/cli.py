"""Command line entry point: ``dsgeom <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error (bad or mismatched
inputs), 3 numeric failure (diverged training, degenerate correlation).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .align import align_with_uncertainty
from .cde import CdeConfig, train
from .core import (
    DistanceMatrix,
    LibraryManifest,
    ManifestEntry,
    load_distance_matrix,
    load_manifest,
    load_transfer_matrix,
    write_distance_matrix,
    write_embeddings,
    write_manifest,
)
from .directed import directed_distance_matrix
from .distance import SwConfig, distance_matrix
from .encoder import MetricHead, load_head, save_head
from .errors import DataError, NumericError
from .pipeline import Cache, StageTimer, cached_distance, embed_manifest, load_encoder
from .protocols import (
    DecisionReport,
    augmentation_gain,
    rank_auxiliaries,
    source_selection_payoff,
    subset_regret,
    subset_report,
)
from .robustness import MODES, corruption_sweep
from .synth import SynthSpec, gen_library, gen_transfer_matrix, write_library

log = logging.getLogger("dsgeom")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse with exit code 1 for usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# output helpers

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def render(obj, fmt: str) -> str:
    """JSON (sorted keys) or CSV text for a dict or a list of flat dicts."""
    if fmt == "json":
        return json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n"
    rows = obj if isinstance(obj, list) else [obj]
    cols = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in cols])
    return buf.getvalue()


def emit(obj, args) -> None:
    text = render(obj, args.format)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _report_obj(rep: DecisionReport, fmt: str):
    return rep.to_dict() if fmt == "json" else rep.rows()


def _write_timing(path, timer: StageTimer, cache: Cache | None = None):
    rep = timer.report()
    if cache is not None:
        rep.update(cache_hits=cache.hits, cache_misses=cache.misses)
    Path(path).write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")


def _sw_config(args) -> SwConfig:
    return SwConfig(L=args.projections, M=args.cap, seed=args.seed)


def _entries(manifest: LibraryManifest, split: str):
    if split == "all":
        return list(manifest.entries)
    entries = manifest.split(split)
    if not entries:
        raise DataError(f"no datasets tagged {split!r} in the manifest")
    return entries


def _transfer_for(args, library):
    """Transfer matrix restricted to (and ordered like) the loaded datasets; P may cover more of them."""
    P = load_transfer_matrix(args.p_matrix, accuracy=getattr(args, "accuracy", False) or None)
    return P.subset([P.index_of(ds.dataset_id) for ds in library])


def _load_library(args, timer=None, cache=None):
    manifest = load_manifest(args.manifest)
    encoder = load_encoder(args.encoder) if getattr(args, "encoder", None) else None
    head = load_head(args.head) if getattr(args, "head", None) else None
    return embed_manifest(manifest, encoder, head, cache, timer, _entries(manifest, args.split))


# --------------------------------------------------------------------------
# subcommands

def cmd_synth(args):
    spec = SynthSpec(N=args.N, C=args.C, d=args.d, n=args.n, shift=args.shift, informative_dims=args.informative_dims,
                     class_sep=args.class_sep, spread_lo=args.spread_lo, spread_hi=args.spread_hi,
                     spread_jitter=args.spread_jitter,
                     concentration=None if args.concentration <= 0 else args.concentration, alpha=args.alpha,
                     distortion=args.distortion, distortion_strength=args.distortion_strength,
                     distortion_gain=args.distortion_gain, holdout=args.holdout, seed=args.seed)
    lib = gen_library(spec)
    P = gen_transfer_matrix(lib.G, args.link, args.noise, args.seed, lib.ids)
    path = write_library(args.out, lib, P)
    print(path)


def cmd_embed(args):
    timer, cache = StageTimer(), Cache(args.cache)
    manifest = load_manifest(args.manifest)
    entries = _entries(manifest, args.split)
    library, _ = _load_library(args, timer, cache)
    out = Path(args.out)
    (out / "emb").mkdir(parents=True, exist_ok=True)
    new_entries = []
    for e, ds in zip(entries, library):
        emb = Path("emb") / f"{ds.dataset_id}.dge"
        write_embeddings(out / emb, ds.Z)
        lab = None
        if e.labels_path is not None:
            (out / "labels").mkdir(exist_ok=True)
            lab = Path("labels") / f"{ds.dataset_id}.txt"
            shutil.copyfile(manifest.root / e.labels_path, out / lab)
        new_entries.append(ManifestEntry(ds.dataset_id, embedding_path=emb, labels_path=lab))
    tags = {e.dataset_id: manifest.split_tags[e.dataset_id] for e in entries if e.dataset_id in manifest.split_tags}
    write_manifest(out / "manifest.json", LibraryManifest(tuple(new_entries), tags, out))
    if args.timing:
        _write_timing(args.timing, timer, cache)
    print(out / "manifest.json")


def cmd_dist(args):
    timer, cache = StageTimer(), Cache(args.cache)
    library, keys = _load_library(args, timer, cache)
    cfg = _sw_config(args)
    if args.directed:
        tag = f"dsw-a{args.alpha:g}" + ("-renorm" if args.renormalize_priors else "")

        def compute(lib):
            return directed_distance_matrix(lib, cfg, args.alpha, renormalize_priors=args.renormalize_priors,
                                            threads=args.threads)
    else:
        tag = f"{args.metric}-{args.label_aware}"

        def compute(lib):
            return distance_matrix(lib, args.metric, cfg, label_aware=args.label_aware, threads=args.threads)
    D = cached_distance(library, keys, compute, tag, cfg.digest(), cache, timer)
    write_distance_matrix(args.out, D)
    if args.plot:
        from .plotting import matrix_heatmap
        matrix_heatmap(D.values, D.dataset_ids, Path(args.plot) / "distance.png", D.metric_tag)
    if args.timing:
        _write_timing(args.timing, timer, cache)


def _refine_config(args):
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    head_cfg = {"hidden": None, "init": "identity", "activation": "relu"}
    head_cfg.update(raw.pop("head", {}) or {})
    cfg = CdeConfig.from_dict(raw)
    over = {"epochs": args.epochs, "lr": args.lr, "batch_datasets": args.batch_datasets,
            "samples_per_dataset": args.samples, "tau": args.tau, "seed": args.seed}
    for k, v in over.items():
        if v is not None:
            setattr(cfg, k, v)
    cfg = CdeConfig.from_dict({**cfg.to_dict(), "betas": tuple(cfg.betas)})   # re-validate overrides
    if args.hidden is not None:
        head_cfg["hidden"] = args.hidden
    if args.init is not None:
        head_cfg["init"] = args.init
    return cfg, head_cfg


def cmd_refine(args):
    cfg, head_cfg = _refine_config(args)
    library, _ = _load_library(args)
    P = _transfer_for(args, library)
    if args.head_in:
        head = load_head(args.head_in)
    else:
        # identity init routes each input coordinate through a pair of hidden units
        hidden = head_cfg["hidden"] or [max(64, 2 * library[0].d)]
        head = MetricHead.init(library[0].d, hidden=tuple(hidden), out_dim=head_cfg.get("out_dim"),
                               activation=head_cfg["activation"], init=head_cfg["init"], seed=cfg.seed)
    head, records = train(library, P, head, cfg)
    save_head(args.out, head)
    if args.log:
        with open(args.log, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    if args.plot and records:
        from .plotting import loss_curves
        loss_curves(records, Path(args.plot) / "loss_curves.png")


def _symmetrized(D: DistanceMatrix) -> DistanceMatrix:
    if D.kind == "symmetric":
        return D
    v = 0.5 * (D.values + D.values.T)
    return DistanceMatrix(v, "symmetric", D.metric_tag + "-sym", D.dataset_ids, D.cfg_hash)


def cmd_eval(args):
    D = load_distance_matrix(args.dist)
    P = load_transfer_matrix(args.p_matrix, accuracy=args.accuracy or None)
    P = P.reindex(D.dataset_ids)
    Dm = D if args.directed else _symmetrized(D)
    res = align_with_uncertainty(Dm, P, directed=args.directed, resamples=args.bootstrap, seed=args.seed)
    emit(res.to_dict(), args)
    if args.plot:
        from .plotting import alignment_scatter, matrix_heatmap
        alignment_scatter(Dm, P, Path(args.plot) / "alignment.png", args.directed, res)
        matrix_heatmap(P.values, P.dataset_ids, Path(args.plot) / "transfer.png", "transfer error")


def cmd_select_source(args):
    D = load_distance_matrix(args.dist)
    if args.p_matrix:
        P = load_transfer_matrix(args.p_matrix, accuracy=args.accuracy or None)
        rep = source_selection_payoff(D, P, args.target, args.top)
    else:
        from .protocols import select_source
        rep = DecisionReport("source_selection", args.target, select_source(D, args.target, args.top))
    emit(_report_obj(rep, args.format), args)


def _read_scores(path) -> dict:
    """``id,score`` rows (header optional)."""
    scores = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            try:
                scores[row[0].strip()] = float(row[1])
            except (IndexError, ValueError):
                if scores:
                    raise DataError(f"{path}: bad score row {row}")
    return scores


def cmd_rank_aux(args):
    D = load_distance_matrix(args.dist)
    ranked = rank_auxiliaries(D, args.target, args.top)
    rep = DecisionReport("augmentation", args.target, ranked)
    obj = _report_obj(rep, args.format)
    if args.aug_scores:
        if args.base_score is None:
            raise UsageError("--aug-scores needs --base-score")
        scores = _read_scores(args.aug_scores)
        missing = [i for i, _ in ranked if i not in scores]
        if missing:
            raise DataError(f"no augmentation score for {missing}")
        gain = augmentation_gain([scores[i] for i, _ in ranked], args.base_score,
                                 [d for _, d in ranked] if len(ranked) >= 2 else None)
        if args.format == "json":
            obj["gains"] = {i: float(g) for (i, _), g in zip(ranked, gain["gains"])}
            if "spearman" in gain:
                obj["gain_spearman"] = gain["spearman"]
        else:
            for row, g in zip(obj, gain["gains"]):
                row["gain"] = float(g)
    emit(obj, args)


def cmd_select_subset(args):
    D = load_distance_matrix(args.dist)
    rep = subset_report(D, args.k, args.seed, args.random_trials)
    if args.scores:
        universe = json.loads(Path(args.scores).read_text())
        table = {tuple(item["ids"]): float(item["score"]) for item in universe}
        reg = subset_regret(table, rep.ranked_ids, D=D)
        rep.payoff["regret"] = reg["regret"]
        if reg["kendall_tau"] is not None:
            rep.payoff["kendall_tau"] = reg["kendall_tau"]
    emit(_report_obj(rep, args.format) if args.format == "json" else
         [dict(r, **{k: v for k, v in rep.payoff.items()}) for r in rep.rows()], args)


def cmd_corrupt(args):
    library, _ = _load_library(args)
    P = _transfer_for(args, library)
    grid = [(m, lv) for m in args.mode for lv in args.level]
    rows = corruption_sweep(library, P, grid, args.trials, args.seed, _sw_config(args), directed=args.directed,
                            alpha=args.alpha, labels_only=args.labels_only, threads=args.threads)
    emit(rows, args)
    if args.plot:
        from .plotting import sweep_plot
        sweep_plot(rows, Path(args.plot) / "robustness.png")


# --------------------------------------------------------------------------
# parser

def _common(p, out_required=False):
    p.add_argument("--seed", type=int, default=0, help="single source of randomness (default 0)")
    p.add_argument("--threads", type=int, default=1, help="worker threads; never changes results")
    p.add_argument("--format", choices=("csv", "json"), default="csv", help="report format")
    p.add_argument("--out", required=out_required, help="output path (reports default to stdout)")
    p.add_argument("--plot", metavar="DIR", help="also render figures into DIR")


def _library_args(p):
    p.add_argument("--manifest", required=True)
    p.add_argument("--encoder", help="encoder JSON for raw_path entries")
    p.add_argument("--head", help="metric head checkpoint applied after the encoder")
    p.add_argument("--split", choices=("all", "train", "holdout"), default="all")


def _sw_args(p):
    p.add_argument("--projections", type=int, default=64, help="number of random projections L")
    p.add_argument("--cap", type=int, default=200, help="per-class sample cap M")


def build_parser() -> Parser:
    ap = Parser(prog="dsgeom", description="Transfer-predictive dataset distances and decision protocols.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", metavar="command", parser_class=Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a planted synthetic library")
    _common(p, out_required=True)
    p.add_argument("--N", type=int, default=10)
    p.add_argument("--C", type=int, default=3)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--shift", type=float, default=1.0)
    p.add_argument("--informative-dims", type=int, default=None)
    p.add_argument("--class-sep", type=float, default=3.0)
    p.add_argument("--spread-lo", type=float, default=0.8)
    p.add_argument("--spread-hi", type=float, default=1.25)
    p.add_argument("--spread-jitter", type=float, default=0.0)
    p.add_argument("--concentration", type=float, default=50.0, help="Dirichlet concentration (<= 0: uniform)")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--distortion", choices=("none", "linear"), default="none")
    p.add_argument("--distortion-strength", type=float, default=0.5)
    p.add_argument("--distortion-gain", type=float, default=10.0)
    p.add_argument("--holdout", type=int, default=0)
    p.add_argument("--link", choices=("affine", "logistic"), default="affine")
    p.add_argument("--noise", type=float, default=0.0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("embed", help="embed a library once and write DGE1 files")
    _common(p, out_required=True)
    _library_args(p)
    p.add_argument("--cache", metavar="DIR")
    p.add_argument("--timing", metavar="PATH", help="write t_embed/t_dist/t_total as JSON")
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("dist", help="distance matrix between datasets")
    _common(p, out_required=True)
    _library_args(p)
    _sw_args(p)
    p.add_argument("--metric", choices=("sw", "centroid"), default="sw")
    p.add_argument("--label-aware", choices=("on", "off", "auto"), default="auto")
    p.add_argument("--directed", action="store_true", help="directed source-to-target distance")
    p.add_argument("--alpha", type=float, default=1.0, help="spread penalty weight")
    p.add_argument("--renormalize-priors", action="store_true")
    p.add_argument("--cache", metavar="DIR")
    p.add_argument("--timing", metavar="PATH")
    p.set_defaults(fn=cmd_dist)

    p = sub.add_parser("refine", help="train the metric head against a transfer matrix")
    _common(p, out_required=True)
    _library_args(p)
    p.set_defaults(split="train")
    p.add_argument("--p-matrix", required=True)
    p.add_argument("--config", help="JSON with training fields and an optional 'head' section")
    p.add_argument("--log", metavar="PATH", help="line-delimited JSON training log")
    p.add_argument("--head-in", help="start from this checkpoint instead of a fresh head")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--batch-datasets", type=int)
    p.add_argument("--samples", type=int, help="samples per dataset per step")
    p.add_argument("--hidden", type=int, nargs="+")
    p.add_argument("--init", choices=("identity", "random"))
    p.set_defaults(fn=cmd_refine, seed=None)

    p = sub.add_parser("eval", help="alignment between a distance matrix and a transfer matrix")
    _common(p)
    p.add_argument("--dist", required=True)
    p.add_argument("--p-matrix", required=True)
    p.add_argument("--accuracy", action="store_true", help="P holds accuracies (converted to 1 - a)")
    p.add_argument("--directed", action="store_true", help="use all ordered pairs of the unsymmetrized P")
    p.add_argument("--bootstrap", type=int, default=0, metavar="R", help="dataset bootstrap resamples")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("select-source", help="nearest sources for a target")
    _common(p)
    p.add_argument("--dist", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--top", type=int, default=1)
    p.add_argument("--p-matrix", help="score the pick against random and oracle sources")
    p.add_argument("--accuracy", action="store_true")
    p.set_defaults(fn=cmd_select_source)

    p = sub.add_parser("rank-aux", help="rank auxiliary datasets for augmentation")
    _common(p)
    p.add_argument("--dist", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--top", type=int)
    p.add_argument("--aug-scores", help="CSV id,score of measured performance after augmentation")
    p.add_argument("--base-score", type=float, help="performance without augmentation")
    p.set_defaults(fn=cmd_rank_aux)

    p = sub.add_parser("select-subset", help="k-medoids budgeted subset")
    _common(p)
    p.add_argument("--dist", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--random-trials", type=int, default=20)
    p.add_argument("--scores", help="JSON list of {ids, score} for measured subsets (regret/Kendall)")
    p.set_defaults(fn=cmd_select_subset)

    p = sub.add_parser("corrupt", help="alignment under label corruption")
    _common(p)
    _library_args(p)
    _sw_args(p)
    p.add_argument("--p-matrix", required=True)
    p.add_argument("--accuracy", action="store_true")
    p.add_argument("--mode", choices=MODES, nargs="+", default=["noise"])
    p.add_argument("--level", type=float, nargs="+", default=[0.0, 0.2, 0.5])
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--directed", action="store_true")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--labels-only", action="store_true", help="drop mode keeps samples and removes labels")
    p.set_defaults(fn=cmd_corrupt)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:          # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("dsgeom: error: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        args.fn(args)
    except UsageError as exc:
        print(f"dsgeom: error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"dsgeom: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError) as exc:
        print(f"dsgeom: data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"dsgeom: error: {exc}", file=sys.stderr)
        return 1
    return 0


run = main

if __name__ == "__main__":
    sys.exit(main())
