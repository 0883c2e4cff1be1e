"""Command-line pipeline driver.

Subcommands cover the whole workflow: corpus generation, artifact builds
(reference LM, datastore, index, pruned/reduced stores, gate training),
weight tuning, evaluation, speed benchmarking and the gate ablation grid.
Reports are emitted as JSON lines plus a plain table on stdout; report
subcommands also render a PNG figure next to the JSON-lines file unless
--no-figures is given.

Exit codes: 0 success, 2 configuration error, 3 artifact format error.
Heavy imports happen inside handlers so --threads can pin the BLAS pool
through the environment before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import ConfigError, FormatError, InvalidInputError


def _set_thread_env(threads: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(threads)


def _load_cfg(args):
    from .config import load_config

    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = args.threads
    return load_config(args.config, overrides=overrides)


def _ensure_parent(path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _append_jsonl(path: str | Path, rows: list[dict]) -> None:
    path = _ensure_parent(path)
    with open(path, "a", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _print_table(rows: list[dict], columns: list[str]) -> None:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4g}"
        return "-" if v is None else str(v)

    cells = [[fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(columns)]
    print("  ".join(c.ljust(w) for c, w in zip(columns, widths)))
    for row in cells:
        print("  ".join(v.ljust(w) for v, w in zip(row, widths)))


def _figure_path(out: str | Path, suffix: str) -> Path:
    out = Path(out)
    return out.with_name(out.stem + suffix + ".png")


# --- subcommand handlers -----------------------------------------------------

def cmd_make_corpus(args) -> int:
    from .config import PipelineConfig, write_config
    from .synthetic import make_toy_benchmark

    out_dir = Path(args.out_dir)
    bench = make_toy_benchmark(
        seed=args.seed if args.seed is not None else 0,
        lm_tokens=args.lm_tokens,
        store_tokens=args.store_tokens,
        valid_tokens=args.valid_tokens,
        test_tokens=args.test_tokens,
    )
    paths = bench.write(out_dir / "data")
    cfg = PipelineConfig(
        corpus_lm="data/lm.txt",
        corpus_store="data/store.txt",
        corpus_valid="data/valid.txt",
        corpus_test="data/test.txt",
    )
    if args.seed is not None:
        cfg.seed = args.seed
    config_path = out_dir / "pipeline.config"
    write_config(cfg, config_path)
    counts = bench.token_counts()
    print(f"wrote {sum(counts.values())} tokens: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    print(f"corpus files in {out_dir / 'data'}; config at {config_path}")
    for p in paths.values():
        assert p.exists()
    return 0


def cmd_build_lm(args) -> int:
    from .corpus import read_corpus
    from .reference_lm import build_reference_lm

    cfg = _load_cfg(args)
    lm_docs = read_corpus(cfg.corpus_lm)
    store_docs = read_corpus(cfg.corpus_store) if cfg.corpus_store != cfg.corpus_lm else None
    ref = build_reference_lm(
        lm_docs,
        store_docs,
        dim=cfg.encoder_dim,
        gamma=cfg.encoder_gamma,
        window=cfg.encoder_window,
        order=cfg.lm_order,
        alpha=cfg.lm_alpha,
        seed=cfg.seed,
    )
    out = args.out or cfg.lm
    ref.save(_ensure_parent(out))
    print(f"reference model: vocab={len(ref.vocab)} dim={ref.encoder.dim} -> {out}")
    return 0


def cmd_build_datastore(args) -> int:
    from .corpus import read_corpus
    from .datastore import build_datastore, datastore_stats, save_datastore
    from .reference_lm import ReferenceLm

    cfg = _load_cfg(args)
    if not Path(cfg.lm).exists():
        raise ConfigError(f"reference model {cfg.lm} missing - run `build-lm` first")
    ref = ReferenceLm.load(cfg.lm)
    docs = [ref.vocab.encode_doc(d) for d in read_corpus(cfg.corpus_store)]
    ds = build_datastore(docs, ref.encoder)
    out = args.out or cfg.datastore
    save_datastore(ds, _ensure_parent(out), half_precision=args.half)
    stats = datastore_stats(ds)
    del stats["value_histogram"]
    print(f"datastore {out}: " + ", ".join(f"{k}={v}" for k, v in stats.items()))
    return 0


def cmd_build_index(args) -> int:
    from .datastore import load_datastore
    from .index import attach_pq, default_nlist, save_index, train_ivf

    cfg = _load_cfg(args)
    ds_path = args.datastore or cfg.datastore
    if not Path(ds_path).exists():
        raise ConfigError(f"datastore {ds_path} missing - run `build-datastore` first")
    ds = load_datastore(ds_path)
    nlist = cfg.nlist or default_nlist(len(ds))
    index = train_ivf(
        ds.keys, nlist, seed=cfg.seed, max_iters=cfg.ivf_iters, train_sample=cfg.ivf_train_sample
    )
    if cfg.pq_m > 0:
        attach_pq(index, ds.keys, m=cfg.pq_m, bits=cfg.pq_bits, seed=cfg.seed)
    out = args.out or cfg.index
    save_index(index, _ensure_parent(out))
    pq = f", pq m={cfg.pq_m} bits={cfg.pq_bits}" if cfg.pq_m else ""
    print(f"index {out}: nlist={nlist} over {len(ds)} records{pq}")
    return 0


def cmd_prune(args) -> int:
    import numpy as np

    from .datastore import load_datastore, save_datastore
    from .index import FlatSearcher
    from .pruning import importance_scores, run_prune

    cfg = _load_cfg(args)
    ds_path = args.datastore or cfg.datastore
    if not Path(ds_path).exists():
        raise ConfigError(f"datastore {ds_path} missing - run `build-datastore` first")
    ds = load_datastore(ds_path)
    seed = cfg.seed if args.seed is None else args.seed
    params: dict = {"seed": seed}
    if args.method == "random":
        params["retain_fraction"] = args.retain
    elif args.method == "kmeans":
        params["top_m_tokens"] = args.kmeans_top_m
        params["cluster_ratio"] = args.kmeans_ratio
    elif args.method == "gm":
        params["searcher"] = FlatSearcher(ds)
        params["k_neighbors"] = args.gm_k or cfg.gm_k
    elif args.method == "rank":
        searcher = FlatSearcher(ds)
        scores = importance_scores(
            ds, searcher, ds.keys, k=min(cfg.k, len(ds)), exclude_ids=np.arange(len(ds))
        )
        params["scores"] = scores
        params["retain_fraction"] = args.retain
    pruned, report = run_prune(ds, args.method, **params)
    default_out = {"gm": cfg.datastore_gm}.get(args.method, str(Path(ds_path).with_suffix(f".{args.method}.knnd")))
    out = args.out or default_out
    save_datastore(pruned, _ensure_parent(out))
    row = report.to_dict()
    row["output"] = str(out)
    if args.report:
        _append_jsonl(args.report, [row])
    print(json.dumps(row, sort_keys=True))
    return 0


def cmd_reduce(args) -> int:
    from .datastore import load_datastore, save_datastore
    from .reduction import reduce_datastore

    cfg = _load_cfg(args)
    ds_path = args.datastore or cfg.datastore
    if not Path(ds_path).exists():
        raise ConfigError(f"datastore {ds_path} missing - run `build-datastore` first")
    ds = load_datastore(ds_path)
    rotate = {"on": True, "off": False}[args.rotate] if args.rotate else cfg.dr_rotate
    dim = args.dim or cfg.dr_dim
    seed = cfg.seed if args.seed is None else args.seed
    reduced = reduce_datastore(ds, d_out=dim, rotate=rotate, seed=seed)
    out = args.out or cfg.datastore_dr
    save_datastore(reduced, _ensure_parent(out))
    ev = float(reduced.transform.explained_variance.sum())
    print(f"reduced {ds.dim} -> {dim} dims (explained variance {ev:.3f}) -> {out}")
    return 0


def cmd_train_adaptor(args) -> int:
    from .adaptor import AdaptorTrainConfig, save_adaptor
    from .corpus import read_corpus
    from .datastore import load_datastore
    from .harness import build_adaptor_dataset
    from .index import IvfSearcher, load_index
    from .reference_lm import ReferenceLm

    cfg = _load_cfg(args)
    ds_path = args.datastore or cfg.datastore
    index_path = args.index or cfg.index
    for path, stage in ((cfg.lm, "build-lm"), (ds_path, "build-datastore"), (index_path, "build-index")):
        if not Path(path).exists():
            raise ConfigError(f"artifact {path} missing - run `{stage}` first")
    ref = ReferenceLm.load(cfg.lm)
    ds = load_datastore(ds_path)
    index = load_index(index_path)
    searcher = IvfSearcher(index, ds, nprobe=min(cfg.nprobe, index.nlist))
    valid_docs = read_corpus(cfg.corpus_valid)
    dataset = build_adaptor_dataset(
        ref, ds, searcher, valid_docs, k=cfg.k, distance_power=cfg.distance_power
    )
    train_cfg = AdaptorTrainConfig(
        l1_coeff=cfg.ar_l1,
        learning_rate=cfg.ar_lr,
        epochs=cfg.ar_epochs,
        batch_size=cfg.ar_batch,
        prune_fraction=cfg.ar_prune_fraction,
        features=cfg.ar_features,
        seed=cfg.seed,
    )
    from .adaptor import train_adaptor as run_training

    net, log = run_training(dataset, train_cfg)
    out = args.out or cfg.adaptor
    save_adaptor(net, _ensure_parent(out))
    if args.out_log:
        _append_jsonl(args.out_log, log)
    last = log[-1]
    print(
        f"gate trained on {len(dataset)} tokens: heldout ppl {last['heldout_ppl']:.3f} "
        f"at {cfg.ar_prune_fraction:.0%} pruning, threshold {net.threshold:.4f} -> {out}"
    )
    return 0


def cmd_tune_lambda(args) -> int:
    from .corpus import read_corpus
    from .harness import load_pipeline, tune_lambda

    cfg = _load_cfg(args)
    bundle = load_pipeline(cfg, "knnlm")
    valid_docs = read_corpus(cfg.corpus_valid)
    lam_star, grid = tune_lambda(
        bundle["ref"], bundle["ds"], bundle["searcher"], valid_docs,
        k=cfg.k, distance_power=cfg.distance_power,
    )
    rows = [{"lambda": lam, "perplexity": ppl} for lam, ppl in grid]
    _print_table(rows, ["lambda", "perplexity"])
    print(f"selected lambda = {lam_star}")
    if args.out:
        _append_jsonl(args.out, rows + [{"selected_lambda": lam_star}])
        if not args.no_figures:
            from .figures import render_lambda_grid

            render_lambda_grid(grid, lam_star, _figure_path(args.out, "_lambda"))
    return 0


def cmd_eval(args) -> int:
    from .config import config_hash
    from .corpus import read_corpus
    from .harness import evaluate_mode

    cfg = _load_cfg(args)
    chash = config_hash(cfg)
    docs = read_corpus(cfg.corpus_test)
    modes = [m.strip() for m in args.mode.split(",") if m.strip()]
    rows = [evaluate_mode(cfg, mode, docs, config_hash=chash).to_dict() for mode in modes]
    _print_table(
        rows,
        ["label", "perplexity", "tokens_per_s", "retrieval_fraction", "retention", "dims", "floored_tokens"],
    )
    if args.out:
        _append_jsonl(args.out, rows)
        if not args.no_figures:
            from .figures import render_speed_scatter

            render_speed_scatter(rows, _figure_path(args.out, "_eval"))
    return 0


def cmd_bench(args) -> int:
    from .config import config_hash
    from .corpus import read_corpus
    from .harness import bench_speed, evaluate_mode

    cfg = _load_cfg(args)
    chash = config_hash(cfg)
    docs = read_corpus(cfg.corpus_test)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]

    def runner(mode):
        return lambda: evaluate_mode(cfg, mode, docs, config_hash=chash)

    reports = bench_speed({m: runner(m) for m in modes}, repetitions=args.reps)
    rows = [r.to_dict() for r in reports]
    _print_table(rows, ["label", "perplexity", "tokens_per_s", "speedup", "retrieval_fraction"])
    if args.out:
        _append_jsonl(args.out, rows)
        if not args.no_figures:
            from .figures import render_speed_scatter

            render_speed_scatter(rows, _figure_path(args.out, "_bench"))
    return 0


def cmd_ablate(args) -> int:
    from .corpus import read_corpus
    from .harness import collect_lambdas, load_pipeline, run_ablation_grid

    cfg = _load_cfg(args)
    bundle = load_pipeline(cfg, "knnlm+ar")
    valid_docs = read_corpus(cfg.corpus_valid)
    test_docs = read_corpus(cfg.corpus_test)
    fractions = [float(f) for f in args.fractions.split(",") if f.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    calib = collect_lambdas(bundle["ref"], bundle["net"], valid_docs)
    rows = run_ablation_grid(
        bundle["ref"],
        bundle["ds"],
        bundle["searcher"],
        bundle["net"],
        test_docs,
        calib,
        global_lam=cfg.lam,
        fractions=fractions,
        seeds=seeds,
        k=cfg.k,
        distance_power=cfg.distance_power,
    )
    _print_table(rows, ["fraction", "mask", "weight", "seed", "perplexity", "retrieval_fraction"])
    if args.out:
        _append_jsonl(args.out, rows)
        if not args.no_figures:
            from .figures import render_ablation

            render_ablation(rows, _figure_path(args.out, "_ablate"))
    return 0


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, help="BLAS thread count (recorded in reports)")
    common.add_argument("--no-figures", action="store_true", help="skip PNG rendering next to --out")

    parser = argparse.ArgumentParser(prog="knnlm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", parents=[common], help="generate the synthetic two-domain benchmark")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--lm-tokens", type=int, default=80_000)
    p.add_argument("--store-tokens", type=int, default=100_000)
    p.add_argument("--valid-tokens", type=int, default=15_000)
    p.add_argument("--test-tokens", type=int, default=8_000)
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("build-lm", parents=[common], help="fit the reference model bundle")
    p.add_argument("--out")
    p.set_defaults(func=cmd_build_lm)

    p = sub.add_parser("build-datastore", parents=[common], help="encode the store corpus into records")
    p.add_argument("--out")
    p.add_argument("--half", action="store_true", help="store keys at 16-bit precision")
    p.set_defaults(func=cmd_build_datastore)

    p = sub.add_parser("build-index", parents=[common], help="train the IVF (optionally PQ) index")
    p.add_argument("--datastore")
    p.add_argument("--out")
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("prune", parents=[common], help="shrink the datastore")
    p.add_argument("--method", required=True, choices=["random", "kmeans", "gm", "rank"])
    p.add_argument("--retain", type=float, default=0.5, help="retention fraction (random/rank)")
    p.add_argument("--gm-k", type=int, help="neighbors inspected per record (gm)")
    p.add_argument("--kmeans-top-m", type=int, default=5000, help="most frequent tokens to cluster")
    p.add_argument("--kmeans-ratio", type=float, default=0.05, help="clusters per record (kmeans)")
    p.add_argument("--datastore")
    p.add_argument("--out")
    p.add_argument("--report", help="append the prune report to this JSON-lines file")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("reduce", parents=[common], help="PCA-project the datastore keys")
    p.add_argument("--dim", type=int)
    p.add_argument("--rotate", choices=["on", "off"])
    p.add_argument("--datastore")
    p.add_argument("--out")
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("train-adaptor", parents=[common], help="train the retrieval gate")
    p.add_argument("--datastore")
    p.add_argument("--index")
    p.add_argument("--out")
    p.add_argument("--out-log", help="append per-epoch training rows to this JSON-lines file")
    p.set_defaults(func=cmd_train_adaptor)

    p = sub.add_parser("tune-lambda", parents=[common], help="grid-search the interpolation weight")
    p.add_argument("--out")
    p.set_defaults(func=cmd_tune_lambda)

    p = sub.add_parser("eval", parents=[common], help="perplexity and speed for one or more modes")
    p.add_argument("--mode", default="knnlm", help="comma-separated subset of: " + ",".join(
        ("nlm", "knnlm", "knnlm+ar", "knnlm+gm", "knnlm+dr", "knnlm+all")))
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="median tokens/s across modes")
    p.add_argument("--modes", default="nlm,knnlm")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", parents=[common], help="mask/weight ablation grid for the gate")
    p.add_argument("--fractions", default="0,0.25,0.5,0.75,1")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", None):
        _set_thread_env(args.threads)
    try:
        return args.func(args) or 0
    except (ConfigError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
