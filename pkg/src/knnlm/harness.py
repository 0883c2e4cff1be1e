"""End-to-end evaluation: perplexity, speed, mode composition, ablations.

The evaluation stream processes test tokens in order: base-LM step, optional
retrieval gate, neighbor search, neighbor distribution, interpolation, token
log-likelihood. Perplexity is exp(mean negative log-likelihood in nats) and
is deterministic for a fixed configuration; the timing fields are not.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .adaptor import (
    AdaptorDataset,
    AdaptorNet,
    AdaptorTrainConfig,
    extract_features,
    select_lambda_threshold,
    train_adaptor,
)
from .datastore import Datastore
from .distribution import rescale_distances, weighted_knn_distribution
from .errors import ConfigError, InvalidInputError
from .index import FlatSearcher, IvfSearcher, default_nlist, train_ivf
from .pruning import greedy_merge
from .reduction import reduce_datastore
from .reference_lm import ReferenceLm

MODES = ("nlm", "knnlm", "knnlm+ar", "knnlm+gm", "knnlm+dr", "knnlm+all")
LOG_PROB_FLOOR = -50.0
LAMBDA_GRID = tuple(round(0.10 + 0.05 * i, 2) for i in range(17))


@dataclass
class EvalReport:
    label: str
    perplexity: float
    tokens_per_s: float
    speedup: float | None
    retrieval_fraction: float
    retention: float | None
    dims: int
    config_hash: str
    t_nlm: float
    t_knn: float
    wall_s: float
    tokens: int
    floored_tokens: int
    knn_better_fraction: float | None
    threads: int
    seed: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _encode_docs(ref: ReferenceLm, docs) -> list[list[int]]:
    if not docs:
        raise InvalidInputError("evaluation corpus is empty")
    if docs and docs[0] and isinstance(docs[0][0], str):
        return [ref.vocab.encode_doc(d) for d in docs]
    return [list(map(int, d)) for d in docs]


def _tail(context: list[int], n: int, bos: int) -> tuple[int, ...]:
    if len(context) >= n:
        return tuple(context[-n:])
    return tuple([bos] * (n - len(context)) + context)


def _store_retention(ds: Datastore) -> float | None:
    src = ds.provenance_get("source_tokens")
    if src is None:
        return None
    return len(ds) / int(src)


def evaluate(
    ref: ReferenceLm,
    docs,
    *,
    label: str,
    ds: Datastore | None = None,
    searcher=None,
    k: int = 1024,
    lam: float = 0.25,
    distance_power: float = 2.0,
    net: AdaptorNet | None = None,
    threshold: float = -1.0,
    mask: str = "none",  # none | learned | random
    weight: str = "constant",  # constant | learned
    mask_fraction: float = 0.0,
    mask_seed: int = 0,
    config_hash: str = "",
    threads: int = 1,
    seed: int = 0,
) -> EvalReport:
    """Token-level perplexity and speed for one model configuration.

    With no datastore this is the bare base LM. With one, every token
    retrieves unless the mask policy skips it: "learned" skips when the gate
    weight is at or below `threshold`, "random" skips a seeded `mask_fraction`
    of tokens. The interpolation weight is the constant `lam` or the gate's
    learned per-context weight.
    """
    if mask not in ("none", "learned", "random"):
        raise InvalidInputError(f"unknown mask policy {mask!r}")
    if weight not in ("constant", "learned"):
        raise InvalidInputError(f"unknown weight policy {weight!r}")
    use_store = ds is not None
    if use_store and searcher is None:
        raise InvalidInputError("a datastore needs a searcher")
    needs_net = mask == "learned" or weight == "learned"
    if needs_net and net is None:
        raise InvalidInputError("learned mask/weight policies need a trained gate")
    docs = _encode_docs(ref, docs)
    rng = np.random.default_rng([mask_seed, 7]) if mask == "random" else None
    max_n = ref.tables.max_n
    bos = ref.vocab.bos_id

    nll = 0.0
    tokens = 0
    floored = 0
    retrieved = 0
    knn_better = 0
    t_nlm = 0.0
    t_knn = 0.0
    queries_before = searcher.queries_served if searcher is not None else 0
    wall0 = time.perf_counter()
    for doc in docs:
        for t, target in enumerate(doc):
            context = doc[:t]
            t0 = time.perf_counter()
            step = ref.step(context)
            t_nlm += time.perf_counter() - t0
            pn = float(step.p_nlm[target])
            p = pn
            if use_store:
                t1 = time.perf_counter()
                lam_t = lam
                if needs_net:
                    fv = extract_features(
                        step.p_nlm, step.ctx_vec, ref.tables, _tail(context, max_n, bos)
                    )
                    lam_learned = net.lambda_for(fv)
                do_retrieve = True
                if mask == "learned":
                    do_retrieve = lam_learned > threshold
                elif mask == "random":
                    do_retrieve = bool(rng.random() >= mask_fraction)
                if do_retrieve:
                    query = ds.map_query(step.ctx_vec)
                    hits = rescale_distances(searcher.search(query, k), distance_power)
                    pk = weighted_knn_distribution(hits).get(target)
                    if weight == "learned":
                        lam_t = lam_learned
                    p = lam_t * pk + (1.0 - lam_t) * pn
                    retrieved += 1
                    if pk >= pn:
                        knn_better += 1
                t_knn += time.perf_counter() - t1
            if p > 0.0:
                logp = max(float(np.log(p)), LOG_PROB_FLOOR)
                if logp == LOG_PROB_FLOOR:
                    floored += 1
            else:
                logp = LOG_PROB_FLOOR
                floored += 1
            nll -= logp
            tokens += 1
    wall = time.perf_counter() - wall0
    queries = (searcher.queries_served - queries_before) if searcher is not None else 0
    return EvalReport(
        label=label,
        perplexity=float(np.exp(nll / tokens)),
        tokens_per_s=tokens / wall if wall > 0 else float("inf"),
        speedup=None,
        retrieval_fraction=queries / tokens,
        retention=_store_retention(ds) if use_store else None,
        dims=ds.dim if use_store else ref.encoder.dim,
        config_hash=config_hash,
        t_nlm=t_nlm,
        t_knn=t_knn,
        wall_s=wall,
        tokens=tokens,
        floored_tokens=floored,
        knn_better_fraction=(knn_better / retrieved) if retrieved else None,
        threads=threads,
        seed=seed,
    )


# --- per-token record collection --------------------------------------------

def collect_records(
    ref: ReferenceLm,
    docs,
    ds: Datastore,
    searcher,
    k: int = 1024,
    distance_power: float = 2.0,
    with_features: bool = False,
):
    """One pass over a corpus gathering, per token, the base-LM and
    neighbor-distribution probabilities of the true target (plus gate features
    when requested). Retrieval is independent of the interpolation weight, so
    downstream weight sweeps and gate training reuse these records."""
    docs = _encode_docs(ref, docs)
    max_n = ref.tables.max_n
    bos = ref.vocab.bos_id
    pn_out: list[float] = []
    pk_out: list[float] = []
    ctx_out: list[np.ndarray] = []
    scal_out: list[np.ndarray] = []
    for doc in docs:
        for t, target in enumerate(doc):
            context = doc[:t]
            step = ref.step(context)
            query = ds.map_query(step.ctx_vec)
            hits = rescale_distances(searcher.search(query, k), distance_power)
            pk = weighted_knn_distribution(hits).get(target)
            pn_out.append(float(step.p_nlm[target]))
            pk_out.append(pk)
            if with_features:
                fv = extract_features(
                    step.p_nlm, step.ctx_vec, ref.tables, _tail(context, max_n, bos)
                )
                ctx_out.append(fv.ctx)
                scal_out.append(fv.scalars())
    pn = np.asarray(pn_out, dtype=np.float64)
    pk = np.asarray(pk_out, dtype=np.float64)
    if not with_features:
        return pk, pn
    return AdaptorDataset(
        ctx=np.asarray(ctx_out, dtype=np.float64),
        scalars=np.asarray(scal_out, dtype=np.float64),
        p_knn=pk,
        p_nlm=pn,
    )


def tune_lambda(
    ref: ReferenceLm,
    ds: Datastore,
    searcher,
    valid_docs,
    k: int = 1024,
    distance_power: float = 2.0,
) -> tuple[float, list[tuple[float, float]]]:
    """Grid-search the constant interpolation weight on a validation corpus.

    The grid is 0.10 .. 0.90 in steps of 0.05; ties go to the smaller weight.
    """
    pk, pn = collect_records(ref, valid_docs, ds, searcher, k=k, distance_power=distance_power)
    grid: list[tuple[float, float]] = []
    best_lam, best_ppl = None, float("inf")
    for lam in LAMBDA_GRID:
        mix = np.maximum(lam * pk + (1.0 - lam) * pn, 1e-300)
        ppl = float(np.exp(-np.mean(np.log(mix))))
        grid.append((lam, ppl))
        if ppl < best_ppl:
            best_lam, best_ppl = lam, ppl
    return best_lam, grid


def collect_lambdas(ref: ReferenceLm, net: AdaptorNet, docs) -> np.ndarray:
    """Gate weights over a corpus (no retrieval issued)."""
    docs = _encode_docs(ref, docs)
    max_n = ref.tables.max_n
    bos = ref.vocab.bos_id
    out = []
    for doc in docs:
        for t in range(len(doc)):
            context = doc[:t]
            step = ref.step(context)
            fv = extract_features(step.p_nlm, step.ctx_vec, ref.tables, _tail(context, max_n, bos))
            out.append(net.lambda_for(fv))
    return np.asarray(out, dtype=np.float64)


def build_adaptor_dataset(
    ref: ReferenceLm, ds: Datastore, searcher, valid_docs, k: int = 1024, distance_power: float = 2.0
) -> AdaptorDataset:
    return collect_records(
        ref, valid_docs, ds, searcher, k=k, distance_power=distance_power, with_features=True
    )


# --- ablation grid -----------------------------------------------------------

def threshold_for_fraction(calib_lams: np.ndarray, fraction: float) -> float:
    """Gate threshold realizing a target skip fraction on calibration weights."""
    if fraction >= 1.0:
        return float("inf")
    if fraction <= 0.0:
        return -1.0
    return select_lambda_threshold(calib_lams, fraction)


def run_ablation_grid(
    ref: ReferenceLm,
    ds: Datastore,
    searcher,
    net: AdaptorNet,
    docs,
    calib_lams: np.ndarray,
    global_lam: float,
    fractions: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
    seeds: Sequence[int] = (0, 1, 2),
    k: int = 1024,
    distance_power: float = 2.0,
    config_hash: str = "",
) -> list[dict]:
    """{learned|random mask} x {learned|constant weight} sweep over skip fractions.

    Learned-mask thresholds are quantiles of `calib_lams` (gate weights on the
    calibration corpus); random masks are evaluated once per seed.
    """
    rows: list[dict] = []

    def run(mask: str, weight: str, fraction: float, seed: int | None) -> None:
        report = evaluate(
            ref,
            docs,
            label=f"ablate[{mask}-mask,{weight}-weight]",
            ds=ds,
            searcher=searcher,
            k=k,
            lam=global_lam,
            distance_power=distance_power,
            net=net,
            threshold=threshold_for_fraction(calib_lams, fraction) if mask == "learned" else -1.0,
            mask=mask,
            weight=weight,
            mask_fraction=fraction,
            mask_seed=seed if seed is not None else 0,
            config_hash=config_hash,
        )
        rows.append(
            {
                "fraction": fraction,
                "mask": mask,
                "weight": weight,
                "seed": seed,
                "perplexity": report.perplexity,
                "tokens_per_s": report.tokens_per_s,
                "retrieval_fraction": report.retrieval_fraction,
            }
        )

    for fraction in fractions:
        for weight in ("learned", "constant"):
            run("learned", weight, fraction, None)
            for seed in seeds:
                run("random", weight, fraction, seed)
    return rows


# --- speed benchmarking -------------------------------------------------------

def bench_speed(
    runners: dict[str, Callable[[], EvalReport]],
    repetitions: int = 3,
    baseline: str = "knnlm",
) -> list[EvalReport]:
    """Warm up each mode once, then report the median tokens/s of `repetitions`
    runs; speedups are relative to the baseline mode when it is present."""
    reports: list[EvalReport] = []
    for label, fn in runners.items():
        fn()  # warmup
        runs = [fn() for _ in range(max(1, repetitions))]
        rep = runs[-1]
        rep.tokens_per_s = statistics.median(r.tokens_per_s for r in runs)
        reports.append(rep)
    base = next((r.tokens_per_s for r in reports if r.label == baseline), None)
    if base is not None:
        for r in reports:
            r.speedup = r.tokens_per_s / base
    return reports


# --- config-driven pipeline loading --------------------------------------------

def mode_artifact_paths(cfg, mode: str) -> dict[str, tuple[str, str]]:
    """Artifact paths a mode depends on, keyed by role, valued (path, build stage)."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    paths: dict[str, tuple[str, str]] = {"lm": (cfg.lm, "build-lm")}
    if mode == "nlm":
        return paths
    if mode in ("knnlm", "knnlm+ar"):
        paths["datastore"] = (cfg.datastore, "build-datastore")
        paths["index"] = (cfg.index, "build-index")
    elif mode == "knnlm+gm":
        paths["datastore"] = (cfg.datastore_gm, "prune --method gm")
        paths["index"] = (cfg.index_gm, "build-index")
    elif mode == "knnlm+dr":
        paths["datastore"] = (cfg.datastore_dr, "reduce")
        paths["index"] = (cfg.index_dr, "build-index")
    elif mode == "knnlm+all":
        paths["datastore"] = (cfg.datastore_all, "prune --method gm + reduce")
        paths["index"] = (cfg.index_all, "build-index")
    if mode == "knnlm+ar":
        paths["adaptor"] = (cfg.adaptor, "train-adaptor")
    elif mode == "knnlm+all":
        paths["adaptor"] = (cfg.adaptor_all, "train-adaptor")
    return paths


def load_pipeline(cfg, mode: str) -> dict:
    """Load the artifacts a mode needs, or fail naming the missing build stage."""
    from pathlib import Path

    from .adaptor import load_adaptor
    from .datastore import load_datastore
    from .index import load_index

    paths = mode_artifact_paths(cfg, mode)
    for role, (path, stage) in paths.items():
        if not Path(path).exists():
            raise ConfigError(
                f"mode {mode!r} needs the {role} artifact {path} - run `{stage}` first"
            )
    ref = ReferenceLm.load(paths["lm"][0])
    bundle: dict = {
        "ref": ref,
        "ds": None,
        "searcher": None,
        "net": None,
        "threshold": -1.0,
        "mask": "none",
        "weight": "constant",
    }
    if "datastore" in paths:
        ds = load_datastore(paths["datastore"][0])
        index = load_index(paths["index"][0])
        if index.dim != ds.dim:
            raise ConfigError(
                f"index dim {index.dim} does not match datastore dim {ds.dim} for mode {mode!r}"
            )
        bundle["ds"] = ds
        bundle["searcher"] = IvfSearcher(index, ds, nprobe=min(cfg.nprobe, index.nlist))
    if "adaptor" in paths:
        net = load_adaptor(paths["adaptor"][0])
        bundle["net"] = net
        bundle["threshold"] = net.threshold if net.threshold is not None else -1.0
        bundle["mask"] = "learned"
        bundle["weight"] = "learned"
    return bundle


def evaluate_mode(cfg, mode: str, docs, label: str | None = None, config_hash: str = "") -> EvalReport:
    """Config-level entry: load the mode's artifacts and evaluate a corpus."""
    bundle = load_pipeline(cfg, mode)
    return evaluate(
        bundle["ref"],
        docs,
        label=label or mode,
        ds=bundle["ds"],
        searcher=bundle["searcher"],
        k=cfg.k,
        lam=cfg.lam,
        distance_power=cfg.distance_power,
        net=bundle["net"],
        threshold=bundle["threshold"],
        mask=bundle["mask"],
        weight=bundle["weight"],
        config_hash=config_hash,
        threads=cfg.threads,
        seed=cfg.seed,
    )


# --- combined-pipeline composition --------------------------------------------

def compose_all(
    ref: ReferenceLm,
    ds: Datastore,
    valid_docs,
    *,
    gm_k: int,
    dr_dim: int,
    dr_rotate: bool = True,
    k: int = 1024,
    nlist: int = 0,
    nprobe: int = 32,
    ivf_train_sample: int = 0,
    ivf_iters: int = 25,
    distance_power: float = 2.0,
    adaptor_config: AdaptorTrainConfig | None = None,
    seed: int = 0,
    use_flat_for_gm: bool = True,
) -> tuple[Datastore, IvfSearcher, AdaptorNet]:
    """Build the combined pipeline in the fixed order: greedy-merge the store,
    fit and apply PCA on the pruned keys, rebuild the index, then train the
    gate against the transformed retrieval behavior."""
    if use_flat_for_gm:
        gm_searcher = FlatSearcher(ds)
    else:
        base_nlist = nlist or default_nlist(len(ds))
        base_index = train_ivf(
            ds.keys, base_nlist, seed=seed, max_iters=ivf_iters, train_sample=ivf_train_sample
        )
        gm_searcher = IvfSearcher(base_index, ds, nprobe=min(nprobe, base_nlist))
    ds_gm = greedy_merge(ds, gm_searcher, gm_k)
    ds_all = reduce_datastore(ds_gm, d_out=dr_dim, rotate=dr_rotate, seed=seed)
    final_nlist = nlist or default_nlist(len(ds_all))
    index = train_ivf(
        ds_all.keys, final_nlist, seed=seed, max_iters=ivf_iters, train_sample=ivf_train_sample
    )
    searcher = IvfSearcher(index, ds_all, nprobe=min(nprobe, final_nlist))
    cfg = adaptor_config or AdaptorTrainConfig(seed=seed)
    dataset = build_adaptor_dataset(
        ref, ds_all, searcher, valid_docs, k=k, distance_power=distance_power
    )
    net, _ = train_adaptor(dataset, cfg)
    return ds_all, searcher, net
