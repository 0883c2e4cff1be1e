"""The retrieval adaptor: a small MLP that predicts the per-context
interpolation weight and gates datastore queries.

Inputs are the context key vector plus ten scalar signals (base-LM confidence
and entropy, and log-frequency / log-fertility of the last 1..4 context
tokens). Each scalar is lifted to an m-dim embedding by a tiny two-layer net
before concatenation; the trunk is an MLP with ReLU and dropout whose two
output logits pass through a log-softmax, giving log(weight) and
log(1 - weight).

Training maximizes the interpolated log-likelihood minus an L1 penalty on the
predicted weight; the penalty pushes weights toward zero so that a quantile
threshold can skip a chosen fraction of retrievals. Everything is plain
numpy with reverse-mode gradients written out by hand, so gradients can be
checked against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .binio import Reader, Writer
from .errors import FormatError, InvalidInputError
from .reference_lm import StepOutput, SuffixTables

MAGIC = b"KNNA"
VERSION = 1

SCALAR_FEATURES = (
    "conf",
    "ent",
    "freq1",
    "freq2",
    "freq3",
    "freq4",
    "fert1",
    "fert2",
    "fert3",
    "fert4",
)
FEATURE_NAMES = ("ctx",) + SCALAR_FEATURES

FEATURE_PRESETS = {
    "all": FEATURE_NAMES,
    "no-freq": tuple(n for n in FEATURE_NAMES if not n.startswith("freq")),
}


def resolve_feature_mask(spec: str | Sequence[str]) -> tuple[str, ...]:
    """Normalize a preset name or explicit feature list to canonical order."""
    if isinstance(spec, str):
        if spec in FEATURE_PRESETS:
            wanted = set(FEATURE_PRESETS[spec])
        else:
            wanted = {s.strip() for s in spec.split(",") if s.strip()}
    else:
        wanted = set(spec)
    unknown = wanted - set(FEATURE_NAMES)
    if unknown:
        raise InvalidInputError(f"unknown feature names: {sorted(unknown)}")
    mask = tuple(n for n in FEATURE_NAMES if n in wanted)
    if not mask:
        raise InvalidInputError("feature mask selects no features")
    return mask


def mask_to_bits(mask: Sequence[str]) -> int:
    return sum(1 << i for i, name in enumerate(FEATURE_NAMES) if name in set(mask))


def bits_to_mask(bits: int) -> tuple[str, ...]:
    return tuple(name for i, name in enumerate(FEATURE_NAMES) if bits & (1 << i))


@dataclass
class FeatureVector:
    """Raw (unstandardized) gate inputs for one context."""

    ctx: np.ndarray  # (d,) context key vector
    conf: float  # max of the base-LM distribution
    ent: float  # entropy of the base-LM distribution, nats
    log_freq: np.ndarray  # (4,) ln(1 + suffix frequency), n = 1..4
    log_fert: np.ndarray  # (4,) ln(1 + suffix fertility), n = 1..4

    def scalars(self) -> np.ndarray:
        return np.concatenate(
            [[self.conf, self.ent], self.log_freq, self.log_fert]
        ).astype(np.float64)


def extract_features(
    p_nlm: np.ndarray,
    ctx_vec: np.ndarray,
    tables: SuffixTables,
    tail: Sequence[int],
) -> FeatureVector:
    """Assemble the gate's inputs from one LM step and the suffix tables.

    `tail` is the BOS-padded last max_n context tokens. Suffixes unseen in the
    table corpus contribute ln(1) = 0.
    """
    tail = tuple(int(t) for t in tail)
    if len(tail) != tables.max_n:
        raise InvalidInputError(f"expected a {tables.max_n}-token context tail, got {len(tail)}")
    p = np.asarray(p_nlm, dtype=np.float64)
    conf = float(p.max())
    ent = float(-np.sum(p * np.log(p)))
    log_freq = np.empty(tables.max_n, dtype=np.float64)
    log_fert = np.empty(tables.max_n, dtype=np.float64)
    for n in range(1, tables.max_n + 1):
        f, t = tables.lookup(tail[tables.max_n - n :])
        log_freq[n - 1] = math.log(f + 1.0)
        log_fert[n - 1] = math.log(t + 1.0)
    return FeatureVector(
        ctx=np.asarray(ctx_vec, dtype=np.float64),
        conf=conf,
        ent=ent,
        log_freq=log_freq,
        log_fert=log_fert,
    )


class AdaptorNet:
    """Gate network; parameters live in a name->array dict for easy checking."""

    def __init__(
        self,
        ctx_dim: int,
        feature_mask: Sequence[str] = FEATURE_NAMES,
        m: int | None = None,
        hidden_units: int = 128,
        hidden_layers: int = 4,
        dropout: float = 0.2,
        seed: int = 0,
    ):
        self.ctx_dim = ctx_dim
        self.feature_mask = resolve_feature_mask(feature_mask)
        self.m = m if m is not None else max(4, ctx_dim // len(SCALAR_FEATURES))
        self.hidden_units = hidden_units
        self.hidden_layers = hidden_layers
        self.dropout = dropout
        self.seed = seed
        self.scalar_mean = np.zeros(len(SCALAR_FEATURES), dtype=np.float64)
        self.scalar_std = np.ones(len(SCALAR_FEATURES), dtype=np.float64)
        self.threshold: float | None = None

        self.use_ctx = "ctx" in self.feature_mask
        self.active_scalars = [
            i for i, name in enumerate(SCALAR_FEATURES) if name in self.feature_mask
        ]
        self.concat_dim = (ctx_dim if self.use_ctx else 0) + self.m * len(self.active_scalars)
        if self.concat_dim == 0:
            raise InvalidInputError("feature mask leaves the gate with no inputs")

        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        self._order: list[str] = []
        for i in self.active_scalars:
            name = SCALAR_FEATURES[i]
            self._add(rng, f"emb_{name}_w1", (self.m,), fan_in=1)
            self._add(rng, f"emb_{name}_b1", (self.m,), fan_in=1)
            self._add(rng, f"emb_{name}_w2", (self.m, self.m), fan_in=self.m)
            self._add(rng, f"emb_{name}_b2", (self.m,), fan_in=self.m)
        widths = [self.concat_dim] + [hidden_units] * (1 + hidden_layers)
        for layer in range(1 + hidden_layers):
            self._add(rng, f"trunk_{layer}_w", (widths[layer + 1], widths[layer]), fan_in=widths[layer])
            self._add(rng, f"trunk_{layer}_b", (widths[layer + 1],), fan_in=widths[layer])
        self._add(rng, "out_w", (2, hidden_units), fan_in=hidden_units)
        self._add(rng, "out_b", (2,), fan_in=hidden_units)

    def _add(self, rng: np.random.Generator, name: str, shape: tuple, fan_in: int) -> None:
        bound = 1.0 / math.sqrt(fan_in)
        self.params[name] = rng.uniform(-bound, bound, size=shape)
        self._order.append(name)

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def set_standardization(self, mean: np.ndarray, std: np.ndarray) -> None:
        self.scalar_mean = np.asarray(mean, dtype=np.float64)
        self.scalar_std = np.maximum(np.asarray(std, dtype=np.float64), 1e-8)

    # --- forward / backward -------------------------------------------------

    def forward(
        self,
        ctx: np.ndarray,
        scalars: np.ndarray,
        dropout_rng: np.random.Generator | None = None,
    ) -> tuple[np.ndarray, dict]:
        """Batch forward pass; returns ((B, 2) log-softmax outputs, cache)."""
        ctx = np.atleast_2d(np.asarray(ctx, dtype=np.float64))
        scalars = np.atleast_2d(np.asarray(scalars, dtype=np.float64))
        if not (np.all(np.isfinite(ctx)) and np.all(np.isfinite(scalars))):
            raise InvalidInputError("gate features must be finite")
        std = (scalars - self.scalar_mean) / self.scalar_std
        p = self.params
        cache: dict = {"emb": {}, "trunk": [], "ctx_active": self.use_ctx}
        parts = [ctx] if self.use_ctx else []
        for i in self.active_scalars:
            name = SCALAR_FEATURES[i]
            x = std[:, i]
            pre1 = x[:, None] * p[f"emb_{name}_w1"][None, :] + p[f"emb_{name}_b1"]
            h1 = np.maximum(pre1, 0.0)
            e = h1 @ p[f"emb_{name}_w2"].T + p[f"emb_{name}_b2"]
            cache["emb"][name] = (x, pre1, h1)
            parts.append(e)
        a = np.concatenate(parts, axis=1)
        cache["concat"] = a
        for layer in range(1 + self.hidden_layers):
            inp = a
            pre = a @ p[f"trunk_{layer}_w"].T + p[f"trunk_{layer}_b"]
            a = np.maximum(pre, 0.0)
            if dropout_rng is not None and self.dropout > 0.0:
                mask = (dropout_rng.random(a.shape) >= self.dropout) / (1.0 - self.dropout)
                a = a * mask
            else:
                mask = None
            cache["trunk"].append((inp, pre, mask))
        cache["last"] = a
        logits = a @ p["out_w"].T + p["out_b"]
        shift = logits.max(axis=1, keepdims=True)
        lse = shift + np.log(np.exp(logits - shift).sum(axis=1, keepdims=True))
        logsm = logits - lse
        cache["logsm"] = logsm
        return logsm, cache

    def backward(self, g_logsm: np.ndarray, cache: dict) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss given dLoss/dlogsm; mirrors `forward`."""
        p = self.params
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        soft = np.exp(cache["logsm"])
        g_logits = g_logsm - soft * g_logsm.sum(axis=1, keepdims=True)
        grads["out_w"] = g_logits.T @ cache["last"]
        grads["out_b"] = g_logits.sum(axis=0)
        ga = g_logits @ p["out_w"]
        for layer in range(self.hidden_layers, -1, -1):
            inp, pre, mask = cache["trunk"][layer]
            if mask is not None:
                ga = ga * mask
            ga = np.where(pre > 0.0, ga, 0.0)
            grads[f"trunk_{layer}_w"] = ga.T @ inp
            grads[f"trunk_{layer}_b"] = ga.sum(axis=0)
            ga = ga @ p[f"trunk_{layer}_w"]
        offset = self.ctx_dim if self.use_ctx else 0
        for i in self.active_scalars:
            name = SCALAR_FEATURES[i]
            ge = ga[:, offset : offset + self.m]
            offset += self.m
            x, pre1, h1 = cache["emb"][name]
            grads[f"emb_{name}_w2"] = ge.T @ h1
            grads[f"emb_{name}_b2"] = ge.sum(axis=0)
            gh1 = ge @ p[f"emb_{name}_w2"]
            gh1 = np.where(pre1 > 0.0, gh1, 0.0)
            grads[f"emb_{name}_w1"] = (gh1 * x[:, None]).sum(axis=0)
            grads[f"emb_{name}_b1"] = gh1.sum(axis=0)
        return grads

    def lambdas(self, ctx: np.ndarray, scalars: np.ndarray) -> np.ndarray:
        """Deterministic (dropout-off) interpolation weights for a batch."""
        logsm, _ = self.forward(ctx, scalars)
        return np.exp(logsm[:, 0])

    def lambda_for(self, features: FeatureVector) -> float:
        loglam, _ = adaptor_forward(self, features)
        return float(math.exp(loglam))

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        for k in self.params:
            self.params[k] = params[k].copy()


def adaptor_forward(
    net: AdaptorNet,
    features: FeatureVector,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[float, float]:
    """Single-context forward: returns (log weight, log (1 - weight))."""
    if train_mode and rng is None:
        raise InvalidInputError("train_mode forward needs a dropout rng")
    logsm, _ = net.forward(
        features.ctx[None, :], features.scalars()[None, :], dropout_rng=rng if train_mode else None
    )
    return float(logsm[0, 0]), float(logsm[0, 1])


def adaptor_loss_and_grad(
    net: AdaptorNet,
    ctx: np.ndarray,
    scalars: np.ndarray,
    p_knn: np.ndarray,
    p_nlm: np.ndarray,
    l1_coeff: float,
    dropout_rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean negative interpolated log-likelihood plus L1 pressure on the weight.

    loss = mean_t [ -log(w_t * p_knn_t + (1 - w_t) * p_nlm_t) + l1 * w_t ]
    where w_t is the predicted weight. Gradients flow through the full net.
    """
    pk = np.asarray(p_knn, dtype=np.float64)
    pn = np.asarray(p_nlm, dtype=np.float64)
    logsm, cache = net.forward(ctx, scalars, dropout_rng=dropout_rng)
    lam = np.exp(logsm[:, 0])
    one_m = np.exp(logsm[:, 1])
    p = np.maximum(lam * pk + one_m * pn, 1e-300)
    b = lam.shape[0]
    loss = float(np.mean(-np.log(p) + l1_coeff * lam))
    g = np.empty_like(logsm)
    g[:, 0] = (-(pk / p) * lam + l1_coeff * lam) / b
    g[:, 1] = (-(pn / p) * one_m) / b
    return loss, net.backward(g, cache)


# --- training ----------------------------------------------------------------

@dataclass
class AdaptorDataset:
    """Per-token training records: features plus the two target probabilities."""

    ctx: np.ndarray  # (N, d)
    scalars: np.ndarray  # (N, 10)
    p_knn: np.ndarray  # (N,) neighbor-distribution probability of the target
    p_nlm: np.ndarray  # (N,) base-LM probability of the target

    def __len__(self) -> int:
        return self.ctx.shape[0]

    def slice(self, idx) -> "AdaptorDataset":
        return AdaptorDataset(self.ctx[idx], self.scalars[idx], self.p_knn[idx], self.p_nlm[idx])


@dataclass
class AdaptorTrainConfig:
    l1_coeff: float = 0.05
    learning_rate: float = 0.0005
    epochs: int = 20
    batch_size: int = 256
    validation_split: float = 0.1
    prune_fraction: float = 0.5
    features: str = "all"
    hidden_units: int = 128
    hidden_layers: int = 4
    dropout: float = 0.2
    m: int | None = None
    patience: int = 5
    seed: int = 0


def select_lambda_threshold(lams: np.ndarray, prune_fraction: float) -> float:
    """Quantile cut: the weight below (or at) which a token skips retrieval.

    Returns -1.0 at fraction 0 so nothing is ever skipped.
    """
    if not 0.0 <= prune_fraction < 1.0:
        raise InvalidInputError(f"prune fraction must be in [0, 1), got {prune_fraction}")
    lams = np.sort(np.asarray(lams, dtype=np.float64))
    n = lams.shape[0]
    if n == 0:
        raise InvalidInputError("no weight values to select a threshold from")
    q = int(math.ceil(prune_fraction * n - 1e-9))
    if q <= 0:
        return -1.0
    return float(lams[q - 1])


def gated_perplexity(
    lams: np.ndarray, p_knn: np.ndarray, p_nlm: np.ndarray, threshold: float
) -> float:
    """Perplexity when weights at or below the threshold fall back to the base LM."""
    lams = np.asarray(lams, dtype=np.float64)
    mix = np.where(lams <= threshold, p_nlm, lams * p_knn + (1.0 - lams) * p_nlm)
    return float(np.exp(-np.mean(np.log(np.maximum(mix, 1e-300)))))


def train_adaptor(
    dataset: AdaptorDataset, config: AdaptorTrainConfig
) -> tuple[AdaptorNet, list[dict]]:
    """Mini-batch Adam training with checkpoint selection on held-out perplexity.

    The last `validation_split` fraction of the dataset is held out; the
    checkpoint kept is the epoch whose held-out perplexity at the configured
    retrieval-pruning fraction is lowest, and the stored threshold is the
    weight quantile of that checkpoint on the held-out split.
    """
    n = len(dataset)
    if n == 0:
        raise InvalidInputError("adaptor dataset is empty")
    if not 0.0 < config.validation_split < 1.0:
        raise InvalidInputError("validation split must be in (0, 1)")
    n_hold = int(round(config.validation_split * n))
    n_train = n - n_hold
    if n_train == 0:
        raise InvalidInputError("validation split leaves no training data")
    train = dataset.slice(slice(0, n_train))
    hold = dataset.slice(slice(n_train, n)) if n_hold > 0 else train

    net = AdaptorNet(
        ctx_dim=dataset.ctx.shape[1],
        feature_mask=resolve_feature_mask(config.features),
        m=config.m,
        hidden_units=config.hidden_units,
        hidden_layers=config.hidden_layers,
        dropout=config.dropout,
        seed=config.seed,
    )
    net.set_standardization(train.scalars.mean(axis=0), train.scalars.std(axis=0))

    rng = np.random.default_rng([config.seed, 1])
    adam_m = {k: np.zeros_like(v) for k, v in net.params.items()}
    adam_v = {k: np.zeros_like(v) for k, v in net.params.items()}
    step = 0
    best = (math.inf, None)
    log: list[dict] = []
    since_best = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(n_train)
        total_loss = 0.0
        n_batches = 0
        for lo in range(0, n_train, config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            loss, grads = adaptor_loss_and_grad(
                net,
                train.ctx[idx],
                train.scalars[idx],
                train.p_knn[idx],
                train.p_nlm[idx],
                config.l1_coeff,
                dropout_rng=rng,
            )
            step += 1
            for k, g in grads.items():
                adam_m[k] = 0.9 * adam_m[k] + 0.1 * g
                adam_v[k] = 0.999 * adam_v[k] + 0.001 * (g * g)
                mhat = adam_m[k] / (1.0 - 0.9**step)
                vhat = adam_v[k] / (1.0 - 0.999**step)
                net.params[k] -= config.learning_rate * mhat / (np.sqrt(vhat) + 1e-8)
            total_loss += loss
            n_batches += 1
        lams = net.lambdas(hold.ctx, hold.scalars)
        thr = (
            select_lambda_threshold(lams, config.prune_fraction)
            if config.prune_fraction > 0.0
            else -1.0
        )
        ppl = gated_perplexity(lams, hold.p_knn, hold.p_nlm, thr)
        log.append(
            {
                "epoch": epoch,
                "train_loss": total_loss / max(1, n_batches),
                "heldout_ppl": ppl,
                "mean_lambda": float(lams.mean()),
            }
        )
        if ppl < best[0]:
            best = (ppl, net.copy_params())
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    if best[1] is not None:
        net.load_params(best[1])
    lams = net.lambdas(hold.ctx, hold.scalars)
    net.threshold = (
        select_lambda_threshold(lams, config.prune_fraction)
        if config.prune_fraction > 0.0
        else -1.0
    )
    return net, log


def adaptive_predict(
    net: AdaptorNet,
    threshold: float,
    step: StepOutput,
    tables: SuffixTables,
    searcher,
    ds,
    k: int,
    tail: Sequence[int],
    distance_power: float = 2.0,
) -> tuple[np.ndarray, bool]:
    """Gate one prediction: skip retrieval (weight at or below threshold) or
    retrieve and interpolate with the learned weight.

    Returns the full-vocabulary distribution and whether a search was issued.
    """
    from .distribution import interpolate, rescale_distances, weighted_knn_distribution

    features = extract_features(step.p_nlm, step.ctx_vec, tables, tail)
    lam = net.lambda_for(features)
    if lam <= threshold:
        return step.p_nlm.copy(), False
    query = ds.map_query(step.ctx_vec)
    hits = rescale_distances(searcher.search(query, k), distance_power)
    p_knn = weighted_knn_distribution(hits)
    return interpolate(p_knn, step.p_nlm, lam), True


# --- serialization -----------------------------------------------------------

def save_adaptor(net: AdaptorNet, path: str | Path) -> None:
    w = Writer()
    w.magic(MAGIC)
    w.u32(VERSION)
    w.u32(net.ctx_dim)
    w.u32(net.m)
    w.u32(net.hidden_units)
    w.u32(net.hidden_layers)
    w.f64(net.dropout)
    w.u32(mask_to_bits(net.feature_mask))
    w.f64(float("nan") if net.threshold is None else net.threshold)
    w.array(net.scalar_mean, "<f8")
    w.array(net.scalar_std, "<f8")
    w.u32(len(net._order))
    for name in net._order:
        arr = net.params[name]
        w.blob(name.encode("utf-8"))
        w.u32(arr.ndim)
        for d in arr.shape:
            w.u32(d)
        w.array(arr, "<f4")
    Path(path).write_bytes(w.getvalue())


def load_adaptor(path: str | Path) -> AdaptorNet:
    buf = Path(path).read_bytes()
    r = Reader(buf, name=str(path))
    r.expect_magic(MAGIC)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}", 4)
    ctx_dim = r.u32("ctx dim")
    m = r.u32("embed dim")
    hidden_units = r.u32("hidden units")
    hidden_layers = r.u32("hidden layers")
    dropout = r.f64("dropout")
    mask = bits_to_mask(r.u32("feature mask"))
    threshold = r.f64("threshold")
    scalar_mean = r.array("<f8", len(SCALAR_FEATURES), "scalar means")
    scalar_std = r.array("<f8", len(SCALAR_FEATURES), "scalar stds")
    net = AdaptorNet(
        ctx_dim=ctx_dim,
        feature_mask=mask,
        m=m,
        hidden_units=hidden_units,
        hidden_layers=hidden_layers,
        dropout=dropout,
    )
    net.scalar_mean = scalar_mean
    net.scalar_std = scalar_std
    net.threshold = None if math.isnan(threshold) else threshold
    n_tensors = r.u32("tensor count")
    for _ in range(n_tensors):
        name = r.blob("tensor name").decode("utf-8")
        ndim = r.u32("tensor ndim")
        shape = tuple(r.u32("tensor dim") for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        data = r.array("<f4", size, f"tensor {name}").astype(np.float64).reshape(shape)
        if name not in net.params:
            raise FormatError(f"{path}: unexpected tensor {name!r}", r.offset)
        if net.params[name].shape != data.shape:
            raise FormatError(f"{path}: tensor {name!r} has shape {data.shape}", r.offset)
        net.params[name] = data
    r.expect_end()
    return net
