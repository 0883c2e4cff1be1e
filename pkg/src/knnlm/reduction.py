"""PCA dimension reduction for datastore keys and queries.

The fitted transform is `rotation @ components @ (x - mean)`: a centered
orthonormal projection onto the leading principal directions, optionally
followed by a random rotation that re-balances per-component variances.
The same transform must be applied to stored keys and to queries, so it
travels with the datastore (a "KNNT" section appended to the datastore file).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .binio import Reader, Writer
from .errors import InvalidInputError

SECTION_MAGIC = b"KNNT"
SECTION_VERSION = 1
DEFAULT_SAMPLE_CAP = 100_000


@dataclass
class PcaTransform:
    mean: np.ndarray  # (d_in,) float64
    components: np.ndarray  # (d_out, d_in) float64, rows orthonormal, variance-descending
    rotation: np.ndarray | None  # (d_out, d_out) float64 orthogonal, or None
    explained_variance: np.ndarray  # (d_out,) float64 fractions of total variance

    @property
    def d_in(self) -> int:
        return self.components.shape[1]

    @property
    def d_out(self) -> int:
        return self.components.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return apply_transform(self, x)


def random_rotation(d_out: int, seed: int) -> np.ndarray:
    """Seeded orthogonal matrix with determinant +1 (QR of a Gaussian draw)."""
    if d_out < 1:
        raise InvalidInputError(f"rotation dimension must be >= 1, got {d_out}")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((d_out, d_out))
    q, r = np.linalg.qr(a)
    q = q * np.where(np.diag(r) >= 0.0, 1.0, -1.0)[None, :]
    if np.linalg.det(q) < 0.0:
        q[-1, :] = -q[-1, :]
    return q


def fit_pca(
    keys: np.ndarray,
    d_out: int,
    sample_cap: int = DEFAULT_SAMPLE_CAP,
    seed: int = 0,
    rotate: bool = True,
) -> PcaTransform:
    """Fit the projection on (a uniform subsample of) the key matrix.

    Components are the top eigenvectors of the sample covariance, sign-fixed
    so each row's largest-magnitude entry is positive.
    """
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 2:
        raise InvalidInputError("keys must be a 2-D matrix")
    n, d = keys.shape
    if not 2 <= d_out <= d:
        raise InvalidInputError(f"d_out must be in [2, {d}], got {d_out}")
    if n < d_out + 1:
        raise InvalidInputError(f"need at least {d_out + 1} sample vectors, got {n}")
    rng = np.random.default_rng(seed)
    if sample_cap and n > sample_cap:
        idx = np.sort(rng.choice(n, size=sample_cap, replace=False))
        sample = keys[idx]
    else:
        sample = keys
    mean = sample.mean(axis=0)
    centered = sample - mean
    cov = (centered.T @ centered) / (sample.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)  # ascending
    order = np.argsort(eigvals)[::-1]
    eigvals = np.maximum(eigvals[order], 0.0)
    comps = eigvecs[:, order].T[:d_out].copy()
    for row in comps:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0.0:
            row *= -1.0
    total = eigvals.sum()
    explained = eigvals[:d_out] / total if total > 0.0 else np.zeros(d_out)
    rot = random_rotation(d_out, seed) if rotate else None
    return PcaTransform(mean=mean, components=comps, rotation=rot, explained_variance=explained)


def apply_transform(t: PcaTransform, x: np.ndarray) -> np.ndarray:
    """Project a vector or a row matrix; output keeps the input's arity."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    mat = x[None, :] if single else x
    if mat.shape[1] != t.d_in:
        raise InvalidInputError(f"input dimension {mat.shape[1]} != transform input dim {t.d_in}")
    y = (mat - t.mean) @ t.components.T
    if t.rotation is not None:
        y = y @ t.rotation.T
    return y[0] if single else y


def reduce_datastore(ds, d_out: int, rotate: bool = True, seed: int = 0, sample_cap: int = DEFAULT_SAMPLE_CAP):
    """Fit PCA on a datastore's keys and return the projected datastore.

    The transform is attached to the result so queries get mapped identically
    at search time. Reducing an already-reduced datastore is rejected; refit
    from the original instead.
    """
    if ds.transform is not None:
        raise InvalidInputError("datastore already carries a transform; reduce the original store")
    t = fit_pca(ds.keys, d_out=d_out, sample_cap=sample_cap, seed=seed, rotate=rotate)
    new_keys = apply_transform(t, ds.keys).astype(np.float32)
    note = f"reduce(dim={d_out},rotate={'on' if rotate else 'off'},seed={seed})"
    return ds.with_records(
        keys=new_keys, values=ds.values, weights=ds.weights, note=note, transform=t
    )


# --- KNNT section bytes ----------------------------------------------------

def transform_to_bytes(t: PcaTransform) -> bytes:
    w = Writer()
    w.magic(SECTION_MAGIC)
    w.u32(SECTION_VERSION)
    w.u32(t.d_in)
    w.u32(t.d_out)
    w.u32(1 if t.rotation is not None else 0)
    w.array(t.mean, "<f8")
    w.array(t.components, "<f8")
    w.array(t.explained_variance, "<f8")
    if t.rotation is not None:
        w.array(t.rotation, "<f8")
    return w.getvalue()


def transform_from_reader(r: Reader) -> PcaTransform:
    r.expect_magic(SECTION_MAGIC)
    version = r.u32("transform version")
    if version != SECTION_VERSION:
        raise InvalidInputError(f"unsupported transform section version {version}")
    d_in = r.u32("transform input dim")
    d_out = r.u32("transform output dim")
    has_rot = r.u32("transform rotation flag")
    mean = r.array("<f8", d_in, "transform mean")
    comps = r.array("<f8", d_out * d_in, "transform components").reshape(d_out, d_in)
    explained = r.array("<f8", d_out, "explained variance")
    rot = r.array("<f8", d_out * d_out, "rotation matrix").reshape(d_out, d_out) if has_rot else None
    return PcaTransform(mean=mean, components=comps, rotation=rot, explained_variance=explained)
