"""Fusion operators mapping aligned modality views to one joint item vector.

Concat and Avg need no fitting. PCA projects the centred concatenation onto its
leading right singular vectors. CCA whitens each view with a ridge-regularised
inverse square root of its covariance and takes the SVD of the whitened
cross-covariance; the two sets of canonical variates are concatenated.

Fitting runs in float64 regardless of the input precision.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .embed_store import EmbeddingMatrix


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class Concat:
    pass


@dataclass(frozen=True)
class Avg:
    pass


@dataclass(frozen=True)
class Pca:
    target_dim: int = 128
    standardize: bool = False

    def __post_init__(self):
        if self.target_dim < 1:
            raise FusionError("target_dim must be >= 1")


@dataclass(frozen=True)
class Cca:
    per_view_dim: int = 32
    ridge: float = 1e-3

    def __post_init__(self):
        if self.per_view_dim < 1:
            raise FusionError("per_view_dim must be >= 1")
        if self.ridge < 0:
            raise FusionError("ridge must be >= 0")


FusionKind = Union[Concat, Avg, Pca, Cca]
_KIND_NAMES = {Concat: "concat", Avg: "avg", Pca: "pca", Cca: "cca"}
_KIND_CODES = {"concat": 0, "avg": 1, "pca": 2, "cca": 3}


def kind_name(kind: FusionKind) -> str:
    return _KIND_NAMES[type(kind)]


@dataclass(frozen=True, eq=False)
class FusionModel:
    kind: FusionKind
    input_dims: tuple[int, ...]
    output_dim: int
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def correlations(self) -> np.ndarray | None:
        return self.params.get("rho")

    @property
    def explained_variance_ratio(self) -> np.ndarray | None:
        return self.params.get("explained_variance_ratio")


@dataclass(frozen=True, eq=False)
class FusedSpace:
    ids: np.ndarray
    vectors: np.ndarray
    model: FusionModel

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row_index(self) -> dict[int, int]:
        return {int(i): k for k, i in enumerate(self.ids)}


def _check_aligned(views: Sequence[EmbeddingMatrix]) -> np.ndarray:
    if not views:
        raise FusionError("at least one view required")
    ids = views[0].ids
    for v in views[1:]:
        if v.ids.shape != ids.shape or not np.array_equal(v.ids, ids):
            raise FusionError("views are not id-aligned; run align_ids first")
    return ids


def _check_dims(model: FusionModel, views: Sequence[EmbeddingMatrix]) -> None:
    dims = tuple(v.dim for v in views)
    if dims != model.input_dims:
        raise FusionError(f"view dims {dims} do not match fitted dims {model.input_dims}")


def _stack(views: Sequence[EmbeddingMatrix]) -> np.ndarray:
    return np.hstack([np.asarray(v.vectors, dtype=np.float64) for v in views])


def _flip_signs(vecs: np.ndarray, *others: np.ndarray, rule: str) -> None:
    """Fix column signs in place, flipping matching columns of ``others`` too.

    ``rule="first"``: first non-negligible loading positive.
    ``rule="maxabs"``: largest-magnitude loading positive.
    """
    for j in range(vecs.shape[1]):
        col = vecs[:, j]
        scale = np.max(np.abs(col))
        if scale == 0:
            continue
        if rule == "first":
            pivot = col[np.nonzero(np.abs(col) > 1e-12 * scale)[0][0]]
        else:
            pivot = col[np.argmax(np.abs(col))]
        if pivot < 0:
            vecs[:, j] *= -1
            for o in others:
                o[:, j] *= -1


# --- stateless operators -------------------------------------------------


def fuse_concat(views: Sequence[EmbeddingMatrix]) -> FusedSpace:
    ids = _check_aligned(views)
    dims = tuple(v.dim for v in views)
    model = FusionModel(Concat(), dims, sum(dims))
    return FusedSpace(ids, _stack(views), model)


def fuse_avg(views: Sequence[EmbeddingMatrix]) -> FusedSpace:
    ids = _check_aligned(views)
    dims = tuple(v.dim for v in views)
    if len(set(dims)) != 1:
        raise FusionError(f"avg fusion needs equal view dims, got {dims}")
    stacked = np.stack([np.asarray(v.vectors, dtype=np.float64) for v in views])
    model = FusionModel(Avg(), dims, dims[0])
    return FusedSpace(ids, stacked.mean(axis=0), model)


# --- PCA -----------------------------------------------------------------


def fit_pca(views: Sequence[EmbeddingMatrix], target_dim: int = 128, standardize: bool = False) -> FusionModel:
    """Fit PCA on the concatenated views.

    Raises if ``target_dim`` exceeds the numerical rank of the centred data:
    projection rows are never padded.
    """
    _check_aligned(views)
    x = _stack(views)
    n, d = x.shape
    if n < 2:
        raise FusionError("PCA needs at least 2 items")
    if target_dim > min(n, d):
        raise FusionError(f"target_dim {target_dim} exceeds min(n_items={n}, dim={d})")
    mean = x.mean(axis=0)
    xc = x - mean
    scale = np.ones(d)
    if standardize:
        std = xc.std(axis=0, ddof=1)
        scale = np.where(std > 0, std, 1.0)
        xc = xc / scale
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    tol = (s[0] if s.size else 0.0) * max(n, d) * np.finfo(np.float64).eps
    rank = int(np.sum(s > tol))
    if target_dim > rank:
        raise FusionError(f"target_dim {target_dim} exceeds numerical rank {rank} of the data")
    components = vt[:target_dim].T.copy()  # (d, target_dim)
    _flip_signs(components, rule="maxabs")
    var = s**2 / (n - 1)
    total = var.sum()
    ratio = var[:target_dim] / total if total > 0 else np.zeros(target_dim)
    params = {
        "mean": mean,
        "scale": scale,
        "components": components.T.copy(),  # (target_dim, d), orthonormal rows
        "explained_variance": var[:target_dim].copy(),
        "explained_variance_ratio": ratio,
        "singular_values": s[:target_dim].copy(),
    }
    dims = tuple(v.dim for v in views)
    return FusionModel(Pca(target_dim, standardize), dims, target_dim, params)


def transform_pca(model: FusionModel, views: Sequence[EmbeddingMatrix]) -> FusedSpace:
    ids = _check_aligned(views)
    _check_dims(model, views)
    p = model.params
    z = ((_stack(views) - p["mean"]) / p["scale"]) @ p["components"].T
    return FusedSpace(ids, z, model)


# --- CCA -----------------------------------------------------------------


def _inv_sqrt(cov: np.ndarray, ridge: float) -> tuple[np.ndarray, int]:
    """Regularised inverse square root via eigh; returns (matrix, rank).

    With ``ridge == 0`` the null space is discarded (pseudo-inverse root).
    """
    d = cov.shape[0]
    if ridge > 0:
        level = float(np.mean(np.diag(cov)))
        cov = cov + ridge * (level if level > 0 else 1.0) * np.eye(d)
    evals, evecs = np.linalg.eigh(cov)
    tol = max(evals.max(initial=0.0), 0.0) * d * np.finfo(np.float64).eps * 10
    keep = evals > tol
    inv_root = (evecs[:, keep] / np.sqrt(evals[keep])) @ evecs[:, keep].T
    return inv_root, int(keep.sum())


def fit_cca(view_a: EmbeddingMatrix, view_b: EmbeddingMatrix, per_view_dim: int = 32, ridge: float = 1e-3) -> FusionModel:
    """Regularised CCA between two aligned views.

    ``ridge`` is relative to the mean diagonal of each view's covariance.
    Canonical directions are sign-normalised so the first non-negligible
    loading of each view-A direction is positive.
    """
    _check_aligned([view_a, view_b])
    xa = np.asarray(view_a.vectors, dtype=np.float64)
    xb = np.asarray(view_b.vectors, dtype=np.float64)
    n = xa.shape[0]
    if n < 3:
        raise FusionError(f"CCA needs at least 3 items, got {n}")
    if per_view_dim > min(view_a.dim, view_b.dim, n - 1):
        raise FusionError(
            f"per_view_dim {per_view_dim} exceeds min(d_a={view_a.dim}, d_b={view_b.dim}, n-1={n - 1})"
        )
    mu_a, mu_b = xa.mean(axis=0), xb.mean(axis=0)
    ca, cb = xa - mu_a, xb - mu_b
    saa = ca.T @ ca / (n - 1)
    sbb = cb.T @ cb / (n - 1)
    sab = ca.T @ cb / (n - 1)
    wa, rank_a = _inv_sqrt(saa, ridge)
    wb, rank_b = _inv_sqrt(sbb, ridge)
    if per_view_dim > min(rank_a, rank_b):
        raise FusionError(
            f"per_view_dim {per_view_dim} exceeds attainable rank {min(rank_a, rank_b)}; increase ridge"
        )
    u, s, vt = np.linalg.svd(wa @ sab @ wb)
    proj_a = wa @ u[:, :per_view_dim]
    proj_b = wb @ vt[:per_view_dim].T
    _flip_signs(proj_a, proj_b, rule="first")
    params = {
        "mean_a": mu_a,
        "mean_b": mu_b,
        "proj_a": proj_a,
        "proj_b": proj_b,
        "rho": s[:per_view_dim].copy(),
    }
    return FusionModel(Cca(per_view_dim, ridge), (view_a.dim, view_b.dim), 2 * per_view_dim, params)


def transform_cca(model: FusionModel, view_a: EmbeddingMatrix, view_b: EmbeddingMatrix) -> FusedSpace:
    ids = _check_aligned([view_a, view_b])
    _check_dims(model, [view_a, view_b])
    p = model.params
    za = (np.asarray(view_a.vectors, dtype=np.float64) - p["mean_a"]) @ p["proj_a"]
    zb = (np.asarray(view_b.vectors, dtype=np.float64) - p["mean_b"]) @ p["proj_b"]
    return FusedSpace(ids, np.hstack([za, zb]), model)


# --- generic entry points ------------------------------------------------


def fit(kind: FusionKind, views: Sequence[EmbeddingMatrix]) -> FusionModel:
    if isinstance(kind, Concat):
        dims = tuple(v.dim for v in views)
        return FusionModel(kind, dims, sum(dims))
    if isinstance(kind, Avg):
        dims = tuple(v.dim for v in views)
        if len(set(dims)) != 1:
            raise FusionError(f"avg fusion needs equal view dims, got {dims}")
        return FusionModel(kind, dims, dims[0])
    if isinstance(kind, Pca):
        return fit_pca(views, kind.target_dim, kind.standardize)
    if isinstance(kind, Cca):
        if len(views) != 2:
            raise FusionError(f"CCA takes exactly two views, got {len(views)}")
        return fit_cca(views[0], views[1], kind.per_view_dim, kind.ridge)
    raise FusionError(f"unknown fusion kind {kind!r}")


def transform(model: FusionModel, views: Sequence[EmbeddingMatrix]) -> FusedSpace:
    kind = model.kind
    if isinstance(kind, (Concat, Avg)):
        _check_dims(model, views)
        return fuse_concat(views) if isinstance(kind, Concat) else fuse_avg(views)
    if isinstance(kind, Pca):
        return transform_pca(model, views)
    if len(views) != 2:
        raise FusionError(f"CCA takes exactly two views, got {len(views)}")
    return transform_cca(model, views[0], views[1])


def fit_transform(kind: FusionKind, views: Sequence[EmbeddingMatrix]) -> FusedSpace:
    return transform(fit(kind, views), views)


# --- FUS1 sidecar --------------------------------------------------------

FUS_MAGIC = b"FUS1"
FUS_VERSION = 1
_FUS_HEADER = struct.Struct("<4sHHI")


def save_model(model: FusionModel, path: str | Path) -> None:
    """Write ``FUS1``: magic, u16 version, u16 kind code, u32 meta length,
    JSON meta, float64 arrays in meta order, u32 CRC32 of meta + arrays."""
    name = kind_name(model.kind)
    arrays = sorted(model.params)
    meta = {
        "kind": name,
        "kind_args": asdict(model.kind),
        "input_dims": list(model.input_dims),
        "output_dim": model.output_dim,
        "arrays": [[a, list(model.params[a].shape)] for a in arrays],
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    body = io.BytesIO()
    body.write(meta_bytes)
    for a in arrays:
        body.write(np.ascontiguousarray(model.params[a], dtype="<f8").tobytes())
    payload = body.getvalue()
    with Path(path).open("wb") as fh:
        fh.write(_FUS_HEADER.pack(FUS_MAGIC, FUS_VERSION, _KIND_CODES[name], len(meta_bytes)))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_model(path: str | Path) -> FusionModel:
    data = Path(path).read_bytes()
    if len(data) < _FUS_HEADER.size + 4:
        raise FusionError(f"{path}: truncated")
    magic, version, code, meta_len = _FUS_HEADER.unpack_from(data)
    if magic != FUS_MAGIC:
        raise FusionError(f"{path}: bad magic {magic!r}")
    if version != FUS_VERSION:
        raise FusionError(f"{path}: unsupported version {version}")
    payload = data[_FUS_HEADER.size : -4]
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise FusionError(f"{path}: checksum mismatch")
    meta = json.loads(payload[:meta_len])
    if _KIND_CODES[meta["kind"]] != code:
        raise FusionError(f"{path}: kind code mismatch")
    kind_cls = {v: k for k, v in _KIND_NAMES.items()}[meta["kind"]]
    params = {}
    off = meta_len
    for name, shape in meta["arrays"]:
        size = int(np.prod(shape)) * 8
        if off + size > len(payload):
            raise FusionError(f"{path}: truncated array {name}")
        params[name] = np.frombuffer(payload, dtype="<f8", count=size // 8, offset=off).reshape(shape).copy()
        off += size
    return FusionModel(kind_cls(**meta["kind_args"]), tuple(meta["input_dims"]), meta["output_dim"], params)
