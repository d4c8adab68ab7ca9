"""TOML run configuration with strict key checking.

A minimal file needs only ``seed`` plus data and embedding paths::

    seed = 7

    [data]
    ratings = "ratings.csv"
    movies = "movies.csv"

    [embeddings]
    textual = "text.jsonl"
    visual = "visual.emb"

Relative paths resolve against the config file's directory. Unknown keys are
errors so typos never silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import tomli

from ..fusion import Avg, Cca, Concat, FusionKind, Pca
from ..profiles import Average, ProfileStrategy, Random, Temporal


class ConfigError(ValueError):
    pass


PIPELINES = ("retrieval_only", "manual", "llm")
FUSION_METHODS = ("none", "concat", "avg", "pca", "cca")


@dataclass(frozen=True)
class DataConfig:
    ratings: Path
    movies: Path | None = None
    tags: Path | None = None
    augmented: Path | None = None
    rating_min: float = 0.5
    rating_max: float = 5.0
    activity_min: int = 20
    activity_max: float = 100
    activity_mode: str = "keep"
    train_frac: float = 0.7
    eval_users: int = 120


@dataclass(frozen=True)
class FusionConfig:
    method: str = "cca"
    views: tuple[str, ...] = ("textual", "visual")
    dim: int = 64
    cca_dim_mode: str = "total"
    ridge: float = 1e-3
    standardize: bool = False


@dataclass(frozen=True)
class ProfileConfig:
    user_vector: str = "temporal"
    alpha: float = 1.0
    rating_threshold: float = 4.0
    time_mode: str = "standardized"
    cold_start: str = "error"


@dataclass(frozen=True)
class RerankConfig:
    pipeline: str = "retrieval_only"
    k: int = 10
    explainable: bool = False
    temperature: float = 0.7
    max_tokens: int = 200
    max_genres: int = 5
    max_tags: int = 10
    max_items: int = 20
    retries: int = 3
    backoff_s: float = 1.0
    max_in_flight: int = 4
    profile_fallback: str = "manual"


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock"
    mock_mode: str = "shuffle"
    replay_path: Path | None = None
    endpoint: str = ""
    model: str = ""
    api_key_env: str = ""
    timeout_s: float = 30.0


@dataclass(frozen=True)
class EvalConfig:
    relevance_threshold: float = 4.0
    tau_tail: float = 2


@dataclass(frozen=True)
class RunConfig:
    seed: int
    data: DataConfig
    embeddings: Mapping[str, Path]
    fusion: FusionConfig = field(default_factory=FusionConfig)
    profile: ProfileConfig = field(default_factory=ProfileConfig)
    retrieval_n: int = 50
    rerank: RerankConfig = field(default_factory=RerankConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: Path = Path("runs")
    run_name: str = "run"
    text_variant: str = ""

    @property
    def k(self) -> int:
        return self.rerank.k

    def fusion_kind(self) -> FusionKind:
        f = self.fusion
        if f.method in ("none", "concat"):
            return Concat()
        if f.method == "avg":
            return Avg()
        if f.method == "pca":
            return Pca(f.dim, f.standardize)
        per_view = f.dim // 2 if f.cca_dim_mode == "total" else f.dim
        return Cca(per_view, f.ridge)

    def profile_strategy(self) -> ProfileStrategy:
        p = self.profile
        if p.user_vector == "random":
            return Random(self.seed)
        if p.user_vector == "average":
            return Average(p.rating_threshold)
        return Temporal(p.rating_threshold, p.alpha, p.time_mode == "standardized")

    def with_n(self, n: int) -> "RunConfig":
        cfg = dataclasses.replace(self, retrieval_n=n)
        validate(cfg, check_files=False)
        return cfg

    def to_dict(self) -> dict:
        def conv(v):
            if isinstance(v, Path):
                return str(v)
            if isinstance(v, tuple):
                return [conv(x) for x in v]
            if isinstance(v, Mapping):
                return {k: conv(x) for k, x in sorted(v.items())}
            if isinstance(v, float) and math.isinf(v):
                return "inf"
            return v

        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = {g.name: conv(getattr(v, g.name)) for g in dataclasses.fields(v)} if dataclasses.is_dataclass(v) else conv(v)
        return out

    def hash(self, sections: tuple[str, ...] | None = None) -> str:
        d = self.to_dict()
        if sections is not None:
            d = {s: d[s] for s in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


_SECTIONS = {
    "data": DataConfig,
    "fusion": FusionConfig,
    "profile": ProfileConfig,
    "rerank": RerankConfig,
    "backend": BackendConfig,
    "eval": EvalConfig,
}
_PATH_FIELDS = {("data", "ratings"), ("data", "movies"), ("data", "tags"), ("data", "augmented"), ("backend", "replay_path")}
_TOP_KEYS = {"seed", "output_dir", "run_name", "text_variant", "embeddings", "retrieval"} | set(_SECTIONS)


def _coerce(section: str, name: str, value: Any, typ, base: Path) -> Any:
    if (section, name) in _PATH_FIELDS:
        if not isinstance(value, str):
            raise ConfigError(f"{section}.{name} must be a path string")
        return (base / value).resolve() if value else None
    default_type = {int: (int,), float: (int, float), bool: (bool,), str: (str,)}
    tname = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    if tname == "tuple[str, ...]":
        if not isinstance(value, list) or not all(isinstance(x, str) for x in value):
            raise ConfigError(f"{section}.{name} must be a list of strings")
        return tuple(value)
    for pytype in (int, float, bool, str):
        if tname == pytype.__name__:
            if isinstance(value, bool) and pytype is not bool:
                raise ConfigError(f"{section}.{name} must be {tname}, got bool")
            if pytype is float and value == "inf":
                return math.inf
            if not isinstance(value, default_type[pytype]):
                raise ConfigError(f"{section}.{name} must be {tname}, got {type(value).__name__}")
            return float(value) if pytype is float else value
    return value


def _build_section(name: str, raw: Mapping, base: Path):
    cls = _SECTIONS[name]
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    kwargs = {k: _coerce(name, k, v, fields[k].type, base) for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def config_from_dict(raw: Mapping, base_dir: str | Path = ".", check_files: bool = True) -> RunConfig:
    base = Path(base_dir).resolve()
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    if "seed" not in raw:
        raise ConfigError("seed is required")
    if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
        raise ConfigError("seed must be an integer")
    if "data" not in raw or "ratings" not in raw["data"]:
        raise ConfigError("data.ratings is required")
    sections = {name: _build_section(name, raw.get(name, {}), base) for name in _SECTIONS}
    emb_raw = raw.get("embeddings", {})
    embeddings = {}
    for k, v in emb_raw.items():
        if k not in ("textual", "visual", "audio"):
            raise ConfigError(f"unknown key in [embeddings]: {k}")
        if not isinstance(v, str):
            raise ConfigError(f"embeddings.{k} must be a path string")
        embeddings[k] = (base / v).resolve()
    retrieval = raw.get("retrieval", {})
    if set(retrieval) - {"n"}:
        raise ConfigError(f"unknown key(s) in [retrieval]: {', '.join(sorted(set(retrieval) - {'n'}))}")
    n = retrieval.get("n", 50)
    if not isinstance(n, int) or isinstance(n, bool):
        raise ConfigError("retrieval.n must be an integer")
    cfg = RunConfig(
        seed=raw["seed"],
        embeddings=embeddings,
        retrieval_n=n,
        output_dir=(base / raw.get("output_dir", "runs")).resolve(),
        run_name=str(raw.get("run_name", "run")),
        text_variant=str(raw.get("text_variant", "")),
        **sections,
    )
    validate(cfg, check_files)
    return cfg


def validate(cfg: RunConfig, check_files: bool = True) -> None:
    d, f, p, r, b = cfg.data, cfg.fusion, cfg.profile, cfg.rerank, cfg.backend
    problems = []
    if r.k < 1:
        problems.append("rerank.k must be >= 1")
    if cfg.retrieval_n < 1:
        problems.append("retrieval.n must be >= 1")
    if r.k > cfg.retrieval_n:
        problems.append(f"rerank.k={r.k} exceeds retrieval.n={cfg.retrieval_n}")
    if not 0 < d.train_frac < 1:
        problems.append("data.train_frac must be in (0, 1)")
    if d.activity_min > d.activity_max:
        problems.append("data.activity_min exceeds data.activity_max")
    if d.activity_mode not in ("keep", "drop"):
        problems.append("data.activity_mode must be keep|drop")
    if d.rating_min > d.rating_max:
        problems.append("data.rating_min exceeds data.rating_max")
    if d.eval_users < 1:
        problems.append("data.eval_users must be >= 1")
    if f.method not in FUSION_METHODS:
        problems.append(f"fusion.method must be one of {FUSION_METHODS}")
    if f.cca_dim_mode not in ("total", "per_view"):
        problems.append("fusion.cca_dim_mode must be total|per_view")
    if f.method == "cca" and (len(f.views) != 2 or (f.cca_dim_mode == "total" and f.dim % 2)):
        problems.append("cca needs exactly two views and an even total dim")
    if f.method == "none" and len(f.views) != 1:
        problems.append("fusion.method = none needs exactly one view")
    if f.dim < 1 or f.ridge < 0:
        problems.append("fusion.dim must be >= 1 and fusion.ridge >= 0")
    for v in f.views:
        if v not in cfg.embeddings:
            problems.append(f"fusion view {v!r} has no [embeddings] entry")
    if p.user_vector not in ("random", "average", "temporal"):
        problems.append("profile.user_vector must be random|average|temporal")
    if p.alpha <= 0:
        problems.append("profile.alpha must be > 0")
    if not d.rating_min <= p.rating_threshold <= d.rating_max:
        problems.append("profile.rating_threshold outside rating scale")
    if p.time_mode not in ("standardized", "raw"):
        problems.append("profile.time_mode must be standardized|raw")
    if p.cold_start not in ("error", "random", "skip"):
        problems.append("profile.cold_start must be error|random|skip")
    if r.pipeline not in PIPELINES:
        problems.append(f"rerank.pipeline must be one of {PIPELINES}")
    if r.profile_fallback not in ("manual", "error"):
        problems.append("rerank.profile_fallback must be manual|error")
    if r.retries < 1 or r.max_in_flight < 1:
        problems.append("rerank.retries and rerank.max_in_flight must be >= 1")
    if b.kind not in ("mock", "replay", "http", "failing"):
        problems.append("backend.kind must be mock|replay|http|failing")
    if b.kind == "mock" and b.mock_mode not in ("echo", "reverse", "shuffle"):
        problems.append("backend.mock_mode must be echo|reverse|shuffle")
    if b.kind == "replay" and b.replay_path is None:
        problems.append("backend.replay_path required for replay backend")
    if b.kind == "http" and not (b.endpoint and b.model):
        problems.append("backend.endpoint and backend.model required for http backend")
    if cfg.eval.tau_tail < 0:
        problems.append("eval.tau_tail must be >= 0")
    if check_files:
        paths = [d.ratings, d.movies, d.tags, d.augmented, *cfg.embeddings.values()]
        if b.kind == "replay":
            paths.append(b.replay_path)
        for path in paths:
            if path is not None and not Path(path).is_file():
                problems.append(f"file not found: {path}")
    if r.pipeline != "retrieval_only" and d.movies is None:
        problems.append("re-rank pipelines need data.movies")
    if problems:
        raise ConfigError("; ".join(problems))


def parse_config(path: str | Path, check_files: bool = True) -> RunConfig:
    path = Path(path)
    try:
        raw = tomli.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw, path.parent, check_files)
