"""Stage orchestration with content-keyed checkpoints.

Each stage's key hashes the config sections it reads plus the keys of its
upstream stages (and digests of input files), so changing any upstream knob
invalidates everything downstream while unrelated knobs reuse checkpoints.
Keys live in ``manifest.json`` in the output directory.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .. import __version__
from ..corpus import (
    ItemMeta,
    SplitDataset,
    apply_augmented,
    chronological_split,
    filter_users_by_activity,
    group_by_user,
    load_augmented,
    load_metadata,
    load_ratings,
    sample_eval_users,
    train_counts,
)
from ..embed_store import EmbeddingMatrix, Modality, ModalityTag, align_ids, load_embeddings
from ..evalsuite import MetricReport, aggregate_csv, aggregate_report, build_ground_truth, popularity_from_train
from ..fusion import FusedSpace, FusionModel, fit, kind_name, load_model, save_model, transform
from ..profiles import UserVector, build_profiles
from ..ragloop import (
    FailingBackend,
    HttpBackend,
    LlmBackend,
    MockBackend,
    ProfileCaps,
    ProfileGenerationFailed,
    ReplayBackend,
    RerankResult,
    Source,
    UserProfileDoc,
    build_llm_profile,
    build_manual_profile,
    rerank,
)
from ..retrieval import CandidateList, CosineIndex, build_index, query_all, read_candidates, write_candidates
from .config import BackendConfig, RunConfig

logger = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def make_backend(cfg: BackendConfig) -> LlmBackend:
    if cfg.kind == "mock":
        return MockBackend(cfg.mock_mode)
    if cfg.kind == "failing":
        return FailingBackend()
    if cfg.kind == "replay":
        return ReplayBackend(cfg.replay_path)
    return HttpBackend(cfg.endpoint, cfg.model, cfg.api_key_env or None, cfg.timeout_s)


def atomic_write(path: Path, writer: Callable[[Path], None]) -> None:
    """Run ``writer`` on a temp file in the target directory, then rename into place."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=path.suffix)
    os.close(fd)
    try:
        writer(Path(tmp))
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_text(path: Path, text: str) -> None:
    atomic_write(path, lambda p: p.write_text(text, encoding="utf-8"))


def _digest(*parts: str) -> str:
    return hashlib.sha256("\x00".join(parts).encode()).hexdigest()


def _file_digest(path: Path | None) -> str:
    if path is None:
        return "-"
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class CorpusState:
    split: SplitDataset
    eval_users: tuple[int, ...]
    meta: dict[int, ItemMeta]


class Pipeline:
    """Lazily computed, checkpointed stages for one :class:`RunConfig`."""

    def __init__(self, cfg: RunConfig, backend: LlmBackend | None = None, resume: bool = True):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.resume = resume
        self._backend = backend
        self._manifest_path = self.out / "manifest.json"
        self._manifest = self._read_manifest()
        self._cache: dict[str, object] = {}
        self.loaded_from_checkpoint: set[str] = set()

    # --- manifest --------------------------------------------------------

    def _read_manifest(self) -> dict:
        if self.resume and self._manifest_path.is_file():
            try:
                m = json.loads(self._manifest_path.read_text())
                if m.get("version") == __version__:
                    return m
            except ValueError:
                pass
        return {"version": __version__, "stages": {}}

    def _valid(self, stage: str, key: str, *files: Path) -> bool:
        entry = self._manifest["stages"].get(stage)
        ok = self.resume and entry is not None and entry.get("key") == key and all(f.is_file() for f in files)
        if ok:
            self.loaded_from_checkpoint.add(stage)
        return ok

    def _record(self, stage: str, key: str, *files: Path) -> None:
        self._manifest["stages"][stage] = {"key": key, "files": [str(f.relative_to(self.out)) for f in files]}
        self._manifest["config_hash"] = self.cfg.hash()
        self._manifest["input_digests"] = self.input_digests
        write_text(self._manifest_path, json.dumps(self._manifest, indent=2, sort_keys=True) + "\n")

    def _stage(self, name: str, fn):
        if name not in self._cache:
            try:
                self._cache[name] = fn()
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, exc) from exc
        return self._cache[name]

    @cached_property
    def input_digests(self) -> dict[str, str]:
        d = self.cfg.data
        out = {
            "ratings": _file_digest(d.ratings),
            "movies": _file_digest(d.movies),
            "tags": _file_digest(d.tags),
            "augmented": _file_digest(d.augmented),
        }
        for name, path in sorted(self.cfg.embeddings.items()):
            out[f"emb:{name}"] = _file_digest(path)
        return out

    @property
    def backend(self) -> LlmBackend:
        if self._backend is None:
            self._backend = make_backend(self.cfg.backend)
        return self._backend

    # --- stage keys ------------------------------------------------------

    def corpus_key(self) -> str:
        dg = self.input_digests
        return _digest("corpus", self.cfg.hash(("data",)), str(self.cfg.seed), dg["ratings"], dg["movies"], dg["tags"], dg["augmented"])

    def fusion_key(self) -> str:
        dg = self.input_digests
        emb = [dg[f"emb:{v}"] for v in self.cfg.fusion.views]
        return _digest("fusion", self.cfg.hash(("fusion", "text_variant")), *self.cfg.fusion.views, *emb)

    def profiles_key(self) -> str:
        return _digest("profiles", self.corpus_key(), self.fusion_key(), self.cfg.hash(("profile",)), str(self.cfg.seed))

    def candidates_key(self, n: int) -> str:
        return _digest("candidates", self.profiles_key(), str(n))

    def docs_key(self) -> str:
        r = self.cfg.rerank
        gen = (r.pipeline, r.max_genres, r.max_tags, r.max_items, r.temperature, r.max_tokens, r.profile_fallback)
        return _digest("docs", self.corpus_key(), repr(gen), self.cfg.hash(("backend",)), str(self.cfg.profile.rating_threshold), str(self.cfg.seed))

    def rerank_key(self, n: int) -> str:
        return _digest("rerank", self.candidates_key(n), self.docs_key(), self.cfg.hash(("rerank",)))

    def metrics_key(self, n: int) -> str:
        return _digest("metrics", self.rerank_key(n), self.cfg.hash(("eval",)), self.cfg.run_name)

    def depth_dir(self, n: int) -> Path:
        return self.out / f"depth_{n}"

    # --- stages ----------------------------------------------------------

    def corpus(self) -> CorpusState:
        def build():
            d = self.cfg.data
            log = load_ratings(d.ratings, (d.rating_min, d.rating_max))
            log = filter_users_by_activity(log, d.activity_min, d.activity_max, d.activity_mode)
            split = chronological_split(log, d.train_frac)
            n_eval = min(d.eval_users, len(split.users))
            users = tuple(sorted(sample_eval_users(split, n_eval, self.cfg.seed)))
            meta = load_metadata(d.movies, d.tags) if d.movies is not None else {}
            if d.augmented is not None:
                meta = apply_augmented(meta, load_augmented(d.augmented))
            logger.info("corpus: %d train / %d test rows, %d eval users", len(split.train), len(split.test), len(users))
            return CorpusState(split, users, meta)

        return self._stage("corpus", build)

    def views(self) -> list[EmbeddingMatrix]:
        def build():
            mats = []
            for v in self.cfg.fusion.views:
                tag = ModalityTag(Modality(v), self.cfg.text_variant if v == "textual" else "")
                mats.append(load_embeddings(self.cfg.embeddings[v], tag))
            if len(mats) > 1:
                aligned = align_ids(mats)
                logger.info("aligned %d items; dropped %s", len(aligned.ids), aligned.dropped)
                mats = aligned.matrices
            return mats

        return self._stage("views", build)

    def fused_space(self) -> FusedSpace:
        def build():
            key = self.fusion_key()
            model_path, space_path = self.out / "fusion.fus", self.out / "fused_space.npz"
            if self._valid("fusion", key, model_path, space_path):
                model = load_model(model_path)
                with np.load(space_path) as z:
                    return FusedSpace(z["ids"], z["vectors"], model)
            views = self.views()
            model = fit(self.cfg.fusion_kind(), views)
            space = transform(model, views)
            atomic_write(model_path, lambda p: save_model(model, p))
            atomic_write(space_path, lambda p: _savez(p, ids=space.ids, vectors=space.vectors))
            self._record("fusion", key, model_path, space_path)
            return space

        return self._stage("fusion", build)

    def fusion_model(self) -> FusionModel:
        return self.fused_space().model

    def index(self) -> CosineIndex:
        return self._stage("index", lambda: build_index(self.fused_space()))

    def train_by_user(self):
        return self._stage("train_by_user", lambda: group_by_user(self.corpus().split.train))

    def profiles(self) -> dict[int, UserVector]:
        def build():
            key = self.profiles_key()
            path = self.out / "profiles.npz"
            if self._valid("profiles", key, path):
                with np.load(path) as z:
                    return {int(u): UserVector(int(u), v, int(s)) for u, v, s in zip(z["users"], z["vectors"], z["support"])}
            space = self.fused_space()
            profs = build_profiles(
                space, self.train_by_user(), self.corpus().eval_users, self.cfg.profile_strategy(),
                self.cfg.profile.cold_start, self.cfg.seed,
            )
            users = np.array(sorted(profs), dtype=np.int64)
            vecs = np.array([profs[u].vec for u in users]).reshape(len(users), space.dim)
            support = np.array([profs[u].support for u in users], dtype=np.int64)
            atomic_write(path, lambda p: _savez(p, users=users, vectors=vecs, support=support))
            self._record("profiles", key, path)
            return profs

        return self._stage("profiles", build)

    def candidates(self, n: int | None = None) -> dict[int, CandidateList]:
        n = self.cfg.retrieval_n if n is None else n

        def build():
            key = self.candidates_key(n)
            path = self.depth_dir(n) / "candidates.jsonl"
            if self._valid(f"candidates@{n}", key, path):
                return read_candidates(path, n)
            tbu = self.train_by_user()
            exclude = {u: {r.item_id for r in tbu.get(u, ())} for u in self.profiles()}
            cands = query_all(self.index(), self.profiles(), n, exclude)
            atomic_write(path, lambda p: write_candidates(cands, p))
            self._record(f"candidates@{n}", key, path)
            return cands

        return self._stage(f"candidates@{n}", build)

    def profile_docs(self) -> dict[int, UserProfileDoc]:
        def build():
            key = self.docs_key()
            path = self.out / "profile_docs.jsonl"
            if self._valid("docs", key, path):
                with path.open(encoding="utf-8") as fh:
                    docs = [UserProfileDoc.from_dict(json.loads(line)) for line in fh if line.strip()]
                return {d.user_id: d for d in docs}
            r = self.cfg.rerank
            caps = ProfileCaps(r.max_genres, r.max_tags, r.max_items)
            meta = self.corpus().meta
            tbu = self.train_by_user()
            threshold = self.cfg.profile.rating_threshold
            users = self.corpus().eval_users

            def one(u):
                rows = tbu.get(u, [])
                if r.pipeline == "manual":
                    return build_manual_profile(rows, meta, u, caps, threshold)
                try:
                    return build_llm_profile(
                        rows, meta, u, self.backend, caps, threshold,
                        temperature=r.temperature, max_tokens=r.max_tokens, seed=self.cfg.seed,
                        attempts=r.retries, backoff_s=r.backoff_s,
                    )
                except ProfileGenerationFailed:
                    if r.profile_fallback != "manual":
                        raise
                    logger.warning("user %s: LLM profile failed; using manual profile", u)
                    return build_manual_profile(rows, meta, u, caps, threshold)

            with ThreadPoolExecutor(max_workers=r.max_in_flight) as pool:
                docs = dict(zip(users, pool.map(one, users)))
            text = "".join(docs[u].to_json() + "\n" for u in sorted(docs))
            write_text(path, text)
            self._record("docs", key, path)
            return docs

        return self._stage("docs", build)

    def reranked(self, n: int | None = None) -> dict[int, RerankResult]:
        n = self.cfg.retrieval_n if n is None else n

        def build():
            r = self.cfg.rerank
            cands = self.candidates(n)
            if r.pipeline == "retrieval_only":
                return {u: RerankResult(u, tuple(c.item_ids[: r.k]), Source.FALLBACK_KNN, "", None, ("retrieval_only",)) for u, c in cands.items()}
            key = self.rerank_key(n)
            path = self.depth_dir(n) / "rerank.jsonl"
            if self._valid(f"rerank@{n}", key, path):
                with path.open(encoding="utf-8") as fh:
                    res = [RerankResult.from_json(line) for line in fh if line.strip()]
                return {x.user_id: x for x in res}
            docs = self.profile_docs()
            meta = self.corpus().meta
            users = sorted(cands)

            def one(u):
                c = cands[u]
                if not c.entries:
                    return RerankResult(u, (), Source.FALLBACK_KNN, "", None, ("no_candidates",))
                return rerank(
                    docs[u], c, meta, self.backend, min(r.k, len(c)), r.explainable,
                    r.temperature, r.max_tokens, self.cfg.seed, r.retries, r.backoff_s,
                )

            with ThreadPoolExecutor(max_workers=r.max_in_flight) as pool:
                res = dict(zip(users, pool.map(one, users)))
            write_text(path, "".join(res[u].to_json() + "\n" for u in users))
            self._record(f"rerank@{n}", key, path)
            return res

        return self._stage(f"rerank@{n}", build)

    def echo(self, n: int) -> dict[str, object]:
        f = self.cfg.fusion
        fusion = f.method if f.method in ("none", "concat", "avg") else f"{f.method}_{f.dim}"
        return {
            "run": self.cfg.run_name,
            "fusion": f"{fusion}:{'+'.join(f.views)}",
            "user_vector": self.cfg.profile.user_vector,
            "pipeline": self.cfg.rerank.pipeline,
            "N": n,
            "K": self.cfg.rerank.k,
            "seed": self.cfg.seed,
        }

    def evaluate(self, n: int | None = None) -> MetricReport:
        n = self.cfg.retrieval_n if n is None else n

        def build():
            c = self.corpus()
            idx = self.index()
            catalog = set(int(i) for i in idx.ids)
            truth = build_ground_truth(c.split.test, c.split.train, catalog, self.cfg.eval.relevance_threshold)
            recs = {u: list(res.ranked_items) for u, res in self.reranked(n).items()}
            counts = train_counts(c.split.train)
            report = aggregate_report(
                recs, truth, self.cfg.rerank.k, len(catalog),
                popularity_from_train(c.split.train, catalog), counts, self.cfg.eval.tau_tail, self.echo(n),
            )
            d = self.depth_dir(n)
            write_text(d / "metrics_per_user.csv", report.per_user_csv())
            write_text(d / "metrics_aggregate.csv", report.aggregate_csv())
            self._record(f"metrics@{n}", self.metrics_key(n), d / "metrics_per_user.csv", d / "metrics_aggregate.csv")
            return report

        return self._stage(f"metrics@{n}", build)


def _savez(path: Path, **arrays) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def run_pipeline(cfg: RunConfig, backend: LlmBackend | None = None, resume: bool = True) -> MetricReport:
    return Pipeline(cfg, backend, resume).evaluate()


def sweep_retrieval_depth(
    cfg: RunConfig, depths: Sequence[int], backend: LlmBackend | None = None, resume: bool = True
) -> list[MetricReport]:
    """One evaluation per depth; fusion and profiles are computed once.

    Writes ``sweep.csv`` (one aggregate row per depth) to the output directory.
    """
    depths = list(depths)
    if not depths or depths != sorted(depths) or len(set(depths)) != len(depths):
        raise ValueError(f"depths must be strictly ascending, got {depths}")
    if depths[0] < cfg.rerank.k:
        raise ValueError(f"smallest depth {depths[0]} is below k={cfg.rerank.k}")
    pipe = Pipeline(cfg, backend, resume)
    reports = [pipe.evaluate(n) for n in depths]
    write_text(Path(cfg.output_dir) / "sweep.csv", aggregate_csv(reports))
    return reports
