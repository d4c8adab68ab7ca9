"""Seeded synthetic corpus with two correlated modalities.

Each item has a shared latent factor seen by both modalities plus a private
nuisance factor per modality that users do not care about. Users prefer items
whose shared factor points the same way as their own taste vector, so a fusion
that isolates the shared part should retrieve better than either raw modality.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..corpus import Interaction, save_ratings
from ..embed_store import EmbeddingMatrix, Modality, ModalityTag, save_embeddings

GENRES = ("Action", "Adventure", "Animation", "Comedy", "Crime", "Documentary", "Drama", "Fantasy",
          "Horror", "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western")


@dataclass(frozen=True)
class SynthSpec:
    users: int = 50
    items: int = 500
    d_txt: int = 32
    d_vis: int = 48
    shared_dim: int = 8
    private_dim: int = 8
    private_scale: float = 2.0
    noise: float = 0.1
    min_interactions: int = 20
    max_interactions: int = 100
    taste_sharpness: float = 4.0
    seed: int = 0


def _mix(rng, rows: int, cols: int) -> np.ndarray:
    # orthonormal rows keep the latent geometry intact in the observed space
    q, _ = np.linalg.qr(rng.standard_normal((cols, rows)))
    return q.T


def generate(spec: SynthSpec) -> dict:
    """In-memory corpus: interactions, item titles/genres, two embedding matrices."""
    if spec.shared_dim + spec.private_dim > min(spec.d_txt, spec.d_vis):
        raise ValueError("shared_dim + private_dim must not exceed either modality dim")
    rng = np.random.default_rng(spec.seed)
    n_items = spec.items
    item_ids = np.arange(1, n_items + 1, dtype=np.int64)
    shared = rng.standard_normal((n_items, spec.shared_dim))
    views = {}
    for name, dim in (("textual", spec.d_txt), ("visual", spec.d_vis)):
        private = spec.private_scale * rng.standard_normal((n_items, spec.private_dim))
        basis = _mix(rng, spec.shared_dim + spec.private_dim, dim)
        x = np.hstack([shared, private]) @ basis
        x += spec.noise * rng.standard_normal(x.shape)
        x += rng.standard_normal(dim)  # per-modality offset
        views[name] = x

    genre_of = np.argmax(shared[:, : min(spec.shared_dim, len(GENRES))], axis=1)
    genres = [(GENRES[g % len(GENRES)],) for g in genre_of]

    unit_items = shared / np.linalg.norm(shared, axis=1, keepdims=True)
    log: list[Interaction] = []
    t0 = 1_500_000_000
    for u in range(1, spec.users + 1):
        taste = rng.standard_normal(spec.shared_dim)
        taste /= np.linalg.norm(taste)
        affinity = unit_items @ taste
        n_u = int(rng.integers(spec.min_interactions, spec.max_interactions + 1))
        logits = spec.taste_sharpness * affinity
        p = np.exp(logits - logits.max())
        p /= p.sum()
        chosen = rng.choice(n_items, size=min(n_u, n_items), replace=False, p=p)
        times = t0 + np.sort(rng.integers(0, 86_400 * 365, size=len(chosen)))
        rng.shuffle(chosen)
        for item, ts in zip(chosen, times):
            score = affinity[item] + 0.3 * rng.standard_normal()
            rating = float(np.clip(np.round((3.0 + 2.5 * score) * 2) / 2, 0.5, 5.0))
            log.append(Interaction(u, int(item_ids[item]), rating, int(ts)))
    return {
        "log": log,
        "titles": {int(i): f"Synthetic Film {int(i)} ({1980 + int(i) % 40})" for i in item_ids},
        "genres": {int(i): g for i, g in zip(item_ids, genres)},
        "textual": EmbeddingMatrix(ModalityTag(Modality.TEXTUAL, "synthetic"), item_ids, views["textual"]),
        "visual": EmbeddingMatrix(ModalityTag(Modality.VISUAL, "synthetic"), item_ids, views["visual"]),
    }


CONFIG_TEMPLATE = """\
seed = {seed}
run_name = "synthetic"
output_dir = "out"

[data]
ratings = "ratings.csv"
movies = "movies.csv"
activity_min = {amin}
activity_max = {amax}
eval_users = {users}

[embeddings]
textual = "textual.jsonl"
visual = "visual.emb"

[fusion]
method = "cca"
views = ["textual", "visual"]
dim = {dim}

[profile]
user_vector = "temporal"

[retrieval]
n = 50

[rerank]
pipeline = "retrieval_only"
k = 10

[backend]
kind = "mock"
"""


def make_synthetic_corpus(out_dir: str | Path, spec: SynthSpec = SynthSpec()) -> Path:
    """Write ratings/movies CSVs, textual JSONL + visual EMB1 embeddings and a config.

    Returns the path of the generated ``config.toml``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = generate(spec)
    save_ratings(corpus["log"], out / "ratings.csv")
    with (out / "movies.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["movieId", "title", "genres"])
        for i in sorted(corpus["titles"]):
            w.writerow([i, corpus["titles"][i], "|".join(corpus["genres"][i])])
    save_embeddings(corpus["textual"], out / "textual.jsonl")
    save_embeddings(corpus["visual"], out / "visual.emb")
    (out / "synth_spec.txt").write_text("".join(f"{k} = {v}\n" for k, v in asdict(spec).items()))
    cfg = out / "config.toml"
    cfg.write_text(
        CONFIG_TEMPLATE.format(
            seed=spec.seed, users=spec.users, amin=spec.min_interactions, amax=spec.max_interactions,
            dim=2 * spec.shared_dim,
        )
    )
    return cfg
