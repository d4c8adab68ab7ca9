"""Grid of run configs: text back-end x fusion method x pipeline."""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Mapping, Sequence

from ..evalsuite import MetricReport, aggregate_csv
from ..ragloop import LlmBackend
from .config import RunConfig, validate
from .pipeline import run_pipeline, write_text


def experiment_matrix(
    base: RunConfig,
    fusions: Sequence[str],
    pipelines: Sequence[str],
    text_variants: Mapping[str, str | Path] | None = None,
) -> list[RunConfig]:
    """One config per cell, each with its own output directory under ``base.output_dir``.

    ``text_variants`` maps an opaque back-end label to a textual embedding
    file; when omitted the base file and label are used. Fusion ``none`` runs
    on the textual view alone.
    """
    variants = dict(text_variants) if text_variants else {base.text_variant or "text": base.embeddings["textual"]}
    out = []
    for label, path in variants.items():
        embeddings = dict(base.embeddings, textual=Path(path))
        for method in fusions:
            views = ("textual",) if method == "none" else base.fusion.views
            for pipeline in pipelines:
                name = f"{label}_{method}_{pipeline}"
                cfg = dataclasses.replace(
                    base,
                    embeddings=embeddings,
                    text_variant=label,
                    fusion=dataclasses.replace(base.fusion, method=method, views=views),
                    rerank=dataclasses.replace(base.rerank, pipeline=pipeline),
                    run_name=name,
                    output_dir=Path(base.output_dir) / name,
                )
                validate(cfg)
                out.append(cfg)
    return out


def run_matrix(configs: Sequence[RunConfig], summary_path: str | Path, backend: LlmBackend | None = None) -> list[MetricReport]:
    """Run every config and write one aggregate row per cell to ``summary_path``."""
    reports = [run_pipeline(cfg, backend) for cfg in configs]
    write_text(Path(summary_path), aggregate_csv(reports))
    return reports
