"""Command-line entry point (``mmrag``).

Exit codes: 0 success, 2 invalid configuration or arguments, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..embed_store import EmbeddingError, Modality, ModalityTag, load_embeddings, save_embeddings
from .config import ConfigError, parse_config
from .export import export_tsne_inputs
from .pipeline import Pipeline, StageError, sweep_retrieval_depth
from .synth import SynthSpec, make_synthetic_corpus

EXIT_OK, EXIT_INVALID, EXIT_STAGE = 0, 2, 3


def _pipeline(args) -> Pipeline:
    cfg = parse_config(args.config)
    if getattr(args, "n", None) is not None:
        cfg = cfg.with_n(args.n)
    return Pipeline(cfg, resume=not getattr(args, "no_resume", False))


def cmd_validate(args) -> int:
    cfg = parse_config(args.config)
    print(json.dumps({"valid": True, "config_hash": cfg.hash()}, sort_keys=True))
    return EXIT_OK


def cmd_fuse(args) -> int:
    pipe = _pipeline(args)
    space = pipe.fused_space()
    info = {"items": len(space), "output_dim": space.dim, "kind": type(space.model.kind).__name__}
    if space.model.correlations is not None:
        info["canonical_correlations"] = [round(float(x), 6) for x in space.model.correlations]
    if space.model.explained_variance_ratio is not None:
        info["explained_variance"] = round(float(space.model.explained_variance_ratio.sum()), 6)
    print(json.dumps(info))
    return EXIT_OK


def cmd_profiles(args) -> int:
    pipe = _pipeline(args)
    profs = pipe.profiles()
    print(json.dumps({"users": len(profs), "path": str(pipe.out / "profiles.npz")}))
    return EXIT_OK


def cmd_retrieve(args) -> int:
    pipe = _pipeline(args)
    cands = pipe.candidates()
    text = "".join(cands[u].to_json() + "\n" for u in sorted(cands))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_rerank(args) -> int:
    pipe = _pipeline(args)
    res = pipe.reranked()
    sys.stdout.write("".join(res[u].to_json() + "\n" for u in sorted(res)))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pipe = _pipeline(args)
    report = pipe.evaluate()
    sys.stdout.write(report.aggregate_csv())
    return EXIT_OK


cmd_run = cmd_evaluate


def cmd_sweep(args) -> int:
    cfg = parse_config(args.config)
    depths = [int(x) for x in args.depths.split(",")]
    try:
        reports = sweep_retrieval_depth(cfg, depths, resume=not args.no_resume)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    from ..evalsuite import aggregate_csv

    sys.stdout.write(aggregate_csv(reports))
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SynthSpec(
        users=args.users, items=args.items, d_txt=args.d_txt, d_vis=args.d_vis, shared_dim=args.shared_dim,
        private_dim=args.private_dim, noise=args.noise, seed=args.seed,
    )
    try:
        cfg = make_synthetic_corpus(args.out_dir, spec)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(cfg)
    return EXIT_OK


def cmd_convert(args) -> int:
    tag = ModalityTag(Modality(args.modality), args.variant)
    try:
        m = load_embeddings(args.src, tag)
        save_embeddings(m, args.dst)
    except (EmbeddingError, OSError) as exc:
        raise ConfigError(str(exc)) from None
    print(json.dumps({"items": len(m), "dim": m.dim, "dst": args.dst}))
    return EXIT_OK


def cmd_export_tsne(args) -> int:
    pipe = _pipeline(args)
    n = export_tsne_inputs(pipe.fused_space(), pipe.profiles(), args.out)
    print(json.dumps({"lines": n, "path": args.out}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmrag", description="Multimodal fusion, retrieval and re-ranking experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, fn, help_, n=False):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config")
        sp.add_argument("--no-resume", action="store_true", help="ignore existing checkpoints")
        if n:
            sp.add_argument("--n", type=int, help="override retrieval depth")
        sp.set_defaults(fn=fn)
        return sp

    sp = sub.add_parser("validate", help="check a config file")
    sp.add_argument("config")
    sp.set_defaults(fn=cmd_validate)
    with_config("fuse", cmd_fuse, "fit and apply the fusion operator")
    with_config("profiles", cmd_profiles, "build user vectors")
    sp = with_config("retrieve", cmd_retrieve, "emit candidate lists as JSON Lines", n=True)
    sp.add_argument("--out", help="write to a file instead of stdout")
    with_config("rerank", cmd_rerank, "re-rank candidates", n=True)
    with_config("evaluate", cmd_evaluate, "compute metrics", n=True)
    with_config("run", cmd_run, "run every stage and write metric CSVs", n=True)
    sp = with_config("sweep", cmd_sweep, "evaluate several retrieval depths")
    sp.add_argument("--depths", default="20,30,50,100,150")
    sp = with_config("export-tsne", cmd_export_tsne, "export item and user vectors")
    sp.add_argument("out")

    sp = sub.add_parser("synth", help="write a synthetic corpus and config")
    sp.add_argument("out_dir")
    d = SynthSpec()
    sp.add_argument("--users", type=int, default=d.users)
    sp.add_argument("--items", type=int, default=d.items)
    sp.add_argument("--d-txt", type=int, default=d.d_txt)
    sp.add_argument("--d-vis", type=int, default=d.d_vis)
    sp.add_argument("--shared-dim", type=int, default=d.shared_dim)
    sp.add_argument("--private-dim", type=int, default=d.private_dim)
    sp.add_argument("--noise", type=float, default=d.noise)
    sp.add_argument("--seed", type=int, default=d.seed)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("convert", help="convert embeddings between JSON Lines and EMB1")
    sp.add_argument("src")
    sp.add_argument("dst")
    sp.add_argument("--modality", default="textual", choices=[m.value for m in Modality])
    sp.add_argument("--variant", default="")
    sp.set_defaults(fn=cmd_convert)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
