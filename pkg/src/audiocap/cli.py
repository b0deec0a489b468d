"""Command-line pipeline: prepare -> augment -> train / train-clap -> infer ->
evaluate -> report.

Every command writes its artifact atomically and is idempotent given the same
config and seed.  Exit codes: 1 for config errors, 2 for data errors, 3 for
runtime failures; messages name the failing stage.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .augmentation import augment_manifest, make_client, vocab_stats
from .captioner import Captioner, CaptionerConfig
from .checkpoint import load_captioner, load_clap
from .clap import ClapConfig, ClapModel
from .config import ConfigError, PipelineConfig, load_pipeline_config
from .dataset import (
    EOS_ID,
    DataError,
    Manifest,
    build_vocab,
    decode_tokens,
    load_manifest,
    resolve_audio_path,
    save_manifest,
)
from .decoding import (
    Candidate,
    CandidateSet,
    beam_search,
    clap_refine,
    dump_candidate_sets,
    generate_candidates,
    load_candidate_sets,
    nucleus_sample_ids,
    oracle_select,
)
from .audio_frontend import read_wav
from .ioutil import atomic_write_text, canonical_dumps
from .metrics import (
    CorpusItem,
    clap_text_embedder,
    evaluate_corpus,
    fense,
    fluency_error_prob,
    meteor_lite,
)
from .numerics import Rng
from .synthetic import make_corpus
from .training import train_captioner, train_clap

log = logging.getLogger(__name__)

REPORT_METRICS = ("meteor", "cider_d", "spider", "spider_fl", "fense")


def round6(value: float) -> float:
    """One canonical rounding used by both JSON and text reports."""
    return float(f"{value:.6f}")


def _load_config(args) -> PipelineConfig:
    overrides = {
        "seed": getattr(args, "seed", None),
        "preset": getattr(args, "preset", None),
        "manifest": getattr(args, "manifest", None),
    }
    return load_pipeline_config(getattr(args, "config", None), overrides)


def _manifest_path(cfg: PipelineConfig, args) -> Path:
    path = getattr(args, "manifest", None) or cfg.paths.manifest
    if not path:
        raise ConfigError("no manifest given (flag --manifest or [paths] manifest)")
    return Path(path)


def _out_dir(args, default: str) -> Path:
    return Path(args.out) if args.out else Path(default)


def _build_captioner(cfg: PipelineConfig, manifest: Manifest) -> Captioner:
    vocab = build_vocab(manifest, extra_texts=[cfg.model.prompt])
    model_cfg = CaptionerConfig(
        vocab_size=len(vocab),
        enc_dim=cfg.model.enc_dim, enc_layers=cfg.model.enc_layers,
        enc_heads=cfg.model.enc_heads, enc_ff=cfg.model.enc_ff,
        dec_dim=cfg.model.dec_dim, dec_layers=cfg.model.dec_layers,
        dec_heads=cfg.model.dec_heads, dec_ff=cfg.model.dec_ff,
        proj_hidden=cfg.model.proj_hidden, downsample=cfg.model.downsample,
        lora_rank=cfg.model.lora_rank, lora_alpha=cfg.model.lora_alpha,
        train_head=cfg.model.train_head, prompt=cfg.model.prompt,
    )
    return Captioner(model_cfg, vocab, Rng(cfg.seed).child("captioner_init"))


def _build_clap(cfg: PipelineConfig, manifest: Manifest) -> ClapModel:
    vocab = build_vocab(manifest, extra_texts=[cfg.model.prompt])
    model_cfg = ClapConfig(
        vocab_size=len(vocab),
        d_model=cfg.clap_model.d_model, d_clap=cfg.clap_model.d_clap,
        audio_layers=cfg.clap_model.audio_layers, text_layers=cfg.clap_model.text_layers,
        n_heads=cfg.clap_model.n_heads, d_ff=cfg.clap_model.d_ff,
    )
    return ClapModel(model_cfg, vocab, Rng(cfg.seed).child("clap_init"))


# ---- commands ---------------------------------------------------------------------


def cmd_prepare(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg.paths.work_dir)
    if args.synthesize:
        manifest_path = make_corpus(
            out / "data",
            n_train=args.synthesize,
            n_valid=args.valid_items,
            n_eval=args.eval_items,
            seed=cfg.seed,
        )
        print(f"[prepare] synthesized corpus at {manifest_path}")
    else:
        manifest_path = _manifest_path(cfg, args)
    manifest = load_manifest(manifest_path)
    vocab = build_vocab(manifest, extra_texts=[cfg.model.prompt])
    vocab.save(out / "vocab.json")
    report = {
        "manifest": str(manifest_path),
        "entries": {s: len(manifest.split(s)) for s in ("train", "valid", "eval")},
        "vocab_size": len(vocab),
        "refs_per_eval": manifest.refs_per_eval,
        "warnings": manifest.warnings,
    }
    atomic_write_text(out / "prepare_report.json", canonical_dumps(report) + "\n")
    for warning in manifest.warnings:
        log.warning("%s", warning)
    print(f"[prepare] {sum(report['entries'].values())} entries, vocab {len(vocab)}")
    return 0


def cmd_augment(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg.paths.work_dir)
    manifest_path = _manifest_path(cfg, args)
    manifest = load_manifest(manifest_path, check_audio=False)
    client = make_client(
        cfg.augmentation.client,
        endpoint=cfg.augmentation.endpoint,
        auth_token=cfg.translation_auth_token(),
        timeout_s=cfg.augmentation.timeout_s,
        max_retries=cfg.augmentation.max_retries,
    )
    augmented = augment_manifest(
        manifest, client,
        pivot_lang=cfg.augmentation.pivot_lang,
        concurrency=cfg.augmentation.concurrency,
    )
    save_manifest(augmented, out / "augmented_manifest.jsonl")
    stats = vocab_stats(manifest, augmented)
    stats["skipped"] = augmented.warnings
    atomic_write_text(out / "vocab_stats.json", canonical_dumps(stats) + "\n")
    print(
        f"[augment] vocab {stats['vocab_before']} -> {stats['vocab_after']} "
        f"({len(stats['new_words'])} new words, {len(augmented.warnings)} skipped)"
    )
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg.paths.work_dir) / "captioner"
    manifest_path = _manifest_path(cfg, args)
    manifest = load_manifest(manifest_path)
    model = _build_captioner(cfg, manifest)
    result = train_captioner(model, manifest, manifest_path, cfg.train_config(), out)
    print(
        f"[train] best checkpoint at step {result.best_step} "
        f"(valid loss {result.best_valid_loss:.4f}) -> {result.best_dir}"
    )
    return 0


def cmd_train_clap(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg.paths.work_dir) / "clap"
    manifest_path = _manifest_path(cfg, args)
    manifest = load_manifest(manifest_path)
    model = _build_clap(cfg, manifest)
    result = train_clap(model, manifest, manifest_path, cfg.clap_train_config(), out)
    print(
        f"[train-clap] best checkpoint at step {result.best_step} "
        f"(valid loss {result.best_valid_loss:.4f}) -> {result.best_dir}"
    )
    return 0


def _infer_sets(cfg: PipelineConfig, args, manifest: Manifest, manifest_path) -> list[CandidateSet]:
    model, _ = load_captioner(args.captioner)
    clap_model = None
    if args.strategy == "clap-refine":
        if not args.clap:
            raise ConfigError("--clap checkpoint is required for clap-refine inference")
        clap_model, _ = load_clap(args.clap)
    entries = manifest.split(args.split)
    if not entries:
        raise DataError(f"no entries in split {args.split!r}")
    dec = cfg.decoding
    sets: list[CandidateSet] = []
    for entry in entries:
        clip = read_wav(resolve_audio_path(manifest_path, entry))
        if args.strategy == "clap-refine":
            cset = generate_candidates(
                model, clip, audio_id=entry.id,
                beam_sizes=dec.beam_sizes, max_len=dec.max_len,
            )
            sets.append(clap_refine(cset, clap_model, clip))
        elif args.strategy == "beam":
            e_A = model.project_downsample(model.encode_audio(clip))
            cand = beam_search(model, e_A, beam_size=dec.beam_size, max_len=dec.max_len)
            sets.append(
                CandidateSet(audio_id=entry.id, candidates=[cand], chosen=cand.caption)
            )
        elif args.strategy == "nucleus":
            e_A = model.project_downsample(model.encode_audio(clip))
            rng = Rng(cfg.seed).child(f"nucleus:{entry.id}")
            ids, lm_score = nucleus_sample_ids(
                model.make_scorer(e_A), EOS_ID, rng,
                temperature=dec.temperature, top_p=dec.top_p, max_len=dec.max_len,
            )
            caption = decode_tokens(np.array(ids, dtype=np.int64), model.vocab)
            cand = Candidate(caption=caption, beam_size=0, lm_score=lm_score)
            sets.append(
                CandidateSet(audio_id=entry.id, candidates=[cand], chosen=caption)
            )
        else:
            raise ConfigError(f"unknown strategy {args.strategy!r}")
    return sets


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg.paths.work_dir)
    manifest_path = _manifest_path(cfg, args)
    manifest = load_manifest(manifest_path)
    sets = _infer_sets(cfg, args, manifest, manifest_path)
    dump_path = out / f"candidates_{args.strategy}.jsonl"
    atomic_write_text(dump_path, dump_candidate_sets(sets))
    print(f"[infer] wrote {len(sets)} candidate sets -> {dump_path}")
    return 0


def _references_by_id(manifest: Manifest, split: str = "eval") -> dict[str, list[str]]:
    return {e.id: list(e.captions) for e in manifest.split(split)}


def _items_from_sets(
    sets: list[CandidateSet], refs: dict[str, list[str]], caption_of
) -> list[CorpusItem]:
    items = []
    for cset in sets:
        if cset.audio_id not in refs:
            raise DataError(f"no references for audio id {cset.audio_id!r}")
        items.append(
            CorpusItem(
                id=cset.audio_id,
                candidate=caption_of(cset),
                references=refs[cset.audio_id],
            )
        )
    return items


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg.paths.work_dir)
    manifest = load_manifest(_manifest_path(cfg, args), check_audio=False)
    refs = _references_by_id(manifest, args.split)
    sets = load_candidate_sets(args.candidates)
    embedder = None
    if args.clap:
        clap_model, _ = load_clap(args.clap)
        embedder = clap_text_embedder(clap_model)

    def chosen_caption(cset: CandidateSet) -> str:
        if cset.chosen is None:
            raise DataError(f"candidate set {cset.audio_id!r} has no chosen caption")
        return cset.chosen

    items = _items_from_sets(sets, refs, chosen_caption)
    report = evaluate_corpus(
        items,
        embedder=embedder,
        threshold=cfg.metrics.fluency_threshold,
        penalty=cfg.metrics.fluency_penalty,
    )
    report_path = out / "evaluation.json"
    atomic_write_text(report_path, canonical_dumps(report) + "\n")
    summary = ", ".join(f"{k}={v:.4f}" for k, v in sorted(report["corpus"].items()))
    print(f"[evaluate] {summary} -> {report_path}")
    return 0


def _rank_k_caption(cset: CandidateSet, k: int) -> str:
    ranked = sorted(
        [c for c in cset.candidates if c.clap_score is not None],
        key=lambda c: (-c.clap_score, c.beam_size),
    )
    if not ranked:
        raise DataError(f"candidate set {cset.audio_id!r} has no clap scores")
    return ranked[min(k, len(ranked)) - 1].caption


def _beam_n_caption(cset: CandidateSet, n: int) -> str:
    for c in cset.candidates:
        if c.beam_size == n:
            return c.caption
    raise DataError(f"candidate set {cset.audio_id!r} has no beam-{n} candidate")


def write_report(rows: list[dict], degraded_flags: list[str]) -> tuple[str, str]:
    """Render the strategy comparison as (json, text); numbers are identical."""
    json_doc = canonical_dumps({"rows": rows, "degraded_flags": degraded_flags}) + "\n"
    metric_names = [m for m in REPORT_METRICS if any(m in r["metrics"] for r in rows)]
    width = max(len(r["strategy"]) for r in rows) + 2
    lines = ["strategy".ljust(width) + "  ".join(m.rjust(12) for m in metric_names)]
    lines.append("-" * len(lines[0]))
    for r in rows:
        cells = [
            f"{r['metrics'][m]:.6f}".rjust(12) if m in r["metrics"] else " " * 12
            for m in metric_names
        ]
        marker = f"{r['strategy']}*" if r.get("diagnostic") else r["strategy"]
        lines.append(marker.ljust(width) + "  ".join(cells))
    if any(r.get("diagnostic") for r in rows):
        lines.append("* diagnostic row: reference-based oracle selection (upper bound)")
    for flag in degraded_flags:
        lines.append(f"note: {flag}")
    return json_doc, "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg.paths.work_dir)
    manifest = load_manifest(_manifest_path(cfg, args), check_audio=False)
    refs = _references_by_id(manifest, "eval")
    clap_sets = load_candidate_sets(args.clap_candidates)

    embedder = None
    if args.clap:
        clap_model, _ = load_clap(args.clap)
        embedder = clap_text_embedder(clap_model)

    if cfg.metrics.oracle_metric == "fense":
        if embedder is None:
            raise ConfigError("oracle_metric=fense needs --clap for the sentence embedder")
        def oracle_metric(caption, references):
            return fense(caption, references, embedder, fluency_error_prob,
                         cfg.metrics.fluency_threshold, cfg.metrics.fluency_penalty)
    elif cfg.metrics.oracle_metric == "meteor":
        oracle_metric = meteor_lite
    else:
        raise ConfigError(f"unknown oracle_metric {cfg.metrics.oracle_metric!r}")

    strategies: list[tuple[str, list[CorpusItem], bool]] = []
    if args.nucleus_candidates:
        nucleus_sets = load_candidate_sets(args.nucleus_candidates)
        strategies.append(
            ("nucleus", _items_from_sets(nucleus_sets, refs, lambda s: s.chosen), False)
        )
    strategies.append(
        (
            f"beam({cfg.decoding.beam_size})",
            _items_from_sets(
                clap_sets, refs, lambda s: _beam_n_caption(s, cfg.decoding.beam_size)
            ),
            False,
        )
    )
    for k in (1, 3, 5, 7):
        strategies.append(
            (
                f"clap-refine rank-{k}",
                _items_from_sets(clap_sets, refs, lambda s, k=k: _rank_k_caption(s, k)),
                False,
            )
        )
    strategies.append(
        (
            "oracle",
            _items_from_sets(
                clap_sets,
                refs,
                lambda s: oracle_select(s, refs[s.audio_id], oracle_metric).caption,
            ),
            True,
        )
    )

    rows = []
    degraded: list[str] = []
    for name, items, diagnostic in strategies:
        result = evaluate_corpus(
            items,
            embedder=embedder,
            threshold=cfg.metrics.fluency_threshold,
            penalty=cfg.metrics.fluency_penalty,
        )
        for flag in result["degraded_flags"]:
            if flag not in degraded:
                degraded.append(flag)
        metrics = {
            m: round6(result["corpus"][m]) for m in REPORT_METRICS if m in result["corpus"]
        }
        row = {"strategy": name, "metrics": metrics}
        if diagnostic:
            row["diagnostic"] = True
        rows.append(row)

    json_doc, text_doc = write_report(rows, degraded)
    atomic_write_text(out / "report.json", json_doc)
    atomic_write_text(out / "report.txt", text_doc)
    print(text_doc)
    print(f"[report] wrote {out / 'report.json'} and {out / 'report.txt'}")
    return 0


# ---- argument parsing ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="audiocap",
        description="Audio captioning pipeline with multi-beam CLAP reranking.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--preset", help="hyperparameter preset (desk, paper, paper_finetune)")
        p.add_argument("--out", help="output directory (default: [paths] work_dir)")
        p.add_argument("--manifest", help="manifest JSONL path")

    p = sub.add_parser("prepare", help="validate a manifest and build the vocabulary")
    common(p)
    p.add_argument("--synthesize", type=int, default=0, metavar="N",
                   help="generate a synthetic corpus with N train items first")
    p.add_argument("--valid-items", type=int, default=8)
    p.add_argument("--eval-items", type=int, default=8)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("augment", help="back-translation paraphrasing of the train split")
    common(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train the captioner")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-clap", help="contrastively train the dual encoder")
    common(p)
    p.set_defaults(func=cmd_train_clap)

    p = sub.add_parser("infer", help="decode captions for a split")
    common(p)
    p.add_argument("--captioner", required=True, help="captioner checkpoint directory")
    p.add_argument("--clap", help="clap checkpoint directory (for clap-refine)")
    p.add_argument("--strategy", default="clap-refine",
                   choices=["nucleus", "beam", "clap-refine"])
    p.add_argument("--split", default="eval", choices=["train", "valid", "eval"])
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score a candidate dump against references")
    common(p)
    p.add_argument("--candidates", required=True, help="candidate dump JSONL")
    p.add_argument("--clap", help="clap checkpoint directory (enables FENSE)")
    p.add_argument("--split", default="eval", choices=["train", "valid", "eval"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="compare decoding strategies in one table")
    common(p)
    p.add_argument("--clap-candidates", required=True,
                   help="clap-refine candidate dump (multi-beam, scored)")
    p.add_argument("--nucleus-candidates", help="nucleus candidate dump")
    p.add_argument("--clap", help="clap checkpoint directory (FENSE + oracle)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"[{args.command}] config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"[{args.command}] data error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure in some stage
        print(f"[{args.command}] runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
