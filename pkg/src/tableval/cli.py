"""Single-binary pipeline orchestrator.

Subcommands mirror the pipeline stages: ingest, curate, split, export, run,
judge, report, merge-adapter.  Every stage is re-runnable; stores are only
ever extended, never rewritten with different content.  Exit codes: 0 on
success, 1 on pipeline errors (with one machine-parseable JSON error line
on stderr), 2 on usage errors.  ``--dry-run`` prints the plan and neither
writes stores nor contacts endpoints.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import curation, evaluation, ingest, lora, runners
from .config import ConfigError, PipelineConfig, load_config
from .gateway import ChatClient, EndpointConfig


def _emit(args, event: str, **fields) -> None:
    if getattr(args, "log_json", False):
        print(json.dumps({"event": event, **fields}, sort_keys=True, default=str))
    else:
        detail = " ".join(f"{k}={v}" for k, v in fields.items())
        print(f"{event}: {detail}" if detail else event)


def _client(endpoint: EndpointConfig, args) -> ChatClient:
    return ChatClient(endpoint, dry_run=getattr(args, "dry_run", False))


def _require_config(args) -> PipelineConfig:
    if not args.config:
        raise ConfigError("this command needs --config")
    return load_config(args.config)


# --- subcommand handlers ---------------------------------------------------------

def cmd_ingest(args) -> int:
    config = _require_config(args)
    out_dir = Path(args.out_dir) if args.out_dir else config.corpus_dir
    zoom = args.zoom if args.zoom is not None else config.zoom
    pages = [int(p) for p in args.pages.split(",")] if args.pages else None
    if args.dry_run:
        wanted = pages if pages is not None else ingest.scan_for_table_pages(args.pdf)
        _emit(args, "ingest.plan", pdf=args.pdf, pages=wanted, zoom=zoom)
        return 0
    rendered = ingest.ingest_pdf(args.pdf, out_dir, zoom=zoom, pages=pages)
    _emit(args, "ingest.done", pages=[p.page_number for p in rendered], out_dir=out_dir)
    return 0


def cmd_curate(args) -> int:
    config = _require_config(args)
    manifest_dir = Path(args.manifest_dir) if args.manifest_dir else config.corpus_dir
    pages = ingest.load_manifest(manifest_dir)
    store = curation.TripletStore(config.dataset_store)
    if args.dry_run:
        done = store.images_seen() | store.failed_images()
        pending = [p.image_path for p in pages if p.image_path not in done]
        _emit(args, "curate.plan", pending=len(pending))
        return 0
    endpoint = config.endpoint_for_role("generator")
    with _client(endpoint, args) as client:
        stats = curation.curate_pages(
            pages,
            client,
            endpoint.model_id,
            store,
            images_dir=manifest_dir,
            max_workers=config.requests_in_flight,
        )
    _emit(args, "curate.done", **stats)
    return 0


def cmd_split(args) -> int:
    config = _require_config(args)
    store = curation.TripletStore(config.dataset_store)
    train_size = args.train_size if args.train_size is not None else config.train_size
    seed = args.seed if args.seed is not None else config.seed
    split = curation.split_dataset(store.all(), train_size=train_size, seed=seed)
    out = Path(args.out) if args.out else config.dataset_store.parent / "split.json"
    if args.dry_run:
        _emit(args, "split.plan", train=len(split.train), test=len(split.test), out=out)
        return 0
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(split.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _emit(args, "split.done", train=len(split.train), test=len(split.test), out=out)
    return 0


def _load_split(args, config: PipelineConfig) -> curation.DatasetSplit:
    split_path = Path(args.split) if args.split else config.dataset_store.parent / "split.json"
    return curation.DatasetSplit.from_dict(json.loads(split_path.read_text(encoding="utf-8")))


def cmd_export(args) -> int:
    config = _require_config(args)
    store = curation.TripletStore(config.dataset_store)
    split = _load_split(args, config)
    out = Path(args.out) if args.out else config.dataset_store.parent / f"chat-{args.subset}.json"
    if args.dry_run:
        _emit(args, "export.plan", subset=args.subset, records=len(split.subset(args.subset)))
        return 0
    system_prompt = args.system_prompt or config.system_prompt
    path = curation.export_chat_dataset(
        store, split, args.subset, out, images_dir=config.corpus_dir, system_prompt=system_prompt
    )
    _emit(args, "export.done", out=path, records=len(split.subset(args.subset)))
    return 0


def cmd_run(args) -> int:
    config = _require_config(args)
    store_ = curation.TripletStore(config.dataset_store)
    split = _load_split(args, config)
    triplets = [store_.get(i) for i in split.subset(args.subset)]
    model_ids = args.models.split(",") if args.models else sorted(config.answerers)
    if not model_ids:
        raise ConfigError("no answerer models configured or requested")
    run_id = args.run_id or f"{args.method}-{args.subset}"
    run_dir = config.runs_dir / run_id
    existing = {r.key for r in runners.load_records(run_dir)}
    jobs = sum(
        0 if (t.id, args.method, m) in existing else 1 for m in model_ids for t in triplets
    )
    if args.dry_run:
        _emit(args, "run.plan", run_id=run_id, jobs=jobs, models=model_ids)
        return 0
    run_store = runners.RunStore(run_dir)
    answerers = {m: _client(config.answerer(m), args) for m in model_ids}
    converter = None
    if args.method == "indirect":
        conv_endpoint = config.endpoint_for_role("converter")
        converter = (_client(conv_endpoint, args), conv_endpoint.model_id)
    try:
        manifest = runners.run_split(
            triplets,
            args.method,
            answerers,
            run_store,
            images_dir=config.corpus_dir,
            converter=converter,
            system_prompt=config.system_prompt,
            include_image=args.include_image,
            max_workers=config.requests_in_flight,
            config_hash=config.config_hash(),
        )
    finally:
        for client in answerers.values():
            client.close()
        if converter:
            converter[0].close()
    _emit(args, "run.done", run_id=run_id, **{k: v for k, v in manifest.items() if k != "models"})
    return 0


def cmd_judge(args) -> int:
    config = _require_config(args)
    store_ = curation.TripletStore(config.dataset_store)
    run_dir = config.runs_dir / args.run_id
    if not run_dir.exists():
        raise ConfigError(f"run directory {run_dir} does not exist")
    records = runners.load_records(run_dir)
    verdicts_path = run_dir / "verdicts.ndjson"
    existing = (
        {(v.triplet_id, v.model_id, v.method) for v in evaluation.load_verdicts(verdicts_path)}
        if verdicts_path.exists()
        else set()
    )
    pending = [r for r in records if (r.triplet_id, r.model_id, r.method) not in existing]
    if args.dry_run:
        _emit(args, "judge.plan", run_id=args.run_id, pending=len(pending), grader=args.grader)
        return 0

    verdicts = list(evaluation.load_verdicts(verdicts_path)) if verdicts_path.exists() else []
    judge_client = None
    judge_model = ""
    if args.grader == "judge":
        judge_endpoint = config.endpoint_for_role("judge")
        judge_client = _client(judge_endpoint, args)
        judge_model = judge_endpoint.model_id
    comparison_rows = []
    try:
        for record in sorted(pending, key=lambda r: (r.model_id, r.triplet_id)):
            triplet = store_.get(record.triplet_id)
            if args.grader == "judge" and record.generated_answer:
                verdict = evaluation.grade_with_judge(
                    triplet.question,
                    triplet.answer,
                    record.generated_answer,
                    judge_client,
                    judge_model,
                    triplet_id=record.triplet_id,
                    model_id=record.model_id,
                    method=record.method,
                )
            else:
                verdict = evaluation.grade_with_matcher(
                    record.generated_answer,
                    triplet.answer,
                    triplet_id=record.triplet_id,
                    model_id=record.model_id,
                    method=record.method,
                )
            verdicts.append(verdict)
            comparison_rows.append(
                {
                    "question": triplet.question,
                    "ground_truth": triplet.answer,
                    "generation": record.generated_answer,
                }
            )
    finally:
        if judge_client:
            judge_client.close()
    verdicts.sort(key=lambda v: (v.model_id, v.method, v.triplet_id))
    evaluation.save_verdicts(verdicts_path, verdicts)
    if comparison_rows or not (run_dir / "comparison.json").exists():
        all_rows = [
            {
                "question": store_.get(r.triplet_id).question,
                "ground_truth": store_.get(r.triplet_id).answer,
                "generation": r.generated_answer,
            }
            for r in sorted(records, key=lambda r: (r.model_id, r.triplet_id))
        ]
        evaluation.write_comparison_file(all_rows, run_dir / "comparison.json")
    _emit(args, "judge.done", run_id=args.run_id, graded=len(pending), total=len(verdicts))
    return 0


def cmd_report(args) -> int:
    config = _require_config(args)
    run_dir = config.runs_dir / args.run_id
    verdicts = evaluation.load_verdicts(run_dir / "verdicts.ndjson")
    by_model: dict[str, list[evaluation.Verdict]] = {}
    for v in verdicts:
        by_model.setdefault(v.model_id, []).append(v)
    pairs = []
    for spec in args.compare or []:
        if ":" not in spec:
            raise ConfigError(f"--compare takes base:fine_tuned, got {spec!r}")
        pairs.append(tuple(spec.split(":", 1)))
    if args.dry_run:
        _emit(args, "report.plan", models=sorted(by_model), pairs=pairs)
        return 0
    evaluations = []
    paired_models = {m for pair in pairs for m in pair}
    for base_id, ft_id in pairs:
        base = by_model.get(base_id)
        ft = by_model.get(ft_id)
        if not base or not ft:
            raise ConfigError(f"verdicts missing for comparison {base_id}:{ft_id}")
        matrix = evaluation.confusion(base, ft)
        pre = evaluation.accuracy(base)
        ft_report = evaluation.accuracy(ft)
        try:
            metrics = evaluation.stability(matrix, pre.accuracy, ft_report.accuracy)
        except evaluation.UndefinedGain:
            metrics = evaluation.StabilityMetrics(
                relative_gain=None,
                correction_to_regression=evaluation.correction_to_regression(matrix),
            )
        evaluations.append(
            evaluation.ModelEvaluation(
                model_id=base_id, pre=pre, ft=ft_report, matrix=matrix, metrics=metrics
            )
        )
    for model_id in sorted(by_model):
        if model_id not in paired_models:
            evaluations.append(
                evaluation.ModelEvaluation(model_id=model_id, pre=evaluation.accuracy(by_model[model_id]))
            )
    out_dir = Path(args.out_dir) if args.out_dir else config.reports_dir / args.run_id
    json_path, text_path = evaluation.emit_report(evaluations, out_dir)
    _emit(args, "report.done", json=json_path, text=text_path)
    return 0


def cmd_merge_adapter(args) -> int:
    weights = lora.load_weight_matrix(args.weights)
    name, update = lora.read_adapter(args.adapter)
    if args.dry_run:
        _emit(args, "merge.plan", module=name, shape=list(update.shape), rank=update.rank)
        return 0
    merged = lora.merge(weights, update, scale_mode=args.scale_mode)
    lora.save_weight_matrix(args.out, merged)
    _emit(args, "merge.done", module=name, out=args.out, scale_mode=args.scale_mode)
    return 0


# --- parser / dispatch -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tableval",
        description="Curate table-QA datasets from PDFs and benchmark VLM endpoints on them.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="pipeline YAML config")
        p.add_argument("--dry-run", action="store_true", help="plan only; no writes, no endpoints")
        p.add_argument("--log-json", action="store_true", help="newline-delimited JSON logs")

    p = sub.add_parser("ingest", help="extract and render table pages from a PDF")
    common(p)
    p.add_argument("--pdf", required=True)
    p.add_argument("--out-dir")
    p.add_argument("--zoom", type=float, default=None)
    p.add_argument("--pages", help="comma-separated 1-based page numbers, overrides detection")
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("curate", help="generate QA triplets for rendered pages")
    common(p)
    p.add_argument("--manifest-dir")
    p.set_defaults(handler=cmd_curate)

    p = sub.add_parser("split", help="deterministic page-grouped train/test split")
    common(p)
    p.add_argument("--train-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_split)

    p = sub.add_parser("export", help="write the chat-format fine-tuning dataset")
    common(p)
    p.add_argument("--subset", choices=("train", "test"), default="train")
    p.add_argument("--split")
    p.add_argument("--out")
    p.add_argument("--system-prompt")
    p.set_defaults(handler=cmd_export)

    p = sub.add_parser("run", help="run a split through answerer models")
    common(p)
    p.add_argument("--method", choices=runners.METHODS, required=True)
    p.add_argument("--models", help="comma-separated model ids (default: all configured)")
    p.add_argument("--subset", choices=("train", "test"), default="test")
    p.add_argument("--split")
    p.add_argument("--run-id")
    p.add_argument("--include-image", action="store_true", help="indirect: send the image too")
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser("judge", help="grade a run's generations")
    common(p)
    p.add_argument("--run-id", required=True)
    p.add_argument("--grader", choices=("judge", "matcher"), default="judge")
    p.set_defaults(handler=cmd_judge)

    p = sub.add_parser("report", help="accuracy, confusion, and stability reports")
    common(p)
    p.add_argument("--run-id", required=True)
    p.add_argument("--compare", action="append", help="base_model:fine_tuned_model (repeatable)")
    p.add_argument("--out-dir")
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("merge-adapter", help="merge a trained adapter file into base weights")
    common(p)
    p.add_argument("--weights", required=True, help=".npy or .json weight matrix")
    p.add_argument("--adapter", required=True, help="adapter file in the documented format")
    p.add_argument("--out", required=True)
    p.add_argument("--scale-mode", choices=("paper_eq2", "alpha_over_r"), default="paper_eq2")
    p.set_defaults(handler=cmd_merge_adapter)

    return parser


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except Exception as exc:  # pipeline failures become exit 1 with one JSON line
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
