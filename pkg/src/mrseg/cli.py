"""Command-line entry point.

Exit codes: 0 success, 1 validation failure, 2 configuration or parse error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__, build, evaluation, protocol, templates
from .annotations import ParseError
from .records import RecordFormatError, read_records, write_records

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_CONFIG = 2

log = logging.getLogger("mrseg")


def _out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_build(args) -> int:
    overrides = {"seed": args.seed, "workers": args.workers, "output_dir": args.out,
                 "split": args.split, "template_dir": args.template_dir}
    if args.families is not None:
        overrides["families"] = [f for f in args.families.split(",") if f]
    cfg = build.load_config(args.config, overrides)
    result = build.run_build(cfg)
    counts = result.manifest["family_counts"]
    print(f"wrote {len(result.conversations)} conversations to {result.output_dir}")
    for fam, n in counts.items():
        print(f"  {fam:<14}{n:6d}")
    if result.skips:
        print(f"  skipped       {len(result.skips):6d} (see skips.jsonl)")
    return EXIT_OK


def cmd_stats(args) -> int:
    convs = build.load_conversations(args.corpus)
    rows = build.round_histogram(convs)
    out = _out_dir(args.out)
    doc = {"rows": rows, "total": sum(r["count"] for r in rows), "conversations": len(convs)}
    (out / "stats.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                    encoding="utf-8")
    table = build.stats_table(rows)
    (out / "stats.txt").write_text(table, encoding="utf-8")
    build.write_manifest(out, build.manifest(
        "stats", build.input_digest(corpus=Path(args.corpus)),
        {"stats.json": build.sha256_file(out / "stats.json"),
         "stats.txt": build.sha256_file(out / "stats.txt")}))
    sys.stdout.write(table)
    return EXIT_OK


def cmd_validate(args) -> int:
    violations = build.validate_file(args.corpus)
    out = _out_dir(args.out)
    doc = {"passed": not violations, "violations": [v.to_record() for v in violations]}
    (out / "validation.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    build.write_manifest(out, build.manifest(
        "validate", build.input_digest(corpus=Path(args.corpus)),
        {"validation.json": build.sha256_file(out / "validation.json")}))
    if violations:
        print(f"FAIL: {len(violations)} conversation(s) violate invariants")
        for v in violations:
            print(f"  {v.conversation_id}: {'; '.join(v.problems)}")
        return EXIT_INVALID
    print("PASS")
    return EXIT_OK


def cmd_flatten(args) -> int:
    convs = build.load_conversations(args.corpus)
    records = []
    for conv in convs:
        for task in protocol.flatten(conv, args.mode):
            rec = task.to_record()
            obj = conv.objects[task.target_instance]
            rec.update(width=conv.width, height=conv.height,
                       target_mask=obj.mask.to_json(compressed=True))
            records.append(rec)
    out = _out_dir(args.out)
    digest = write_records(out / "tasks.jsonl", "tasks", records)
    build.write_manifest(out, build.manifest(
        "flatten", build.input_digest(corpus=Path(args.corpus), mode=args.mode),
        {"tasks.jsonl": digest}, tasks=len(records)))
    print(f"wrote {len(records)} single-turn tasks ({args.mode})")
    return EXIT_OK


def cmd_score(args) -> int:
    convs = build.load_conversations(args.corpus)
    try:
        preds = [evaluation.PredictionRecord.from_record(r)
                 for r in read_records(args.predictions, "predictions", require_header=False)]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, RecordFormatError):
            raise
        raise RecordFormatError(f"malformed prediction ({exc})", args.predictions) from None
    report = evaluation.score(preds, convs)
    out = _out_dir(args.out)
    table = evaluation.emit_report(report, "table")
    (out / "report.txt").write_text(table, encoding="utf-8")
    (out / "report.json").write_text(evaluation.emit_report(report, "json"), encoding="utf-8")
    build.write_manifest(out, build.manifest(
        "score", build.input_digest(corpus=Path(args.corpus),
                                    predictions=Path(args.predictions)),
        {"report.txt": build.sha256_file(out / "report.txt"),
         "report.json": build.sha256_file(out / "report.json")}))
    sys.stdout.write(table)
    return EXIT_OK


def cmd_templates(args) -> int:
    out = _out_dir(args.out)
    pools = {}
    for family in templates.ALLOWED_SLOTS:
        pools[family] = {split: len(templates.load(args.template_dir, family, split))
                         for split in templates.SPLITS}
    (out / "templates.json").write_text(json.dumps(pools, indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")
    build.write_manifest(out, build.manifest(
        "templates", build.input_digest(template_dir=str(args.template_dir or "default")),
        {"templates.json": build.sha256_file(out / "templates.json")}))
    for family, counts in pools.items():
        print(f"{family:<17} train {counts['train']:4d}  val {counts['val']:4d}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mrseg {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="generate a conversation corpus from annotation sources")
    p.add_argument("--config", help="JSON build config")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")
    p.add_argument("--workers", type=int, help="parallel workers (overrides config)")
    p.add_argument("--split", choices=templates.SPLITS, help="template split")
    p.add_argument("--template-dir", help="template directory (default: shipped pools)")
    p.add_argument("--families", help="comma-separated families to enable; empty for none")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("stats", help="histogram of conversations by round count and family")
    p.add_argument("corpus")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("validate", help="check every conversation invariant")
    p.add_argument("corpus")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("flatten", help="split conversations into single-turn tasks")
    p.add_argument("corpus")
    p.add_argument("--mode", choices=protocol.FLATTEN_MODES, default="caption-substitute")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_flatten)

    p = sub.add_parser("score", help="per-round mIoU / cIoU of mask predictions")
    p.add_argument("predictions")
    p.add_argument("corpus")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("templates", help="check template pools and report their sizes")
    p.add_argument("--template-dir", default=None)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_templates)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ParseError, build.ConfigError, templates.TemplateError, RecordFormatError,
            evaluation.ScoringError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
