"""Operator entry point.

Subcommands: ingest-check, investigate, batch, evaluate, memcheck, show.
Configuration precedence is flags > config file > defaults; the API
credential is only ever read from an environment variable.
"""

from __future__ import annotations

import argparse
import json
import shlex
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import evaluation
from .datastore import Dataset, ingest_and_preprocess, load_schema, lookup_transaction
from .errors import FraudDeskError
from .gateway import IMAGE_TOKENS_NOTE, BackendConfig, RecordingBackend
from .orchestrator import Alert, load_investigation, run_investigation
from .sandbox import ExecutorClient

DEFAULTS = {
    "schema": "sparkov",
    "max_steps": "15",
    "out": "out",
    "count": "10",
    "seed": "0",
    "jobs": "2",
    "replay_mode": "loose",
    "credential_env": "FRAUD_DESK_API_KEY",
}


def _read_config(path: str | None) -> dict[str, str]:
    if not path:
        return {}
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise FraudDeskError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _setting(args: argparse.Namespace, config: dict[str, str], name: str) -> str | None:
    flag = getattr(args, name, None)
    if flag is not None:
        return str(flag)
    if name in config:
        return config[name]
    return DEFAULTS.get(name)


def _load_dataset(args, config) -> Dataset:
    dataset_path = _setting(args, config, "dataset")
    if not dataset_path:
        raise FraudDeskError("no dataset given (use --dataset or a config file)")
    schema = load_schema(_setting(args, config, "schema"))
    return ingest_and_preprocess(dataset_path, schema)


def _build_backend(args, config, transcript_override: str | None = None):
    spec = transcript_override or _setting(args, config, "backend")
    if not spec:
        raise FraudDeskError("no backend given (use --backend http:URL@model or scripted:PATH)")
    backend_config = BackendConfig.parse(
        spec,
        credential_env=_setting(args, config, "credential_env"),
        strictness=_setting(args, config, "replay_mode"),
    )
    return backend_config.build()


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fraud-desk",
        description="Automated credit-card fraud investigations and their evaluation.",
    )
    parser.add_argument("--config", help="flat key-value config file")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, backend=True):
        p.add_argument("--dataset", help="CSV file with the transaction corpus")
        p.add_argument("--schema", help="built-in schema name or schema file path")
        if backend:
            p.add_argument("--backend", help="http:URL@model or scripted:PATH")
            p.add_argument("--replay-mode", dest="replay_mode",
                           choices=["loose", "strict-hash"],
                           help="digest checking for scripted backends")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("ingest-check", help="ingest a dataset and report on it")
    common(p, backend=False)

    p = sub.add_parser("investigate", help="run one alert end to end")
    common(p)
    p.add_argument("--trans-num", required=True, help="transaction to investigate")
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--record", help="record the session transcript to this file")
    p.add_argument("--executor", help="command line that launches a script executor")

    p = sub.add_parser("batch", help="run a stratified sample of alerts")
    common(p)
    p.add_argument("--count", type=int, help="total alerts (half fraud, half legitimate)")
    p.add_argument("--seed", type=int, help="sampling seed")
    p.add_argument("--jobs", type=int, help="concurrent investigations")
    p.add_argument("--max-steps", dest="max_steps", type=int)

    p = sub.add_parser("evaluate", help="compute metrics over stored investigations")
    common(p)
    p.add_argument("--judge-backend", dest="judge_backend",
                   help="backend for judge-based metrics (labels, ratings)")

    p = sub.add_parser("memcheck", help="run both dataset memorization checks")
    common(p)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("show", help="pretty-print a stored investigation")
    p.add_argument("path", help="investigation.json path or its directory")
    return parser


# --- subcommands --------------------------------------------------------------------


def _cmd_ingest_check(args, config) -> int:
    dataset = _load_dataset(args, config)
    schema = dataset.schema
    label_col = next(
        (c for c in schema.by_name if c.lower().replace("-", "_") == "is_fraud"), None
    )
    fraud_rows = sum(1 for row in dataset.rows if label_col and row.get(label_col) == 1)
    print(f"rows: {len(dataset)}")
    print(f"schema: {schema.name} ({len(schema.columns)} columns)")
    for column in schema.columns:
        print(f"  {column.name}: {column.kind}")
    if label_col:
        print(f"fraud rows: {fraud_rows} ({fraud_rows / len(dataset):.2%})")
    return 0


def _cmd_investigate(args, config) -> int:
    dataset = _load_dataset(args, config)
    backend = _build_backend(args, config)
    if args.record:
        backend = RecordingBackend(backend, args.record)
    executor = None
    if args.executor:
        scratch = Path(_setting(args, config, "out")) / "scratch"
        scratch.mkdir(parents=True, exist_ok=True)
        executor = ExecutorClient(
            shlex.split(args.executor),
            dataset_path=_setting(args, config, "dataset"),
            scratch_dir=scratch,
        )
    try:
        investigation = run_investigation(
            Alert(trans_num=args.trans_num),
            backend,
            dataset,
            max_steps=int(_setting(args, config, "max_steps")),
            out_dir=_setting(args, config, "out"),
            executor=executor,
            echo=print,
        )
    finally:
        if executor is not None:
            executor.close()
        if isinstance(backend, RecordingBackend):
            backend.close()
    out = Path(_setting(args, config, "out")) / investigation.id
    print(f"status: {investigation.status} ({investigation.stop_reason})")
    print(f"artifacts: {out}")
    if investigation.status == "failed":
        print(f"error [investigate] {investigation.stop_detail}", file=sys.stderr)
        return 1
    return 0


def _cmd_batch(args, config) -> int:
    dataset = _load_dataset(args, config)
    count = int(_setting(args, config, "count"))
    seed = int(_setting(args, config, "seed"))
    jobs = int(_setting(args, config, "jobs"))
    out_dir = _setting(args, config, "out")
    max_steps = int(_setting(args, config, "max_steps"))
    backend_spec = _setting(args, config, "backend")
    if not backend_spec:
        raise FraudDeskError("no backend given")

    legit, fraud = evaluation.stratified_sample(dataset, count // 2, seed)
    alerts = [Alert(trans_num=dataset.key_of(row)) for row in legit + fraud]
    print(f"batch: {len(alerts)} alerts (seed {seed})")

    scripted_dir = None
    if backend_spec.startswith("scripted:"):
        candidate = Path(backend_spec[len("scripted:"):])
        if candidate.is_dir():
            scripted_dir = candidate
    shared_backend = None
    if backend_spec.startswith("http:"):
        shared_backend = _build_backend(args, config)

    def one(alert: Alert) -> str:
        if shared_backend is not None:
            backend = shared_backend
        elif scripted_dir is not None:
            backend = _build_backend(
                args, config, f"scripted:{scripted_dir / (alert.trans_num + '.ndjson')}"
            )
        else:
            backend = _build_backend(args, config)
        investigation = run_investigation(
            alert, backend, dataset, max_steps=max_steps, out_dir=out_dir
        )
        return f"{investigation.id}: {investigation.status}"

    with ThreadPoolExecutor(max_workers=max(jobs, 1)) as pool:
        for line in pool.map(one, alerts):
            print(line)
    return 0


def _iter_investigations(out_dir: Path):
    for path in sorted(out_dir.glob("*/investigation.json")):
        yield load_investigation(path)


def _cmd_evaluate(args, config) -> int:
    out_dir = Path(_setting(args, config, "out"))
    investigations = list(_iter_investigations(out_dir))
    if not investigations:
        raise FraudDeskError(f"no investigations under {out_dir}")
    judge = None
    if args.judge_backend:
        judge = _build_backend(args, config, args.judge_backend)

    dataset = None
    label_col = None
    if _setting(args, config, "dataset"):
        dataset = _load_dataset(args, config)
        label_col = next(
            (c for c in dataset.schema.by_name
             if c.lower().replace("-", "_") == "is_fraud"), None)
    rows = []
    predicted, actual = [], []
    all_ratings = []
    for inv in investigations:
        row = {
            "id": inv.id,
            "trans_num": inv.alert.trans_num,
            "status": inv.status,
            "steps": len(inv.steps),
            "input_tokens": inv.usage.input_tokens,
            "output_tokens": inv.usage.output_tokens,
            "counter": inv.counter_name,
            "verdict": ("fraud" if inv.verdict.fraudulent else "legit") if inv.verdict else "",
        }
        if dataset is not None and label_col is not None:
            record = lookup_transaction(dataset, inv.alert.trans_num)
            if record is not None and record.is_fraud is not None:
                row["label"] = "fraud" if record.is_fraud else "legit"
                if inv.verdict is not None:
                    predicted.append(inv.verdict.fraudulent)
                    actual.append(bool(record.is_fraud))
        if judge is not None and inv.verdict is not None and inv.steps:
            labels = evaluation.label_supporting_steps(inv, judge)
            ratio = evaluation.min_trajectory_ratio(inv, labels)
            row["min_trajectory_ratio"] = evaluation.format_ratio(ratio)
        if judge is not None and inv.unfiltered_report is not None:
            all_ratings.extend(
                evaluation.evaluate_report_quality(inv.unfiltered_report, judge)
            )
        rows.append(row)

    evaluation.write_summary_csv(out_dir / "summary.csv", rows)
    metrics: dict = {
        "investigations": len(rows),
        "token_note": IMAGE_TOKENS_NOTE,
    }
    if predicted:
        metrics["detection"] = evaluation.detection_metrics(predicted, actual).to_dict()
    if all_ratings:
        for aspect in evaluation.ASPECTS:
            distribution = evaluation.aggregate_likert(all_ratings, aspect)
            evaluation.write_likert_table(
                out_dir / f"likert_{aspect}.csv", aspect, distribution
            )
            metrics.setdefault("likert_top_two", {})[aspect] = distribution.top_two_fraction
        metrics["likert_basis"] = "per-evidence"
    (out_dir / "metrics.json").write_text(
        json.dumps(metrics, indent=2) + "\n", encoding="utf-8"
    )
    print(f"wrote {out_dir / 'summary.csv'}")
    print(f"wrote {out_dir / 'metrics.json'}")
    return 0


def _cmd_memcheck(args, config) -> int:
    dataset = _load_dataset(args, config)
    backend = _build_backend(args, config)
    seed = int(_setting(args, config, "seed"))
    completion = evaluation.memorization_feature_completion(dataset, backend, seed=seed)
    print(f"feature completion: {completion.test_count} tests, "
          f"accuracy {completion.accuracy:.4f}")
    backend2 = _build_backend(args, config)
    isfraud = evaluation.memorization_isfraud_check(dataset, backend2, seed=seed)
    print("is-fraud prediction:")
    print(isfraud.matrix.format_table())
    print(f"accuracy {isfraud.matrix.accuracy:.4f}, abstentions {isfraud.abstentions}")
    out_dir = Path(_setting(args, config, "out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "memcheck.json").write_text(json.dumps({
        "feature_completion": completion.to_dict(),
        "isfraud_check": isfraud.to_dict(),
    }, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {out_dir / 'memcheck.json'}")
    return 0


def _cmd_show(args, config) -> int:
    path = Path(args.path)
    if path.is_dir():
        path = path / "investigation.json"
    investigation = load_investigation(path)
    print(f"investigation {investigation.id} "
          f"({investigation.status}, {investigation.stop_reason})")
    print(f"alert: trans_num {investigation.alert.trans_num}")
    print(f"usage: {investigation.usage.input_tokens} in / "
          f"{investigation.usage.output_tokens} out ({investigation.counter_name})")
    for step in investigation.steps:
        marker = " [terminal]" if step.is_terminal else ""
        print(f"\nstep {step.index}{marker}")
        if step.planning:
            print(f"  plan: {step.planning}")
        for call, result in step.gathering:
            print(f"  tool {call.name}: {result.kind}")
        if step.analysis:
            print(f"  analysis: {step.analysis}")
    if investigation.unfiltered_report:
        print(f"\nreport steps: {len(investigation.unfiltered_report.steps)}")
    if investigation.filtered_report:
        print("key evidence:")
        for item in investigation.filtered_report.evidence:
            print(f"  - {item}")
    if investigation.verdict:
        label = "FRAUDULENT" if investigation.verdict.fraudulent else "LEGITIMATE"
        print(f"verdict: {label}")
        if investigation.verdict.rationale:
            print(f"rationale: {investigation.verdict.rationale}")
    return 0


_COMMANDS = {
    "ingest-check": _cmd_ingest_check,
    "investigate": _cmd_investigate,
    "batch": _cmd_batch,
    "evaluate": _cmd_evaluate,
    "memcheck": _cmd_memcheck,
    "show": _cmd_show,
}


def run_cli(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        config = _read_config(args.config)
        return _COMMANDS[args.command](args, config)
    except FraudDeskError as exc:
        print(f"error [{args.command}] {exc.code}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error [{args.command}] IoFailure: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
