"""Command-line harness: run federated optimization, aggregate prompt files,
measure surprisal, and score prompts against datasets.

Exit codes: 0 ok, 2 config, 3 backend/transport, 4 context window,
5 aggregation, 6 dataset.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
import time
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

from fedprompt import __version__
from fedprompt.aggregation import (
    DEFAULT_DYNAMIC_THRESHOLD,
    DEFAULT_SEPARATOR,
    STRATEGY_IDS,
    AggregationInput,
    aggregate,
)
from fedprompt.backends.base import (
    DEFAULT_CONTEXT_WINDOW,
    Backend,
    BackendDescriptor,
)
from fedprompt.backends.mock import load_script
from fedprompt.backends.ngram import NgramBackend
from fedprompt.backends.remote import Cassette, RemoteBackend
from fedprompt.backends.rules import counting_rule_backend
from fedprompt.errors import ConfigError, FedPromptError
from fedprompt.prompts import PromptState
from fedprompt.runtime import RunConfig, RunReport, run
from fedprompt.tasks import (
    DEFAULT_SPLIT_RATIOS,
    FederatedData,
    TaskExample,
    build_federated_data,
    load_dataset,
    score,
)
from fedprompt.templates import Templates, default_templates
from fedprompt.uid import compare_uniformity, uid_stats

CATEGORY_BY_CODE = {
    2: "config",
    3: "backend",
    4: "context-window",
    5: "aggregation",
    6: "dataset",
}

_BUNDLED_DATASET = "demo_counting"


# -- backend construction --------------------------------------------------------


def build_backend(spec: dict[str, Any]) -> Backend:
    """Build a backend from a config-file/flag spec dict."""
    kind = spec.get("kind", "mock")
    context_window = int(spec.get("context_window", DEFAULT_CONTEXT_WINDOW))
    prices = {
        "usd_per_1k_prompt_tokens": float(spec.get("usd_per_1k_prompt_tokens", 0.0)),
        "usd_per_1k_completion_tokens": float(spec.get("usd_per_1k_completion_tokens", 0.0)),
    }
    if kind == "mock":
        descriptor = BackendDescriptor(
            kind="mock",
            model_id=spec.get("model_id", "mock"),
            context_window=context_window,
            **prices,
        )
        script = spec.get("script")
        if script:
            if not Path(script).exists():
                raise ConfigError(f"mock script not found: {script}")
            return load_script(script, descriptor)
        return counting_rule_backend(descriptor)
    if kind == "ngram":
        corpus_path = spec.get("corpus")
        if not corpus_path:
            raise ConfigError("ngram backend needs a corpus file")
        if not Path(corpus_path).exists():
            raise ConfigError(f"corpus file not found: {corpus_path}")
        lines = [
            line for line in Path(corpus_path).read_text(encoding="utf-8").splitlines() if line.strip()
        ]
        return NgramBackend(
            lines,
            order=int(spec.get("order", 2)),
            alpha=float(spec.get("alpha", 1.0)),
        )
    if kind == "remote":
        endpoint = spec.get("endpoint")
        if not endpoint:
            raise ConfigError("remote backend needs an endpoint")
        descriptor = BackendDescriptor(
            kind="remote",
            model_id=spec.get("model_id", "gpt-4"),
            endpoint=endpoint,
            context_window=context_window,
            supports_logprobs=bool(spec.get("supports_logprobs", False)),
            **prices,
        )
        cassette = None
        if spec.get("cassette"):
            cassette = Cassette(spec["cassette"], mode=spec.get("cassette_mode", "replay"))
        return RemoteBackend(
            descriptor,
            api_key_env=spec.get("api_key_env", "FEDPROMPT_API_KEY"),
            cassette=cassette,
        )
    raise ConfigError(f"unknown backend kind: {kind!r}")


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_templates(path: str | None) -> tuple[Templates, str | None, str]:
    """Templates plus (path or None for bundled) and content hash."""
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"template file not found: {path}")
        return Templates.from_file(p), str(p), _sha256_file(p)
    bundled = resources.files("fedprompt").joinpath("data/templates.json")
    digest = hashlib.sha256(bundled.read_bytes()).hexdigest()
    return default_templates(), None, digest


def _load_datasets(
    paths: list[str],
    n_clients: int,
    ratios: tuple[float, float, float],
    seed: int,
    heterogeneous: bool,
) -> tuple[FederatedData, dict[str, str]]:
    """Load datasets (bundled demo when none given) and build the partition."""
    hashes: dict[str, str] = {}
    examples: list[TaskExample] = []
    if not paths:
        bundled = resources.files("fedprompt").joinpath(f"data/{_BUNDLED_DATASET}.jsonl")
        hashes[f"bundled:{_BUNDLED_DATASET}"] = hashlib.sha256(bundled.read_bytes()).hexdigest()
        with resources.as_file(bundled) as p:
            examples = load_dataset(p, _BUNDLED_DATASET)
    else:
        for path in paths:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"dataset path not found: {path}")
            hashes[str(p)] = _sha256_file(p)
            examples.extend(load_dataset(p, p.stem))
    heterogeneous = heterogeneous or len(paths) > 1
    data = build_federated_data(
        examples, n_clients, ratios=ratios, seed=seed, heterogeneous=heterogeneous
    )
    return data, hashes


# -- run subcommand ----------------------------------------------------------------


def _resolve_run_settings(args: argparse.Namespace) -> dict[str, Any]:
    """Merge defaults, config file, and flags (flags win)."""
    settings: dict[str, Any] = {
        "num_clients": 3,
        "sampling_rate": 1.0,
        "rounds": 1,
        "local_epochs": 3,
        "batch_size": 3,
        "strategy": "concat",
        "seed": 0,
        "deterministic": True,
        "initial_prompt": None,
        "final_instruction": None,
        "separator": DEFAULT_SEPARATOR,
        "dynamic_threshold": DEFAULT_DYNAMIC_THRESHOLD,
        "backend": {"kind": "mock"},
        "datasets": [],
        "templates_path": None,
        "output_dir": None,
        "ratios": list(DEFAULT_SPLIT_RATIOS),
        "heterogeneous": False,
    }
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {args.config}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if "config" in raw and isinstance(raw["config"], dict) and "artifact_version" in raw:
            raw = raw["config"]  # a manifest.json doubles as a config file
        for key, value in raw.items():
            if key not in settings:
                raise ConfigError(f"unknown config key: {key!r}")
            settings[key] = value

    flag_map = {
        "clients": "num_clients",
        "sampling_rate": "sampling_rate",
        "rounds": "rounds",
        "local_steps": "local_epochs",
        "batch_size": "batch_size",
        "strategy": "strategy",
        "seed": "seed",
        "initial_prompt": "initial_prompt",
        "threshold": "dynamic_threshold",
        "templates": "templates_path",
        "out": "output_dir",
    }
    for flag, key in flag_map.items():
        value = getattr(args, flag)
        if value is not None:
            settings[key] = value
    if args.dataset:
        settings["datasets"] = list(args.dataset)
    if args.ratios:
        settings["ratios"] = list(args.ratios)
    if args.heterogeneous:
        settings["heterogeneous"] = True
    if args.non_deterministic:
        settings["deterministic"] = False

    backend_spec = dict(settings["backend"])
    for flag, key in (
        ("backend", "kind"),
        ("script", "script"),
        ("endpoint", "endpoint"),
        ("model", "model_id"),
        ("context_window", "context_window"),
        ("cassette", "cassette"),
        ("cassette_mode", "cassette_mode"),
        ("api_key_env", "api_key_env"),
        ("corpus", "corpus"),
    ):
        value = getattr(args, flag)
        if value is not None:
            backend_spec[key] = value
    settings["backend"] = backend_spec
    return settings


def _write_run_dir(
    out_dir: Path,
    settings: dict[str, Any],
    cfg: RunConfig,
    report: RunReport,
    backend: Backend,
    hashes: dict[str, str],
    templates_hash: str,
    started_at: float,
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)

    config_snapshot = cfg.as_dict()
    config_snapshot.update(
        {
            "backend": {k: v for k, v in settings["backend"].items() if "key" not in k.lower() or k == "api_key_env"},
            "datasets": settings["datasets"],
            "templates_path": settings["templates_path"],
            "output_dir": str(out_dir),
            "ratios": settings["ratios"],
            "heterogeneous": settings["heterogeneous"],
        }
    )
    manifest = {
        "artifact_version": __version__,
        "config": config_snapshot,
        "templates_sha256": templates_hash,
        "dataset_sha256": hashes,
        "backend_descriptor": dataclasses.asdict(backend.descriptor),
        "started_at": started_at,
        "finished_at": time.time(),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )

    with (out_dir / "rounds.jsonl").open("w", encoding="utf-8") as fh:
        for record in report.records:
            fh.write(json.dumps(record.as_dict(), sort_keys=True) + "\n")

    with (out_dir / "decisions.jsonl").open("w", encoding="utf-8") as fh:
        for decision in report.decisions:
            fh.write(json.dumps(dataclasses.asdict(decision), sort_keys=True) + "\n")

    for round_no, snapshots in report.prompt_history.items():
        round_dir = out_dir / "prompts" / f"round_{round_no}"
        round_dir.mkdir(parents=True, exist_ok=True)
        for name, state in snapshots.items():
            filename = "global.txt" if name == "global" else f"client_{name}.txt"
            (round_dir / filename).write_text(state.text + "\n", encoding="utf-8")

    totals: dict[str, int] = {}
    for record in report.records:
        for tag, count in record.llm_calls_by_tag.items():
            totals[tag] = totals.get(tag, 0) + count
    report_doc = {
        "best_prompt": report.best_prompt.as_dict(),
        "final_prompt": report.final_prompt.as_dict(),
        "best_val_accuracy": report.best_val_accuracy,
        "test_accuracy": report.test_accuracy,
        "test_parse_failures": report.test_parse_failures,
        "total_cost_usd": report.total_cost_usd,
        "final_test_cost_usd": report.final_test_cost_usd,
        "rounds": len(report.records),
        "per_round_token_lengths": [r.global_prompt_tokens for r in report.records],
        "per_round_val_accuracy": [r.val_accuracy for r in report.records],
        "llm_calls_by_tag": totals,
    }
    (out_dir / "report.json").write_text(
        json.dumps(report_doc, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def cmd_run(args: argparse.Namespace) -> int:
    started_at = time.time()
    settings = _resolve_run_settings(args)
    cfg = RunConfig(
        num_clients=int(settings["num_clients"]),
        sampling_rate=float(settings["sampling_rate"]),
        rounds=int(settings["rounds"]),
        local_epochs=int(settings["local_epochs"]),
        batch_size=int(settings["batch_size"]),
        strategy=settings["strategy"],
        seed=int(settings["seed"]),
        deterministic=bool(settings["deterministic"]),
        separator=settings["separator"],
        dynamic_threshold=int(settings["dynamic_threshold"]),
    )
    if settings["initial_prompt"]:
        cfg.initial_prompt = settings["initial_prompt"]
    if settings["final_instruction"]:
        cfg.final_instruction = settings["final_instruction"]
    cfg.validate()

    templates, templates_path, templates_hash = _load_templates(settings["templates_path"])
    settings["templates_path"] = templates_path
    data, hashes = _load_datasets(
        settings["datasets"],
        cfg.num_clients,
        tuple(settings["ratios"]),
        cfg.seed,
        settings["heterogeneous"],
    )
    backend = build_backend(settings["backend"])

    report = run(cfg, data, backend, templates)

    out_dir = Path(settings["output_dir"] or f"runs/run-s{cfg.seed}-{cfg.strategy}")
    _write_run_dir(
        out_dir, settings, cfg, report, backend, hashes, templates_hash, started_at
    )
    print(
        f"rounds={len(report.records)} "
        f"best_val_accuracy={report.best_val_accuracy:.4f} "
        f"test_accuracy={report.test_accuracy:.4f} "
        f"total_cost_usd={report.total_cost_usd:.6f} "
        f"out={out_dir}"
    )
    return 0


# -- aggregate subcommand ----------------------------------------------------------


def cmd_aggregate(args: argparse.Namespace) -> int:
    texts = []
    for path in args.prompt_files:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"prompt file not found: {path}")
        texts.append(p.read_text(encoding="utf-8").rstrip("\n"))
    backend = build_backend({"kind": args.backend, "script": args.script})
    templates, _, _ = _load_templates(args.templates)
    agg_input = AggregationInput(
        prompts=[(i, PromptState(text=t)) for i, t in enumerate(texts)],
        separator=args.separator,
        budget=args.budget,
        backend=backend,
    )
    merged = aggregate(
        args.strategy,
        agg_input,
        templates=templates,
        threshold=args.threshold,
        final_instruction=args.final_instruction,
    )
    print(merged.text)
    if args.strategy == "dynamic":
        print(f"dynamic: {merged.producer} branch used", file=sys.stderr)
    if args.stats:
        oracle = NgramBackend(texts, order=2, alpha=1.0)
        stats = uid_stats(merged.text, "", oracle)
        payload = {"tokens": {"merged": len(merged.text.split()), "inputs": [len(t.split()) for t in texts]}}
        payload.update(stats.as_dict())
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return 0


# -- surprisal subcommand ----------------------------------------------------------


def _read_text_file(path: str, what: str) -> str:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} file not found: {path}")
    return p.read_text(encoding="utf-8").strip()


def cmd_surprisal(args: argparse.Namespace) -> int:
    text = _read_text_file(args.text, "text")
    corpus_lines = [
        line for line in _read_text_file(args.corpus, "corpus").splitlines() if line.strip()
    ]
    backend = NgramBackend(corpus_lines, order=args.order, alpha=args.alpha)
    if args.compare:
        other = _read_text_file(args.compare, "comparison text")
        report = compare_uniformity(text, other, args.context, backend)
        print(
            json.dumps(
                {
                    "a": report.stats_a.as_dict(),
                    "b": report.stats_b.as_dict(),
                    "more_uniform": report.more_uniform,
                },
                sort_keys=True,
            )
        )
        return 0
    stats = uid_stats(text, args.context, backend)
    scored = backend.token_logprobs(args.context, text)
    writer = csv.writer(sys.stdout)
    writer.writerow(["token", "logprob_nat", "surprisal_bits"])
    for token, logprob, surprisal in zip(scored.tokens, scored.logprobs, stats.surprisals):
        writer.writerow([token, repr(logprob), repr(surprisal)])
    print(json.dumps(stats.as_dict(), sort_keys=True))
    return 0


# -- score subcommand --------------------------------------------------------------


def cmd_score(args: argparse.Namespace) -> int:
    prompt_text = _read_text_file(args.prompt, "prompt")
    p = Path(args.dataset)
    if not p.exists():
        raise ConfigError(f"dataset path not found: {args.dataset}")
    examples = load_dataset(p, p.stem)
    backend = build_backend({"kind": args.backend, "script": args.script})
    report = score(prompt_text, examples, backend)
    print(f"accuracy: {report.accuracy:.2f}")
    print(f"parse_failures: {report.parse_failures}")
    print(f"correct: {report.correct}/{report.total}")
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedprompt",
        description="Federated prompt optimization with textual gradients.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a federated optimization run")
    p_run.add_argument("--config", help="JSON config file (flags override it)")
    p_run.add_argument("--clients", type=int, help="number of clients N")
    p_run.add_argument("--sampling-rate", type=float, dest="sampling_rate", help="client sampling rate C in (0,1]")
    p_run.add_argument("--rounds", type=int, help="number of rounds T")
    p_run.add_argument("--batch-size", type=int, dest="batch_size", help="local batch size B")
    p_run.add_argument("--local-steps", type=int, dest="local_steps", help="local epochs E")
    p_run.add_argument("--strategy", choices=STRATEGY_IDS, help="aggregation strategy")
    p_run.add_argument("--seed", type=int, help="run seed")
    p_run.add_argument("--backend", choices=("mock", "ngram", "remote"), help="backend kind")
    p_run.add_argument("--script", help="mock backend script file")
    p_run.add_argument("--corpus", help="ngram backend corpus file")
    p_run.add_argument("--endpoint", help="remote backend base URL")
    p_run.add_argument("--model", help="remote model id")
    p_run.add_argument("--context-window", type=int, dest="context_window", help="context window tokens")
    p_run.add_argument("--cassette", help="record/replay cassette path")
    p_run.add_argument("--cassette-mode", choices=("record", "replay"), dest="cassette_mode")
    p_run.add_argument("--api-key-env", dest="api_key_env", help="env var holding the API key")
    p_run.add_argument("--dataset", action="append", help="task JSONL path (repeatable)")
    p_run.add_argument("--ratios", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    p_run.add_argument("--heterogeneous", action="store_true", help="one task per client")
    p_run.add_argument("--templates", help="template JSON file")
    p_run.add_argument("--initial-prompt", dest="initial_prompt", help="override the initial prompt")
    p_run.add_argument("--threshold", type=int, help="dynamic strategy token threshold")
    p_run.add_argument("--out", help="run directory")
    p_run.add_argument("--non-deterministic", action="store_true", dest="non_deterministic", help="run sampled clients concurrently")
    p_run.set_defaults(func=cmd_run)

    p_agg = sub.add_parser("aggregate", help="aggregate prompt files with a strategy")
    p_agg.add_argument("prompt_files", nargs="+", help="one or more prompt text files")
    p_agg.add_argument("--strategy", choices=STRATEGY_IDS, required=True)
    p_agg.add_argument("--separator", default=DEFAULT_SEPARATOR)
    p_agg.add_argument("--budget", type=int, default=DEFAULT_CONTEXT_WINDOW)
    p_agg.add_argument("--threshold", type=int, default=DEFAULT_DYNAMIC_THRESHOLD)
    p_agg.add_argument("--backend", choices=("mock",), default="mock")
    p_agg.add_argument("--script", help="mock backend script file")
    p_agg.add_argument("--templates", help="template JSON file")
    p_agg.add_argument("--final-instruction", dest="final_instruction", help="sentence that must stay last")
    p_agg.add_argument("--stats", action="store_true", help="print token counts and surprisal stats to stderr")
    p_agg.set_defaults(func=cmd_aggregate)

    p_sur = sub.add_parser("surprisal", help="per-token surprisal of a text under an n-gram oracle")
    p_sur.add_argument("--text", required=True, help="text file to measure")
    p_sur.add_argument("--corpus", required=True, help="oracle training corpus (one sequence per line)")
    p_sur.add_argument("--compare", help="second text file; prints the variance ordering instead of CSV")
    p_sur.add_argument("--order", type=int, default=2)
    p_sur.add_argument("--alpha", type=float, default=1.0)
    p_sur.add_argument("--context", default="", help="conditioning context prepended before scoring")
    p_sur.set_defaults(func=cmd_surprisal)

    p_score = sub.add_parser("score", help="exact-match accuracy of a prompt file on a dataset")
    p_score.add_argument("--prompt", required=True, help="prompt text file")
    p_score.add_argument("--dataset", required=True, help="task JSONL path")
    p_score.add_argument("--backend", choices=("mock",), default="mock")
    p_score.add_argument("--script", help="mock backend script file")
    p_score.set_defaults(func=cmd_score)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FedPromptError as exc:
        payload = {
            "error": type(exc).__name__,
            "category": CATEGORY_BY_CODE.get(exc.exit_code, "error"),
            "message": str(exc),
        }
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
