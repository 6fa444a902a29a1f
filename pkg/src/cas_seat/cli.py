"""Command-line entry point: filter -> annotate -> mix -> eval -> report.

One TOML config file declares corpora, client endpoints, filter policy,
and run settings; command-line flags override it. Every command writes a
manifest (input digests, template versions, model ids) next to its
artifacts, is idempotent under --resume (cached and checkpointed calls
are never re-issued), and produces bit-identical outputs at any
parallelism level.

Exit codes: 0 success, 2 config validation failure, 3 missing upstream
artifact, 4 endpoint failure after retries, 1 anything else.

Config layout::

    [paths]
    source_corpus = "corpus.json"
    image_root = "images"
    out_dir = "out"

    [benchmarks]
    MathVista = "benchmarks/mathvista.jsonl"

    [clients.teacher]          # likewise clients.main, clients.extractor
    endpoint_url = "http://localhost:8000/v1"
    model_id = "teacher-7b"

    [filter]                   # FilterPolicy fields, all optional
    difficulty_trials = 8

    [run]
    parallelism = 4
    template_version = "v1"
    mock_script = "mock.json"  # exactly one of endpoint_url / mock script
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import cascade, corpus_io, ddf, evalbench
from .batch import Checkpoint
from .corpus_io import Benchmark
from .ddf import FilterPolicy
from .evalbench import Phase
from .gateway import ClientConfig, GatewayError, MockBackend, ModelClient
from .prompts import PromptError

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_MISSING_ARTIFACT = 3
EXIT_ENDPOINT = 4

CLIENT_ROLES = ("teacher", "main", "extractor")


class ConfigError(ValueError):
    pass


class MissingArtifactError(FileNotFoundError):
    pass


@dataclass
class RunConfig:
    config_dir: Path
    out_dir: Path
    source_corpus: Path | None = None
    image_root: Path | None = None
    benchmarks: dict[str, Path] = field(default_factory=dict)
    clients: dict[str, dict] = field(default_factory=dict)
    policy: FilterPolicy = field(default_factory=FilterPolicy)
    template_version: str = "v1"
    parallelism: int = 1
    resume: bool = False
    mock_script: Path | None = None
    cse_cap: int | None = None
    model_extraction: bool = False

    def _resolve(self, value: str) -> Path:
        path = Path(value)
        return path if path.is_absolute() else self.config_dir / path

    def validate(self, needed_roles: tuple[str, ...]) -> None:
        for name, path in [
            ("source_corpus", self.source_corpus),
            ("image_root", self.image_root),
            ("mock_script", self.mock_script),
            *[(f"benchmarks.{k}", v) for k, v in self.benchmarks.items()],
        ]:
            if path is not None and not Path(path).exists():
                raise ConfigError(f"configured path {name} does not exist: {path}")
        for role in needed_roles:
            client = self.clients.get(role)
            if client is None:
                raise ConfigError(f"missing [clients.{role}] section")
            has_endpoint = bool(client.get("endpoint_url"))
            has_mock = self.mock_script is not None
            if has_endpoint == has_mock:
                raise ConfigError(
                    f"client {role!r} needs exactly one of a real endpoint_url"
                    " or a mock script"
                )
            if not client.get("model_id"):
                raise ConfigError(f"client {role!r} needs a model_id")


def load_config(path: Path, args: argparse.Namespace) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from None

    paths = raw.get("paths", {})
    run = raw.get("run", {})
    config = RunConfig(
        config_dir=path.parent.resolve(),
        out_dir=Path("out"),
    )
    if "out_dir" in paths:
        config.out_dir = config._resolve(paths["out_dir"])
    if "source_corpus" in paths:
        config.source_corpus = config._resolve(paths["source_corpus"])
    if "image_root" in paths:
        config.image_root = config._resolve(paths["image_root"])
    config.benchmarks = {
        str(k): config._resolve(v) for k, v in raw.get("benchmarks", {}).items()
    }
    config.clients = {
        role: dict(cfg) for role, cfg in raw.get("clients", {}).items()
    }
    policy_fields = {f.name for f in dataclasses.fields(FilterPolicy)}
    policy_kwargs = {}
    for key, value in raw.get("filter", {}).items():
        if key not in policy_fields:
            raise ConfigError(f"unknown [filter] key {key!r}")
        if key == "excluded_domains":
            value = frozenset(value)
        policy_kwargs[key] = value
    try:
        config.policy = FilterPolicy(**policy_kwargs)
    except ValueError as exc:
        raise ConfigError(f"invalid [filter] policy: {exc}") from None

    config.template_version = str(run.get("template_version", "v1"))
    config.parallelism = int(run.get("parallelism", 1))
    config.resume = bool(run.get("resume", False))
    if run.get("mock_script"):
        config.mock_script = config._resolve(run["mock_script"])
    if run.get("cse_cap") is not None:
        config.cse_cap = int(run["cse_cap"])
    config.model_extraction = bool(run.get("model_extraction", False))

    # Flags win over the file.
    if args.out:
        config.out_dir = Path(args.out)
    if args.parallelism is not None:
        config.parallelism = args.parallelism
    if args.resume:
        config.resume = True
    if args.mock_script:
        config.mock_script = Path(args.mock_script)
    if config.parallelism < 1:
        raise ConfigError("parallelism must be >= 1")
    return config


def _build_client(config: RunConfig, role: str, shared_mock: MockBackend | None) -> ModelClient:
    spec = dict(config.clients[role])
    spec.setdefault("endpoint_url", "")
    spec.setdefault("max_in_flight", max(config.parallelism, 1))
    if spec.get("cache_dir"):
        spec["cache_dir"] = config._resolve(str(spec["cache_dir"]))
    else:
        spec["cache_dir"] = config.out_dir / "cache" / role
    known = {f.name for f in dataclasses.fields(ClientConfig)}
    unknown = set(spec) - known
    if unknown:
        raise ConfigError(f"unknown [clients.{role}] keys {sorted(unknown)}")
    client_config = ClientConfig(**spec)
    return ModelClient(
        client_config,
        backend=shared_mock,
        image_root=config.image_root,
    )


def _mock_backend(config: RunConfig) -> MockBackend | None:
    if config.mock_script is None:
        return None
    return MockBackend.from_script_file(config.mock_script)


def _checkpoint(config: RunConfig, name: str) -> Checkpoint:
    path = config.out_dir / "checkpoints" / f"{name}.jsonl"
    if not config.resume and path.exists():
        path.unlink()
    return Checkpoint(path)


def _digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(config: RunConfig, command: str, inputs: dict[str, Path], **extra) -> None:
    manifest = {
        "command": command,
        "inputs": {name: _digest(path) for name, path in sorted(inputs.items())},
        "template_version": config.template_version,
        **extra,
    }
    out = config.out_dir / "manifests" / f"{command}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _require_artifact(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(
            f"missing artifact {path}; run `cas-seat {producer}` first"
        )
    return path


# -- commands ---------------------------------------------------------------


def cmd_filter(config: RunConfig) -> int:
    config.validate(("teacher",))
    if config.source_corpus is None:
        raise ConfigError("paths.source_corpus is required for `filter`")
    records = corpus_io.load_source_corpus(config.source_corpus)
    client = _build_client(config, "teacher", _mock_backend(config))
    kept, ledger = ddf.filter_source(
        records,
        client,
        config.policy,
        image_root=config.image_root,
        template_version=config.template_version,
        parallelism=config.parallelism,
        checkpoint=_checkpoint(config, "filter"),
    )
    corpus_io.save_source_corpus(kept, config.out_dir / "kept_corpus.json")
    ddf.save_ledger(ledger, config.out_dir / "source_ledger.jsonl")
    _write_manifest(
        config,
        "filter",
        {"source_corpus": config.source_corpus},
        model_ids={"teacher": client.config.model_id},
        policy={
            k: sorted(v) if isinstance(v, frozenset) else v
            for k, v in dataclasses.asdict(config.policy).items()
        },
    )
    histogram = ddf.rejection_histogram(ledger)
    print(f"loaded {len(records)} records, kept {len(kept)}")
    for criterion, count in histogram.items():
        print(f"  rejected {criterion}: {count}")
    ratio = len(kept) / len(records) if records else 0.0
    print(f"retention ratio: {ratio:.3f}")
    return EXIT_OK


def cmd_annotate(config: RunConfig, mode: str) -> int:
    config.validate(("teacher",))
    kept_path = _require_artifact(config.out_dir / "kept_corpus.json", "filter")
    records = corpus_io.load_source_corpus(kept_path)
    client = _build_client(config, "teacher", _mock_backend(config))

    if mode == "seat":
        traces = cascade.annotate_seat(
            records,
            client,
            template_version=config.template_version,
            parallelism=config.parallelism,
            checkpoint=_checkpoint(config, "annotate_seat"),
        )
        cascade.save_traces(traces, config.out_dir / "seat_traces.jsonl")
        print(f"annotated {len(traces)} SEAT traces")
    elif mode == "cot":
        traces = cascade.annotate_cot(
            records,
            client,
            template_version=config.template_version,
            parallelism=config.parallelism,
            checkpoint=_checkpoint(config, "annotate_cot"),
        )
        cascade.save_traces(traces, config.out_dir / "cot_traces.jsonl")
        kept, ledger = ddf.filter_labeled(traces, config.policy)
        ddf.save_ledger(ledger, config.out_dir / "labeled_ledger.jsonl")
        print(f"annotated {len(traces)} CoT traces, {len(kept)} pass labeled filter")
    elif mode == "cascade":
        result = cascade.run_cascade(
            records,
            client,
            config.policy,
            template_version=config.template_version,
            parallelism=config.parallelism,
            cot_checkpoint=_checkpoint(config, "annotate_cot"),
            cse_checkpoint=_checkpoint(config, "annotate_cse"),
            cse_cap=config.cse_cap,
        )
        out = config.out_dir
        cascade.save_traces(result.cot_traces, out / "cot_traces.jsonl")
        ddf.save_ledger(result.labeled_ledger, out / "labeled_ledger.jsonl")
        (out / "error_ids.txt").write_text(
            "".join(f"{t.sample_id}\n" for t in result.error_set), encoding="utf-8"
        )
        cascade.save_traces(result.eval_traces, out / "cse_traces.jsonl")
        (out / "retained_ids.txt").write_text(
            "".join(f"{t.sample_id}\n" for t in result.retained), encoding="utf-8"
        )
        print(
            f"cot={len(result.cot_traces)} labeled_kept={len(result.labeled_kept)}"
            f" correct={len(result.correct_set)} errors={len(result.error_set)}"
            f" retained={len(result.retained)}"
        )
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError(f"unknown annotate mode {mode!r}")

    _write_manifest(
        config,
        f"annotate_{mode}",
        {"kept_corpus": kept_path},
        model_ids={"teacher": client.config.model_id},
    )
    return EXIT_OK


def cmd_mix(config: RunConfig) -> int:
    config.validate(())
    out = config.out_dir
    kept_path = _require_artifact(out / "kept_corpus.json", "filter")
    cot_path = _require_artifact(out / "cot_traces.jsonl", "annotate --mode cascade")
    cse_path = _require_artifact(out / "cse_traces.jsonl", "annotate --mode cascade")
    records = corpus_io.load_source_corpus(kept_path)
    gold = {r.id: r for r in records}
    cot_traces = cascade.load_cot_traces(cot_path)
    labeled_kept, _ = ddf.filter_labeled(cot_traces, config.policy)
    correct_set, _ = cascade.partition_errors(labeled_kept, gold)
    eval_traces = cascade.load_eval_traces(cse_path)
    retained = cascade.retain_corrected(eval_traces, gold)
    examples = cascade.mix_training_set(
        correct_set, retained, gold, cse_cap=config.cse_cap
    )
    count = corpus_io.export_training_jsonl(examples, out / "training.jsonl")
    stats = corpus_io.dataset_stats(examples)
    (out / "training_stats.json").write_text(
        json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    _write_manifest(
        config,
        "mix",
        {"kept_corpus": kept_path, "cot_traces": cot_path, "cse_traces": cse_path},
    )
    print(f"wrote {count} training examples: {stats}")
    return EXIT_OK


def cmd_eval(config: RunConfig, benchmark_name: str, phase_name: str) -> int:
    try:
        benchmark = Benchmark(benchmark_name)
        phase = Phase(phase_name)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if benchmark_name not in config.benchmarks:
        raise ConfigError(f"no [benchmarks] entry for {benchmark_name!r}")
    roles: tuple[str, ...] = ("main",)
    use_extractor = (
        config.model_extraction
        and benchmark is Benchmark.MATHVISTA
        and "extractor" in config.clients
    )
    if use_extractor:
        roles = ("main", "extractor")
    config.validate(roles)

    items = corpus_io.load_benchmark(benchmark, config.benchmarks[benchmark_name])
    mock = _mock_backend(config)
    client = _build_client(config, "main", mock)
    extractor = _build_client(config, "extractor", mock) if use_extractor else None

    eval_dir = config.out_dir / "eval" / benchmark.value / phase.value
    eval_dir.mkdir(parents=True, exist_ok=True)

    first_pass = evalbench.run_inference(
        items,
        client,
        template_version=config.template_version,
        parallelism=config.parallelism,
        extractor_client=extractor,
        model_extraction=use_extractor,
        checkpoint=_checkpoint(config, f"eval_{benchmark.value}_inference"),
    )
    evalbench.save_predictions(
        first_pass, config.out_dir / "eval" / benchmark.value / "predictions_inference.jsonl"
    )
    if phase is Phase.SELF_EVALUATION:
        predictions = evalbench.run_self_evaluation(
            items,
            client,
            first_pass,
            template_version=config.template_version,
            parallelism=config.parallelism,
            checkpoint=_checkpoint(config, f"eval_{benchmark.value}_self_evaluation"),
        )
    else:
        predictions = first_pass
    evalbench.save_predictions(
        predictions, eval_dir / f"predictions_{phase.value}.jsonl"
    )
    report = evalbench.build_report(items, predictions)
    paths = evalbench.emit_report({client.config.model_id: report}, {}, eval_dir)
    _write_manifest(
        config,
        f"eval_{benchmark.value}_{phase.value}",
        {"benchmark": config.benchmarks[benchmark_name]},
        model_ids={"main": client.config.model_id},
        benchmark=benchmark.value,
        phase=phase.value,
    )
    print(paths["md"].read_text(encoding="utf-8"))
    return EXIT_OK


def _parse_named_dirs(pairs: list[str]) -> dict[str, Path]:
    out: dict[str, Path] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"expected NAME=DIR, got {pair!r}")
        name, _, raw = pair.partition("=")
        if name in out:
            raise ConfigError(f"duplicate run name {name!r}")
        out[name] = Path(raw)
    return out


def _load_run_report(run_dir: Path) -> evalbench.ScoreReport:
    path = _require_artifact(Path(run_dir) / "report.json", "eval")
    obj = json.loads(path.read_text(encoding="utf-8"))
    if len(obj) != 1:
        raise ConfigError(
            f"{path}: expected exactly one report, found {sorted(obj)}"
        )
    return evalbench.ScoreReport.from_obj(next(iter(obj.values())))


def cmd_report(config: RunConfig, baselines: list[str], candidates: list[str]) -> int:
    baseline_reports = {
        name: _load_run_report(d) for name, d in _parse_named_dirs(baselines).items()
    }
    candidate_reports = {
        name: _load_run_report(d) for name, d in _parse_named_dirs(candidates).items()
    }
    if not candidate_reports:
        raise ConfigError("at least one --candidate NAME=DIR is required")
    out_dir = config.out_dir / "combined_report"
    paths = evalbench.emit_report(candidate_reports, baseline_reports, out_dir)
    print(paths["md"].read_text(encoding="utf-8"))
    return EXIT_OK


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cas-seat",
        description="Cascaded self-evaluation training-data pipeline",
    )
    parser.add_argument("--config", required=True, help="TOML run configuration")
    parser.add_argument("--out", help="output directory (overrides config)")
    parser.add_argument("--resume", action="store_true", help="resume from checkpoints")
    parser.add_argument("--parallelism", type=int, default=None)
    parser.add_argument("--mock-script", help="JSON mock script (overrides config)")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("filter", help="stage-1 source filtering")
    annotate = sub.add_parser("annotate", help="teacher annotation")
    annotate.add_argument(
        "--mode", choices=("cot", "seat", "cascade"), default="cascade"
    )
    sub.add_parser("mix", help="build the mixed training set")
    evalp = sub.add_parser("eval", help="run a benchmark")
    evalp.add_argument("--benchmark", required=True)
    evalp.add_argument(
        "--phase",
        choices=tuple(p.value for p in Phase),
        default=Phase.INFERENCE.value,
    )
    report = sub.add_parser("report", help="combine eval runs into one table")
    report.add_argument("--baseline", action="append", default=[], metavar="NAME=DIR")
    report.add_argument("--candidate", action="append", default=[], metavar="NAME=DIR")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(Path(args.config), args)
        config.out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "filter":
            return cmd_filter(config)
        if args.command == "annotate":
            return cmd_annotate(config, args.mode)
        if args.command == "mix":
            return cmd_mix(config)
        if args.command == "eval":
            return cmd_eval(config, args.benchmark, args.phase)
        if args.command == "report":
            return cmd_report(config, args.baseline, args.candidate)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING_ARTIFACT
    except GatewayError as exc:
        print(f"endpoint failure: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT
    except (corpus_io.CorpusError, PromptError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (cascade.CascadeError, evalbench.EvalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
