"""
Depth-wise Reasoning Command Line

Subcommands tying the generator, the engine, training and the invariant
suites into reproducible runs:

- gen: write a JSONL dataset and print its label histogram
- train: fit a depth-wise (or breadth baseline) model, write checkpoint + history CSV
- eval: accuracy report for a checkpoint or for the parameter-free exact mode
- prop: run invariant suites; nonzero exit iff a property fails
- sweep: breadth layer-count sweep against one depth-wise run, or an aggregator comparison
- demo: stage-by-stage trace of the exact engine on a rendered story or dataset record

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

from core.depwise_engine import AblationConfig, AggregatorKind, EngineResult, decode_offset, run_engine
from core.graph import NodeLookupError, bfs_shortest_path, build_graph
from core.io_utils import load_yaml_section, read_jsonl, write_csv, write_jsonl
from core.model import (
    BreadthModel,
    Checkpoint,
    DepwiseModel,
    ExactDepwiseModel,
    ModelConfig,
    StoryModel,
    load_model,
    model_from_checkpoint,
)
from core.monitoring import (
    add_breadcrumb,
    capture_exception,
    capture_message,
    get_monitoring_manager,
    set_tag,
    span,
    transaction,
)
from core.properties import SUITE_NAMES, run_suite
from core.taskgen import ParsedStory, Split, generate, generate_split, label_histogram, parse
from core.tpr_memory import retrieve
from core.training import (
    EVAL_COLUMNS,
    HISTORY_COLUMNS,
    SWEEP_COLUMNS,
    SweepConfig,
    TrainConfig,
    compare_aggregators,
    evaluate,
    oversmoothing_sweep,
    train,
)
from core.validation import (
    StoryFormat,
    detect_story_format,
    validate_hop_count,
    validate_noise_kind,
    validate_story_record,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
DEFAULT_CONFIG = "config.yaml"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2

# library failures reported as data/runtime errors (exit 1)
RUNTIME_ERRORS = (ValueError, RuntimeError, OSError, KeyError)


class UsageError(Exception):
    """Invalid flag values or combinations (exit 2)."""


def configure_logging(config_path: str = DEFAULT_CONFIG, level: Optional[str] = None) -> None:
    """Configure root logging from the ``logging`` config section; ``level`` overrides it."""
    section = load_yaml_section(config_path, "logging") if Path(config_path).exists() else {}
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if section.get("file"):
        handlers.append(logging.FileHandler(section["file"], encoding="utf-8"))
    logging.basicConfig(
        level=getattr(logging, (level or section.get("level") or "INFO").upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


def _ablation_from_args(args: argparse.Namespace) -> AblationConfig:
    return AblationConfig(
        skip_collection=args.skip_collection,
        random_init_fillers=args.random_init_fillers,
        random_key=args.random_key,
        ablation_seed=args.ablation_seed,
    )


def _add_ablation_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("ablations")
    group.add_argument("--skip-collection", action="store_true", help="Keep only atomic relations in node memories")
    group.add_argument("--random-init-fillers", action="store_true", help="Replace initial fillers by fixed random vectors")
    group.add_argument("--random-key", action="store_true", help="Retrieve with a fixed random key")
    group.add_argument("--ablation-seed", type=int, default=0, help="Seed of the random ablation vectors")


class DepwiseCLI:
    """Command dispatcher; one ``cmd_*`` method per subcommand."""

    def __init__(self):
        self.parser = self.build_parser()

    def build_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(prog="depwise", description="Depth-wise graph reasoning over spatial stories")
        parser.add_argument("--log-level", default=None, help="Override the configured log level")
        sub = parser.add_subparsers(dest="command", required=True)

        gen = sub.add_parser("gen", help="Generate a JSONL dataset")
        gen.add_argument("--seed", type=int, default=None, help="Default: taskgen.seed from the config")
        gen.add_argument("--k", default=None, help="Hops on the clean chain (1-10)")
        gen.add_argument("--noise", default="none", help="none | disconnected | irrelevant | supporting")
        gen.add_argument("--n", type=int, default=None, help="Instances (per k and noise kind with --preset); default: taskgen.n")
        gen.add_argument("--config", default=DEFAULT_CONFIG)
        gen.add_argument("--preset", choices=[s.value for s in Split], default=None)
        gen.add_argument("--out", required=True)
        gen.add_argument("--append", action="store_true", help="Append instead of overwriting")
        gen.set_defaults(handler=self.cmd_gen)

        tr = sub.add_parser("train", help="Train a model")
        tr.add_argument("--data", required=True)
        tr.add_argument("--val", default=None, help="Validation JSONL (default: hold out part of --data)")
        tr.add_argument("--config", default=DEFAULT_CONFIG)
        tr.add_argument("--out-ckpt", required=True)
        tr.add_argument("--history", default=None, help="History CSV (default: next to the checkpoint)")
        tr.add_argument("--resume", default=None, help="Checkpoint to continue from")
        tr.add_argument("--model", choices=["depwise", "breadth"], default="depwise")
        tr.add_argument("--layers", type=int, default=None, help="Breadth layer count")
        tr.add_argument("--aggregator", choices=[a.value for a in AggregatorKind if a is not AggregatorKind.SUM_EXACT], default=None)
        tr.add_argument("--seed", type=int, default=None)
        tr.add_argument("--epochs", type=int, default=None)
        _add_ablation_flags(tr)
        tr.set_defaults(handler=self.cmd_train)

        ev = sub.add_parser("eval", help="Evaluate a checkpoint or the exact mode")
        ev.add_argument("--data", required=True)
        source = ev.add_mutually_exclusive_group(required=True)
        source.add_argument("--ckpt", default=None)
        source.add_argument("--exact", action="store_true")
        ev.add_argument("--out-csv", default=None)
        ev.add_argument("--config", default=DEFAULT_CONFIG)
        ev.add_argument("--threads", type=int, default=None)
        _add_ablation_flags(ev)
        ev.set_defaults(handler=self.cmd_eval)

        prop = sub.add_parser("prop", help="Run invariant suites")
        prop.add_argument("--suite", choices=list(SUITE_NAMES), default="all")
        prop.set_defaults(handler=self.cmd_prop)

        sw = sub.add_parser("sweep", help="Breadth layer sweep or aggregator comparison")
        sw.add_argument("--train", required=True)
        sw.add_argument("--test", required=True)
        sw.add_argument("--config", default=DEFAULT_CONFIG)
        sw.add_argument("--out-csv", required=True)
        sw.add_argument("--mode", choices=["layers", "aggregators"], default="layers")
        sw.add_argument("--seed", type=int, default=None)
        sw.add_argument("--epochs", type=int, default=None)
        sw.set_defaults(handler=self.cmd_sweep)

        demo = sub.add_parser("demo", help="Trace the exact engine on one story")
        text = demo.add_mutually_exclusive_group(required=True)
        text.add_argument("--story-file", default=None)
        text.add_argument("--inline-text", default=None)
        demo.set_defaults(handler=self.cmd_demo)
        return parser

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        try:
            args = self.parser.parse_args(argv)
        except SystemExit as e:
            return EXIT_OK if e.code in (0, None) else EXIT_USAGE

        configure_logging(getattr(args, "config", DEFAULT_CONFIG), args.log_level)
        set_tag("command", args.command)
        add_breadcrumb(f"depwise {args.command}", data={"argv": list(argv) if argv is not None else sys.argv[1:]})
        try:
            with transaction(f"depwise.{args.command}"):
                return args.handler(args)
        except UsageError as e:
            print(f"{self.parser.prog} {args.command}: error: {e}", file=sys.stderr)
            return EXIT_USAGE
        except RUNTIME_ERRORS as e:
            capture_exception(context={"command": args.command})
            print(f"Error: {e}", file=sys.stderr)
            return EXIT_ERROR

    # ============================ COMMANDS ============================

    def cmd_gen(self, args: argparse.Namespace) -> int:
        defaults = load_yaml_section(args.config, "taskgen") if Path(args.config).exists() else {}
        if args.seed is None:
            args.seed = int(defaults.get("seed", 0))
        if args.n is None:
            args.n = int(defaults.get("n", 1))
        if args.n < 0:
            raise UsageError(f"--n must be non-negative, got {args.n}")
        if args.seed < 0:
            raise UsageError(f"--seed must be non-negative, got {args.seed}")
        noise = validate_noise_kind(args.noise)
        if not noise:
            raise UsageError(noise.error)

        if args.preset is not None:
            if args.k is not None:
                raise UsageError("--preset chooses the hop counts itself; drop --k")
            with span("gen"):
                instances = generate_split(args.seed, Split(args.preset), args.n)
        else:
            if args.k is None:
                raise UsageError("--k is required without --preset")
            k = validate_hop_count(args.k)
            if not k:
                raise UsageError(k.error)
            with span("gen"):
                instances = generate(args.seed, k.normalized, noise.normalized, args.n)

        written = write_jsonl(args.out, instances, append=args.append)
        logger.info(f"Wrote {written} instances to {args.out}")
        for label, count in label_histogram(instances).items():
            print(f"{label:<12s} {count}")
        return EXIT_OK

    def cmd_train(self, args: argparse.Namespace) -> int:
        if args.layers is not None and args.model != "breadth":
            raise UsageError("--layers only applies to --model breadth")
        if args.layers is not None and args.layers < 1:
            raise UsageError(f"--layers must be >= 1, got {args.layers}")

        train_cfg = TrainConfig.from_yaml(args.config)
        if args.seed is not None:
            train_cfg = replace(train_cfg, seed=args.seed)
        if args.epochs is not None:
            train_cfg = replace(train_cfg, max_epochs=args.epochs)

        dataset = read_jsonl(args.data)
        validation = read_jsonl(args.val) if args.val else None

        start_epoch = 0
        if args.resume:
            ckpt = Checkpoint.load(args.resume)
            model = model_from_checkpoint(ckpt)
            metadata = ckpt.metadata
            start_epoch = int(metadata.get("last_epoch", metadata.get("epoch", 0)))
            train_cfg = replace(
                train_cfg,
                lr_engine=float(metadata.get("lr_engine", train_cfg.lr_engine)),
                lr_embed=float(metadata.get("lr_embed", train_cfg.lr_embed)),
            )
            logger.info(f"Resuming {model.name} from epoch {start_epoch}")
        else:
            model = self._new_model(args)

        result = train(model, dataset, train_cfg, validation=validation, start_epoch=start_epoch)
        result.checkpoint.metadata["last_epoch"] = result.history[-1].epoch if result.history else start_epoch
        result.checkpoint.save(args.out_ckpt)
        history_path = args.history or str(Path(args.out_ckpt).with_suffix(".history.csv"))
        write_csv(history_path, HISTORY_COLUMNS, result.history_rows())

        print(f"best epoch: {result.best_epoch}")
        print(f"epochs run: {len(result.history)}{' (early stop)' if result.stopped_early else ''}")
        print(f"checkpoint: {args.out_ckpt}")
        print(f"history: {history_path}")
        return EXIT_OK

    @staticmethod
    def _new_model(args: argparse.Namespace) -> StoryModel:
        model_cfg = ModelConfig.from_yaml(args.config)
        model_cfg = replace(model_cfg, ablation=_ablation_from_args(args))
        if args.aggregator:
            model_cfg = replace(model_cfg, aggregator=AggregatorKind(args.aggregator))
        if args.seed is not None:
            model_cfg = replace(model_cfg, seed=args.seed)
        if args.model == "breadth":
            return BreadthModel.create(model_cfg, args.layers or SweepConfig.from_yaml(args.config).max_layers)
        return DepwiseModel.create(model_cfg)

    def cmd_eval(self, args: argparse.Namespace) -> int:
        dataset = read_jsonl(args.data)
        if args.exact:
            model: StoryModel = ExactDepwiseModel(
                ModelConfig.from_yaml(args.config).exact_d,
                ablation=_ablation_from_args(args),
            )
        else:
            model = load_model(args.ckpt)
        report = evaluate(model, dataset, threads=args.threads)
        print(f"model: {model.name}")
        print(report.summary())
        if args.out_csv:
            write_csv(args.out_csv, EVAL_COLUMNS, report.csv_rows())
        return EXIT_OK

    def cmd_prop(self, args: argparse.Namespace) -> int:
        results = run_suite(args.suite)
        for r in results:
            status = "PASS" if r.passed else "FAIL"
            print(f"[{status}] {r.suite}/{r.name} ({r.seconds:.2f}s) {r.detail}")
        failed = [r for r in results if not r.passed]
        print(f"{len(results) - len(failed)}/{len(results)} properties passed")
        if failed:
            names = ", ".join(f"{r.suite}/{r.name}" for r in failed)
            capture_message(f"Failing properties: {names}", level="warning")
        return EXIT_ERROR if failed else EXIT_OK

    def cmd_sweep(self, args: argparse.Namespace) -> int:
        train_set = read_jsonl(args.train)
        test_set = read_jsonl(args.test)
        if not test_set:
            raise UsageError(f"Test set {args.test} is empty")
        model_cfg = ModelConfig.from_yaml(args.config)
        train_cfg = TrainConfig.from_yaml(args.config)
        if args.seed is not None:
            model_cfg = replace(model_cfg, seed=args.seed)
            train_cfg = replace(train_cfg, seed=args.seed)
        if args.epochs is not None:
            train_cfg = replace(train_cfg, max_epochs=args.epochs)

        if args.mode == "aggregators":
            reports = compare_aggregators(train_set, test_set, model_config=model_cfg, train_config=train_cfg)
            rows = [
                (f"depwise-{kind}", "", k, acc)
                for kind, report in reports.items()
                for k, acc in report.per_k_accuracy.items()
            ]
            write_csv(args.out_csv, SWEEP_COLUMNS, rows)
            for kind, report in reports.items():
                print(f"{kind:<16s} {report.accuracy:.4f}")
            return EXIT_OK

        result = oversmoothing_sweep(train_set, test_set, model_cfg, train_cfg, SweepConfig.from_yaml(args.config))
        result.write_csv(args.out_csv)
        print(f"{'model':<10s} {'layers':>6s} {'k':>3s} accuracy")
        for model, layers, k, acc in result.csv_rows():
            print(f"{model:<10s} {str(layers):>6s} {k:>3d} {acc:.4f}")
        for layers, value in result.smoothing.items():
            print(f"smoothing at {layers} layers: {value:.4f}")
        return EXIT_OK

    def cmd_demo(self, args: argparse.Namespace) -> int:
        if args.story_file:
            with open(args.story_file, "r", encoding="utf-8") as fh:
                text = fh.read()
        else:
            text = args.inline_text
        story = load_story(text)
        if story.question is None:
            raise ValueError("The story has no question sentence")
        for line in demo_trace(story):
            print(line)
        return EXIT_OK


def load_story(text: str) -> ParsedStory:
    """Read a story given as rendered text or as one JSONL dataset record."""
    fmt = detect_story_format(text)
    if fmt is None:
        raise ValueError("The story is empty")
    if fmt is StoryFormat.JSONL_RECORD:
        result = validate_story_record(json.loads(text.strip().splitlines()[0]))
        instance = result.raise_for_error()
        for warning in result.warnings:
            logger.warning(warning)
        return ParsedStory(triples=instance.triples, question=instance.question)
    return parse(text)


def demo_trace(story: ParsedStory) -> List[str]:
    """Human-readable lines describing each engine stage for ``story``."""
    model = ExactDepwiseModel()
    g = build_graph(story.triples, model.embeddings)
    src, tgt = story.question
    for node in (src, tgt):
        if node not in g:
            raise NodeLookupError(f"Question entity {node} does not appear in the story")

    with span("demo"):
        result: EngineResult = run_engine(g, g.node_embeddings[tgt], model.engine_config, source=src)

    lines = [f"Parsed {len(story.triples)} relations:"]
    lines.extend(f"  {a} {label.value} {b}" for a, label, b in story.triples)
    lines.append(f"Init: {len(g)} node memories over {g.num_edges} edges")
    if result.traces:
        lines.append(f"Collect: {len(result.traces)} long dependencies")
        lines.extend(
            f"  {t.source} -> {t.target} via {'-'.join(t.path)}: {decode_offset(t.composed).value}"
            for t in result.traces
        )
    else:
        lines.append("Collect: nothing to collect (no pair is two or more hops apart)")

    path = bfs_shortest_path(g, src, tgt)
    if path is None:
        lines.append(f"Question ({src}, {tgt}): no path")
        return lines
    lines.append(f"Question ({src}, {tgt}): path {' - '.join(path)} ({len(path) - 1} hops, {len(path)} nodes)")
    trace = next((t for t in result.traces if (t.source, t.target) == (src, tgt)), None)
    if trace is not None:
        hop_fillers = trace.hop_fillers
    else:
        hop_fillers = [retrieve(result.initial_memories[a], g.node_embeddings[b]) for a, b in zip(path, path[1:])]
    for (a, b), filler in zip(zip(path, path[1:]), hop_fillers):
        lines.append(f"  {a} -> {b}: {decode_offset(filler).value} ({filler.data[0]:+.0f}, {filler.data[1]:+.0f})")
    retrieved = result.source_filler
    lines.append(f"Retrieved relation: ({retrieved.data[0]:+.0f}, {retrieved.data[1]:+.0f})")
    lines.append(f"Answer: {decode_offset(retrieved).value}")
    return lines


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; returns the process exit code."""
    code = DepwiseCLI().run(argv)
    for line in get_monitoring_manager().get_stats().summary_lines():
        logger.debug(line)
    return code


if __name__ == "__main__":
    sys.exit(main())
