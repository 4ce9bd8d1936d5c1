"""
Command-line entry point.

    profile-tuner dataset validate|augment|split ...
    profile-tuner optimize --trait OPE --bank bank.jsonl --run-dir runs/OPE
    profile-tuner profile-star --trait OPE --bank bank.jsonl --backend gemma --run-dir runs/star
    profile-tuner evaluate --condition dp --traits all --bank test.jsonl --backend target --out out/
    profile-tuner transfer --models a,b --conditions origin,profile=runs --bank test.jsonl --out out/
    profile-tuner curve runs/OPE --window 8
    profile-tuner checkpoint runs/OPE --steps 6,16,24 --summarize

Configuration precedence: flags > environment > --config JSON file.
Exit codes: 0 ok, 2 data, 3 configuration, 4 transport, 5 integrity, 130 interrupted.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from pydantic import ValidationError

from profile_tuner.backend import ChatBackend, build_backend
from profile_tuner.config import settings
from profile_tuner.dataset import (
    AugmentationProcessor, apply_manifest, load_bank, split, split_manifest, write_bank,
)
from profile_tuner.errors import ConfigurationError, DataError, ProfileTunerError
from profile_tuner.evaluation import (
    evaluate, label_conditions, parse_condition, profile_star, transfer_matrix, write_grid,
)
from profile_tuner.optimizer import PromptOptimizer
from profile_tuner.pydantic_models import (
    AppConfig, BackendConfig, CellStatus, QuestionItem, RunConfig, ScoringConfig, SplitManifest, SplitSpec,
    TraitDimension,
)
from profile_tuner.run_store import MANIFEST_FILE, TRACE_FILE, RunStore
from profile_tuner.setup import build_root_logger
from profile_tuner.trajectory import (
    CHECKPOINT_PRESETS, attach_summaries, checkpoints, curve, export_checkpoints, preset_for,
    render_curves, summarize_checkpoints,
)
from profile_tuner.utils import load_json, write_json
from profile_tuner.validation import validate_item_bank

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_FILE = "resolved-config.json"


# ========== Argument types ==========

def _trait(value: str) -> TraitDimension:
    try:
        return TraitDimension.parse(value)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def _traits(value: str) -> list[TraitDimension]:
    if value.strip().lower() == "all":
        return list(TraitDimension)
    return [_trait(v) for v in value.split(",") if v.strip()]


def _int_list(value: str) -> list[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from e


def _csv(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


# ========== Configuration ==========

def resolve_app_config(config_path: Optional[Path], seed: Optional[int] = None, max_in_flight: Optional[int] = None) -> AppConfig:
    """Merge the JSON config file, explicitly set environment settings and flags (in rising precedence)."""
    data = {}
    if config_path is not None:
        data = load_json(config_path)
        if data is None:
            raise ConfigurationError(f"config file not found: {config_path}")
    try:
        app = AppConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid config file {config_path}: {e}") from e

    env_overrides = {}
    if "OPENAI_BASE_URL" in settings.model_fields_set:
        env_overrides["base_url"] = settings.OPENAI_BASE_URL
    if "OPENAI_API_KEY" in settings.model_fields_set:
        env_overrides["api_key"] = settings.OPENAI_API_KEY
    if env_overrides:
        app.backends = {
            name: backend.model_copy(update=env_overrides) if backend.kind == "openai" else backend
            for name, backend in app.backends.items()
        }

    flags = {k: v for k, v in {"seed": seed, "max_in_flight": max_in_flight}.items() if v is not None}
    return app.model_copy(update=flags) if flags else app


def echo_config(app: AppConfig, directory: Path, run: Optional[RunConfig] = None) -> None:
    """Write the resolved configuration (API keys masked) next to the command's outputs."""
    payload = app.model_dump(mode="json")
    for backend in payload["backends"].values():
        if backend.get("api_key"):
            backend["api_key"] = "***"
    if run is not None:
        payload["run"] = run.model_dump(mode="json")
    write_json(Path(directory) / RESOLVED_CONFIG_FILE, payload)


def build_run_config(app: AppConfig, trait: TraitDimension, args: argparse.Namespace) -> RunConfig:
    overrides = {
        "max_steps": getattr(args, "steps", None),
        "candidates_per_step": getattr(args, "candidates", None),
        "rescore_top_m": getattr(args, "rescore_top_m", None),
    }
    data = {
        **app.run,
        "trait": trait,
        "seed": app.run.get("seed", app.seed) if args.seed is None else args.seed,
        "max_in_flight": app.run.get("max_in_flight", app.max_in_flight),
        **{k: v for k, v in overrides.items() if v is not None},
    }
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid run configuration: {e}") from e


def scoring_config(app: AppConfig) -> ScoringConfig:
    try:
        return ScoringConfig.model_validate(app.run.get("scoring", {}))
    except ValidationError as e:
        raise ConfigurationError(f"invalid scoring configuration: {e}") from e


def resolve_backend(name: str, app: AppConfig, cache_dir: Optional[Path] = None) -> ChatBackend:
    """
    A backend reference is a name from the config's `backends` map, a path to a
    mock script (*.json), or otherwise a model id served by the default
    OpenAI-compatible endpoint.
    """
    if name in app.backends:
        config = app.backends[name]
    elif name.endswith(".json"):
        config = BackendConfig(kind="mock", model_id=Path(name).stem, mock_script=Path(name))
    else:
        config = app.backends.get("target", BackendConfig()).model_copy(update={"kind": "openai", "model_id": name})
    return build_backend(config, cache_dir=cache_dir)


def _configure_logging(args: argparse.Namespace, directory: Path) -> None:
    build_root_logger(
        log_file_path=Path(directory) / "profile_tuner.log",
        trace_file_path=Path(directory) / TRACE_FILE,
        level=logging.DEBUG if settings.IS_DEBUG_ENV else getattr(logging, args.log_level),
    )


# ========== dataset ==========

def cmd_dataset_validate(args: argparse.Namespace, app: AppConfig) -> int:
    items = load_bank(args.bank)
    report = validate_item_bank(items)
    print(report.model_dump_json(indent=2))
    return 0


def cmd_dataset_augment(args: argparse.Namespace, app: AppConfig) -> int:
    out = Path(args.out)
    _configure_logging(args, out.parent)
    items = load_bank(args.bank)
    if not isinstance(items[0], QuestionItem):
        raise DataError("only situational item banks can be augmented")
    config = app.augmentation
    backend = resolve_backend(args.backend or config.backend, app, cache_dir=out.parent / "transcript")
    result = AugmentationProcessor(backend, config).process(items)
    write_bank(out, result.items)
    if result.failures:
        write_json(out.with_suffix(".failures.json"), result.failures)
    echo_config(app, out.parent)
    logger.info(f"Wrote {len(result.items)} items to {out} ({len(result.failures)} left without twins)")
    return 0


def cmd_dataset_split(args: argparse.Namespace, app: AppConfig) -> int:
    out = Path(args.out)
    items = load_bank(args.bank)
    spec = SplitSpec(trait=args.trait, train_size=args.train_size, test_size=args.test_size, seed=app.seed)
    train, test = split(items, spec)
    write_bank(out / "train.jsonl", train)
    write_bank(out / "test.jsonl", test)
    write_json(out / MANIFEST_FILE, split_manifest(train, test, spec))
    echo_config(app, out)
    return 0


# ========== optimize / profile-star ==========

def _prepare_run(args: argparse.Namespace, app: AppConfig, trait: TraitDimension, run_dir: Path) -> tuple[RunConfig, RunStore, list[QuestionItem]]:
    """Resolve config, create or verify the run directory and return the training items."""
    config = build_run_config(app, trait, args)
    store = RunStore(run_dir)
    items = load_bank(args.bank)
    if not isinstance(items[0], QuestionItem):
        raise DataError("optimization needs a situational item bank with paraphrase twins")

    if store.exists:
        store.verify(config)
        manifest = store.load_manifest()
        if manifest is None:
            raise DataError(f"run {run_dir} has no split manifest")
        train, _ = apply_manifest(items, manifest)
    else:
        if getattr(args, "resume", None):
            raise DataError(f"nothing to resume in {run_dir}")
        spec = SplitSpec(trait=trait, train_size=args.train_size, test_size=args.test_size, seed=config.seed)
        train, test = split(items, spec)
        store.initialize(config, split_manifest(train, test, spec))
    echo_config(app, run_dir, config)
    return config, store, train


def cmd_optimize(args: argparse.Namespace, app: AppConfig) -> int:
    seed = args.seed if args.seed is not None else app.seed
    run_dir = Path(args.resume or args.run_dir or settings.RUNS_DIR / f"{args.trait.code}-seed{seed}")
    _configure_logging(args, run_dir)
    config, store, train = _prepare_run(args, app, args.trait, run_dir)

    optimizer_backend = resolve_backend(args.optimizer_backend or config.optimizer_backend, app, store.transcript_dir)
    target_backend = resolve_backend(args.target_backend or config.target_backend, app, store.transcript_dir)
    result = PromptOptimizer(config, optimizer_backend, target_backend).run(train, store)
    print(f"{run_dir}\t{result.best.s_ps:.3f}\t{result.best.prompt.id}")
    return 0


def cmd_profile_star(args: argparse.Namespace, app: AppConfig) -> int:
    run_dir = Path(args.run_dir)
    _configure_logging(args, run_dir)
    config, store, train = _prepare_run(args, app, args.trait, run_dir)
    backend = resolve_backend(args.backend, app, store.transcript_dir)
    result, _ = profile_star(args.trait, backend, config, train, run_dir)
    print(f"{run_dir}\t{result.best.s_ps:.3f}\t{result.best.prompt.id}")
    return 0


# ========== evaluate / transfer ==========

def _evaluation_items(args: argparse.Namespace) -> list:
    items = load_bank(args.bank)
    if args.manifest:
        manifest = SplitManifest.model_validate(load_json(args.manifest))
        _, items = apply_manifest(items, manifest)
    return items


def cmd_evaluate(args: argparse.Namespace, app: AppConfig) -> int:
    out = Path(args.out)
    _configure_logging(args, out)
    echo_config(app, out)
    items = _evaluation_items(args)
    conditions = label_conditions([parse_condition(c) for c in args.condition])
    backend = resolve_backend(args.backend, app, cache_dir=out / "transcript")
    scoring = scoring_config(app)

    reports = [
        evaluate(condition, trait, backend, items, app.seed, out, app.evaluation, scoring)
        for condition in conditions
        for trait in args.traits
    ]
    write_grid(out, reports, [backend.model_id], [c.display_name for c in conditions], args.traits)
    return 0


def cmd_transfer(args: argparse.Namespace, app: AppConfig) -> int:
    out = Path(args.out)
    _configure_logging(args, out)
    echo_config(app, out)
    items = _evaluation_items(args)
    conditions = [parse_condition(c) for c in args.conditions]
    backends = [resolve_backend(m, app, cache_dir=out / "transcript") for m in args.models]
    scoring = scoring_config(app)

    reports = transfer_matrix(conditions, args.traits, backends, items, app.seed, out, app.evaluation, scoring)
    failed = sum(1 for r in reports if r.status == CellStatus.FAILED)
    print(f"{out / 'report.txt'}\t{len(reports) - failed} ok\t{failed} failed")
    return 0


# ========== curve / checkpoint ==========

def cmd_curve(args: argparse.Namespace, app: AppConfig) -> int:
    curves = []
    for run_dir in args.runs:
        buffer = RunStore(run_dir).load_buffer()
        item = curve(buffer, window=args.window, statistic=args.statistic)
        write_json(Path(run_dir) / "curve.json", item)
        curves.append(item)
    svg = Path(args.out) if args.out else Path(args.runs[0]) / "curve.svg"
    render_curves(curves, svg)
    logger.info(f"Wrote {len(curves)} curves and {svg}")
    return 0


def cmd_checkpoint(args: argparse.Namespace, app: AppConfig) -> int:
    store = RunStore(args.run)
    config = store.load_config()
    if args.steps:
        steps = args.steps
    elif args.preset == "auto":
        steps = list(preset_for(config.trait))
    else:
        steps = list(CHECKPOINT_PRESETS[args.preset])
    seed = args.seed if args.seed is not None else config.seed

    selected = checkpoints(store.load_buffer(), steps, seed)
    if args.summarize:
        _configure_logging(args, store.run_dir)
        backend = resolve_backend(args.summarizer, app, cache_dir=store.transcript_dir)
        summaries = summarize_checkpoints(selected, backend, app.evaluation.summary_template, app.max_in_flight)
        selected = attach_summaries(selected, summaries)
        write_json(store.checkpoint_dir / "summaries.json", [s.model_dump(mode="json") for s in summaries])
    for path in export_checkpoints(selected, store.checkpoint_dir):
        print(path)
    return 0


# ========== Parser ==========

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="profile-tuner", description="Optimize and evaluate persona profiles for Big-Five trait expression.")
    parser.add_argument("--config", type=Path, help="JSON AppConfig file (lowest precedence)")
    parser.add_argument("--seed", type=int, help="global seed; every random choice derives from it")
    parser.add_argument("--max-in-flight", type=int, help="bound on concurrent backend requests")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)

    # dataset
    dataset = commands.add_parser("dataset", help="validate, augment or split an item bank")
    dataset_commands = dataset.add_subparsers(dest="dataset_command", required=True)

    validate = dataset_commands.add_parser("validate", help="check a bank and print its validation report")
    validate.add_argument("bank", type=Path)
    validate.set_defaults(func=cmd_dataset_validate)

    augment = dataset_commands.add_parser("augment", help="add a paraphrase twin to every original item")
    augment.add_argument("bank", type=Path)
    augment.add_argument("--out", type=Path, required=True, help="output JSON-lines bank")
    augment.add_argument("--backend", help="augmenter backend name, mock script (*.json) or model id")
    augment.set_defaults(func=cmd_dataset_augment)

    split_cmd = dataset_commands.add_parser("split", help="deterministic train/test split for one trait")
    split_cmd.add_argument("bank", type=Path)
    split_cmd.add_argument("--trait", type=_trait, required=True)
    split_cmd.add_argument("--train-size", type=int, default=200)
    split_cmd.add_argument("--test-size", type=int, default=800)
    split_cmd.add_argument("--out", type=Path, required=True, help="directory for train.jsonl, test.jsonl and the manifest")
    split_cmd.set_defaults(func=cmd_dataset_split)

    # optimize
    def add_run_arguments(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--trait", type=_trait, required=True)
        sub.add_argument("--bank", type=Path, required=True, help="twinned situational item bank")
        sub.add_argument("--steps", type=int, help="number of steps (default 25, 15 for AGR/CON)")
        sub.add_argument("--candidates", type=int, help="candidates per step (default 8)")
        sub.add_argument("--rescore-top-m", type=int, help="rescore the top m prompts on the full train set")
        sub.add_argument("--train-size", type=int, default=200)
        sub.add_argument("--test-size", type=int, default=800)

    optimize = commands.add_parser("optimize", help="run the profile optimization loop for one trait")
    add_run_arguments(optimize)
    optimize.add_argument("--run-dir", type=Path, help="run directory (default RUNS_DIR/<trait>-seed<seed>)")
    optimize.add_argument("--resume", type=Path, help="continue the run in this directory")
    optimize.add_argument("--optimizer-backend", help="overrides run.optimizer_backend")
    optimize.add_argument("--target-backend", help="overrides run.target_backend")
    optimize.set_defaults(func=cmd_optimize)

    star = commands.add_parser("profile-star", help="optimize with one model as both optimizer and target")
    add_run_arguments(star)
    star.add_argument("--backend", required=True)
    star.add_argument("--run-dir", type=Path, required=True)
    star.set_defaults(func=cmd_profile_star)

    # evaluate / transfer
    def add_eval_arguments(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--bank", type=Path, required=True, help="situational or Likert item bank")
        sub.add_argument("--manifest", type=Path, help="split manifest; evaluate on its test ids")
        sub.add_argument("--traits", type=_traits, default=list(TraitDimension), help="comma-separated codes or 'all'")
        sub.add_argument("--out", type=Path, required=True)

    evaluate_cmd = commands.add_parser("evaluate", help="evaluate conditions on one model")
    add_eval_arguments(evaluate_cmd)
    evaluate_cmd.add_argument("--condition", action="append", required=True,
                              help="origin, dp, p2, naive, naive:<prefix>, profile=<run>, profile_star=<run>, custom=<file|text>")
    evaluate_cmd.add_argument("--backend", default="target")
    evaluate_cmd.set_defaults(func=cmd_evaluate)

    transfer = commands.add_parser("transfer", help="cross-model transfer matrix")
    add_eval_arguments(transfer)
    transfer.add_argument("--models", type=_csv, required=True, help="comma-separated backend references")
    transfer.add_argument("--conditions", type=_csv, required=True)
    transfer.set_defaults(func=cmd_transfer)

    # curve / checkpoint
    curve_cmd = commands.add_parser("curve", help="training curves of one or more runs")
    curve_cmd.add_argument("runs", type=Path, nargs="+")
    curve_cmd.add_argument("--window", type=int, default=8)
    curve_cmd.add_argument("--statistic", choices=["mean", "max"], default="mean")
    curve_cmd.add_argument("--out", type=Path, help="SVG path (default <first run>/curve.svg)")
    curve_cmd.set_defaults(func=cmd_curve)

    checkpoint = commands.add_parser("checkpoint", help="export checkpoint prompts from intermediate steps")
    checkpoint.add_argument("run", type=Path)
    checkpoint.add_argument("--steps", type=_int_list, help="comma-separated steps, e.g. 6,16,24")
    checkpoint.add_argument("--preset", choices=["auto", *CHECKPOINT_PRESETS], default="auto")
    checkpoint.add_argument("--summarize", action="store_true", help="add a one-sentence summary per checkpoint")
    checkpoint.add_argument("--summarizer", default="summarizer")
    checkpoint.set_defaults(func=cmd_checkpoint)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        app = resolve_app_config(args.config, args.seed, args.max_in_flight)
        return args.func(args, app)
    except ProfileTunerError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        for violation in getattr(e, "violations", []):
            print(f"  - {violation}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
