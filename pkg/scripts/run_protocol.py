"""
Full Protocol Script

Runs the complete workflow for every Big-Five trait with one seed:
1. Split the twinned item bank per trait (200 train / 800 test)
2. Optimize a profile per trait (25 steps, 15 for AGR/CON)
3. Export checkpoints at the trait's preset steps and the training curves
4. Evaluate Origin, DP, P2, the optimized profile and the naive prompts on the held-out items

Usage:
    python scripts/run_protocol.py [bank.jsonl] [config.json]
"""
import logging
import sys
from pathlib import Path

from profile_tuner.backend import build_backend
from profile_tuner.config import settings
from profile_tuner.dataset import load_bank, split, split_manifest
from profile_tuner.evaluation import transfer_matrix
from profile_tuner.optimizer import PromptOptimizer
from profile_tuner.prompts import NAIVE_PREFIXES
from profile_tuner.pydantic_models import (
    DEFAULT_APP_CONFIG, AppConfig, Condition, ConditionName, RunConfig, ScoringConfig,
    SplitSpec, TraitDimension,
)
from profile_tuner.run_store import RunStore
from profile_tuner.setup import build_root_logger
from profile_tuner.trajectory import checkpoints, curve, export_checkpoints, preset_for, render_curves
from profile_tuner.utils import load_json, write_json

# Global variable for the protocol output directory
PROTOCOL_DIR = settings.RUNS_DIR / "protocol"

build_root_logger(PROTOCOL_DIR / "protocol.log", PROTOCOL_DIR / "llm_traces.jsonl")
logger = logging.getLogger(__name__)


def optimize_trait(trait: TraitDimension, items: list, config: AppConfig) -> list:
    """Split, optimize and export checkpoints for one trait; returns the test items."""
    run_config = RunConfig.model_validate({**config.run, "trait": trait, "seed": config.seed})
    spec = SplitSpec(trait=trait, seed=run_config.seed)
    train, test = split(items, spec)

    store = RunStore(PROTOCOL_DIR / "runs" / trait.code)
    store.initialize(run_config, split_manifest(train, test, spec))
    optimizer_backend = build_backend(config.backends[run_config.optimizer_backend], store.transcript_dir)
    target_backend = build_backend(config.backends[run_config.target_backend], store.transcript_dir)

    result = PromptOptimizer(run_config, optimizer_backend, target_backend).run(train, store)
    logger.info(f"{trait.code}: Q* s_ps {result.best.s_ps:.3f} at step {result.best.step}")

    buffer = store.load_buffer()
    steps = [s for s in preset_for(trait) if s in buffer.steps()]
    export_checkpoints(checkpoints(buffer, steps, run_config.seed), store.checkpoint_dir)
    write_json(store.run_dir / "curve.json", curve(buffer))
    return test


if __name__ == "__main__":
    bank_path = Path(sys.argv[1]) if len(sys.argv) > 1 else settings.DATA_DIR / "trait_bank.jsonl"
    config = DEFAULT_APP_CONFIG
    if len(sys.argv) > 2:
        config = AppConfig.model_validate(load_json(sys.argv[2]))

    logger.info("=" * 60)
    logger.info("FULL PROTOCOL")
    logger.info("=" * 60)
    logger.info(f"Bank: {bank_path}  Output: {PROTOCOL_DIR}")

    items = load_bank(bank_path)
    test_items = []
    for trait in TraitDimension:
        logger.info(f"\n[{trait.code}] optimization")
        logger.info("-" * 60)
        test_items.extend(optimize_trait(trait, items, config))

    render_curves(
        [curve(RunStore(PROTOCOL_DIR / "runs" / t.code).load_buffer()) for t in TraitDimension],
        PROTOCOL_DIR / "curves.svg",
    )

    conditions = [
        Condition(name=ConditionName.ORIGIN),
        Condition(name=ConditionName.DESCRIPTION_PROMPT),
        Condition(name=ConditionName.P2),
        Condition(name=ConditionName.PROFILE, prompt_path=PROTOCOL_DIR / "runs"),
        Condition(name=ConditionName.NAIVE, naive_template="instruction"),
        *[Condition(name=ConditionName.NAIVE, naive_template="prefix", naive_prefix=p) for p in NAIVE_PREFIXES],
    ]
    target = build_backend(config.backends["target"], PROTOCOL_DIR / "evaluation" / "transcript")
    scoring = ScoringConfig.model_validate(config.run.get("scoring", {}))
    transfer_matrix(conditions, list(TraitDimension), [target], test_items, config.seed,
                    PROTOCOL_DIR / "evaluation", config.evaluation, scoring)

    logger.info("=" * 60)
    logger.info("PROTOCOL COMPLETE")
    logger.info("=" * 60)
