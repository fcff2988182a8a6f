from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from trans_action.exceptions import DataError, UsageError
from trans_action.logger import logger
from trans_action.models.tensor import precision
from trans_action.models.transaction import ModelConfig
from trans_action.services.ablation import ablation_service
from trans_action.services.dataset import ActionSpace, load_dataset, select_split
from trans_action.services.evaluator import evaluate
from trans_action.services.gradcheck import gradcheck_service
from trans_action.services.losses import read_frequency_tables, write_frequency_tables
from trans_action.services.synthetic import SyntheticConfig, generate_synthetic
from trans_action.services.trainer import TrainConfig, train
from trans_action.utils.config import RunConfig


def _validated(factory, **values):
    try:
        return factory(**values)
    except ValueError as e:
        raise UsageError(f"Invalid {factory.__name__}: {e}") from e


def model_config(run: RunConfig) -> ModelConfig:
    return _validated(
        ModelConfig,
        d_rgb=run.d_rgb, d_flow=run.d_flow, d_obj=run.d_obj, n_frames=run.n_frames,
        n_blocks=run.n_blocks, heads=run.heads, d_ff=run.d_ff or 0,
        n_verbs=run.n_verbs, n_nouns=run.n_nouns, n_actions=run.n_actions, variant=run.variant,
    )


def train_config(run: RunConfig) -> TrainConfig:
    return _validated(
        TrainConfig,
        batch_size=run.batch_size, epochs=run.epochs, seed=run.seed,
        learning_rate=run.learning_rate, momentum=run.momentum,
        checkpoint_every=run.checkpoint_every, precision=run.precision, gamma=run.gamma,
        lambdas={"verb": run.lambda_verb, "noun": run.lambda_noun, "action": run.lambda_action},
        top_k=run.top_k, progress=run.progress,
    )


def _dataset(run: RunConfig) -> Tuple[list, ActionSpace]:
    if not run.features or not run.annotations:
        raise UsageError("this command needs --features and --annotations (run 'generate' first)")
    return load_dataset(run.features, run.annotations, run.n_verbs, run.n_nouns, run.n_actions)


def _loss_frequencies(run: RunConfig, space: ActionSpace) -> Optional[Dict[str, np.ndarray]]:
    if not run.frequency_dir:
        return None
    sizes = {task: space.n_classes(task) for task in space.train_frequencies}
    frequencies = read_frequency_tables(run.frequency_dir, sizes)
    logger.info(f"Loss class frequencies read from {run.frequency_dir}")
    return frequencies


def generate(run: RunConfig) -> Tuple[Path, Path]:
    """Write a synthetic dataset into `<output_dir>/data/`."""
    cfg = _validated(
        SyntheticConfig,
        seed=run.seed, n_samples=run.n_samples, n_frames=run.n_frames,
        d_rgb=run.d_rgb, d_flow=run.d_flow, d_obj=run.d_obj,
        n_verbs=run.n_verbs, n_nouns=run.n_nouns, n_actions=run.n_actions,
        zipf_exponent=run.zipf_exponent, n_participants=run.n_participants,
        unseen_fraction=run.unseen_fraction, val_fraction=run.val_fraction,
    )
    paths = generate_synthetic(cfg, Path(run.output_dir) / "data")
    print(f"features: {paths[0]}\nannotations: {paths[1]}")
    return paths


def train_command(run: RunConfig) -> Path:
    try:
        samples, space = _dataset(run)
        frequencies = _loss_frequencies(run, space)
        with precision(run.precision):
            result = train(samples, space, train_config(run), model_config(run), run.output_dir,
                           frequencies=frequencies)
        write_frequency_tables(Path(run.output_dir) / "logs", frequencies or space.train_frequencies)
        print(f"checkpoint: {result.checkpoints[-1]}\nmetrics: {result.metrics_log}")
        return result.checkpoints[-1]
    except Exception as e:
        logger.error(f"Training failed: {str(e)}")
        raise


def evaluate_command(run: RunConfig) -> None:
    if not run.checkpoints:
        raise UsageError("evaluate needs --checkpoints (comma-separated checkpoint files)")
    try:
        samples, space = _dataset(run)
        eval_samples = select_split(samples, run.eval_split)
        if not eval_samples:
            raise DataError(f"the '{run.eval_split}' split is empty")
        with precision(run.precision):
            _, table = evaluate(run.checkpoints, eval_samples, space, k=run.top_k,
                                action_mode=run.action_mode, output_dir=run.output_dir)
        print(table)
    except Exception as e:
        logger.error(f"Evaluation failed: {str(e)}")
        raise


def gradcheck_command(run: RunConfig) -> bool:
    results = gradcheck_service.run(n_entries=run.gradcheck_entries, seed=run.seed)
    table = gradcheck_service.render(results)
    reports_dir = Path(run.output_dir) / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    (reports_dir / "gradcheck.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return all(r.passed for r in results)


def ablate_command(run: RunConfig) -> None:
    try:
        samples, space = _dataset(run)
        with precision(run.precision):
            _, table = ablation_service.run(samples, space, train_config(run), model_config(run), run.output_dir,
                                            eval_split=run.eval_split, action_mode=run.action_mode,
                                            frequencies=_loss_frequencies(run, space))
        print(table)
    except Exception as e:
        logger.error(f"Ablation failed: {str(e)}")
        raise
