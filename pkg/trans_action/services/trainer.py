import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field
from tqdm import tqdm

from trans_action.exceptions import DataError, NumericError
from trans_action.logger import logger
from trans_action.models.attention import NamedTensors
from trans_action.models.checkpoint import load_checkpoint, save_checkpoint
from trans_action.models.tensor import ComputationTape, backward, first_non_finite, precision, softmax_rows
from trans_action.models.transaction import ModelConfig, ModelParams, init_params, model_forward
from trans_action.services.dataset import (
    TASKS,
    ActionSpace,
    ModalitySample,
    batch_features,
    batch_labels,
    select_split,
)
from trans_action.services.losses import composite_loss, head_configs
from trans_action.services.metrics import mean_topk_recall, top1_accuracy


class TrainConfig(BaseModel):
    batch_size: int = Field(default=16, ge=1)
    epochs: int = Field(default=50, ge=1)
    seed: int = 0
    learning_rate: float = Field(default=0.01, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    checkpoint_every: int = Field(default=10, ge=1)
    precision: int = 32
    gamma: float = Field(default=0.9, ge=0.0, le=1.0)
    lambdas: Dict[str, Optional[float]] = Field(default_factory=dict)
    top_k: int = Field(default=5, ge=1)
    progress: bool = True


@dataclass
class OptimizerState:
    learning_rate: float = 0.01
    momentum: float = 0.9
    velocities: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, named: NamedTensors, learning_rate: float = 0.01, momentum: float = 0.9) -> "OptimizerState":
        return cls(learning_rate, momentum, {name: np.zeros_like(t.data) for name, t in named})


ParamSource = Union[ModelParams, NamedTensors]


def _named(params: ParamSource) -> NamedTensors:
    return params.named_parameters() if isinstance(params, ModelParams) else list(params)


def sgd_step(params: ParamSource, opt: OptimizerState) -> None:
    """v <- momentum * v + g; theta <- theta - lr * v; then clear gradients."""
    named = _named(params)
    for name, p in named:
        if p.grad is None:
            raise RuntimeError(f"sgd_step: parameter '{name}' has no gradient; run backward first")
        if name not in opt.velocities:
            raise RuntimeError(f"sgd_step: no velocity buffer for parameter '{name}'")
    for name, p in named:
        velocity = opt.momentum * opt.velocities[name] + p.grad
        opt.velocities[name] = velocity.astype(p.data.dtype)
        p.data -= opt.learning_rate * opt.velocities[name]
        p.grad = None


@dataclass
class TrainResult:
    params: ModelParams
    optimizer: OptimizerState
    history: List[dict]
    metrics_log: Path
    checkpoints: List[Path]


def _epoch_rngs(seed: int, epoch: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """Shuffle and loss-gate streams derived from (seed, epoch), so resuming needs only the epoch number."""
    return np.random.default_rng([seed, epoch, 0]), np.random.default_rng([seed, epoch, 1])


def predict_probabilities(
    params: ModelParams, cfg: ModelConfig, samples: Sequence[ModalitySample], batch_size: int = 64
) -> Dict[str, np.ndarray]:
    """Softmax of the last block's verb/noun logits and of the action logits, `[B, C]` per task."""
    if not samples:
        raise DataError("no samples to predict on; the evaluation split is empty")
    probs = {task: [] for task in TASKS}
    for start in range(0, len(samples), batch_size):
        out = model_forward(batch_features(samples[start:start + batch_size]), params, cfg)
        for task, logits in zip(TASKS, (out.verb_logits, out.noun_logits, out.action_logits)):
            probs[task].append(softmax_rows(logits).data)
    return {task: np.concatenate(chunks).astype(np.float64) for task, chunks in probs.items()}


def _split_metrics(probs: Dict[str, np.ndarray], samples: Sequence[ModalitySample], k: int) -> dict:
    labels = batch_labels(samples)
    metrics = {"top1": {}, "recall": {}}
    for task in TASKS:
        k_task = min(k, probs[task].shape[1])
        metrics["top1"][task] = top1_accuracy(probs[task], labels[task])
        metrics["recall"][task] = mean_topk_recall(probs[task], labels[task], k_task)
    return metrics


def _loss_frequencies(space: ActionSpace, frequencies: Optional[Dict[str, np.ndarray]]) -> Dict[str, np.ndarray]:
    if frequencies is None:
        return space.train_frequencies
    for task in TASKS:
        if task not in frequencies:
            raise DataError(f"no class frequencies given for the {task} head")
        if len(frequencies[task]) != space.n_classes(task):
            raise DataError(f"{task} frequency table has {len(frequencies[task])} classes, "
                            f"the dataset has {space.n_classes(task)}")
    return {task: np.asarray(frequencies[task]) for task in TASKS}


def _checkpoint_state(opt: OptimizerState, epoch: int) -> Dict[str, np.ndarray]:
    state = {f"velocity.{name}": v for name, v in opt.velocities.items()}
    state["epoch"] = np.asarray(float(epoch))
    return state


def train(
    samples: Sequence[ModalitySample],
    space: ActionSpace,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    output_dir,
    resume_from: Optional[str] = None,
    frequencies: Optional[Dict[str, np.ndarray]] = None,
) -> TrainResult:
    """
    Epoch loop: seeded shuffle, batched forward, composite loss, backward, SGD step.

    Writes `logs/metrics.jsonl` (one record per epoch and split) and
    checkpoints under `checkpoints/` every `checkpoint_every` epochs plus
    `checkpoints/final.ckpt`.

    `frequencies` replaces the dataset's train counts when building the loss
    configs, e.g. tables from an earlier run.
    """
    output_dir = Path(output_dir)
    train_samples = select_split(samples, "train")
    val_samples = select_split(samples, "val")
    if not train_samples:
        raise DataError("train split is empty")
    for size, name in ((model_cfg.n_verbs, "n_verbs"), (model_cfg.n_nouns, "n_nouns"), (model_cfg.n_actions, "n_actions")):
        if size != getattr(space, name):
            raise DataError(f"model {name}={size} does not match the dataset's {getattr(space, name)}")

    with precision(cfg.precision):
        if resume_from:
            checkpoint = load_checkpoint(resume_from)
            if checkpoint.config != model_cfg:
                raise DataError(f"{resume_from}: checkpoint config differs from the requested model config")
            params = checkpoint.params
            start_epoch = int(checkpoint.state.get("epoch", 0)) + 1
            opt = OptimizerState.create(params.named_parameters(), cfg.learning_rate, cfg.momentum)
            for name in opt.velocities:
                if f"velocity.{name}" in checkpoint.state:
                    opt.velocities[name] = checkpoint.state[f"velocity.{name}"]
            logger.info(f"Resuming from {resume_from} at epoch {start_epoch}")
        else:
            params = init_params(model_cfg, cfg.seed)
            start_epoch = 1
            opt = OptimizerState.create(params.named_parameters(), cfg.learning_rate, cfg.momentum)

        loss_cfgs = head_configs(_loss_frequencies(space, frequencies), cfg.gamma, cfg.lambdas)
        named = params.named_parameters()
        metrics_log = output_dir / "logs" / "metrics.jsonl"
        metrics_log.parent.mkdir(parents=True, exist_ok=True)
        checkpoints = []
        history = []

        logger.info(f"Training {model_cfg.variant} model ({params.parameter_count()} parameters) on "
                    f"{len(train_samples)} samples for epochs {start_epoch}..{cfg.epochs}")
        epochs = tqdm(range(start_epoch, cfg.epochs + 1), desc="epochs", disable=not cfg.progress)
        with open(metrics_log, "a" if resume_from else "w", encoding="utf-8") as log_file:
            for epoch in epochs:
                order_rng, gate_rng = _epoch_rngs(cfg.seed, epoch)
                order = order_rng.permutation(len(train_samples))
                epoch_loss = 0.0
                probs = {task: [] for task in TASKS}
                seen = []

                for start in range(0, len(order), cfg.batch_size):
                    batch = [train_samples[i] for i in order[start:start + cfg.batch_size]]
                    with ComputationTape() as tape:
                        out = model_forward(batch_features(batch), params, model_cfg)
                        loss = composite_loss(out, batch_labels(batch), loss_cfgs, gate_rng)
                    if not np.isfinite(loss.data).all():
                        culprit = first_non_finite(named) or first_non_finite(
                            (entry.op, entry.output) for entry in tape.entries) or "loss"
                        raise NumericError(f"non-finite loss at epoch {epoch}; first non-finite tensor: {culprit}")
                    backward(loss, tape)
                    sgd_step(named, opt)
                    tape.clear()

                    epoch_loss += loss.item() * len(batch)
                    for task, logits in zip(TASKS, (out.verb_logits, out.noun_logits, out.action_logits)):
                        probs[task].append(softmax_rows(logits).data.astype(np.float64))
                    seen += batch

                stacked = {task: np.concatenate(chunks) for task, chunks in probs.items()}
                record = {"epoch": epoch, "split": "train", "loss": epoch_loss / len(train_samples)}
                record.update(_split_metrics(stacked, seen, cfg.top_k))
                records = [record]
                if val_samples:
                    val_probs = predict_probabilities(params, model_cfg, val_samples, cfg.batch_size)
                    val_record = {"epoch": epoch, "split": "val"}
                    val_record.update(_split_metrics(val_probs, val_samples, cfg.top_k))
                    records.append(val_record)

                for r in records:
                    log_file.write(json.dumps(r, sort_keys=True) + "\n")
                history += records
                epochs.set_postfix(loss=f"{record['loss']:.4f}")

                if epoch % cfg.checkpoint_every == 0:
                    checkpoints.append(save_checkpoint(output_dir / "checkpoints" / f"epoch_{epoch:04d}.ckpt",
                                                       model_cfg, params, _checkpoint_state(opt, epoch)))

        checkpoints.append(save_checkpoint(output_dir / "checkpoints" / "final.ckpt",
                                           model_cfg, params, _checkpoint_state(opt, cfg.epochs)))
        logger.info(f"Training finished; metrics in {metrics_log}")
        return TrainResult(params, opt, history, metrics_log, checkpoints)


def ensemble_predict(checkpoints: Sequence, samples: Sequence[ModalitySample], batch_size: int = 64) -> Dict[str, np.ndarray]:
    """Uniform average of each member's per-task softmax probabilities."""
    if not checkpoints:
        raise DataError("ensemble needs at least one checkpoint")
    members = [load_checkpoint(path) for path in checkpoints]
    return ensemble_from_params([(m.config, m.params) for m in members], samples, batch_size)


def ensemble_from_params(
    members: Sequence[Tuple[ModelConfig, ModelParams]], samples: Sequence[ModalitySample], batch_size: int = 64
) -> Dict[str, np.ndarray]:
    if not members:
        raise DataError("ensemble needs at least one member")
    if not samples:
        raise DataError("no samples to predict on; the evaluation split is empty")
    reference = members[0][0]
    for cfg, _ in members[1:]:
        if (cfg.n_verbs, cfg.n_nouns, cfg.n_actions) != (reference.n_verbs, reference.n_nouns, reference.n_actions):
            raise DataError(f"vocabulary mismatch across ensemble members: "
                            f"({cfg.n_verbs}, {cfg.n_nouns}, {cfg.n_actions}) vs "
                            f"({reference.n_verbs}, {reference.n_nouns}, {reference.n_actions})")

    total = None
    for cfg, params in members:
        probs = predict_probabilities(params, cfg, samples, batch_size)
        total = probs if total is None else {task: total[task] + probs[task] for task in TASKS}
    return {task: total[task] / len(members) for task in TASKS}
