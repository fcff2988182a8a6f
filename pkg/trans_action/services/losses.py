"""
Cross-entropy and the softmax equalization loss (SEQL).

    loss = -sum_j y_j log(p_j)
    p_j  = exp(z_j) / sum_k(w_k exp(z_k))
    w_k  = 1 - beta_k * T_lambda(k) * (1 - y_k)

beta_k is 1 with probability gamma, drawn per class per sample per call;
T_lambda(k) is 1 when class k's relative training frequency is below lambda.
The target class always keeps w = 1.
"""

from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator

from trans_action.exceptions import DataError
from trans_action.models.tensor import Tensor, add, reshape, weighted_softmax_nll
from trans_action.models.transaction import ForwardOutput
from trans_action.services.dataset import bottom_quartile_threshold


class EqlConfig(BaseModel):
    gamma: float = Field(default=0.9, ge=0.0, le=1.0)
    lambda_: float = Field(default=0.0, ge=0.0, alias="lambda")
    class_frequencies: List[float]

    model_config = {"populate_by_name": True}

    @field_validator("class_frequencies")
    @classmethod
    def _non_negative(cls, value):
        if not value or min(value) < 0:
            raise ValueError("class_frequencies must be a non-empty list of non-negative counts")
        return value

    @property
    def n_classes(self) -> int:
        return len(self.class_frequencies)

    @property
    def rare_mask(self) -> np.ndarray:
        counts = np.asarray(self.class_frequencies, dtype=np.float64)
        total = counts.sum()
        relative = counts / total if total > 0 else counts
        return relative < self.lambda_


def eql_config_from_counts(counts: Sequence[float], gamma: float, lambda_: Optional[float] = None) -> EqlConfig:
    """`lambda_` unset: the bottom-quartile boundary of the relative frequencies."""
    counts = np.asarray(counts, dtype=np.float64)
    if lambda_ is None:
        total = counts.sum()
        lambda_ = bottom_quartile_threshold(counts / total if total > 0 else counts)
    return EqlConfig(gamma=gamma, lambda_=lambda_, class_frequencies=counts.tolist())


def _check_targets(logits: Tensor, targets: np.ndarray) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    n_classes = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        bad = targets[(targets < 0) | (targets >= n_classes)][0]
        raise ValueError(f"target {bad} out of range [0, {n_classes})")
    return targets


def cross_entropy(logits: Tensor, targets) -> Tensor:
    targets = _check_targets(logits, targets)
    return weighted_softmax_nll(logits, targets, np.ones(logits.shape, dtype=logits.data.dtype))


def eql_weights(targets: np.ndarray, cfg: EqlConfig, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Gate matrix w of shape [B, C]; one Bernoulli(gamma) draw per class per sample."""
    b, c = targets.shape[0], cfg.n_classes
    beta = rng.random((b, c)) < cfg.gamma
    one_hot = np.zeros((b, c), dtype=bool)
    one_hot[np.arange(b), targets] = True
    dropped = beta & cfg.rare_mask[None, :] & ~one_hot
    return np.where(dropped, 0.0, 1.0).astype(dtype)


def equalization_loss(logits: Tensor, targets, cfg: EqlConfig, rng: np.random.Generator) -> Tensor:
    targets = _check_targets(logits, targets)
    if cfg.n_classes != logits.shape[-1]:
        raise ValueError(f"frequency table has {cfg.n_classes} classes, logits have {logits.shape[-1]}")
    return weighted_softmax_nll(logits, targets, eql_weights(targets, cfg, rng, logits.data.dtype))


def _as_batch(logits: Tensor) -> Tensor:
    return reshape(logits, (1,) + logits.shape) if logits.ndim == 1 else logits


def composite_loss(
    out: ForwardOutput,
    targets: Dict[str, np.ndarray],
    cfgs: Dict[str, EqlConfig],
    rng: np.random.Generator,
) -> Tensor:
    """Unit-weighted sum of every block's verb and noun losses plus the action loss."""
    terms = []
    for verb_logits, noun_logits in zip(out.per_block_verb_logits, out.per_block_noun_logits):
        terms.append(equalization_loss(_as_batch(verb_logits), np.atleast_1d(targets["verb"]), cfgs["verb"], rng))
        terms.append(equalization_loss(_as_batch(noun_logits), np.atleast_1d(targets["noun"]), cfgs["noun"], rng))
    terms.append(equalization_loss(_as_batch(out.action_logits), np.atleast_1d(targets["action"]),
                                   cfgs["action"], rng))

    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return total


# === Frequency tables ===

def write_frequency_table(path, counts: Sequence[int]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = pd.DataFrame({"class_index": np.arange(len(counts)), "count": np.asarray(counts, dtype=np.int64)})
    table.to_csv(path, sep="\t", header=False, index=False, lineterminator="\n")
    return path


def read_frequency_table(path, n_classes: Optional[int] = None) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Frequency table not found: {path}")
    try:
        table = pd.read_csv(path, sep="\t", header=None, names=["class_index", "count"], dtype=str)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"{path}: cannot parse frequency table: {e}") from e

    size = n_classes if n_classes is not None else len(table)
    counts = np.full(size, -1, dtype=np.int64)
    for line, (index, count) in enumerate(zip(table["class_index"], table["count"]), start=1):
        if not (str(index).isdigit() and str(count).isdigit()):
            raise DataError(f"{path}: line {line}: expected 'class_index<TAB>count', got {index!r}, {count!r}")
        index, count = int(index), int(count)
        if index >= size:
            raise DataError(f"{path}: line {line}: class index {index} out of range [0, {size})")
        if counts[index] >= 0:
            raise DataError(f"{path}: line {line}: duplicate class index {index}")
        counts[index] = count
    missing = np.flatnonzero(counts < 0)
    if missing.size:
        raise DataError(f"{path}: {missing.size} classes have no count, first is {missing[0]}")
    return counts


def head_configs(frequencies: Dict[str, np.ndarray], gamma: float,
                 lambdas: Optional[Dict[str, Optional[float]]] = None) -> Dict[str, EqlConfig]:
    lambdas = lambdas or {}
    return {task: eql_config_from_counts(counts, gamma, lambdas.get(task)) for task, counts in frequencies.items()}


def read_frequency_tables(directory, sizes: Dict[str, int]) -> Dict[str, np.ndarray]:
    """`<task>_frequencies.tsv` per head, as a training run writes them into its `logs/`."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"Frequency table directory not found: {directory}")
    return {task: read_frequency_table(directory / f"{task}_frequencies.tsv", n) for task, n in sizes.items()}


def write_frequency_tables(directory, frequencies: Dict[str, np.ndarray]) -> List[Path]:
    directory = Path(directory)
    return [write_frequency_table(directory / f"{task}_frequencies.tsv", counts) for task, counts in frequencies.items()]
