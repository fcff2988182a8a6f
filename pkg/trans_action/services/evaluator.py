"""
Mean Top-5 Recall per task (verb, noun, action) and partition (overall, unseen, tail).

Overall uses every evaluated sample and every class; unseen restricts the
samples to participants absent from training; tail restricts the class set
to the task's tail classes. A cell with no instantiated class is absent.
"""

from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel

from trans_action.exceptions import DataError
from trans_action.logger import logger
from trans_action.services.dataset import TASKS, ActionSpace, ModalitySample, batch_labels, partition_eval
from trans_action.services.metrics import mean_topk_recall
from trans_action.services.trainer import ensemble_predict

PARTITIONS = ("overall", "unseen", "tail")
ACTION_MODES = ("head", "product")
PARTITION_NOTES = {
    "overall": "all evaluated samples, all classes",
    "unseen": "samples from participants absent from the train split, all classes",
    "tail": "all evaluated samples, class set restricted to tail classes",
}


class EvalCell(BaseModel):
    value: Optional[float]
    n_samples: int
    n_classes: int


class EvalReport(BaseModel):
    k: int
    action_mode: str
    n_samples: int
    cells: Dict[str, Dict[str, EvalCell]]
    notes: Dict[str, str] = PARTITION_NOTES

    def value(self, task: str, partition: str) -> Optional[float]:
        return self.cells[task][partition].value


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def action_scores(
    verb_probs: np.ndarray,
    noun_probs: np.ndarray,
    action_logits: Optional[np.ndarray],
    mode: str,
    space: ActionSpace,
) -> np.ndarray:
    """
    Action distribution per row: softmax of the action head (`head`) or the
    verb x noun product over the action table, renormalised (`product`).
    """
    if mode == "head":
        if action_logits is None:
            raise ValueError("head mode needs action logits")
        return _softmax(np.asarray(action_logits, dtype=np.float64))
    if mode != "product":
        raise ValueError(f"unknown action scoring mode '{mode}' (expected one of {', '.join(ACTION_MODES)})")

    verb_probs = np.asarray(verb_probs, dtype=np.float64)
    noun_probs = np.asarray(noun_probs, dtype=np.float64)
    single = verb_probs.ndim == 1
    verb_probs, noun_probs = np.atleast_2d(verb_probs), np.atleast_2d(noun_probs)

    pairs = space.action_pairs()
    known = pairs[:, 0] >= 0
    scores = np.zeros((verb_probs.shape[0], space.n_actions))
    scores[:, known] = verb_probs[:, pairs[known, 0]] * noun_probs[:, pairs[known, 1]]
    totals = scores.sum(axis=1, keepdims=True)
    uniform = np.where(known, 1.0 / max(known.sum(), 1), 0.0)
    scores = np.where(totals > 0, scores / np.where(totals > 0, totals, 1.0), uniform)
    return scores[0] if single else scores


def build_report(
    probs: Mapping[str, np.ndarray],
    samples: Sequence[ModalitySample],
    space: ActionSpace,
    k: int = 5,
    action_mode: str = "head",
) -> EvalReport:
    if not samples:
        raise DataError("evaluation split is empty")
    labels = batch_labels(samples)
    partitions = partition_eval(samples, space)

    cells = {}
    for task in TASKS:
        task_probs, task_labels = probs[task], labels[task]
        k_task = min(k, space.n_classes(task))
        all_classes = range(space.n_classes(task))
        tail_classes = space.tail_classes(task)
        selections = {
            "overall": (partitions[task].overall, all_classes),
            "unseen": (partitions[task].unseen, all_classes),
            "tail": (partitions[task].tail, tail_classes),
        }
        cells[task] = {}
        for partition, (index, class_set) in selections.items():
            targets = task_labels[index]
            present = set(int(c) for c in class_set) & set(targets.tolist())
            value = mean_topk_recall(task_probs[index], targets, k_task, class_set) if len(index) else None
            cells[task][partition] = EvalCell(value=value, n_samples=len(index), n_classes=len(present))

    return EvalReport(k=k, action_mode=action_mode, n_samples=len(samples), cells=cells)


def render_table(reports: Mapping[str, EvalReport]) -> str:
    """Aligned text table: one row per report, columns Overall/Unseen/Tail x Verb/Noun/Action."""
    columns = pd.MultiIndex.from_product(
        [[f"{p.capitalize()} (%)" for p in PARTITIONS], [t.capitalize() for t in TASKS]]
    )
    rows = []
    for report in reports.values():
        row = []
        for partition in PARTITIONS:
            for task in TASKS:
                value = report.value(task, partition)
                row.append("--" if value is None else f"{value:.2f}")
        rows.append(row)
    frame = pd.DataFrame(rows, index=pd.Index(list(reports), name="Method"), columns=columns)
    return frame.to_string()


def write_report(report: EvalReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def evaluate(
    checkpoints: Sequence,
    samples: Sequence[ModalitySample],
    space: ActionSpace,
    k: int = 5,
    action_mode: str = "head",
    output_dir=None,
    label: str = "Ensemble",
) -> Tuple[EvalReport, str]:
    """Ensemble the checkpoints over `samples`, score every cell and render the table."""
    if action_mode not in ACTION_MODES:
        raise ValueError(f"unknown action scoring mode '{action_mode}'")
    probs = ensemble_predict(checkpoints, samples)
    if action_mode == "product":
        probs["action"] = action_scores(probs["verb"], probs["noun"], None, "product", space)

    report = build_report(probs, samples, space, k, action_mode)
    table = render_table({label: report})
    if output_dir is not None:
        reports_dir = Path(output_dir) / "reports"
        write_report(report, reports_dir / "eval_report.json")
        (reports_dir / "eval_report.txt").write_text(table + "\n", encoding="utf-8")
        logger.info(f"Wrote evaluation report to {reports_dir}")
    logger.info(f"Evaluated {len(checkpoints)} checkpoint(s) on {len(samples)} samples")
    return report, table


def report_rows(reports: Mapping[str, EvalReport]) -> List[dict]:
    """Flat records (method, task, partition, value, counts) for JSON output."""
    rows = []
    for method, report in reports.items():
        for task in TASKS:
            for partition in PARTITIONS:
                cell = report.cells[task][partition]
                rows.append({"method": method, "task": task, "partition": partition, **cell.model_dump()})
    return rows
