import json
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from trans_action.exceptions import DataError
from trans_action.logger import logger
from trans_action.models.transaction import ModelConfig
from trans_action.services.dataset import ActionSpace, ModalitySample, select_split
from trans_action.services.evaluator import EvalReport, evaluate, render_table, report_rows
from trans_action.services.trainer import TrainConfig, train

# Row label -> (model variant, equalization loss on)
ABLATION_GRID: Dict[str, Tuple[str, bool]] = {
    "TSA-RGB": ("tsa_only_rgb", True),
    "TSA-Flow": ("tsa_only_flow", True),
    "TSA-Obj": ("tsa_only_obj", True),
    "w/o CMA": ("no_cma", True),
    "w/o SA": ("no_sa", True),
    "w/o Equal": ("full", False),
    "Proposed": ("full", True),
}


class AblationService:
    def __init__(self, grid: Optional[Dict[str, Tuple[str, bool]]] = None):
        self.grid = dict(ABLATION_GRID if grid is None else grid)
        logger.info(f"Initialized Ablation Service with {len(self.grid)} rows")

    def run(
        self,
        samples: Sequence[ModalitySample],
        space: ActionSpace,
        train_cfg: TrainConfig,
        model_cfg: ModelConfig,
        output_dir,
        eval_split: str = "val",
        action_mode: str = "head",
        frequencies: Optional[Dict[str, np.ndarray]] = None,
    ) -> Tuple[Dict[str, EvalReport], str]:
        """Train and evaluate every grid row with the same seed and data; render one combined table."""
        output_dir = Path(output_dir)
        eval_samples = select_split(samples, eval_split)
        if not eval_samples:
            raise DataError(f"the '{eval_split}' split is empty; nothing to evaluate the ablation grid on")

        reports = {}
        for label, (variant, use_equalization) in self.grid.items():
            run_dir = output_dir / "ablation" / (variant if use_equalization else "no_equal")
            variant_cfg = model_cfg.model_copy(update={"variant": variant})
            row_cfg = train_cfg if use_equalization else train_cfg.model_copy(update={"gamma": 0.0})
            logger.info(f"Ablation row '{label}': variant={variant}, gamma={row_cfg.gamma}")

            try:
                result = train(samples, space, row_cfg, variant_cfg, run_dir, frequencies=frequencies)
                reports[label], _ = evaluate([result.checkpoints[-1]], eval_samples, space,
                                             k=train_cfg.top_k, action_mode=action_mode)
            except Exception as e:
                logger.error(f"Ablation row '{label}' failed: {str(e)}")
                raise

        table = render_table(reports)
        reports_dir = output_dir / "reports"
        reports_dir.mkdir(parents=True, exist_ok=True)
        (reports_dir / "ablation.txt").write_text(table + "\n", encoding="utf-8")
        (reports_dir / "ablation.json").write_text(json.dumps(report_rows(reports), indent=2) + "\n",
                                                   encoding="utf-8")
        logger.info(f"Wrote ablation table to {reports_dir}")
        return reports, table


# Global ablation service instance
ablation_service = AblationService()
