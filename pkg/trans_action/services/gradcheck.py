"""
Central finite differences against tape gradients, at 64-bit precision.

Relative error per checked entry is |analytic - numeric| / max(|analytic|, |numeric|, 1e-3);
the floor keeps near-zero gradients from turning round-off into huge ratios.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np

from trans_action.logger import logger
from trans_action.models.attention import (
    encoder_layer,
    init_attention,
    init_encoder_layer,
    multi_head_attention,
    scaled_attention,
)
from trans_action.models.tensor import (
    ComputationTape,
    Tensor,
    add,
    backward,
    concat,
    layer_norm,
    matmul,
    mean_over_axis,
    mul,
    parameter,
    precision,
    relu,
    reshape,
    scale,
    softmax_rows,
    split,
    sum_all,
    tensor,
    transpose_last_two,
)
from trans_action.models.transaction import ModelConfig, init_params, model_forward
from trans_action.services.losses import composite_loss, cross_entropy, eql_config_from_counts, equalization_loss

STEP = 1e-6
FLOOR = 1e-3
TOLERANCE = 1e-4


@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    n_entries: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), FLOOR)


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    n_entries: int,
    rng: np.random.Generator,
    step: float = STEP,
) -> float:
    """Max relative error over `n_entries` random entries of `inputs`; `fn` must be deterministic."""
    for t in inputs:
        t.grad = None
    with ComputationTape() as tape:
        loss = fn()
    backward(loss, tape)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    sizes = np.array([t.size for t in inputs])
    worst = 0.0
    for _ in range(n_entries):
        which = int(rng.choice(len(inputs), p=sizes / sizes.sum()))
        flat = inputs[which].data.reshape(-1)
        index = int(rng.integers(flat.size))
        original = flat[index]
        flat[index] = original + step
        upper = fn().item()
        flat[index] = original - step
        lower = fn().item()
        flat[index] = original
        numeric = (upper - lower) / (2 * step)
        worst = max(worst, relative_error(float(analytic[which].reshape(-1)[index]), numeric))
    return worst


def _weighted_sum(out: Tensor, weights: Tensor) -> Tensor:
    """sum(out * R) with a fixed random R, so softmax-like outputs get non-trivial gradients."""
    return sum_all(mul(out, weights))


def _cases(rng: np.random.Generator) -> Dict[str, Callable[[], tuple]]:
    def p(*shape):
        return parameter(rng.standard_normal(shape))

    def r(*shape):
        return tensor(rng.standard_normal(shape))

    def matmul_case():
        a, b, w = p(2, 3, 4), p(4, 5), r(2, 3, 5)
        return (lambda: _weighted_sum(matmul(a, b), w)), [a, b]

    def batched_matmul_case():
        a, b, w = p(2, 3, 4), p(2, 4, 3), r(2, 3, 3)
        return (lambda: _weighted_sum(matmul(a, b), w)), [a, b]

    def add_case():
        x, bias, w = p(3, 4), p(4), r(3, 4)
        return (lambda: _weighted_sum(add(x, bias), w)), [x, bias]

    def mul_case():
        x, y = p(3, 4), p(3, 4)
        return (lambda: sum_all(mul(x, y))), [x, y]

    def scale_relu_case():
        x, w = p(4, 5), r(4, 5)
        return (lambda: _weighted_sum(relu(scale(x, 0.7)), w)), [x]

    def concat_split_case():
        x, y, w = p(3, 2), p(3, 4), r(3, 3)
        def fn():
            left, right = split(concat([x, y], axis=-1), [3, 3], axis=-1)
            return _weighted_sum(mul(left, right), w)
        return fn, [x, y]

    def mean_transpose_case():
        x, w = p(2, 3, 4), r(2, 4)
        return (lambda: _weighted_sum(mean_over_axis(transpose_last_two(x), axis=-1), w)), [x]

    def reshape_case():
        x, w = p(2, 6), r(3, 4)
        return (lambda: _weighted_sum(reshape(x, (3, 4)), w)), [x]

    def softmax_case():
        x, w = p(3, 5), r(3, 5)
        return (lambda: _weighted_sum(softmax_rows(x), w)), [x]

    def layer_norm_case():
        x, gain, bias, w = p(2, 3, 6), p(6), p(6), r(2, 3, 6)
        return (lambda: _weighted_sum(layer_norm(x, gain, bias), w)), [x, gain, bias]

    def cross_entropy_case():
        logits, targets = p(4, 6), rng.integers(0, 6, size=4)
        return (lambda: cross_entropy(logits, targets)), [logits]

    def equalization_case():
        logits, targets = p(4, 6), rng.integers(0, 6, size=4)
        cfg = eql_config_from_counts([50, 30, 10, 5, 2, 1], gamma=0.7, lambda_=0.05)
        seed = int(rng.integers(2**31))
        return (lambda: equalization_loss(logits, targets, cfg, np.random.default_rng(seed))), [logits]

    def scaled_attention_case():
        q, k, v, w = p(3, 4), p(5, 4), p(5, 2), r(3, 2)
        return (lambda: _weighted_sum(scaled_attention(q, k, v), w)), [q, k, v]

    def multi_head_case():
        params = init_attention(rng, 8, heads=2)
        x, w = p(2, 4, 8), r(2, 4, 8)
        inputs = [x, params.w_q, params.w_k, params.w_v, params.w_o]
        return (lambda: _weighted_sum(multi_head_attention(x, x, params), w)), inputs

    def encoder_case():
        layer = init_encoder_layer(rng, 8, heads=2)
        x, w = p(4, 8), r(4, 8)
        inputs = [x] + [t for _, t in layer.named_parameters("layer")]
        return (lambda: _weighted_sum(encoder_layer(x, layer, add_pe=True), w)), inputs

    def model_case():
        cfg = ModelConfig(d_rgb=8, d_flow=8, d_obj=8, n_frames=4, n_blocks=2, heads=2,
                          n_verbs=3, n_nouns=4, n_actions=5)
        params = init_params(cfg, seed=int(rng.integers(2**31)))
        features = {m: r(2, 4, 8) for m in ("rgb", "flow", "obj")}
        targets = {"verb": np.array([0, 2]), "noun": np.array([1, 3]), "action": np.array([4, 0])}
        cfgs = {
            "verb": eql_config_from_counts([9, 3, 1], gamma=0.5),
            "noun": eql_config_from_counts([8, 4, 2, 1], gamma=0.5),
            "action": eql_config_from_counts([6, 5, 4, 2, 1], gamma=0.5),
        }
        seed = int(rng.integers(2**31))
        def fn():
            out = model_forward(features, params, cfg)
            return composite_loss(out, targets, cfgs, np.random.default_rng(seed))
        return fn, [t for _, t in params.named_parameters()]

    return {
        "matmul": matmul_case,
        "matmul_batched": batched_matmul_case,
        "add_bias": add_case,
        "mul": mul_case,
        "scale_relu": scale_relu_case,
        "concat_split": concat_split_case,
        "mean_transpose": mean_transpose_case,
        "reshape": reshape_case,
        "softmax_rows": softmax_case,
        "layer_norm": layer_norm_case,
        "cross_entropy": cross_entropy_case,
        "equalization_loss": equalization_case,
        "scaled_attention": scaled_attention_case,
        "multi_head_attention": multi_head_case,
        "encoder_layer": encoder_case,
        "model_forward": model_case,
    }


class GradcheckService:
    def __init__(self, step: float = STEP):
        self.step = step
        logger.info("Initialized Gradcheck Service")

    def run(self, n_entries: int = 100, seed: int = 0, only: Sequence[str] = ()) -> List[GradcheckResult]:
        results = []
        with precision(64):
            rng = np.random.default_rng(seed)
            for name, build in _cases(rng).items():
                if only and name not in only:
                    continue
                fn, inputs = build()
                error = check_gradients(fn, inputs, n_entries, rng, self.step)
                results.append(GradcheckResult(name, error, n_entries))
                logger.info(f"gradcheck {name}: max relative error {error:.3e} over {n_entries} entries")
        return results

    @staticmethod
    def render(results: Sequence[GradcheckResult]) -> str:
        width = max(len(r.name) for r in results)
        lines = [f"{'operation':<{width}}  max rel error  status"]
        for r in results:
            lines.append(f"{r.name:<{width}}  {r.max_rel_error:13.3e}  {'ok' if r.passed else 'FAIL'}")
        return "\n".join(lines)


# Global gradcheck service instance
gradcheck_service = GradcheckService()
