import json

import numpy as np
import pytest

from trans_action.exceptions import DataError, NumericError
from trans_action.models.checkpoint import save_checkpoint
from trans_action.models.tensor import ComputationTape, add, backward, mul, parameter, sum_all, tensor
from trans_action.models.transaction import ModelConfig, init_params
from trans_action.services.dataset import build_action_space, select_split
from trans_action.services.synthetic import SyntheticConfig, synthesize
from trans_action.services.trainer import (
    OptimizerState,
    TrainConfig,
    ensemble_from_params,
    ensemble_predict,
    predict_probabilities,
    sgd_step,
    train,
)


def _quick(**overrides):
    values = dict(batch_size=8, epochs=3, seed=7, checkpoint_every=2, progress=False, top_k=2)
    values.update(overrides)
    return TrainConfig(**values)


class TestSgdStep:
    def test_two_step_hand_recursion(self, float64):
        theta = parameter([0.0])
        opt = OptimizerState.create([("theta", theta)], learning_rate=0.01, momentum=0.9)
        theta.grad = np.ones(1)
        sgd_step([("theta", theta)], opt)
        assert theta.data[0] == pytest.approx(-0.01)
        theta.grad = np.ones(1)
        sgd_step([("theta", theta)], opt)
        assert opt.velocities["theta"][0] == pytest.approx(1.9)
        assert theta.data[0] == pytest.approx(-0.029)
        assert theta.grad is None

    def test_zero_momentum_is_plain_gradient_descent(self, float64, rng):
        start, grad = rng.standard_normal(5), rng.standard_normal(5)
        theta = parameter(start)
        opt = OptimizerState.create([("theta", theta)], learning_rate=0.1, momentum=0.0)
        theta.grad = grad.copy()
        sgd_step([("theta", theta)], opt)
        np.testing.assert_array_equal(theta.data, start - 0.1 * grad)

    def test_zero_gradient_coasts(self, float64):
        theta = parameter([1.0])
        opt = OptimizerState.create([("theta", theta)], learning_rate=0.5, momentum=0.9)
        opt.velocities["theta"] = np.array([2.0])
        theta.grad = np.zeros(1)
        sgd_step([("theta", theta)], opt)
        assert theta.data[0] == pytest.approx(1.0 - 0.5 * 0.9 * 2.0)

    def test_missing_gradient(self):
        theta = parameter([1.0])
        opt = OptimizerState.create([("theta", theta)])
        with pytest.raises(RuntimeError, match="no gradient"):
            sgd_step([("theta", theta)], opt)

    def test_step_decreases_convex_quadratic(self, float64):
        theta, target = parameter([3.0, -2.0]), tensor([0.5, 1.0])
        opt = OptimizerState.create([("theta", theta)], learning_rate=0.05, momentum=0.9)

        def objective():
            diff = add(theta, target * -1.0)
            return sum_all(mul(diff, diff))

        before = objective().item()
        with ComputationTape() as tape:
            loss = objective()
        backward(loss, tape)
        sgd_step([("theta", theta)], opt)
        assert objective().item() < before

    def test_velocities_start_at_zero(self, tiny_config):
        params = init_params(tiny_config)
        opt = OptimizerState.create(params.named_parameters())
        assert set(opt.velocities) == {name for name, _ in params.named_parameters()}
        assert all(not v.any() for v in opt.velocities.values())


class TestEnsemble:
    @staticmethod
    def _fixed_model(cfg, action_probs, seed=0):
        params = init_params(cfg, seed=seed)
        params.action_head.weight = parameter(np.zeros_like(params.action_head.weight.data))
        params.action_head.bias = parameter(np.log(action_probs))
        return cfg, params

    def test_two_model_hand_case(self, float64, tiny_config, tiny_dataset):
        cfg = tiny_config.model_copy(update={"n_actions": 2})
        samples = tiny_dataset[0][:3]
        probs = ensemble_from_params([self._fixed_model(cfg, [0.8, 0.2]),
                                      self._fixed_model(cfg, [0.4, 0.6], seed=1)], samples)
        np.testing.assert_allclose(probs["action"], [[0.6, 0.4]] * 3, atol=1e-12)

    def test_identical_members_are_idempotent(self, tiny_config, tiny_dataset):
        samples = tiny_dataset[0][:6]
        params = init_params(tiny_config, seed=3)
        single = predict_probabilities(params, tiny_config, samples)
        doubled = ensemble_from_params([(tiny_config, params), (tiny_config, params)], samples)
        for task in ("verb", "noun", "action"):
            np.testing.assert_array_equal(doubled[task], single[task])
            np.testing.assert_allclose(doubled[task].sum(axis=1), 1.0, atol=1e-6)

    def test_vocabulary_mismatch(self, tiny_config, tiny_dataset):
        other = tiny_config.model_copy(update={"n_nouns": 6})
        members = [(tiny_config, init_params(tiny_config)), (other, init_params(other))]
        with pytest.raises(DataError, match="vocabulary mismatch"):
            ensemble_from_params(members, tiny_dataset[0][:2])

    def test_from_checkpoint_files(self, tmp_path, tiny_config, tiny_dataset):
        samples = tiny_dataset[0][:4]
        params = init_params(tiny_config, seed=8)
        path = save_checkpoint(tmp_path / "m.ckpt", tiny_config, params)
        np.testing.assert_array_equal(ensemble_predict([path, path], samples)["verb"],
                                      predict_probabilities(params, tiny_config, samples)["verb"])
        with pytest.raises(DataError):
            ensemble_predict([], samples)

    def test_empty_inputs_raise_data_error(self, tiny_config, tiny_dataset):
        params = init_params(tiny_config)
        with pytest.raises(DataError, match="split is empty"):
            predict_probabilities(params, tiny_config, [])
        with pytest.raises(DataError, match="split is empty"):
            ensemble_from_params([(tiny_config, params)], [])
        with pytest.raises(DataError, match="at least one member"):
            ensemble_from_params([], tiny_dataset[0][:2])


class TestTrainLoop:
    def test_outputs_and_metrics_records(self, tmp_path, tiny_config, tiny_dataset):
        samples, space = tiny_dataset
        result = train(samples, space, _quick(), tiny_config, tmp_path)
        assert [p.name for p in result.checkpoints] == ["epoch_0002.ckpt", "final.ckpt"]
        records = [json.loads(line) for line in result.metrics_log.read_text().splitlines()]
        assert {r["split"] for r in records} == {"train", "val"}
        assert [r["epoch"] for r in records if r["split"] == "train"] == [1, 2, 3]
        first = records[0]
        assert set(first) == {"epoch", "split", "loss", "top1", "recall"}
        assert set(first["recall"]) == {"verb", "noun", "action"}
        assert np.isfinite(first["loss"])

    def test_fixed_seed_is_bitwise_reproducible(self, tmp_path, tiny_config, tiny_dataset):
        samples, space = tiny_dataset
        first = train(samples, space, _quick(), tiny_config, tmp_path / "a")
        second = train(samples, space, _quick(), tiny_config, tmp_path / "b")
        assert first.metrics_log.read_bytes() == second.metrics_log.read_bytes()
        assert first.checkpoints[-1].read_bytes() == second.checkpoints[-1].read_bytes()

    def test_resume_matches_uninterrupted_run(self, tmp_path, tiny_config, tiny_dataset):
        samples, space = tiny_dataset
        full = train(samples, space, _quick(epochs=4), tiny_config, tmp_path / "full")
        resumed = train(samples, space, _quick(epochs=4), tiny_config, tmp_path / "resumed",
                        resume_from=str(full.checkpoints[0]))
        assert resumed.checkpoints[-1].read_bytes() == full.checkpoints[-1].read_bytes()
        tail = [r for r in full.history if r["epoch"] > 2]
        assert resumed.history == tail

    def test_non_finite_loss_names_the_tensor(self, tmp_path, tiny_config, tiny_dataset):
        samples, space = tiny_dataset
        params = init_params(tiny_config, seed=7)
        params.blocks[0].verb_head.bias.data[0] = np.nan
        poisoned = save_checkpoint(tmp_path / "nan.ckpt", tiny_config, params)
        with pytest.raises(NumericError, match="blocks.0.verb_head.bias"):
            train(samples, space, _quick(), tiny_config, tmp_path / "run", resume_from=str(poisoned))

    def test_vocabulary_must_match_dataset(self, tmp_path, tiny_config, tiny_dataset):
        samples, space = tiny_dataset
        with pytest.raises(DataError, match="n_nouns"):
            train(samples, space, _quick(), tiny_config.model_copy(update={"n_nouns": 9}), tmp_path)

    def test_uniform_frequencies_gate_nothing(self, tmp_path, tiny_config, tiny_dataset):
        samples, space = tiny_dataset
        uniform = {task: np.full(space.n_classes(task), 4) for task in ("verb", "noun", "action")}
        gated = train(samples, space, _quick(gamma=0.9), tiny_config, tmp_path / "a", frequencies=uniform)
        plain = train(samples, space, _quick(gamma=0.0), tiny_config, tmp_path / "b")
        assert gated.metrics_log.read_bytes() == plain.metrics_log.read_bytes()
        assert gated.checkpoints[-1].read_bytes() == plain.checkpoints[-1].read_bytes()

    def test_frequency_table_size_must_match(self, tmp_path, tiny_config, tiny_dataset):
        samples, space = tiny_dataset
        wrong = {"verb": np.ones(3), "noun": np.ones(9), "action": np.ones(5)}
        with pytest.raises(DataError, match="noun frequency table has 9 classes"):
            train(samples, space, _quick(), tiny_config, tmp_path, frequencies=wrong)

    def test_empty_train_split(self, tmp_path, tiny_config, tiny_dataset):
        samples, space = tiny_dataset
        with pytest.raises(DataError, match="train split is empty"):
            train(select_split(samples, "val"), space, _quick(), tiny_config, tmp_path)


@pytest.fixture(scope="module")
def desk_dataset():
    samples = synthesize(SyntheticConfig(seed=0, n_samples=64, val_fraction=0.0, unseen_fraction=0.0))
    return samples, build_action_space(samples, n_verbs=12, n_nouns=24, n_actions=48)


@pytest.mark.slow
class TestLearning:
    def test_loss_decreases_over_fifty_epochs(self, tmp_path, desk_dataset):
        samples, space = desk_dataset
        result = train(samples, space, _quick(epochs=50, batch_size=16, checkpoint_every=50), ModelConfig(),
                       tmp_path)
        losses = [r["loss"] for r in result.history if r["split"] == "train"]
        assert losses[-1] < losses[0]

    def test_fits_the_training_set(self, tmp_path, desk_dataset):
        samples, space = desk_dataset
        result = train(samples, space, _quick(epochs=500, batch_size=16, checkpoint_every=500, top_k=5),
                       ModelConfig(), tmp_path)
        last = [r for r in result.history if r["split"] == "train"][-1]
        assert last["top1"]["verb"] >= 95.0
        assert last["top1"]["noun"] >= 95.0
