import json

import numpy as np
import pytest

from trans_action.models.checkpoint import save_checkpoint
from trans_action.models.transaction import init_params
from trans_action.services.dataset import ActionSpace, ModalitySample, select_split
from trans_action.services.evaluator import (
    EvalCell,
    EvalReport,
    action_scores,
    build_report,
    evaluate,
    render_table,
    report_rows,
)
from trans_action.services.metrics import (
    mean_topk_recall,
    tie_break_topk,
    top1_accuracy,
    topk_hits,
    topk_recall_per_class,
)


def _sample(index, verb, noun, action, participant="A"):
    empty = np.zeros((1, 2), dtype=np.float32)
    return ModalitySample(f"e{index}", empty, empty, empty, verb, noun, action, participant, "val")


def _space(n_verbs, n_nouns, n_actions, tails=None, unseen=()):
    tails = tails or {}
    sizes = {"verb": n_verbs, "noun": n_nouns, "action": n_actions}
    masks = {}
    for task, size in sizes.items():
        mask = np.zeros(size, dtype=bool)
        mask[list(tails.get(task, []))] = True
        masks[task] = mask
    table = {a: (a % n_verbs, a % n_nouns) for a in range(n_actions)}
    frequencies = {task: np.ones(size, dtype=np.int64) for task, size in sizes.items()}
    return ActionSpace(n_verbs, n_nouns, n_actions, table, frequencies, masks, frozenset(unseen))


def _brute_force_recall(probs, targets, k, class_set):
    """Per-class recall by explicit ranking of (score, index) pairs."""
    recalls = []
    for c in sorted(class_set):
        rows = [i for i, t in enumerate(targets) if t == c]
        if not rows:
            continue
        hits = 0
        for i in rows:
            ranked = sorted(range(probs.shape[1]), key=lambda j: (-probs[i, j], j))
            hits += c in ranked[:k]
        recalls.append(hits / len(rows))
    return None if not recalls else 100.0 * sum(recalls) / len(recalls)


def _assert_same(actual, expected):
    if expected is None:
        assert actual is None
    else:
        assert actual == pytest.approx(expected, abs=1e-9)


class TestTieBreak:
    def test_all_equal(self):
        np.testing.assert_array_equal(tie_break_topk(np.ones(5), 2), [0, 1])

    def test_lower_index_wins(self):
        np.testing.assert_array_equal(tie_break_topk(np.array([0.1, 0.9, 0.9]), 1), [1])

    def test_rows_rank_independently(self):
        scores = np.array([[0.2, 0.5, 0.5], [0.9, 0.1, 0.9]])
        np.testing.assert_array_equal(tie_break_topk(scores, 2), [[1, 2], [0, 2]])
        assert topk_hits(scores, np.array([2, 1]), 2).tolist() == [True, False]

    def test_matches_sorting_oracle(self, rng):
        for _ in range(1000):
            c = int(rng.integers(1, 9))
            scores = rng.integers(0, 4, size=c) / 4.0
            k = int(rng.integers(1, c + 1))
            oracle = [j for _, j in sorted((-s, j) for j, s in enumerate(scores))][:k]
            np.testing.assert_array_equal(tie_break_topk(scores, k), oracle)


class TestRecall:
    def test_k_equal_to_classes_is_perfect(self, rng):
        probs, targets = rng.random((20, 4)), rng.integers(0, 4, size=20)
        recalls = topk_recall_per_class(probs, targets, 4)
        assert set(recalls.values()) == {1.0}

    def test_half_hit_class(self):
        probs = np.array([[0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
                          [0.9, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6]])
        assert topk_recall_per_class(probs, np.array([0, 0]), 5) == {0: 0.5}

    def test_macro_average(self):
        probs = np.array([[0.9, 0.1, 0.0], [0.9, 0.1, 0.0], [0.1, 0.9, 0.0], [0.9, 0.1, 0.0]])
        targets = np.array([0, 1, 1, 2])
        assert topk_recall_per_class(probs, targets, 1) == {0: 1.0, 1: 0.5, 2: 0.0}
        assert mean_topk_recall(probs, targets, 1) == pytest.approx(50.0)

    def test_k_larger_than_classes(self):
        with pytest.raises(ValueError):
            topk_hits(np.ones((2, 3)), np.array([0, 1]), 4)

    def test_no_instantiated_class(self):
        assert mean_topk_recall(np.ones((2, 3)), np.array([0, 0]), 1, class_set=[2]) is None

    def test_duplicating_a_class_leaves_recalls(self, rng):
        probs, targets = rng.random((30, 6)), rng.integers(0, 6, size=30)
        rows = np.concatenate([np.arange(30), np.flatnonzero(targets == targets[0])])
        assert topk_recall_per_class(probs[rows], targets[rows], 2) == topk_recall_per_class(probs, targets, 2)

    def test_monotone_in_k(self, rng):
        probs, targets = rng.random((40, 7)), rng.integers(0, 7, size=40)
        for k in range(1, 7):
            lower, upper = topk_recall_per_class(probs, targets, k), topk_recall_per_class(probs, targets, k + 1)
            assert all(lower[c] <= upper[c] for c in lower)

    def test_scale_invariant(self, rng):
        probs, targets = rng.random((25, 5)), rng.integers(0, 5, size=25)
        assert mean_topk_recall(probs * 7.5, targets, 3) == mean_topk_recall(probs, targets, 3)

    def test_matches_brute_force(self, rng):
        for _ in range(1000):
            c, n = int(rng.integers(1, 11)), int(rng.integers(1, 51))
            probs = rng.integers(0, 5, size=(n, c)) / 5.0
            targets = rng.integers(0, c, size=n)
            k = int(rng.integers(1, c + 1))
            class_set = set(rng.choice(c, size=int(rng.integers(1, c + 1)), replace=False).tolist())
            expected = _brute_force_recall(probs, targets, k, class_set)
            actual = mean_topk_recall(probs, targets, k, class_set)
            _assert_same(actual, expected)

    def test_top1_accuracy(self):
        assert top1_accuracy(np.eye(3), np.array([0, 1, 0])) == pytest.approx(200 / 3)


class TestActionScores:
    def test_product_hand_case(self):
        space = _space(2, 2, 3)
        space.action_table = {0: (0, 0), 1: (0, 1), 2: (1, 1)}
        scores = action_scores(np.array([0.7, 0.3]), np.array([0.4, 0.6]), None, "product", space)
        raw = np.array([0.7 * 0.4, 0.7 * 0.6, 0.3 * 0.6])
        np.testing.assert_allclose(scores, raw / raw.sum(), atol=1e-12)

    def test_one_hot_verb_keeps_its_actions(self, rng):
        space = _space(3, 4, 12)
        noun = rng.random(4)
        scores = action_scores(np.array([0.0, 1.0, 0.0]), noun / noun.sum(), None, "product", space)
        pairs = space.action_pairs()
        assert np.all(scores[pairs[:, 0] != 1] == 0)
        assert scores.sum() == pytest.approx(1.0, abs=1e-6)

    def test_head_mode_is_softmax(self, rng):
        scores = action_scores(None, None, rng.standard_normal((4, 6)), "head", _space(2, 3, 6))
        np.testing.assert_allclose(scores.sum(axis=1), 1.0, atol=1e-6)

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="unknown action scoring mode"):
            action_scores(np.ones(2), np.ones(2), None, "mix", _space(2, 2, 2))


class TestReport:
    def test_perfect_predictor(self):
        samples = [_sample(i, i % 3, i % 4, i % 5, participant="U" if i < 4 else "A") for i in range(20)]
        space = _space(3, 4, 5, tails={"verb": [2], "action": [4]}, unseen={"U"})
        probs = {task: np.eye(size)[[s.label(task) for s in samples]]
                 for task, size in (("verb", 3), ("noun", 4), ("action", 5))}
        report = build_report(probs, samples, space, k=1)
        for task in ("verb", "noun", "action"):
            for partition in ("overall", "unseen"):
                assert report.value(task, partition) == 100.0
        assert report.value("verb", "tail") == 100.0
        assert report.value("noun", "tail") is None

    def test_unseen_absent_without_unseen_participants(self, rng):
        samples = [_sample(i, i % 3, i % 4, i % 5) for i in range(12)]
        probs = {task: rng.random((12, size)) for task, size in (("verb", 3), ("noun", 4), ("action", 5))}
        report = build_report(probs, samples, _space(3, 4, 5), k=2)
        assert all(report.value(task, "unseen") is None for task in ("verb", "noun", "action"))
        assert "--" in render_table({"Run": report})

    def test_matches_naive_recomputation(self, rng):
        n = 50
        labels = {"verb": rng.integers(0, 6, n), "noun": rng.integers(0, 8, n), "action": rng.integers(0, 10, n)}
        participants = rng.choice(["A", "B", "C"], size=n)
        samples = [_sample(i, int(labels["verb"][i]), int(labels["noun"][i]), int(labels["action"][i]),
                           str(participants[i])) for i in range(n)]
        tails = {"verb": [4, 5], "noun": [6, 7], "action": [7, 8, 9]}
        space = _space(6, 8, 10, tails=tails, unseen={"C"})
        probs = {task: rng.random((n, size)) for task, size in (("verb", 6), ("noun", 8), ("action", 10))}
        report = build_report(probs, samples, space, k=5)

        for task, size in (("verb", 6), ("noun", 8), ("action", 10)):
            targets = labels[task]
            _assert_same(report.value(task, "overall"), _brute_force_recall(probs[task], targets, 5, range(size)))
            unseen = participants == "C"
            _assert_same(report.value(task, "unseen"),
                         _brute_force_recall(probs[task][unseen], targets[unseen], 5, range(size)))
            tail = np.isin(targets, tails[task])
            _assert_same(report.value(task, "tail"), _brute_force_recall(probs[task][tail], targets[tail], 5, tails[task]))

    def test_values_are_percentages(self, rng):
        samples = [_sample(i, i % 3, i % 4, i % 5) for i in range(15)]
        probs = {task: rng.random((15, size)) for task, size in (("verb", 3), ("noun", 4), ("action", 5))}
        report = build_report(probs, samples, _space(3, 4, 5, tails={"noun": [1]}), k=5)
        for row in report_rows({"Run": report}):
            assert row["value"] is None or 0.0 <= row["value"] <= 100.0

    def test_table_layout(self):
        cell = EvalCell(value=12.5, n_samples=3, n_classes=2)
        cells = {task: {p: cell for p in ("overall", "unseen", "tail")} for task in ("verb", "noun", "action")}
        table = render_table({"Proposed": EvalReport(k=5, action_mode="head", n_samples=3, cells=cells)})
        assert "Overall (%)" in table and "Unseen (%)" in table and "Tail (%)" in table
        assert "Proposed" in table and "12.50" in table


class TestEvaluate:
    def test_writes_reports(self, tmp_path, tiny_config, tiny_dataset):
        samples, space = tiny_dataset
        path = save_checkpoint(tmp_path / "m.ckpt", tiny_config, init_params(tiny_config, seed=1))
        eval_samples = select_split(samples, "val") + select_split(samples, "test")
        report, table = evaluate([path], eval_samples, space, k=5, action_mode="product", output_dir=tmp_path)
        stored = json.loads((tmp_path / "reports" / "eval_report.json").read_text())
        assert stored["action_mode"] == "product"
        assert stored["n_samples"] == len(eval_samples)
        assert (tmp_path / "reports" / "eval_report.txt").read_text().strip() == table.strip()

    def test_unknown_mode(self, tiny_dataset):
        samples, space = tiny_dataset
        with pytest.raises(ValueError):
            evaluate([], samples, space, action_mode="sum")
