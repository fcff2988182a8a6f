import json

import pytest

from trans_action.exceptions import UsageError
from trans_action.main import main, parse_run_config
from trans_action.utils.config import read_config_file

TINY = """\
# small enough to train in seconds
n_samples = 40
n_frames = 4
d_rgb = 8
d_flow = 8
d_obj = 8
n_verbs = 3
n_nouns = 4
n_actions = 5
heads = 2
n_participants = 4
epochs = 2
batch_size = 8
checkpoint_every = 1
top_k = 2
progress = false
seed = 7
"""


@pytest.fixture
def tiny_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return str(path)


@pytest.fixture
def generated(tmp_path, tiny_file):
    out = tmp_path / "run"
    assert main(["generate", "--config", tiny_file, "--output-dir", str(out)]) == 0
    return out


def _data_flags(out):
    return ["--features", str(out / "data" / "features.tact"), "--annotations", str(out / "data" / "annotations.csv")]


class TestParsing:
    def test_flags_override_config_file(self, tiny_file):
        command, run = parse_run_config(["train", "--config", tiny_file, "--epochs", "9", "--output-dir", "x"])
        assert command == "train"
        assert run.epochs == 9
        assert run.d_rgb == 8
        assert run.progress is False

    def test_checkpoint_list_is_comma_separated(self):
        _, run = parse_run_config(["evaluate", "--checkpoints", "a.ckpt, b.ckpt"])
        assert run.checkpoints == ["a.ckpt", "b.ckpt"]

    def test_unknown_config_key_names_line(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("seed = 1\nlearning_rat = 0.1\n")
        with pytest.raises(UsageError, match="2: unknown config key 'learning_rat'"):
            read_config_file(str(path))


class TestExitCodes:
    def test_unknown_flag(self, tmp_path):
        assert main(["train", "--no-such-flag", "1", "--output-dir", str(tmp_path)]) == 1

    def test_unknown_subcommand(self):
        assert main(["fit"]) == 1

    def test_features_without_annotations(self, tmp_path):
        assert main(["train", "--features", "f.tact", "--output-dir", str(tmp_path)]) == 1

    def test_invalid_value(self, tmp_path):
        assert main(["gradcheck", "--precision", "16", "--output-dir", str(tmp_path)]) == 1

    def test_missing_data_files(self, tmp_path, capsys):
        code = main(["train", "--features", str(tmp_path / "nope.tact"),
                     "--annotations", str(tmp_path / "nope.csv"), "--output-dir", str(tmp_path)])
        assert code == 2
        assert capsys.readouterr().err.startswith("error:")

    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "absent.cfg")]) == 2

    def test_bad_config_key(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("epoch = 3\n")
        assert main(["train", "--config", str(path)]) == 1

    def test_evaluate_needs_checkpoints(self, generated):
        assert main(["evaluate", *_data_flags(generated), "--output-dir", str(generated)]) == 1


class TestCommands:
    def test_gradcheck_writes_report_and_config(self, tmp_path):
        assert main(["gradcheck", "--gradcheck-entries", "5", "--output-dir", str(tmp_path)]) == 0
        report = (tmp_path / "reports" / "gradcheck.txt").read_text()
        assert "model_forward" in report and "FAIL" not in report
        assert "gradcheck_entries = 5" in (tmp_path / "effective_config.txt").read_text()

    def test_generate_train_evaluate(self, generated, tiny_file, capsys):
        assert main(["train", "--config", tiny_file, *_data_flags(generated), "--output-dir", str(generated)]) == 0
        final = generated / "checkpoints" / "final.ckpt"
        assert final.is_file()
        assert (generated / "logs" / "verb_frequencies.tsv").is_file()
        assert (generated / "logs" / "run.log").is_file()

        code = main(["evaluate", "--config", tiny_file, *_data_flags(generated), "--output-dir", str(generated),
                     "--checkpoints", f"{final},{final}", "--action-mode", "product"])
        assert code == 0
        assert "Overall (%)" in capsys.readouterr().out
        stored = json.loads((generated / "reports" / "eval_report.json").read_text())
        assert stored["action_mode"] == "product"

    def test_same_seed_gives_identical_metrics(self, tmp_path, generated, tiny_file):
        logs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["train", "--config", tiny_file, *_data_flags(generated), "--output-dir", str(out)]) == 0
            logs.append((out / "logs" / "metrics.jsonl").read_bytes())
        assert logs[0] == logs[1]

    def test_echoed_config_reproduces_the_run(self, generated, tiny_file):
        assert main(["train", "--config", tiny_file, *_data_flags(generated), "--output-dir", str(generated)]) == 0
        echoed = (generated / "effective_config.txt").read_text()
        metrics = (generated / "logs" / "metrics.jsonl").read_bytes()

        assert main(["train", "--config", str(generated / "effective_config.txt")]) == 0
        assert (generated / "effective_config.txt").read_text() == echoed
        assert (generated / "logs" / "metrics.jsonl").read_bytes() == metrics

    def test_frequency_tables_from_an_earlier_run(self, tmp_path, generated, tiny_file):
        assert main(["train", "--config", tiny_file, *_data_flags(generated), "--output-dir", str(generated)]) == 0
        tables = generated / "logs"
        (tables / "verb_frequencies.tsv").write_text("0\t9\n1\t9\n2\t1\n")

        out = tmp_path / "reuse"
        code = main(["train", "--config", tiny_file, *_data_flags(generated), "--output-dir", str(out),
                     "--frequency-dir", str(tables)])
        assert code == 0
        assert (out / "logs" / "verb_frequencies.tsv").read_text() == "0\t9\n1\t9\n2\t1\n"
        assert "Loss class frequencies read from" in (out / "logs" / "run.log").read_text()

    def test_missing_frequency_dir(self, tmp_path, generated, tiny_file):
        code = main(["train", "--config", tiny_file, *_data_flags(generated), "--output-dir", str(tmp_path / "x"),
                     "--frequency-dir", str(tmp_path / "nowhere")])
        assert code == 2
