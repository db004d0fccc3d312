"""CLI dispatch: exit codes, usage errors, command smoke paths."""

import json

import pytest

from fewshot_dlg.cli import dispatch
from fewshot_dlg.corpus import CorpusFormat, load_corpus, save_corpus
from fewshot_dlg.synthetic import build_task_corpus, build_transfer_corpus


def run_cli(capsys, *argv):
    code = dispatch(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def write_tiny_config(tmp_path, **overrides):
    task = build_task_corpus(10, seed=7)
    transfer = build_transfer_corpus(3, seed=11)
    save_corpus(task, tmp_path / "task.json")
    save_corpus(transfer, tmp_path / "transfer.json")
    values = {
        "transfer_corpus": tmp_path / "transfer.json",
        "main_corpus": tmp_path / "task.json",
        "target_domain": "navigate",
        "ratios": "0.1",
        "runs": "1",
        "base_seed": "5",
        "variant": "HRED",
        "batch_size": "8",
        "exclusions": "STORE_DETAILS",
        "stage1.steps": "8",
        "stage2.max_steps": "8",
        "stage2.eval_every": "4",
        "latent.M": "2",
        "latent.K": "3",
        "latent.embedding_size": "8",
        "latent.hidden_size": "12",
        "latent.context_hidden_size": "12",
        "generator.utterance_hidden": "10",
        "generator.dialogue_hidden": "12",
        "generator.embedding_size": "8",
        "generator.max_decode_len": "5",
    }
    values.update(overrides)
    path = tmp_path / "exp.conf"
    path.write_text("".join(f"{k}={v}\n" for k, v in values.items()), encoding="utf-8")
    return path


class TestDispatchBasics:
    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as exc:
            dispatch(["--help"])
        assert exc.value.code == 0

    def test_unknown_command(self, capsys):
        code, _, err = run_cli(capsys, "frobnicate")
        assert code == 1
        assert "usage error" in err

    def test_no_command(self, capsys):
        code, _, err = run_cli(capsys)
        assert code == 1

    def test_missing_required_flag(self, capsys):
        code, _, err = run_cli(capsys, "prepare-data", "--input", "x.json")
        assert code == 1

    def test_config_error_is_exit_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.conf"
        bad.write_text("bogus_key=1\n", encoding="utf-8")
        code, _, err = run_cli(
            capsys, "--config", str(bad), "train-stage1", "--output", str(tmp_path / "o")
        )
        assert code == 2
        assert "error:" in err
        assert "Traceback" not in err

    def test_missing_file_is_exit_2(self, tmp_path, capsys):
        code, _, err = run_cli(
            capsys, "prepare-data", "--input", str(tmp_path / "nope.json"),
            "--format", "smd", "--output", str(tmp_path / "out.json"),
        )
        assert code == 2


class TestPrepareData:
    def test_smd_to_normalized(self, tmp_path, capsys):
        smd = [
            {
                "dialogue": [
                    {"turn": "driver", "data": {"utterance": "hi there"}},
                    {"turn": "assistant", "data": {"utterance": "hello"}},
                ],
                "scenario": {"uuid": "u1", "task": {"intent": "navigate"}, "kb": {}},
            }
        ]
        src = tmp_path / "smd.json"
        src.write_text(json.dumps(smd), encoding="utf-8")
        out = tmp_path / "norm.json"
        code, stdout, _ = run_cli(
            capsys, "prepare-data", "--input", str(src), "--format", "smd",
            "--output", str(out),
        )
        assert code == 0
        corpus = load_corpus(out, CorpusFormat.NORMALIZED_JSON)
        assert len(corpus) == 1
        assert corpus.dialogues[0].domain == "navigate"

    def test_idempotent_bytes(self, tmp_path, capsys):
        save_corpus(build_task_corpus(4, seed=1), tmp_path / "a.json")
        code, _, _ = run_cli(
            capsys, "prepare-data", "--input", str(tmp_path / "a.json"),
            "--format", "normalized", "--output", str(tmp_path / "b.json"),
        )
        assert code == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


class TestTrainingCommands:
    def test_stage1_stage2_evaluate_chain(self, tmp_path, capsys):
        conf = write_tiny_config(tmp_path, variant="HRED_LAED")
        code, out, err = run_cli(
            capsys, "--config", str(conf), "--log-level", "quiet",
            "train-stage1", "--output", str(tmp_path / "s1"),
        )
        assert code == 0, err
        assert (tmp_path / "s1" / "divae" / "manifest.txt").exists()
        assert (tmp_path / "s1" / "laed" / "manifest.txt").exists()

        code, out, err = run_cli(
            capsys, "--config", str(conf), "--log-level", "quiet",
            "train-stage2", "--stage1", str(tmp_path / "s1"),
            "--output", str(tmp_path / "gen"),
        )
        assert code == 0, err
        assert (tmp_path / "gen" / "manifest.txt").exists()

        code, out, err = run_cli(
            capsys, "evaluate", "--checkpoint", str(tmp_path / "gen"),
            "--corpus", str(tmp_path / "task.json"), "--domain", "navigate",
        )
        assert code == 0, err
        record = json.loads(out.strip().splitlines()[-1])
        assert set(record) == {"bleu", "entity_p", "entity_r", "entity_f1", "n_pairs"}

        code, out, err = run_cli(
            capsys, "inspect-codes", "--checkpoint", str(tmp_path / "s1" / "divae"),
            "--corpus", str(tmp_path / "task.json"), "--top", "3",
        )
        assert code == 0, err
        assert "code" in out

    def test_evaluate_bad_checkpoint(self, tmp_path, capsys):
        (tmp_path / "junk").mkdir()
        code, _, err = run_cli(
            capsys, "evaluate", "--checkpoint", str(tmp_path / "junk"),
            "--corpus", "x.json", "--domain", "d",
        )
        assert code == 2

    def test_run_experiment_writes_report(self, tmp_path, capsys):
        conf = write_tiny_config(tmp_path)
        code, out, err = run_cli(
            capsys, "--config", str(conf), "--log-level", "quiet",
            "run-experiment", "--output", str(tmp_path / "exp"),
        )
        assert code == 0, err
        assert (tmp_path / "exp" / "report.txt").exists()
        assert (tmp_path / "exp" / "runs.json").exists()
        assert "HRED@10%" in out

    def test_seed_flag_overrides_config(self, tmp_path, capsys):
        conf = write_tiny_config(tmp_path)
        code, _, err = run_cli(
            capsys, "--config", str(conf), "--seed", "99", "--log-level", "quiet",
            "run-experiment", "--output", str(tmp_path / "exp2"),
        )
        assert code == 0, err
        runs = json.loads((tmp_path / "exp2" / "runs.json").read_text())
        assert runs[0]["seed"] == 99
