import json

import numpy as np
import pytest

from rlsum.cli import (
    COMMANDS,
    EXIT_DIVERGED,
    EXIT_MISSING_FILE,
    EXIT_OK,
    EXIT_SCHEMA,
    EXIT_USAGE,
    main,
)
from rlsum.decoding import has_duplicate_trigram
from rlsum.model import load_checkpoint, save_checkpoint
from rlsum.textdata import read_dataset, read_raw_corpus

TRAIN_FLAGS = ["--batch-size", "4", "--max-output-len", "12", "--lr", "0.01"]


@pytest.fixture(autouse=True)
def _scratch_cwd(tmp_path, monkeypatch):
    # commands without an output file drop their manifest in the working directory
    monkeypatch.chdir(tmp_path)


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-synthetic", "--out", str(root / "raw.jsonl"), "--lexicon-out", str(root / "lex.tsv"),
                 "--n-docs", "40", "--seed", "3"]) == EXIT_OK
    assert main(["build-vocab", "--raw", str(root / "raw.jsonl"), "--out", str(root / "vocab.json"),
                 "--input-size", "200", "--output-size", "60"]) == EXIT_OK
    assert main(["prepare", "--raw", str(root / "raw.jsonl"), "--vocab", str(root / "vocab.json"),
                 "--lexicon", str(root / "lex.tsv"), "--out-dir", str(root / "data")]) == EXIT_OK
    assert main(["train", "--train", str(root / "data" / "train.jsonl"), "--vocab", str(root / "vocab.json"),
                 "--valid", str(root / "data" / "valid.jsonl"), "--validate-every", "2",
                 "--out-dir", str(root / "run"), "--max-steps", "2", *TRAIN_FLAGS]) == EXIT_OK
    return root


class TestPipeline:
    def test_synthetic_and_splits(self, pipeline):
        assert len(read_raw_corpus(pipeline / "raw.jsonl")) == 40
        sizes = [len(read_dataset(pipeline / "data" / f"{s}.jsonl")) for s in ("train", "valid", "test")]
        assert sizes == [36, 2, 2]

    def test_train_outputs(self, pipeline):
        names = {p.name for p in (pipeline / "run").iterdir()}
        assert {"ckpt-000000.bin", "last.bin", "best.bin", "trainlog.jsonl", "config.json", "manifest.json"} <= names
        cfg = json.loads((pipeline / "run" / "config.json").read_text())
        assert cfg["batch_size"] == 4 and cfg["gamma"] == 0.9984

    def test_evaluate(self, pipeline, capsys, tmp_path):
        code, out, _ = run(capsys, "evaluate", "--checkpoint", pipeline / "run" / "last.bin", "--vocab", pipeline / "vocab.json",
                           "--data", pipeline / "data" / "test.jsonl", "--report", tmp_path / "r.jsonl",
                           "--hypotheses-out", tmp_path / "h.txt", "--beam-width", "2", "--max-len", "8")
        assert code == EXIT_OK
        summary = json.loads(out)
        assert summary["n"] == 2 and set(summary["f1"]) == {"rouge-1", "rouge-2", "rouge-l"}
        assert len((tmp_path / "h.txt").read_text().splitlines()) == 2
        assert json.loads((tmp_path / "r.jsonl").read_text().splitlines()[-1])["id"] == "mean"
        assert (tmp_path / "r.jsonl.manifest.json").exists()

    def test_summarize_text_and_file(self, pipeline, capsys, tmp_path):
        ckpt, vocab = pipeline / "run" / "last.bin", pipeline / "vocab.json"
        article = read_raw_corpus(pipeline / "raw.jsonl")[0]["article"]
        code, out, _ = run(capsys, "summarize", "--checkpoint", ckpt, "--vocab", vocab, "--text", article, "--max-len", "10")
        assert code == EXIT_OK and len(out.splitlines()) == 1
        assert not has_duplicate_trigram(out.split())
        (tmp_path / "in.txt").write_text(article + "\n" + article + "\n")
        code, _, _ = run(capsys, "summarize", "--checkpoint", ckpt, "--vocab", vocab, "--input", tmp_path / "in.txt",
                         "--out", tmp_path / "out.txt", "--max-len", "10")
        lines = (tmp_path / "out.txt").read_text().splitlines()
        assert code == EXIT_OK and len(lines) == 2 and lines[0] == lines[1] == out.strip()

    def test_summarize_needs_one_source(self, pipeline, capsys):
        code, _, err = run(capsys, "summarize", "--checkpoint", pipeline / "run" / "last.bin", "--vocab", pipeline / "vocab.json")
        assert code == EXIT_USAGE and "--text" in err

    def test_diagnose_same_model(self, pipeline, capsys):
        ckpt = pipeline / "run" / "last.bin"
        code, out, _ = run(capsys, "diagnose", "--checkpoint-a", ckpt, "--checkpoint-b", ckpt, "--vocab", pipeline / "vocab.json",
                           "--data", pipeline / "data" / "valid.jsonl", "--beam-width", "2", "--max-len", "8")
        rows = out.splitlines()
        assert code == EXIT_OK and rows[0].split("\t")[0] == "max_length"
        assert all(float(r.split("\t")[-1]) == 0.0 for r in rows[1:])

    def test_zero_steps(self, pipeline, capsys, tmp_path):
        code, out, _ = run(capsys, "train", "--train", pipeline / "data" / "train.jsonl", "--vocab", pipeline / "vocab.json",
                           "--out-dir", tmp_path / "z", "--max-steps", "0")
        assert code == EXIT_OK and json.loads(out)["steps"] == 0
        assert not (tmp_path / "z" / "last.bin").exists() and (tmp_path / "z" / "ckpt-000000.bin").exists()

    def test_rl_without_warm_start_is_usage_error(self, pipeline, capsys, tmp_path):
        code, _, err = run(capsys, "train", "--train", pipeline / "data" / "train.jsonl", "--vocab", pipeline / "vocab.json",
                           "--out-dir", tmp_path / "rl", "--objective", "rl")
        assert code == EXIT_USAGE and "warm" in err

    def test_rl_warm_start(self, pipeline, capsys, tmp_path):
        code, out, _ = run(capsys, "train", "--train", pipeline / "data" / "train.jsonl", "--vocab", pipeline / "vocab.json",
                           "--out-dir", tmp_path / "rl", "--objective", "ml+rl", "--max-steps", "1",
                           "--warm-start", pipeline / "run" / "last.bin", *TRAIN_FLAGS)
        assert code == EXIT_OK and json.loads(out)["steps"] == 1

    def test_divergence_exit_code(self, pipeline, capsys, tmp_path):
        params = load_checkpoint(pipeline / "run" / "last.bin")
        params.arrays["b_out"][:] = np.nan
        save_checkpoint(tmp_path / "nan.bin", params)
        code, _, err = run(capsys, "train", "--train", pipeline / "data" / "train.jsonl", "--vocab", pipeline / "vocab.json",
                           "--out-dir", tmp_path / "d", "--objective", "ml+rl", "--warm-start", tmp_path / "nan.bin",
                           "--max-steps", "1", *TRAIN_FLAGS)
        assert code == EXIT_DIVERGED and "diverged" in err
        assert (tmp_path / "d" / "last-good.bin").exists()


class TestRougeCommand:
    def test_identical_files_score_one(self, capsys, tmp_path):
        text = "the cat sat on the mat\nrates rose sharply today\n"
        (tmp_path / "h.txt").write_text(text)
        (tmp_path / "r.txt").write_text(text)
        code, out, _ = run(capsys, "rouge", "--hyp", tmp_path / "h.txt", "--ref", tmp_path / "r.txt")
        assert code == EXIT_OK
        assert json.loads(out)["f1"] == {"rouge-1": 1.0, "rouge-2": 1.0, "rouge-l": 1.0}

    def test_worked_example(self, capsys, tmp_path):
        (tmp_path / "h.txt").write_text("the cat on the mat\n")
        (tmp_path / "r.txt").write_text("the cat sat on the mat\n")
        code, out, _ = run(capsys, "rouge", "--hyp", tmp_path / "h.txt", "--ref", tmp_path / "r.txt", "--no-stem")
        assert json.loads(out)["f1"]["rouge-l"] == pytest.approx(10 / 11, abs=1e-12)

    def test_line_count_mismatch(self, capsys, tmp_path):
        (tmp_path / "h.txt").write_text("a\nb\n")
        (tmp_path / "r.txt").write_text("a\n")
        assert run(capsys, "rouge", "--hyp", tmp_path / "h.txt", "--ref", tmp_path / "r.txt")[0] == EXIT_USAGE

    def test_report_marks_empty(self, capsys, tmp_path):
        (tmp_path / "h.txt").write_text("\nabc\n")
        (tmp_path / "r.txt").write_text("abc\nabc\n")
        run(capsys, "rouge", "--hyp", tmp_path / "h.txt", "--ref", tmp_path / "r.txt", "--report", tmp_path / "rep.jsonl")
        recs = [json.loads(x) for x in (tmp_path / "rep.jsonl").read_text().splitlines()]
        assert any(r.get("empty") for r in recs if r["id"] == 0)


class TestOptions:
    def test_every_command_has_help(self, capsys):
        for name in COMMANDS:
            assert main([name, "--help"]) == EXIT_OK
            assert "--config" in capsys.readouterr().out

    def test_unknown_flag(self, capsys):
        assert run(capsys, "rouge", "--bogus")[0] == EXIT_USAGE

    def test_missing_required(self, capsys):
        assert run(capsys, "rouge", "--hyp", "x")[0] == EXIT_USAGE

    def test_missing_input_file(self, capsys, tmp_path):
        assert run(capsys, "rouge", "--hyp", tmp_path / "nope", "--ref", tmp_path / "nope")[0] == EXIT_MISSING_FILE

    def test_missing_config_file(self, capsys, tmp_path):
        assert run(capsys, "rouge", "--config", tmp_path / "c.json")[0] == EXIT_MISSING_FILE

    def test_schema_error(self, capsys, tmp_path):
        (tmp_path / "v.json").write_text(json.dumps({"format": "rlsum.vocab", "version": 99}))
        (tmp_path / "raw.jsonl").write_text("")
        code = run(capsys, "prepare", "--raw", tmp_path / "raw.jsonl", "--vocab", tmp_path / "v.json", "--out-dir", tmp_path / "o")[0]
        assert code == EXIT_SCHEMA

    def test_config_file_and_flag_priority(self, capsys, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"out": str(tmp_path / "a.jsonl"), "n_docs": 5, "seed": 1}))
        assert run(capsys, "gen-synthetic", "--config", tmp_path / "c.json", "--n-docs", "7")[0] == EXIT_OK
        assert len(read_raw_corpus(tmp_path / "a.jsonl")) == 7
        manifest = json.loads((tmp_path / "a.jsonl.manifest.json").read_text())
        assert manifest["options"]["n_docs"] == 7 and manifest["seed"] == 1

    def test_config_unknown_key(self, capsys, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"out": "x", "colour": 1}))
        code, _, err = run(capsys, "gen-synthetic", "--config", tmp_path / "c.json")
        assert code == EXIT_USAGE and "colour" in err

    def test_config_invalid_json(self, capsys, tmp_path):
        (tmp_path / "c.json").write_text("{")
        assert run(capsys, "gen-synthetic", "--config", tmp_path / "c.json")[0] == EXIT_USAGE

    def test_manifest_is_reproducible(self, capsys, tmp_path):
        for name in ("a", "b"):
            run(capsys, "gen-synthetic", "--out", tmp_path / "raw.jsonl", "--n-docs", "5",
                "--manifest", tmp_path / f"{name}.json")
        a, b = (json.loads((tmp_path / f"{n}.json").read_text()) for n in ("a", "b"))
        assert a == b and len(a["config_hash"]) == 64

    def test_manifest_digests_inputs(self, capsys, tmp_path):
        (tmp_path / "h.txt").write_text("a\n")
        run(capsys, "rouge", "--hyp", tmp_path / "h.txt", "--ref", tmp_path / "h.txt", "--manifest", tmp_path / "m.json")
        m = json.loads((tmp_path / "m.json").read_text())
        assert m["inputs"]["hyp"] == m["inputs"]["ref"] and len(m["inputs"]["hyp"]) == 64

    def test_bad_training_value(self, capsys, tmp_path):
        (tmp_path / "t.jsonl").write_text("")
        (tmp_path / "v.json").write_text("{}")
        code = run(capsys, "train", "--train", tmp_path / "t.jsonl", "--vocab", tmp_path / "v.json",
                   "--out-dir", tmp_path / "o", "--gamma", "3")[0]
        assert code == EXIT_USAGE
