import json

import numpy as np
import pytest

from divsel.cli import main
from divsel.memory import load


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Records file, built memory, corpus, and one dialogue file."""
    root = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(0)
    records = root / "records.jsonl"
    with open(records, "w") as fh:
        for i in range(30):
            v = rng.normal(size=6)
            v /= np.linalg.norm(v)
            fh.write(
                json.dumps(
                    {
                        "id": f"e{i:02d}",
                        "text": f"sample utterance {i} topic{i % 4}",
                        "label": f"intent_{i % 4}",
                        "embedding": list(v),
                    }
                )
                + "\n"
            )
    code = main(["memory", "build", "--in", str(records), "--out", str(root / "mem.divmem")])
    assert code == 0
    code = main(
        [
            "eval", "synth", "--labels", "6", "--per-label", "5", "--ambiguity", "0.5",
            "--instances", "12", "--dim", "16", "--seed", "3", "--out", str(root / "synth"),
        ]
    )
    assert code == 0
    corpus_lines = (root / "synth" / "corpus.jsonl").read_text().splitlines()
    (root / "dialogue.json").write_text(corpus_lines[0] + "\n")
    return root


class TestMemoryCli:
    def test_build_output(self, workspace, capsys):
        mem = load(workspace / "mem.divmem")
        assert len(mem) == 30

    def test_bad_input_exits_nonzero(self, workspace, capsys):
        bad = workspace / "bad.jsonl"
        bad.write_text('{"id": "x", "text": "t", "label": "l", "embedding": [0, 0]}\n')
        code, _, err = run(
            capsys, "memory", "build", "--in", str(bad), "--out", str(workspace / "nope.divmem")
        )
        assert code == 1
        assert "error" in err


class TestRetrieveSelectComposeDecide:
    def test_full_command_chain(self, workspace, capsys):
        mem_path = str(workspace / "synth" / "memory.divmem")
        pool_path = str(workspace / "pool.jsonl")
        code, out, _ = run(
            capsys,
            "retrieve", "--memory", mem_path, "--query", str(workspace / "dialogue.json"),
            "--L", "16", "--lambda-vec", "0.6", "--out", pool_path,
        )
        assert code == 0

        sel_path = str(workspace / "selection.jsonl")
        code, out, _ = run(
            capsys,
            "select", "--pool", pool_path, "--method", "ldra", "--K", "4",
            "--alpha", "0.5", "--tau", "0.0", "--cap", "1", "--mu", "0.05",
            "--out", sel_path,
        )
        assert code == 0
        report = json.loads(out.splitlines()[0])
        assert report["method"] == "ldra"
        assert len(report["ids"]) <= 4

        prompt_path = str(workspace / "prompt.txt")
        code, out, _ = run(
            capsys,
            "compose", "--dialogue", str(workspace / "dialogue.json"),
            "--selection", sel_path, "--budget", "300", "--out", prompt_path,
        )
        assert code == 0
        meta = json.loads(out.splitlines()[0])
        assert meta["token_count"] <= 300

        labels_path = workspace / "labels.txt"
        gold = json.loads((workspace / "dialogue.json").read_text())["gold"]
        labels_path.write_text(f"{gold}\nintent_99\n")
        code, out, _ = run(
            capsys,
            "decide", "--prompt", prompt_path, "--labels", str(labels_path),
            "--verifier", "mock", "--gold", gold,
        )
        assert code == 0
        decision = json.loads(out.splitlines()[0])
        assert decision["decision"] == gold

    def test_raw_text_query_requires_lexical_only(self, workspace, capsys):
        mem_path = str(workspace / "mem.divmem")
        code, _, err = run(
            capsys, "retrieve", "--memory", mem_path, "--query", "sample topic1",
            "--lambda-vec", "0.6",
        )
        assert code == 1
        code, out, _ = run(
            capsys, "retrieve", "--memory", mem_path, "--query", "sample topic1",
            "--lambda-vec", "0", "--L", "5",
        )
        assert code == 0
        assert len(out.strip().splitlines()) == 5

    def test_oracle_method(self, workspace, capsys):
        pool_path = str(workspace / "pool.jsonl")
        code, out, _ = run(
            capsys, "select", "--pool", pool_path, "--method", "oracle", "--K", "2",
            "--alpha", "0.5", "--tau", "0.0", "--cap", "2",
        )
        assert code == 0

    def test_permutation_preserves_token_count(self, workspace, capsys):
        base_args = [
            "compose", "--dialogue", str(workspace / "dialogue.json"),
            "--selection", str(workspace / "selection.jsonl"), "--budget", "300",
        ]
        code, out, _ = run(capsys, *base_args)
        identity_tokens = json.loads(out.splitlines()[0])["token_count"]
        code, out, _ = run(capsys, *base_args, "--permute", "reverse")
        assert code == 0
        assert json.loads(out.splitlines()[0])["token_count"] == identity_tokens
        code, out, _ = run(capsys, *base_args, "--permute", "42")
        assert code == 0
        assert json.loads(out.splitlines()[0])["token_count"] == identity_tokens


class TestBudgetCli:
    def test_model_and_control(self, workspace, capsys):
        code, out, _ = run(
            capsys, "budget", "model", "--N", "1000", "--terms", "8", "--L", "128",
            "--K", "6", "--prompt-tokens", "300", "--gen-tokens", "100",
        )
        assert code == 0
        row = json.loads(out.splitlines()[0])
        assert row["t_total"] > 0

        code, out, _ = run(
            capsys, "budget", "control", "--L", "128", "--K", "6", "--U", "1", "--B", "100",
        )
        assert code == 0
        row = json.loads(out.splitlines()[0])
        assert row["pool_size"] == 128 and row["k"] == 6

    def test_calibrate(self, workspace, capsys):
        runs = workspace / "runs.jsonl"
        with open(runs, "w") as fh:
            for L, K in ((64, 4), (128, 6), (256, 8), (32, 2)):
                fh.write(
                    json.dumps(
                        {
                            "t_ann": 1e-4, "t_div": 1e-6 * L * K, "t_prompt": 1e-4,
                            "t_llm": 0.1, "N": 1000, "terms": 8, "L": L, "K": K,
                            "turns": 2, "prompt_tokens": 300, "gen_tokens": 10,
                        }
                    )
                    + "\n"
                )
        code, out, _ = run(capsys, "budget", "calibrate", "--runs", str(runs))
        assert code == 0
        row = json.loads(out.splitlines()[0])
        assert row["c_sim"] == pytest.approx(1e-6, rel=1e-3)


class TestEvalCli:
    def test_run_and_fairness_deterministic(self, workspace, capsys, tmp_path):
        mem = str(workspace / "synth" / "memory.divmem")
        corpus = str(workspace / "synth" / "corpus.jsonl")
        cfg = tmp_path / "cfg.json"
        cfg.write_text(
            json.dumps(
                {
                    "selection": {"k": 3},
                    "retrieval": {"pool_size": 16},
                    "runs": 2,
                    "fairness": {"token_targets": [220, 260]},
                }
            )
        )
        out_a, out_b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for out in (out_a, out_b):
            code, _, err = run(
                capsys, "eval", "run", "--memory", mem, "--corpus", corpus,
                "--config", str(cfg), "--seed", "5", "--out", str(out),
            )
            assert code == 0
            assert "latency_percentiles" in err
        assert out_a.read_bytes() == out_b.read_bytes()

        fair_a, fair_b = tmp_path / "fa.jsonl", tmp_path / "fb.jsonl"
        for out in (fair_a, fair_b):
            code, _, _ = run(
                capsys, "eval", "fairness", "--memory", mem, "--corpus", corpus,
                "--config", str(cfg), "--seed", "5", "--out", str(out),
            )
            assert code == 0
        assert fair_a.read_bytes() == fair_b.read_bytes()
        rows = [json.loads(l) for l in fair_a.read_text().splitlines()]
        assert rows[0]["type"] == "header"
        assert any(r["type"] == "fairness" for r in rows)

    def test_sweep_and_grid(self, workspace, capsys, tmp_path):
        mem = str(workspace / "synth" / "memory.divmem")
        corpus = str(workspace / "synth" / "corpus.jsonl")
        code, out, _ = run(
            capsys, "eval", "sweep", "--memory", mem, "--corpus", corpus,
            "--k-grid", "1,3", "--alpha-grid", "0.5", "--methods", "ldra,topk",
            "--seeds", "0,1",
        )
        assert code == 0
        rows = [json.loads(l) for l in out.splitlines()]
        assert sum(r["type"] == "sweep" for r in rows) == 4

        grids = tmp_path / "grids.json"
        grids.write_text(json.dumps({"alpha": [0.2, 0.8], "k": [2]}))
        code, out, _ = run(
            capsys, "eval", "grid", "--memory", mem, "--corpus", corpus,
            "--grids", str(grids), "--B", "5", "--lambda-penalty", "1.0",
        )
        assert code == 0
        rows = [json.loads(l) for l in out.splitlines()]
        assert rows[-1]["type"] == "best"


class TestExitCodes:
    def test_invariant_violation_exits_two(self, workspace, capsys, monkeypatch):
        from divsel import harness
        from divsel.errors import InvariantViolation

        def boom(*args, **kwargs):
            raise InvariantViolation("forced for the exit-code contract")

        monkeypatch.setattr(harness, "fairness_suite", boom)
        import divsel.cli as cli

        monkeypatch.setattr(cli.harness, "fairness_suite", boom)
        code, _, err = run(
            capsys, "eval", "fairness",
            "--memory", str(workspace / "synth" / "memory.divmem"),
            "--corpus", str(workspace / "synth" / "corpus.jsonl"),
        )
        assert code == 2
        assert "invariant violation" in err
