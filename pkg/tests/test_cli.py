import io
import json
import subprocess
import sys

import numpy as np
import pytest

from stsearch.cli import main, run_cli
from stsearch.core import PosteriorLattice, save_lattice
from stsearch.testkit import random_joint_scorer, synthetic_vocab, uniform_attention_row
from stsearch.scorers import TrieScorer


def run(argv):
    out = io.StringIO()
    try:
        code = main([str(a) for a in argv], out)
    except SystemExit as exc:
        code = exc.code
    return code, out.getvalue()


@pytest.fixture
def synth(tmp_path):
    d = tmp_path / "fx"
    code, out = run(["synth", "--out-dir", d, "--vocab-size", 12, "--length", 5, "--seed", 3, "--noise", 0.2])
    assert code == 0
    return d, json.loads(out)


def json_lines(text):
    return [json.loads(x) for x in text.splitlines()]


class TestDecode:
    @pytest.mark.parametrize("mode", ["ctc-greedy", "joint-label", "joint-time"])
    def test_recovers_reference(self, synth, mode):
        d, info = synth
        code, out = run(["decode", "--mode", mode, "--lattice", d / "lattice.json", "--scorer", d / "scorer.json"])
        assert code == 0
        assert " ".join(json_lines(out)[0]["tokens"]) == info["reference"]

    def test_nbest_lines(self, synth):
        d, _ = synth
        code, out = run(["decode", "--mode", "joint-time", "--lattice", d / "lattice.json", "--scorer",
                         d / "scorer.json", "--beam", 5, "--nbest", 3])
        rows = json_lines(out)
        assert code == 0 and [r["rank"] for r in rows] == [1, 2, 3]
        assert [r["score"] for r in rows] == sorted((r["score"] for r in rows), reverse=True)
        assert all(len(r["delays"]) == len(r["tokens"]) for r in rows)

    def test_deterministic_bytes(self, synth):
        d, _ = synth
        argv = ["decode", "--mode", "joint-label", "--lattice", d / "lattice.json", "--scorer", d / "scorer.json",
                "--beam", 6, "--nbest", 6]
        assert run(argv)[1] == run(argv)[1]

    def test_binary_lattice(self, tmp_path):
        d = tmp_path / "b"
        run(["synth", "--out-dir", d, "--binary", "--seed", 1])
        code, out = run(["decode", "--mode", "ctc-greedy", "--lattice", d / "lattice.blat"])
        assert code == 0 and json_lines(out)[0]["tokens"] == (d / "ref.txt").read_text().split()

    def test_unknown_mode_exits_one(self, synth):
        d, _ = synth
        assert run(["decode", "--mode", "nope", "--lattice", d / "lattice.json"])[0] == 1

    def test_missing_scorer_exits_one(self, synth):
        d, _ = synth
        assert run(["decode", "--mode", "joint-time", "--lattice", d / "lattice.json"])[0] == 1

    def test_vocab_mismatch_exits_two(self, synth, tmp_path, capsys):
        d, _ = synth
        other = synthetic_vocab(9)
        TrieScorer(other, uniform_attention_row(other)).save(tmp_path / "other.json")
        code, _ = run(["decode", "--mode", "joint-time", "--lattice", d / "lattice.json", "--scorer",
                       tmp_path / "other.json"])
        assert code == 2 and "error[VOCAB]" in capsys.readouterr().err

    def test_malformed_lattice_exits_two(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        assert run(["decode", "--mode", "ctc-greedy", "--lattice", p])[0] == 2
        assert "error[PARSE]" in capsys.readouterr().err

    def test_missing_file_exits_two(self, tmp_path):
        assert run(["decode", "--mode", "ctc-greedy", "--lattice", tmp_path / "nope.json"])[0] == 2

    def test_multi_decoder(self, synth, tmp_path):
        d, info = synth
        scorer = json.loads((d / "scorer.json").read_text())
        stage2 = {"conditions": [{"tokens": info["reference"].split(), "scorer": scorer}], "fallback": scorer}
        (tmp_path / "s2.json").write_text(json.dumps(stage2))
        code, out = run(["decode", "--mode", "multi-decoder", "--lattice", d / "lattice.json", "--scorer",
                         d / "scorer.json", "--stage2", tmp_path / "s2.json", "--stage1-out", tmp_path / "s1.jsonl"])
        assert code == 0
        assert " ".join(json_lines(out)[0]["tokens"]) == info["reference"]
        assert json_lines((tmp_path / "s1.jsonl").read_text())[0]["rank"] == 1

    @pytest.mark.parametrize("variant", ["greedy", "graves", "tsd", "alsd"])
    def test_transducer_modes(self, tmp_path, variant):
        sc = random_joint_scorer(np.random.default_rng(0), 4, 3, 4)
        sc.save(tmp_path / "j.json")
        code, out = run(["decode", "--mode", f"transducer-{variant}", "--joint", tmp_path / "j.json", "--beam", 3])
        row = json_lines(out)[0]
        assert code == 0 and len(row["tokens"]) == len(row["delays"])


class TestStream:
    def test_outputs_and_files(self, synth, tmp_path):
        d, info = synth
        ev, fig = tmp_path / "ev.jsonl", tmp_path / "ev.png"
        code, out = run(["stream", "--lattice", d / "lattice.json", "--scorer", d / "scorer.json", "--block-size", 4,
                         "--events", ev, "--plot", fig])
        row = json_lines(out)[0]
        assert code == 0 and " ".join(row["tokens"]) == info["reference"]
        assert row["al_seconds"] == pytest.approx(row["al_frames"] * 0.04)
        assert ev.exists() and fig.exists()

    def test_label_sync_local_agreement(self, synth):
        d, info = synth
        code, out = run(["stream", "--engine", "label-sync", "--policy", "local-agreement", "--k", 2, "--lattice",
                         d / "lattice.json", "--scorer", d / "scorer.json", "--block-size", 3, "--no-boundary"])
        assert code == 0 and " ".join(json_lines(out)[0]["tokens"]) == info["reference"]

    def test_transducer_engine(self, tmp_path):
        random_joint_scorer(np.random.default_rng(1), 6, 3, 4).save(tmp_path / "j.json")
        code, out = run(["stream", "--engine", "transducer-tsd", "--joint", tmp_path / "j.json", "--block-size", 2])
        assert code == 0 and json_lines(out)[0]["source_len"] == 6

    def test_needs_inputs(self):
        assert run(["stream", "--engine", "time-sync"])[0] == 1

    def test_bad_block_size(self, synth, capsys):
        d, _ = synth
        code, _ = run(["stream", "--lattice", d / "lattice.json", "--scorer", d / "scorer.json", "--block-size", 0])
        assert code == 2 and "error[DOMAIN]" in capsys.readouterr().err


class TestEval:
    def test_bleu_tsv_and_plot(self, tmp_path):
        (tmp_path / "h").write_text("the cat sat on\n")
        (tmp_path / "r").write_text("the cat sat on the mat\n")
        code, out = run(["eval-bleu", "--hyp", tmp_path / "h", "--ref", tmp_path / "r", "--plot", tmp_path / "b.png"])
        header, values = [line.split("\t") for line in out.splitlines()]
        assert code == 0 and header[0] == "bleu" and values[0] == "60.6531"
        assert (tmp_path / "b.png").exists()

    def test_bleu_custom_delimiter(self, tmp_path):
        (tmp_path / "h").write_text("a b c d\n")
        code, out = run(["eval-bleu", "--hyp", tmp_path / "h", "--ref", tmp_path / "h", "--delimiter", ","])
        assert out.splitlines()[1].split(",")[0] == "100.0000"

    def test_bleu_length_mismatch(self, tmp_path):
        (tmp_path / "h").write_text("a\nb\n")
        (tmp_path / "r").write_text("a\n")
        assert run(["eval-bleu", "--hyp", tmp_path / "h", "--ref", tmp_path / "r"])[0] == 2

    def test_al_tsv_and_plot(self, tmp_path):
        logs = []
        for name, delays, X in (("offline", [10, 10], 10), ("wait1", [1, 2, 3, 4], 4)):
            p = tmp_path / f"{name}.jsonl"
            events, read = [], 0
            for i, dl in enumerate(delays):
                if dl > read:
                    events.append({"type": "READ", "frames": dl - read})
                    read = dl
                events.append({"type": "WRITE", "token": f"t{i}", "frames_consumed": dl})
            if X > read:
                events.append({"type": "READ", "frames": X - read})
            p.write_text("\n".join(json.dumps(e) for e in events) + "\n")
            logs.append(p)
        code, out = run(["eval-al", "--events", *logs, "--frame-ms", 10, "--plot", tmp_path / "al.png"])
        rows = [line.split("\t") for line in out.splitlines()]
        assert code == 0 and rows[0][0] == "log"
        assert [r[3] for r in rows[1:]] == ["10.0000", "1.0000", "5.5000"]
        assert rows[-1][0] == "corpus" and rows[-1][4] == "0.0550"
        assert (tmp_path / "al.png").exists()

    def test_al_bad_log(self, tmp_path, capsys):
        p = tmp_path / "e.jsonl"
        p.write_text('{"type": "NOPE"}\n')
        assert run(["eval-al", "--events", p])[0] == 2
        assert "error[PARSE]" in capsys.readouterr().err


class TestMbr:
    def test_consensus(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        a.write_text('{"tokens": ["x", "y", "z"], "score": -2.0}\n{"tokens": ["q"], "score": -0.1}\n')
        b.write_text('{"tokens": ["x", "y", "z"], "score": -3.0}\n')
        code, out = run(["mbr", "--nbest", a, b])
        rows = json_lines(out)
        assert code == 0 and rows[0]["tokens"] == ["x", "y", "z"] and len(rows) == 3

    def test_softmax_flag(self, tmp_path):
        a = tmp_path / "a.jsonl"
        a.write_text('{"tokens": ["x"], "score": -2.0}\n')
        code, _ = run(["mbr", "--nbest", a, "--weighting", "score-softmax", "--temperature", 0])
        assert code == 2

    def test_bad_line(self, tmp_path):
        a = tmp_path / "a.jsonl"
        a.write_text('{"tokens": ["x"]}\n')
        assert run(["mbr", "--nbest", a])[0] == 2


class TestSynthAndValidate:
    def test_synth_files(self, synth):
        d, info = synth
        assert {p.name for p in d.iterdir()} == {"lattice.json", "scorer.json", "ref.txt"}
        assert (d / "ref.txt").read_text().strip() == info["reference"]

    def test_planted(self, tmp_path):
        code, out = run(["synth", "--out-dir", tmp_path, "--vocab-size", 8, "--planted", "2,3,4"])
        assert code == 0 and json.loads(out)["planted"] == [2, 3, 4]

    def test_validate_ok(self, synth):
        d, _ = synth
        assert run(["validate", "--lattice", d / "lattice.json"]) == (0, "ok\n")

    def test_validate_violation(self, tmp_path):
        vocab = synthetic_vocab(6)
        frames = np.full((2, 6), np.log(0.5 / 6))
        save_lattice(PosteriorLattice(frames, vocab), tmp_path / "bad.json")
        code, out = run(["validate", "--lattice", tmp_path / "bad.json"])
        assert code == 2 and out.startswith("violation:")


def test_help_exits_zero():
    assert run_cli(["--help"]) == 0


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "stsearch", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "decode" in proc.stdout
