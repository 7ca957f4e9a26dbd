import json

import numpy as np
import pytest

from coretokens import cli
from coretokens import data as dt
from coretokens import tokenset as tks

TINY = ["--classes", "4", "--train-per-class", "10", "--test-per-class", "4", "--epochs", "1",
        "--embed-dim", "8", "--blocks", "1"]


class TestVerbs:
    def test_synth_and_ingest(self, tmp_path):
        assert cli.main(["synth", "--classes", "3", "--per-class", "4", "--out", str(tmp_path / "s.npz"),
                         "--idx-prefix", str(tmp_path / "s")]) == 0
        assert len(dt.load_cache(tmp_path / "s.npz")) == 12
        assert cli.main(["ingest", "--images", str(tmp_path / "s-images.idx"),
                         "--labels", str(tmp_path / "s-labels.idx"), "--out", str(tmp_path / "i.npz")]) == 0
        back = dt.load_cache(tmp_path / "i.npz")
        assert back.labels.tolist() == dt.load_cache(tmp_path / "s.npz").labels.tolist()

    def test_train_writes_buffers(self, tmp_path, capsys):
        out = tmp_path / "t"
        assert cli.main(["train", *TINY, "--policy", "core-tokens", "--R", "0.2", "--out", str(out)]) == 0
        assert "core-tokens:gradlrp" in capsys.readouterr().out
        bufs = sorted((out / "buffers").glob("*.cts"))
        assert len(bufs) == 1
        assert tks.deserialize(bufs[0]).token_method == "gradlrp"
        assert (out / "metrics.csv").exists() and (out / "model.tok").exists()

    def test_inspect_buffer(self, tmp_path, capsys):
        out = tmp_path / "t"
        cli.main(["train", *TINY, "--policy", "core-tokenset", "--R", "0.2", "--out", str(out)])
        capsys.readouterr()
        assert cli.main(["inspect-buffer", "--buffer", str(out / "buffers/task1.cts"),
                         "--out", str(tmp_path / "ib")]) == 0
        info = json.loads(capsys.readouterr().out)
        assert info["stored_tokens"] <= info["budget_limit"]
        assert (tmp_path / "ib/buffer.csv").exists() and (tmp_path / "ib/positions.svg").exists()

    def test_grid_resume_and_plot(self, tmp_path, capsys):
        args = ["grid", *TINY, "--policies", "naive,core-tokens", "--rates", "0.2", "--seed", "0",
                "--out", str(tmp_path / "g")]
        assert cli.main([*args, "--resume"]) == 0
        assert cli.main([*args, "--resume"]) == 0
        assert "(2 resumed)" in capsys.readouterr().out
        assert cli.main(["plot", "--results", str(tmp_path / "g"), "--out", str(tmp_path / "p")]) == 0
        assert (tmp_path / "p/accuracy_vs_memory.svg").exists()


class TestExitCodes:
    def test_missing_required_grid_flags(self, tmp_path):
        assert cli.main(["grid", "--out", str(tmp_path), "--seed", "0"]) == 2

    def test_bad_config_value(self, tmp_path):
        assert cli.main(["grid", "--lr", "-1", "--seed", "0", "--out", str(tmp_path), "--resume"]) == 2

    def test_bad_config_file(self, tmp_path):
        (tmp_path / "c.ini").write_text("[train]\nepochs = lots\n")
        assert cli.main(["train", "--config", str(tmp_path / "c.ini"), "--out", str(tmp_path / "o")]) == 2

    def test_bad_idx(self, tmp_path):
        (tmp_path / "x").write_bytes(b"\x00\x00\x08\x01\x00\x00\x00\x02")
        assert cli.main(["ingest", "--images", str(tmp_path / "x"), "--labels", str(tmp_path / "x"),
                         "--out", str(tmp_path / "o.npz")]) == 3

    def test_corrupt_buffer(self, tmp_path):
        (tmp_path / "b.cts").write_bytes(b"CTS1garbage")
        assert cli.main(["inspect-buffer", "--buffer", str(tmp_path / "b.cts"), "--out", str(tmp_path)]) == 3

    def test_plot_without_runs(self, tmp_path):
        assert cli.main(["plot", "--results", str(tmp_path)]) == 3

    def test_run_failure(self, tmp_path, monkeypatch):
        from coretokens import harness as hs
        monkeypatch.setattr(hs, "run_cell", lambda *a, **k: (_ for _ in ()).throw(RuntimeError("x")))
        assert cli.main(["train", *TINY, "--out", str(tmp_path / "o")]) == 4
        assert cli.main(["grid", *TINY, "--seed", "0", "--out", str(tmp_path / "g"), "--resume"]) == 4

    def test_help(self):
        assert cli.main(["--help"]) == 0
