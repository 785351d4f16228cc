"""Command-line surface: config resolution, commands, exit codes, rerun
byte-stability.  Commands run in-process through cli.main."""

import json
import os

import numpy as np
import pytest

from syncforge import cli
from syncforge.data import generate_corpus, load_corpus, save_corpus
from syncforge.errors import InvalidConfig
from syncforge.nn.checkpoint import load_checkpoint

TINY = {
    "data": {"n_videos": 8, "length": 40},
    "batch": {"B": 4, "N_h": 3, "N_e": 2, "w_e": 0.1},
    "train": {"epochs_main": 2, "epochs_bn_tune": 1, "bn_refresh_steps": 4,
              "steps_per_epoch": 3, "channels": [4, 8], "embed_dim": 8,
              "heldout_videos": 2},
}


def write_config(tmp_path, doc, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def snapshot(out_dir):
    """Bytes of every output file except the timestamped sidecar log."""
    out = {}
    for root, _, files in os.walk(out_dir):
        for fn in files:
            if fn == "run.log":
                continue
            path = os.path.join(root, fn)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, out_dir)] = fh.read()
    return out


class TestResolveConfig:
    def test_desk_defaults(self):
        resolved = cli.resolve_config()
        assert resolved["preset"] == "desk"
        assert resolved["seed"] == 0
        assert resolved["data"]["n_videos"] == 24
        assert resolved["train"]["loss"] == "bbce"
        assert resolved["mel"]["n_mels"] == 80

    def test_paper_preset(self):
        resolved = cli.resolve_config(preset="paper")
        assert resolved["preset"] == "paper"
        assert resolved["batch"]["B"] == 256
        assert resolved["train"]["epochs_main"] == 600

    def test_file_overrides_preset(self, tmp_path):
        path = write_config(tmp_path, {"train": {"loss": "infonce"},
                                       "seed": 5})
        resolved = cli.resolve_config(config_path=path)
        assert resolved["train"]["loss"] == "infonce"
        assert resolved["seed"] == 5
        # untouched keys keep preset values
        assert resolved["train"]["epochs_main"] == 40

    def test_flags_override_file(self, tmp_path):
        path = write_config(tmp_path, {"train": {"loss": "infonce"},
                                       "seed": 5})
        resolved = cli.resolve_config(config_path=path, seed=9, loss="bce")
        assert resolved["seed"] == 9
        assert resolved["train"]["loss"] == "bce"

    def test_file_can_select_preset(self, tmp_path):
        path = write_config(tmp_path, {"preset": "paper"})
        assert cli.resolve_config(config_path=path)["batch"]["B"] == 256

    def test_flag_preset_beats_file_preset(self, tmp_path):
        path = write_config(tmp_path, {"preset": "paper"})
        resolved = cli.resolve_config(config_path=path, preset="desk")
        assert resolved["batch"]["B"] == 8

    @pytest.mark.parametrize("doc,msg", [
        ({"trian": {}}, "unknown config keys: trian"),
        ({"train": {"epochs": 3}}, "unknown train keys"),
        ({"data": {"videos": 3}}, "unknown data keys"),
        ({"train": 7}, "must be a JSON object"),
        ({"preset": "cluster"}, "unknown preset"),
    ])
    def test_rejects_unknown_structure(self, tmp_path, doc, msg):
        path = write_config(tmp_path, doc)
        with pytest.raises(InvalidConfig, match=msg):
            cli.resolve_config(config_path=path)

    def test_rejects_malformed_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{nope")
        with pytest.raises(InvalidConfig, match="not valid JSON"):
            cli.resolve_config(config_path=str(path))

    def test_rejects_non_object_root(self, tmp_path):
        path = tmp_path / "list.json"
        path.write_text("[1, 2]")
        with pytest.raises(InvalidConfig, match="root must be"):
            cli.resolve_config(config_path=str(path))

    def test_rejects_unknown_cli_preset(self):
        with pytest.raises(InvalidConfig, match="unknown preset"):
            cli.resolve_config(preset="mainframe")


class TestGenData:
    def test_writes_a_loadable_corpus(self, tmp_path):
        cfg = write_config(tmp_path, TINY)
        out = tmp_path / "corpus"
        assert cli.main(["gen-data", "--config", cfg, "--out", str(out)]) == 0
        corpus = load_corpus(str(out))
        assert len(corpus) == 8
        assert corpus.videos[0].length == 40
        resolved = json.loads((out / "resolved_config.json").read_text())
        assert resolved["data"]["n_videos"] == 8
        assert (out / "run.log").exists()

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path, TINY)
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["gen-data", "--config", cfg, "--out", str(a)]) == 0
        assert cli.main(["gen-data", "--config", cfg, "--out", str(b)]) == 0
        assert snapshot(a) == snapshot(b)

    def test_seed_changes_the_corpus(self, tmp_path):
        cfg = write_config(tmp_path, TINY)
        a, b = tmp_path / "a", tmp_path / "b"
        cli.main(["gen-data", "--config", cfg, "--out", str(a)])
        cli.main(["gen-data", "--config", cfg, "--seed", "1", "--out", str(b)])
        ca, cb = load_corpus(str(a)), load_corpus(str(b))
        assert not np.array_equal(ca.videos[0].audio_view,
                                  cb.videos[0].audio_view)


@pytest.fixture(scope="module")
def tiny_cli_run(tmp_path_factory):
    """gen-data + train once; several command tests read from it."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root, TINY)
    data = root / "corpus"
    run = root / "run"
    assert cli.main(["gen-data", "--config", cfg, "--out", str(data)]) == 0
    assert cli.main(["train", "--config", cfg, "--data", str(data),
                     "--out", str(run)]) == 0
    return {"root": root, "config": cfg, "data": str(data), "run": str(run)}


class TestTrain:
    def test_outputs_present(self, tiny_cli_run):
        run = tiny_cli_run["run"]
        for name in ("checkpoint.syc", "diagnostics.jsonl",
                     "resolved_config.json", "training_curves.png", "run.log"):
            assert os.path.exists(os.path.join(run, name)), name
        lines = open(os.path.join(run, "diagnostics.jsonl")).read().splitlines()
        assert len(lines) == 3
        first = json.loads(lines[0])
        assert first["epoch"] == 0 and first["phase"] == 1

    def test_checkpoint_loads_with_metadata(self, tiny_cli_run):
        ckpt = load_checkpoint(os.path.join(tiny_cli_run["run"],
                                            "checkpoint.syc"))
        assert set(ckpt.encoders) == {"visual", "audio"}
        assert ckpt.meta["loss"] == "bbce"
        assert ckpt.meta["diverged"] is False
        assert np.isfinite(ckpt.log_inv_tau)

    def test_rerun_is_byte_identical(self, tiny_cli_run, tmp_path):
        again = tmp_path / "again"
        assert cli.main(["train", "--config", tiny_cli_run["config"],
                         "--data", tiny_cli_run["data"],
                         "--out", str(again)]) == 0
        assert snapshot(tiny_cli_run["run"]) == snapshot(again)

    def test_loss_flag_changes_the_checkpoint(self, tiny_cli_run, tmp_path):
        out = tmp_path / "infonce"
        assert cli.main(["train", "--config", tiny_cli_run["config"],
                         "--data", tiny_cli_run["data"], "--loss", "infonce",
                         "--out", str(out)]) == 0
        resolved = json.loads((out / "resolved_config.json").read_text())
        assert resolved["train"]["loss"] == "infonce"
        a = open(os.path.join(tiny_cli_run["run"], "checkpoint.syc"), "rb").read()
        b = open(out / "checkpoint.syc", "rb").read()
        assert a != b

    def test_missing_corpus_exits_2(self, tmp_path, capsys):
        code = cli.main(["train", "--data", str(tmp_path / "nowhere"),
                         "--out", str(tmp_path / "out")])
        assert code == 2
        assert "no corpus manifest" in capsys.readouterr().err

    def test_divergent_corpus_exits_3_with_checkpoint(self, tmp_path, capsys):
        corpus = generate_corpus(8, 40, seed=3)
        for v in corpus.videos:
            v.audio_view[:] = np.nan
        data = tmp_path / "poisoned"
        save_corpus(corpus, str(data))
        cfg = write_config(tmp_path, TINY)
        out = tmp_path / "out"
        code = cli.main(["train", "--config", cfg, "--data", str(data),
                         "--out", str(out)])
        assert code == 3
        assert "diverged" in capsys.readouterr().err
        ckpt = load_checkpoint(out / "checkpoint.syc")
        assert ckpt.meta["diverged"] is True
        assert (out / "diagnostics.jsonl").read_text() == ""


class TestGradcheckCommand:
    def test_clean_suite_exits_0(self, tmp_path, capsys):
        out = tmp_path / "gc"
        assert cli.main(["gradcheck", "--out", str(out)]) == 0
        report = json.loads((out / "gradcheck.json").read_text())
        assert report["passed"] is True
        assert report["total_instances"] >= 1000
        printed = capsys.readouterr().out
        assert "ok   loss/bbce" in printed
        assert "total instances: 1090" in printed

    def test_injected_fault_exits_1(self, capsys):
        assert cli.main(["gradcheck", "--inject-fault", "kernel/conv2d"]) == 1
        captured = capsys.readouterr()
        assert "kernel/conv2d" in captured.err

    def test_unknown_fault_exits_2(self, capsys):
        assert cli.main(["gradcheck", "--inject-fault", "loss/nope"]) == 2
        assert "unknown fault" in capsys.readouterr().err


@pytest.fixture(scope="module")
def eval_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("evalc")
    doc = {"data": {"n_videos": 4, "length": 68}}
    cfg = write_config(root, doc)
    data = root / "corpus"
    assert cli.main(["gen-data", "--config", cfg, "--out", str(data)]) == 0
    return str(data)


@pytest.fixture(scope="module")
def audit_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("auditc")
    corpus = generate_corpus(5, 80, noise_scale=0.05, seed=2)
    data = root / "corpus"
    save_corpus(corpus, str(data))
    return str(data)


class TestEval:
    def test_oracle_embeddings_are_perfect(self, eval_corpus, tmp_path,
                                           capsys):
        out = tmp_path / "eval"
        assert cli.main(["eval", "--data", eval_corpus, "--checkpoint",
                         "oracle", "--out", str(out)]) == 0
        payload = json.loads((out / "accuracy.json").read_text())
        assert payload["embeddings"] == "oracle"
        assert payload["clip_lengths"] == [5, 7, 9, 11, 13, 15]
        assert all(v == 1.0 for v in payload["accuracy"].values())
        text = (out / "accuracy.txt").read_text()
        assert text.splitlines()[0].split()[-6:] == ["5", "7", "9", "11",
                                                     "13", "15"]
        assert (out / "accuracy.png").exists()
        assert "Clip length" in capsys.readouterr().out

    def test_random_embeddings_run_and_label(self, eval_corpus, tmp_path):
        out = tmp_path / "eval"
        assert cli.main(["eval", "--data", eval_corpus, "--checkpoint",
                         "random", "--out", str(out)]) == 0
        payload = json.loads((out / "accuracy.json").read_text())
        assert payload["embeddings"] == "random"
        assert all(0.0 <= v <= 1.0 for v in payload["accuracy"].values())

    def test_trained_checkpoint_runs(self, tiny_cli_run, eval_corpus,
                                     tmp_path):
        # the tiny training corpus is too short for the full clip table, so
        # score the checkpoint on a longer corpus with the same obs_dim
        out = tmp_path / "eval"
        ckpt = os.path.join(tiny_cli_run["run"], "checkpoint.syc")
        assert cli.main(["eval", "--data", eval_corpus,
                         "--checkpoint", ckpt, "--out", str(out)]) == 0
        payload = json.loads((out / "accuracy.json").read_text())
        assert payload["embeddings"] == "checkpoint"

    def test_rerun_is_byte_identical(self, eval_corpus, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert cli.main(["eval", "--data", eval_corpus, "--checkpoint",
                             "random", "--seed", "3", "--out",
                             str(out)]) == 0
        assert snapshot(a) == snapshot(b)

    def test_missing_checkpoint_exits_2(self, eval_corpus, tmp_path, capsys):
        code = cli.main(["eval", "--data", eval_corpus, "--checkpoint",
                         str(tmp_path / "none.syc"), "--out",
                         str(tmp_path / "out")])
        assert code == 2


class TestAudit:
    def test_oracle_audit_outputs(self, audit_corpus, tmp_path, capsys):
        out = tmp_path / "audit"
        assert cli.main(["audit", "--data", audit_corpus, "--checkpoint",
                         "oracle", "--out", str(out)]) == 0
        lines = (out / "reports.jsonl").read_text().splitlines()
        assert len(lines) == 5
        report = json.loads(lines[0])
        assert report["verdict"] == "keep" and report["offset"] == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["keep"] == 5 and summary["drop"] == 0
        assert summary["thresholds"] == {"min_prob_at_offset": 0.9,
                                         "max_offscreen_ratio": 0.2}
        assert (out / "audit_hist.png").exists()
        assert "keep 5" in capsys.readouterr().out

    def test_missing_video_is_an_error_entry_not_a_crash(self, audit_corpus,
                                                         tmp_path, capsys):
        import shutil

        broken = tmp_path / "broken"
        shutil.copytree(audit_corpus, broken)
        (broken / "v0002.audio.syt").unlink()
        out = tmp_path / "audit"
        assert cli.main(["audit", "--data", str(broken), "--checkpoint",
                         "oracle", "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["n_reports"] == 4
        assert len(summary["errors"]) == 1 and "v0002" in summary["errors"][0]
        assert "errors 1" in capsys.readouterr().out

    def test_rerun_is_byte_identical(self, audit_corpus, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert cli.main(["audit", "--data", audit_corpus, "--checkpoint",
                             "oracle", "--out", str(out)]) == 0
        assert snapshot(a) == snapshot(b)

    def test_trained_checkpoint_sets_tau(self, tiny_cli_run, tmp_path):
        out = tmp_path / "audit"
        ckpt = os.path.join(tiny_cli_run["run"], "checkpoint.syc")
        assert cli.main(["audit", "--data", tiny_cli_run["data"],
                         "--checkpoint", ckpt, "--out", str(out)]) == 0
        report = json.loads(
            (out / "reports.jsonl").read_text().splitlines()[0])
        loaded = load_checkpoint(ckpt)
        assert report["tau"] == pytest.approx(np.exp(-loaded.log_inv_tau))


class TestThreadsFlag:
    def test_rejects_non_positive(self, tmp_path, capsys):
        code = cli.main(["gen-data", "--threads", "0",
                         "--out", str(tmp_path / "o")])
        assert code == 2
        assert "--threads" in capsys.readouterr().err
