import json
import os

import numpy as np
import pytest

from flowstyle import config as cfgmod
from flowstyle.cli import main
from flowstyle.dit import DiT, ModelConfig, save_model
from flowstyle.errors import ConfigError
from flowstyle.world import WorldConfig, build_corpus

SMALL_WORLD = """
[world]
n_clean_styles = 3
n_synth_styles = 2
n_holdout_styles = 2
per_clean = 8
per_synth = 4
per_holdout = 2
n_bench_contents = 3
seed = 11
"""

TINY_MODEL = """
[model]
image_size = 64
patch_size = 16
dim = 24
depth = 1
heads = 2
"""

TINY_CURRICULUM = """
[curriculum]
seed = 1
rank = 2
stage_steps = 4,3,4
base_steps = 5
sample_steps = 2
eval_styles = 2
eval_contents = 1
"""

TINY_VIDEO = """
[video]
frames = 2
frame_size = 8,8
patch_size = 4
dim = 16
depth = 1
heads = 2
mlp_ratio = 2
batch_size = 1
steps = 3
n_clips = 3
static_fraction = 0.34
seed = 4
"""


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    build_corpus(str(root), WorldConfig(
        n_clean_styles=3, n_synth_styles=2, n_holdout_styles=2,
        per_clean=8, per_synth=4, per_holdout=2, n_bench_contents=3,
        seed=11))
    return str(root)


@pytest.fixture(scope="module")
def ini(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.ini"
    path.write_text(SMALL_WORLD + TINY_MODEL + TINY_CURRICULUM + TINY_VIDEO)
    return str(path)


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    d = tmp_path_factory.mktemp("model")
    path = str(d / "model.tsty")
    save_model(path, DiT(ModelConfig(image_size=64, patch_size=16, dim=24,
                                     depth=1, heads=2), seed=3))
    return path


class TestConfigFile:
    def test_defaults_without_file(self):
        cfg = cfgmod.load_config(None)
        assert cfg["curriculum"]["stage_steps"] == (1500, 1000, 1500)
        assert cfg["model"]["dim"] == 128
        assert cfg["video"]["motion_threshold"] == 0.995

    def test_overrides_applied(self, ini):
        cfg = cfgmod.load_config(ini)
        assert cfg["model"]["dim"] == 24
        assert cfg["curriculum"]["stage_steps"] == (4, 3, 4)
        assert cfgmod.video_config(cfg).frame_size == (8, 8)

    def test_comments_allowed(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text("# top comment\n[model]\ndim = 32  # inline\n")
        assert cfgmod.load_config(str(p))["model"]["dim"] == 32

    def test_unknown_section_rejected(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text("[modle]\ndim = 32\n")
        with pytest.raises(ConfigError, match="unknown section"):
            cfgmod.load_config(str(p))

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text("[curriculum]\nsint_ratio = 0.3\n")
        with pytest.raises(ConfigError, match="unknown key"):
            cfgmod.load_config(str(p))

    def test_malformed_value_rejected(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text("[curriculum]\nrank = wide\n")
        with pytest.raises(ConfigError, match="not a valid"):
            cfgmod.load_config(str(p))

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="does not exist"):
            cfgmod.load_config(str(tmp_path / "absent.ini"))

    def test_snapshot_roundtrip_and_stable_bytes(self, ini, tmp_path):
        cfg = cfgmod.load_config(ini)
        a = tmp_path / "a.ini"
        b = tmp_path / "b.ini"
        run = {"subcommand": "train", "seed": 3, "resume": False}
        cfgmod.write_snapshot(str(a), cfg, run)
        cfgmod.write_snapshot(str(b), cfg, run)
        assert a.read_bytes() == b.read_bytes()
        assert cfgmod.load_config(str(a)) == cfg

    def test_snapshot_rejects_undeclared_run_key(self, tmp_path):
        with pytest.raises(ConfigError):
            cfgmod.write_snapshot(str(tmp_path / "x.ini"),
                                  cfgmod.load_config(None), {"typo": 1})


class TestGenData:
    def test_generates_and_refuses_then_forces(self, ini, tmp_path, capsys):
        out = str(tmp_path / "corpus")
        assert main(["gen-data", "--config", ini, "--out", out]) == 0
        shown = capsys.readouterr().out
        assert "clean: 24" in shown
        assert os.path.exists(os.path.join(out, "resolved.ini"))
        first = open(os.path.join(out, "clean.jsonl"), "rb").read()

        assert main(["gen-data", "--config", ini, "--out", out]) == 2
        assert "--force" in capsys.readouterr().err

        assert main(["gen-data", "--config", ini, "--out", out,
                     "--force"]) == 0
        second = open(os.path.join(out, "clean.jsonl"), "rb").read()
        assert first == second


class TestTrain:
    def test_stage_one_then_resume_all_then_baseline(self, ini, corpus,
                                                     tmp_path, capsys):
        out = str(tmp_path / "run")
        assert main(["train", "--config", ini, "--corpus", corpus,
                     "--out", out, "--stage", "1"]) == 0
        assert os.path.exists(os.path.join(out, "q1", "adapter.tsty"))
        assert not os.path.exists(os.path.join(out, "q2"))

        # finished stages are reused, the rest trained
        assert main(["train", "--config", ini, "--corpus", corpus,
                     "--out", out, "--stage", "all", "--resume"]) == 0
        for stage in ("q1", "q2", "q3"):
            assert os.path.exists(os.path.join(out, stage, "heldout.jsonl"))

        # rerunning without --resume refuses
        assert main(["train", "--config", ini, "--corpus", corpus,
                     "--out", out]) == 2

        capsys.readouterr()
        assert main(["train", "--config", ini, "--corpus", corpus,
                     "--out", out, "--baseline"]) == 0
        assert "naive heldout" in capsys.readouterr().out
        summary = json.load(open(os.path.join(out, "naive_summary.json")))
        assert summary["naive"]["heldout"]["n"] == 2

    def test_missing_corpus_is_io_error(self, ini, tmp_path, capsys):
        code = main(["train", "--config", ini,
                     "--corpus", str(tmp_path / "nowhere"),
                     "--out", str(tmp_path / "run2")])
        assert code == 4
        assert "nowhere" in capsys.readouterr().err


class TestSample:
    def style_path(self, corpus):
        import glob
        return sorted(glob.glob(os.path.join(corpus, "images",
                                             "*_target.ppm")))[0]

    def content_path(self, corpus):
        import glob
        return sorted(glob.glob(os.path.join(corpus, "images",
                                             "*_content.ppm")))[0]

    def test_ppm_content_deterministic(self, corpus, checkpoint, tmp_path):
        args = ["sample", "--checkpoint", checkpoint,
                "--style", self.style_path(corpus),
                "--content", self.content_path(corpus),
                "--steps", "2", "--seed", "5"]
        a = str(tmp_path / "a.ppm")
        b = str(tmp_path / "b.ppm")
        assert main(args + ["--out", a]) == 0
        assert main(args + ["--out", b]) == 0
        assert open(a, "rb").read() == open(b, "rb").read()
        assert os.path.exists(str(tmp_path / "a.resolved.ini"))

    def test_descriptor_content_prints_metrics(self, corpus, checkpoint,
                                               tmp_path, capsys):
        line = open(os.path.join(corpus, "bench_contents.jsonl")).readline()
        desc_file = tmp_path / "scene.json"
        desc_file.write_text(line)
        assert main(["sample", "--checkpoint", checkpoint,
                     "--style", self.style_path(corpus),
                     "--content", str(desc_file),
                     "--out", str(tmp_path / "out.ppm"),
                     "--steps", "2"]) == 0
        shown = capsys.readouterr().out
        assert "style_sim" in shown and "cpc@0.5" in shown

    def test_wide_content_logs_style_resize(self, corpus, checkpoint,
                                            tmp_path, capsys):
        line = json.loads(
            open(os.path.join(corpus, "bench_contents.jsonl")).readline())
        line["size"] = [32, 64]
        desc_file = tmp_path / "wide.json"
        desc_file.write_text(json.dumps(line))
        assert main(["sample", "--checkpoint", checkpoint,
                     "--style", self.style_path(corpus),
                     "--content", str(desc_file),
                     "--out", str(tmp_path / "wide.ppm"),
                     "--steps", "1"]) == 0
        assert "64x64 -> 32x32" in capsys.readouterr().out

    def test_missing_checkpoint_is_io_error(self, corpus, tmp_path, capsys):
        assert main(["sample", "--checkpoint", str(tmp_path / "no.tsty"),
                     "--style", self.style_path(corpus),
                     "--content", self.content_path(corpus),
                     "--out", str(tmp_path / "x.ppm")]) == 4
        capsys.readouterr()

    def test_bad_prompt_id_is_config_error(self, corpus, checkpoint,
                                           tmp_path, capsys):
        assert main(["sample", "--checkpoint", checkpoint,
                     "--style", self.style_path(corpus),
                     "--content", self.content_path(corpus),
                     "--out", str(tmp_path / "x.ppm"),
                     "--prompt-id", "99", "--steps", "1"]) == 2
        assert "prompt" in capsys.readouterr().err


class TestEval:
    def test_full_sweep_and_determinism(self, ini, corpus, checkpoint,
                                        tmp_path, capsys):
        out = str(tmp_path / "eval")
        assert main(["eval", "--config", ini, "--corpus", corpus,
                     "--checkpoint", checkpoint, "--out", out]) == 0
        shown = capsys.readouterr().out
        assert "cpc@0.5" in shown and "cpc@0.3:0.9" in shown
        lines = open(os.path.join(out, "eval.jsonl")).read().splitlines()
        # 2 held-out styles x 3 bench scenes, plus the aggregate footer
        assert len(lines) == 7
        agg = json.loads(lines[-1])["aggregates"]
        assert agg["n"] == 6
        assert "cpc_range_mean" in agg

        again = str(tmp_path / "eval2")
        assert main(["eval", "--config", ini, "--corpus", corpus,
                     "--checkpoint", checkpoint, "--out", again]) == 0
        assert (open(os.path.join(out, "eval.jsonl"), "rb").read()
                == open(os.path.join(again, "eval.jsonl"), "rb").read())


class TestVideoCommands:
    def test_train_then_propagate(self, ini, tmp_path, capsys):
        out = str(tmp_path / "vrun")
        assert main(["video-train", "--config", ini, "--out", out]) == 0
        shown = capsys.readouterr().out
        assert "motion filter kept 2/3" in shown
        assert os.path.exists(os.path.join(out, "video.tsty"))
        report = json.load(open(os.path.join(out, "filter_report.json")))
        assert report["discarded"] == ["clip000"]

        clip_dir = os.path.join(out, "clips", "clip001")
        prop = str(tmp_path / "prop")
        assert main(["video-propagate",
                     "--checkpoint", os.path.join(out, "video.tsty"),
                     "--source", clip_dir,
                     "--first-frame",
                     os.path.join(clip_dir, "stylized_000.ppm"),
                     "--out", prop, "--steps", "2", "--seed", "1"]) == 0
        frames = sorted(f for f in os.listdir(prop) if f.endswith(".ppm"))
        assert frames == ["propagated_000.ppm", "propagated_001.ppm"]

        prop2 = str(tmp_path / "prop2")
        main(["video-propagate",
              "--checkpoint", os.path.join(out, "video.tsty"),
              "--source", clip_dir,
              "--first-frame", os.path.join(clip_dir, "stylized_000.ppm"),
              "--out", prop2, "--steps", "2", "--seed", "1"])
        a = open(os.path.join(prop, "propagated_001.ppm"), "rb").read()
        b = open(os.path.join(prop2, "propagated_001.ppm"), "rb").read()
        assert a == b

    def test_bad_config_value_exits_two(self, tmp_path, capsys):
        p = tmp_path / "bad.ini"
        p.write_text("[video]\nframes = 1\n")
        assert main(["video-train", "--config", str(p),
                     "--out", str(tmp_path / "v")]) == 2
        assert "frames" in capsys.readouterr().err
